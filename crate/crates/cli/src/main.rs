//! `homegate` command-line front end.

use std::error::Error;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use homegate_core::clock::{Clock, ManualClock, SystemClock};
use homegate_core::config::Config;
use homegate_core::enrollment::{EnrollmentState, RequestId};
use homegate_core::gateway::{Decision, Gateway};
use homegate_core::ids::{audit_default_credentials, parse_dictionary, LoginTarget, DEFAULT_DICTIONARY};
use homegate_core::segmentation::{AddrBlock, ZoneRole};
use homegate_core::sim::{fleet_login_endpoints, run_scenario, FleetSpec, PlantedCredential, Scenario};
use homegate_core::store::audit::verify_dir;
use homegate_server::{run_gateway, RunOptions};
use serde::Serialize;

type CliResult<T = ExitCode> = Result<T, Box<dyn Error>>;

#[derive(Parser)]
#[command(name = "homegate", version, about = "Local-first IoT gateway")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create the root identity and empty stores in a data directory.
    Init {
        #[arg(long)]
        data_dir: PathBuf,
        /// 32-byte hex seed for a reproducible root identity.
        #[arg(long)]
        seed: Option<String>,
        #[arg(long)]
        json: bool,
    },
    /// Serve the UDP listener and the operator API until interrupted.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Directory of dashboard files served at `/`.
        #[arg(long)]
        static_dir: Option<PathBuf>,
    },
    /// Inspect and decide enrollment requests.
    Enroll {
        #[command(subcommand)]
        action: EnrollAction,
    },
    /// List registered devices.
    Devices {
        #[command(flatten)]
        target: Target,
        #[arg(long)]
        json: bool,
    },
    /// Inspect and define network zones.
    Zones {
        #[command(subcommand)]
        action: ZonesAction,
    },
    /// Audit log operations.
    Audit {
        #[command(subcommand)]
        action: AuditAction,
    },
    /// Try a default-credential dictionary against a simulated fleet.
    Credscan(CredscanArgs),
    /// Deterministic fleet simulation.
    Sim {
        #[command(subcommand)]
        action: SimAction,
    },
}

/// Where an offline command finds the gateway state.
#[derive(Args, Clone)]
struct Target {
    /// Gateway config file; its data_dir and operator_token are used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Data directory, overriding the config.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Operator token for mutating commands, overriding the config.
    #[arg(long, env = "HOMEGATE_OPERATOR_TOKEN", hide_env_values = true)]
    token: Option<String>,
}

impl Target {
    fn config(&self) -> CliResult<Config> {
        let mut cfg = match &self.config {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        match (&self.data_dir, &self.config) {
            (Some(d), _) => cfg.data_dir = d.clone(),
            (None, None) => return Err("one of --config or --data-dir is required".into()),
            _ => {}
        }
        if self.token.is_some() {
            cfg.operator_token = self.token.clone();
        }
        Ok(cfg)
    }

    fn open(&self) -> CliResult<(Gateway, Option<String>)> {
        let cfg = self.config()?;
        let token = cfg.operator_token.clone();
        let gw = Gateway::open(cfg, Arc::new(SystemClock))?;
        Ok((gw, token))
    }
}

#[derive(Subcommand)]
enum EnrollAction {
    List {
        #[command(flatten)]
        target: Target,
        /// pending, approved, denied or expired.
        #[arg(long)]
        state: Option<String>,
        #[arg(long)]
        json: bool,
    },
    Approve {
        id: String,
        #[arg(long)]
        zone: String,
        #[command(flatten)]
        target: Target,
    },
    Deny {
        id: String,
        #[arg(long, default_value = "")]
        reason: String,
        #[command(flatten)]
        target: Target,
    },
}

#[derive(Subcommand)]
enum ZonesAction {
    List {
        #[command(flatten)]
        target: Target,
        #[arg(long)]
        json: bool,
    },
    Add {
        name: String,
        /// CIDR block, e.g. 10.10.1.0/24.
        range: String,
        /// IOT, REPEATER, OPERATOR or GATEWAY.
        role: String,
        #[command(flatten)]
        target: Target,
    },
    /// Print the compiled firewall ruleset.
    Rules {
        #[command(flatten)]
        target: Target,
    },
}

#[derive(Subcommand)]
enum AuditAction {
    /// Check the hash chain; exits nonzero when broken.
    Verify {
        #[command(flatten)]
        target: Target,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args)]
struct CredscanArgs {
    /// Dictionary of service<TAB>username<TAB>password lines; the built-in
    /// list is used when omitted.
    #[arg(long)]
    dict: Option<PathBuf>,
    /// Size of the simulated fleet.
    #[arg(long, default_value_t = 10)]
    devices: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Plant a credential: INDEX:SERVICE:USERNAME:PASSWORD. Repeatable.
    #[arg(long)]
    plant: Vec<PlantedCredential>,
    #[arg(long)]
    json: bool,
}

#[derive(Subcommand)]
enum SimAction {
    /// Run one scenario and print its report.
    Run {
        #[arg(long, default_value_t = 10)]
        devices: usize,
        #[arg(long, default_value_t = 0)]
        via_repeater: usize,
        /// Virtual seconds of device traffic.
        #[arg(long, default_value_t = 60)]
        duration: u64,
        #[arg(long, default_value = "baseline")]
        scenario: String,
        /// Injection count for replay_attack and rogue_device.
        #[arg(long)]
        count: Option<usize>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Loss probability on every link.
        #[arg(long)]
        loss: Option<f64>,
        #[arg(long)]
        json: bool,
    },
    /// List scenario names.
    Scenarios,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cmd: Command) -> CliResult {
    match cmd {
        Command::Init { data_dir, seed, json } => init(&data_dir, seed.as_deref(), json),
        Command::Run { config, static_dir } => run(&config, static_dir),
        Command::Enroll { action } => enroll(action),
        Command::Devices { target, json } => {
            let (gw, _) = target.open()?;
            let devices = gw.devices();
            if json {
                print_json(&devices)?;
            } else {
                for d in devices {
                    println!(
                        "{}  {:<16} {:<12} {:<15} {} epoch={}",
                        d.device_id,
                        d.name,
                        d.zone,
                        d.address,
                        label(&d.status),
                        d.telemetry_key_epoch
                    );
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Zones { action } => zones(action),
        Command::Audit {
            action: AuditAction::Verify { target, json },
        } => {
            let dir = target.config()?.data_dir;
            if !Gateway::is_initialized(&dir) {
                return Err(format!("{} is not an initialized data directory", dir.display()).into());
            }
            let status = verify_dir(&dir)?;
            if json {
                print_json(&status)?;
            } else {
                println!("{status}");
            }
            Ok(if status.is_ok() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
        Command::Credscan(args) => credscan(args),
        Command::Sim { action } => sim(action),
    }
}

fn print_json<T: Serialize + ?Sized>(v: &T) -> CliResult<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

/// The serde name of a unit enum variant, e.g. `ACTIVE`.
fn label<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        Ok(other) => other.to_string(),
        Err(_) => String::from("?"),
    }
}

fn init(dir: &Path, seed: Option<&str>, json: bool) -> CliResult {
    let seed = match seed {
        None => None,
        Some(s) => {
            let mut out = [0u8; 32];
            hex::decode_to_slice(s, &mut out).map_err(|e| format!("--seed must be 64 hex digits: {e}"))?;
            Some(out)
        }
    };
    std::fs::create_dir_all(dir)?;
    let identity = Gateway::init(dir, seed, &SystemClock)?;
    let cert = &identity.root_cert;
    if json {
        print_json(&serde_json::json!({
            "data_dir": dir,
            "root_serial": hex::encode(cert.serial.0),
            "root_subject": cert.subject,
            "root_public_key": hex::encode(cert.public_key),
            "not_after": cert.not_after,
        }))?;
    } else {
        println!("initialized {}", dir.display());
        println!("root serial {}", hex::encode(cert.serial.0));
        println!("root public key {}", hex::encode(cert.public_key));
    }
    Ok(ExitCode::SUCCESS)
}

fn run(config: &Path, static_dir: Option<PathBuf>) -> CliResult {
    let cfg = Config::load(config)?;
    let rt = if cfg.single_thread {
        tokio::runtime::Builder::new_current_thread()
    } else {
        tokio::runtime::Builder::new_multi_thread()
    }
    .enable_all()
    .build()?;
    rt.block_on(async move {
        let gw = run_gateway(cfg, RunOptions { static_dir }).await?;
        println!("listening http={} udp={}", gw.http_addr, gw.udp_addr);
        shutdown_signal().await;
        eprintln!("shutting down");
        gw.shutdown().await?;
        Ok(ExitCode::SUCCESS)
    })
}

async fn shutdown_signal() {
    #[cfg(unix)]
    {
        use tokio::signal::unix::{signal, SignalKind};
        let mut term = match signal(SignalKind::terminate()) {
            Ok(s) => s,
            Err(_) => {
                let _ = tokio::signal::ctrl_c().await;
                return;
            }
        };
        tokio::select! {
            _ = tokio::signal::ctrl_c() => {}
            _ = term.recv() => {}
        }
    }
    #[cfg(not(unix))]
    {
        let _ = tokio::signal::ctrl_c().await;
    }
}

fn parse_state(s: &str) -> CliResult<EnrollmentState> {
    EnrollmentState::ALL
        .into_iter()
        .find(|st| label(st).eq_ignore_ascii_case(s))
        .ok_or_else(|| format!("unknown state `{s}`").into())
}

fn enroll(action: EnrollAction) -> CliResult {
    match action {
        EnrollAction::List { target, state, json } => {
            let state = state.as_deref().map(parse_state).transpose()?;
            let (gw, _) = target.open()?;
            let list = gw.enrollments().list(state);
            if json {
                print_json(&list)?;
            } else {
                for r in list {
                    println!(
                        "{}  {:<9} {:<16} {:<8} from {}",
                        r.request_id,
                        label(&r.state),
                        r.requested_name,
                        label(&r.csr.role),
                        r.source_address
                    );
                }
            }
        }
        EnrollAction::Approve { id, zone, target } => {
            let rid: RequestId = id.parse().map_err(|_| format!("bad request id `{id}`"))?;
            let (mut gw, token) = target.open()?;
            let payload = gw
                .decide_enrollment(&rid, Decision::Approve { zone }, token.as_deref())?
                .ok_or("approval produced no payload")?;
            gw.flush()?;
            println!(
                "approved {rid} as device {} address {}",
                payload.device_id, payload.address
            );
        }
        EnrollAction::Deny { id, reason, target } => {
            let rid: RequestId = id.parse().map_err(|_| format!("bad request id `{id}`"))?;
            let (mut gw, token) = target.open()?;
            gw.decide_enrollment(&rid, Decision::Deny { reason }, token.as_deref())?;
            gw.flush()?;
            println!("denied {rid}");
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn zones(action: ZonesAction) -> CliResult {
    match action {
        ZonesAction::List { target, json } => {
            let (gw, _) = target.open()?;
            let zones = gw.zones();
            if json {
                print_json(&zones)?;
            } else {
                for z in zones {
                    println!("{:<12} {:<18} {}", z.name, z.range.to_string(), label(&z.role));
                }
            }
        }
        ZonesAction::Add {
            name,
            range,
            role,
            target,
        } => {
            let range: AddrBlock = range.parse()?;
            let role: ZoneRole = role.parse()?;
            let (mut gw, token) = target.open()?;
            let zone = gw.define_zone(&name, range, role, token.as_deref())?;
            gw.flush()?;
            println!("zone {} {} {}", zone.name, zone.range, label(&zone.role));
        }
        ZonesAction::Rules { target } => {
            let (gw, _) = target.open()?;
            print!("{}", gw.policy().render());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn credscan(args: CredscanArgs) -> CliResult {
    let text = match &args.dict {
        Some(p) => std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?,
        None => DEFAULT_DICTIONARY.to_owned(),
    };
    let dict = parse_dictionary(&text)?;
    let mut fleet = fleet_login_endpoints(args.devices, args.seed, &args.plant);
    let mut targets: Vec<&mut dyn LoginTarget> = fleet.iter_mut().map(|t| t as &mut dyn LoginTarget).collect();
    // Attempts are paced in virtual time; the fleet is simulated.
    let clock = ManualClock::new(0);
    let report = audit_default_credentials(&mut targets, &dict, &clock)?;
    if args.json {
        print_json(&report)?;
    } else {
        for f in &report.findings {
            println!("FOUND {f}");
        }
        for t in &report.unreachable {
            println!("UNREACHABLE {t}");
        }
        println!(
            "{} findings, {} attempts over {} targets, {:.1} s virtual",
            report.findings.len(),
            report.attempts,
            args.devices,
            clock.now_ms() as f64 / 1000.0
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn sim(action: SimAction) -> CliResult {
    match action {
        SimAction::Scenarios => {
            for n in Scenario::NAMES {
                println!("{n}");
            }
        }
        SimAction::Run {
            devices,
            via_repeater,
            duration,
            scenario,
            count,
            seed,
            loss,
            json,
        } => {
            let mut scenario: Scenario = scenario.parse()?;
            if let Some(c) = count {
                match &mut scenario {
                    Scenario::ReplayAttack { n } | Scenario::RogueDevice { n } => *n = c,
                    _ => return Err("--count applies to replay_attack and rogue_device only".into()),
                }
            }
            let mut spec = FleetSpec::new(devices, via_repeater, duration, seed);
            if let Some(p) = loss {
                spec.direct_link.loss_prob = p;
                spec.repeater_link.loss_prob = p;
            }
            let report = run_scenario(&spec, scenario)?;
            if json {
                print_json(&report)?;
            } else {
                print!("{report}");
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
