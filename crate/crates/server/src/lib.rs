//! Network front end for the gateway: the UDP datagram listener, the
//! operator HTTP API under `/api/v1`, and the server-sent event stream.
//!
//! All gateway state sits behind one mutex. Handlers take it briefly and
//! never hold it across an await point.

mod api;

use std::io;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use homegate_core::clock::{Clock, SystemClock};
use homegate_core::config::Config;
use homegate_core::gateway::{DatagramOutcome, Gateway, GatewayError, GatewayEvent};
use thiserror::Error;
use tokio::net::{TcpListener, UdpSocket};
use tokio::sync::{broadcast, watch};
use tokio::task::JoinHandle;

pub use api::{router, ApiError, MUTATING_ROUTES};

const EVENT_BUFFER: usize = 1024;
const TICK_PERIOD: Duration = Duration::from_secs(1);

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("address {0} is already in use")]
    PortInUse(SocketAddr),
    #[error("data directory {0} is not initialized; run `homegate init` first")]
    UninitializedDataDir(PathBuf),
    #[error("operator_token must be configured to serve the API")]
    MissingToken,
    #[error(transparent)]
    Gateway(GatewayError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl From<GatewayError> for ServerError {
    fn from(e: GatewayError) -> Self {
        match e {
            GatewayError::UninitializedDataDir(d) => ServerError::UninitializedDataDir(d.into()),
            other => ServerError::Gateway(other),
        }
    }
}

/// State shared by the HTTP handlers and the UDP loop.
pub struct Shared {
    gateway: Mutex<Gateway>,
    events: broadcast::Sender<GatewayEvent>,
    udp: Option<Arc<UdpSocket>>,
}

impl Shared {
    pub fn new(gateway: Gateway, udp: Option<Arc<UdpSocket>>) -> Arc<Self> {
        let (events, _) = broadcast::channel(EVENT_BUFFER);
        Arc::new(Shared {
            gateway: Mutex::new(gateway),
            events,
            udp,
        })
    }

    fn lock(&self) -> MutexGuard<'_, Gateway> {
        // A panic mid-mutation can only happen after the audit append, and
        // the gateway re-derives nothing from in-flight state, so continue.
        self.gateway.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Runs `f` against the gateway, then publishes whatever events it
    /// queued.
    pub fn with<R>(&self, f: impl FnOnce(&mut Gateway) -> R) -> R {
        let mut gw = self.lock();
        let out = f(&mut gw);
        for ev in gw.drain_events() {
            let _ = self.events.send(ev);
        }
        out
    }

    pub fn subscribe(&self) -> broadcast::Receiver<GatewayEvent> {
        self.events.subscribe()
    }

    /// Fire-and-forget datagram to a device, e.g. an approval payload.
    fn send_to(&self, bytes: Vec<u8>, dest: SocketAddr) {
        if let Some(sock) = &self.udp {
            let sock = sock.clone();
            tokio::spawn(async move {
                if let Err(e) = sock.send_to(&bytes, dest).await {
                    eprintln!("udp send to {dest} failed: {e}");
                }
            });
        }
    }
}

/// Handle on a running gateway service.
pub struct RunningGateway {
    pub http_addr: SocketAddr,
    pub udp_addr: SocketAddr,
    shared: Arc<Shared>,
    stop: watch::Sender<bool>,
    tasks: Vec<JoinHandle<()>>,
}

impl RunningGateway {
    pub fn shared(&self) -> &Arc<Shared> {
        &self.shared
    }

    /// Stops all listeners and flushes state to disk.
    pub async fn shutdown(self) -> Result<(), ServerError> {
        let _ = self.stop.send(true);
        // Open event streams never end on their own; don't wait on them forever.
        for mut t in self.tasks {
            if tokio::time::timeout(Duration::from_secs(2), &mut t).await.is_err() {
                t.abort();
            }
        }
        self.shared.with(|gw| gw.flush())?;
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Directory served at `/` (the operator dashboard build).
    pub static_dir: Option<PathBuf>,
}

async fn bind_udp(addr: SocketAddr) -> Result<UdpSocket, ServerError> {
    UdpSocket::bind(addr).await.map_err(|e| match e.kind() {
        io::ErrorKind::AddrInUse => ServerError::PortInUse(addr),
        _ => e.into(),
    })
}

async fn bind_tcp(addr: SocketAddr) -> Result<TcpListener, ServerError> {
    TcpListener::bind(addr).await.map_err(|e| match e.kind() {
        io::ErrorKind::AddrInUse => ServerError::PortInUse(addr),
        _ => e.into(),
    })
}

/// Opens the data directory and starts the UDP listener, the HTTP API and
/// the periodic tick.
pub async fn run_gateway(config: Config, opts: RunOptions) -> Result<RunningGateway, ServerError> {
    run_gateway_with_clock(config, opts, Arc::new(SystemClock)).await
}

pub async fn run_gateway_with_clock(
    config: Config,
    opts: RunOptions,
    clock: Arc<dyn Clock>,
) -> Result<RunningGateway, ServerError> {
    if config.operator_token.is_none() {
        return Err(ServerError::MissingToken);
    }
    if !Gateway::is_initialized(&config.data_dir) {
        return Err(ServerError::UninitializedDataDir(config.data_dir.clone()));
    }
    let udp = Arc::new(bind_udp(config.udp_listen).await?);
    let tcp = bind_tcp(config.http_listen).await?;
    let gateway = Gateway::open(config, clock)?;
    let shared = Shared::new(gateway, Some(udp.clone()));
    let (stop, stop_rx) = watch::channel(false);

    let udp_addr = udp.local_addr()?;
    let http_addr = tcp.local_addr()?;
    let tasks = vec![
        tokio::spawn(udp_loop(shared.clone(), udp, stop_rx.clone())),
        tokio::spawn(tick_loop(shared.clone(), stop_rx.clone())),
        tokio::spawn(http_loop(shared.clone(), tcp, opts, stop_rx)),
    ];
    Ok(RunningGateway {
        http_addr,
        udp_addr,
        shared,
        stop,
        tasks,
    })
}

async fn stopped(mut rx: watch::Receiver<bool>) {
    while !*rx.borrow() {
        if rx.changed().await.is_err() {
            return;
        }
    }
}

async fn udp_loop(shared: Arc<Shared>, sock: Arc<UdpSocket>, stop: watch::Receiver<bool>) {
    let mut buf = vec![0u8; 65_536];
    let stop = stopped(stop);
    tokio::pin!(stop);
    loop {
        tokio::select! {
            _ = &mut stop => return,
            res = sock.recv_from(&mut buf) => {
                let (n, src) = match res {
                    Ok(v) => v,
                    Err(e) => {
                        eprintln!("udp receive failed: {e}");
                        continue;
                    }
                };
                let outcome = shared.with(|gw| gw.handle_datagram(&buf[..n], src));
                if let DatagramOutcome::Enrollment { reply: Some(reply) } = outcome {
                    if let Err(e) = sock.send_to(&reply, src).await {
                        eprintln!("udp reply to {src} failed: {e}");
                    }
                }
            }
        }
    }
}

async fn tick_loop(shared: Arc<Shared>, stop: watch::Receiver<bool>) {
    let mut every = tokio::time::interval(TICK_PERIOD);
    let stop = stopped(stop);
    tokio::pin!(stop);
    loop {
        tokio::select! {
            _ = &mut stop => return,
            _ = every.tick() => {
                shared.with(|gw| gw.tick());
            }
        }
    }
}

async fn http_loop(shared: Arc<Shared>, tcp: TcpListener, opts: RunOptions, stop: watch::Receiver<bool>) {
    let app = router(shared, opts.static_dir);
    let res = axum::serve(tcp, app)
        .with_graceful_shutdown(stopped(stop))
        .await;
    if let Err(e) = res {
        eprintln!("http server stopped: {e}");
    }
}
