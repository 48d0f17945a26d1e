//! Rule-based intrusion detection over the ingest event stream, plus the
//! default-credential audit.
//!
//! | rule | trigger                                                   | severity |
//! |------|-----------------------------------------------------------|----------|
//! | R1   | envelope from an unknown device, per source address       | WARN     |
//! | R2   | replayed sequence number                                  | WARN     |
//! | R3   | `auth_fail_threshold` auth failures within 60 s            | CRIT     |
//! | R4   | more than `flood_rate` clean envelopes/s over a 10 s window | CRIT     |
//! | R5   | ACTIVE device without a clean envelope for over 24 h       | INFO     |
//!
//! Each rule fires at most once per subject per 60 s window.

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::net::SocketAddr;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Clock;
use crate::DeviceId;

pub const DEFAULT_DICTIONARY: &str = include_str!("../data/default_creds.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EventKind {
    Clean,
    UnknownDevice,
    Replay,
    AuthFailure,
    QuarantinedTraffic,
    RevokedTraffic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SecurityEvent {
    pub kind: EventKind,
    pub device_id: Option<DeviceId>,
    pub source: SocketAddr,
    pub at: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AlertRule {
    #[serde(rename = "R1_UNKNOWN")]
    R1Unknown,
    #[serde(rename = "R2_REPLAY")]
    R2Replay,
    #[serde(rename = "R3_AUTH")]
    R3Auth,
    #[serde(rename = "R4_FLOOD")]
    R4Flood,
    #[serde(rename = "R5_SILENT")]
    R5Silent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Severity {
    Info,
    Warn,
    Crit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alert {
    pub alert_id: u64,
    pub rule: AlertRule,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub device_id: Option<DeviceId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<SocketAddr>,
    pub severity: Severity,
    pub at: u64,
    pub detail: String,
    pub acknowledged: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdsConfig {
    pub window_ms: u64,
    pub auth_fail_threshold: u32,
    pub flood_rate: u32,
    pub flood_window_ms: u64,
    pub silence_ms: u64,
    pub auto_quarantine: bool,
}

impl Default for IdsConfig {
    fn default() -> Self {
        Self {
            window_ms: 60_000,
            auth_fail_threshold: 5,
            flood_rate: 10,
            flood_window_ms: 10_000,
            silence_ms: 24 * 3600 * 1000,
            auto_quarantine: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Subject {
    Device(DeviceId),
    Source(SocketAddr),
}

#[derive(Debug, Error)]
#[error("unknown alert {0}")]
pub struct UnknownAlert(pub u64);

/// Detection state plus the append-only alert log.
#[derive(Debug, Default)]
pub struct Sentinel {
    cfg: IdsConfig,
    last_fired: HashMap<(AlertRule, Subject), u64>,
    auth_failures: HashMap<DeviceId, VecDeque<u64>>,
    traffic: HashMap<DeviceId, VecDeque<u64>>,
    last_clean: HashMap<DeviceId, u64>,
    alerts: Vec<Alert>,
    next_id: u64,
}

fn trim(q: &mut VecDeque<u64>, now: u64, window: u64) {
    while q.front().is_some_and(|&t| now.saturating_sub(t) >= window) {
        q.pop_front();
    }
}

impl Sentinel {
    pub fn new(cfg: IdsConfig) -> Self {
        Self {
            cfg,
            next_id: 1,
            ..Default::default()
        }
    }

    /// Restores a persisted alert log. Window state starts empty.
    pub fn with_alerts(cfg: IdsConfig, alerts: Vec<Alert>) -> Self {
        let next_id = alerts.iter().map(|a| a.alert_id).max().unwrap_or(0) + 1;
        Self {
            cfg,
            alerts,
            next_id,
            ..Default::default()
        }
    }

    pub fn config(&self) -> &IdsConfig {
        &self.cfg
    }

    pub fn alerts(&self) -> &[Alert] {
        &self.alerts
    }

    /// The only mutation an alert ever sees.
    pub fn acknowledge(&mut self, alert_id: u64) -> Result<&Alert, UnknownAlert> {
        let a = self
            .alerts
            .iter_mut()
            .find(|a| a.alert_id == alert_id)
            .ok_or(UnknownAlert(alert_id))?;
        a.acknowledged = true;
        Ok(a)
    }

    fn fire(
        &mut self,
        rule: AlertRule,
        subject: Subject,
        severity: Severity,
        at: u64,
        detail: String,
    ) -> Option<Alert> {
        let key = (rule, subject);
        if let Some(&last) = self.last_fired.get(&key) {
            if at.saturating_sub(last) < self.cfg.window_ms {
                return None;
            }
        }
        self.last_fired.insert(key, at);
        let (device_id, source) = match subject {
            Subject::Device(d) => (Some(d), None),
            Subject::Source(s) => (None, Some(s)),
        };
        let alert = Alert {
            alert_id: self.next_id,
            rule,
            device_id,
            source,
            severity,
            at,
            detail,
            acknowledged: false,
        };
        self.next_id += 1;
        self.alerts.push(alert.clone());
        Some(alert)
    }

    /// Marks a device as freshly enrolled so R5 measures silence from now.
    pub fn note_enrolled(&mut self, device: DeviceId, at: u64) {
        self.last_clean.insert(device, at);
    }

    pub fn evaluate(&mut self, ev: &SecurityEvent) -> Vec<Alert> {
        let mut out = Vec::new();
        let subject = ev
            .device_id
            .map_or(Subject::Source(ev.source), Subject::Device);

        // Only authenticated envelopes count toward a flood: replays and
        // forgeries can be sent by anyone, and counting them would let an
        // attacker get a healthy device quarantined.
        if let (Some(dev), EventKind::Clean) = (ev.device_id, ev.kind) {
            let q = self.traffic.entry(dev).or_default();
            q.push_back(ev.at);
            trim(q, ev.at, self.cfg.flood_window_ms);
            let limit = u64::from(self.cfg.flood_rate) * self.cfg.flood_window_ms / 1000;
            let n = q.len() as u64;
            if n > limit {
                out.extend(self.fire(
                    AlertRule::R4Flood,
                    subject,
                    Severity::Crit,
                    ev.at,
                    format!(
                        "{n} envelopes in {} ms exceeds {}/s",
                        self.cfg.flood_window_ms, self.cfg.flood_rate
                    ),
                ));
            }
        }

        match ev.kind {
            EventKind::Clean => {
                if let Some(d) = ev.device_id {
                    self.last_clean.insert(d, ev.at);
                }
            }
            EventKind::UnknownDevice => {
                out.extend(self.fire(
                    AlertRule::R1Unknown,
                    Subject::Source(ev.source),
                    Severity::Warn,
                    ev.at,
                    format!(
                        "envelope from unknown device {} via {}",
                        ev.device_id.map_or_else(|| "-".into(), |d| d.to_string()),
                        ev.source
                    ),
                ));
            }
            EventKind::Replay => {
                out.extend(self.fire(
                    AlertRule::R2Replay,
                    subject,
                    Severity::Warn,
                    ev.at,
                    "replayed sequence number".into(),
                ));
            }
            EventKind::AuthFailure => {
                let n = {
                    let key = ev.device_id.unwrap_or_default();
                    let q = self.auth_failures.entry(key).or_default();
                    q.push_back(ev.at);
                    trim(q, ev.at, self.cfg.window_ms);
                    q.len()
                };
                if n >= self.cfg.auth_fail_threshold as usize {
                    out.extend(self.fire(
                        AlertRule::R3Auth,
                        subject,
                        Severity::Crit,
                        ev.at,
                        format!("{n} authentication failures within {} ms", self.cfg.window_ms),
                    ));
                }
            }
            EventKind::QuarantinedTraffic | EventKind::RevokedTraffic => {}
        }
        out
    }

    /// Time-driven rules. `active` lists the devices currently ACTIVE.
    pub fn tick(&mut self, now: u64, active: &[DeviceId]) -> Vec<Alert> {
        let mut out = Vec::new();
        for &d in active {
            let last = *self.last_clean.entry(d).or_insert(now);
            let silent = now.saturating_sub(last);
            if silent > self.cfg.silence_ms {
                let key = (AlertRule::R5Silent, Subject::Device(d));
                let already = self
                    .last_fired
                    .get(&key)
                    .is_some_and(|&t| t >= last && now.saturating_sub(t) < self.cfg.silence_ms);
                if already {
                    continue;
                }
                out.extend(self.fire(
                    AlertRule::R5Silent,
                    Subject::Device(d),
                    Severity::Info,
                    now,
                    format!("no clean telemetry for {} s", silent / 1000),
                ));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CredentialEntry {
    /// 1-based line number in the dictionary file.
    pub id: usize,
    pub service: String,
    pub username: String,
    pub password: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CredAuditError {
    #[error("dictionary line {line}: expected service<TAB>username<TAB>password")]
    BadDictionaryLine { line: usize },
    #[error("dictionary is empty")]
    EmptyDictionary,
}

/// Parses `service<TAB>username<TAB>password` lines; `#` comments and blank
/// lines are skipped. Empty passwords are allowed.
pub fn parse_dictionary(text: &str) -> Result<Vec<CredentialEntry>, CredAuditError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.splitn(3, '\t');
        let (Some(service), Some(username), Some(password)) = (parts.next(), parts.next(), parts.next())
        else {
            return Err(CredAuditError::BadDictionaryLine { line: i + 1 });
        };
        if service.is_empty() || username.is_empty() {
            return Err(CredAuditError::BadDictionaryLine { line: i + 1 });
        }
        out.push(CredentialEntry {
            id: i + 1,
            service: service.to_owned(),
            username: username.to_owned(),
            password: password.to_owned(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("target unreachable")]
pub struct TargetUnreachable;

/// A login surface exposed by a simulated device.
pub trait LoginTarget {
    fn target_id(&self) -> String;
    fn service(&self) -> &str;
    fn try_login(&mut self, username: &str, password: &str) -> Result<bool, TargetUnreachable>;
}

fn mask(secret: &str) -> String {
    let mut chars = secret.chars();
    match chars.next() {
        Some(c) => std::iter::once(c).chain(chars.map(|_| '*')).collect(),
        None => String::new(),
    }
}

/// A successful dictionary login. The password is held here and masked in
/// every rendering (`Debug`, `Display`, serialization).
#[derive(Clone, PartialEq, Eq)]
pub struct CredentialFinding {
    pub target_id: String,
    pub service: String,
    pub username: String,
    pub password: String,
    pub entry_id: usize,
}

impl CredentialFinding {
    pub fn masked_password(&self) -> String {
        mask(&self.password)
    }
}

impl fmt::Debug for CredentialFinding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CredentialFinding")
            .field("target_id", &self.target_id)
            .field("service", &self.service)
            .field("username", &self.username)
            .field("password", &self.masked_password())
            .field("entry_id", &self.entry_id)
            .finish()
    }
}

impl fmt::Display for CredentialFinding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {}:{} (dictionary line {})",
            self.target_id,
            self.service,
            self.username,
            self.masked_password(),
            self.entry_id
        )
    }
}

impl Serialize for CredentialFinding {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut st = s.serialize_struct("CredentialFinding", 5)?;
        st.serialize_field("target_id", &self.target_id)?;
        st.serialize_field("service", &self.service)?;
        st.serialize_field("username", &self.username)?;
        st.serialize_field("password", &self.masked_password())?;
        st.serialize_field("entry_id", &self.entry_id)?;
        st.end()
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct CredentialAuditReport {
    pub findings: Vec<CredentialFinding>,
    pub unreachable: Vec<String>,
    pub attempts: u64,
}

/// Minimum spacing between attempts against one target (2 attempts/s).
pub const ATTEMPT_SPACING: Duration = Duration::from_millis(500);

/// Tries every dictionary entry whose service matches each target's
/// advertised service. Unreachable targets are recorded and skipped.
pub fn audit_default_credentials(
    targets: &mut [&mut dyn LoginTarget],
    dictionary: &[CredentialEntry],
    clock: &dyn Clock,
) -> Result<CredentialAuditReport, CredAuditError> {
    if dictionary.is_empty() {
        return Err(CredAuditError::EmptyDictionary);
    }
    let mut report = CredentialAuditReport::default();
    for target in targets.iter_mut() {
        let mut last_attempt: Option<u64> = None;
        let service = target.service().to_owned();
        for entry in dictionary.iter().filter(|e| e.service == service) {
            if let Some(last) = last_attempt {
                let due = last + ATTEMPT_SPACING.as_millis() as u64;
                let now = clock.now_ms();
                if now < due {
                    clock.sleep(Duration::from_millis(due - now));
                }
            }
            last_attempt = Some(clock.now_ms());
            report.attempts += 1;
            match target.try_login(&entry.username, &entry.password) {
                Ok(true) => report.findings.push(CredentialFinding {
                    target_id: target.target_id(),
                    service: entry.service.clone(),
                    username: entry.username.clone(),
                    password: entry.password.clone(),
                    entry_id: entry.id,
                }),
                Ok(false) => {}
                Err(TargetUnreachable) => {
                    report.unreachable.push(target.target_id());
                    break;
                }
            }
        }
    }
    Ok(report)
}
