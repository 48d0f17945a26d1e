//! Gateway configuration: `key = value` lines, `#` comments, dotted keys.

use std::fmt;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

use crate::enrollment::{DEFAULT_MAX_PENDING, DEFAULT_PENDING_TTL_S};
use crate::ids::IdsConfig;
use crate::relay::DEFAULT_MAX_HOPS;
use crate::store::readings::DEFAULT_MAX_READINGS;

pub const MIN_TOKEN_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    ParseError { line: usize },
    #[error("line {line}: unknown key `{name}`")]
    UnknownKey { name: String, line: usize },
    #[error("line {line}: invalid value for `{key}`: {reason}")]
    InvalidValue {
        key: String,
        line: usize,
        reason: String,
    },
    #[error("line {line}: `{key}` set twice")]
    Duplicate { key: String, line: usize },
    #[error("cannot read config: {0}")]
    Io(String),
}

#[derive(Clone, PartialEq, Eq, Serialize)]
pub struct Config {
    pub data_dir: PathBuf,
    pub udp_listen: SocketAddr,
    pub http_listen: SocketAddr,
    #[serde(skip)]
    pub operator_token: Option<String>,
    pub auto_approve: bool,
    pub pending_ttl_s: u32,
    pub max_pending: usize,
    pub auto_quarantine: bool,
    pub flood_rate: u32,
    pub auth_fail_threshold: u32,
    pub max_hops: u8,
    pub max_readings: u64,
    pub single_thread: bool,
}

impl fmt::Debug for Config {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Config")
            .field("data_dir", &self.data_dir)
            .field("udp_listen", &self.udp_listen)
            .field("http_listen", &self.http_listen)
            .field("operator_token", &self.operator_token.as_ref().map(|_| "<set>"))
            .field("auto_approve", &self.auto_approve)
            .field("pending_ttl_s", &self.pending_ttl_s)
            .field("max_pending", &self.max_pending)
            .field("auto_quarantine", &self.auto_quarantine)
            .field("flood_rate", &self.flood_rate)
            .field("auth_fail_threshold", &self.auth_fail_threshold)
            .field("max_hops", &self.max_hops)
            .field("max_readings", &self.max_readings)
            .field("single_thread", &self.single_thread)
            .finish()
    }
}

impl Default for Config {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("."),
            udp_listen: "0.0.0.0:5683".parse().expect("literal"),
            http_listen: "127.0.0.1:8080".parse().expect("literal"),
            operator_token: None,
            auto_approve: false,
            pending_ttl_s: DEFAULT_PENDING_TTL_S,
            max_pending: DEFAULT_MAX_PENDING,
            auto_quarantine: true,
            flood_rate: 10,
            auth_fail_threshold: 5,
            max_hops: DEFAULT_MAX_HOPS,
            max_readings: DEFAULT_MAX_READINGS,
            single_thread: false,
        }
    }
}

pub const KEYS: &[&str] = &[
    "data_dir",
    "udp_listen",
    "http_listen",
    "operator_token",
    "enrollment.auto_approve",
    "enrollment.pending_ttl_s",
    "enrollment.max_pending",
    "ids.auto_quarantine",
    "ids.flood_rate",
    "ids.auth_fail_threshold",
    "relay.max_hops",
    "store.max_readings",
    "runtime.single_thread",
];

fn parse_val<T: FromStr>(key: &str, line: usize, v: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    v.parse().map_err(|e: T::Err| ConfigError::InvalidValue {
        key: key.to_owned(),
        line,
        reason: e.to_string(),
    })
}

fn unquote(v: &str) -> &str {
    v.strip_prefix('"')
        .and_then(|s| s.strip_suffix('"'))
        .unwrap_or(v)
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Config::default();
        let mut seen: Vec<&str> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let t = raw.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            let Some((k, v)) = t.split_once('=') else {
                return Err(ConfigError::ParseError { line });
            };
            let (k, v) = (k.trim(), unquote(v.trim()));
            if k.is_empty() {
                return Err(ConfigError::ParseError { line });
            }
            let Some(&key) = KEYS.iter().find(|&&known| known == k) else {
                return Err(ConfigError::UnknownKey {
                    name: k.to_owned(),
                    line,
                });
            };
            if seen.contains(&key) {
                return Err(ConfigError::Duplicate {
                    key: key.to_owned(),
                    line,
                });
            }
            seen.push(key);
            let invalid = |reason: &str| ConfigError::InvalidValue {
                key: key.to_owned(),
                line,
                reason: reason.to_owned(),
            };
            match key {
                "data_dir" => {
                    if v.is_empty() {
                        return Err(invalid("empty path"));
                    }
                    cfg.data_dir = PathBuf::from(v);
                }
                "udp_listen" => cfg.udp_listen = parse_val(key, line, v)?,
                "http_listen" => cfg.http_listen = parse_val(key, line, v)?,
                "operator_token" => {
                    if v.chars().count() < MIN_TOKEN_LEN {
                        return Err(invalid("must be at least 16 characters"));
                    }
                    cfg.operator_token = Some(v.to_owned());
                }
                "enrollment.auto_approve" => cfg.auto_approve = parse_val(key, line, v)?,
                "enrollment.pending_ttl_s" => {
                    cfg.pending_ttl_s = parse_val(key, line, v)?;
                    if cfg.pending_ttl_s == 0 {
                        return Err(invalid("must be positive"));
                    }
                }
                "enrollment.max_pending" => {
                    cfg.max_pending = parse_val(key, line, v)?;
                    if cfg.max_pending == 0 {
                        return Err(invalid("must be positive"));
                    }
                }
                "ids.auto_quarantine" => cfg.auto_quarantine = parse_val(key, line, v)?,
                "ids.flood_rate" => {
                    cfg.flood_rate = parse_val(key, line, v)?;
                    if cfg.flood_rate == 0 {
                        return Err(invalid("must be positive"));
                    }
                }
                "ids.auth_fail_threshold" => {
                    cfg.auth_fail_threshold = parse_val(key, line, v)?;
                    if cfg.auth_fail_threshold == 0 {
                        return Err(invalid("must be positive"));
                    }
                }
                "relay.max_hops" => {
                    cfg.max_hops = parse_val(key, line, v)?;
                    if cfg.max_hops == 0 {
                        return Err(invalid("must be positive"));
                    }
                }
                "store.max_readings" => {
                    cfg.max_readings = parse_val(key, line, v)?;
                    if cfg.max_readings == 0 {
                        return Err(invalid("must be positive"));
                    }
                }
                "runtime.single_thread" => cfg.single_thread = parse_val(key, line, v)?,
                _ => unreachable!("key list and match arms agree"),
            }
        }
        Ok(cfg)
    }

    /// Loads a config file. A relative `data_dir` resolves against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(e.to_string()))?;
        let mut cfg = Self::parse(&text)?;
        if cfg.data_dir.is_relative() {
            if let Some(parent) = path.parent() {
                cfg.data_dir = parent.join(&cfg.data_dir);
            }
        }
        Ok(cfg)
    }

    pub fn ids(&self) -> IdsConfig {
        IdsConfig {
            auth_fail_threshold: self.auth_fail_threshold,
            flood_rate: self.flood_rate,
            auto_quarantine: self.auto_quarantine,
            ..IdsConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_is_defaults() {
        assert_eq!(Config::parse("").unwrap(), Config::default());
        assert_eq!(Config::parse("# only a comment\n\n").unwrap(), Config::default());
        let d = Config::default();
        assert_eq!(d.udp_listen.to_string(), "0.0.0.0:5683");
        assert_eq!(d.http_listen.to_string(), "127.0.0.1:8080");
        assert_eq!((d.pending_ttl_s, d.flood_rate, d.auth_fail_threshold), (600, 10, 5));
        assert_eq!((d.max_hops, d.max_readings), (2, 1_000_000));
        assert!(!d.auto_approve && d.auto_quarantine);
    }

    #[test]
    fn max_hops_overflow() {
        let e = Config::parse("relay.max_hops = 300").unwrap_err();
        assert!(matches!(e, ConfigError::InvalidValue { ref key, line: 1, .. } if key == "relay.max_hops"));
    }

    #[test]
    fn misspelled_key() {
        let e = Config::parse("\nopreator_token = x").unwrap_err();
        assert_eq!(
            e,
            ConfigError::UnknownKey {
                name: "opreator_token".into(),
                line: 2
            }
        );
    }

    #[test]
    fn parses_everything() {
        let text = r#"
data_dir = /var/lib/homegate
udp_listen = 127.0.0.1:6000
operator_token = "0123456789abcdef"
enrollment.auto_approve = true
ids.flood_rate = 3
runtime.single_thread = true
"#;
        let c = Config::parse(text).unwrap();
        assert_eq!(c.data_dir, PathBuf::from("/var/lib/homegate"));
        assert_eq!(c.operator_token.as_deref(), Some("0123456789abcdef"));
        assert!(c.auto_approve && c.single_thread);
        assert_eq!(c.flood_rate, 3);
        assert!(!format!("{c:?}").contains("0123456789abcdef"));
    }

    #[test]
    fn rejects_bad_lines() {
        assert_eq!(
            Config::parse("just words").unwrap_err(),
            ConfigError::ParseError { line: 1 }
        );
        assert!(matches!(
            Config::parse("operator_token = short").unwrap_err(),
            ConfigError::InvalidValue { .. }
        ));
        assert!(matches!(
            Config::parse("ids.flood_rate = 1\nids.flood_rate = 2").unwrap_err(),
            ConfigError::Duplicate { line: 2, .. }
        ));
    }
}
