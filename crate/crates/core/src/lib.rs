//! Core of the homegate local-first IoT gateway.
//!
//! Every subsystem lives here so the simulator can drive the exact code the
//! network service runs:
//!
//! - [`pki`]: root identity, certificate issuance and verification, key vault
//! - [`enrollment`]: on-boarding state machine, device registry, key delivery
//! - [`relay`]: telemetry wire format, repeater forwarding, ingest pipeline
//! - [`segmentation`]: zones, address assignment, firewall policy compiler
//! - [`ids`]: detection rules, alerts, default-credential audit
//! - [`store`]: hash-chained audit log, readings table, encrypted export
//! - [`config`] and [`gateway`]: configuration and the composition root
//! - [`sim`]: deterministic virtual fleet and attack scenarios

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub mod clock;
pub mod codec;
pub mod config;
pub mod enrollment;
mod fsutil;
pub mod gateway;
pub mod ids;
pub mod pki;
pub mod relay;
pub mod seal;
pub mod segmentation;
pub mod sim;
pub mod store;

pub use clock::{Clock, ManualClock, SystemClock};
pub use config::Config;
pub use gateway::Gateway;

/// Gateway-assigned 8-byte device identifier.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct DeviceId(pub [u8; 8]);

impl DeviceId {
    pub fn from_u64(n: u64) -> Self {
        DeviceId(n.to_be_bytes())
    }

    pub fn as_u64(&self) -> u64 {
        u64::from_be_bytes(self.0)
    }
}

impl fmt::Display for DeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl fmt::Debug for DeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DeviceId({self})")
    }
}

impl FromStr for DeviceId {
    type Err = hex::FromHexError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut out = [0u8; 8];
        hex::decode_to_slice(s, &mut out)?;
        Ok(DeviceId(out))
    }
}

impl Serialize for DeviceId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for DeviceId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}
