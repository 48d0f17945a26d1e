//! Virtual subnets and the default-deny forwarding policy.
//!
//! Zones are disjoint IPv4 blocks. The gateway is multi-homed: it owns host
//! `.1` of every non-gateway zone, plus the single address of the GATEWAY
//! zone if one is defined. Policy compiles to an ordered, first-match rule
//! list that always ends in deny-all, and renders as iptables-style text.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::DeviceId;

pub const TELEMETRY_PORT: u16 = 5683;
pub const OPERATOR_PORT: u16 = 8080;
pub const MAX_ZONE_NAME: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SegmentationError {
    #[error("zone `{0}` already exists")]
    DuplicateName(String),
    #[error("range {0} overlaps zone `{1}`")]
    OverlappingRange(AddrBlock, String),
    #[error("unknown zone `{0}`")]
    UnknownZone(String),
    #[error("zone `{0}` has no free addresses")]
    ZoneExhausted(String),
    #[error("invalid zone name `{0}`")]
    InvalidName(String),
    #[error("invalid range: {0}")]
    InvalidRange(String),
    #[error("invalid grant: {0}")]
    InvalidGrant(String),
}

/// Base address plus prefix length; the base must be network-aligned.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AddrBlock {
    base: Ipv4Addr,
    prefix: u8,
}

impl AddrBlock {
    pub fn new(base: Ipv4Addr, prefix: u8) -> Result<Self, SegmentationError> {
        if prefix > 32 {
            return Err(SegmentationError::InvalidRange(format!("prefix /{prefix}")));
        }
        let b = Self { base, prefix };
        if u32::from(base) & !b.mask() != 0 {
            return Err(SegmentationError::InvalidRange(format!(
                "{base}/{prefix} has host bits set"
            )));
        }
        Ok(b)
    }

    pub fn host(addr: Ipv4Addr) -> Self {
        Self {
            base: addr,
            prefix: 32,
        }
    }

    pub fn base(&self) -> Ipv4Addr {
        self.base
    }

    pub fn prefix(&self) -> u8 {
        self.prefix
    }

    fn mask(&self) -> u32 {
        if self.prefix == 0 {
            0
        } else {
            u32::MAX << (32 - self.prefix)
        }
    }

    pub fn size(&self) -> u64 {
        1u64 << (32 - self.prefix)
    }

    pub fn first(&self) -> u32 {
        u32::from(self.base)
    }

    pub fn last(&self) -> u32 {
        (u64::from(self.first()) + self.size() - 1) as u32
    }

    pub fn contains(&self, addr: Ipv4Addr) -> bool {
        u32::from(addr) & self.mask() == self.first()
    }

    pub fn overlaps(&self, other: &AddrBlock) -> bool {
        self.first() <= other.last() && other.first() <= self.last()
    }
}

impl fmt::Display for AddrBlock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.base, self.prefix)
    }
}

impl fmt::Debug for AddrBlock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl FromStr for AddrBlock {
    type Err = SegmentationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || SegmentationError::InvalidRange(s.to_owned());
        let (addr, prefix) = match s.split_once('/') {
            Some((a, p)) => (a, p.parse::<u8>().map_err(|_| bad())?),
            None => (s, 32),
        };
        AddrBlock::new(addr.parse().map_err(|_| bad())?, prefix)
    }
}

impl Serialize for AddrBlock {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for AddrBlock {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ZoneRole {
    Iot,
    Repeater,
    Operator,
    Gateway,
}

impl FromStr for ZoneRole {
    type Err = SegmentationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "IOT" => Ok(ZoneRole::Iot),
            "REPEATER" => Ok(ZoneRole::Repeater),
            "OPERATOR" => Ok(ZoneRole::Operator),
            "GATEWAY" => Ok(ZoneRole::Gateway),
            _ => Err(SegmentationError::InvalidRange(format!("unknown role `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Proto {
    Udp,
    Tcp,
    Any,
}

impl Proto {
    fn matches(self, query: Proto) -> bool {
        self == Proto::Any || self == query
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grant {
    pub zone: String,
    #[serde(default)]
    pub port: Option<u16>,
    pub proto: Proto,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Zone {
    pub name: String,
    pub range: AddrBlock,
    pub role: ZoneRole,
    #[serde(default)]
    pub allow_to: Vec<Grant>,
}

impl Zone {
    /// The gateway's own leg in this zone, if it has one.
    pub fn gateway_leg(&self) -> Option<Ipv4Addr> {
        match self.role {
            ZoneRole::Gateway => Some(self.range.base()),
            _ => Some(Ipv4Addr::from(self.range.first() + 1)),
        }
    }

    /// Host addresses available to devices: excludes network, broadcast and
    /// the gateway's `.1`.
    pub fn assignable(&self) -> impl Iterator<Item = Ipv4Addr> {
        let (lo, hi) = match self.role {
            ZoneRole::Gateway => (1, 0),
            _ => (self.range.first() + 2, self.range.last().saturating_sub(1)),
        };
        (lo..=hi).map(Ipv4Addr::from)
    }

    pub fn capacity(&self) -> usize {
        self.assignable().count()
    }
}

fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && name.len() <= MAX_ZONE_NAME
        && name
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_')
}

/// Zone definitions and device address assignments.
#[derive(Debug, Default, Clone, Serialize, Deserialize)]
pub struct Segmentation {
    zones: BTreeMap<String, Zone>,
    assignments: BTreeMap<DeviceId, (String, Ipv4Addr)>,
}

impl Segmentation {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn check_zone(&self, name: &str, range: AddrBlock, role: ZoneRole) -> Result<(), SegmentationError> {
        if !valid_name(name) {
            return Err(SegmentationError::InvalidName(name.to_owned()));
        }
        if self.zones.contains_key(name) {
            return Err(SegmentationError::DuplicateName(name.to_owned()));
        }
        match role {
            ZoneRole::Gateway if range.prefix() != 32 => {
                return Err(SegmentationError::InvalidRange(
                    "a GATEWAY zone holds exactly the gateway address (/32)".into(),
                ))
            }
            ZoneRole::Gateway if self.zones.values().any(|z| z.role == ZoneRole::Gateway) => {
                return Err(SegmentationError::InvalidRange(
                    "only one GATEWAY zone may exist".into(),
                ))
            }
            ZoneRole::Iot | ZoneRole::Repeater | ZoneRole::Operator if range.prefix() > 30 => {
                return Err(SegmentationError::InvalidRange(format!(
                    "{range} leaves no assignable hosts"
                )))
            }
            _ => {}
        }
        if let Some(z) = self.zones.values().find(|z| z.range.overlaps(&range)) {
            return Err(SegmentationError::OverlappingRange(range, z.name.clone()));
        }
        Ok(())
    }

    pub fn define_zone(&mut self, name: &str, range: AddrBlock, role: ZoneRole) -> Result<&Zone, SegmentationError> {
        self.check_zone(name, range, role)?;
        Ok(self.zones.entry(name.to_owned()).or_insert(Zone {
            name: name.to_owned(),
            range,
            role,
            allow_to: Vec::new(),
        }))
    }

    pub fn check_grant(&self, from: &str, grant: &Grant) -> Result<(), SegmentationError> {
        if !self.zones.contains_key(from) {
            return Err(SegmentationError::UnknownZone(from.to_owned()));
        }
        if !self.zones.contains_key(&grant.zone) {
            return Err(SegmentationError::UnknownZone(grant.zone.clone()));
        }
        if grant.port.is_some() && grant.proto == Proto::Any {
            return Err(SegmentationError::InvalidGrant(
                "a port requires proto UDP or TCP".into(),
            ));
        }
        Ok(())
    }

    pub fn add_grant(&mut self, from: &str, grant: Grant) -> Result<(), SegmentationError> {
        self.check_grant(from, &grant)?;
        let zone = self.zones.get_mut(from).expect("checked");
        if !zone.allow_to.contains(&grant) {
            zone.allow_to.push(grant);
        }
        Ok(())
    }

    pub fn zone(&self, name: &str) -> Option<&Zone> {
        self.zones.get(name)
    }

    pub fn zones(&self) -> impl Iterator<Item = &Zone> {
        self.zones.values()
    }

    pub fn gateway_zone(&self) -> Option<&Zone> {
        self.zones.values().find(|z| z.role == ZoneRole::Gateway)
    }

    pub fn assignment(&self, device: &DeviceId) -> Option<(&str, Ipv4Addr)> {
        self.assignments
            .get(device)
            .map(|(z, a)| (z.as_str(), *a))
    }

    pub fn assignments(&self) -> impl Iterator<Item = (&DeviceId, &str, Ipv4Addr)> {
        self.assignments.iter().map(|(d, (z, a))| (d, z.as_str(), *a))
    }

    /// The address [`Segmentation::assign_device`] would return, without
    /// committing it.
    pub fn peek_assign(&self, device: &DeviceId, zone_name: &str) -> Result<Ipv4Addr, SegmentationError> {
        let zone = self
            .zones
            .get(zone_name)
            .ok_or_else(|| SegmentationError::UnknownZone(zone_name.to_owned()))?;
        if let Some((z, a)) = self.assignments.get(device) {
            if z == zone_name {
                return Ok(*a);
            }
        }
        let used: BTreeSet<Ipv4Addr> = self
            .assignments
            .iter()
            .filter(|(d, (z, _))| z == zone_name && *d != device)
            .map(|(_, (_, a))| *a)
            .collect();
        zone.assignable()
            .find(|a| !used.contains(a))
            .ok_or_else(|| SegmentationError::ZoneExhausted(zone_name.to_owned()))
    }

    /// Lowest free host address; idempotent for a device already in the zone.
    pub fn assign_device(&mut self, device: DeviceId, zone_name: &str) -> Result<Ipv4Addr, SegmentationError> {
        let addr = self.peek_assign(&device, zone_name)?;
        self.assignments.insert(device, (zone_name.to_owned(), addr));
        Ok(addr)
    }

    /// Every address the gateway answers on, for traffic from `zone`.
    fn gateway_targets(&self, zone: &Zone) -> Vec<Ipv4Addr> {
        let mut out: Vec<Ipv4Addr> = self
            .gateway_zone()
            .map(|g| g.range.base())
            .into_iter()
            .collect();
        if let Some(leg) = zone.gateway_leg() {
            if !out.contains(&leg) {
                out.push(leg);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Action {
    Allow,
    Deny,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rule {
    pub action: Action,
    /// `None` matches any address.
    pub src: Option<AddrBlock>,
    pub dst: Option<AddrBlock>,
    /// `None` matches any port.
    pub port: Option<u16>,
    pub proto: Proto,
    pub comment: String,
}

impl Rule {
    pub fn deny_all() -> Self {
        Rule {
            action: Action::Deny,
            src: None,
            dst: None,
            port: None,
            proto: Proto::Any,
            comment: "default deny".into(),
        }
    }

    fn allow(src: AddrBlock, dst: AddrBlock, port: Option<u16>, proto: Proto, comment: String) -> Self {
        Rule {
            action: Action::Allow,
            src: Some(src),
            dst: Some(dst),
            port,
            proto,
            comment,
        }
    }

    pub fn matches(&self, src: Ipv4Addr, dst: Ipv4Addr, port: u16, proto: Proto) -> bool {
        self.src.map_or(true, |b| b.contains(src))
            && self.dst.map_or(true, |b| b.contains(dst))
            && self.port.map_or(true, |p| p == port)
            && self.proto.matches(proto)
    }

    /// One iptables-style line, e.g.
    /// `-A FORWARD -s 10.10.1.0/24 -d 10.10.0.1/32 -p udp --dport 5683 -j ACCEPT`.
    pub fn render(&self) -> String {
        let mut s = String::from("-A FORWARD");
        if let Some(b) = self.src {
            s.push_str(&format!(" -s {b}"));
        }
        if let Some(b) = self.dst {
            s.push_str(&format!(" -d {b}"));
        }
        match self.proto {
            Proto::Udp => s.push_str(" -p udp"),
            Proto::Tcp => s.push_str(" -p tcp"),
            Proto::Any => {}
        }
        if let Some(p) = self.port {
            s.push_str(&format!(" --dport {p}"));
        }
        s.push_str(match self.action {
            Action::Allow => " -j ACCEPT",
            Action::Deny => " -j DROP",
        });
        s
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleSet {
    rules: Vec<Rule>,
}

impl Default for RuleSet {
    fn default() -> Self {
        RuleSet {
            rules: vec![Rule::deny_all()],
        }
    }
}

impl RuleSet {
    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    /// One rule per line, newline-terminated.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for r in &self.rules {
            out.push_str(&r.render());
            out.push('\n');
        }
        out
    }
}

/// Compiles the forwarding policy. Rule groups, in order:
///
/// 1. DENY everything from each quarantined device
/// 2. ALLOW each IOT/REPEATER zone to the gateway on UDP 5683, and each IOT
///    zone to every repeater address on UDP 5683
/// 3. ALLOW each OPERATOR zone to the gateway on TCP 8080
/// 4. explicit `allow_to` grants
/// 5. DENY all
pub fn compile_policy(seg: &Segmentation, quarantined: &BTreeSet<DeviceId>) -> RuleSet {
    let mut rules = Vec::new();

    for id in quarantined {
        if let Some((_, addr)) = seg.assignment(id) {
            rules.push(Rule {
                action: Action::Deny,
                src: Some(AddrBlock::host(addr)),
                dst: None,
                port: None,
                proto: Proto::Any,
                comment: format!("quarantine {id}"),
            });
        }
    }

    let repeaters: Vec<Ipv4Addr> = {
        let mut v: Vec<Ipv4Addr> = seg
            .assignments
            .values()
            .filter(|(z, _)| seg.zone(z).is_some_and(|z| z.role == ZoneRole::Repeater))
            .map(|(_, a)| *a)
            .collect();
        v.sort();
        v
    };

    for zone in seg.zones().filter(|z| matches!(z.role, ZoneRole::Iot | ZoneRole::Repeater)) {
        for gw in seg.gateway_targets(zone) {
            rules.push(Rule::allow(
                zone.range,
                AddrBlock::host(gw),
                Some(TELEMETRY_PORT),
                Proto::Udp,
                format!("{} telemetry to gateway", zone.name),
            ));
        }
        if zone.role == ZoneRole::Iot {
            for r in &repeaters {
                rules.push(Rule::allow(
                    zone.range,
                    AddrBlock::host(*r),
                    Some(TELEMETRY_PORT),
                    Proto::Udp,
                    format!("{} telemetry via repeater", zone.name),
                ));
            }
        }
    }

    for zone in seg.zones().filter(|z| z.role == ZoneRole::Operator) {
        for gw in seg.gateway_targets(zone) {
            rules.push(Rule::allow(
                zone.range,
                AddrBlock::host(gw),
                Some(OPERATOR_PORT),
                Proto::Tcp,
                format!("{} operator api", zone.name),
            ));
        }
    }

    for zone in seg.zones() {
        for g in &zone.allow_to {
            if let Some(target) = seg.zone(&g.zone) {
                rules.push(Rule::allow(
                    zone.range,
                    target.range,
                    g.port,
                    g.proto,
                    format!("grant {} -> {}", zone.name, target.name),
                ));
            }
        }
    }

    rules.push(Rule::deny_all());
    RuleSet { rules }
}

/// First-match evaluation; falls through to DENY.
pub fn check_reachability(rules: &RuleSet, src: Ipv4Addr, dst: Ipv4Addr, port: u16, proto: Proto) -> Action {
    rules
        .rules
        .iter()
        .find(|r| r.matches(src, dst, port, proto))
        .map_or(Action::Deny, |r| r.action)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block(s: &str) -> AddrBlock {
        s.parse().unwrap()
    }

    fn ip(s: &str) -> Ipv4Addr {
        s.parse().unwrap()
    }

    #[test]
    fn slash24_has_253_assignable_hosts() {
        let mut seg = Segmentation::new();
        let z = seg.define_zone("sensors", block("10.10.1.0/24"), ZoneRole::Iot).unwrap();
        assert_eq!(z.capacity(), 253);
        assert_eq!(z.assignable().next(), Some(ip("10.10.1.2")));
    }

    #[test]
    fn zone_definition_errors() {
        let mut seg = Segmentation::new();
        seg.define_zone("sensors", block("10.10.1.0/24"), ZoneRole::Iot).unwrap();
        assert!(matches!(
            seg.define_zone("other", block("10.10.1.128/25"), ZoneRole::Iot),
            Err(SegmentationError::OverlappingRange(..))
        ));
        assert!(matches!(
            seg.define_zone("sensors", block("10.10.9.0/24"), ZoneRole::Iot),
            Err(SegmentationError::DuplicateName(_))
        ));
        assert!(matches!(
            seg.define_zone("bad name", block("10.10.9.0/24"), ZoneRole::Iot),
            Err(SegmentationError::InvalidName(_))
        ));
        assert!(matches!(
            seg.define_zone("gw", block("10.10.0.0/30"), ZoneRole::Gateway),
            Err(SegmentationError::InvalidRange(_))
        ));
        assert!("10.10.1.1/24".parse::<AddrBlock>().is_err());
        assert!("10.10.1.0/33".parse::<AddrBlock>().is_err());
    }

    #[test]
    fn allocation_is_lowest_free_and_idempotent() {
        let mut seg = Segmentation::new();
        seg.define_zone("sensors", block("10.10.1.0/24"), ZoneRole::Iot).unwrap();
        let d1 = DeviceId::from_u64(1);
        assert_eq!(seg.assign_device(d1, "sensors").unwrap(), ip("10.10.1.2"));
        assert_eq!(seg.assign_device(d1, "sensors").unwrap(), ip("10.10.1.2"));
        assert_eq!(
            seg.assign_device(DeviceId::from_u64(2), "sensors").unwrap(),
            ip("10.10.1.3")
        );
        assert!(matches!(
            seg.assign_device(d1, "nope"),
            Err(SegmentationError::UnknownZone(_))
        ));
    }

    #[test]
    fn fill_to_capacity_then_exhausted() {
        let mut seg = Segmentation::new();
        seg.define_zone("sensors", block("10.10.1.0/24"), ZoneRole::Iot).unwrap();
        let mut last = None;
        for n in 1..=253u64 {
            last = Some(seg.assign_device(DeviceId::from_u64(n), "sensors").unwrap());
        }
        assert_eq!(last, Some(ip("10.10.1.254")));
        assert_eq!(
            seg.assign_device(DeviceId::from_u64(254), "sensors"),
            Err(SegmentationError::ZoneExhausted("sensors".into()))
        );
    }

    #[test]
    fn empty_policy_is_deny_all() {
        let rules = compile_policy(&Segmentation::new(), &BTreeSet::new());
        assert_eq!(rules.render(), "-A FORWARD -j DROP\n");
        assert_eq!(
            check_reachability(&rules, ip("1.2.3.4"), ip("5.6.7.8"), 1, Proto::Udp),
            Action::Deny
        );
    }

    #[test]
    fn single_rule_match() {
        let rules = RuleSet {
            rules: vec![
                Rule::allow(
                    block("10.10.1.0/24"),
                    block("10.10.0.1/32"),
                    Some(5683),
                    Proto::Udp,
                    String::new(),
                ),
                Rule::deny_all(),
            ],
        };
        let q = |src, port, proto| check_reachability(&rules, ip(src), ip("10.10.0.1"), port, proto);
        assert_eq!(q("10.10.1.7", 5683, Proto::Udp), Action::Allow);
        assert_eq!(q("10.10.1.7", 5683, Proto::Tcp), Action::Deny);
        assert_eq!(q("10.10.1.7", 5684, Proto::Udp), Action::Deny);
        assert_eq!(q("10.10.2.7", 5683, Proto::Udp), Action::Deny);
    }

    #[test]
    fn quarantine_rule_precedes_zone_allow() {
        let mut seg = Segmentation::new();
        seg.define_zone("gateway", block("10.10.0.1/32"), ZoneRole::Gateway).unwrap();
        seg.define_zone("sensors", block("10.10.1.0/24"), ZoneRole::Iot).unwrap();
        let d = DeviceId::from_u64(1);
        let addr = seg.assign_device(d, "sensors").unwrap();
        let gw = ip("10.10.0.1");

        let open = compile_policy(&seg, &BTreeSet::new());
        assert_eq!(open.len(), 3);
        assert_eq!(check_reachability(&open, addr, gw, 5683, Proto::Udp), Action::Allow);

        let q = compile_policy(&seg, &BTreeSet::from([d]));
        assert_eq!(q.rules()[0].action, Action::Deny);
        assert_eq!(
            q.rules()[0].render(),
            "-A FORWARD -s 10.10.1.2/32 -j DROP"
        );
        assert_eq!(check_reachability(&q, addr, gw, 5683, Proto::Udp), Action::Deny);
    }

    #[test]
    fn rendering_is_deterministic() {
        let build = || {
            let mut seg = Segmentation::new();
            seg.define_zone("b", block("10.10.2.0/24"), ZoneRole::Iot).unwrap();
            seg.define_zone("a", block("10.10.1.0/24"), ZoneRole::Operator).unwrap();
            compile_policy(&seg, &BTreeSet::new()).render()
        };
        assert_eq!(build(), build());
    }
}
