use std::collections::BTreeSet;
use std::net::Ipv4Addr;

use homegate_core::segmentation::*;
use homegate_core::DeviceId;
use proptest::prelude::*;

const GOLDEN: &str = include_str!("golden/policy_3zone.rules");

/// Endpoints in matrix order: s1 s2 s3 c1 c2 r1 gw.
const NAMES: [&str; 7] = ["s1", "s2", "s3", "c1", "c2", "r1", "gw"];

// Hand-derived from the zone layout below: sensors and cameras may reach the
// gateway and the repeater on UDP 5683, the repeater only the gateway; c2 is
// quarantined; the only cross-zone grant is sensors -> cameras on TCP 554.
const UDP_5683: [&str; 7] = [
    "0000011", "0000011", "0000011", "0000011", "0000000", "0000001", "0000000",
];
const TCP_554: [&str; 7] = [
    "0001100", "0001100", "0001100", "0000000", "0000000", "0000000", "0000000",
];

fn block(s: &str) -> AddrBlock {
    s.parse().unwrap()
}

fn fixture() -> (Segmentation, BTreeSet<DeviceId>, Vec<Ipv4Addr>) {
    let mut seg = Segmentation::new();
    seg.define_zone("gateway", block("10.10.0.1/32"), ZoneRole::Gateway).unwrap();
    seg.define_zone("sensors", block("10.10.1.0/24"), ZoneRole::Iot).unwrap();
    seg.define_zone("cameras", block("10.10.2.0/24"), ZoneRole::Iot).unwrap();
    seg.define_zone("relay", block("10.10.3.0/29"), ZoneRole::Repeater).unwrap();
    seg.add_grant(
        "sensors",
        Grant {
            zone: "cameras".into(),
            port: Some(554),
            proto: Proto::Tcp,
        },
    )
    .unwrap();
    let zones = ["sensors", "sensors", "sensors", "cameras", "cameras", "relay"];
    let mut addrs = Vec::new();
    for (i, z) in zones.iter().enumerate() {
        addrs.push(seg.assign_device(DeviceId::from_u64(i as u64 + 1), z).unwrap());
    }
    addrs.push(Ipv4Addr::new(10, 10, 0, 1));
    let quarantined = BTreeSet::from([DeviceId::from_u64(5)]);
    (seg, quarantined, addrs)
}

fn matrix(rules: &RuleSet, addrs: &[Ipv4Addr], port: u16, proto: Proto) -> Vec<String> {
    addrs
        .iter()
        .map(|&src| {
            addrs
                .iter()
                .map(|&dst| match check_reachability(rules, src, dst, port, proto) {
                    Action::Allow => '1',
                    Action::Deny => '0',
                })
                .collect()
        })
        .collect()
}

#[test]
fn addresses_follow_allocation_rule() {
    let (_, _, addrs) = fixture();
    let got: Vec<String> = addrs.iter().map(|a| a.to_string()).collect();
    assert_eq!(
        got,
        ["10.10.1.2", "10.10.1.3", "10.10.1.4", "10.10.2.2", "10.10.2.3", "10.10.3.2", "10.10.0.1"]
    );
}

#[test]
fn brute_force_matrix_matches_hand_oracle() {
    let (seg, q, addrs) = fixture();
    let rules = compile_policy(&seg, &q);
    for (port, proto, want) in [(5683, Proto::Udp, UDP_5683), (554, Proto::Tcp, TCP_554)] {
        let got = matrix(&rules, &addrs, port, proto);
        for (i, row) in got.iter().enumerate() {
            assert_eq!(row, want[i], "{proto:?}/{port} row {}", NAMES[i]);
        }
    }
    // Nothing else is open between these endpoints.
    for (port, proto) in [(22, Proto::Tcp), (80, Proto::Tcp), (5683, Proto::Tcp), (554, Proto::Udp)] {
        let got = matrix(&rules, &addrs, port, proto);
        assert!(got.iter().all(|r| r == "0000000"), "{proto:?}/{port}");
    }
}

#[test]
fn ruleset_matches_golden_file() {
    let (seg, q, _) = fixture();
    let a = compile_policy(&seg, &q).render();
    assert_eq!(a, GOLDEN);
    assert_eq!(compile_policy(&seg, &q).render(), a);
}

#[test]
fn empty_policy_is_deny_all() {
    let rules = compile_policy(&Segmentation::new(), &BTreeSet::new());
    assert_eq!(rules.render(), "-A FORWARD -j DROP\n");
}

proptest! {
    #[test]
    fn outside_addresses_are_denied(src: u32, dst: u32, port: u16, tcp: bool) {
        let (seg, q, _) = fixture();
        let rules = compile_policy(&seg, &q);
        let inside = block("10.10.0.0/16");
        let (src, dst) = (Ipv4Addr::from(src), Ipv4Addr::from(dst));
        prop_assume!(!inside.contains(src));
        let proto = if tcp { Proto::Tcp } else { Proto::Udp };
        prop_assert_eq!(check_reachability(&rules, src, dst, port, proto), Action::Deny);
    }

    #[test]
    fn quarantined_source_is_always_denied(dst: u32, port: u16, p in 0..3u8) {
        let (seg, q, addrs) = fixture();
        let rules = compile_policy(&seg, &q);
        let proto = [Proto::Udp, Proto::Tcp, Proto::Any][p as usize];
        prop_assert_eq!(check_reachability(&rules, addrs[4], Ipv4Addr::from(dst), port, proto), Action::Deny);
    }

    #[test]
    fn iot_zones_without_grants_are_isolated(i in 0..3usize, j in 0..2usize, port: u16, tcp: bool) {
        let (seg, q, addrs) = fixture();
        let rules = compile_policy(&seg, &q);
        let proto = if tcp { Proto::Tcp } else { Proto::Udp };
        // cameras -> sensors has no grant in either protocol
        prop_assert_eq!(check_reachability(&rules, addrs[3 + j], addrs[i], port, proto), Action::Deny);
    }
}
