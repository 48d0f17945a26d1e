use homegate_core::clock::{Clock, ManualClock};
use homegate_core::ids::{audit_default_credentials, parse_dictionary, LoginTarget, DEFAULT_DICTIONARY};
use homegate_core::sim::{fleet_login_endpoints, PlantedCredential};

fn scan(planted: &[PlantedCredential]) -> (homegate_core::ids::CredentialAuditReport, u64) {
    let dict = parse_dictionary(DEFAULT_DICTIONARY).unwrap();
    let mut fleet = fleet_login_endpoints(10, 1, planted);
    let mut targets: Vec<&mut dyn LoginTarget> = fleet.iter_mut().map(|t| t as &mut dyn LoginTarget).collect();
    let clock = ManualClock::new(0);
    let report = audit_default_credentials(&mut targets, &dict, &clock).unwrap();
    (report, clock.now_ms())
}

#[test]
fn planted_defaults_and_backdoor_are_found() {
    let planted = [
        "2:ssh:admin:admin".parse().unwrap(),
        "7:fortios-ssh:Fortimanager_Access:FGTAbc11*xy+Qqz27".parse().unwrap(),
    ];
    let (report, _) = scan(&planted);
    let hits: Vec<(String, String)> = report
        .findings
        .iter()
        .map(|f| (f.target_id.clone(), f.username.clone()))
        .collect();
    assert_eq!(
        hits,
        [
            ("sensor-002".to_string(), "admin".to_string()),
            ("sensor-007".to_string(), "Fortimanager_Access".to_string())
        ]
    );
    let shown = format!("{} {:?} {}", report.findings[1], report.findings[1], serde_json::to_string(&report).unwrap());
    assert!(!shown.contains("FGTAbc11"));
}

#[test]
fn clean_fleet_has_no_findings_and_is_rate_limited() {
    let (report, elapsed) = scan(&[]);
    assert!(report.findings.is_empty());
    assert!(report.unreachable.is_empty());
    assert!(report.attempts > 10);
    // Never faster than two attempts per second against a single target.
    let per_target_max = parse_dictionary(DEFAULT_DICTIONARY)
        .unwrap()
        .iter()
        .filter(|e| e.service == "ssh")
        .count() as u64;
    assert!(elapsed >= (per_target_max - 1) * 500);
}

#[test]
fn unreachable_targets_are_reported() {
    let dict = parse_dictionary(DEFAULT_DICTIONARY).unwrap();
    let mut fleet = fleet_login_endpoints(3, 1, &[]);
    fleet[1].reachable = false;
    let mut targets: Vec<&mut dyn LoginTarget> = fleet.iter_mut().map(|t| t as &mut dyn LoginTarget).collect();
    let report = audit_default_credentials(&mut targets, &dict, &ManualClock::new(0)).unwrap();
    assert_eq!(report.unreachable, ["sensor-001"]);
}

#[test]
fn bad_dictionary_lines() {
    assert!(parse_dictionary("ssh\tadmin").is_err());
    assert!(parse_dictionary("# nothing\n").unwrap().is_empty());
}
