//! The scenario files shipped in `scenarios/` must stay loadable and
//! keep describing the two documented experiments.

use edmd_mpc::harness::load_scenario;
use std::path::Path;

fn scenario_dir() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../scenarios"))
}

#[test]
fn baseline_21d_loads() {
    let s = load_scenario(scenario_dir().join("baseline_21d.json")).unwrap();
    assert_eq!(s.total_days, 21.0);
    assert_eq!(s.injection_days, vec![1.0, 3.0, 5.0]);
    assert!(s.skip_windows.is_empty());
    assert_eq!(s.u_max, 0.05);
    assert_eq!(s.weights.target, 5.0);
    assert_eq!(s.seed, 42);
}

#[test]
fn skip_week_49d_loads() {
    let s = load_scenario(scenario_dir().join("skip_week_49d.json")).unwrap();
    assert_eq!(s.total_days, 49.0);
    assert_eq!(s.skip_windows, vec![[21.0, 28.0]]);
    assert_eq!(s.u_max, 0.05);
    assert_eq!(s.weights.target, 5.0);
}
