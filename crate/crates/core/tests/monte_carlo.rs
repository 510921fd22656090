//! Monte Carlo reproducibility and bookkeeping.

use covsteer::monte_carlo::{run_trials, simulate_trial, McConfig, McSetup};
use covsteer::scenario::Scenario;
use covsteer::ClarabelAdapter;

fn small(trials: usize, seed: u64) -> McConfig {
    McConfig {
        trials,
        seed,
        ..McConfig::default()
    }
}

#[test]
fn same_seed_same_report() {
    let s = Scenario::bundled("double_integrator").unwrap();
    let policy = s.solve(&ClarabelAdapter::default(), None).unwrap().policy;
    let a = s.simulate(&policy, &small(300, 5), "a").unwrap();
    let b = s.simulate(&policy, &small(300, 5), "a").unwrap();
    assert_eq!(a, b);
    let c = s.simulate(&policy, &small(300, 6), "a").unwrap();
    assert_ne!(a.state_mean, c.state_mean);
}

#[test]
fn trials_do_not_depend_on_batch_size() {
    let s = Scenario::bundled("aerocapture").unwrap();
    let policy = s.open_loop_policy();
    let setup = McSetup {
        model: &s.model,
        field: &s.field,
        partition: &s.problem.partition,
        x0_mean: &s.problem.x0_mean,
        p0: &s.problem.p0,
    };
    let cfg = small(16, 99);
    let batch = run_trials(&setup, &policy, &cfg).unwrap();
    for i in [0, 7, 15] {
        assert_eq!(batch[i], simulate_trial(&setup, &policy, &cfg, i));
    }
    assert_eq!(batch[3], run_trials(&setup, &policy, &small(4, 99)).unwrap()[3]);
}

#[test]
fn saturation_clamps_applied_but_not_commanded() {
    let s = Scenario::bundled("aerocapture").unwrap();
    let policy = s.solve(&ClarabelAdapter::default(), Some(1)).unwrap().policy;
    let mut cfg = small(200, 3);
    cfg.saturation = Some((-0.2, 0.2));
    let outputs = s.simulate_trials(&policy, &cfg).unwrap();
    let mut clipped = 0;
    for o in outputs.iter().filter(|o| o.succeeded()) {
        for (c, a) in o.commanded.iter().zip(&o.applied) {
            assert!(a[0].abs() <= 0.2);
            if c[0].abs() > 0.2 {
                clipped += 1;
                assert_eq!(a[0], c[0].clamp(-0.2, 0.2));
            } else {
                assert_eq!(a[0], c[0]);
            }
        }
    }
    assert!(clipped > 0);
}

#[test]
fn initial_field_spread_matches_the_kernel() {
    // Deterministic initial state: every trial samples the field at one point.
    let s = Scenario::bundled("aerocapture").unwrap();
    let r = s.simulate(&s.open_loop_policy(), &small(4000, 1), "ol").unwrap();
    let lc = r.lincov.as_ref().unwrap();
    let se = lc.field_std[0] / (2.0 * 3999.0f64).sqrt();
    assert!((r.field_std[0] - lc.field_std[0]).abs() < 4.0 * se, "{} vs {}", r.field_std[0], lc.field_std[0]);
    assert!(r.field_mean[0].abs() < 4.0 * lc.field_std[0] / 4000f64.sqrt());
}

#[test]
fn report_serializes() {
    let s = Scenario::bundled("double_integrator").unwrap();
    let r = s.simulate(&s.open_loop_policy(), &small(50, 2), "ol").unwrap();
    let back: covsteer::monte_carlo::McReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
    assert_eq!(back, r);
}

#[test]
fn linear_covariance_ellipses_match_monte_carlo() {
    let s = Scenario::bundled("double_integrator").unwrap();
    let policy = s.solve(&ClarabelAdapter::default(), None).unwrap().policy;
    let r = s.simulate(&policy, &small(5000, 20240501), "cl").unwrap();
    let lc = r.lincov.as_ref().unwrap();
    let axes = |rows: &Vec<Vec<f64>>| {
        let e = covsteer::linalg::mat_from_rows(rows).symmetric_eigen().eigenvalues;
        let mut a: Vec<f64> = e.iter().map(|l| 3.0 * l.max(0.0).sqrt()).collect();
        a.sort_by(f64::total_cmp);
        a
    };
    for k in 0..r.knots.len() {
        let (mc, pred) = (axes(&r.state_cov[k]), axes(&lc.state_cov[k]));
        for (m, p) in mc.iter().zip(&pred) {
            assert!((m - p).abs() <= 0.1 * p, "knot {k}: MC axes {mc:?} vs predicted {pred:?}");
        }
    }
}
