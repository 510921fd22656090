//! Scenario files on disk: relative density tables, error kinds, round trips.

use std::fs;

use covsteer::scenario::{DensityConfig, ModelConfig, Scenario, ScenarioConfig, ScenarioError};
use covsteer::propagate_nominal;

#[test]
fn csv_density_table_resolves_relative_to_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ScenarioConfig::bundled("aerocapture").unwrap();
    let (rho0, h) = (7.649e-3, 11.1e3);
    let mut table = String::from("# altitude, density\naltitude_m,density_kg_m3\n");
    for i in 0..=400 {
        let alt = i as f64 * 500.0;
        table.push_str(&format!("{alt},{}\n", rho0 * (-alt / h).exp()));
    }
    fs::create_dir(dir.path().join("data")).unwrap();
    fs::write(dir.path().join("data/density.csv"), table).unwrap();
    if let ModelConfig::Aerocapture { density, .. } = &mut cfg.model {
        *density = DensityConfig::Csv {
            path: "data/density.csv".into(),
        };
    }
    let path = dir.path().join("scenario.toml");
    fs::write(&path, cfg.to_toml()).unwrap();

    let tabled = Scenario::load(&path).unwrap();
    let exact = Scenario::bundled("aerocapture").unwrap();
    let fly = |s: &Scenario| {
        propagate_nominal(&s.model, &s.field, &s.problem.x0_mean, &s.problem.initial_controls, &s.problem.partition)
            .unwrap()
            .final_state()
            .clone()
    };
    let (a, b) = (fly(&tabled), fly(&exact));
    // table interpolation error only
    assert!(((a[1] - b[1]) / b[1]).abs() < 1e-3, "{a} vs {b}");
}

#[test]
fn error_kinds() {
    assert!(matches!(
        Scenario::load(std::path::Path::new("/nonexistent/scenario.toml")),
        Err(ScenarioError::Io { .. })
    ));
    assert!(matches!(Scenario::bundled("mars_lander"), Err(ScenarioError::UnknownBundled(_))));
    assert!(matches!(Scenario::from_toml("schema_version = 1\nname = ", None), Err(ScenarioError::Parse(_))));

    let mut cfg = ScenarioConfig::bundled("double_integrator").unwrap();
    cfg.partition.knots = vec![0.0, 1.0, 1.0];
    assert!(matches!(Scenario::from_config(cfg, None), Err(ScenarioError::Invalid(_))));
}

#[test]
fn saved_config_reloads_identically() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["double_integrator", "aerocapture"] {
        let cfg = ScenarioConfig::bundled(name).unwrap();
        let path = dir.path().join(format!("{name}.toml"));
        fs::write(&path, cfg.to_toml()).unwrap();
        let loaded = Scenario::load(&path).unwrap();
        assert_eq!(loaded.config, cfg);
        assert_eq!(loaded.chance().len(), Scenario::bundled(name).unwrap().chance().len());
    }
}
