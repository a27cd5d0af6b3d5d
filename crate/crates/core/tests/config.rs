use assc_transport::config::{Config, PRESETS};
use assc_transport::Error;

#[test]
fn every_preset_round_trips_through_a_file() {
    let dir = std::env::temp_dir().join(format!("assc-config-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    for name in PRESETS {
        let cfg = Config::preset(name).unwrap();
        let path = dir.join(format!("{name}.toml"));
        std::fs::write(&path, cfg.to_toml()).unwrap();
        assert_eq!(Config::load(&path).unwrap(), cfg, "{name}");
        assert_eq!(Config::builtin(name).unwrap(), cfg, "{name}");
    }
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn bad_documents_are_config_errors() {
    let text = Config::builtin("rectangle").unwrap().to_toml();
    let typo = text.replacen("epsilon", "epsilom", 1);
    assert!(Config::from_toml(&typo).is_err());
    let swapped = text.replacen("mass_min = 1.0", "mass_min = 4.0", 1);
    assert!(matches!(Config::from_toml(&swapped), Err(Error::Config(_))));
    assert!(Config::from_toml("payload = 3").is_err());
    assert!(Config::preset("hexagon").is_err());
    assert!(Config::load(std::path::Path::new("/nonexistent/assc.toml")).is_err());
}

#[test]
fn decentralized_preset_disables_feedback() {
    let cfg = Config::preset("prototype-decentralized").unwrap();
    assert!(!cfg.controller.feedback_enabled);
    let sc = cfg.scenario(None, false).unwrap();
    assert!(sc.failure.is_none());
    assert!(!sc.controller.feedback_enabled);
    assert_eq!(sc.controller.f.amax(), 0.0);
    assert!(matches!(Config::preset("rectangle").unwrap().scenario(None, true), Err(Error::Config(_))));
}
