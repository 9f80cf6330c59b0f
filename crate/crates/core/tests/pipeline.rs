use rvio::cli_io::{open_dataset, read_dataset, run_dataset, run_records, write_dataset_file, RunConfig};
use rvio::simulator::{preset, Scenario};

fn short_scenario() -> Scenario {
    let mut cfg = preset("nominal", 5).unwrap();
    cfg.duration = 8.0;
    Scenario::new(cfg).unwrap()
}

#[test]
fn dataset_file_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    let d = short_scenario().dataset();
    write_dataset_file(&d, &path).unwrap();
    let back = read_dataset(std::io::BufReader::new(std::fs::File::open(&path).unwrap())).unwrap();
    assert_eq!(back.imu, d.imu);
    assert_eq!(back.radar.len(), d.radar.len());
    assert_eq!(back.features.len(), d.features.len());
}

#[test]
fn streamed_run_matches_in_memory_run() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    let d = short_scenario().dataset();
    write_dataset_file(&d, &path).unwrap();
    let cfg = RunConfig::default();
    let a = run_dataset(&d, &cfg, false).unwrap();
    let b = run_records(open_dataset(&path).unwrap(), &cfg).unwrap();
    assert_eq!(a.trajectory, b.trajectory);
    assert_eq!(a.metrics, b.metrics);
    assert!(a.metrics.unwrap().ape_rmse < 0.1);
}

#[test]
fn config_text_roundtrip() {
    let mut cfg = RunConfig::default();
    cfg.set("radar.sigma_vr", "0.2").unwrap();
    cfg.set("vision.enabled", "false").unwrap();
    cfg.perturb_radar_rotation(2, 15.0);
    let back = RunConfig::parse(&cfg.to_kv_string()).unwrap();
    assert_eq!(back.estimator.radar_noise, cfg.estimator.radar_noise);
    assert!(!back.estimator.use_vision);
    assert!(back.estimator.extrinsics.q_b_r.angle_to(&cfg.estimator.extrinsics.q_b_r) < 1e-12);
}

#[test]
fn sensor_ablations_run() {
    let sc = short_scenario();
    let d = sc.dataset();
    for (radar, vision) in [(true, false), (false, true)] {
        let mut cfg = RunConfig::default();
        cfg.estimator.use_radar = radar;
        cfg.estimator.use_vision = vision;
        let out = run_dataset(&d, &cfg, false).unwrap();
        assert!(out.metrics.unwrap().ape_rmse.is_finite());
        assert!(!out.trajectory.is_empty());
    }
}
