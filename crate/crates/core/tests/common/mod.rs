#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rvio::cli_io::{dataset_records, run_dataset, RunConfig, RunOutputs, Runner};
use rvio::estimator::{Estimator, InitialPose};
use rvio::filter::{FeatureSlot, FullState, DEFAULT_CAPACITY};
use rvio::geometry::{so3_exp, BearingVector, Quat, Vec3};
use rvio::simulator::{preset, Scenario};

pub fn random_vec(rng: &mut ChaCha8Rng, scale: f64) -> Vec3 {
    Vec3::new(
        rng.random_range(-scale..scale),
        rng.random_range(-scale..scale),
        rng.random_range(-scale..scale),
    )
}

pub fn random_quat(rng: &mut ChaCha8Rng) -> Quat {
    so3_exp(&random_vec(rng, 1.5))
}

/// Random full state with `n_features` slots in front of the camera.
pub fn random_state(seed: u64, n_features: usize) -> FullState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = FullState {
        r_ib_b: random_vec(&mut rng, 5.0),
        v_ib_b: random_vec(&mut rng, 2.0),
        q_b_i: random_quat(&mut rng),
        b_a: random_vec(&mut rng, 0.1),
        b_g: random_vec(&mut rng, 0.05),
        r_bc_b: random_vec(&mut rng, 0.2),
        q_b_c: random_quat(&mut rng),
        r_br_b: random_vec(&mut rng, 0.2),
        q_b_r: random_quat(&mut rng),
        features: Vec::new(),
        capacity: DEFAULT_CAPACITY,
    };
    for i in 0..n_features {
        let mut v = random_vec(&mut rng, 0.5);
        v.z = 1.0;
        x.features.push(FeatureSlot {
            id: i as u64,
            bearing: BearingVector::new(v).unwrap(),
            inv_depth: rng.random_range(0.05..1.0),
            misses: 0,
        });
    }
    x
}

pub struct PresetRun {
    pub scenario: Scenario,
    pub outputs: RunOutputs,
}

impl PresetRun {
    /// RMS of the inertial velocity error at the output ticks.
    pub fn velocity_rms(&self) -> f64 {
        let ticks = &self.outputs.ticks;
        let sum: f64 = ticks.iter().map(|t| (t.v - self.scenario.truth(t.t).v).norm_squared()).sum();
        (sum / ticks.len() as f64).sqrt()
    }

    /// RMS of the position error against truth, without alignment.
    pub fn position_rms(&self) -> f64 {
        let ticks = &self.outputs.ticks;
        let sum: f64 = ticks.iter().map(|t| (t.p - self.scenario.truth(t.t).p).norm_squared()).sum();
        (sum / ticks.len() as f64).sqrt()
    }

    pub fn final_drift(&self) -> f64 {
        self.outputs.metrics.as_ref().expect("metrics").final_drift
    }
}

pub fn run_preset(name: &str, seed: u64, cfg: &RunConfig) -> rvio::error::Result<PresetRun> {
    let scenario = Scenario::new(preset(name, seed)?)?;
    let outputs = run_dataset(&scenario.dataset(), cfg, true)?;
    Ok(PresetRun { scenario, outputs })
}

/// Runs `scenario` from an estimator built at its true initial pose.
pub fn run_from_truth(scenario: &Scenario, cfg: &RunConfig) -> rvio::error::Result<RunOutputs> {
    let s = scenario.truth(0.0);
    let est = Estimator::new(
        cfg.estimator,
        &InitialPose {
            t: 0.0,
            p: s.p,
            q: s.q,
            v: s.v,
        },
    )?;
    run_with(scenario, cfg, est)
}

pub fn run_with(scenario: &Scenario, cfg: &RunConfig, est: Estimator) -> rvio::error::Result<RunOutputs> {
    let mut r = Runner::with_estimator(cfg.clone(), est)?.keep_ticks(true);
    for rec in dataset_records(&scenario.dataset()) {
        r.push(rec)?;
    }
    r.finish()
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

static SERIAL: std::sync::Mutex<()> = std::sync::Mutex::new(());

/// Holds off other tests of the same binary so timings are not shared.
pub fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

/// Prints the verdict line of an acceptance check and fails on FAIL.
pub fn verdict(name: &str, pass: bool, detail: &str) {
    // written past the test harness capture so the line shows in every run
    use std::io::Write;
    let _ = writeln!(std::io::stderr().lock(), "[{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "{name}: {detail}");
}
