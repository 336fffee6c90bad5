//! Acceptance suite. Each criterion prints one `PASS`/`FAIL` line to the
//! process stdout (bypassing test capture) and then asserts.
//!
//! The desk-scale training run is shared by criteria 6 and 7 and takes on
//! the order of ten minutes on one core. The full-scale run is ignored by
//! default: `cargo test -p softarm-core --test acceptance -- --ignored`.

use std::io::Write;
use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use softarm::camera::{render_all, STACK_LEN};
use softarm::config::RunConfig;
use softarm::control::{align_to_actuators, allocate};
use softarm::dataset::{log_to_csv, normalize_pixel, quantize_pixel, Dataset};
use softarm::kinematics::{angles_from_tip, tip_from_angles, Calibration, Orientation};
use softarm::net::{self, gradient_check, Network, NetworkSpec, TrainingSet};
use softarm::pipeline::{
    self, run_sine_tracking, steady_state_error, CameraEstimator, FeedbackSource, SimConfig,
    Trajectory, SETTLE_TIME,
};
use softarm::plant::{torque_from_pressures, ArmState, PlantParams};

fn report(id: &str, name: &str, pass: bool, detail: &str) {
    let line = format!(
        "criterion {id} [{name}]: {} ({detail})\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
}

fn workspace_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn scratch(name: &str) -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&dir).unwrap();
    dir.join(name)
}

/// Normalized network input for a plant state, as the closed loop sees it.
fn frame_input(state: &ArmState, cfg: &SimConfig, seed: u64) -> Vec<f32> {
    let noise = cfg.noise.with_seed(seed);
    let frames = render_all(state, &cfg.plant, &cfg.cameras, &noise).unwrap();
    frames.data.iter().map(|&v| normalize_pixel(quantize_pixel(v))).collect()
}

#[test]
fn criterion_1_parameter_count() {
    let net = Network::new(NetworkSpec::default(), 0).unwrap();
    let counts = net.layer_param_counts();
    let maps: Vec<(usize, usize)> = net.spec().feature_maps().iter().map(|&(_, h, w)| (h, w)).collect();
    let pass = net.param_count() == 9378
        && counts == vec![112, 296, 1168, 7720, 82]
        && maps == vec![(24, 32), (6, 8), (3, 4)];
    report(
        "1",
        "parameter count",
        pass,
        &format!("total {} layers {counts:?} maps {maps:?}", net.param_count()),
    );
    assert!(pass);
}

#[test]
fn criterion_2_gradient_check() {
    let started = Instant::now();
    let cfg = SimConfig::default();
    let mut net = Network::new(NetworkSpec::default(), 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    let mut raw: f64 = 0.0;
    let mut kinks = 0;
    let mut checked = 0;
    for batch in 0..5 {
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        for i in 0..4 {
            let o = Orientation::new(rng.gen_range(-30.0..30.0), rng.gen_range(-30.0..30.0));
            let p = [rng.gen_range(1.0..1.4), rng.gen_range(1.0..1.4), rng.gen_range(1.0..1.4)];
            let x = frame_input(&ArmState::at(o, p), &cfg, (batch * 4 + i) as u64);
            inputs.push(x.iter().map(|&v| f64::from(v)).collect());
            targets.push([o.alpha, o.beta]);
        }
        for c in gradient_check(&mut net, &inputs, &targets, 1e-5).unwrap() {
            worst = worst.max(c.smooth_rel_error);
            raw = raw.max(c.rel_error);
            kinks += c.kinks;
            checked += c.len;
        }
    }
    // a perturbation that flips a max-pool winner or ReLU sign measures a
    // different linear piece; those parameters are counted, not compared
    let pass = worst < 1e-4 && kinks * 100 <= checked;
    report(
        "2",
        "gradient check",
        pass,
        &format!(
            "max per-tensor relative error {worst:.3e} excluding {kinks}/{checked} kink-crossing parameters \
             (including them {raw:.3e}), 5 batches of 4, {:.1?}",
            started.elapsed()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_3_allocation() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_diff: f64 = 0.0;
    let mut min_exact = true;
    for _ in 0..100_000 {
        let ua = rng.gen_range(-0.5..0.5);
        let ub = rng.gen_range(-0.5..0.5);
        let p_bar = rng.gen_range(1.0..1.5);
        let (p_ab, p_bc) = align_to_actuators(ua, ub);
        let p = allocate(p_ab, p_bc, p_bar);
        // differences are exact up to the rounding of one subtraction
        let d1 = ((p[0] - p[1]) - p_ab).abs();
        let d2 = ((p[1] - p[2]) - p_bc).abs();
        worst_diff = worst_diff.max(d1).max(d2);
        min_exact &= p.iter().copied().fold(f64::INFINITY, f64::min) == p_bar;
    }
    // the six sign cases of (p_ab, p_bc, p_ab + p_bc)
    let mut orderings_ok = true;
    for (p_ab, p_bc) in [(0.1, 0.2), (0.3, -0.1), (0.1, -0.3), (-0.1, 0.3), (-0.3, 0.1), (-0.1, -0.2)] {
        let p = allocate(p_ab, p_bc, 1.02);
        let min = p.iter().copied().fold(f64::INFINITY, f64::min);
        orderings_ok &= min == 1.02
            && ((p[0] - p[1]) - p_ab).abs() < 1e-15
            && ((p[1] - p[2]) - p_bc).abs() < 1e-15;
    }
    let tol = 4.0 * f64::EPSILON * 2.0;
    let pass = min_exact && worst_diff <= tol && orderings_ok;
    report(
        "3",
        "allocation",
        pass,
        &format!(
            "1e5 samples: min == p_bar exactly: {min_exact}, max difference residual {worst_diff:.2e} (<= {tol:.1e}), six orderings: {orderings_ok}"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_4_decoupling() {
    let params = PlantParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let ua: f64 = rng.gen_range(-0.5..0.5);
        let ub: f64 = rng.gen_range(-0.5..0.5);
        let (p_ab, p_bc) = align_to_actuators(ua, ub);
        let p = allocate(p_ab, p_bc, rng.gen_range(1.0..1.5));
        let (ta, tb) = torque_from_pressures(&p, &params);
        let scale = params.k_t * ua.abs().max(ub.abs()).max(1e-3);
        worst = worst
            .max((ta - params.k_t * ua).abs() / scale)
            .max((tb - params.k_t * ub).abs() / scale);
    }
    let pass = worst < 1e-12;
    report("4", "decoupling", pass, &format!("max relative error {worst:.2e} over 1e4 inputs"));
    assert!(pass);
}

#[test]
fn criterion_5_kinematics() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let calib = Calibration::new(
            rng.gen_range(-0.05..0.05),
            rng.gen_range(-0.05..0.05),
            rng.gen_range(-0.05..0.05),
            rng.gen_range(0.1..0.5),
        )
        .unwrap();
        let o = Orientation::new(rng.gen_range(-30.0..=30.0), rng.gen_range(-30.0..=30.0));
        let tip = tip_from_angles(o, &calib).unwrap();
        let back = angles_from_tip(tip.x, tip.y, &calib).unwrap();
        worst = worst.max((back.alpha - o.alpha).abs()).max((back.beta - o.beta).abs());
    }
    let pass = worst < 1e-9;
    report("5", "kinematics round trip", pass, &format!("max error {worst:.2e} deg over 1e4 samples"));
    assert!(pass);
}

struct Trained {
    net: Network,
    cfg: RunConfig,
    val_rmse: [f64; 3],
    seconds: f64,
}

fn train_from_config(cfg_path: &str, tag: &str) -> Trained {
    let started = Instant::now();
    let cfg = RunConfig::load(workspace_root().join(cfg_path)).unwrap();
    let sim = cfg.sim();
    let train_path = scratch(&format!("{tag}-train.sasd"));
    let val_path = scratch(&format!("{tag}-val.sasd"));
    pipeline::record(&train_path, &cfg.collect, &sim).unwrap();
    pipeline::record(&val_path, &cfg.validation, &sim).unwrap();
    let train = Dataset::load(&train_path).unwrap();
    let val = Dataset::load(&val_path).unwrap();
    let mut net = Network::new(NetworkSpec::default(), cfg.init_seed()).unwrap();
    net::train(&mut net, &train, Some(&val), &cfg.train, |_| {}).unwrap();
    let ev = pipeline::evaluate(&net, &val).unwrap();
    Trained {
        net,
        val_rmse: [ev.rmse.alpha, ev.rmse.beta, ev.rmse.combined],
        seconds: started.elapsed().as_secs_f64(),
        cfg,
    }
}

fn desk() -> &'static Trained {
    static DESK: OnceLock<Trained> = OnceLock::new();
    DESK.get_or_init(|| train_from_config("configs/desk.cfg", "desk"))
}

#[test]
fn criterion_6_desk_accuracy() {
    let d = desk();
    let pass = d.val_rmse[2] <= 2.0;
    report(
        "6",
        "desk sensing accuracy",
        pass,
        &format!(
            "validation RMSE alpha {:.3} beta {:.3} combined {:.3} deg (<= 2.0), {} train / {} val samples, {} epochs, {:.0} s",
            d.val_rmse[0],
            d.val_rmse[1],
            d.val_rmse[2],
            d.cfg.collect.sample_count(),
            d.cfg.validation.sample_count(),
            d.cfg.train.epochs,
            d.seconds
        ),
    );
    assert!(pass);
}

#[test]
#[ignore = "full-scale run takes hours on one core"]
fn criterion_6_full_scale_accuracy() {
    let p = train_from_config("configs/full.cfg", "full");
    let pass = p.val_rmse[2] <= 1.5;
    report(
        "6b",
        "full-scale sensing accuracy",
        pass,
        &format!("combined validation RMSE {:.3} deg (<= 1.5), {:.0} s", p.val_rmse[2], p.seconds),
    );
    assert!(pass);
}

#[test]
fn criterion_7_vision_in_the_loop() {
    let d = desk();
    let sim = d.cfg.sim();
    let started = Instant::now();
    let mut est = CameraEstimator::new(&d.net, sim.plant, sim.cameras, sim.noise);
    let s = &d.cfg.sine;
    let cnn = run_sine_tracking(s.amplitude, s.period, 60.0, FeedbackSource::Cnn, Some(&mut est), &sim);

    let steps = Trajectory::steps(
        &[
            Orientation::new(20.0, -15.0),
            Orientation::new(-30.0, 30.0),
            Orientation::new(30.0, 30.0),
            Orientation::new(0.0, -30.0),
        ],
        5.0,
    );
    let truth = pipeline::run_closed_loop(&steps, FeedbackSource::GroundTruth, None, &sim, ArmState::default()).unwrap();
    let ss = steady_state_error(&truth.rows, SETTLE_TIME).unwrap();

    let (pass, detail) = match &cnn {
        Ok(r) => (
            r.prediction.alpha <= 2.0 && r.prediction.beta <= 2.0 && ss < 0.05,
            format!(
                "CNN feedback 60 s sine: prediction RMSE alpha {:.3} beta {:.3} deg (<= 2.0), tracking {:.3} deg, no divergence; ground-truth steady-state error {ss:.4} deg (< 0.05); {:.0} s",
                r.prediction.alpha,
                r.prediction.beta,
                r.tracking.combined,
                started.elapsed().as_secs_f64()
            ),
        ),
        Err(e) => (false, format!("CNN run failed: {e}; ground-truth steady-state error {ss:.4} deg")),
    };
    report("7", "vision in the loop", pass, &detail);
    assert!(pass);
}

#[test]
fn criterion_8_latency() {
    let cfg = SimConfig::default();
    let net = Network::new(NetworkSpec::default(), 8).unwrap();
    let input = frame_input(&ArmState::at(Orientation::new(10.0, -5.0), [1.1, 1.2, 1.02]), &cfg, 8);
    assert_eq!(input.len(), STACK_LEN);
    let mut ws = net.workspace();
    let mut times: Vec<f64> = (0..1000)
        .map(|_| {
            let t = Instant::now();
            let y = net.forward_f32(&input, &mut ws).unwrap();
            std::hint::black_box(y);
            t.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    times.sort_by(f64::total_cmp);
    let median = times[500];
    let pass = median < 33.0;
    report(
        "8",
        "latency",
        pass,
        &format!("median forward pass {median:.3} ms, p99 {:.3} ms over 1000 runs (< 33 ms)", times[990]),
    );
    assert!(pass);
}

/// Reduced configuration for the determinism check.
fn small_config() -> RunConfig {
    RunConfig::parse_str(
        "seed = 99\ncollect.rows = 2\ncollect.cols = 3\ncollect.dwell = 1\nvalidation.rows = 2\nvalidation.cols = 2\nvalidation.dwell = 1\ntrain.epochs = 3\ntrain.batch = 16\n",
    )
    .unwrap()
}

fn determinism_round(tag: &str) -> (Vec<u8>, Vec<u8>, String, String) {
    let cfg = small_config();
    let sim = cfg.sim();
    let path = scratch(&format!("det-{tag}.sasd"));
    pipeline::record(&path, &cfg.collect, &sim).unwrap();
    let dataset_bytes = std::fs::read(&path).unwrap();
    let data = Dataset::load(&path).unwrap();
    let mut net = Network::new(NetworkSpec::default(), cfg.init_seed()).unwrap();
    let report = net::train(&mut net, &data, Some(&data as &dyn TrainingSet), &cfg.train, |_| {}).unwrap();
    let losses: String = report
        .history
        .iter()
        .map(|e| format!("{},{},{:?}\n", e.epoch, e.train_loss, e.val_loss))
        .collect();
    let model = net::write_model(&net);
    let mut est = CameraEstimator::new(&net, sim.plant, sim.cameras, sim.noise);
    let run = run_sine_tracking(10.0, 4.0, 4.0, FeedbackSource::Cnn, Some(&mut est), &sim).unwrap();
    (dataset_bytes, model, losses, log_to_csv(&run.log.rows))
}

#[test]
fn criterion_9_determinism() {
    let a = determinism_round("a");
    let b = determinism_round("b");
    let same_data = a.0 == b.0;
    let same_model = a.1 == b.1;
    let same_loss = a.2 == b.2;
    let same_log = a.3 == b.3;
    let pass = same_data && same_model && same_loss && same_log;
    report(
        "9",
        "determinism",
        pass,
        &format!(
            "reduced config, two executions: dataset bytes {same_data}, model bytes {same_model}, loss history {same_loss}, run log {same_log}"
        ),
    );
    assert!(pass);
}
