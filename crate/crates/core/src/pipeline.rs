//! Multi-rate closed-loop simulation and the experiment drivers built on it.
//!
//! Everything runs on a 1 ms physics grid. On every tick the inner pressure
//! loops and the plant advance; every 20 ms the outer position loop runs on
//! the most recent feedback; sensing ticks follow a 34/33/33 ms pattern that
//! yields exactly 30 frames per second; log rows are taken every 100 ms. The
//! schedule is a pure function of the tick index, so every run is
//! reproducible from its configuration and seeds.

use serde::{Deserialize, Serialize};

use crate::camera::{mix_seed, render_all, CameraConfig, NoiseConfig, STACK_LEN};
use crate::control::{outer_loop, pressure_pi, ControllerState, Gains};
use crate::dataset::{normalize_pixel, quantize_pixel, DatasetHeader, DatasetWriter, LogRow, Rmse, Sample};
use crate::kinematics::Orientation;
use crate::net::{predict_all, Network, TrainingSet};
use crate::par;
use crate::plant::{self, ArmState, PlantParams};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RateConfig {
    pub physics_hz: u32,
    pub position_hz: u32,
    pub sensing_hz: u32,
    pub log_hz: u32,
}

impl Default for RateConfig {
    fn default() -> Self {
        Self {
            physics_hz: 1000,
            position_hz: 50,
            sensing_hz: 30,
            log_hz: 10,
        }
    }
}

impl RateConfig {
    pub fn validate(&self) -> Result<()> {
        let p = self.physics_hz;
        for (name, r) in [
            ("position_hz", self.position_hz),
            ("sensing_hz", self.sensing_hz),
            ("log_hz", self.log_hz),
        ] {
            if r == 0 || r > p {
                return Err(Error::Config(format!("rates.{name} must be in 1..={p}, got {r}")));
            }
        }
        if p == 0 {
            return Err(Error::Config("rates.physics_hz must be > 0".into()));
        }
        Ok(())
    }

    pub fn physics_dt(&self) -> f64 {
        1.0 / f64::from(self.physics_hz)
    }

    /// Whether a loop running at `rate` fires on physics tick `k`.
    ///
    /// Fires on the first tick at or after each multiple of its period, so a
    /// rate that does not divide the physics rate alternates between the two
    /// neighbouring integer periods (30 Hz on 1 kHz: 34, 33, 33 ticks).
    pub fn fires(&self, rate: u32, tick: u64) -> bool {
        (tick * u64::from(rate)) % u64::from(self.physics_hz) < u64::from(rate)
    }
}

/// Where the position loop takes its angle feedback from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeedbackSource {
    GroundTruth,
    Cnn,
}

impl std::str::FromStr for FeedbackSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "truth" | "ground_truth" | "gt" => Ok(Self::GroundTruth),
            "cnn" => Ok(Self::Cnn),
            other => Err(Error::Config(format!("unknown feedback source {other:?} (truth|cnn)"))),
        }
    }
}

/// Produces an angle estimate at a sensing tick.
pub trait AngleEstimator {
    fn estimate(&mut self, state: &ArmState, frame_index: u64) -> Result<Orientation>;
}

/// Renders the three camera frames for the current state and runs the
/// network on them. Frames go through the same u8 quantization as recorded
/// datasets.
pub struct CameraEstimator<'a> {
    pub net: &'a Network,
    pub plant: PlantParams,
    pub cameras: [CameraConfig; 3],
    pub noise: NoiseConfig,
    buffer: Vec<f32>,
    ws: crate::net::Workspace,
}

impl<'a> CameraEstimator<'a> {
    pub fn new(net: &'a Network, plant: PlantParams, cameras: [CameraConfig; 3], noise: NoiseConfig) -> Self {
        Self {
            net,
            plant,
            cameras,
            noise,
            buffer: vec![0.0; STACK_LEN],
            ws: net.workspace(),
        }
    }
}

impl AngleEstimator for CameraEstimator<'_> {
    fn estimate(&mut self, state: &ArmState, frame_index: u64) -> Result<Orientation> {
        let noise = self.noise.with_seed(mix_seed(self.noise.seed, frame_index));
        let frames = render_all(state, &self.plant, &self.cameras, &noise)?;
        for (b, &v) in self.buffer.iter_mut().zip(&frames.data) {
            *b = normalize_pixel(quantize_pixel(v));
        }
        let [a, b] = self.net.forward_f32(&self.buffer, &mut self.ws)?;
        Ok(Orientation::new(a, b))
    }
}

/// Setpoint trajectory.
#[derive(Debug, Clone, PartialEq)]
pub enum Trajectory {
    /// Piecewise linear through `(time, setpoint)` knots; two knots at the
    /// same time form a step. Holds the last knot until `end`.
    Piecewise { knots: Vec<(f64, Orientation)>, end: f64 },
    /// `alpha = A sin(wt)`, `beta = A sin(wt - 90 deg)` with the amplitude
    /// ramped in linearly over the first period.
    Sine { amplitude: f64, period: f64, duration: f64 },
}

impl Trajectory {
    /// Holds each setpoint for `dwell` seconds in sequence.
    pub fn steps(points: &[Orientation], dwell: f64) -> Self {
        let mut knots = Vec::with_capacity(points.len() * 2);
        for (i, &p) in points.iter().enumerate() {
            knots.push((i as f64 * dwell, p));
            knots.push(((i + 1) as f64 * dwell, p));
        }
        Trajectory::Piecewise {
            knots,
            end: points.len() as f64 * dwell,
        }
    }

    pub fn duration(&self) -> f64 {
        match self {
            Trajectory::Piecewise { end, .. } => *end,
            Trajectory::Sine { duration, .. } => *duration,
        }
    }

    pub fn setpoint(&self, t: f64) -> Orientation {
        match self {
            Trajectory::Piecewise { knots, .. } => {
                let Some(first) = knots.first() else {
                    return Orientation::default();
                };
                if t < first.0 {
                    return first.1;
                }
                // last knot with time <= t
                let i = knots.partition_point(|k| k.0 <= t);
                if i >= knots.len() {
                    return knots[knots.len() - 1].1;
                }
                let (t0, p0) = knots[i - 1];
                let (t1, p1) = knots[i];
                let w = if t1 > t0 { (t - t0) / (t1 - t0) } else { 1.0 };
                Orientation::new(p0.alpha + w * (p1.alpha - p0.alpha), p0.beta + w * (p1.beta - p0.beta))
            }
            Trajectory::Sine { amplitude, period, .. } => {
                let env = amplitude * (t / period).min(1.0);
                let w = std::f64::consts::TAU / period;
                Orientation::new(env * (w * t).sin(), env * (w * t - std::f64::consts::FRAC_PI_2).sin())
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        match self {
            Trajectory::Piecewise { knots, .. } => knots
                .iter()
                .map(|(_, p)| p.alpha.abs().max(p.beta.abs()))
                .fold(0.0, f64::max),
            Trajectory::Sine { amplitude, .. } => amplitude.abs(),
        }
    }
}

/// Everything the closed loop needs besides the trajectory.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SimConfig {
    pub plant: PlantParams,
    pub gains: Gains,
    pub rates: RateConfig,
    pub cameras: [CameraConfig; 3],
    pub noise: NoiseConfig,
}


impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.plant.validate()?;
        self.gains.validate()?;
        self.rates.validate()?;
        for c in &self.cameras {
            c.validate()?;
        }
        self.noise.validate()?;
        if (self.rates.physics_dt() - self.plant.dt).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "plant.dt = {} does not match rates.physics_hz = {}",
                self.plant.dt, self.rates.physics_hz
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TickCounts {
    pub physics: u64,
    pub position: u64,
    pub sensing: u64,
    pub log: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub rows: Vec<LogRow>,
    /// Plant state at each log row.
    pub states: Vec<ArmState>,
    pub ticks: TickCounts,
    pub seed: u64,
}

/// Runs the cascaded loop along `trajectory`.
///
/// With `FeedbackSource::Cnn` the position loop uses the estimator's output;
/// with ground truth it uses the plant state sampled on the same sensing
/// ticks. When an estimator is supplied its output is logged as the
/// prediction either way; without one the prediction columns repeat the
/// truth.
pub fn run_closed_loop(
    trajectory: &Trajectory,
    source: FeedbackSource,
    mut estimator: Option<&mut dyn AngleEstimator>,
    cfg: &SimConfig,
    initial: ArmState,
) -> Result<RunLog> {
    cfg.validate()?;
    if source == FeedbackSource::Cnn && estimator.is_none() {
        return Err(Error::Config("CNN feedback requires a loaded model".into()));
    }
    if trajectory.max_abs() > 45.0 {
        return Err(Error::Config(format!(
            "trajectory leaves the workspace: |setpoint| up to {}",
            trajectory.max_abs()
        )));
    }
    let rates = cfg.rates;
    let dt = rates.physics_dt();
    let dt_pos = 1.0 / f64::from(rates.position_hz);
    let n_ticks = (trajectory.duration() * f64::from(rates.physics_hz)).round() as u64;

    let mut state = initial;
    let mut ctrl = ControllerState::default();
    let mut feedback = state.orientation();
    let mut prediction = feedback;
    let mut setpoints = [cfg.gains.p_bar; 3];
    let (mut u_alpha, mut u_beta) = (0.0, 0.0);
    let mut counts = TickCounts::default();
    let mut rows = Vec::with_capacity((n_ticks / 100 + 1) as usize);
    let mut states = Vec::with_capacity(rows.capacity());

    for k in 0..n_ticks {
        let t = k as f64 * dt;
        let sp = trajectory.setpoint(t);
        if rates.fires(rates.sensing_hz, k) {
            let truth = state.orientation();
            prediction = match estimator.as_deref_mut() {
                Some(e) => e.estimate(&state, counts.sensing)?,
                None => truth,
            };
            feedback = match source {
                FeedbackSource::GroundTruth => truth,
                FeedbackSource::Cnn => prediction,
            };
            counts.sensing += 1;
        }
        if rates.fires(rates.position_hz, k) {
            let out = outer_loop(sp, feedback, &mut ctrl, &cfg.gains, dt_pos);
            setpoints = out.pressure_setpoints;
            u_alpha = out.u_alpha;
            u_beta = out.u_beta;
            counts.position += 1;
        }
        if rates.fires(rates.log_hz, k) {
            rows.push(LogRow {
                time: t,
                alpha_gt: state.alpha,
                beta_gt: state.beta,
                alpha_pred: prediction.alpha,
                beta_pred: prediction.beta,
                alpha_sp: sp.alpha,
                beta_sp: sp.beta,
                pressures: state.pressures,
                u_alpha,
                u_beta,
            });
            states.push(state);
            counts.log += 1;
        }
        let valve = pressure_pi(setpoints, state.pressures, &mut ctrl, &cfg.gains, dt);
        state = plant::step(&state, valve, &cfg.plant);
        counts.physics += 1;
        let worst = state.alpha.abs().max(state.beta.abs());
        if !(worst <= 90.0) {
            return Err(Error::Divergence {
                time: t + dt,
                angle: worst,
            });
        }
    }
    Ok(RunLog {
        rows,
        states,
        ticks: counts,
        seed: cfg.noise.seed,
    })
}

/// Summary written next to each run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub rmse_alpha_deg: f64,
    pub rmse_beta_deg: f64,
    pub rmse_combined_deg: f64,
    pub tracking_rmse_deg: f64,
    /// Worst tracking error on rows whose setpoint has been held for at
    /// least [`SETTLE_TIME`]; `None` if the run has no such rows.
    pub steady_state_error_deg: Option<f64>,
    pub ticks: u64,
    pub seed: u64,
}

/// Hold time after which a step counts as settled, s.
pub const SETTLE_TIME: f64 = 3.0;

/// Largest per-axis |truth - setpoint| over rows whose setpoint has been
/// constant for at least `settle` seconds.
pub fn steady_state_error(rows: &[LogRow], settle: f64) -> Option<f64> {
    let mut held_since = rows.first()?.time;
    let mut prev = (rows[0].alpha_sp, rows[0].beta_sp);
    let mut worst: Option<f64> = None;
    for r in rows {
        if (r.alpha_sp, r.beta_sp) != prev {
            prev = (r.alpha_sp, r.beta_sp);
            held_since = r.time;
        }
        if r.time - held_since >= settle - 1e-9 {
            let e = (r.alpha_gt - r.alpha_sp).abs().max((r.beta_gt - r.beta_sp).abs());
            worst = Some(worst.map_or(e, |w: f64| w.max(e)));
        }
    }
    worst
}

impl RunSummary {
    pub fn from_log(log: &RunLog) -> Self {
        let pred = Rmse::prediction(&log.rows);
        let track = Rmse::tracking(&log.rows);
        Self {
            rmse_alpha_deg: pred.map_or(0.0, |r| r.alpha),
            rmse_beta_deg: pred.map_or(0.0, |r| r.beta),
            rmse_combined_deg: pred.map_or(0.0, |r| r.combined),
            tracking_rmse_deg: track.map_or(0.0, |r| r.combined),
            steady_state_error_deg: steady_state_error(&log.rows, SETTLE_TIME),
            ticks: log.ticks.physics,
            seed: log.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SineReport {
    pub log: RunLog,
    pub prediction: Rmse,
    pub tracking: Rmse,
}

pub fn run_sine_tracking(
    amplitude: f64,
    period: f64,
    duration: f64,
    source: FeedbackSource,
    estimator: Option<&mut dyn AngleEstimator>,
    cfg: &SimConfig,
) -> Result<SineReport> {
    if !(0.0..=30.0).contains(&amplitude) || !(period > 0.0) || !(duration > 0.0) {
        return Err(Error::Config(format!(
            "sine scenario needs amplitude in [0, 30], positive period and duration; got ({amplitude}, {period}, {duration})"
        )));
    }
    let traj = Trajectory::Sine {
        amplitude,
        period,
        duration,
    };
    let log = run_closed_loop(&traj, source, estimator, cfg, ArmState::default())?;
    let prediction = Rmse::prediction(&log.rows).ok_or(Error::EmptyDataset)?;
    let tracking = Rmse::tracking(&log.rows).ok_or(Error::EmptyDataset)?;
    Ok(SineReport {
        log,
        prediction,
        tracking,
    })
}

/// One pass of the scripted step and ramp trajectory, as knots starting at 0.
pub fn steps_ramps_knots() -> Vec<(f64, Orientation)> {
    let o = Orientation::new;
    let mut knots = vec![(0.0, o(0.0, 0.0))];
    let mut t = 0.0;
    // jump to `p` and hold it for `d` seconds
    let mut hold = |knots: &mut Vec<_>, p: Orientation, d: f64| {
        knots.push((t, p));
        t += d;
        knots.push((t, p));
    };
    hold(&mut knots, o(0.0, 0.0), 2.0);
    for p in [
        o(15.0, 0.0),
        o(-15.0, 0.0),
        o(0.0, 15.0),
        o(0.0, -15.0),
        o(20.0, 20.0),
        o(-20.0, -20.0),
        o(0.0, 0.0),
    ] {
        hold(&mut knots, p, 5.0);
    }
    // ramps: each knot is reached linearly from the previous one
    for (dt, p) in [
        (4.0, o(25.0, 0.0)),
        (8.0, o(-25.0, 0.0)),
        (4.0, o(0.0, 0.0)),
        (4.0, o(0.0, 25.0)),
        (8.0, o(0.0, -25.0)),
        (4.0, o(0.0, 0.0)),
        (2.0, o(0.0, 0.0)),
    ] {
        t += dt;
        knots.push((t, p));
    }
    knots
}

/// Duration of one pass of [`steps_ramps_knots`].
pub fn steps_ramps_period() -> f64 {
    steps_ramps_knots().last().map_or(0.0, |k| k.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepsRampsReport {
    pub log: RunLog,
    /// Prediction RMSE of each repetition.
    pub repetitions: [Rmse; 2],
    /// RMS difference between the two repetitions' predictions, both axes
    /// pooled, degrees.
    pub repetition_deviation: f64,
    pub tracking: Rmse,
}

/// Executes the scripted trajectory twice back to back.
pub fn run_steps_ramps(
    source: FeedbackSource,
    estimator: Option<&mut dyn AngleEstimator>,
    cfg: &SimConfig,
) -> Result<StepsRampsReport> {
    let one = steps_ramps_knots();
    let period = steps_ramps_period();
    let mut knots = one.clone();
    knots.extend(one.iter().map(|&(t, p)| (t + period, p)));
    let traj = Trajectory::Piecewise {
        knots,
        end: 2.0 * period,
    };
    let log = run_closed_loop(&traj, source, estimator, cfg, ArmState::default())?;
    let half = log.rows.partition_point(|r| r.time < period - 1e-9);
    let (first, second) = log.rows.split_at(half);
    let rep = |rows: &[LogRow]| Rmse::prediction(rows).ok_or(Error::EmptyDataset);
    let repetitions = [rep(first)?, rep(second)?];
    let n = first.len().min(second.len());
    let dev_sq: f64 = first[..n]
        .iter()
        .zip(&second[..n])
        .map(|(a, b)| (a.alpha_pred - b.alpha_pred).powi(2) + (a.beta_pred - b.beta_pred).powi(2))
        .sum();
    let repetition_deviation = (dev_sq / (2.0 * n.max(1) as f64)).sqrt();
    let tracking = Rmse::tracking(&log.rows).ok_or(Error::EmptyDataset)?;
    Ok(StepsRampsReport {
        log,
        repetitions,
        repetition_deviation,
        tracking,
    })
}

/// Offline accuracy of a model on a labelled set.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub rmse: Rmse,
    /// Lower edge of the first histogram bin, degrees.
    pub hist_min: f64,
    pub hist_bin: f64,
    /// Residual counts, both axes pooled; values outside the range are
    /// counted in the first/last bin.
    pub histogram: Vec<usize>,
}

pub fn evaluate(net: &Network, set: &dyn TrainingSet) -> Result<Evaluation> {
    if set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let preds = predict_all(net, set);
    let rmse = Rmse::from_pairs(preds.iter().enumerate().map(|(i, p)| (*p, set.target(i))))
        .expect("non-empty");
    let (hist_min, hist_bin, bins) = (-5.0, 0.5, 20usize);
    let mut histogram = vec![0usize; bins];
    for (i, p) in preds.iter().enumerate() {
        let t = set.target(i);
        for r in [p[0] - t[0], p[1] - t[1]] {
            let b = ((r - hist_min) / hist_bin).floor().clamp(0.0, (bins - 1) as f64) as usize;
            histogram[b] += 1;
        }
    }
    Ok(Evaluation {
        rmse,
        hist_min,
        hist_bin,
        histogram,
    })
}

/// Regular `rows x cols` grid over [-limit, limit]² in serpentine order
/// (alpha major, beta direction reversing on odd rows).
///
/// With `offset` the points sit at cell centres instead of cell edges, which
/// interleaves them with the plain grid.
pub fn serpentine_grid(rows: usize, cols: usize, limit: f64, offset: bool) -> Vec<Orientation> {
    let axis = |n: usize| -> Vec<f64> {
        if offset {
            let h = 2.0 * limit / n as f64;
            (0..n).map(|i| -limit + h * (i as f64 + 0.5)).collect()
        } else if n == 1 {
            vec![0.0]
        } else {
            (0..n)
                .map(|i| -limit + 2.0 * limit * i as f64 / (n - 1) as f64)
                .collect()
        }
    };
    let (a, b) = (axis(rows), axis(cols));
    let mut out = Vec::with_capacity(rows * cols);
    for (i, &alpha) in a.iter().enumerate() {
        let cols_iter: Box<dyn Iterator<Item = &f64>> = if i % 2 == 0 {
            Box::new(b.iter())
        } else {
            Box::new(b.iter().rev())
        };
        for &beta in cols_iter {
            out.push(Orientation::new(alpha, beta));
        }
    }
    out
}

/// Data collection protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectionPlan {
    pub rows: usize,
    pub cols: usize,
    pub dwell: f64,
    pub rate_hz: u32,
    pub offset: bool,
    pub seed: u64,
}

impl CollectionPlan {
    pub fn setpoints(&self) -> Vec<Orientation> {
        serpentine_grid(self.rows, self.cols, 30.0, self.offset)
    }

    pub fn sample_count(&self) -> usize {
        self.rows * self.cols * (self.dwell * f64::from(self.rate_hz)).round() as usize
    }

    pub fn duration(&self) -> f64 {
        (self.rows * self.cols) as f64 * self.dwell
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::Config("grid must have at least one row and column".into()));
        }
        if !(self.dwell > 0.0) || self.rate_hz == 0 {
            return Err(Error::Config("dwell and rate must be positive".into()));
        }
        Ok(())
    }
}

/// Simulated states sampled at the plan's recording rate.
pub fn collect_states(plan: &CollectionPlan, cfg: &SimConfig) -> Result<Vec<(f64, ArmState)>> {
    plan.validate()?;
    let mut sim = cfg.clone();
    sim.rates.log_hz = plan.rate_hz;
    let traj = Trajectory::steps(&plan.setpoints(), plan.dwell);
    let log = run_closed_loop(&traj, FeedbackSource::GroundTruth, None, &sim, ArmState::default())?;
    Ok(log.rows.iter().map(|r| r.time).zip(log.states).collect())
}

/// Renders the frames of one recorded state.
pub fn render_sample(state: &ArmState, t: f64, index: u64, seed: u64, cfg: &SimConfig) -> Result<Sample> {
    let noise = cfg.noise.with_seed(mix_seed(seed, index));
    let frames = render_all(state, &cfg.plant, &cfg.cameras, &noise)?;
    Ok(Sample {
        pixels: frames.data.iter().map(|&v| quantize_pixel(v)).collect(),
        label: [state.alpha as f32, state.beta as f32],
        t,
    })
}

/// Runs a collection session and streams it to a dataset file. Returns the
/// number of samples written.
pub fn record(path: impl AsRef<std::path::Path>, plan: &CollectionPlan, cfg: &SimConfig) -> Result<usize> {
    let states = collect_states(plan, cfg)?;
    let metadata = serde_json::to_string(plan).expect("plan serializes");
    let header = DatasetHeader::new(states.len() as u64, plan.seed, metadata);
    let mut writer = DatasetWriter::create(path, &header)?;
    const BLOCK: usize = 64;
    for (b, block) in states.chunks(BLOCK).enumerate() {
        let base = b * BLOCK;
        let rendered = par::map_range(block.len(), |i| {
            let (t, s) = &block[i];
            render_sample(s, *t, (base + i) as u64, plan.seed, cfg)
        });
        for sample in rendered {
            writer.write_sample(&sample?)?;
        }
    }
    writer.finish()?;
    Ok(states.len())
}
