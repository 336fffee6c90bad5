//! Fixed-step simulator of the arm.
//!
//! Three first-order pressure states feed a decoupled second-order model of the
//! two joint angles. Torque is produced by the pressure imbalance between the
//! actuators and the joint stiffens with the total overpressure. The simulated
//! state is the ground truth used for labels and for evaluation.

use serde::{Deserialize, Serialize};

use crate::kinematics::{deg_to_rad, Orientation};
use crate::{Error, Result};

/// Atmospheric (minimum) absolute pressure, bar.
pub const P_ATM: f64 = 1.0;
/// Maximum absolute actuator pressure, bar.
pub const P_MAX: f64 = 1.5;
/// Actuator azimuths for A, B, C in degrees; A lies on the inertial x axis.
pub const AZIMUTHS_DEG: [f64; 3] = [0.0, 120.0, 240.0];

const SQRT3_2: f64 = 0.866_025_403_784_438_6;

/// Pressure-to-torque map. Rows are (alpha, beta), columns are (A, B, C).
pub const TORQUE_MAP: [[f64; 3]; 2] = [[0.0, SQRT3_2, -SQRT3_2], [-1.0, 0.5, 0.5]];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmState {
    /// Degrees.
    pub alpha: f64,
    pub beta: f64,
    /// Degrees per second.
    pub alpha_dot: f64,
    pub beta_dot: f64,
    /// Absolute pressures of actuators A, B, C in bar.
    pub pressures: [f64; 3],
}

impl Default for ArmState {
    fn default() -> Self {
        Self {
            alpha: 0.0,
            beta: 0.0,
            alpha_dot: 0.0,
            beta_dot: 0.0,
            pressures: [P_ATM; 3],
        }
    }
}

impl ArmState {
    pub fn orientation(&self) -> Orientation {
        Orientation::new(self.alpha, self.beta)
    }

    pub fn at(orientation: Orientation, pressures: [f64; 3]) -> Self {
        Self {
            alpha: orientation.alpha,
            beta: orientation.beta,
            pressures,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantParams {
    /// Pressure time constant, s.
    pub tau_p: f64,
    /// Steady-state overpressure per unit valve command, bar.
    pub k_v: f64,
    /// Normalized rotational inertia.
    pub inertia: f64,
    pub damping: f64,
    /// Torque per bar of pressure imbalance.
    pub k_t: f64,
    /// Passive joint stiffness at atmospheric pressure.
    pub k_0: f64,
    /// Additional stiffness per bar of total overpressure.
    pub k_s: f64,
    /// Physics step, s.
    pub dt: f64,
    /// Elongation model: rest elongation, pressure gain (1/bar), angle gain and
    /// lateral deformation gain.
    pub e0: f64,
    pub c_p: f64,
    pub c_a: f64,
    pub c_l: f64,
}

impl Default for PlantParams {
    fn default() -> Self {
        Self {
            tau_p: 0.05,
            k_v: 0.5,
            inertia: 0.02,
            damping: 1.0,
            k_t: 1000.0,
            k_0: 6.0,
            k_s: 4.0,
            dt: 1e-3,
            e0: 0.3,
            c_p: 1.0,
            c_a: 0.4,
            c_l: 0.3,
        }
    }
}

impl PlantParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("tau_p", self.tau_p),
            ("k_v", self.k_v),
            ("inertia", self.inertia),
            ("damping", self.damping),
            ("k_t", self.k_t),
            ("k_s", self.k_s),
            ("dt", self.dt),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("plant.{name} must be > 0, got {v}")));
            }
        }
        for (name, v) in [
            ("k_0", self.k_0),
            ("e0", self.e0),
            ("c_p", self.c_p),
            ("c_a", self.c_a),
            ("c_l", self.c_l),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("plant.{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Joint stiffness for the given pressures.
    pub fn stiffness(&self, pressures: &[f64; 3]) -> f64 {
        let over: f64 = pressures.iter().sum::<f64>() - 3.0 * P_ATM;
        self.k_0 + self.k_s * over
    }
}

fn check_dt(params: &PlantParams, dt: f64) {
    debug_assert!(
        (dt - params.dt).abs() <= 1e-12 * params.dt,
        "plant stepped with dt = {dt}, configured {}",
        params.dt
    );
}

/// Advances the three pressure states by one explicit Euler step.
///
/// Valve commands are clamped to [-1, 1] and pressures to [P_ATM, P_MAX].
pub fn pressure_step(state: &ArmState, valve: [f64; 3], params: &PlantParams, dt: f64) -> ArmState {
    check_dt(params, dt);
    let mut next = *state;
    for (p, u) in next.pressures.iter_mut().zip(valve) {
        let u = u.clamp(-1.0, 1.0);
        let rate = (params.k_v * u - (*p - P_ATM)) / params.tau_p;
        *p = (*p + dt * rate).clamp(P_ATM, P_MAX);
    }
    next
}

/// Net torques (alpha, beta) produced by the actuator pressures.
pub fn torque_from_pressures(pressures: &[f64; 3], params: &PlantParams) -> (f64, f64) {
    let row = |r: &[f64; 3]| r[0] * pressures[0] + r[1] * pressures[1] + r[2] * pressures[2];
    (
        params.k_t * row(&TORQUE_MAP[0]),
        params.k_t * row(&TORQUE_MAP[1]),
    )
}

/// Advances the orientation by one semi-implicit Euler step.
pub fn dynamics_step(state: &ArmState, params: &PlantParams, dt: f64) -> ArmState {
    check_dt(params, dt);
    let (tau_a, tau_b) = torque_from_pressures(&state.pressures, params);
    let k = params.stiffness(&state.pressures);
    let axis = |theta: f64, rate: f64, tau: f64| {
        let acc = (tau - k * theta - params.damping * rate) / params.inertia;
        let rate = rate + dt * acc;
        (theta + dt * rate, rate)
    };
    let (alpha, alpha_dot) = axis(state.alpha, state.alpha_dot, tau_a);
    let (beta, beta_dot) = axis(state.beta, state.beta_dot, tau_b);
    ArmState {
        alpha,
        beta,
        alpha_dot,
        beta_dot,
        pressures: state.pressures,
    }
}

/// One full physics tick: pressures first, then the joint.
pub fn step(state: &ArmState, valve: [f64; 3], params: &PlantParams) -> ArmState {
    let s = pressure_step(state, valve, params, params.dt);
    dynamics_step(&s, params, params.dt)
}

/// Elongation and lateral deformation of one actuator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Deformation {
    /// Axial expansion in [0, 1].
    pub elongation: f64,
    pub lateral: f64,
}

/// Per-actuator appearance drivers for the internal cameras, order A, B, C.
pub fn actuator_elongation(state: &ArmState, params: &PlantParams) -> [Deformation; 3] {
    let alpha_n = state.alpha / 30.0;
    let beta_n = state.beta / 30.0;
    let mut out = [Deformation {
        elongation: 0.0,
        lateral: 0.0,
    }; 3];
    for (i, d) in out.iter_mut().enumerate() {
        let (s, c) = deg_to_rad(AZIMUTHS_DEG[i]).sin_cos();
        let tilt = s * alpha_n - c * beta_n;
        let e = params.e0 + params.c_p * (state.pressures[i] - P_ATM) + params.c_a * tilt;
        d.elongation = e.clamp(0.0, 1.0);
        d.lateral = params.c_l * (c * alpha_n + s * beta_n);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> PlantParams {
        PlantParams::default()
    }

    #[test]
    fn zero_command_at_atmosphere_is_equilibrium() {
        let p = params();
        let mut s = ArmState::default();
        for _ in 0..1000 {
            s = pressure_step(&s, [0.0; 3], &p, p.dt);
        }
        assert_eq!(s.pressures, [P_ATM; 3]);
    }

    #[test]
    fn first_order_step_response() {
        let p = params();
        let u = 0.1 / p.k_v;
        let mut s = ArmState::default();
        let steps = (5.0 * p.tau_p / p.dt).round() as usize;
        for _ in 0..steps {
            s = pressure_step(&s, [u; 3], &p, p.dt);
        }
        // closed form: 0.1 * (1 - exp(-5)) = 0.09933; the Euler discretization
        // lands within the same 1% band
        for &pr in &s.pressures {
            let over = pr - P_ATM;
            assert!((over - 0.1).abs() / 0.1 < 0.01, "overpressure {over}");
        }
    }

    #[test]
    fn full_command_saturates() {
        let p = params();
        let mut s = ArmState::default();
        for _ in 0..2000 {
            s = pressure_step(&s, [1.0, 5.0, -3.0], &p, p.dt);
        }
        assert!((s.pressures[0] - P_MAX).abs() < 1e-9);
        assert!((s.pressures[1] - P_MAX).abs() < 1e-9);
        assert_eq!(s.pressures[2], P_ATM);
        assert!(s.pressures.iter().all(|&p| (P_ATM..=P_MAX).contains(&p)));
    }

    #[test]
    fn equal_pressures_no_torque() {
        let p = params();
        for level in [1.0, 1.02, 1.3, 1.5] {
            let (a, b) = torque_from_pressures(&[level; 3], &p);
            assert!(a.abs() < 1e-12 && b.abs() < 1e-12);
        }
    }

    #[test]
    fn rest_state_unchanged() {
        let p = params();
        let s = ArmState::at(Orientation::default(), [1.1; 3]);
        assert_eq!(dynamics_step(&s, &p, p.dt), s);
    }

    #[test]
    fn static_balance() {
        let p = params();
        // B above C produces a pure alpha torque
        let pressures = [1.1, 1.2, 1.0];
        let (tau_a, tau_b) = torque_from_pressures(&pressures, &p);
        let k = p.k_0 + p.k_s * (3.3 - 3.0);
        let mut s = ArmState::at(Orientation::default(), pressures);
        for _ in 0..20_000 {
            s = dynamics_step(&s, &p, p.dt);
        }
        assert!((s.alpha - tau_a / k).abs() < 1e-9, "{} vs {}", s.alpha, tau_a / k);
        assert!((s.beta - tau_b / k).abs() < 1e-9);
    }

    #[test]
    fn damped_energy_decays_monotonically() {
        let p = params();
        let pressures = [1.2; 3];
        let k = p.stiffness(&pressures);
        let mut s = ArmState::at(Orientation::new(20.0, -10.0), pressures);
        s.alpha_dot = 50.0;
        let energy = |s: &ArmState| {
            0.5 * p.inertia * (s.alpha_dot.powi(2) + s.beta_dot.powi(2))
                + 0.5 * k * (s.alpha.powi(2) + s.beta.powi(2))
        };
        let mut prev = energy(&s);
        for _ in 0..10_000 {
            s = dynamics_step(&s, &p, p.dt);
            let e = energy(&s);
            assert!(e <= prev, "energy rose from {prev} to {e}");
            prev = e;
        }
    }

    #[test]
    fn returns_upright_without_commands() {
        let p = params();
        let mut s = ArmState::at(Orientation::new(25.0, -25.0), [P_ATM; 3]);
        for _ in 0..10_000 {
            s = step(&s, [0.0; 3], &p);
        }
        assert!(s.alpha.abs() < 0.1 && s.beta.abs() < 0.1, "{s:?}");
    }

    #[test]
    fn elongation_symmetry_upright() {
        let p = params();
        let d = actuator_elongation(&ArmState::at(Orientation::default(), [1.02; 3]), &p);
        assert_eq!(d[0].elongation, d[1].elongation);
        assert_eq!(d[1].elongation, d[2].elongation);
    }

    #[test]
    fn elongation_under_alpha_tilt() {
        let p = params();
        let d = actuator_elongation(&ArmState::at(Orientation::new(15.0, 0.0), [1.0; 3]), &p);
        let shift = 0.5 * 0.866_025_403_784_438_6 * p.c_a;
        assert!((d[0].elongation - p.e0).abs() < 1e-12);
        assert!((d[1].elongation - (p.e0 + shift)).abs() < 1e-12);
        assert!((d[2].elongation - (p.e0 - shift)).abs() < 1e-12);
        // at full tilt C clips at zero, ordering still holds
        let d = actuator_elongation(&ArmState::at(Orientation::new(30.0, 0.0), [1.0; 3]), &p);
        assert!(d[1].elongation > d[0].elongation && d[0].elongation > d[2].elongation);
    }

    #[test]
    fn angle_terms_are_odd() {
        let p = params();
        let a = actuator_elongation(&ArmState::at(Orientation::new(12.0, -7.0), [1.0; 3]), &p);
        let b = actuator_elongation(&ArmState::at(Orientation::new(-12.0, 7.0), [1.0; 3]), &p);
        for i in 0..3 {
            assert!(((a[i].elongation - p.e0) + (b[i].elongation - p.e0)).abs() < 1e-12);
            assert!((a[i].lateral + b[i].lateral).abs() < 1e-12);
        }
    }

    #[test]
    fn bounded_under_random_commands() {
        use rand::{Rng, SeedableRng};
        let p = params();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut s = ArmState::default();
        let mut peak: f64 = 0.0;
        for _ in 0..100_000 {
            let u = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            for _ in 0..20 {
                s = step(&s, u, &p);
                assert!(s.pressures.iter().all(|&x| (P_ATM..=P_MAX).contains(&x)));
            }
            peak = peak.max(s.alpha.abs()).max(s.beta.abs());
        }
        assert!(peak < 60.0, "peak angle {peak}");
    }
}
