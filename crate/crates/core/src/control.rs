//! Cascaded controller.
//!
//! An outer pair of decoupled PI loops turns angle errors into axis-space
//! efforts `(u_alpha, u_beta)`. These are rotated onto the actuator geometry
//! as pressure differences between neighbouring actuators, allocated to three
//! absolute pressure setpoints whose minimum is the lower pressure level, and
//! tracked by three inner pressure PI loops.

use serde::{Deserialize, Serialize};

use crate::kinematics::Orientation;
use crate::plant::{P_ATM, P_MAX};
use crate::{Error, Result};

const INV_SQRT3: f64 = 0.577_350_269_189_625_8;
const TWO_INV_SQRT3: f64 = 1.154_700_538_379_251_5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gains {
    /// Outer loop, bar/deg and bar/(deg s).
    pub kp: f64,
    pub ki: f64,
    /// Inner loop, command/bar and command/(bar s).
    pub pressure_kp: f64,
    pub pressure_ki: f64,
    /// Lower pressure level, bar.
    pub p_bar: f64,
    /// Bound on |ki * integral| of the outer loop, bar.
    pub outer_integral_limit: f64,
    /// Bound on |pressure_ki * integral| of the inner loops, valve command units.
    pub inner_integral_limit: f64,
}

impl Default for Gains {
    fn default() -> Self {
        Self {
            kp: 0.006,
            ki: 0.048,
            pressure_kp: 10.0,
            pressure_ki: 200.0,
            p_bar: 1.02,
            outer_integral_limit: P_MAX - P_ATM,
            inner_integral_limit: 1.0,
        }
    }
}

impl Gains {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("kp", self.kp),
            ("ki", self.ki),
            ("pressure_kp", self.pressure_kp),
            ("pressure_ki", self.pressure_ki),
            ("outer_integral_limit", self.outer_integral_limit),
            ("inner_integral_limit", self.inner_integral_limit),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("control.{name} must be >= 0, got {v}")));
            }
        }
        if !(self.p_bar.is_finite() && (P_ATM..=P_MAX).contains(&self.p_bar)) {
            return Err(Error::Config(format!(
                "control.p_bar must lie in [{P_ATM}, {P_MAX}] bar, got {}",
                self.p_bar
            )));
        }
        Ok(())
    }
}

/// Integrator states of the outer and inner loops.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ControllerState {
    /// Integrated angle error, deg s.
    pub outer: [f64; 2],
    /// Integrated pressure error, bar s.
    pub inner: [f64; 3],
}

fn clamp_integral(integral: f64, gain: f64, limit: f64) -> f64 {
    if gain > 0.0 {
        let bound = limit / gain;
        integral.clamp(-bound, bound)
    } else {
        integral
    }
}

/// Outer decoupled PI loops. Returns `(u_alpha, u_beta)` in bar.
pub fn position_pi(
    setpoint: Orientation,
    measured: Orientation,
    state: &mut ControllerState,
    gains: &Gains,
    dt: f64,
) -> (f64, f64) {
    debug_assert!(dt > 0.0);
    let errors = [setpoint.alpha - measured.alpha, setpoint.beta - measured.beta];
    let mut u = [0.0; 2];
    for (axis, e) in errors.into_iter().enumerate() {
        let integral = clamp_integral(
            state.outer[axis] + e * dt,
            gains.ki,
            gains.outer_integral_limit,
        );
        state.outer[axis] = integral;
        u[axis] = gains.kp * e + gains.ki * integral;
    }
    (u[0], u[1])
}

/// Rotates axis-space efforts onto the actuators: returns the setpoint
/// differences `(p_A - p_B, p_B - p_C)`.
pub fn align_to_actuators(u_alpha: f64, u_beta: f64) -> (f64, f64) {
    (-INV_SQRT3 * u_alpha - u_beta, TWO_INV_SQRT3 * u_alpha)
}

/// Allocates pressure differences to absolute setpoints with minimum `p_bar`.
///
/// `p_A - p_B == p_ab`, `p_B - p_C == p_bc` and `min == p_bar` hold exactly for
/// every input; see [`clamp_setpoints`] for the saturation step.
pub fn allocate(p_ab: f64, p_bc: f64, p_bar: f64) -> [f64; 3] {
    // every candidate is p_bar plus one of the partial sums 0, p_ab, p_ab + p_bc
    // taken relative to the actuator; the shared offset makes differences exact
    let a = p_bar + 0f64.max(p_ab).max(p_ab + p_bc);
    let b = p_bar + 0f64.max(p_bc).max(-p_ab);
    let c = p_bar + 0f64.max(-p_bc).max(-p_ab - p_bc);
    [a, b, c]
}

/// Brings allocated setpoints inside the physical range.
///
/// When the largest setpoint exceeds `P_MAX` all three move down together,
/// no further than `P_ATM` for the smallest; whatever cannot be absorbed that
/// way is clipped per actuator.
pub fn clamp_setpoints(setpoints: [f64; 3]) -> [f64; 3] {
    let max = setpoints.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = setpoints.iter().cloned().fold(f64::INFINITY, f64::min);
    let excess = max - P_MAX;
    let mut out = setpoints;
    if excess > 0.0 {
        let shift = excess.min((min - P_ATM).max(0.0));
        for p in out.iter_mut() {
            *p -= shift;
        }
    }
    out.map(|p| p.clamp(P_ATM, P_MAX))
}

/// Inner pressure PI loops. Returns valve commands in [-1, 1].
///
/// Integration is frozen on an actuator while its command is saturated in the
/// direction of the error.
pub fn pressure_pi(
    setpoints: [f64; 3],
    measured: [f64; 3],
    state: &mut ControllerState,
    gains: &Gains,
    dt: f64,
) -> [f64; 3] {
    debug_assert!(dt > 0.0);
    let mut out = [0.0; 3];
    for i in 0..3 {
        let e = setpoints[i] - measured[i];
        let candidate = clamp_integral(
            state.inner[i] + e * dt,
            gains.pressure_ki,
            gains.inner_integral_limit,
        );
        let raw = gains.pressure_kp * e + gains.pressure_ki * candidate;
        if raw.abs() > 1.0 && raw.signum() == e.signum() {
            let held = gains.pressure_kp * e + gains.pressure_ki * state.inner[i];
            out[i] = held.clamp(-1.0, 1.0);
        } else {
            state.inner[i] = candidate;
            out[i] = raw.clamp(-1.0, 1.0);
        }
    }
    out
}

/// Setpoints produced by one outer-loop evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OuterOutput {
    pub u_alpha: f64,
    pub u_beta: f64,
    pub pressure_setpoints: [f64; 3],
}

/// Outer PI, alignment, allocation and saturation in one call.
pub fn outer_loop(
    setpoint: Orientation,
    measured: Orientation,
    state: &mut ControllerState,
    gains: &Gains,
    dt: f64,
) -> OuterOutput {
    let (u_alpha, u_beta) = position_pi(setpoint, measured, state, gains, dt);
    let (p_ab, p_bc) = align_to_actuators(u_alpha, u_beta);
    OuterOutput {
        u_alpha,
        u_beta,
        pressure_setpoints: clamp_setpoints(allocate(p_ab, p_bc, gains.p_bar)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_error_zero_effort() {
        let mut st = ControllerState::default();
        let u = position_pi(
            Orientation::new(10.0, 5.0),
            Orientation::new(10.0, 5.0),
            &mut st,
            &Gains::default(),
            0.02,
        );
        assert_eq!(u, (0.0, 0.0));
    }

    #[test]
    fn proportional_only() {
        let gains = Gains {
            kp: 0.05,
            ki: 0.0,
            ..Gains::default()
        };
        let mut st = ControllerState::default();
        let (ua, ub) = position_pi(
            Orientation::new(2.0, 0.0),
            Orientation::default(),
            &mut st,
            &gains,
            0.02,
        );
        assert!((ua - 0.1).abs() < 1e-15);
        assert_eq!(ub, 0.0);
    }

    #[test]
    fn integral_accumulates_linearly() {
        let gains = Gains {
            kp: 0.0,
            ki: 0.05,
            ..Gains::default()
        };
        let mut st = ControllerState::default();
        let mut u = (0.0, 0.0);
        for _ in 0..50 {
            u = position_pi(
                Orientation::new(1.5, -1.0),
                Orientation::default(),
                &mut st,
                &gains,
                0.02,
            );
        }
        // K_I * e * T with T = 1 s
        assert!((u.0 - 0.05 * 1.5).abs() < 1e-12);
        assert!((u.1 + 0.05).abs() < 1e-12);
    }

    #[test]
    fn outer_integrator_is_clamped() {
        let gains = Gains::default();
        let mut st = ControllerState::default();
        for _ in 0..10_000 {
            position_pi(
                Orientation::new(30.0, 0.0),
                Orientation::default(),
                &mut st,
                &gains,
                0.02,
            );
        }
        assert!((gains.ki * st.outer[0] - gains.outer_integral_limit).abs() < 1e-12);
    }

    #[test]
    fn alignment_values() {
        assert_eq!(align_to_actuators(0.0, 0.0), (0.0, 0.0));
        let (ab, bc) = align_to_actuators(1.0, 0.0);
        assert!((ab + 1.0 / 3f64.sqrt()).abs() < 1e-15);
        assert!((bc - 2.0 / 3f64.sqrt()).abs() < 1e-15);
        assert!((ab + 0.57735).abs() < 1e-5 && (bc - 1.15470).abs() < 1e-5);
        assert_eq!(align_to_actuators(0.0, 1.0), (-1.0, 0.0));
    }

    #[test]
    fn rest_allocation() {
        assert_eq!(allocate(0.0, 0.0, 1.02), [1.02; 3]);
    }

    #[test]
    fn allocation_for_unit_alpha() {
        let (ab, bc) = align_to_actuators(1.0, 0.0);
        let p = allocate(ab, bc, 1.02);
        // A: max{0, ab, ab + bc} = ab + bc = 1/sqrt3; B: max{0, bc, -ab} = bc; C: 0
        assert!((p[0] - (1.02 + INV_SQRT3)).abs() < 1e-12);
        assert!((p[1] - (1.02 + TWO_INV_SQRT3)).abs() < 1e-12);
        assert_eq!(p[2], 1.02);
        assert!((p[0] - 1.597_35).abs() < 1e-5 && (p[1] - 2.174_70).abs() < 1e-5);
    }

    /// One case per strict ordering of the three setpoints.
    #[test]
    fn allocation_all_orderings() {
        let p_bar = 1.02;
        let cases = [
            // (p_ab, p_bc) chosen so that the named ordering results
            ((0.2, 0.1), [0, 1, 2]), // A > B > C
            ((0.3, -0.1), [0, 2, 1]), // A > C > B
            ((-0.1, 0.3), [1, 0, 2]), // B > A > C
            ((-0.3, 0.1), [1, 2, 0]), // B > C > A
            ((0.1, -0.3), [2, 0, 1]), // C > A > B
            ((-0.1, -0.2), [2, 1, 0]), // C > B > A
        ];
        for ((ab, bc), order) in cases {
            let p = allocate(ab, bc, p_bar);
            assert!(p[order[0]] > p[order[1]] && p[order[1]] > p[order[2]], "{ab} {bc} {p:?}");
            assert_eq!(p[order[2]], p_bar);
            assert!((p[0] - p[1] - ab).abs() < 1e-15);
            assert!((p[1] - p[2] - bc).abs() < 1e-15);
        }
    }

    #[test]
    fn clamp_shifts_before_clipping() {
        let p = clamp_setpoints([1.3, 1.6, 1.1]);
        assert!((p[0] - 1.2).abs() < 1e-12 && (p[1] - 1.5).abs() < 1e-12 && (p[2] - 1.0).abs() < 1e-12);
        // not enough headroom above P_ATM: shift what is possible, then clip
        let p = clamp_setpoints([1.02, 2.17, 1.6]);
        assert_eq!(p[0], 1.0);
        assert_eq!(p[1], 1.5);
        assert!((p[2] - 1.5).abs() < 1e-12);
        assert_eq!(clamp_setpoints([1.02; 3]), [1.02; 3]);
    }

    #[test]
    fn pressure_pi_basic() {
        let gains = Gains {
            pressure_kp: 5.0,
            pressure_ki: 0.0,
            ..Gains::default()
        };
        let mut st = ControllerState::default();
        assert_eq!(pressure_pi([1.0; 3], [1.0; 3], &mut st, &gains, 1e-3), [0.0; 3]);
        let u = pressure_pi([1.2, 1.0, 1.0], [1.1, 1.0, 1.0], &mut st, &gains, 1e-3);
        assert!((u[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn pressure_pi_saturation_freezes_integrator() {
        let gains = Gains::default();
        let mut st = ControllerState::default();
        for _ in 0..100 {
            let u = pressure_pi([1.5, 1.0, 1.0], [1.0, 1.0, 1.0], &mut st, &gains, 1e-3);
            assert_eq!(u[0], 1.0);
        }
        assert_eq!(st.inner[0], 0.0);
    }

    proptest! {
        #[test]
        fn alignment_is_linear(a in -5.0f64..5.0, b in -5.0f64..5.0, c in -5.0f64..5.0, d in -5.0f64..5.0, k in -3.0f64..3.0) {
            let (x1, y1) = align_to_actuators(a, b);
            let (x2, y2) = align_to_actuators(c, d);
            let (xs, ys) = align_to_actuators(a + c, b + d);
            prop_assert!((xs - x1 - x2).abs() < 1e-12 && (ys - y1 - y2).abs() < 1e-12);
            let (xk, yk) = align_to_actuators(k * a, k * b);
            prop_assert!((xk - k * x1).abs() < 1e-12 && (yk - k * y1).abs() < 1e-12);
        }

        #[test]
        fn allocation_preserves_differences(ab in -1.0f64..1.0, bc in -1.0f64..1.0, p_bar in 1.0f64..1.2) {
            let p = allocate(ab, bc, p_bar);
            let min = p[0].min(p[1]).min(p[2]);
            prop_assert_eq!(min, p_bar);
            prop_assert!((p[0] - p[1] - ab).abs() <= 4.0 * f64::EPSILON * 2.0);
            prop_assert!((p[1] - p[2] - bc).abs() <= 4.0 * f64::EPSILON * 2.0);
        }
    }
}
