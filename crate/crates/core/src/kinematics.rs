//! Mapping between the tip position of the movable link and its two extrinsic
//! Euler angles.
//!
//! Angles cross module boundaries in degrees; trigonometry runs in radians.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Slack allowed on an arcsin argument before it is treated as out of reach.
pub const ASIN_TOLERANCE: f64 = 1e-9;

/// Below this |cos(alpha)| the beta extraction is undefined.
pub const COS_EPSILON: f64 = 1e-9;

/// Pivot position and link radius, determined by calibration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub x0: f64,
    pub y0: f64,
    pub z0: f64,
    /// Link radius in metres.
    pub radius: f64,
}

impl Default for Calibration {
    fn default() -> Self {
        Self {
            x0: 0.0,
            y0: 0.0,
            z0: 0.0,
            radius: 0.25,
        }
    }
}

impl Calibration {
    pub fn new(x0: f64, y0: f64, z0: f64, radius: f64) -> Result<Self> {
        let calib = Self { x0, y0, z0, radius };
        calib.validate()?;
        Ok(calib)
    }

    pub fn validate(&self) -> Result<()> {
        if ![self.x0, self.y0, self.z0, self.radius]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::Config("calibration values must be finite".into()));
        }
        if self.radius <= 0.0 {
            return Err(Error::Config(format!(
                "link radius must be positive, got {}",
                self.radius
            )));
        }
        Ok(())
    }
}

/// Orientation of the movable link: rotation about the inertial x axis
/// (`alpha`) followed by rotation about the inertial y axis (`beta`), degrees.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Orientation {
    pub alpha: f64,
    pub beta: f64,
}

impl Orientation {
    pub const fn new(alpha: f64, beta: f64) -> Self {
        Self { alpha, beta }
    }

    pub fn is_valid(&self) -> bool {
        self.alpha.is_finite()
            && self.beta.is_finite()
            && self.alpha.abs() <= 90.0
            && self.beta.abs() <= 90.0
    }
}

/// Tip position of the movable link in metres.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TipPosition {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

pub fn deg_to_rad(deg: f64) -> f64 {
    deg * (std::f64::consts::PI / 180.0)
}

pub fn rad_to_deg(rad: f64) -> f64 {
    rad * (180.0 / std::f64::consts::PI)
}

fn checked_asin(arg: f64, what: &str) -> Result<f64> {
    if !arg.is_finite() || arg.abs() > 1.0 + ASIN_TOLERANCE {
        return Err(Error::Domain(format!(
            "{what}: arcsin argument {arg} outside [-1, 1]; tip is outside the reachable sphere"
        )));
    }
    Ok(arg.clamp(-1.0, 1.0).asin())
}

/// Recovers the orientation from a measured tip position.
///
/// Only `x` and `y` are used; `z` is implied by the sphere constraint.
pub fn angles_from_tip(x: f64, y: f64, calib: &Calibration) -> Result<Orientation> {
    let alpha = checked_asin(-(y - calib.y0) / calib.radius, "alpha")?;
    let cos_alpha = alpha.cos();
    if cos_alpha.abs() < COS_EPSILON {
        return Err(Error::Degenerate(format!(
            "cos(alpha) = {cos_alpha:e}; beta is undefined at alpha = +-90 deg"
        )));
    }
    let beta = checked_asin((x - calib.x0) / (calib.radius * cos_alpha), "beta")?;
    Ok(Orientation {
        alpha: rad_to_deg(alpha),
        beta: rad_to_deg(beta),
    })
}

/// Tip position for a given orientation. Rejects |alpha| or |beta| >= 90 deg.
pub fn tip_from_angles(o: Orientation, calib: &Calibration) -> Result<TipPosition> {
    if !(o.alpha.abs() < 90.0 && o.beta.abs() < 90.0) {
        return Err(Error::Domain(format!(
            "orientation ({}, {}) outside the open interval (-90, 90) deg",
            o.alpha, o.beta
        )));
    }
    let (sa, ca) = deg_to_rad(o.alpha).sin_cos();
    let (sb, cb) = deg_to_rad(o.beta).sin_cos();
    Ok(TipPosition {
        x: calib.x0 + calib.radius * ca * sb,
        y: calib.y0 - calib.radius * sa,
        z: calib.z0 + calib.radius * ca * cb,
    })
}
