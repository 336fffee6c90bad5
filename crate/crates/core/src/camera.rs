//! Procedural renderer for the three internal bellow cameras.
//!
//! Each camera looks down its bellow at the painted rings around the inner
//! opening. As the bellow elongates the rings appear smaller and the innermost
//! ones disappear behind the opening; lateral shear moves the pattern centre
//! along the camera offset axis. Frames are rendered at the native sensor
//! resolution and then reduced with bilinear interpolation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::plant::{actuator_elongation, ArmState, PlantParams};
use crate::{Error, Result};

pub const NATIVE_HEIGHT: usize = 480;
pub const NATIVE_WIDTH: usize = 640;
pub const FRAME_HEIGHT: usize = 120;
pub const FRAME_WIDTH: usize = 160;
pub const CHANNELS: usize = 3;
pub const FRAME_LEN: usize = FRAME_HEIGHT * FRAME_WIDTH;
pub const STACK_LEN: usize = CHANNELS * FRAME_LEN;

/// Brightness of unpainted fabric relative to the white pattern.
const FABRIC_ALBEDO: f64 = 0.15;
/// Illumination gain so that the nominal duty cycle lights the centre at ~0.9.
const LED_GAIN: f64 = 4.0;
const DOT_COUNT: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraConfig {
    /// Offset of the camera from the opening centre, fraction of image width.
    pub eta: f64,
    /// Camera tilt, degrees.
    pub rho_deg: f64,
    /// Number of painted rings between cushions.
    pub n_rings: usize,
    /// Pattern dot diameter at rest, native pixels.
    pub dot_diameter: f64,
    /// LED duty cycle in [0, 1].
    pub led_intensity: f64,
    /// Outermost ring radius at zero elongation, fraction of native height.
    pub ring_base: f64,
    /// How strongly elongation compresses the ring stack.
    pub ring_spread: f64,
    /// Rings with smaller apparent radius are hidden by the opening, fraction
    /// of native height.
    pub ring_cutoff: f64,
    /// Ring half width, native pixels.
    pub ring_width: f64,
    /// Pattern centre shift per unit lateral deformation, fraction of width.
    pub lateral_gain: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            eta: 0.08,
            rho_deg: 25.0,
            n_rings: 11,
            dot_diameter: 12.0,
            led_intensity: 0.22,
            ring_base: 0.42,
            ring_spread: 4.0,
            ring_cutoff: 0.12,
            ring_width: 3.0,
            lateral_gain: 1.0,
        }
    }
}

impl CameraConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.eta) {
            return Err(Error::Config(format!("camera.eta must be in [0, 0.5), got {}", self.eta)));
        }
        if !(0.0..=1.0).contains(&self.led_intensity) {
            return Err(Error::Config(format!(
                "camera.led_intensity must be in [0, 1], got {}",
                self.led_intensity
            )));
        }
        if self.n_rings < 1 {
            return Err(Error::Config("camera.n_rings must be >= 1".into()));
        }
        if !(self.rho_deg.is_finite() && self.rho_deg.abs() < 80.0) {
            return Err(Error::Config(format!("camera.rho_deg out of range: {}", self.rho_deg)));
        }
        for (name, v) in [
            ("dot_diameter", self.dot_diameter),
            ("ring_base", self.ring_base),
            ("ring_spread", self.ring_spread),
            ("ring_width", self.ring_width),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("camera.{name} must be > 0, got {v}")));
            }
        }
        for (name, v) in [("ring_cutoff", self.ring_cutoff), ("lateral_gain", self.lateral_gain)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("camera.{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }

    fn base_radius_px(&self) -> f64 {
        self.ring_base * NATIVE_HEIGHT as f64
    }

    fn cutoff_px(&self) -> f64 {
        self.ring_cutoff * NATIVE_HEIGHT as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Additive Gaussian pixel noise, intensity units in [0, 1].
    pub pixel_sigma: f64,
    /// Standard deviation of the per-frame multiplicative brightness factor.
    pub brightness_jitter: f64,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            pixel_sigma: 0.02,
            brightness_jitter: 0.05,
            seed: 0,
        }
    }
}

impl NoiseConfig {
    pub fn noise_free() -> Self {
        Self {
            pixel_sigma: 0.0,
            brightness_jitter: 0.0,
            seed: 0,
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.pixel_sigma >= 0.0 && self.brightness_jitter >= 0.0) {
            return Err(Error::Config("noise sigmas must be >= 0".into()));
        }
        Ok(())
    }
}

/// SplitMix64 finalizer, used to derive independent stream seeds.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Row-major single-channel image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }
}

/// One normalized 120x160 camera frame with values in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct CameraFrame {
    pub pixels: Vec<f32>,
}

/// Frames of cameras A, B, C stacked channel-major, 3x120x160.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameStack {
    pub data: Vec<f32>,
}

impl FrameStack {
    pub fn from_frames(frames: [CameraFrame; 3]) -> Self {
        let mut data = Vec::with_capacity(STACK_LEN);
        for f in &frames {
            data.extend_from_slice(&f.pixels);
        }
        Self { data }
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        &self.data[c * FRAME_LEN..(c + 1) * FRAME_LEN]
    }

    /// Squared L2 distance to another stack.
    pub fn distance_sq(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| {
                let d = f64::from(*a) - f64::from(*b);
                d * d
            })
            .sum()
    }
}

/// Apparent radii of all painted rings, outermost first, native pixels.
pub fn ring_radii(elongation: f64, cfg: &CameraConfig) -> Vec<f64> {
    let n = cfg.n_rings as f64;
    (1..=cfg.n_rings)
        .map(|k| cfg.base_radius_px() / (1.0 + cfg.ring_spread * elongation * k as f64 / n))
        .collect()
}

/// Number of rings not hidden by the opening.
pub fn visible_ring_count(elongation: f64, cfg: &CameraConfig) -> usize {
    let cutoff = cfg.cutoff_px();
    ring_radii(elongation, cfg)
        .into_iter()
        .filter(|&r| r >= cutoff)
        .count()
}

/// Pattern centre in native pixel coordinates `(x, y)`.
pub fn pattern_center(lateral: f64, cfg: &CameraConfig) -> (f64, f64) {
    (
        NATIVE_WIDTH as f64 * (0.5 + cfg.eta + cfg.lateral_gain * lateral),
        NATIVE_HEIGHT as f64 * 0.5,
    )
}

fn dot_ring(elongation: f64, cfg: &CameraConfig) -> (f64, f64) {
    let shrink = 1.0 / (1.0 + 0.5 * cfg.ring_spread * elongation);
    let radius = 0.5 * cfg.base_radius_px() * shrink;
    let dot_radius = 0.5 * cfg.dot_diameter * (0.5 + shrink);
    (radius, dot_radius)
}

fn ring_profile(distance: f64, half_width: f64) -> f64 {
    let t = distance / half_width;
    if t >= 1.0 {
        0.0
    } else {
        let s = 1.0 - t * t;
        s * s
    }
}

/// Noise-free intensity image in [0, 1] at native resolution.
fn render_native(elongation: f64, lateral: f64, cfg: &CameraConfig, gain: f64) -> Image {
    let (cx, cy) = pattern_center(lateral, cfg);
    let (sin_rho, cos_rho) = cfg.rho_deg.to_radians().sin_cos();
    let persp = 0.5 * sin_rho / NATIVE_HEIGHT as f64;
    let radii = ring_radii(elongation, cfg);
    let cutoff = cfg.cutoff_px();
    let base = cfg.base_radius_px();
    let n = cfg.n_rings as f64;
    let spread = cfg.ring_spread * elongation / n;
    let (dot_r, dot_size) = dot_ring(elongation, cfg);
    let dots: Vec<(f64, f64)> = (0..DOT_COUNT)
        .map(|j| {
            let a = std::f64::consts::TAU * j as f64 / DOT_COUNT as f64;
            (dot_r * a.cos(), dot_r * a.sin())
        })
        .collect();
    let img_cx = NATIVE_WIDTH as f64 * 0.5;
    let img_cy = NATIVE_HEIGHT as f64 * 0.5;
    let falloff_r2 = (0.6 * NATIVE_HEIGHT as f64).powi(2);
    let illum_gain = gain * cfg.led_intensity * LED_GAIN;

    let mut img = Image::filled(NATIVE_HEIGHT, NATIVE_WIDTH, 0.0);
    for y in 0..NATIVE_HEIGHT {
        let py = y as f64 + 0.5;
        let dy = py - cy;
        let scale = 1.0 + persp * dy;
        let v = dy / cos_rho * scale;
        let ly2 = (py - img_cy).powi(2);
        let row = &mut img.data[y * NATIVE_WIDTH..(y + 1) * NATIVE_WIDTH];
        for (x, out) in row.iter_mut().enumerate() {
            let px = x as f64 + 0.5;
            let u = (px - cx) * scale;
            let r = (u * u + v * v).sqrt();

            let mut albedo = FABRIC_ALBEDO;
            if r >= cutoff - cfg.ring_width {
                // nearest rings by inverting r_k = base / (1 + spread k)
                let ring = if spread > 1e-12 {
                    let k = ((base / r.max(1e-9) - 1.0) / spread).clamp(1.0, n);
                    let lo = k.floor() as usize;
                    let hi = k.ceil() as usize;
                    let mut best: f64 = 0.0;
                    for idx in [lo, hi] {
                        let rk = radii[idx - 1];
                        if rk >= cutoff {
                            best = best.max(ring_profile((r - rk).abs(), cfg.ring_width));
                        }
                    }
                    best
                } else {
                    ring_profile((r - radii[0]).abs(), cfg.ring_width)
                };
                albedo += (1.0 - FABRIC_ALBEDO) * ring;
            }
            if (r - dot_r).abs() < dot_size {
                for &(dx, dyy) in &dots {
                    let d2 = (u - dx).powi(2) + (v - dyy).powi(2);
                    if d2 < dot_size * dot_size {
                        albedo = 1.0;
                        break;
                    }
                }
            }
            let lr2 = (px - img_cx).powi(2) + ly2;
            let illum = illum_gain / (1.0 + lr2 / falloff_r2);
            *out = (albedo * illum).clamp(0.0, 1.0) as f32;
        }
    }
    img
}

/// Bilinear resampling with half-pixel centres.
pub fn resize_bilinear(src: &Image, out_height: usize, out_width: usize) -> Image {
    let sy = src.height as f64 / out_height as f64;
    let sx = src.width as f64 / out_width as f64;
    let taps = |o: usize, scale: f64, len: usize| {
        let c = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = c.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, (c - i0 as f64) as f32)
    };
    let cols: Vec<_> = (0..out_width).map(|x| taps(x, sx, src.width)).collect();
    let mut out = Image::filled(out_height, out_width, 0.0);
    for y in 0..out_height {
        let (y0, y1, fy) = taps(y, sy, src.height);
        for (x, &(x0, x1, fx)) in cols.iter().enumerate() {
            let top = src.get(y0, x0) * (1.0 - fx) + src.get(y0, x1) * fx;
            let bottom = src.get(y1, x0) * (1.0 - fx) + src.get(y1, x1) * fx;
            out.data[y * out_width + x] = top * (1.0 - fy) + bottom * fy;
        }
    }
    out
}

/// Reduces a native 480x640 image to 120x160.
pub fn downsample_bilinear(src: &Image) -> Result<Image> {
    if src.height != NATIVE_HEIGHT || src.width != NATIVE_WIDTH || src.data.len() != NATIVE_HEIGHT * NATIVE_WIDTH {
        return Err(Error::dimension(
            format!("{NATIVE_HEIGHT}x{NATIVE_WIDTH}"),
            format!("{}x{}", src.height, src.width),
        ));
    }
    Ok(resize_bilinear(src, FRAME_HEIGHT, FRAME_WIDTH))
}

/// Renders one camera frame for the given actuator deformation.
pub fn render(elongation: f64, lateral: f64, cfg: &CameraConfig, noise: &NoiseConfig) -> Result<CameraFrame> {
    cfg.validate()?;
    noise.validate()?;
    if !(0.0..=1.0).contains(&elongation) || !lateral.is_finite() {
        return Err(Error::Domain(format!(
            "elongation must be in [0, 1] and lateral finite, got ({elongation}, {lateral})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    let gain = if noise.brightness_jitter > 0.0 {
        let jitter = Normal::new(1.0, noise.brightness_jitter).expect("validated sigma");
        jitter.sample(&mut rng).max(0.0)
    } else {
        1.0
    };
    let native = render_native(elongation, lateral, cfg, gain);
    let small = downsample_bilinear(&native)?;
    let mut pixels = small.data;
    if noise.pixel_sigma > 0.0 {
        let n = Normal::new(0.0, noise.pixel_sigma).expect("validated sigma");
        for p in pixels.iter_mut() {
            *p += n.sample(&mut rng) as f32;
        }
    }
    for p in pixels.iter_mut() {
        *p = 2.0 * p.clamp(0.0, 1.0) - 1.0;
    }
    Ok(CameraFrame { pixels })
}

/// Renders cameras A, B, C for an arm state.
///
/// Each channel draws its noise from an independent stream derived from
/// `noise.seed`.
pub fn render_all(
    state: &ArmState,
    params: &PlantParams,
    cfgs: &[CameraConfig; 3],
    noise: &NoiseConfig,
) -> Result<FrameStack> {
    let deform = actuator_elongation(state, params);
    let mut frames = Vec::with_capacity(CHANNELS);
    for c in 0..CHANNELS {
        let ch_noise = noise.with_seed(mix_seed(noise.seed, c as u64));
        frames.push(render(deform[c].elongation, deform[c].lateral, &cfgs[c], &ch_noise)?);
    }
    let frames: [CameraFrame; 3] = frames.try_into().expect("three channels");
    Ok(FrameStack::from_frames(frames))
}
