//! Run configuration: a flat `key = value` file with `#` comments.
//!
//! ```text
//! seed = 7
//! plant.k_t = 250
//! camera.eta = 0.08        # all three cameras
//! camera_b.led_intensity = 0.25
//! collect.rows = 14
//! ```
//!
//! Unknown keys are errors. `SOFTARM_SEED` and `SOFTARM_OUT_DIR` override
//! `seed` and `out_dir` after the file is read.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::camera::{mix_seed, CameraConfig, NoiseConfig};
use crate::control::Gains;
use crate::net::TrainConfig;
use crate::pipeline::{CollectionPlan, RateConfig, SimConfig};
use crate::plant::PlantParams;
use crate::{Error, Result};

pub const ENV_SEED: &str = "SOFTARM_SEED";
pub const ENV_OUT_DIR: &str = "SOFTARM_OUT_DIR";

#[derive(Debug, Clone, PartialEq)]
pub struct SineSettings {
    pub amplitude: f64,
    pub period: f64,
    pub duration: f64,
}

impl Default for SineSettings {
    fn default() -> Self {
        Self {
            amplitude: 20.0,
            period: 10.0,
            duration: 60.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Master seed; every stream without an explicit seed derives from it.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub plant: PlantParams,
    pub gains: Gains,
    pub rates: RateConfig,
    pub cameras: [CameraConfig; 3],
    pub noise: NoiseConfig,
    pub collect: CollectionPlan,
    pub validation: CollectionPlan,
    pub train: TrainConfig,
    pub train_fraction: f64,
    pub sine: SineSettings,
    collect_seed: Option<u64>,
    validation_seed: Option<u64>,
    init_seed: Option<u64>,
    shuffle_seed: Option<u64>,
    noise_seed: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            plant: PlantParams::default(),
            gains: Gains::default(),
            rates: RateConfig::default(),
            cameras: [CameraConfig::default(); 3],
            noise: NoiseConfig::default(),
            collect: CollectionPlan {
                rows: 7,
                cols: 7,
                dwell: 4.0,
                rate_hz: 10,
                offset: false,
                seed: 0,
            },
            validation: CollectionPlan {
                rows: 7,
                cols: 7,
                dwell: 4.0,
                rate_hz: 10,
                offset: true,
                seed: 0,
            },
            train: TrainConfig::default(),
            train_fraction: 0.8,
            sine: SineSettings::default(),
            collect_seed: None,
            validation_seed: None,
            init_seed: None,
            shuffle_seed: None,
            noise_seed: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value for {key}: {value:?}")))
}

fn set_camera(cam: &mut CameraConfig, field: &str, key: &str, value: &str) -> Result<()> {
    let slot = match field {
        "eta" => &mut cam.eta,
        "rho_deg" => &mut cam.rho_deg,
        "dot_diameter" => &mut cam.dot_diameter,
        "led_intensity" => &mut cam.led_intensity,
        "ring_base" => &mut cam.ring_base,
        "ring_spread" => &mut cam.ring_spread,
        "ring_cutoff" => &mut cam.ring_cutoff,
        "ring_width" => &mut cam.ring_width,
        "lateral_gain" => &mut cam.lateral_gain,
        "n_rings" => {
            cam.n_rings = parse(key, value)?;
            return Ok(());
        }
        _ => return Err(Error::Config(format!("unknown key {key:?}"))),
    };
    *slot = parse(key, value)?;
    Ok(())
}

fn set_plan(plan: &mut CollectionPlan, field: &str, key: &str, value: &str) -> Result<bool> {
    match field {
        "rows" => plan.rows = parse(key, value)?,
        "cols" => plan.cols = parse(key, value)?,
        "dwell" => plan.dwell = parse(key, value)?,
        "rate_hz" => plan.rate_hz = parse(key, value)?,
        "offset" => plan.offset = parse(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

impl RunConfig {
    /// Reads a file and applies environment overrides.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse_str(&text)?;
        cfg.apply_env()?;
        Ok(cfg)
    }

    /// Parses configuration text without consulting the environment.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| match e {
                    Error::Config(m) => Error::Config(format!("line {}: {m}", n + 1)),
                    other => other,
                })?;
        }
        cfg.finalize()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(ENV_SEED) {
            self.seed = parse(ENV_SEED, v.trim())?;
        }
        if let Ok(v) = std::env::var(ENV_OUT_DIR) {
            self.out_dir = PathBuf::from(v);
        }
        self.finalize()
    }

    /// Sets one key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (section, field) = key.split_once('.').unwrap_or(("", key));
        let unknown = || Error::Config(format!("unknown key {key:?}"));
        match section {
            "" => match field {
                "seed" => self.seed = parse(key, value)?,
                "out_dir" => self.out_dir = PathBuf::from(value),
                _ => return Err(unknown()),
            },
            "plant" => {
                let p = &mut self.plant;
                let slot = match field {
                    "tau_p" => &mut p.tau_p,
                    "k_v" => &mut p.k_v,
                    "inertia" => &mut p.inertia,
                    "damping" => &mut p.damping,
                    "k_t" => &mut p.k_t,
                    "k_0" => &mut p.k_0,
                    "k_s" => &mut p.k_s,
                    "dt" => &mut p.dt,
                    "e0" => &mut p.e0,
                    "c_p" => &mut p.c_p,
                    "c_a" => &mut p.c_a,
                    "c_l" => &mut p.c_l,
                    _ => return Err(unknown()),
                };
                *slot = parse(key, value)?;
            }
            "control" => {
                let g = &mut self.gains;
                let slot = match field {
                    "kp" => &mut g.kp,
                    "ki" => &mut g.ki,
                    "pressure_kp" => &mut g.pressure_kp,
                    "pressure_ki" => &mut g.pressure_ki,
                    "p_bar" => &mut g.p_bar,
                    "outer_integral_limit" => &mut g.outer_integral_limit,
                    "inner_integral_limit" => &mut g.inner_integral_limit,
                    _ => return Err(unknown()),
                };
                *slot = parse(key, value)?;
            }
            "rates" => {
                let r = &mut self.rates;
                let slot = match field {
                    "physics_hz" => &mut r.physics_hz,
                    "position_hz" => &mut r.position_hz,
                    "sensing_hz" => &mut r.sensing_hz,
                    "log_hz" => &mut r.log_hz,
                    _ => return Err(unknown()),
                };
                *slot = parse(key, value)?;
            }
            "camera" => {
                for cam in &mut self.cameras {
                    set_camera(cam, field, key, value)?;
                }
            }
            "camera_a" => set_camera(&mut self.cameras[0], field, key, value)?,
            "camera_b" => set_camera(&mut self.cameras[1], field, key, value)?,
            "camera_c" => set_camera(&mut self.cameras[2], field, key, value)?,
            "noise" => match field {
                "pixel_sigma" => self.noise.pixel_sigma = parse(key, value)?,
                "brightness_jitter" => self.noise.brightness_jitter = parse(key, value)?,
                "seed" => self.noise_seed = Some(parse(key, value)?),
                _ => return Err(unknown()),
            },
            "collect" => {
                if field == "seed" {
                    self.collect_seed = Some(parse(key, value)?);
                } else if !set_plan(&mut self.collect, field, key, value)? {
                    return Err(unknown());
                }
            }
            "validation" => {
                if field == "seed" {
                    self.validation_seed = Some(parse(key, value)?);
                } else if !set_plan(&mut self.validation, field, key, value)? {
                    return Err(unknown());
                }
            }
            "train" => match field {
                "epochs" => self.train.epochs = parse(key, value)?,
                "batch" => self.train.batch = parse(key, value)?,
                "lr" => self.train.optimizer.lr = parse(key, value)?,
                "weight_decay" => self.train.optimizer.weight_decay = parse(key, value)?,
                "fraction" => self.train_fraction = parse(key, value)?,
                "init_seed" => self.init_seed = Some(parse(key, value)?),
                "shuffle_seed" => self.shuffle_seed = Some(parse(key, value)?),
                _ => return Err(unknown()),
            },
            "sine" => match field {
                "amplitude" => self.sine.amplitude = parse(key, value)?,
                "period" => self.sine.period = parse(key, value)?,
                "duration" => self.sine.duration = parse(key, value)?,
                _ => return Err(unknown()),
            },
            _ => return Err(unknown()),
        }
        Ok(())
    }

    /// Resolves derived seeds and validates every section.
    pub fn finalize(&mut self) -> Result<()> {
        self.collect.seed = self.collect_seed.unwrap_or(mix_seed(self.seed, 1));
        self.validation.seed = self.validation_seed.unwrap_or(mix_seed(self.seed, 2));
        self.train.shuffle_seed = self.shuffle_seed.unwrap_or(mix_seed(self.seed, 4));
        self.noise.seed = self.noise_seed.unwrap_or(mix_seed(self.seed, 5));
        self.sim().validate()?;
        self.collect.validate()?;
        self.validation.validate()?;
        self.train.validate()?;
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "train.fraction must be in (0, 1], got {}",
                self.train_fraction
            )));
        }
        Ok(())
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed.unwrap_or(mix_seed(self.seed, 3))
    }

    pub fn sim(&self) -> SimConfig {
        SimConfig {
            plant: self.plant,
            gains: self.gains,
            rates: self.rates,
            cameras: self.cameras,
            noise: self.noise,
        }
    }
}
