//! Flat `key = value` run configuration with dotted section prefixes.
//!
//! ```text
//! seed = 7
//! schedule.steps = 50
//! guidance.omega0 = 5
//! toggles.fixed_alpha = 0.5
//! ```
//!
//! Blank lines and `#` comments are ignored; unknown keys are errors.

use std::path::{Path, PathBuf};

use crate::error::{KvLockError, Result};
use crate::guidance::{GuidanceConfig, Toggles};
use crate::hallucination::DetectorConfig;
use crate::io::read_file;
use crate::mask::Compression;
use crate::model::DitConfig;
use crate::synthetic::SceneSpec;
use crate::toy::ToyConfig;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Paths {
    pub video: Option<PathBuf>,
    pub mask: Option<PathBuf>,
    pub bank: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Prompts {
    pub source: Option<String>,
    pub target: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleConfig {
    pub train_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            train_steps: 1000,
            beta_min: 1e-4,
            beta_max: 0.02,
            steps: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationConfig {
    /// Noised scenes used to fit the readout.
    pub samples: usize,
    pub ridge: f64,
    /// Fraction of samples fitted with a source pass's KV locked in.
    pub locked: f64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            samples: 48,
            ridge: 1e-3,
            locked: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub prompts: Prompts,
    pub schedule: ScheduleConfig,
    pub model: DitConfig,
    pub compression: Compression,
    pub guidance: GuidanceConfig,
    pub detector: DetectorConfig,
    pub toggles: Toggles,
    pub scene: SceneSpec,
    pub calibration: CalibrationConfig,
    /// Scenes per ablation arm.
    pub ablate_scenes: usize,
    /// Arm names to run; empty means every arm.
    pub ablate_arms: Option<Vec<String>>,
    pub toy: ToyConfig,
    /// Training seeds of the toy experiment.
    pub toy_seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: Paths::default(),
            prompts: Prompts::default(),
            schedule: ScheduleConfig::default(),
            model: DitConfig::default(),
            compression: Compression::default(),
            guidance: GuidanceConfig::default(),
            detector: DetectorConfig::default(),
            toggles: Toggles::default(),
            scene: SceneSpec::default(),
            calibration: CalibrationConfig::default(),
            ablate_scenes: 5,
            ablate_arms: None,
            toy: ToyConfig::default(),
            toy_seeds: vec![1, 2, 3],
        }
    }
}

fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| KvLockError::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(KvLockError::Config(format!("invalid boolean {value:?} for {key}"))),
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let bytes = read_file(path, "config")?;
        let text = String::from_utf8(bytes)
            .map_err(|_| KvLockError::Config(format!("{} is not UTF-8", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                KvLockError::Config(format!("line {}: expected key = value", n + 1))
            })?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| KvLockError::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one setting. Used by the file parser and command-line overrides.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let path = || Some(PathBuf::from(value));
        match key {
            "seed" => self.seed = parse(key, value)?,
            "paths.video" => self.paths.video = path(),
            "paths.mask" => self.paths.mask = path(),
            "paths.bank" => self.paths.bank = path(),
            "paths.weights" => self.paths.weights = path(),
            "paths.out" => self.paths.out = path(),
            "prompt.source" => self.prompts.source = Some(value.to_string()),
            "prompt.target" => self.prompts.target = Some(value.to_string()),
            "schedule.train_steps" => self.schedule.train_steps = parse(key, value)?,
            "schedule.beta_min" => self.schedule.beta_min = parse(key, value)?,
            "schedule.beta_max" => self.schedule.beta_max = parse(key, value)?,
            "schedule.steps" => self.schedule.steps = parse(key, value)?,
            "model.channels" => self.model.channels = parse(key, value)?,
            "model.hidden" => self.model.hidden = parse(key, value)?,
            "model.heads" => self.model.heads = parse(key, value)?,
            "model.layers" => self.model.layers = parse(key, value)?,
            "model.mlp_hidden" => self.model.mlp_hidden = parse(key, value)?,
            "model.patch_t" => self.model.patch.t = parse(key, value)?,
            "model.patch_h" => self.model.patch.h = parse(key, value)?,
            "model.patch_w" => self.model.patch.w = parse(key, value)?,
            "model.compress_t" => self.compression.t = parse(key, value)?,
            "model.compress_h" => self.compression.h = parse(key, value)?,
            "model.compress_w" => self.compression.w = parse(key, value)?,
            "model.calibration_samples" => self.calibration.samples = parse(key, value)?,
            "model.calibration_ridge" => self.calibration.ridge = parse(key, value)?,
            "model.calibration_locked" => self.calibration.locked = parse(key, value)?,
            "guidance.omega0" => self.guidance.omega0 = parse(key, value)?,
            "guidance.b" => self.guidance.b = parse(key, value)?,
            "guidance.eps_div" => self.guidance.eps_div = parse(key, value)?,
            "detector.tau" => {
                self.detector.tau = parse(key, value)?;
                self.guidance.tau = self.detector.tau;
            }
            "detector.window" => self.detector.window = parse(key, value)?,
            "detector.kappa" => {
                self.detector.kappa = parse(key, value)?;
                self.guidance.kappa = self.detector.kappa;
            }
            "toggles.kv_schedule" => self.toggles.kv_schedule = parse_bool(key, value)?,
            "toggles.omega_schedule" => self.toggles.omega_schedule = parse_bool(key, value)?,
            "toggles.s_star" => self.toggles.s_star = parse_bool(key, value)?,
            "toggles.global_detection" => self.toggles.global_detection = parse_bool(key, value)?,
            "toggles.fixed_alpha" => {
                self.toggles.fixed_alpha = match value.to_ascii_lowercase().as_str() {
                    "" | "none" | "off" | "false" => None,
                    _ => Some(parse(key, value)?),
                }
            }
            "scene.frames" => self.scene.frames = parse(key, value)?,
            "scene.height" => self.scene.height = parse(key, value)?,
            "scene.width" => self.scene.width = parse(key, value)?,
            "scene.radius" => self.scene.radius = parse(key, value)?,
            "ablate.scenes" => self.ablate_scenes = parse(key, value)?,
            "ablate.arms" => {
                self.ablate_arms = Some(
                    value
                        .split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(String::from)
                        .collect(),
                )
            }
            "toy.seeds" => {
                self.toy_seeds = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| parse(key, s))
                    .collect::<Result<_>>()?
            }
            "toy.train_steps" => self.toy.train.steps = parse(key, value)?,
            "toy.batch" => self.toy.train.batch = parse(key, value)?,
            "toy.learning_rate" => self.toy.train.learning_rate = parse(key, value)?,
            "toy.momentum" => self.toy.train.momentum = parse(key, value)?,
            "toy.hidden" => self.toy.mlp.hidden = parse(key, value)?,
            "toy.trajectories" => self.toy.trajectories = parse(key, value)?,
            "toy.sampling_steps" => self.toy.sampling_steps = parse(key, value)?,
            "toy.kappa" => {
                self.toy.detector.kappa = parse(key, value)?;
                self.toy.guidance.kappa = self.toy.detector.kappa;
            }
            "toy.window" => self.toy.detector.window = parse(key, value)?,
            "toy.tau" => {
                self.toy.detector.tau = parse(key, value)?;
                self.toy.guidance.tau = self.toy.detector.tau;
            }
            "toy.omega0" => self.toy.guidance.omega0 = parse(key, value)?,
            "toy.b" => self.toy.guidance.b = parse(key, value)?,
            _ => return Err(KvLockError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Sets `toggles.NAME` from a command-line `NAME=BOOL` pair.
    pub fn set_toggle(&mut self, spec: &str) -> Result<()> {
        let (name, value) = spec
            .split_once('=')
            .ok_or_else(|| KvLockError::Config(format!("toggle {spec:?} is not NAME=BOOL")))?;
        let name = name.trim();
        let key = format!("toggles.{name}");
        if name == "fixed_alpha" {
            return self.set(&key, value.trim());
        }
        self.set(&key, &parse_bool(&key, value.trim())?.to_string())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.guidance.validate()?;
        self.detector.validate()?;
        self.toggles.validate()?;
        self.toy.validate()?;
        if self.guidance.tau != self.detector.tau || self.guidance.kappa != self.detector.kappa {
            return Err(KvLockError::Config("guidance and detector disagree on tau/kappa".into()));
        }
        if self.schedule.steps == 0 || self.schedule.steps > self.schedule.train_steps {
            return Err(KvLockError::Config(format!(
                "sampling steps {} outside 1..={}",
                self.schedule.steps, self.schedule.train_steps
            )));
        }
        if self.calibration.samples == 0
            || !(self.calibration.ridge >= 0.0)
            || !(0.0..=1.0).contains(&self.calibration.locked)
        {
            return Err(KvLockError::Config("calibration needs samples and a non-negative ridge".into()));
        }
        Ok(())
    }

    pub fn out_dir(&self) -> PathBuf {
        self.paths.out.clone().unwrap_or_else(|| PathBuf::from("kvlock-out"))
    }
}
