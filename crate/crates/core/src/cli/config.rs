//! Experiment configuration: one JSON document, every field defaulted, with
//! command-line overrides applied on top.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::blob::config_hash;
use crate::diffusion::{make_schedule, step_list, NoiseSchedule};
use crate::dit::{init_network, DitConfig, Network};
use crate::engine::{PredictMode, RatioMode, SortblockConfig, Window};
use crate::error::{Error, Result};
use crate::ratio::RatioPolicy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    Baseline,
    #[default]
    Sortblock,
}

impl RunMode {
    pub fn name(self) -> &'static str {
        match self {
            RunMode::Baseline => "baseline",
            RunMode::Sortblock => "sortblock",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Psnr,
    Ssim,
    RelativeL2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub total_timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            total_timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
        }
    }
}

/// Engine settings as they appear in the config file.
///
/// The window is given either as explicit timesteps or, when both bounds
/// are absent, as the middle `window_fraction` of the step list. The
/// defaults (K = 5, rho = 0.25, inner 90%) give 276 block evaluations
/// against 600 for a 50-step, 12-block run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SortblockSettings {
    pub refresh_interval: usize,
    pub ratio: RatioMode,
    pub rho: f64,
    pub beta: f64,
    pub window_high: Option<usize>,
    pub window_low: Option<usize>,
    pub window_fraction: f64,
    pub predict: PredictMode,
    /// Ratio policy for adaptive mode, relative to the output directory.
    pub policy_file: PathBuf,
}

impl Default for SortblockSettings {
    fn default() -> Self {
        Self {
            refresh_interval: 5,
            ratio: RatioMode::Fixed,
            rho: 0.25,
            beta: 1.0,
            window_high: None,
            window_low: None,
            window_fraction: 0.9,
            predict: PredictMode::Linear,
            policy_file: PathBuf::from("ratio_policy.json"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: DitConfig,
    pub schedule: ScheduleConfig,
    /// Number of sampler steps.
    pub steps: usize,
    pub seeds: Vec<u64>,
    pub mode: RunMode,
    pub sortblock: SortblockSettings,
    pub heavy_trace: bool,
    pub out_dir: PathBuf,
    pub metrics: Vec<Metric>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: DitConfig::default(),
            schedule: ScheduleConfig::default(),
            steps: 50,
            seeds: vec![0],
            mode: RunMode::Sortblock,
            sortblock: SortblockSettings::default(),
            heavy_trace: false,
            out_dir: PathBuf::from("out"),
            metrics: vec![Metric::Psnr, Metric::Ssim, Metric::RelativeL2],
        }
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub steps: Option<usize>,
    pub blocks: Option<usize>,
    pub refresh_interval: Option<usize>,
    pub rho: Option<f64>,
    pub beta: Option<f64>,
    pub window_high: Option<usize>,
    pub window_low: Option<usize>,
    pub seed: Option<u64>,
    pub mode: Option<RunMode>,
    pub predict: Option<PredictMode>,
    pub ratio: Option<RatioMode>,
    pub heavy_trace: bool,
    pub out_dir: Option<PathBuf>,
}

/// Everything a command needs to sample, built from a validated config.
pub struct Resolved {
    pub net: Network,
    pub schedule: NoiseSchedule,
    pub steps: Vec<usize>,
    pub window: Window,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line() as u64,
            message: e.to_string(),
        })
    }

    pub fn apply(&mut self, o: &Overrides) {
        let sb = &mut self.sortblock;
        if let Some(v) = o.steps {
            self.steps = v;
        }
        if let Some(v) = o.blocks {
            self.model.num_blocks = v;
        }
        if let Some(v) = o.refresh_interval {
            sb.refresh_interval = v;
        }
        if let Some(v) = o.rho {
            sb.rho = v;
        }
        if let Some(v) = o.beta {
            sb.beta = v;
        }
        if o.window_high.is_some() {
            sb.window_high = o.window_high;
        }
        if o.window_low.is_some() {
            sb.window_low = o.window_low;
        }
        if let Some(v) = o.predict {
            sb.predict = v;
        }
        if let Some(v) = o.ratio {
            sb.ratio = v;
        }
        if let Some(v) = o.seed {
            self.seeds = vec![v];
        }
        if let Some(v) = o.mode {
            self.mode = v;
        }
        if o.heavy_trace {
            self.heavy_trace = true;
        }
        if let Some(v) = &o.out_dir {
            self.out_dir = v.clone();
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.steps == 0 || self.steps > self.schedule.total_timesteps {
            return Err(Error::Config(format!(
                "steps must be in 1..={}, got {}",
                self.schedule.total_timesteps, self.steps
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.metrics.is_empty() {
            return Err(Error::Config("at least one metric is required".into()));
        }
        let sb = &self.sortblock;
        if sb.window_high.is_some() != sb.window_low.is_some() {
            return Err(Error::Config(
                "window_high and window_low must be given together".into(),
            ));
        }
        Ok(())
    }

    pub fn path(&self, relative: impl AsRef<Path>) -> PathBuf {
        self.out_dir.join(relative)
    }

    pub fn first_seed(&self) -> u64 {
        self.seeds[0]
    }

    /// Hash of the settings that determine a baseline latent: model,
    /// schedule and step count. Engine settings are excluded, so a
    /// sortblock run that recomputes everything carries the baseline hash.
    pub fn latent_hash(&self) -> String {
        config_hash(&serde_json::json!({
            "model": self.model,
            "schedule": self.schedule,
            "steps": self.steps,
        }))
    }

    pub fn resolve(&self) -> Result<Resolved> {
        self.validate()?;
        let schedule = make_schedule(
            self.schedule.total_timesteps,
            self.schedule.beta_start,
            self.schedule.beta_end,
        )?;
        let steps = step_list(self.schedule.total_timesteps, self.steps)?;
        let window = self.window_for(&steps)?;
        let net = init_network(&self.model)?;
        Ok(Resolved {
            net,
            schedule,
            steps,
            window,
        })
    }

    pub fn window_for(&self, steps: &[usize]) -> Result<Window> {
        match (self.sortblock.window_high, self.sortblock.window_low) {
            (Some(high), Some(low)) => Window::new(high, low),
            _ => Window::inner(steps, self.sortblock.window_fraction),
        }
    }

    /// Engine config for `window`. Adaptive mode reads the policy file.
    pub fn engine_config(&self, window: Window) -> Result<SortblockConfig> {
        let sb = &self.sortblock;
        let cfg = match sb.ratio {
            RatioMode::Fixed => SortblockConfig::fixed(sb.refresh_interval, sb.rho, window),
            RatioMode::Adaptive => {
                let path = self.path(&sb.policy_file);
                let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                let policy = RatioPolicy::from_json(&text)?;
                SortblockConfig::adaptive(sb.refresh_interval, policy, sb.beta, window)
            }
        }
        .with_predict(sb.predict);
        cfg.validate()?;
        Ok(cfg)
    }
}
