//! Run configuration: built-in preset, then an optional TOML file, then
//! command-line overrides. The resolved value is written next to every
//! output as `run.toml`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use mtrack::baselines::KalmanConfig;
use mtrack::exec::Exec;
use mtrack::predictor::PredictorConfig;
use mtrack::tensor::PoolKind;
use mtrack::tracker::TrackerConfig;
use mtrack::train::{TrainConfig, TrainSource};

pub const RUN_FILE: &str = "run.toml";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// d_model 512, 6 layers, 8 heads.
    Full,
    /// d_model 64, 2 layers, 4 heads.
    #[default]
    Desk,
}

impl Preset {
    pub fn model(self) -> PredictorConfig {
        match self {
            Preset::Full => PredictorConfig::full(),
            Preset::Desk => PredictorConfig::desk(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum PredictorKind {
    #[default]
    Learned,
    Kalman,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_min: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { iou_min: mtrack::metrics::DEFAULT_IOU_MIN }
    }
}

/// Inputs a command read; recorded for provenance.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_data: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub predictor: PredictorKind,
    pub exec: Exec,
    pub paths: Paths,
    pub model: PredictorConfig,
    pub train: TrainConfig,
    pub tracker: TrackerConfig,
    pub kalman: KalmanConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::with_preset(Preset::Desk)
    }
}

impl RunConfig {
    pub fn with_preset(preset: Preset) -> Self {
        Self {
            preset,
            predictor: PredictorKind::default(),
            exec: Exec::default(),
            paths: Paths::default(),
            model: preset.model(),
            train: TrainConfig::default(),
            tracker: TrackerConfig::default(),
            kalman: KalmanConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.tracker.validate()?;
        if !(0.0..=1.0).contains(&self.eval.iou_min) {
            bail!(mtrack::Error::Config(format!("eval.iou_min {} outside [0, 1]", self.eval.iou_min)));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).context("serializing run config")
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let p = dir.join(RUN_FILE);
        fs::write(&p, self.to_toml()?).with_context(|| format!("writing {}", p.display()))
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Flags shared by every command that builds a [`RunConfig`].
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// TOML run config layered over the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Seed for model initialization and batch sampling.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub predictor: Option<PredictorKind>,
    #[arg(long, value_enum)]
    pub pooling: Option<PoolArg>,
    /// Disable the self-attention branch.
    #[arg(long)]
    pub no_mhsa: bool,
    /// Disable the dynamic MLP branch.
    #[arg(long)]
    pub no_dymlp: bool,
    /// Observation drop probability during training.
    #[arg(long)]
    pub drop_prob: Option<f64>,
    /// Box jitter scale during training.
    #[arg(long)]
    pub jitter: Option<f64>,
    /// Train on random-length windows.
    #[arg(long)]
    pub rand_len: bool,
    #[arg(long)]
    pub n_past: Option<usize>,
    #[arg(long)]
    pub t_max: Option<u32>,
    #[arg(long)]
    pub iou_gate: Option<f64>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub warmup: Option<u64>,
    #[arg(long)]
    pub lr_scale: Option<f64>,
    /// Training windows from gt tracks or from gt-labelled detections.
    #[arg(long, value_enum)]
    pub source: Option<SourceArg>,
    /// Remove pseudo-observations from a track's history when it is re-matched.
    #[arg(long)]
    pub purge_pseudo: bool,
    #[arg(long, value_enum)]
    pub exec: Option<ExecArg>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PoolArg {
    Mean,
    Last,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SourceArg {
    Gt,
    Det,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExecArg {
    Parallel,
    Sequential,
}

impl ConfigArgs {
    /// Defaults < `--config` file < flags.
    pub fn resolve(&self) -> Result<RunConfig> {
        let file: Option<toml::Value> = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                Some(toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?)
            }
            None => None,
        };
        let file_preset = file
            .as_ref()
            .and_then(|v| v.get("preset"))
            .map(|v| v.clone().try_into::<Preset>())
            .transpose()
            .context("config key `preset`")?;
        let preset = self.preset.or(file_preset).unwrap_or_default();
        let mut cfg = RunConfig::with_preset(preset);
        if let Some(f) = file {
            let mut base = toml::Value::try_from(&cfg).context("serializing defaults")?;
            merge(&mut base, f);
            cfg = base.try_into().with_context(|| format!("invalid config {}", self.config.as_ref().expect("file given").display()))?;
            if self.preset.is_some() {
                cfg.preset = preset;
                cfg.model = RunConfig::with_preset(preset).model;
            }
        }
        self.apply(&mut cfg);
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&self, c: &mut RunConfig) {
        if let Some(s) = self.seed {
            c.train.seed = s;
        }
        if let Some(p) = self.predictor {
            c.predictor = p;
        }
        if let Some(p) = self.pooling {
            c.model.pooling = match p {
                PoolArg::Mean => PoolKind::Mean,
                PoolArg::Last => PoolKind::Last,
                PoolArg::Sum => PoolKind::Sum,
            };
        }
        if self.no_mhsa {
            c.model.enable_mhsa = false;
        }
        if self.no_dymlp {
            c.model.enable_dymlp = false;
        }
        if let Some(v) = self.drop_prob {
            c.train.augment.drop_prob = v;
        }
        if let Some(v) = self.jitter {
            c.train.augment.jitter = v;
        }
        if self.rand_len {
            c.train.augment.random_length = true;
        }
        if let Some(n) = self.n_past {
            c.model.n_past = n;
            c.tracker.n_past = n;
        }
        if let Some(v) = self.t_max {
            c.tracker.t_max = v;
        }
        if let Some(v) = self.iou_gate {
            c.tracker.iou_gate = v;
        }
        if let Some(v) = self.steps {
            c.train.steps = v;
        }
        if let Some(v) = self.batch_size {
            c.train.batch_size = v;
        }
        if let Some(v) = self.warmup {
            c.train.warmup = v;
        }
        if let Some(v) = self.lr_scale {
            c.train.lr_scale = v;
        }
        if let Some(s) = self.source {
            c.train.source = match s {
                SourceArg::Gt => TrainSource::Gt,
                SourceArg::Det => TrainSource::Det,
            };
        }
        if self.purge_pseudo {
            c.tracker.purge_pseudo_on_rematch = true;
        }
        if let Some(e) = self.exec {
            c.exec = match e {
                ExecArg::Parallel => Exec::Parallel,
                ExecArg::Sequential => Exec::Sequential,
            };
        }
    }
}
