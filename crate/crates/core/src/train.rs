//! Minibatch training of the motion predictor with Adam and a warmup
//! schedule.
//!
//! A step draws `batch_size` samples, augments them, splits the batch into
//! `grad_chunks` fixed chunks and computes each chunk's gradient on its own
//! graph. Chunk gradients are summed in chunk order, so parallel and
//! sequential execution give bit-identical parameters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment, extract_windows, label_detections, AugmentPolicy, Scene, TrainingSample};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::geometry::Offset4;
use crate::predictor::{ForwardMode, Predictor, TrajectoryWindow};
use crate::tensor::{warmup_lr, Adam, ParamId};

/// Which boxes feed the training windows.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainSource {
    #[default]
    Gt,
    /// Detections labelled with the id of the gt box they overlap (IoU >= 0.5).
    Det,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub warmup: u64,
    /// Multiplier on the scheduled learning rate.
    pub lr_scale: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables it.
    pub grad_clip: f64,
    pub grad_chunks: usize,
    pub seed: u64,
    pub source: TrainSource,
    pub augment: AugmentPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 64,
            warmup: 4000,
            lr_scale: 1.0,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            grad_clip: 0.0,
            grad_chunks: 4,
            seed: 0,
            source: TrainSource::Gt,
            augment: AugmentPolicy::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.grad_chunks == 0 {
            return Err(Error::Config("batch_size and grad_chunks must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.augment.drop_prob) || self.augment.jitter < 0.0 {
            return Err(Error::Config("drop_prob must be in [0, 1) and jitter >= 0".into()));
        }
        if !(self.lr_scale > 0.0) || self.grad_clip < 0.0 {
            return Err(Error::Config("lr_scale must be positive and grad_clip >= 0".into()));
        }
        Ok(())
    }
}

/// Windows from every identified track of the given sequences.
pub fn collect_samples(gt: &[Scene], det: &[Option<Scene>], source: TrainSource, n_past: usize) -> Result<Vec<TrainingSample>> {
    let mut out = Vec::new();
    for (i, g) in gt.iter().enumerate() {
        match source {
            TrainSource::Gt => out.extend(extract_windows(g, n_past)),
            TrainSource::Det => {
                let d = det.get(i).and_then(Option::as_ref).ok_or_else(|| {
                    Error::Config(format!("training on detections but {} has none", g.info.name))
                })?;
                out.extend(extract_windows(&label_detections(g, d, 0.5)?, n_past));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

struct ChunkGrad {
    loss: f64,
    grads: Vec<(ParamId, Vec<f64>)>,
}

fn chunk_seed(seed: u64, step: u64, chunk: usize) -> u64 {
    seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (chunk as u64).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Batch-mean loss and its gradient, computed chunk by chunk.
pub fn batch_gradient(
    model: &Predictor,
    windows: &[TrajectoryWindow],
    targets: &[Offset4],
    chunks: usize,
    dropout_seed: u64,
    exec: Exec,
) -> Result<(f64, Vec<(ParamId, Vec<f64>)>)> {
    let n = windows.len();
    let per = n.div_ceil(chunks.max(1));
    let ranges: Vec<(usize, std::ops::Range<usize>)> =
        (0..n).step_by(per.max(1)).enumerate().map(|(c, s)| (c, s..(s + per).min(n))).collect();
    let parts = exec.map(&ranges, |(c, r)| -> Result<ChunkGrad> {
        let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed ^ (*c as u64));
        let mut mode = ForwardMode { dropout_rng: Some(&mut rng) };
        let weight = r.len() as f64 / n as f64;
        let (loss, g) = model.loss_graph(&windows[r.clone()], &targets[r.clone()], &mut mode, weight)?;
        Ok(ChunkGrad { loss: loss * weight, grads: g.param_grads().map(|(id, v)| (id, v.to_vec())).collect() })
    });
    let mut loss = 0.0;
    let mut total: Vec<(ParamId, Vec<f64>)> = Vec::new();
    for part in parts {
        let part = part?;
        loss += part.loss;
        for (id, g) in part.grads {
            match total.iter_mut().find(|(i, _)| *i == id) {
                Some((_, acc)) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => total.push((id, g)),
            }
        }
    }
    Ok((loss, total))
}

/// Mean smooth-L1 loss over `samples` without augmentation or dropout.
pub fn eval_loss(model: &Predictor, samples: &[TrainingSample], exec: Exec) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Precondition("no samples to evaluate".into()));
    }
    let batches: Vec<&[TrainingSample]> = samples.chunks(256).collect();
    let sums = exec.map(&batches, |b| -> Result<f64> {
        let windows: Vec<TrajectoryWindow> = b.iter().map(|s| s.window.clone()).collect();
        let targets: Vec<Offset4> = b.iter().map(|s| s.target).collect();
        let pred = model.predict_batch(&windows)?;
        Ok(crate::predictor::smooth_l1_loss(&pred, &targets)? * b.len() as f64)
    });
    let mut total = 0.0;
    for s in sums {
        total += s?;
    }
    Ok(total / samples.len() as f64)
}

/// Run `config.steps` optimizer steps. `on_step` sees every step's log
/// line and the updated model.
pub fn train(
    model: &mut Predictor,
    samples: &[TrainingSample],
    config: &TrainConfig,
    exec: Exec,
    mut on_step: impl FnMut(&StepLog, &Predictor) -> Result<()>,
) -> Result<Vec<StepLog>> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::Precondition("no training samples (need tracks with at least 3 observations)".into()));
    }
    let n_past = model.config().n_past;
    let d_model = model.config().d_model;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(model.params(), config.beta1, config.beta2, config.eps);
    let mut logs = Vec::with_capacity(config.steps as usize);
    for step in 1..=config.steps {
        let mut windows = Vec::with_capacity(config.batch_size);
        let mut targets = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            let s = &samples[rng.gen_range(0..samples.len())];
            let mut a = augment(s, &config.augment, &mut rng);
            a.window.truncate_front(n_past);
            windows.push(a.window);
            targets.push(a.target);
        }
        let (loss, grads) = batch_gradient(model, &windows, &targets, config.grad_chunks, chunk_seed(config.seed, step, 0), exec)?;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("loss became {loss} at step {step}")));
        }
        let norm = grads.iter().flat_map(|(_, g)| g.iter()).map(|v| v * v).sum::<f64>().sqrt();
        let clip = if config.grad_clip > 0.0 && norm > config.grad_clip { config.grad_clip / norm } else { 1.0 };
        let store = model.params_mut();
        store.zero_grad();
        for (id, mut g) in grads {
            if clip != 1.0 {
                g.iter_mut().for_each(|v| *v *= clip);
            }
            store.accumulate(id, &g);
        }
        let lr = config.lr_scale * warmup_lr(d_model, config.warmup, step);
        adam.step(store, step, lr);
        let log = StepLog { step, loss, lr, grad_norm: norm };
        on_step(&log, model)?;
        logs.push(log);
    }
    Ok(logs)
}
