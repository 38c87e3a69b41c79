//! Subcommand implementations. Each writes only inside its output path.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use log::info;
use serde::Serialize;

use mtrack::checkpoint;
use mtrack::data::{list_sequences, parse_mot, synth_all, Scene, Sequence, SynthScene, SynthSpec, TrainingSample};
use mtrack::experiment::{evaluate_model, motion_table, run_variants, variant_table, Variant, VariantResult};
use mtrack::gradcheck::{self, GradcheckConfig};
use mtrack::metrics::{evaluate, format_table, EvalReport};
use mtrack::predictor::{Predictor, PredictorConfig};
use mtrack::tensor::PoolKind;
use mtrack::tracker::{track_scenes, MotionModel};
use mtrack::train::{collect_samples, train, StepLog, TrainConfig};

use crate::config::{PredictorKind, RunConfig};

pub const SYNTH_FILE: &str = "synth.toml";
pub const MODEL_FILE: &str = "model.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn json_lines<T: Serialize>(items: &[T]) -> Result<String> {
    let mut s = String::new();
    for it in items {
        s.push_str(&serde_json::to_string(it)?);
        s.push('\n');
    }
    Ok(s)
}

/// Sequence directories under `root`, or `root` itself if it is one.
pub fn sequence_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    if root.join("seqinfo.ini").is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    let dirs = list_sequences(root)?;
    if dirs.is_empty() {
        bail!(mtrack::Error::MissingMetadata(format!("no sequence directories (with seqinfo.ini) under {}", root.display())));
    }
    Ok(dirs)
}

pub fn load_sequences(root: &Path) -> Result<Vec<Sequence>> {
    sequence_dirs(root)?.iter().map(|d| Sequence::load(d).map_err(Into::into)).collect()
}

pub fn load_synth_spec(path: Option<&Path>) -> Result<SynthSpec> {
    let spec = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing synth spec {}", p.display()))?
        }
        None => SynthSpec::default(),
    };
    spec.validate()?;
    Ok(spec)
}

/// Generate `spec.scenes` sequences (gt + noisy detections) under `out`.
pub fn synth(spec: &SynthSpec, out: &Path) -> Result<Vec<PathBuf>> {
    let scenes = synth_all(spec)?;
    let mut dirs = Vec::new();
    for s in &scenes {
        let dir = out.join(&s.gt.info.name);
        Sequence::save(&dir, &s.gt.info, Some(&s.gt), Some(&s.det))?;
        dirs.push(dir);
    }
    write_file(&out.join(SYNTH_FILE), toml::to_string(spec)?)?;
    info!("wrote {} sequences to {}", dirs.len(), out.display());
    Ok(dirs)
}

fn training_samples(cfg: &RunConfig, root: &Path) -> Result<Vec<TrainingSample>> {
    let seqs = load_sequences(root)?;
    let mut gt = Vec::new();
    let mut det = Vec::new();
    for s in seqs {
        gt.push(s.gt.ok_or_else(|| anyhow!("{} has no gt/gt.txt to train on", s.dir.display()))?);
        det.push(s.det);
    }
    Ok(collect_samples(&gt, &det, cfg.train.source, cfg.model.n_past)?)
}

/// Train from `data`, writing the final checkpoint, a JSON-lines loss log,
/// periodic checkpoints and the resolved config into `out`.
pub fn train_cmd(cfg: &RunConfig, data: &Path, out: &Path, checkpoint_every: u64) -> Result<Predictor> {
    let mut cfg = cfg.clone();
    cfg.paths.data = Some(data.to_path_buf());
    cfg.save(out)?;
    let samples = training_samples(&cfg, data)?;
    info!("{} training windows from {}", samples.len(), data.display());
    let mut model = Predictor::new(cfg.model.clone(), cfg.train.seed)?;
    let log_path = out.join(TRAIN_LOG);
    let mut log = fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    let steps = cfg.train.steps;
    train(&mut model, &samples, &cfg.train, cfg.exec, |s: &StepLog, m: &Predictor| {
        writeln!(log, "{}", serde_json::to_string(s)?).map_err(|e| mtrack::Error::Io { path: log_path.clone(), source: e })?;
        if s.step.is_multiple_of(100) || s.step == steps {
            info!("step {} loss {:.4e} lr {:.3e}", s.step, s.loss, s.lr);
        }
        if checkpoint_every > 0 && s.step.is_multiple_of(checkpoint_every) {
            checkpoint::save(m, &out.join("checkpoints").join(format!("step_{:06}.ckpt", s.step)))?;
        }
        Ok(())
    })?;
    checkpoint::save(&model, &out.join(MODEL_FILE))?;
    Ok(model)
}

/// Which boxes the tracker consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum DetSource {
    Det,
    Gt,
}

pub fn motion_model(cfg: &mut RunConfig, checkpoint_path: Option<&Path>) -> Result<MotionModel> {
    Ok(match cfg.predictor {
        PredictorKind::None => MotionModel::NoMotion,
        PredictorKind::Kalman => MotionModel::Kalman(cfg.kalman),
        PredictorKind::Learned => {
            let p = checkpoint_path
                .or(cfg.paths.checkpoint.as_deref())
                .ok_or_else(|| mtrack::Error::Config("--predictor learned needs --checkpoint".into()))?;
            let model = checkpoint::load(p)?;
            cfg.model = model.config().clone();
            cfg.tracker.n_past = cfg.model.n_past;
            cfg.paths.checkpoint = Some(p.to_path_buf());
            MotionModel::Learned(Arc::new(model))
        }
    })
}

/// Track every sequence under `data`; writes `<out>/<seq>.txt`.
pub fn track_cmd(cfg: &RunConfig, data: &Path, out: &Path, checkpoint_path: Option<&Path>, source: DetSource, diagnostics: bool) -> Result<Vec<PathBuf>> {
    let mut cfg = cfg.clone();
    let model = motion_model(&mut cfg, checkpoint_path)?;
    cfg.paths.data = Some(data.to_path_buf());
    cfg.save(out)?;
    let seqs = load_sequences(data)?;
    let scenes: Vec<Scene> = seqs
        .into_iter()
        .map(|s| {
            let dir = s.dir.clone();
            match source {
                DetSource::Det => s.det,
                DetSource::Gt => s.gt,
            }
            .ok_or_else(|| anyhow!("{} has no {:?} file", dir.display(), source))
        })
        .collect::<Result<_>>()?;
    let results = track_scenes(&scenes, &cfg.tracker, &model, cfg.exec)?;
    let mut files = Vec::new();
    for (scene, (hyp, diags)) in scenes.iter().zip(&results) {
        let path = out.join(format!("{}.txt", scene.info.name));
        mtrack::data::write_mot(hyp, &path)?;
        if diagnostics {
            write_file(&out.join(format!("{}.diag.jsonl", scene.info.name)), json_lines(diags)?)?;
        }
        info!("{}: {} output rows", scene.info.name, hyp.num_detections());
        files.push(path);
    }
    Ok(files)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalOutput {
    pub sequences: Vec<(String, EvalReport)>,
    pub overall: EvalReport,
}

impl EvalOutput {
    pub fn table(&self) -> String {
        let mut rows = self.sequences.clone();
        rows.push(("OVERALL".into(), self.overall.clone()));
        format_table(&rows)
    }
}

fn hypothesis_for(hyp_root: &Path, seq: &Sequence) -> Result<Scene> {
    let name = &seq.info.name;
    let dir_name = seq.dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let candidates = [
        hyp_root.join(format!("{name}.txt")),
        hyp_root.join(format!("{dir_name}.txt")),
        hyp_root.join(&dir_name).join("gt").join("gt.txt"),
    ];
    let path = candidates
        .iter()
        .find(|p| p.is_file())
        .ok_or_else(|| anyhow!(mtrack::Error::MissingMetadata(format!("no hypothesis for {name} under {}", hyp_root.display()))))?;
    Ok(parse_mot(path, seq.info.clone())?)
}

pub fn eval_cmd(gt_root: &Path, hyp_root: &Path, iou_min: f64) -> Result<EvalOutput> {
    let mut sequences = Vec::new();
    for seq in load_sequences(gt_root)? {
        let gt = seq.gt.as_ref().ok_or_else(|| anyhow!("{} has no gt/gt.txt", seq.dir.display()))?;
        let hyp = hypothesis_for(hyp_root, &seq)?;
        sequences.push((seq.info.name.clone(), evaluate(gt, &hyp, iou_min)?));
    }
    let overall = EvalReport::aggregate(sequences.iter().map(|(_, r)| r));
    Ok(EvalOutput { sequences, overall })
}

pub fn gradcheck_cmd(model: PredictorConfig, seeds: Vec<u64>, tol: f64, cfg: &RunConfig) -> Result<Vec<gradcheck::SeedReport>> {
    let gc = GradcheckConfig { model, seeds, rel_tol: tol, ..GradcheckConfig::default() };
    Ok(gradcheck::run(&gc, cfg.exec)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Study {
    /// Learned vs Kalman vs no-motion.
    Motion,
    /// Full encoder vs no self-attention vs no dynamic MLP.
    Ablation,
    /// Drop augmentation off vs the configured probability.
    Drop,
    /// Mean vs last vs sum pooling.
    Pooling,
}

fn synth_scenes(root: &Path) -> Result<Vec<SynthScene>> {
    load_sequences(root)?
        .into_iter()
        .map(|s| {
            let dir = s.dir.clone();
            match (s.gt, s.det) {
                (Some(gt), Some(det)) => Ok(SynthScene { gt, det }),
                _ => Err(anyhow!("{} needs both gt/gt.txt and det/det.txt", dir.display())),
            }
        })
        .collect()
}

/// Every `k`-th sample, at most `cap` of them.
fn subsample(samples: &[TrainingSample], cap: usize) -> Vec<TrainingSample> {
    let k = samples.len().div_ceil(cap.max(1)).max(1);
    samples.iter().step_by(k).cloned().collect()
}

pub fn study_variants(study: Study, cfg: &RunConfig) -> Vec<Variant> {
    let v = |name: &str, model: PredictorConfig, train: TrainConfig| Variant { name: name.into(), model, train };
    let (m, t) = (cfg.model.clone(), cfg.train.clone());
    match study {
        Study::Motion => Vec::new(),
        Study::Ablation => vec![
            v("full", PredictorConfig { enable_mhsa: true, enable_dymlp: true, ..m.clone() }, t.clone()),
            v("no-mhsa", PredictorConfig { enable_mhsa: false, enable_dymlp: true, ..m.clone() }, t.clone()),
            v("no-dymlp", PredictorConfig { enable_mhsa: true, enable_dymlp: false, ..m }, t),
        ],
        Study::Drop => {
            let mut off = t.clone();
            off.augment.drop_prob = 0.0;
            let name = format!("drop={}", t.augment.drop_prob);
            vec![v("drop=0", m.clone(), off), v(&name, m, t)]
        }
        Study::Pooling => [PoolKind::Mean, PoolKind::Last, PoolKind::Sum]
            .into_iter()
            .map(|p| v(&format!("{p:?}").to_lowercase(), PredictorConfig { pooling: p, ..m.clone() }, t.clone()))
            .collect(),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StudyOutput {
    pub table: String,
    pub variants: Vec<VariantResult>,
    pub motion: Vec<(String, EvalReport)>,
}

/// Run a comparison study. Training windows come from `data`, held-out
/// windows and tracking scenes from `eval_data`.
pub fn experiment_cmd(study: Study, cfg: &RunConfig, data: &Path, eval_data: &Path, out: &Path, checkpoint_path: Option<&Path>) -> Result<StudyOutput> {
    let mut cfg = cfg.clone();
    cfg.paths.data = Some(data.to_path_buf());
    cfg.paths.eval_data = Some(eval_data.to_path_buf());
    let eval_scenes = synth_scenes(eval_data)?;
    let held_gt: Vec<Scene> = eval_scenes.iter().map(|s| s.gt.clone()).collect();
    let held_out = subsample(&collect_samples(&held_gt, &[], mtrack::train::TrainSource::Gt, cfg.model.n_past)?, 2000);
    let result = if study == Study::Motion {
        let learned = match checkpoint_path {
            Some(p) => {
                cfg.paths.checkpoint = Some(p.to_path_buf());
                checkpoint::load(p)?
            }
            None => train_cmd(&cfg, data, &out.join("learned"), 0)?,
        };
        let tracker = mtrack::tracker::TrackerConfig { n_past: learned.config().n_past, ..cfg.tracker };
        let mut rows = Vec::new();
        for m in [MotionModel::NoMotion, MotionModel::Kalman(cfg.kalman), MotionModel::Learned(Arc::new(learned))] {
            rows.push((m.name().to_string(), evaluate_model(&eval_scenes, &tracker, &m, cfg.eval.iou_min, cfg.exec)?));
        }
        StudyOutput { table: motion_table(&rows), variants: Vec::new(), motion: rows }
    } else {
        let samples = training_samples(&cfg, data)?;
        let variants = study_variants(study, &cfg);
        let results = run_variants(&variants, &samples, &held_out, &eval_scenes, &cfg.tracker, cfg.train.seed, cfg.exec, |name, s| {
            if s.step % 100 == 0 {
                info!("{name}: step {} loss {:.4e}", s.step, s.loss);
            }
        })?;
        let variants: Vec<VariantResult> = results.into_iter().map(|(r, _)| r).collect();
        StudyOutput { table: variant_table(&variants), variants, motion: Vec::new() }
    };
    cfg.save(out)?;
    write_file(&out.join("table.txt"), &result.table)?;
    write_file(&out.join("results.json"), serde_json::to_string_pretty(&result)?)?;
    Ok(result)
}
