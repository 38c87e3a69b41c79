//! Scaled-down comparison studies: motion models, encoder ablations, drop
//! augmentation and pooling variants, each rendered as a text table.

use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::{Scene, SynthScene, TrainingSample};
use crate::error::Result;
use crate::exec::Exec;
use crate::metrics::{evaluate, EvalReport};
use crate::predictor::{Predictor, PredictorConfig};
use crate::tracker::{track_scenes, MotionModel, TrackerConfig};
use crate::train::{eval_loss, train, StepLog, TrainConfig};

/// Track every scene's detections with `model` and score against its gt.
pub fn evaluate_model(scenes: &[SynthScene], tracker: &TrackerConfig, model: &MotionModel, iou_min: f64, exec: Exec) -> Result<EvalReport> {
    let det: Vec<Scene> = scenes.iter().map(|s| s.det.clone()).collect();
    let outputs = track_scenes(&det, tracker, model, exec)?;
    let reports = scenes
        .iter()
        .zip(&outputs)
        .map(|(s, (hyp, _))| evaluate(&s.gt, hyp, iou_min))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::aggregate(&reports))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub name: String,
    pub params: usize,
    pub loss_before: f64,
    pub loss_after: f64,
    pub report: Option<EvalReport>,
}

/// One trained configuration of a study.
#[derive(Debug, Clone)]
pub struct Variant {
    pub name: String,
    pub model: PredictorConfig,
    pub train: TrainConfig,
}

/// Train each variant from the same initial seed, then measure held-out
/// loss and (when `eval_scenes` is non-empty) tracking quality.
pub fn run_variants(
    variants: &[Variant],
    train_samples: &[TrainingSample],
    held_out: &[TrainingSample],
    eval_scenes: &[SynthScene],
    tracker: &TrackerConfig,
    init_seed: u64,
    exec: Exec,
    mut on_step: impl FnMut(&str, &StepLog),
) -> Result<Vec<(VariantResult, Predictor)>> {
    let mut out = Vec::new();
    for v in variants {
        let mut model = Predictor::new(v.model.clone(), init_seed)?;
        let loss_before = eval_loss(&model, held_out, exec)?;
        train(&mut model, train_samples, &v.train, exec, |log, _| {
            on_step(&v.name, log);
            Ok(())
        })?;
        let loss_after = eval_loss(&model, held_out, exec)?;
        let report = if eval_scenes.is_empty() {
            None
        } else {
            let tcfg = TrackerConfig { n_past: v.model.n_past, ..*tracker };
            Some(evaluate_model(eval_scenes, &tcfg, &MotionModel::Learned(Arc::new(model.clone())), 0.5, exec)?)
        };
        let params = model.params().num_scalars();
        out.push((VariantResult { name: v.name.clone(), params, loss_before, loss_after, report }, model));
    }
    Ok(out)
}

/// Rows `(name, params, loss before, loss after, MOTA, IDF1, IDSW)`.
pub fn variant_table(results: &[VariantResult]) -> String {
    let w = results.iter().map(|r| r.name.len()).max().unwrap_or(0).max(7);
    let mut s = format!("{:<w$} {:>9} {:>11} {:>11} {:>8} {:>8} {:>6}\n", "variant", "params", "loss@0", "loss@end", "MOTA", "IDF1", "IDSW");
    for r in results {
        let (mota, idf1, idsw) = match &r.report {
            Some(e) => (format!("{:.4}", e.mota), format!("{:.4}", e.idf1), e.idsw.to_string()),
            None => ("-".into(), "-".into(), "-".into()),
        };
        let _ = writeln!(s, "{:<w$} {:>9} {:>11.6} {:>11.6} {:>8} {:>8} {:>6}", r.name, r.params, r.loss_before, r.loss_after, mota, idf1, idsw);
    }
    s
}

/// Rows `(motion model, MOTA, IDF1, IDSW, FP, FN)`.
pub fn motion_table(rows: &[(String, EvalReport)]) -> String {
    let mut s = format!("{:<8} {:>8} {:>8} {:>6} {:>7} {:>7}\n", "motion", "MOTA", "IDF1", "IDSW", "FP", "FN");
    for (name, r) in rows {
        let _ = writeln!(s, "{:<8} {:>8.4} {:>8.4} {:>6} {:>7} {:>7}", name, r.mota, r.idf1, r.idsw, r.fp, r.fn_);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::KalmanConfig;
    use crate::data::{synth_all, MotionKind, SynthSpec};

    #[test]
    fn gt_as_detections_gives_perfect_scores() {
        let spec = SynthSpec { scenes: 2, motions: vec![MotionKind::Linear], det_noise: 0.0, ..SynthSpec::default() };
        let scenes: Vec<SynthScene> = synth_all(&spec)
            .unwrap()
            .into_iter()
            .map(|s| SynthScene { det: s.gt.clone(), gt: s.gt })
            .collect();
        for m in [MotionModel::NoMotion, MotionModel::Kalman(KalmanConfig::default())] {
            let r = evaluate_model(&scenes, &TrackerConfig::default(), &m, 0.5, Exec::Sequential).unwrap();
            assert_eq!(r.idsw, 0, "{}", m.name());
            assert_eq!(r.fn_, 0);
        }
    }

    #[test]
    fn tables_have_one_row_per_entry() {
        let r = VariantResult { name: "mean".into(), params: 10, loss_before: 1.0, loss_after: 0.5, report: None };
        assert_eq!(variant_table(&[r.clone(), r]).lines().count(), 3);
        let e = EvalReport::from_counts(0, 0, 0, 1, 1, 0, 0);
        assert!(motion_table(&[("none".into(), e)]).contains("none"));
    }
}
