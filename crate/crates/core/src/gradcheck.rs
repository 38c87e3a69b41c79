//! Whole-model gradient check: analytic parameter gradients of the batch
//! loss against central finite differences, for every scalar parameter.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::geometry::{BBox, Offset4};
use crate::predictor::{smooth_l1_loss, ForwardMode, Predictor, PredictorConfig, TrajectoryWindow};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    pub model: PredictorConfig,
    pub seeds: Vec<u64>,
    /// Windows per batch.
    pub batch: usize,
    pub step: f64,
    pub rel_tol: f64,
    /// Below this magnitude both gradients count as zero and only the
    /// absolute difference is compared against it.
    pub abs_floor: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            model: PredictorConfig { d_model: 16, layers: 2, heads: 2, ..PredictorConfig::desk() },
            seeds: vec![0, 1, 2, 3, 4],
            batch: 3,
            step: 1e-6,
            rel_tol: 1e-3,
            abs_floor: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub checked: usize,
    pub failures: usize,
    pub max_rel_err: f64,
    pub worst_param: String,
}

fn random_batch(rng: &mut ChaCha8Rng, n: usize, n_past: usize) -> (Vec<TrajectoryWindow>, Vec<Offset4>) {
    let mut windows = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for _ in 0..n {
        let len = rng.gen_range(2..=n_past);
        let mut b = BBox { cx: rng.gen_range(0.2..0.8), cy: rng.gen_range(0.2..0.8), w: rng.gen_range(0.02..0.1), h: rng.gen_range(0.05..0.2) };
        let v = (rng.gen_range(-0.01..0.01), rng.gen_range(-0.01..0.01));
        let mut boxes = Vec::with_capacity(len);
        for _ in 0..len {
            b = BBox { cx: b.cx + v.0 + rng.gen_range(-0.003..0.003), cy: b.cy + v.1 + rng.gen_range(-0.003..0.003), ..b };
            boxes.push(b);
        }
        windows.push(TrajectoryWindow::from_boxes(len as u32 + 5, boxes).expect("valid synthetic window"));
        targets.push(Offset4::new(rng.gen_range(-0.02..0.02), rng.gen_range(-0.02..0.02), rng.gen_range(-0.005..0.005), rng.gen_range(-0.005..0.005)));
    }
    (windows, targets)
}

fn loss(model: &Predictor, w: &[TrajectoryWindow], t: &[Offset4]) -> Result<f64> {
    smooth_l1_loss(&model.predict_batch(w)?, t)
}

/// Check one seed. Parameters are randomized so that no weight sits at a
/// special zero and sampling positions fall between tokens.
pub fn check_seed(cfg: &GradcheckConfig, seed: u64, exec: Exec) -> Result<SeedReport> {
    let mut model = Predictor::new(cfg.model.clone(), seed)?;
    model.randomize(seed.wrapping_add(1000), 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (windows, targets) = random_batch(&mut rng, cfg.batch, cfg.model.n_past);
    let (_, g) = model.loss_graph(&windows, &targets, &mut ForwardMode::eval(), 1.0)?;
    let analytic: Vec<(String, Vec<f64>)> = model
        .params()
        .iter()
        .map(|(id, p)| {
            let grad = g.param_grads().find(|(i, _)| *i == id).map_or_else(|| vec![0.0; p.tensor.len()], |(_, v)| v.to_vec());
            (p.name.clone(), grad)
        })
        .collect();
    let coords: Vec<(usize, usize)> = analytic.iter().enumerate().flat_map(|(p, (_, v))| (0..v.len()).map(move |i| (p, i))).collect();
    let numeric = exec.map(&coords, |&(p, i)| -> Result<f64> {
        let name = &analytic[p].0;
        let mut m = model.clone();
        let id = m.params().by_name(name).expect("known parameter");
        let base = m.params().get(id).tensor.data()[i];
        m.params_mut().get_mut(id).tensor.data_mut()[i] = base + cfg.step;
        let up = loss(&m, &windows, &targets)?;
        m.params_mut().get_mut(id).tensor.data_mut()[i] = base - cfg.step;
        let down = loss(&m, &windows, &targets)?;
        Ok((up - down) / (2.0 * cfg.step))
    });
    let mut report = SeedReport { seed, checked: 0, failures: 0, max_rel_err: 0.0, worst_param: String::new() };
    for (&(p, i), n) in coords.iter().zip(numeric) {
        let n = n?;
        let a = analytic[p].1[i];
        let scale = a.abs().max(n.abs());
        let err = if scale < cfg.abs_floor { 0.0 } else { (a - n).abs() / scale };
        let ok = err <= cfg.rel_tol || (a - n).abs() <= cfg.abs_floor;
        report.checked += 1;
        if !ok {
            report.failures += 1;
        }
        if err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst_param = format!("{}[{i}]", analytic[p].0);
        }
    }
    Ok(report)
}

pub fn run(cfg: &GradcheckConfig, exec: Exec) -> Result<Vec<SeedReport>> {
    if cfg.seeds.is_empty() || cfg.batch == 0 || !(cfg.step > 0.0) {
        return Err(Error::Config("gradcheck needs seeds, a non-empty batch and a positive step".into()));
    }
    cfg.seeds.iter().map(|&s| check_seed(cfg, s, exec)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_model_passes() {
        let cfg = GradcheckConfig {
            model: PredictorConfig { d_model: 8, layers: 1, heads: 2, n_past: 4, ..PredictorConfig::desk() },
            seeds: vec![7],
            ..GradcheckConfig::default()
        };
        let r = run(&cfg, Exec::Parallel).unwrap();
        assert_eq!(r[0].failures, 0, "{r:?}");
        assert!(r[0].checked > 100);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // a step far too large for the curvature shows up as failures
        let cfg = GradcheckConfig {
            model: PredictorConfig { d_model: 8, layers: 1, heads: 2, n_past: 4, ..PredictorConfig::desk() },
            seeds: vec![7],
            step: 0.5,
            ..GradcheckConfig::default()
        };
        assert!(run(&cfg, Exec::Parallel).unwrap()[0].failures > 0);
    }
}
