//! Learned motion predictor.
//!
//! A window of past boxes becomes a sequence of 9-dimensional motion tokens
//! `(cx, cy, w, h, w/h, Δcx, Δcy, Δw, Δh)`. Tokens are linearly embedded,
//! tagged with sinusoidal positions and passed through `layers` encoder
//! layers. Each layer sums two mixers over the same input: multi-head
//! self-attention across time steps, and a dynamic MLP that reads every
//! channel from its own learned (fractional) time offset and gates the
//! result against the untouched input channel by channel. The encoder
//! output is pooled over time and regressed to a 4-component box offset.
//!
//! All computation is batched: a batch of windows is stacked along the row
//! axis and the sequence-aware ops are told the window boundaries.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{encode_offset, BBox, Offset4};
use crate::tensor::{Graph, ParamId, ParamStore, PoolKind, Segments, Tensor, Var};

pub const TOKEN_DIM: usize = 9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub n_past: usize,
    pub pooling: PoolKind,
    pub enable_mhsa: bool,
    pub enable_dymlp: bool,
    pub dropout: f64,
    /// FFN hidden width as a multiple of `d_model`.
    pub ffn_mult: usize,
    /// Fixed multiplier on the delta channels of the input and divisor on
    /// the regressed offset. Per-frame deltas in normalized units are
    /// ~1e-3, far below the other token channels.
    pub delta_scale: f64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl PredictorConfig {
    /// Small model for laptop-scale experiments.
    pub fn desk() -> Self {
        Self {
            d_model: 64,
            layers: 2,
            heads: 4,
            n_past: 10,
            pooling: PoolKind::Mean,
            enable_mhsa: true,
            enable_dymlp: true,
            dropout: 0.0,
            ffn_mult: 4,
            delta_scale: 100.0,
        }
    }

    /// Full-size model: width 512, 6 layers, 8 heads.
    pub fn full() -> Self {
        Self { d_model: 512, layers: 6, heads: 8, ..Self::desk() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!("d_model {} must be a positive multiple of heads {}", self.d_model, self.heads));
        }
        if self.n_past < 2 {
            return bad(format!("n_past must be at least 2, got {}", self.n_past));
        }
        if !self.enable_mhsa && !self.enable_dymlp {
            return bad("at least one of mhsa / dymlp must be enabled".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.ffn_mult == 0 || !(self.delta_scale > 0.0) {
            return bad("ffn_mult and delta_scale must be positive".into());
        }
        Ok(())
    }
}

/// One time step of a trajectory as seen by the encoder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionToken {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub a: f64,
    pub d_cx: f64,
    pub d_cy: f64,
    pub d_w: f64,
    pub d_h: f64,
}

impl MotionToken {
    pub fn new(prev: Option<&BBox>, cur: &BBox) -> Self {
        let d = prev.map_or(Offset4::ZERO, |p| encode_offset(p, cur));
        Self {
            cx: cur.cx,
            cy: cur.cy,
            w: cur.w,
            h: cur.h,
            a: cur.aspect(),
            d_cx: d.d_cx,
            d_cy: d.d_cy,
            d_w: d.d_w,
            d_h: d.d_h,
        }
    }

    pub fn to_array(&self) -> [f64; TOKEN_DIM] {
        [self.cx, self.cy, self.w, self.h, self.a, self.d_cx, self.d_cy, self.d_w, self.d_h]
    }
}

/// Ordered recent observations of one object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryWindow {
    frames: Vec<u32>,
    boxes: Vec<BBox>,
}

impl TrajectoryWindow {
    pub fn new(frames: Vec<u32>, boxes: Vec<BBox>) -> Result<Self> {
        if frames.is_empty() || frames.len() != boxes.len() {
            return Err(Error::Precondition(format!(
                "window needs matching non-empty frames/boxes ({} vs {})",
                frames.len(),
                boxes.len()
            )));
        }
        if frames.windows(2).any(|p| p[1] <= p[0]) {
            return Err(Error::Precondition(format!("window frames not strictly increasing: {frames:?}")));
        }
        for b in &boxes {
            b.validate()?;
        }
        Ok(Self { frames, boxes })
    }

    /// Window over consecutive frames ending at `last_frame`.
    pub fn from_boxes(last_frame: u32, boxes: Vec<BBox>) -> Result<Self> {
        let n = boxes.len() as u32;
        if n > last_frame {
            return Err(Error::Precondition("window would start before frame 1".into()));
        }
        Self::new((last_frame + 1 - n..=last_frame).collect(), boxes)
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn frames(&self) -> &[u32] {
        &self.frames
    }

    pub fn boxes(&self) -> &[BBox] {
        &self.boxes
    }

    /// Box the predicted offset is applied to.
    pub fn base_box(&self) -> BBox {
        *self.boxes.last().expect("non-empty window")
    }

    pub fn tokens(&self) -> Vec<MotionToken> {
        self.boxes
            .iter()
            .enumerate()
            .map(|(i, b)| MotionToken::new(i.checked_sub(1).map(|p| &self.boxes[p]), b))
            .collect()
    }

    /// Keep the most recent `n` entries.
    pub fn truncate_front(&mut self, n: usize) {
        if self.len() > n {
            let drop = self.len() - n;
            self.frames.drain(..drop);
            self.boxes.drain(..drop);
        }
    }

    /// Keep the entries whose `keep` flag is set.
    pub fn retain_mask(&mut self, keep: &[bool]) {
        let mut it = keep.iter();
        self.frames.retain(|_| *it.next().unwrap_or(&true));
        let mut it = keep.iter();
        self.boxes.retain(|_| *it.next().unwrap_or(&true));
    }

    pub fn boxes_mut(&mut self) -> &mut [BBox] {
        &mut self.boxes
    }
}

/// Sinusoidal position code for slot `pos`: even channels `sin`, odd `cos`.
pub fn positional_encoding(pos: usize, d_model: usize) -> Vec<f64> {
    (0..d_model)
        .map(|j| {
            let i = (j / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * i / d_model as f64);
            if j % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct AttnIds {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct DyMlpIds {
    off_w: ParamId,
    off_b: ParamId,
    w: ParamId,
    b: ParamId,
    gate_i: ParamId,
    gate_t: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct LayerIds {
    attn: Option<AttnIds>,
    dymlp: Option<DyMlpIds>,
    ln1_g: ParamId,
    ln1_b: ParamId,
    ffn_w1: ParamId,
    ffn_b1: ParamId,
    ffn_w2: ParamId,
    ffn_b2: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
}

/// Intermediate values of one dynamic-MLP pass, kept for inspection.
#[derive(Debug, Clone, Copy)]
pub struct DyMlpVars {
    pub positions: Var,
    pub gathered: Var,
    pub dynamic: Var,
    pub gate_identity: Var,
    pub gate_dynamic: Var,
    pub out: Var,
}

/// Per-forward randomness (dropout). `None` means inference.
pub struct ForwardMode<'a> {
    pub dropout_rng: Option<&'a mut ChaCha8Rng>,
}

impl ForwardMode<'_> {
    pub fn eval() -> Self {
        Self { dropout_rng: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Predictor {
    config: PredictorConfig,
    store: ParamStore,
    embed_w: ParamId,
    embed_b: ParamId,
    layers: Vec<LayerIds>,
    head_w: ParamId,
    head_b: ParamId,
}

fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let lim = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-lim..lim)).collect();
    Tensor::new(&[fan_in, fan_out], data).expect("sized")
}

impl Predictor {
    /// Fresh model. Weight matrices are Xavier-uniform, biases zero, layer
    /// norms identity; the dynamic-offset layer and the regression head
    /// start at zero so an untrained model predicts no motion.
    pub fn new(config: PredictorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let hidden = d * config.ffn_mult;
        let mut s = ParamStore::new();
        let embed_w = s.add("embed.w", xavier(&mut rng, TOKEN_DIM, d))?;
        let embed_b = s.add("embed.b", Tensor::zeros(&[d]))?;
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = |n: &str| format!("layer{l}.{n}");
            let attn = if config.enable_mhsa {
                Some(AttnIds {
                    wq: s.add(p("attn.wq"), xavier(&mut rng, d, d))?,
                    bq: s.add(p("attn.bq"), Tensor::zeros(&[d]))?,
                    wk: s.add(p("attn.wk"), xavier(&mut rng, d, d))?,
                    bk: s.add(p("attn.bk"), Tensor::zeros(&[d]))?,
                    wv: s.add(p("attn.wv"), xavier(&mut rng, d, d))?,
                    bv: s.add(p("attn.bv"), Tensor::zeros(&[d]))?,
                    wo: s.add(p("attn.wo"), xavier(&mut rng, d, d))?,
                    bo: s.add(p("attn.bo"), Tensor::zeros(&[d]))?,
                })
            } else {
                None
            };
            let dymlp = if config.enable_dymlp {
                Some(DyMlpIds {
                    off_w: s.add(p("dymlp.offset_w"), Tensor::zeros(&[d, d]))?,
                    off_b: s.add(p("dymlp.offset_b"), Tensor::zeros(&[d]))?,
                    w: s.add(p("dymlp.w"), xavier(&mut rng, d, d))?,
                    b: s.add(p("dymlp.b"), Tensor::zeros(&[d]))?,
                    gate_i: s.add(p("dymlp.gate_identity"), xavier(&mut rng, d, d))?,
                    gate_t: s.add(p("dymlp.gate_dynamic"), xavier(&mut rng, d, d))?,
                })
            } else {
                None
            };
            layers.push(LayerIds {
                attn,
                dymlp,
                ln1_g: s.add(p("ln1.gain"), Tensor::full(&[d], 1.0))?,
                ln1_b: s.add(p("ln1.bias"), Tensor::zeros(&[d]))?,
                ffn_w1: s.add(p("ffn.w1"), xavier(&mut rng, d, hidden))?,
                ffn_b1: s.add(p("ffn.b1"), Tensor::zeros(&[hidden]))?,
                ffn_w2: s.add(p("ffn.w2"), xavier(&mut rng, hidden, d))?,
                ffn_b2: s.add(p("ffn.b2"), Tensor::zeros(&[d]))?,
                ln2_g: s.add(p("ln2.gain"), Tensor::full(&[d], 1.0))?,
                ln2_b: s.add(p("ln2.bias"), Tensor::zeros(&[d]))?,
            });
        }
        let head_w = s.add("head.w", Tensor::zeros(&[d, 4]))?;
        let head_b = s.add("head.b", Tensor::zeros(&[4]))?;
        Ok(Self { config, store: s, embed_w, embed_b, layers, head_w, head_b })
    }

    pub fn config(&self) -> &PredictorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Replace every parameter with uniform noise in `[-scale, scale]`
    /// (layer-norm gains around 1). Used by gradient checks so that no
    /// parameter sits at a degenerate zero.
    pub fn randomize(&mut self, seed: u64, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<ParamId> = self.store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let p = self.store.get_mut(id);
            let gain = p.name.ends_with(".gain");
            for v in p.tensor.data_mut() {
                *v = rng.gen_range(-scale..scale) + if gain { 1.0 } else { 0.0 };
            }
        }
    }

    /// Overwrite a parameter by name.
    pub fn set_param(&mut self, name: &str, data: &[f64]) -> Result<()> {
        let id = self.store.by_name(name).ok_or_else(|| Error::Config(format!("no parameter {name}")))?;
        let t = &mut self.store.get_mut(id).tensor;
        if t.len() != data.len() {
            return Err(Error::Shape(format!("{name}: {:?} vs {} values", t.shape(), data.len())));
        }
        t.data_mut().copy_from_slice(data);
        Ok(())
    }

    fn check_windows(&self, windows: &[TrajectoryWindow]) -> Result<()> {
        if windows.is_empty() {
            return Err(Error::Precondition("empty batch".into()));
        }
        for w in windows {
            if w.len() < 2 || w.len() > self.config.n_past {
                return Err(Error::Precondition(format!(
                    "window length {} outside [2, {}]",
                    w.len(),
                    self.config.n_past
                )));
            }
        }
        Ok(())
    }

    /// Token features for a batch, `[rows × 9]`, with the delta channels scaled.
    pub fn token_matrix(&self, windows: &[TrajectoryWindow]) -> (Tensor, Segments) {
        let segs = Segments::from_lengths(&windows.iter().map(|w| w.len()).collect::<Vec<_>>());
        let mut data = Vec::with_capacity(segs.total_rows() * TOKEN_DIM);
        for w in windows {
            for t in w.tokens() {
                let mut a = t.to_array();
                a[5..].iter_mut().for_each(|v| *v *= self.config.delta_scale);
                data.extend_from_slice(&a);
            }
        }
        (Tensor::new(&[segs.total_rows(), TOKEN_DIM], data).expect("sized"), segs)
    }

    /// Linear token embedding plus sinusoidal position codes.
    pub fn embed(&self, g: &mut Graph, windows: &[TrajectoryWindow]) -> Result<(Var, Segments)> {
        self.check_windows(windows)?;
        let (tokens, segs) = self.token_matrix(windows);
        let d = self.config.d_model;
        let pe: Vec<f64> = segs.local_positions().into_iter().flat_map(|p| positional_encoding(p, d)).collect();
        let x = g.input(tokens);
        let w = g.param(&self.store, self.embed_w);
        let b = g.param(&self.store, self.embed_b);
        let e = g.linear(x, w, Some(b))?;
        let pe = g.input(Tensor::new(&[segs.total_rows(), d], pe)?);
        Ok((g.add(e, pe)?, segs))
    }

    /// Multi-head self-attention of layer `layer` over each window's own tokens.
    pub fn mhsa(&self, g: &mut Graph, e: Var, segs: &Segments, layer: usize) -> Result<Var> {
        let ids = self.layers[layer]
            .attn
            .ok_or_else(|| Error::Config("self-attention disabled in this model".into()))?;
        let st = &self.store;
        let lin = |g: &mut Graph, w: ParamId, b: ParamId| {
            let (w, b) = (g.param(st, w), g.param(st, b));
            g.linear(e, w, Some(b))
        };
        let q = lin(g, ids.wq, ids.bq)?;
        let k = lin(g, ids.wk, ids.bk)?;
        let v = lin(g, ids.wv, ids.bv)?;
        let heads = g.attention(q, k, v, segs, self.config.heads)?;
        let (wo, bo) = (g.param(st, ids.wo), g.param(st, ids.bo));
        g.linear(heads, wo, Some(bo))
    }

    /// Dynamic MLP of layer `layer`.
    pub fn dymlp(&self, g: &mut Graph, e: Var, segs: &Segments, layer: usize) -> Result<DyMlpVars> {
        let ids = self.layers[layer]
            .dymlp
            .ok_or_else(|| Error::Config("dynamic MLP disabled in this model".into()))?;
        let st = &self.store;
        let (ow, ob) = (g.param(st, ids.off_w), g.param(st, ids.off_b));
        let delta = g.linear(e, ow, Some(ob))?;
        let positions = g.offset_positions(delta, segs)?;
        let gathered = g.gather_interp(e, positions, segs)?;
        let (w, b) = (g.param(st, ids.w), g.param(st, ids.b));
        let dynamic = g.linear(gathered, w, Some(b))?;
        let sum = g.add(dynamic, e)?;
        let mean = g.scale(sum, 0.5);
        let (wi, wt) = (g.param(st, ids.gate_i), g.param(st, ids.gate_t));
        let score_i = g.matmul(mean, wi)?;
        let score_t = g.matmul(mean, wt)?;
        // Two-way softmax per channel: w_T = σ(s_T − s_I), w_I = 1 − w_T.
        let diff = g.sub(score_t, score_i)?;
        let gate_dynamic = g.sigmoid(diff);
        let gate_identity = g.affine(gate_dynamic, -1.0, 1.0);
        let a = g.mul(gate_dynamic, dynamic)?;
        let c = g.mul(gate_identity, e)?;
        let out = g.add(a, c)?;
        Ok(DyMlpVars { positions, gathered, dynamic, gate_identity, gate_dynamic, out })
    }

    fn maybe_dropout(&self, g: &mut Graph, x: Var, mode: &mut ForwardMode) -> Result<Var> {
        let rate = self.config.dropout;
        match mode.dropout_rng.as_deref_mut() {
            Some(rng) if rate > 0.0 => {
                let keep: Vec<bool> = (0..g.value(x).len()).map(|_| rng.gen::<f64>() >= rate).collect();
                g.dropout(x, &keep, rate)
            }
            _ => Ok(x),
        }
    }

    /// One encoder layer: `Ê = LN(MHSA(E) + DyMLP(E)) + E`, `out = LN(FFN(Ê)) + Ê`.
    pub fn encoder_layer(
        &self,
        g: &mut Graph,
        e: Var,
        segs: &Segments,
        layer: usize,
        mode: &mut ForwardMode,
    ) -> Result<Var> {
        let ids = self.layers[layer];
        let st = &self.store;
        let mix = match (ids.attn.is_some(), ids.dymlp.is_some()) {
            (true, true) => {
                let a = self.mhsa(g, e, segs, layer)?;
                let m = self.dymlp(g, e, segs, layer)?.out;
                g.add(a, m)?
            }
            (true, false) => self.mhsa(g, e, segs, layer)?,
            (false, true) => self.dymlp(g, e, segs, layer)?.out,
            (false, false) => unreachable!("validated config"),
        };
        let mix = self.maybe_dropout(g, mix, mode)?;
        let (g1, b1) = (g.param(st, ids.ln1_g), g.param(st, ids.ln1_b));
        let normed = g.layernorm(mix, g1, b1)?;
        let e_hat = g.add(normed, e)?;
        let (w1, fb1) = (g.param(st, ids.ffn_w1), g.param(st, ids.ffn_b1));
        let hidden = g.linear(e_hat, w1, Some(fb1))?;
        let hidden = g.gelu(hidden);
        let (w2, fb2) = (g.param(st, ids.ffn_w2), g.param(st, ids.ffn_b2));
        let ffn = g.linear(hidden, w2, Some(fb2))?;
        let ffn = self.maybe_dropout(g, ffn, mode)?;
        let (g2, b2) = (g.param(st, ids.ln2_g), g.param(st, ids.ln2_b));
        let normed = g.layernorm(ffn, g2, b2)?;
        g.add(normed, e_hat)
    }

    /// Full forward pass. Returns `[batch × 4]` offsets in normalized units.
    pub fn forward(&self, g: &mut Graph, windows: &[TrajectoryWindow], mode: &mut ForwardMode) -> Result<Var> {
        let (mut e, segs) = self.embed(g, windows)?;
        for l in 0..self.layers.len() {
            e = self.encoder_layer(g, e, &segs, l, mode)?;
        }
        let pooled = g.pool(e, &segs, self.config.pooling)?;
        let (hw, hb) = (g.param(&self.store, self.head_w), g.param(&self.store, self.head_b));
        let out = g.linear(pooled, hw, Some(hb))?;
        Ok(g.scale(out, 1.0 / self.config.delta_scale))
    }

    pub fn predict_offset(&self, window: &TrajectoryWindow) -> Result<Offset4> {
        Ok(self.predict_batch(std::slice::from_ref(window))?[0])
    }

    pub fn predict_batch(&self, windows: &[TrajectoryWindow]) -> Result<Vec<Offset4>> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, windows, &mut ForwardMode::eval())?;
        Ok(g.value(out).data().chunks(4).map(|c| Offset4::from_array([c[0], c[1], c[2], c[3]])).collect())
    }

    /// Smooth-L1 loss of a batch against `targets`, with parameter gradients
    /// accumulated on the returned graph.
    pub fn loss_graph(
        &self,
        windows: &[TrajectoryWindow],
        targets: &[Offset4],
        mode: &mut ForwardMode,
        weight: f64,
    ) -> Result<(f64, Graph)> {
        if windows.len() != targets.len() {
            return Err(Error::Shape(format!("{} windows vs {} targets", windows.len(), targets.len())));
        }
        let mut g = Graph::new();
        let pred = self.forward(&mut g, windows, mode)?;
        let t: Vec<f64> = targets.iter().flat_map(|o| o.to_array()).collect();
        let target = g.input(Tensor::new(&[targets.len(), 4], t)?);
        let loss = g.smooth_l1_loss(pred, target)?;
        let value = g.value(loss).item();
        let scaled = g.scale(loss, weight);
        g.backward(scaled)?;
        Ok((value, g))
    }
}

/// Mean over the batch of the summed per-component smooth-L1.
pub fn smooth_l1_loss(pred: &[Offset4], target: &[Offset4]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::Shape(format!("{} predictions vs {} targets", pred.len(), target.len())));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = pred
        .iter()
        .zip(target)
        .flat_map(|(p, t)| p.to_array().into_iter().zip(t.to_array()).map(|(a, b)| crate::tensor::smooth_l1(a - b)))
        .sum();
    Ok(s / pred.len() as f64)
}
