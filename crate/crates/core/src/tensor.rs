//! Dense tensors and a reverse-mode tape.
//!
//! The tape records a fixed set of operations on row-major `f64` buffers.
//! Batches of variable-length sequences are stored stacked along the row
//! axis; [`Segments`] tells the sequence-aware operations (attention,
//! interpolated gather, pooling) where each sequence starts and ends.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    #[serde(skip)]
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!("shape {shape:?} needs {n} elements, got {}", data.len())));
        }
        Ok(Self { shape: shape.to_vec(), data, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()], grad: None }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self { shape: shape.to_vec(), data: vec![v; shape.iter().product()], grad: None }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![], data: vec![v], grad: None }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::new(&[rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows of a 2-D view: every leading axis is folded into rows.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            _ => self.data.len() / self.cols().max(1),
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }
}

/// Row ranges of the sequences stacked in a tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segments {
    spans: Vec<(usize, usize)>,
    total: usize,
}

impl Segments {
    pub fn from_lengths(lengths: &[usize]) -> Self {
        let mut spans = Vec::with_capacity(lengths.len());
        let mut start = 0;
        for &n in lengths {
            spans.push((start, n));
            start += n;
        }
        Self { spans, total: start }
    }

    pub fn single(n: usize) -> Self {
        Self::from_lengths(&[n])
    }

    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }

    pub fn total_rows(&self) -> usize {
        self.total
    }

    pub fn spans(&self) -> &[(usize, usize)] {
        &self.spans
    }

    /// Position of every row inside its own segment.
    pub fn local_positions(&self) -> Vec<usize> {
        self.spans.iter().flat_map(|&(_, n)| 0..n).collect()
    }
}

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Registry owning every parameter of a model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.params.push(Parameter { name, tensor, trainable: true });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.tensor.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.tensor.grad = None;
        }
    }

    /// Add a gradient buffer into the stored gradient of `id`.
    pub fn accumulate(&mut self, id: ParamId, grad: &[f64]) {
        let t = &mut self.params[id.0].tensor;
        let n = t.data.len();
        let g = t.grad.get_or_insert_with(|| vec![0.0; n]);
        for (a, b) in g.iter_mut().zip(grad) {
            *a += b;
        }
    }

    /// Pull every parameter gradient a graph holds after [`Graph::backward`].
    pub fn accumulate_from(&mut self, graph: &Graph) {
        for (id, g) in graph.param_grads() {
            self.accumulate(id, g);
        }
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Mean,
    Last,
    Sum,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Affine(Var, f64),
    Concat(Vec<Var>),
    SliceCols(Var, usize),
    Transpose(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gelu(Var),
    Sigmoid(Var),
    Dropout(Var, Vec<f64>),
    Positions { delta: Var, pass: Vec<bool> },
    GatherInterp { e: Var, idx: Var, segs: Segments },
    Attention { q: Var, k: Var, v: Var, segs: Segments, heads: usize, probs: Vec<f64> },
    Pool { x: Var, segs: Segments, kind: PoolKind },
    Sum(Var),
    SmoothL1 { pred: Var, target: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// Recording of one forward computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

/// `c = a·b + beta·c` on row-major buffers; `ta`/`tb` read the operand transposed.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64], beta: f64) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths were checked above and the strides stay inside them.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const LN_EPS: f64 = 1e-5;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad, param: None });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Constant input; no gradient is tracked for it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable leaf that is not a registered parameter.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Bind a stored parameter as a leaf of this graph.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        let mut value = p.tensor.clone();
        value.grad = None;
        let v = self.push(value, Op::Leaf, p.trainable);
        self.nodes[v.0].param = Some(id);
        v
    }

    /// Gradient accumulated on a leaf by previous [`Graph::backward`] calls.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.nodes.iter().enumerate().filter_map(|(i, n)| {
            let id = n.param?;
            let g = self.leaf_grads.get(i)?.as_deref()?;
            Some((id, g))
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.is_matrix() || !tb.is_matrix() || ta.shape[1] != tb.shape[0] {
            return Err(shape_err("matmul", &ta.shape, &tb.shape));
        }
        let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &ta.data, false, &tb.data, false, &mut out, 0.0);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor { shape: vec![m, n], data: out, grad: None }, Op::MatMul(a, b), ng))
    }

    fn zip(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(shape_err(name, &ta.shape, &tb.shape));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| f(*x, *y)).collect();
        let shape = ta.shape.clone();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor { shape, data, grad: None }, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Add a length-`cols` vector to every row.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let c = ta.cols();
        if tb.len() != c {
            return Err(shape_err("add_row", &ta.shape, &tb.shape));
        }
        let data = ta.data.chunks(c.max(1)).flat_map(|r| r.iter().zip(&tb.data).map(|(x, y)| x + y)).collect();
        let shape = ta.shape.clone();
        let ng = self.ng(a) || self.ng(bias);
        Ok(self.push(Tensor { shape, data, grad: None }, Op::AddRow(a, bias), ng))
    }

    /// `x·w + b` for a `[rows × in]` input, `[in × out]` weight and `[out]` bias.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    /// `scale·x + shift` elementwise.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let t = self.value(a);
        let data = t.data.iter().map(|x| scale * x + shift).collect();
        let shape = t.shape.clone();
        let ng = self.ng(a);
        self.push(Tensor { shape, data, grad: None }, Op::Affine(a, scale), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    /// Concatenate 2-D tensors along the column axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let rows = self.value(*first).rows();
        let mut cols = 0;
        for p in parts {
            let t = self.value(*p);
            if !t.is_matrix() || t.rows() != rows {
                return Err(shape_err("concat", &self.value(*first).shape, &t.shape));
            }
            cols += t.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        Ok(self.push(Tensor { shape: vec![rows, cols], data, grad: None }, Op::Concat(parts.to_vec()), ng))
    }

    /// Columns `start..start+len` of a 2-D tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        if !t.is_matrix() || start + len > t.cols() {
            return Err(Error::Shape(format!("slice_cols {start}..{} of {:?}", start + len, t.shape)));
        }
        let rows = t.rows();
        let data = (0..rows).flat_map(|r| t.row(r)[start..start + len].iter().copied()).collect();
        let ng = self.ng(a);
        Ok(self.push(Tensor { shape: vec![rows, len], data, grad: None }, Op::SliceCols(a, start), ng))
    }

    /// Split into equal column blocks.
    pub fn split_cols(&mut self, a: Var, parts: usize) -> Result<Vec<Var>> {
        let c = self.value(a).cols();
        if parts == 0 || !c.is_multiple_of(parts) {
            return Err(Error::Shape(format!("cannot split {c} columns into {parts}")));
        }
        let w = c / parts;
        (0..parts).map(|i| self.slice_cols(a, i * w, w)).collect()
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if !t.is_matrix() {
            return Err(Error::Shape(format!("transpose of {:?}", t.shape)));
        }
        let (r, c) = (t.shape[0], t.shape[1]);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = t.data[i * c + j];
            }
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor { shape: vec![c, r], data, grad: None }, Op::Transpose(a), ng))
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let c = t.cols().max(1);
        let mut data = t.data.clone();
        for row in data.chunks_mut(c) {
            softmax_in_place(row);
        }
        let shape = t.shape.clone();
        let ng = self.ng(a);
        self.push(Tensor { shape, data, grad: None }, Op::Softmax(a), ng)
    }

    /// Per-row normalization to zero mean and unit variance, then `gain·x̂ + bias`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let t = self.value(x);
        let c = t.cols();
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(shape_err("layernorm", &t.shape, &self.value(gain).shape));
        }
        let rows = t.rows();
        let mut xhat = vec![0.0; t.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = t.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = inv;
            for j in 0..c {
                xhat[r * c + j] = (row[j] - mean) * inv;
            }
        }
        let (g, b) = (&self.value(gain).data, &self.value(bias).data);
        let data = xhat.iter().enumerate().map(|(i, v)| v * g[i % c] + b[i % c]).collect();
        let shape = t.shape.clone();
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(Tensor { shape, data, grad: None }, Op::LayerNorm { x, gain, bias, xhat, inv_std }, ng))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = t.data.iter().map(|&x| gelu(x)).collect();
        let shape = t.shape.clone();
        let ng = self.ng(a);
        self.push(Tensor { shape, data, grad: None }, Op::Gelu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = t.data.iter().map(|&x| sigmoid(x)).collect();
        let shape = t.shape.clone();
        let ng = self.ng(a);
        self.push(Tensor { shape, data, grad: None }, Op::Sigmoid(a), ng)
    }

    /// Inverted dropout with an explicit keep mask (`true` keeps the element).
    pub fn dropout(&mut self, a: Var, keep: &[bool], rate: f64) -> Result<Var> {
        let t = self.value(a);
        if keep.len() != t.len() {
            return Err(Error::Shape(format!("dropout mask of {} for {:?}", keep.len(), t.shape)));
        }
        let s = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = keep.iter().map(|&k| if k { s } else { 0.0 }).collect();
        let data = t.data.iter().zip(&mask).map(|(x, m)| x * m).collect();
        let shape = t.shape.clone();
        let ng = self.ng(a);
        Ok(self.push(Tensor { shape, data, grad: None }, Op::Dropout(a, mask), ng))
    }

    /// Sampling positions `local_row + delta`, clamped into each segment's
    /// `[0, len-1]`. The gradient passes only where no clamping happened.
    pub fn offset_positions(&mut self, delta: Var, segs: &Segments) -> Result<Var> {
        let t = self.value(delta);
        if t.rows() != segs.total_rows() {
            return Err(Error::Shape(format!("positions: {:?} vs {} segment rows", t.shape, segs.total_rows())));
        }
        let c = t.cols();
        let mut data = vec![0.0; t.len()];
        let mut pass = vec![false; t.len()];
        for &(start, n) in segs.spans() {
            let hi = (n - 1) as f64;
            for i in 0..n {
                for j in 0..c {
                    let k = (start + i) * c + j;
                    let raw = i as f64 + t.data[k];
                    pass[k] = (0.0..=hi).contains(&raw);
                    data[k] = if raw.is_nan() { i as f64 } else { raw.clamp(0.0, hi) };
                }
            }
        }
        let shape = t.shape.clone();
        let ng = self.ng(delta);
        Ok(self.push(Tensor { shape, data, grad: None }, Op::Positions { delta, pass }, ng))
    }

    /// `out[i, j]` = `e[·, j]` linearly interpolated at row position `idx[i, j]`
    /// of the segment containing row `i`. Positions must already lie in `[0, len-1]`.
    pub fn gather_interp(&mut self, e: Var, idx: Var, segs: &Segments) -> Result<Var> {
        let (te, ti) = (self.value(e), self.value(idx));
        if te.shape != ti.shape || te.rows() != segs.total_rows() {
            return Err(shape_err("gather_interp", &te.shape, &ti.shape));
        }
        let c = te.cols();
        let mut data = vec![0.0; te.len()];
        for &(start, n) in segs.spans() {
            for i in start..start + n {
                for j in 0..c {
                    let (lo, f) = interp_cell(ti.data[i * c + j], n);
                    let a = te.data[(start + lo) * c + j];
                    let b = if f > 0.0 { te.data[(start + lo + 1) * c + j] } else { a };
                    data[i * c + j] = (1.0 - f) * a + f * b;
                }
            }
        }
        let shape = te.shape.clone();
        let ng = self.ng(e) || self.ng(idx);
        Ok(self.push(Tensor { shape, data, grad: None }, Op::GatherInterp { e, idx, segs: segs.clone() }, ng))
    }

    /// Multi-head scaled dot-product self-attention inside every segment.
    /// `q`, `k`, `v` are `[rows × d]`; head `h` uses columns `h·d/heads..`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, segs: &Segments, heads: usize) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        if tq.shape != tk.shape || tq.shape != tv.shape || tq.rows() != segs.total_rows() {
            return Err(shape_err("attention", &tq.shape, &tk.shape));
        }
        let d = tq.cols();
        if heads == 0 || d % heads != 0 {
            return Err(Error::Shape(format!("attention: width {d} not divisible by {heads} heads")));
        }
        let dk = d / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut out = vec![0.0; tq.len()];
        let mut probs = Vec::with_capacity(segs.spans().iter().map(|s| s.1 * s.1).sum::<usize>() * heads);
        for &(start, n) in segs.spans() {
            for h in 0..heads {
                let off = h * dk;
                for i in 0..n {
                    let qi = &tq.data[(start + i) * d + off..(start + i) * d + off + dk];
                    let base = probs.len();
                    for j in 0..n {
                        let kj = &tk.data[(start + j) * d + off..(start + j) * d + off + dk];
                        probs.push(dot(qi, kj) * scale);
                    }
                    softmax_in_place(&mut probs[base..]);
                    let o = &mut out[(start + i) * d + off..(start + i) * d + off + dk];
                    for j in 0..n {
                        let p = probs[base + j];
                        let vj = &tv.data[(start + j) * d + off..(start + j) * d + off + dk];
                        for (oo, vv) in o.iter_mut().zip(vj) {
                            *oo += p * vv;
                        }
                    }
                }
            }
        }
        let shape = tq.shape.clone();
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        let op = Op::Attention { q, k, v, segs: segs.clone(), heads, probs };
        Ok(self.push(Tensor { shape, data: out, grad: None }, op, ng))
    }

    /// Reduce each segment to one row.
    pub fn pool(&mut self, x: Var, segs: &Segments, kind: PoolKind) -> Result<Var> {
        let t = self.value(x);
        if t.rows() != segs.total_rows() || segs.spans().iter().any(|s| s.1 == 0) {
            return Err(Error::Shape(format!("pool: {:?} vs segments {:?}", t.shape, segs.spans())));
        }
        let c = t.cols();
        let mut data = vec![0.0; segs.len() * c];
        for (s, &(start, n)) in segs.spans().iter().enumerate() {
            let out = &mut data[s * c..(s + 1) * c];
            match kind {
                PoolKind::Last => out.copy_from_slice(t.row(start + n - 1)),
                PoolKind::Sum | PoolKind::Mean => {
                    for r in start..start + n {
                        for (o, v) in out.iter_mut().zip(t.row(r)) {
                            *o += v;
                        }
                    }
                    if kind == PoolKind::Mean {
                        out.iter_mut().for_each(|o| *o /= n as f64);
                    }
                }
            }
        }
        let ng = self.ng(x);
        let op = Op::Pool { x, segs: segs.clone(), kind };
        Ok(self.push(Tensor { shape: vec![segs.len(), c], data, grad: None }, op, ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    /// Smooth-L1 summed over columns and averaged over rows.
    pub fn smooth_l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (tp, tt) = (self.value(pred), self.value(target));
        if tp.shape != tt.shape {
            return Err(shape_err("smooth_l1_loss", &tp.shape, &tt.shape));
        }
        let rows = tp.rows().max(1) as f64;
        let s: f64 = tp.data.iter().zip(&tt.data).map(|(p, t)| smooth_l1(p - t)).sum::<f64>() / rows;
        let ng = self.ng(pred) || self.ng(target);
        Ok(self.push(Tensor::scalar(s), Op::SmoothL1 { pred, target }, ng))
    }

    /// Reverse pass from a scalar. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!("backward needs a scalar, got {:?}", self.value(loss).shape)));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        self.leaf_grads.resize_with(self.nodes.len(), || None);
        for (i, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                match &mut self.leaf_grads[i] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let n = self.nodes[v.0].value.len();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                acc(*a, &mut |ga| gemm(m, n, k, g, false, &tb.data, true, ga, 1.0));
                acc(*b, &mut |gb| gemm(k, m, n, &ta.data, true, g, false, gb, 1.0));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                acc(*a, &mut |ga| {
                    for ((x, gg), bb) in ga.iter_mut().zip(g).zip(&tb.data) {
                        *x += gg * bb;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((x, gg), aa) in gb.iter_mut().zip(g).zip(&ta.data) {
                        *x += gg * aa;
                    }
                });
            }
            Op::AddRow(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                let c = out.cols().max(1);
                acc(*b, &mut |gb| {
                    for row in g.chunks(c) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Affine(a, s) => acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y)),
            Op::Concat(parts) => {
                let rows = out.rows();
                let total = out.cols();
                let mut off = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    acc(*p, &mut |gp| {
                        for r in 0..rows {
                            add_into(&mut gp[r * w..(r + 1) * w], &g[r * total + off..r * total + off + w]);
                        }
                    });
                    off += w;
                }
            }
            Op::SliceCols(a, start) => {
                let w = out.cols();
                let total = self.value(*a).cols();
                acc(*a, &mut |ga| {
                    for r in 0..out.rows() {
                        add_into(&mut ga[r * total + start..r * total + start + w], &g[r * w..(r + 1) * w]);
                    }
                });
            }
            Op::Transpose(a) => {
                let (r, c) = (out.shape[0], out.shape[1]);
                acc(*a, &mut |ga| {
                    for i in 0..r {
                        for j in 0..c {
                            ga[j * r + i] += g[i * c + j];
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let c = out.cols().max(1);
                acc(*a, &mut |ga| {
                    for ((gx, gy), y) in ga.chunks_mut(c).zip(g.chunks(c)).zip(out.data.chunks(c)) {
                        let s = dot(gy, y);
                        for j in 0..c {
                            gx[j] += y[j] * (gy[j] - s);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let c = out.cols();
                let gv = &self.value(*gain).data;
                acc(*x, &mut |gx| {
                    for (r, inv) in inv_std.iter().enumerate() {
                        let gy = &g[r * c..(r + 1) * c];
                        let xh = &xhat[r * c..(r + 1) * c];
                        let dxh: Vec<f64> = gy.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let s1: f64 = dxh.iter().sum();
                        let s2 = dot(&dxh, xh);
                        for j in 0..c {
                            gx[r * c + j] += inv / c as f64 * (c as f64 * dxh[j] - s1 - xh[j] * s2);
                        }
                    }
                });
                acc(*gain, &mut |gg| {
                    for (gy, xh) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg[j] += gy[j] * xh[j];
                        }
                    }
                });
                acc(*bias, &mut |gb| {
                    for gy in g.chunks(c) {
                        add_into(gb, gy);
                    }
                });
            }
            Op::Gelu(a) => {
                let x = &self.value(*a).data;
                acc(*a, &mut |ga| {
                    for ((o, gg), xx) in ga.iter_mut().zip(g).zip(x) {
                        *o += gg * gelu_grad(*xx);
                    }
                });
            }
            Op::Sigmoid(a) => acc(*a, &mut |ga| {
                for ((o, gg), y) in ga.iter_mut().zip(g).zip(&out.data) {
                    *o += gg * y * (1.0 - y);
                }
            }),
            Op::Dropout(a, mask) => acc(*a, &mut |ga| {
                for ((o, gg), m) in ga.iter_mut().zip(g).zip(mask) {
                    *o += gg * m;
                }
            }),
            Op::Positions { delta, pass } => acc(*delta, &mut |gd| {
                for ((o, gg), p) in gd.iter_mut().zip(g).zip(pass) {
                    if *p {
                        *o += gg;
                    }
                }
            }),
            Op::GatherInterp { e, idx, segs } => {
                let (te, ti) = (self.value(*e), self.value(*idx));
                let c = te.cols();
                acc(*e, &mut |ge| {
                    for &(start, n) in segs.spans() {
                        for i in start..start + n {
                            for j in 0..c {
                                let (lo, f) = interp_cell(ti.data[i * c + j], n);
                                let gg = g[i * c + j];
                                ge[(start + lo) * c + j] += (1.0 - f) * gg;
                                if f > 0.0 {
                                    ge[(start + lo + 1) * c + j] += f * gg;
                                }
                            }
                        }
                    }
                });
                acc(*idx, &mut |gi| {
                    for &(start, n) in segs.spans() {
                        if n < 2 {
                            continue;
                        }
                        for i in start..start + n {
                            for j in 0..c {
                                let (lo, _) = interp_cell(ti.data[i * c + j], n);
                                let slope = te.data[(start + lo + 1) * c + j] - te.data[(start + lo) * c + j];
                                gi[i * c + j] += slope * g[i * c + j];
                            }
                        }
                    }
                });
            }
            Op::Attention { q, k, v, segs, heads, probs } => {
                self.attention_backward(*q, *k, *v, segs, *heads, probs, g, grads);
            }
            Op::Pool { x, segs, kind } => {
                let c = out.cols();
                acc(*x, &mut |gx| {
                    for (s, &(start, n)) in segs.spans().iter().enumerate() {
                        let gs = &g[s * c..(s + 1) * c];
                        match kind {
                            PoolKind::Last => add_into(&mut gx[(start + n - 1) * c..(start + n) * c], gs),
                            PoolKind::Sum | PoolKind::Mean => {
                                let w = if *kind == PoolKind::Mean { 1.0 / n as f64 } else { 1.0 };
                                for r in start..start + n {
                                    for (o, gg) in gx[r * c..(r + 1) * c].iter_mut().zip(gs) {
                                        *o += w * gg;
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0])),
            Op::SmoothL1 { pred, target } => {
                let (tp, tt) = (self.value(*pred), self.value(*target));
                let w = g[0] / tp.rows().max(1) as f64;
                let d: Vec<f64> = tp.data.iter().zip(&tt.data).map(|(p, t)| w * smooth_l1_grad(p - t)).collect();
                acc(*pred, &mut |gp| add_into(gp, &d));
                acc(*target, &mut |gt| gt.iter_mut().zip(&d).for_each(|(x, y)| *x -= y));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        segs: &Segments,
        heads: usize,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let d = tq.cols();
        let dk = d / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut gq = vec![0.0; tq.len()];
        let mut gk = vec![0.0; tq.len()];
        let mut gv = vec![0.0; tq.len()];
        let mut pi = 0;
        for &(start, n) in segs.spans() {
            for h in 0..heads {
                let off = h * dk;
                let at = |r: usize| (start + r) * d + off;
                for i in 0..n {
                    let p = &probs[pi..pi + n];
                    pi += n;
                    let go = &g[at(i)..at(i) + dk];
                    // dP_ij = go · v_j ; dS = P ⊙ (dP - Σ dP⊙P)
                    let dp: Vec<f64> = (0..n).map(|j| dot(go, &tv.data[at(j)..at(j) + dk])).collect();
                    let s = dot(&dp, p);
                    for j in 0..n {
                        for (x, y) in gv[at(j)..at(j) + dk].iter_mut().zip(go) {
                            *x += p[j] * y;
                        }
                        let ds = p[j] * (dp[j] - s) * scale;
                        if ds != 0.0 {
                            for t in 0..dk {
                                gq[at(i) + t] += ds * tk.data[at(j) + t];
                                gk[at(j) + t] += ds * tq.data[at(i) + t];
                            }
                        }
                    }
                }
            }
        }
        for (var, gg) in [(q, gq), (k, gk), (v, gv)] {
            if self.nodes[var.0].needs_grad {
                let n = gg.len();
                add_into(grads[var.0].get_or_insert_with(|| vec![0.0; n]), &gg);
            }
        }
    }
}

fn add_into(a: &mut [f64], b: &[f64]) {
    a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}

/// Lower neighbour and fractional weight for an interpolated read at `p`
/// inside a segment of `n` rows.
fn interp_cell(p: f64, n: usize) -> (usize, f64) {
    if n < 2 {
        return (0, 0.0);
    }
    let lo = (p.floor().max(0.0) as usize).min(n - 2);
    (lo, (p - lo as f64).clamp(0.0, 1.0))
}

/// Adam optimizer constants and moment buffers.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let m = store.iter().map(|(_, p)| vec![0.0; p.tensor.len()]).collect::<Vec<_>>();
        Self { beta1, beta2, eps, v: m.clone(), m }
    }

    /// One bias-corrected Adam update using the gradients stored on each parameter.
    /// `step` counts from 1.
    pub fn step(&mut self, store: &mut ParamStore, step: u64, lr: f64) {
        assert!(step >= 1, "adam step counts from 1");
        let bc1 = 1.0 - self.beta1.powi(step as i32);
        let bc2 = 1.0 - self.beta2.powi(step as i32);
        for (i, p) in store.params.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let Some(g) = p.tensor.grad.as_ref() else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, gi), mi), vi) in p.tensor.data.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Warmup-then-inverse-sqrt learning rate:
/// `d_model^-0.5 · min(step^-0.5, step · warmup^-1.5)`.
pub fn warmup_lr(d_model: usize, warmup: u64, step: u64) -> f64 {
    let s = step.max(1) as f64;
    (d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * (warmup.max(1) as f64).powf(-1.5))
}
