use std::sync::Arc;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::masks::AttentionMask;
use crate::rng::Rng;

use super::kernels::{axpy, dot, gemm};
use super::params::{ParamGrads, ParamId, ParamStore};
use super::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;
const L2_NORM_EPS: f64 = 1e-12;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a custom op: `(inputs, output, output_grad) -> input_grads`.
pub type BackwardFn = Box<dyn Fn(&[&Tensor], &Tensor, &Tensor) -> Vec<Tensor> + Send + Sync>;

/// Compressed-row form of an [`AttentionMask`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnPattern {
    size: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
}

impl AttnPattern {
    /// Fails if a non-pad row allows no position at all.
    pub fn from_mask(mask: &AttentionMask) -> Result<Self> {
        let size = mask.size();
        let mut row_ptr = Vec::with_capacity(size + 1);
        let mut cols = Vec::new();
        row_ptr.push(0);
        for i in 0..size {
            let before = cols.len();
            cols.extend(mask.allowed_in_row(i));
            if cols.len() == before && !mask.is_pad_row(i) {
                return Err(Error::EmptyAttentionRow(i));
            }
            row_ptr.push(cols.len());
        }
        Ok(AttnPattern { size, row_ptr, cols })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    fn row(&self, i: usize) -> std::ops::Range<usize> {
        self.row_ptr[i]..self.row_ptr[i + 1]
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    SliceCols(Var, usize),
    Sum(Var),
    Mean(Var),
    MeanRows(Var, Vec<usize>),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, heads: usize, pattern: Arc<AttnPattern>, probs: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<f64>, count: usize },
    Mae { pred: Var, targets: Vec<Option<f64>>, count: usize },
    Dropout { x: Var, mask: Vec<f64> },
    Contrastive { a: Var, b: Var, coef: f64 },
    L2Normalize { x: Var, norms: Vec<f64> },
    Custom { inputs: Vec<Var>, backward: BackwardFn },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of one forward evaluation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) {
    assert_eq!(a.shape(), b.shape(), "{what}: shape mismatch");
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Leaf that does not receive gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that receives gradients.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        assert_eq!(k, tb.rows(), "matmul: {:?} x {:?}", ta.shape(), tb.shape());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::matrix(m, n, out), Op::MatMul(a, b), rg)
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op, what: &str) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, what);
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data).unwrap();
        let rg = self.rg(a) || self.rg(b);
        self.push(t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    /// `a[m, n] + b[1, n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let n = ta.cols();
        assert_eq!(tb.shape(), &[1, n], "add_row: bias shape");
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(n.max(1)) {
            for (x, y) in row.iter_mut().zip(tb.data()) {
                *x += y;
            }
        }
        let t = Tensor::matrix(ta.rows(), n, data);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::AddRow(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x * c).collect()).unwrap();
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, c), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x.max(0.0)).collect())
            .unwrap();
        let rg = self.rg(a);
        self.push(t, Op::Relu(a), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        assert!(parts.iter().all(|p| self.value(*p).rows() == rows), "concat_cols: row mismatch");
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(Tensor::matrix(rows, cols, data), Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols();
        assert!(parts.iter().all(|p| self.value(*p).cols() == cols), "concat_rows: col mismatch");
        let rows: usize = parts.iter().map(|p| self.value(*p).rows()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            data.extend_from_slice(self.value(*p).data());
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(Tensor::matrix(rows, cols, data), Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Row lookup: `out[r] = a[idx[r]]`. Gradients scatter back to the
    /// selected rows only.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let ta = self.value(a);
        let c = ta.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            assert!(i < ta.rows(), "gather_rows: index {i} out of {}", ta.rows());
            data.extend_from_slice(ta.row(i));
        }
        let rg = self.rg(a);
        self.push(Tensor::matrix(idx.len(), c, data), Op::GatherRows(a, idx.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let ta = self.value(a);
        assert!(start <= end && end <= ta.cols(), "slice_cols: bad range");
        let mut data = Vec::with_capacity(ta.rows() * (end - start));
        for r in 0..ta.rows() {
            data.extend_from_slice(&ta.row(r)[start..end]);
        }
        let rg = self.rg(a);
        self.push(Tensor::matrix(ta.rows(), end - start, data), Op::SliceCols(a, start), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let s = ta.data().iter().sum::<f64>() / ta.len() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Mean of the selected rows, shape `[1, cols]`.
    pub fn mean_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        assert!(!rows.is_empty(), "mean_rows: empty selection");
        let ta = self.value(a);
        let mut out = vec![0.0; ta.cols()];
        for &r in rows {
            axpy(1.0, ta.row(r), &mut out);
        }
        let inv = 1.0 / rows.len() as f64;
        out.iter_mut().for_each(|x| *x *= inv);
        let rg = self.rg(a);
        self.push(Tensor::row_vector(&out), Op::MeanRows(a, rows.to_vec()), rg)
    }

    /// Normalises each row to zero mean and unit variance, then applies
    /// `gain` and `bias` (both `[1, cols]`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let tx = self.value(x);
        let (m, c) = (tx.rows(), tx.cols());
        assert_eq!(self.value(gain).shape(), &[1, c]);
        assert_eq!(self.value(bias).shape(), &[1, c]);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; m * c];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * c];
        for r in 0..m {
            let row = tx.row(r);
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mu) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(Tensor::matrix(m, c, out), Op::LayerNorm { x, gain, bias, xhat, rstd }, rg)
    }

    /// Multi-head scaled dot-product attention restricted to `pattern`.
    /// Disallowed logits never enter the softmax, so their weights are
    /// exactly zero; rows with no allowed entries (padding) output zeros.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        pattern: Arc<AttnPattern>,
        heads: usize,
    ) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (l, d) = (tq.rows(), tq.cols());
        if tk.shape() != [l, d] || tv.shape() != [l, d] {
            return Err(Error::Shape(format!(
                "attention: q {:?}, k {:?}, v {:?}",
                tq.shape(),
                tk.shape(),
                tv.shape()
            )));
        }
        if pattern.size() != l {
            return Err(Error::Shape(format!("attention: mask size {} != {l}", pattern.size())));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Shape(format!("attention: {d} columns not divisible by {heads} heads")));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let nnz = pattern.nnz();
        let mut probs = vec![0.0; heads * nnz];
        let mut out = vec![0.0; l * d];
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        for h in 0..heads {
            let off = h * dh;
            let p = &mut probs[h * nnz..(h + 1) * nnz];
            for i in 0..l {
                let range = pattern.row(i);
                if range.is_empty() {
                    continue;
                }
                let qi = &qd[i * d + off..i * d + off + dh];
                let mut mx = f64::NEG_INFINITY;
                for e in range.clone() {
                    let j = pattern.cols[e];
                    let s = dot(qi, &kd[j * d + off..j * d + off + dh]) * scale;
                    p[e] = s;
                    mx = mx.max(s);
                }
                let mut z = 0.0;
                for e in range.clone() {
                    p[e] = (p[e] - mx).exp();
                    z += p[e];
                }
                let oi = &mut out[i * d + off..i * d + off + dh];
                for e in range {
                    p[e] /= z;
                    let j = pattern.cols[e];
                    axpy(p[e], &vd[j * d + off..j * d + off + dh], oi);
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            Tensor::matrix(l, d, out),
            Op::Attention { q, k, v, heads, pattern, probs },
            rg,
        ))
    }

    /// Mean over rows with a target of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let tl = self.value(logits);
        let (m, c) = (tl.rows(), tl.cols());
        if targets.len() != m {
            return Err(Error::Shape(format!("cross_entropy: {} targets for {m} rows", targets.len())));
        }
        let mut probs = vec![0.0; m * c];
        let mut total = 0.0;
        let mut count = 0usize;
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t >= c {
                return Err(Error::Shape(format!("cross_entropy: target {t} >= {c} classes")));
            }
            let row = tl.row(r);
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - mx).exp()).sum();
            let lse = mx + z.ln();
            total += lse - row[t];
            for j in 0..c {
                probs[r * c + j] = (row[j] - lse).exp();
            }
            count += 1;
        }
        if count == 0 {
            return Err(Error::NoValidPositions);
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(total / count as f64),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs, count },
            rg,
        ))
    }

    /// Mean absolute error over rows with a target; `pred` is `[n, 1]`.
    /// The subgradient at an exact tie is zero.
    pub fn mae(&mut self, pred: Var, targets: &[Option<f64>]) -> Result<Var> {
        let tp = self.value(pred);
        if tp.cols() != 1 || tp.rows() != targets.len() {
            return Err(Error::Shape(format!(
                "mae: prediction {:?} vs {} targets",
                tp.shape(),
                targets.len()
            )));
        }
        let mut total = 0.0;
        let mut count = 0;
        for (p, t) in tp.data().iter().zip(targets) {
            if let Some(t) = t {
                total += (p - t).abs();
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::NoValidPositions);
        }
        let rg = self.rg(pred);
        Ok(self.push(
            Tensor::scalar(total / count as f64),
            Op::Mae { pred, targets: targets.to_vec(), count },
            rg,
        ))
    }

    /// Inverted dropout; the identity when `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut Rng) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let tx = self.value(x);
        let mask: Vec<f64> =
            (0..tx.len()).map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
        let data = tx.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let t = Tensor::new(tx.shape().to_vec(), data).unwrap();
        let rg = self.rg(x);
        self.push(t, Op::Dropout { x, mask }, rg)
    }

    /// Margin contrastive loss between two `[1, d]` embeddings:
    /// `‖a−b‖²` for a positive pair, `max(0, ε − ‖a−b‖)²` otherwise.
    pub fn contrastive(&mut self, a: Var, b: Var, same: bool, margin: f64) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, "contrastive");
        let sq: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        let (loss, coef) = if same {
            (sq, 2.0)
        } else {
            let dist = sq.sqrt();
            if dist < margin {
                let gap = margin - dist;
                // d/da (ε − ‖a−b‖)² = −2(ε − ‖a−b‖)(a−b)/‖a−b‖; zero subgradient at a == b
                let coef = if dist > 0.0 { -2.0 * gap / dist } else { 0.0 };
                (gap * gap, coef)
            } else {
                (0.0, 0.0)
            }
        };
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::scalar(loss), Op::Contrastive { a, b, coef }, rg)
    }

    /// Scales each row to unit Euclidean norm (`x / sqrt(‖x‖² + 1e-12)`).
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (m, c) = (t.rows(), t.cols());
        let mut out = t.data().to_vec();
        let mut norms = Vec::with_capacity(m);
        for row in out.chunks_mut(c.max(1)).take(m) {
            let n = (row.iter().map(|v| v * v).sum::<f64>() + L2_NORM_EPS).sqrt();
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let rg = self.rg(x);
        self.push(Tensor::matrix(m, c, out), Op::L2Normalize { x, norms }, rg)
    }

    /// User-defined op with an explicit backward rule.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        forward: impl FnOnce(&[&Tensor]) -> Tensor,
        backward: BackwardFn,
    ) -> Var {
        let vals: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
        let out = forward(&vals);
        let rg = inputs.iter().any(|v| self.rg(*v));
        self.push(out, Op::Custom { inputs: inputs.to_vec(), backward }, rg)
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward: output is not a scalar");
        self.backward_with(loss, Tensor::scalar(1.0))
    }

    /// Reverse pass seeded with an arbitrary output gradient.
    pub fn backward_with(&self, out: Var, seed: Tensor) -> Gradients {
        assert_eq!(seed.shape(), self.value(out).shape(), "backward_with: seed shape");
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(out) {
            return Gradients { grads };
        }
        grads[out.0] = Some(seed.into_data());
        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf | Op::Param(_)) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn buf<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.rg(v) {
            return None;
        }
        let n = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if let Some(ga) = self.buf(grads, *a) {
                    gemm(m, n, k, g, false, tb.data(), true, ga, true);
                }
                if let Some(gb) = self.buf(grads, *b) {
                    gemm(k, m, n, ta.data(), true, g, false, gb, true);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = self.buf(grads, *v) {
                        axpy(1.0, g, gv);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.buf(grads, *a) {
                    axpy(1.0, g, ga);
                }
                if let Some(gb) = self.buf(grads, *b) {
                    axpy(-1.0, g, gb);
                }
            }
            Op::AddRow(a, b) => {
                if let Some(ga) = self.buf(grads, *a) {
                    axpy(1.0, g, ga);
                }
                let n = self.value(*b).len();
                if let Some(gb) = self.buf(grads, *b) {
                    for row in g.chunks(n.max(1)) {
                        axpy(1.0, row, gb);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.buf(grads, *a) {
                    for ((x, gi), y) in ga.iter_mut().zip(g).zip(tb.data()) {
                        *x += gi * y;
                    }
                }
                if let Some(gb) = self.buf(grads, *b) {
                    for ((x, gi), y) in gb.iter_mut().zip(g).zip(ta.data()) {
                        *x += gi * y;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.buf(grads, *a) {
                    axpy(*c, g, ga);
                }
            }
            Op::Relu(a) => {
                let ta = self.value(*a);
                if let Some(ga) = self.buf(grads, *a) {
                    for ((x, gi), v) in ga.iter_mut().zip(g).zip(ta.data()) {
                        if *v > 0.0 {
                            *x += gi;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut off = 0;
                for p in parts {
                    let c = self.value(*p).cols();
                    if let Some(gp) = self.buf(grads, *p) {
                        for (r, dst) in gp.chunks_mut(c.max(1)).enumerate() {
                            axpy(1.0, &g[r * total + off..r * total + off + c], dst);
                        }
                    }
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    if let Some(gp) = self.buf(grads, *p) {
                        axpy(1.0, &g[off..off + n], gp);
                    }
                    off += n;
                }
            }
            Op::GatherRows(a, idx) => {
                let c = self.value(*a).cols();
                if let Some(ga) = self.buf(grads, *a) {
                    for (r, &i) in idx.iter().enumerate() {
                        axpy(1.0, &g[r * c..(r + 1) * c], &mut ga[i * c..(i + 1) * c]);
                    }
                }
            }
            Op::SliceCols(a, start) => {
                let c = self.value(*a).cols();
                let w = node.value.cols();
                if let Some(ga) = self.buf(grads, *a) {
                    for r in 0..node.value.rows() {
                        axpy(1.0, &g[r * w..(r + 1) * w], &mut ga[r * c + start..r * c + start + w]);
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.buf(grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                if let Some(ga) = self.buf(grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0] / n);
                }
            }
            Op::MeanRows(a, rows) => {
                let c = self.value(*a).cols();
                let inv = 1.0 / rows.len() as f64;
                if let Some(ga) = self.buf(grads, *a) {
                    for &r in rows {
                        axpy(inv, g, &mut ga[r * c..(r + 1) * c]);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let c = node.value.cols();
                let gn = self.value(*gain).data().to_vec();
                if let Some(gb) = self.buf(grads, *bias) {
                    for row in g.chunks(c) {
                        axpy(1.0, row, gb);
                    }
                }
                if let Some(gg) = self.buf(grads, *gain) {
                    for (row, xh) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg[j] += row[j] * xh[j];
                        }
                    }
                }
                if let Some(gx) = self.buf(grads, *x) {
                    let mut dxhat = vec![0.0; c];
                    for (r, (row, xh)) in g.chunks(c).zip(xhat.chunks(c)).enumerate() {
                        for j in 0..c {
                            dxhat[j] = row[j] * gn[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / c as f64;
                        let mean_dx = dot(&dxhat, xh) / c as f64;
                        let dst = &mut gx[r * c..(r + 1) * c];
                        for j in 0..c {
                            dst[j] += rstd[r] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                }
            }
            Op::Attention { q, k, v, heads, pattern, probs } => {
                self.attention_backward(*q, *k, *v, *heads, pattern, probs, g, grads)
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                let c = self.value(*logits).cols();
                let scale = g[0] / *count as f64;
                if let Some(gl) = self.buf(grads, *logits) {
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = t else { continue };
                        let dst = &mut gl[r * c..(r + 1) * c];
                        for j in 0..c {
                            dst[j] += scale * probs[r * c + j];
                        }
                        dst[*t] -= scale;
                    }
                }
            }
            Op::Mae { pred, targets, count } => {
                let tp = self.value(*pred);
                let scale = g[0] / *count as f64;
                if let Some(gp) = self.buf(grads, *pred) {
                    for ((dst, p), t) in gp.iter_mut().zip(tp.data()).zip(targets) {
                        if let Some(t) = t {
                            let s = p - t;
                            if s > 0.0 {
                                *dst += scale;
                            } else if s < 0.0 {
                                *dst -= scale;
                            }
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(gx) = self.buf(grads, *x) {
                    for ((dst, gi), m) in gx.iter_mut().zip(g).zip(mask) {
                        *dst += gi * m;
                    }
                }
            }
            Op::Contrastive { a, b, coef } => {
                let diff: Vec<f64> = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(self.value(*b).data())
                    .map(|(x, y)| x - y)
                    .collect();
                if let Some(ga) = self.buf(grads, *a) {
                    axpy(coef * g[0], &diff, ga);
                }
                if let Some(gb) = self.buf(grads, *b) {
                    axpy(-coef * g[0], &diff, gb);
                }
            }
            Op::L2Normalize { x, norms } => {
                let c = node.value.cols().max(1);
                if let Some(gx) = self.buf(grads, *x) {
                    for (r, n) in norms.iter().enumerate() {
                        let y = &node.value.data()[r * c..(r + 1) * c];
                        let gr = &g[r * c..(r + 1) * c];
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gx[r * c + j] += (gr[j] - y[j] * dot) / n;
                        }
                    }
                }
            }
            Op::Custom { inputs, backward } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let gout = Tensor::new(node.value.shape().to_vec(), g.to_vec()).unwrap();
                let gs = backward(&vals, &node.value, &gout);
                assert_eq!(gs.len(), inputs.len(), "custom backward: gradient count");
                for (v, gv) in inputs.iter().zip(gs) {
                    if let Some(dst) = self.buf(grads, *v) {
                        axpy(1.0, gv.data(), dst);
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        pattern: &AttnPattern,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (l, d) = (tq.rows(), tq.cols());
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let nnz = pattern.nnz();
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut gq = vec![0.0; l * d];
        let mut gk = vec![0.0; l * d];
        let mut gv = vec![0.0; l * d];
        let mut ds = vec![0.0; pattern.size().max(1)];
        for h in 0..heads {
            let off = h * dh;
            let p = &probs[h * nnz..(h + 1) * nnz];
            for i in 0..l {
                let range = pattern.row(i);
                if range.is_empty() {
                    continue;
                }
                let gi = &g[i * d + off..i * d + off + dh];
                let mut sum_pd = 0.0;
                for (slot, e) in range.clone().enumerate() {
                    let j = pattern.cols[e];
                    let dp = dot(gi, &vd[j * d + off..j * d + off + dh]);
                    axpy(p[e], gi, &mut gv[j * d + off..j * d + off + dh]);
                    ds[slot] = dp;
                    sum_pd += p[e] * dp;
                }
                let qi = &qd[i * d + off..i * d + off + dh];
                for (slot, e) in range.enumerate() {
                    let j = pattern.cols[e];
                    let dsc = p[e] * (ds[slot] - sum_pd) * scale;
                    axpy(dsc, &kd[j * d + off..j * d + off + dh], &mut gq[i * d + off..i * d + off + dh]);
                    axpy(dsc, qi, &mut gk[j * d + off..j * d + off + dh]);
                }
            }
        }
        for (var, local) in [(q, gq), (k, gk), (v, gv)] {
            if let Some(dst) = self.buf(grads, var) {
                axpy(1.0, &local, dst);
            }
        }
    }
}

/// Result of a reverse pass: gradients of leaves that require them.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v` as a tensor shaped like its value, zeros if it got none.
    pub fn wrt(&self, graph: &Graph, v: Var) -> Tensor {
        let shape = graph.value(v).shape().to_vec();
        match self.get(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).unwrap(),
            None => Tensor::zeros(&shape),
        }
    }

    /// Adds the gradients of every parameter leaf into `out`.
    pub fn accumulate_params(&self, graph: &Graph, out: &mut ParamGrads) {
        for (i, node) in graph.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &self.grads[i]) {
                out.accumulate(*id, g);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn l2_normalize_rows_and_gradient() {
        let r = &mut rng::seeded(5);
        let x = Tensor::randn(&[3, 4], 2.0, r);
        let mut g = Graph::new();
        let v = g.input(x.clone());
        let y = g.l2_normalize(v);
        for i in 0..3 {
            let n: f64 = g.value(y).row(i).iter().map(|a| a * a).sum();
            assert!(close(n, 1.0, 1e-10));
        }
        let rep = crate::diffcore::grad_check(&[x], |g, v| Ok(g.l2_normalize(v[0])), r).unwrap();
        assert!(rep.passed(), "{rep:?}");
    }

    #[test]
    fn attention_singleton_returns_v() {
        let mut g = Graph::new();
        let q = g.input(Tensor::matrix(1, 3, vec![0.3, -1.0, 2.0]));
        let k = g.input(Tensor::matrix(1, 3, vec![1.0, 0.5, 0.1]));
        let v = g.input(Tensor::matrix(1, 3, vec![4.0, 5.0, 6.0]));
        let pat = Arc::new(AttnPattern::from_mask(&AttentionMask::from_fn(1, |_, _| true)).unwrap());
        let o = g.attention(q, k, v, pat, 1).unwrap();
        assert_eq!(g.value(o).data(), &[4.0, 5.0, 6.0]);
    }

    #[test]
    fn attention_one_hot_row() {
        let r = &mut rng::seeded(3);
        let mut g = Graph::new();
        let q = g.input(Tensor::randn(&[4, 4], 1.0, r));
        let k = g.input(Tensor::randn(&[4, 4], 1.0, r));
        let v = g.input(Tensor::randn(&[4, 4], 1.0, r));
        let mask = AttentionMask::from_fn(4, |i, j| if i == 3 { j == 1 } else { j <= i });
        let pat = Arc::new(AttnPattern::from_mask(&mask).unwrap());
        let o = g.attention(q, k, v, pat, 2).unwrap();
        assert_eq!(g.value(o).row(3), g.value(v).row(1));
    }

    #[test]
    fn attention_rejects_empty_non_pad_row() {
        let mask = AttentionMask::from_fn(3, |i, j| i != 1 && j <= i);
        assert!(matches!(AttnPattern::from_mask(&mask), Err(Error::EmptyAttentionRow(1))));
        let mut padded = mask.clone();
        padded.set_pad_row(1, true);
        let pat = AttnPattern::from_mask(&padded).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::randn(&[3, 2], 1.0, &mut rng::seeded(1)));
        let o = g.attention(x, x, x, Arc::new(pat), 1).unwrap();
        assert_eq!(g.value(o).row(1), &[0.0, 0.0]);
    }

    #[test]
    fn masked_edge_carries_no_gradient() {
        let r = &mut rng::seeded(8);
        let mask = AttentionMask::from_fn(5, |i, j| j <= i && !(i == 4 && j == 2));
        let pat = Arc::new(AttnPattern::from_mask(&mask).unwrap());
        let mut g = Graph::new();
        let q = g.input(Tensor::randn(&[5, 4], 1.0, r));
        let k = g.input(Tensor::randn(&[5, 4], 1.0, r));
        let v = g.input(Tensor::randn(&[5, 4], 1.0, r));
        let o = g.attention(q, k, v, pat, 2).unwrap();
        let row4 = g.slice_cols(o, 0, 4);
        let sel = g.gather_rows(row4, &[4]);
        let loss = g.sum(sel);
        let grads = g.backward(loss);
        let gv = grads.get(v).unwrap();
        let gk = grads.get(k).unwrap();
        assert!(gv[2 * 4..3 * 4].iter().all(|x| *x == 0.0));
        assert!(gk[2 * 4..3 * 4].iter().all(|x| *x == 0.0));
        assert!(gv[4 * 4..5 * 4].iter().any(|x| *x != 0.0));
    }

    #[test]
    fn layer_norm_closed_forms() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(2, 2, vec![1.0, -1.0, 3.0, 3.0]));
        let gain = g.constant(Tensor::row_vector(&[1.0, 1.0]));
        let bias = g.constant(Tensor::row_vector(&[0.25, -0.5]));
        let y = g.layer_norm(x, gain, bias);
        let want = 1.0 / (1.0 + LAYER_NORM_EPS).sqrt();
        let out = g.value(y).data();
        assert!(close(out[0], want + 0.25, 1e-15));
        assert!(close(out[1], -want - 0.5, 1e-15));
        // constant row -> bias
        assert_eq!(&out[2..], &[0.25, -0.5]);
    }

    #[test]
    fn cross_entropy_reference_values() {
        let mut g = Graph::new();
        let c = 6;
        let logits = g.input(Tensor::zeros(&[3, c]));
        let ce = g.cross_entropy(logits, &[Some(0), None, Some(5)]).unwrap();
        assert!(close(g.value(ce).item(), (c as f64).ln(), 1e-15));
        let big = g.input(Tensor::matrix(1, 3, vec![0.0, 800.0, 0.0]));
        let ce = g.cross_entropy(big, &[Some(1)]).unwrap();
        assert!(g.value(ce).item() < 1e-300);
        assert!(matches!(g.cross_entropy(big, &[None]), Err(Error::NoValidPositions)));
    }

    #[test]
    fn cross_entropy_matches_log_sum_exp() {
        let r = &mut rng::seeded(21);
        let t = Tensor::randn(&[7, 5], 3.0, r);
        let targets: Vec<Option<usize>> =
            (0..7).map(|i| if i % 3 == 1 { None } else { Some((i * 2) % 5) }).collect();
        let mut oracle = 0.0;
        let mut n = 0.0;
        for (i, tg) in targets.iter().enumerate() {
            if let Some(tg) = tg {
                let row = t.row(i);
                let s: f64 = row.iter().map(|x| x.exp()).sum();
                oracle += -(row[*tg].exp() / s).ln();
                n += 1.0;
            }
        }
        oracle /= n;
        let mut g = Graph::new();
        let l = g.input(t);
        let ce = g.cross_entropy(l, &targets).unwrap();
        assert!(close(g.value(ce).item(), oracle, 1e-10));
    }

    #[test]
    fn mae_values_and_subgradient() {
        let mut g = Graph::new();
        let p = g.input(Tensor::matrix(3, 1, vec![2.0, -1.0, 9.0]));
        let zero = g.mae(p, &[Some(2.0), Some(-1.0), None]).unwrap();
        assert_eq!(g.value(zero).item(), 0.0);
        let grads = g.backward(zero);
        assert_eq!(grads.get(p).unwrap(), &[0.0, 0.0, 0.0]);

        let mut g = Graph::new();
        let p = g.input(Tensor::matrix(2, 1, vec![1.0, -3.0]));
        let m = g.mae(p, &[Some(0.0), Some(0.0)]).unwrap();
        assert_eq!(g.value(m).item(), 2.0);
        let grads = g.backward(m);
        assert_eq!(grads.get(p).unwrap(), &[0.5, -0.5]);
        assert!(matches!(g.mae(p, &[None, None]), Err(Error::NoValidPositions)));
    }

    #[test]
    fn contrastive_values() {
        let mut g = Graph::new();
        let a = g.input(Tensor::row_vector(&[0.0, 0.0]));
        let b = g.input(Tensor::row_vector(&[0.3, 0.0]));
        let neg = g.contrastive(a, b, false, 0.5);
        assert!(close(g.value(neg).item(), 0.04, 1e-15));
        let pos = g.contrastive(a, a, true, 0.5);
        assert_eq!(g.value(pos).item(), 0.0);
        let far = g.input(Tensor::row_vector(&[3.0, 4.0]));
        let hinge = g.contrastive(a, far, false, 0.5);
        assert_eq!(g.value(hinge).item(), 0.0);
        let grads = g.backward(hinge);
        assert!(grads.get(a).unwrap().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn dropout_zero_rate_is_identity_and_scales_otherwise() {
        let mut g = Graph::new();
        let x = g.input(Tensor::matrix(1, 1000, vec![1.0; 1000]));
        let r = &mut rng::seeded(0);
        assert_eq!(g.dropout(x, 0.0, r), x);
        let y = g.dropout(x, 0.5, r);
        let vals = g.value(y).data();
        assert!(vals.iter().all(|v| *v == 0.0 || *v == 2.0));
        let kept = vals.iter().filter(|v| **v > 0.0).count();
        assert!((400..600).contains(&kept));
    }

    #[test]
    fn gather_rows_gradient_is_sparse() {
        let mut g = Graph::new();
        let table = g.input(Tensor::randn(&[5, 3], 1.0, &mut rng::seeded(2)));
        let rows = g.gather_rows(table, &[3, 3, 1]);
        let s = g.sum(rows);
        let grads = g.backward(s);
        let gt = grads.get(table).unwrap();
        assert_eq!(&gt[3 * 3..4 * 3], &[2.0, 2.0, 2.0]);
        assert_eq!(&gt[3..6], &[1.0, 1.0, 1.0]);
        assert!(gt[..3].iter().chain(&gt[6..9]).chain(&gt[12..]).all(|x| *x == 0.0));
    }

    #[test]
    fn repeated_backward_is_bitwise_identical() {
        let run = || {
            let r = &mut rng::seeded(17);
            let mut g = Graph::new();
            let a = g.input(Tensor::randn(&[6, 4], 1.0, r));
            let w = g.input(Tensor::randn(&[4, 4], 1.0, r));
            let h = g.matmul(a, w);
            let mask = AttentionMask::from_fn(6, |i, j| j <= i);
            let pat = Arc::new(AttnPattern::from_mask(&mask).unwrap());
            let o = g.attention(h, h, h, pat, 2).unwrap();
            let s = g.mean(o);
            let grads = g.backward(s);
            (g.value(s).item().to_bits(), grads.wrt(&g, w).into_data())
        };
        let (a, ga) = run();
        let (b, gb) = run();
        assert_eq!(a, b);
        assert!(ga.iter().zip(&gb).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
