use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use super::{gemm, row_softmax_masked, Tensor};
use crate::attention::MaskMatrix;
use crate::error::{Error, Result};

/// Index of a trainable tensor in a parameter store.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Constant,
    Param,
    Matmul(Var, Var),
    MatmulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    LogSigmoid(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    SoftmaxMasked(Var),
    Rope { x: Var, cos: Arc<Vec<f64>>, sin: Arc<Vec<f64>> },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    GatherRows { sources: Vec<Var>, picks: Vec<(usize, usize)> },
    GatherEntries { x: Var, picks: Vec<(usize, usize)> },
    SegmentLogSumExp { x: Var, segments: Vec<(usize, usize)> },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Rows of a parameter that received gradient during one backward pass.
#[derive(Clone, Debug, PartialEq)]
enum Touch {
    None,
    Rows(BTreeSet<usize>),
    All,
}

#[derive(Clone, Debug)]
pub struct ParamGrad {
    pub grad: Tensor,
    /// Rows reached only through row gathers. `None` means the whole tensor
    /// was used densely.
    pub rows: Option<Vec<usize>>,
}

#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: BTreeMap<ParamId, ParamGrad>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&ParamGrad> {
        self.grads.get(&id)
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut ParamGrad> {
        self.grads.get_mut(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &ParamGrad)> {
        self.grads.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&ParamId, &mut ParamGrad)> {
        self.grads.iter_mut()
    }

    pub fn insert(&mut self, id: ParamId, grad: ParamGrad) {
        self.grads.insert(id, grad);
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .values()
            .flat_map(|g| g.grad.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.values_mut() {
            for v in g.grad.data_mut() {
                *v *= factor;
            }
        }
    }
}

/// Records a forward computation so that gradients can be replayed in reverse.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, name: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name.to_string() });
        }
        let needs_grad = match &op {
            Op::Constant => false,
            Op::Param => true,
            other => inputs(other).iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Constant, "constant")
    }

    /// Registers a trainable tensor. Registering the same id twice returns the
    /// existing node.
    pub fn param(&mut self, id: ParamId, value: &Tensor) -> Result<Var> {
        if let Some(&v) = self.params.get(&id) {
            return Ok(v);
        }
        let v = self.push(value.clone(), Op::Param, "param")?;
        self.params.insert(id, v);
        Ok(v)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m}x{k}] x [{k2}x{n}]")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), (k, 1), self.value(b).data(), (n, 1), &mut out, 0.0);
        self.push(Tensor::from_parts(m, n, out), Op::Matmul(a, b), "matmul")
    }

    /// `a * b^T`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(Error::shape("matmul_bt", format!("[{m}x{k}] x [{n}x{k2}]^T")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), (k, 1), self.value(b).data(), (1, k), &mut out, 0.0);
        self.push(Tensor::from_parts(m, n, out), Op::MatmulBt(a, b), "matmul_bt")
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (r, c) = self.dims(a);
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::from_parts(r, c, data)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let (r, c) = self.dims(a);
        Tensor::from_parts(r, c, self.value(a).data().iter().map(|x| f(*x)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a, b), "mul")
    }

    /// Adds a `[1 x m]` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        if self.dims(row) != (1, c) {
            return Err(Error::shape("add_row", format!("[{r}x{c}] + {:?}", self.value(row).shape())));
        }
        let bias = self.value(row).data();
        let mut out = self.value(a).data().to_vec();
        for chunk in out.chunks_mut(c) {
            for (o, b) in chunk.iter_mut().zip(bias) {
                *o += b;
            }
        }
        self.push(Tensor::from_parts(r, c, out), Op::AddRow(a, row), "add_row")
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = self.map(a, |x| x * factor);
        self.push(out, Op::Scale(a, factor), "scale")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, |x| x.max(0.0));
        self.push(out, Op::Relu(a), "relu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, sigmoid);
        self.push(out, Op::Sigmoid(a), "sigmoid")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, f64::ln);
        self.push(out, Op::Log(a), "log")
    }

    /// `log(sigmoid(x))` without overflow for large `|x|`.
    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, log_sigmoid);
        self.push(out, Op::LogSigmoid(a), "log_sigmoid")
    }

    /// Per-row normalisation with learnable `[1 x m]` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        if self.dims(gain) != (1, c) || self.dims(bias) != (1, c) {
            return Err(Error::shape("layer_norm", "gain/bias must be [1 x cols]"));
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        self.push(
            Tensor::from_parts(r, c, out),
            Op::LayerNorm { x, gain, bias, xhat, inv_std },
            "layer_norm",
        )
    }

    pub fn softmax_masked(&mut self, logits: Var, mask: &MaskMatrix) -> Result<Var> {
        let out = row_softmax_masked(self.value(logits), mask)?;
        self.push(out, Op::SoftmaxMasked(logits), "softmax_masked")
    }

    /// Rotates consecutive column pairs of each row by precomputed angles.
    /// `cos`/`sin` are `[rows x cols/2]`.
    pub fn rope(&mut self, x: Var, cos: Arc<Vec<f64>>, sin: Arc<Vec<f64>>) -> Result<Var> {
        let (r, c) = self.dims(x);
        if c % 2 != 0 || cos.len() != r * c / 2 || sin.len() != cos.len() {
            return Err(Error::shape("rope", format!("x [{r}x{c}], {} angles", cos.len())));
        }
        let out = rotate_pairs(self.value(x).data(), c, &cos, &sin, false);
        self.push(Tensor::from_parts(r, c, out), Op::Rope { x, cos, sin }, "rope")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = parts.first().map(|&p| self.dims(p).0).ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
        if parts.iter().any(|&p| self.dims(p).0 != r) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let total: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        self.push(Tensor::from_parts(r, total, out), Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if start + len > c {
            return Err(Error::shape("slice_cols", format!("{start}+{len} > {c}")));
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&src.row(i)[start..start + len]);
        }
        self.push(Tensor::from_parts(r, len, out), Op::SliceCols { x, start }, "slice_cols")
    }

    /// Builds a matrix whose i-th row is `sources[picks[i].0].row(picks[i].1)`.
    /// All sources must share a column count.
    pub fn gather_rows(&mut self, sources: &[Var], picks: &[(usize, usize)]) -> Result<Var> {
        let c = sources.first().map(|&s| self.dims(s).1).ok_or_else(|| Error::shape("gather_rows", "no sources"))?;
        if sources.iter().any(|&s| self.dims(s).1 != c) {
            return Err(Error::shape("gather_rows", "column counts differ"));
        }
        let mut out = Vec::with_capacity(picks.len() * c);
        for &(s, row) in picks {
            let src = sources.get(s).ok_or(Error::IdOutOfRange { what: "gather source", id: s, size: sources.len() })?;
            let size = self.dims(*src).0;
            if row >= size {
                return Err(Error::IdOutOfRange { what: "row", id: row, size });
            }
            out.extend_from_slice(self.value(*src).row(row));
        }
        self.push(
            Tensor::from_parts(picks.len(), c, out),
            Op::GatherRows { sources: sources.to_vec(), picks: picks.to_vec() },
            "gather_rows",
        )
    }

    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let picks: Vec<(usize, usize)> = ids.iter().map(|&id| (0, id)).collect();
        self.gather_rows(&[table], &picks)
    }

    /// Column vector of the selected `(row, col)` entries.
    pub fn gather_entries(&mut self, x: Var, picks: &[(usize, usize)]) -> Result<Var> {
        let (r, c) = self.dims(x);
        let src = self.value(x);
        let mut out = Vec::with_capacity(picks.len());
        for &(i, j) in picks {
            if i >= r || j >= c {
                return Err(Error::shape("gather_entries", format!("({i},{j}) outside [{r}x{c}]")));
            }
            out.push(src.get(i, j));
        }
        self.push(
            Tensor::from_parts(picks.len(), 1, out),
            Op::GatherEntries { x, picks: picks.to_vec() },
            "gather_entries",
        )
    }

    /// Log-sum-exp over contiguous `(start, len)` segments of a column vector.
    pub fn segment_logsumexp(&mut self, x: Var, segments: &[(usize, usize)]) -> Result<Var> {
        let n = self.value(x).numel();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(segments.len());
        for &(start, len) in segments {
            if len == 0 || start + len > n {
                return Err(Error::shape("segment_logsumexp", format!("segment ({start},{len}) of {n}")));
            }
            out.push(logsumexp(&src[start..start + len]));
        }
        self.push(
            Tensor::from_parts(segments.len(), 1, out),
            Op::SegmentLogSumExp { x, segments: segments.to_vec() },
            "segment_logsumexp",
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), "sum")
    }

    /// Fingerprint of the sign pattern of every ReLU input. Finite-difference
    /// checks use it to detect perturbations that cross a kink.
    pub fn relu_signature(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for node in &self.nodes {
            if let Op::Relu(x) = node.op {
                for v in self.nodes[x.0].value.data() {
                    h ^= u64::from(*v > 0.0);
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    /// Reverse pass from a scalar node. Returns gradients for every parameter
    /// reachable from `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        let mut touch: Vec<Touch> = vec![Touch::None; n];
        grads[loss.0] = Some(vec![1.0]);
        touch[loss.0] = Touch::All;

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if let Op::Param = node.op {
                grads[idx] = Some(g);
                continue;
            }
            let mut acc = Acc { nodes: &self.nodes, grads: &mut grads, touch: &mut touch };
            match &node.op {
                Op::Constant | Op::Param => {}
                Op::Matmul(a, b) => {
                    let (m, k) = self.dims(*a);
                    let nn = self.dims(*b).1;
                    if let Some(da) = acc.dense(*a) {
                        gemm(m, nn, k, &g, (nn, 1), self.value(*b).data(), (1, nn), da, 1.0);
                    }
                    if let Some(db) = acc.dense(*b) {
                        gemm(k, m, nn, self.value(*a).data(), (1, k), &g, (nn, 1), db, 1.0);
                    }
                }
                Op::MatmulBt(a, b) => {
                    let (m, k) = self.dims(*a);
                    let nn = self.dims(*b).0;
                    if let Some(da) = acc.dense(*a) {
                        gemm(m, nn, k, &g, (nn, 1), self.value(*b).data(), (k, 1), da, 1.0);
                    }
                    if let Some(db) = acc.dense(*b) {
                        gemm(nn, m, k, &g, (1, nn), self.value(*a).data(), (k, 1), db, 1.0);
                    }
                }
                Op::Add(a, b) => {
                    if let Some(da) = acc.dense(*a) {
                        add_into(da, &g);
                    }
                    if let Some(db) = acc.dense(*b) {
                        add_into(db, &g);
                    }
                }
                Op::Sub(a, b) => {
                    if let Some(da) = acc.dense(*a) {
                        add_into(da, &g);
                    }
                    if let Some(db) = acc.dense(*b) {
                        for (d, v) in db.iter_mut().zip(&g) {
                            *d -= v;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    if let Some(da) = acc.dense(*a) {
                        for ((d, gv), y) in da.iter_mut().zip(&g).zip(bv) {
                            *d += gv * y;
                        }
                    }
                    if let Some(db) = acc.dense(*b) {
                        for ((d, gv), x) in db.iter_mut().zip(&g).zip(av) {
                            *d += gv * x;
                        }
                    }
                }
                Op::AddRow(a, row) => {
                    let c = self.dims(*a).1;
                    if let Some(da) = acc.dense(*a) {
                        add_into(da, &g);
                    }
                    if let Some(dr) = acc.dense(*row) {
                        for chunk in g.chunks(c) {
                            add_into(dr, chunk);
                        }
                    }
                }
                Op::Scale(a, f) => {
                    if let Some(da) = acc.dense(*a) {
                        for (d, gv) in da.iter_mut().zip(&g) {
                            *d += gv * f;
                        }
                    }
                }
                Op::Relu(a) => {
                    let x = self.value(*a).data();
                    if let Some(da) = acc.dense(*a) {
                        for ((d, gv), xv) in da.iter_mut().zip(&g).zip(x) {
                            if *xv > 0.0 {
                                *d += gv;
                            }
                        }
                    }
                }
                Op::Sigmoid(a) => {
                    let y = node.value.data();
                    if let Some(da) = acc.dense(*a) {
                        for ((d, gv), yv) in da.iter_mut().zip(&g).zip(y) {
                            *d += gv * yv * (1.0 - yv);
                        }
                    }
                }
                Op::Log(a) => {
                    let x = self.value(*a).data();
                    if let Some(da) = acc.dense(*a) {
                        for ((d, gv), xv) in da.iter_mut().zip(&g).zip(x) {
                            *d += gv / xv;
                        }
                    }
                }
                Op::LogSigmoid(a) => {
                    let x = self.value(*a).data();
                    if let Some(da) = acc.dense(*a) {
                        for ((d, gv), xv) in da.iter_mut().zip(&g).zip(x) {
                            *d += gv * sigmoid(-xv);
                        }
                    }
                }
                Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                    let (r, c) = self.dims(*x);
                    let gv = self.value(*gain).data().to_vec();
                    if let Some(dg) = acc.dense(*gain) {
                        for i in 0..r {
                            for j in 0..c {
                                dg[j] += g[i * c + j] * xhat[i * c + j];
                            }
                        }
                    }
                    if let Some(db) = acc.dense(*bias) {
                        for chunk in g.chunks(c) {
                            add_into(db, chunk);
                        }
                    }
                    if let Some(dx) = acc.dense(*x) {
                        let mut dxhat = vec![0.0; c];
                        for i in 0..r {
                            let mut mean_d = 0.0;
                            let mut mean_dx = 0.0;
                            for j in 0..c {
                                let d = g[i * c + j] * gv[j];
                                dxhat[j] = d;
                                mean_d += d;
                                mean_dx += d * xhat[i * c + j];
                            }
                            mean_d /= c as f64;
                            mean_dx /= c as f64;
                            for j in 0..c {
                                dx[i * c + j] += inv_std[i] * (dxhat[j] - mean_d - xhat[i * c + j] * mean_dx);
                            }
                        }
                    }
                }
                Op::SoftmaxMasked(a) => {
                    let y = node.value.data();
                    let c = node.value.cols();
                    if let Some(da) = acc.dense(*a) {
                        for (i, (yr, gr)) in y.chunks(c).zip(g.chunks(c)).enumerate() {
                            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for j in 0..c {
                                da[i * c + j] += yr[j] * (gr[j] - dot);
                            }
                        }
                    }
                }
                Op::Rope { x, cos, sin } => {
                    let c = self.dims(*x).1;
                    if let Some(dx) = acc.dense(*x) {
                        let back = rotate_pairs(&g, c, cos, sin, true);
                        add_into(dx, &back);
                    }
                }
                Op::ConcatCols(parts) => {
                    let r = node.value.rows();
                    let total = node.value.cols();
                    let mut offset = 0;
                    for p in parts {
                        let w = self.dims(*p).1;
                        if let Some(dp) = acc.dense(*p) {
                            for i in 0..r {
                                add_into(&mut dp[i * w..(i + 1) * w], &g[i * total + offset..i * total + offset + w]);
                            }
                        }
                        offset += w;
                    }
                }
                Op::SliceCols { x, start } => {
                    let (r, c) = self.dims(*x);
                    let w = node.value.cols();
                    if let Some(dx) = acc.dense(*x) {
                        for i in 0..r {
                            add_into(&mut dx[i * c + start..i * c + start + w], &g[i * w..(i + 1) * w]);
                        }
                    }
                }
                Op::GatherRows { sources, picks } => {
                    let c = node.value.cols();
                    for (s, src) in sources.iter().enumerate() {
                        if !self.nodes[src.0].needs_grad {
                            continue;
                        }
                        let rows: Vec<usize> =
                            picks.iter().filter(|(ps, _)| *ps == s).map(|(_, r)| *r).collect();
                        let ds = acc.rows(*src, &rows);
                        for (i, &(ps, row)) in picks.iter().enumerate() {
                            if ps == s {
                                add_into(&mut ds[row * c..(row + 1) * c], &g[i * c..(i + 1) * c]);
                            }
                        }
                    }
                }
                Op::GatherEntries { x, picks } => {
                    let c = self.dims(*x).1;
                    if let Some(dx) = acc.dense(*x) {
                        for (gv, &(i, j)) in g.iter().zip(picks) {
                            dx[i * c + j] += gv;
                        }
                    }
                }
                Op::SegmentLogSumExp { x, segments } => {
                    let xs = self.value(*x).data();
                    let out = node.value.data();
                    if let Some(dx) = acc.dense(*x) {
                        for (s, &(start, len)) in segments.iter().enumerate() {
                            for k in start..start + len {
                                dx[k] += g[s] * (xs[k] - out[s]).exp();
                            }
                        }
                    }
                }
                Op::Sum(x) => {
                    if let Some(dx) = acc.dense(*x) {
                        for d in dx.iter_mut() {
                            *d += g[0];
                        }
                    }
                }
            }
        }

        let mut out = Gradients::default();
        for (&id, &var) in &self.params {
            let Some(g) = grads[var.0].take() else { continue };
            let value = &self.nodes[var.0].value;
            let grad = Tensor::from_parts(value.rows(), value.cols(), g);
            let rows = match &touch[var.0] {
                Touch::All => None,
                Touch::Rows(r) => Some(r.iter().copied().collect()),
                Touch::None => Some(Vec::new()),
            };
            if !grad.is_finite() {
                return Err(Error::NonFinite { op: format!("gradient of param {}", id.0) });
            }
            out.grads.insert(id, ParamGrad { grad, rows });
        }
        Ok(out)
    }

    fn dims_of(nodes: &[Node], v: Var) -> usize {
        nodes[v.0].value.numel()
    }
}

struct Acc<'a> {
    nodes: &'a [Node],
    grads: &'a mut [Option<Vec<f64>>],
    touch: &'a mut [Touch],
}

impl Acc<'_> {
    fn slot(&mut self, v: Var) -> Option<&mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = Tape::dims_of(self.nodes, v);
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn dense(&mut self, v: Var) -> Option<&mut [f64]> {
        if self.nodes[v.0].needs_grad {
            self.touch[v.0] = Touch::All;
        }
        self.slot(v).map(|g| g.as_mut_slice())
    }

    fn rows(&mut self, v: Var, rows: &[usize]) -> &mut [f64] {
        match &mut self.touch[v.0] {
            Touch::All => {}
            Touch::Rows(set) => set.extend(rows.iter().copied()),
            t @ Touch::None => *t = Touch::Rows(rows.iter().copied().collect()),
        }
        self.slot(v).expect("caller checked needs_grad").as_mut_slice()
    }
}

fn inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Constant | Op::Param => vec![],
        Op::Matmul(a, b) | Op::MatmulBt(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => {
            vec![*a, *b]
        }
        Op::Scale(a, _)
        | Op::Relu(a)
        | Op::Sigmoid(a)
        | Op::Log(a)
        | Op::LogSigmoid(a)
        | Op::SoftmaxMasked(a)
        | Op::Sum(a) => vec![*a],
        Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
        Op::Rope { x, .. } | Op::SliceCols { x, .. } | Op::GatherEntries { x, .. } | Op::SegmentLogSumExp { x, .. } => {
            vec![*x]
        }
        Op::ConcatCols(parts) => parts.clone(),
        Op::GatherRows { sources, .. } => sources.clone(),
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn rotate_pairs(x: &[f64], cols: usize, cos: &[f64], sin: &[f64], inverse: bool) -> Vec<f64> {
    let half = cols / 2;
    let mut out = vec![0.0; x.len()];
    for (r, (src, dst)) in x.chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
        for k in 0..half {
            let (c, mut s) = (cos[r * half + k], sin[r * half + k]);
            if inverse {
                s = -s;
            }
            let (a, b) = (src[2 * k], src[2 * k + 1]);
            dst[2 * k] = a * c - b * s;
            dst[2 * k + 1] = a * s + b * c;
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::super::finite_diff_grad;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Checks d(f)/d(param) from the tape against central differences, where
    /// `build` records a scalar loss given the parameter tensor.
    fn check_op(seed: u64, shape: (usize, usize), build: impl Fn(&mut Tape, Var) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = rand_tensor(&mut rng, shape.0, shape.1);
        let mut tape = Tape::new();
        let v = tape.param(ParamId(0), &p).unwrap();
        let loss = build(&mut tape, v);
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.get(ParamId(0)).map(|g| g.grad.data().to_vec()).unwrap_or(vec![0.0; p.numel()]);
        let numeric = finite_diff_grad(
            |x| {
                let mut t = Tape::new();
                let v = t.param(ParamId(0), &Tensor::matrix(shape.0, shape.1, x.to_vec()).unwrap()).unwrap();
                let l = build(&mut t, v);
                t.value(l).item()
            },
            p.data(),
            1e-5,
        );
        for (a, n) in analytic.iter().zip(&numeric) {
            let rel = crate::tensor::relative_error(*a, *n, 1e-6);
            assert!(rel < 1e-4, "seed {seed}: analytic {a} numeric {n}");
        }
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.param(ParamId(3), &Tensor::matrix(2, 2, vec![1.0, -2.0, 3.0, 4.0]).unwrap()).unwrap();
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(ParamId(3)).unwrap().grad.data(), &[1.0; 4]);
    }

    #[test]
    fn dot_gradient_is_two_x() {
        let x = Tensor::row_vector(vec![1.5, -2.0, 0.25]).unwrap();
        let mut tape = Tape::new();
        let v = tape.param(ParamId(0), &x).unwrap();
        let sq = tape.mul(v, v).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(ParamId(0)).unwrap().grad.data(), &[3.0, -4.0, 0.5]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let v = tape.param(ParamId(0), &Tensor::zeros(2, 1)).unwrap();
        assert!(matches!(tape.backward(v), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn embedding_lookup_gathers_and_accumulates() {
        let table = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap();
        let mut tape = Tape::new();
        let t = tape.param(ParamId(0), &table).unwrap();
        let out = tape.embedding_lookup(t, &[0, 2, 0]).unwrap();
        for (i, id) in [0usize, 2, 0].iter().enumerate() {
            assert_eq!(tape.value(out).row(i), table.row(*id));
        }
        let s = tape.sum(out).unwrap();
        let g = tape.backward(s).unwrap();
        let pg = g.get(ParamId(0)).unwrap();
        assert_eq!(pg.rows.as_deref(), Some(&[0usize, 2][..]));
        assert_eq!(pg.grad.row(0), &[2.0, 2.0]);
        assert_eq!(pg.grad.row(1), &[0.0, 0.0]);
        assert_eq!(pg.grad.row(2), &[1.0, 1.0]);
        assert_eq!(pg.grad.row(3), &[0.0, 0.0]);
    }

    #[test]
    fn embedding_lookup_out_of_range() {
        let mut tape = Tape::new();
        let t = tape.param(ParamId(0), &Tensor::zeros(3, 2)).unwrap();
        assert!(matches!(tape.embedding_lookup(t, &[3]), Err(Error::IdOutOfRange { .. })));
    }

    #[test]
    fn op_gradients_match_finite_differences() {
        for seed in 0..10 {
            check_op(seed, (3, 4), |t, x| {
                let w = t.constant(Tensor::matrix(4, 2, (0..8).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap()).unwrap();
                let y = t.matmul(x, w).unwrap();
                let y2 = t.matmul_bt(y, y).unwrap();
                t.sum(y2).unwrap()
            });
            check_op(seed, (3, 4), |t, x| {
                let y = t.mul(x, x).unwrap();
                let z = t.sub(y, x).unwrap();
                let a = t.add(z, x).unwrap();
                let s = t.scale(a, 0.7).unwrap();
                let r = t.relu(s).unwrap();
                let q = t.sigmoid(r).unwrap();
                t.sum(q).unwrap()
            });
            check_op(seed, (3, 4), |t, x| {
                let e = t.sigmoid(x).unwrap();
                let l = t.log(e).unwrap();
                let ls = t.log_sigmoid(x).unwrap();
                let m = t.mul(l, ls).unwrap();
                t.sum(m).unwrap()
            });
            check_op(seed, (1, 5), |t, g| {
                let x = t.constant(Tensor::matrix(3, 5, (0..15).map(|i| (i as f64).cos() * 2.0).collect()).unwrap()).unwrap();
                let b = t.constant(Tensor::row_vector(vec![0.1, -0.2, 0.3, 0.0, 0.5]).unwrap()).unwrap();
                let y = t.layer_norm(x, g, b).unwrap();
                let w = t.constant(Tensor::matrix(3, 5, (0..15).map(|i| (i as f64 * 0.5).sin()).collect()).unwrap()).unwrap();
                let z = t.mul(y, w).unwrap();
                t.sum(z).unwrap()
            });
            check_op(seed, (3, 5), |t, x| {
                let g = t.constant(Tensor::row_vector(vec![1.0, 0.5, -1.0, 2.0, 1.5]).unwrap()).unwrap();
                let b = t.constant(Tensor::row_vector(vec![0.0; 5]).unwrap()).unwrap();
                let y = t.layer_norm(x, g, b).unwrap();
                let w = t.constant(Tensor::matrix(3, 5, (0..15).map(|i| (i as f64 * 0.9).sin()).collect()).unwrap()).unwrap();
                let z = t.mul(y, w).unwrap();
                t.sum(z).unwrap()
            });
            check_op(seed, (3, 3), |t, x| {
                let mask = MaskMatrix::from_fn(3, |i, j| j <= i);
                let p = t.softmax_masked(x, &mask).unwrap();
                let w = t.constant(Tensor::matrix(3, 3, vec![1.0, 2.0, 3.0, -1.0, 0.5, 2.0, 0.3, 0.2, -0.7]).unwrap()).unwrap();
                let z = t.mul(p, w).unwrap();
                t.sum(z).unwrap()
            });
            check_op(seed, (2, 4), |t, x| {
                let cos = Arc::new(vec![0.3f64.cos(), 1.1f64.cos(), (-0.4f64).cos(), 2.0f64.cos()]);
                let sin = Arc::new(vec![0.3f64.sin(), 1.1f64.sin(), (-0.4f64).sin(), 2.0f64.sin()]);
                let r = t.rope(x, cos, sin).unwrap();
                let w = t.constant(Tensor::matrix(2, 4, (0..8).map(|i| i as f64 - 3.0).collect()).unwrap()).unwrap();
                let z = t.mul(r, w).unwrap();
                let z2 = t.mul(z, r).unwrap();
                t.sum(z2).unwrap()
            });
            check_op(seed, (3, 4), |t, x| {
                let a = t.slice_cols(x, 1, 2).unwrap();
                let b = t.slice_cols(x, 0, 3).unwrap();
                let c = t.concat_cols(&[a, b, x]).unwrap();
                let bias = t.constant(Tensor::row_vector((0..9).map(|i| i as f64 * 0.1).collect()).unwrap()).unwrap();
                let d = t.add_row(c, bias).unwrap();
                let e = t.mul(d, d).unwrap();
                t.sum(e).unwrap()
            });
            check_op(seed, (4, 3), |t, x| {
                let other = t.constant(Tensor::filled(2, 3, 0.5)).unwrap();
                let g = t.gather_rows(&[x, other], &[(0, 1), (1, 0), (0, 3), (0, 1)]).unwrap();
                let sq = t.mul(g, g).unwrap();
                let e = t.gather_entries(sq, &[(0, 0), (2, 1), (3, 2), (1, 1), (0, 2)]).unwrap();
                let l = t.segment_logsumexp(e, &[(0, 2), (2, 3)]).unwrap();
                t.sum(l).unwrap()
            });
        }
    }

    #[test]
    fn add_row_bias_gradient_is_column_sum() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(3, 2)).unwrap();
        let b = tape.param(ParamId(1), &Tensor::row_vector(vec![0.0, 0.0]).unwrap()).unwrap();
        let y = tape.add_row(x, b).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(ParamId(1)).unwrap().grad.data(), &[3.0, 3.0]);
        assert_eq!(g.get(ParamId(1)).unwrap().rows, None);
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row_vector(vec![-1.0]).unwrap()).unwrap();
        assert!(matches!(tape.log(x), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn stable_scalar_helpers() {
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
        assert!(log_sigmoid(-1000.0).is_finite());
        assert!((log_sigmoid(-1000.0) + 1000.0).abs() < 1e-9);
        assert!(log_sigmoid(1000.0).abs() < 1e-300);
        assert!((logsumexp(&[0.0, 0.0]) - 2f64.ln()).abs() < 1e-15);
    }
}
