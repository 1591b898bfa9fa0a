use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2, ShapeBuilder};
use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Handle to a value stored in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValueId(usize);

/// Dense 64-bit value participating in reverse-mode differentiation.
///
/// Invariants: `shape.iter().product() == data.len()`; after a backward pass
/// `grad` is populated exactly for values with `requires_grad`, and the grad
/// buffer has the same length as `data`.
#[derive(Debug, Clone)]
pub struct DifferentiableValue {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl DifferentiableValue {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// One recorded operation. Caches (dropout masks, attention probabilities,
/// layer-norm statistics) are filled during the forward pass and reused by
/// the backward pass.
enum Op {
    Matmul { a: ValueId, b: ValueId },
    /// `a @ b^T` where `b` is stored untransposed as `[n, k]`.
    MatmulNt { a: ValueId, b: ValueId },
    Add { a: ValueId, b: ValueId },
    Sub { a: ValueId, b: ValueId },
    Mul { a: ValueId, b: ValueId },
    AddBias { x: ValueId, bias: ValueId },
    Scale { x: ValueId, factor: f64 },
    Relu { x: ValueId },
    Abs { x: ValueId },
    SumAll { x: ValueId },
    MeanAll { x: ValueId },
    MeanRows { x: ValueId, blocks: usize },
    ConcatCols { xs: Vec<ValueId>, widths: Vec<usize> },
    ConcatRows { xs: Vec<ValueId>, row_counts: Vec<usize> },
    SliceRows { x: ValueId, start: usize },
    TileRows { x: ValueId, times: usize },
    LookupRows { table: ValueId, ids: Vec<u32> },
    Softmax { x: ValueId, axis: usize },
    LayerNorm {
        x: ValueId,
        gain: ValueId,
        bias: ValueId,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout { x: ValueId, mask: Vec<f64> },
    /// Per-block multi-head scaled dot-product attention over pre-projected
    /// Q/K/V of shape `[(blocks * t), h]`. Blocks attend independently.
    BlockAttention {
        q: ValueId,
        k: ValueId,
        v: ValueId,
        blocks: usize,
        heads: usize,
        probs: Vec<f64>,
    },
}

struct Step {
    out: ValueId,
    op: Op,
}

/// Tape of recorded operations plus the values they produced.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<DifferentiableValue>,
    steps: Vec<Step>,
}

const LN_EPSILON: f64 = 1e-5;

fn view2(data: &[f64], r: usize, c: usize) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((r, c), data).expect("buffer matches shape")
}

fn view2_mut(data: &mut [f64], r: usize, c: usize) -> ArrayViewMut2<'_, f64> {
    ArrayViewMut2::from_shape((r, c), data).expect("buffer matches shape")
}

/// Strided `[rows, cols]` view into a row-major matrix with physical row
/// width `stride`, starting at `(row0, col0)`.
fn subview(
    data: &[f64],
    stride: usize,
    row0: usize,
    col0: usize,
    rows: usize,
    cols: usize,
) -> ArrayView2<'_, f64> {
    let off = row0 * stride + col0;
    let span = (rows - 1) * stride + cols;
    ArrayView2::from_shape((rows, cols).strides((stride, 1)), &data[off..off + span])
        .expect("subview in bounds")
}

fn subview_mut(
    data: &mut [f64],
    stride: usize,
    row0: usize,
    col0: usize,
    rows: usize,
    cols: usize,
) -> ArrayViewMut2<'_, f64> {
    let off = row0 * stride + col0;
    let span = (rows - 1) * stride + cols;
    ArrayViewMut2::from_shape((rows, cols).strides((stride, 1)), &mut data[off..off + span])
        .expect("subview in bounds")
}

/// Folds every axis but the last into a row count: `[..., k] -> (rows, k)`.
fn fold_rows(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        _ => {
            let k = shape[shape.len() - 1];
            let rows = shape[..shape.len() - 1].iter().product::<usize>();
            (rows, k)
        }
    }
}

fn axpy(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: ValueId) -> &DifferentiableValue {
        &self.nodes[id.0]
    }

    pub fn data(&self, id: ValueId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: ValueId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn grad(&self, id: ValueId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Removes and returns the gradient buffer of `id`.
    pub fn take_grad(&mut self, id: ValueId) -> Option<Vec<f64>> {
        self.nodes[id.0].grad.take()
    }

    pub fn clear_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Inserts a value that participates in gradient computation when
    /// `requires_grad` is set.
    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> ValueId {
        self.push_node(t.shape, t.data, requires_grad)
    }

    /// Inserts a value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> ValueId {
        self.push_node(t.shape, t.data, false)
    }

    pub fn scalar_constant(&mut self, v: f64) -> ValueId {
        self.constant(Tensor::scalar(v))
    }

    fn push_node(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> ValueId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(DifferentiableValue {
            shape,
            data,
            requires_grad,
            grad: None,
        });
        ValueId(self.nodes.len() - 1)
    }

    fn record(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> ValueId {
        let out = self.push_node(shape, data, requires_grad);
        self.steps.push(Step { out, op });
        out
    }

    fn requires(&self, ids: &[ValueId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// `a @ b` with `a: [..., k]` and `b: [k, n]`.
    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (bshape, ashape) = (self.shape(b).to_vec(), self.shape(a).to_vec());
        if bshape.len() != 2 || ashape.is_empty() {
            return Err(Error::dimension("matmul", &ashape, &bshape));
        }
        let (rows, k) = fold_rows(&ashape);
        if bshape[0] != k {
            return Err(Error::dimension("matmul", &ashape, &bshape));
        }
        let n = bshape[1];
        let mut out = vec![0.0; rows * n];
        general_mat_mul(
            1.0,
            &view2(self.data(a), rows, k),
            &view2(self.data(b), k, n),
            0.0,
            &mut view2_mut(&mut out, rows, n),
        );
        let mut oshape = ashape[..ashape.len() - 1].to_vec();
        oshape.push(n);
        let rg = self.requires(&[a, b]);
        Ok(self.record(oshape, out, rg, Op::Matmul { a, b }))
    }

    /// `a @ b^T` with `a: [..., k]` and `b: [n, k]` stored untransposed.
    pub fn matmul_nt(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (bshape, ashape) = (self.shape(b).to_vec(), self.shape(a).to_vec());
        if bshape.len() != 2 || ashape.is_empty() {
            return Err(Error::dimension("matmul_nt", &ashape, &bshape));
        }
        let (rows, k) = fold_rows(&ashape);
        if bshape[1] != k {
            return Err(Error::dimension("matmul_nt", &ashape, &bshape));
        }
        let n = bshape[0];
        let mut out = vec![0.0; rows * n];
        general_mat_mul(
            1.0,
            &view2(self.data(a), rows, k),
            &view2(self.data(b), n, k).t(),
            0.0,
            &mut view2_mut(&mut out, rows, n),
        );
        let mut oshape = ashape[..ashape.len() - 1].to_vec();
        oshape.push(n);
        let rg = self.requires(&[a, b]);
        Ok(self.record(oshape, out, rg, Op::MatmulNt { a, b }))
    }

    fn elementwise_pair(&self, name: &str, a: ValueId, b: ValueId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dimension(name, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.elementwise_pair("add", a, b)?;
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.requires(&[a, b]);
        Ok(self.record(self.shape(a).to_vec(), data, rg, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.elementwise_pair("sub", a, b)?;
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x - y)
            .collect();
        let rg = self.requires(&[a, b]);
        Ok(self.record(self.shape(a).to_vec(), data, rg, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.elementwise_pair("mul", a, b)?;
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.requires(&[a, b]);
        Ok(self.record(self.shape(a).to_vec(), data, rg, Op::Mul { a, b }))
    }

    /// Adds a `[c]` bias vector to every row of `x: [..., c]`.
    pub fn add_bias(&mut self, x: ValueId, bias: ValueId) -> Result<ValueId> {
        let (xs, bs) = (self.shape(x).to_vec(), self.shape(bias).to_vec());
        let (rows, c) = fold_rows(&xs);
        if bs.len() != 1 || bs[0] != c {
            return Err(Error::dimension("add_bias", &xs, &bs));
        }
        let mut data = self.data(x).to_vec();
        let b = self.data(bias);
        for r in 0..rows {
            for j in 0..c {
                data[r * c + j] += b[j];
            }
        }
        let rg = self.requires(&[x, bias]);
        Ok(self.record(xs, data, rg, Op::AddBias { x, bias }))
    }

    pub fn scale(&mut self, x: ValueId, factor: f64) -> ValueId {
        let data: Vec<f64> = self.data(x).iter().map(|v| v * factor).collect();
        let rg = self.requires(&[x]);
        self.record(self.shape(x).to_vec(), data, rg, Op::Scale { x, factor })
    }

    pub fn relu(&mut self, x: ValueId) -> ValueId {
        let data: Vec<f64> = self.data(x).iter().map(|v| v.max(0.0)).collect();
        let rg = self.requires(&[x]);
        self.record(self.shape(x).to_vec(), data, rg, Op::Relu { x })
    }

    pub fn abs(&mut self, x: ValueId) -> ValueId {
        let data: Vec<f64> = self.data(x).iter().map(|v| v.abs()).collect();
        let rg = self.requires(&[x]);
        self.record(self.shape(x).to_vec(), data, rg, Op::Abs { x })
    }

    pub fn sum_all(&mut self, x: ValueId) -> ValueId {
        let s: f64 = self.data(x).iter().sum();
        let rg = self.requires(&[x]);
        self.record(vec![], vec![s], rg, Op::SumAll { x })
    }

    pub fn mean_all(&mut self, x: ValueId) -> ValueId {
        let n = self.nodes[x.0].numel().max(1);
        let s: f64 = self.data(x).iter().sum();
        let rg = self.requires(&[x]);
        self.record(vec![], vec![s / n as f64], rg, Op::MeanAll { x })
    }

    /// Splits `x: [rows, c]` into `blocks` equal row groups and averages each
    /// group, producing `[blocks, c]`.
    pub fn mean_rows(&mut self, x: ValueId, blocks: usize) -> Result<ValueId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || blocks == 0 || xs[0] % blocks != 0 {
            return Err(Error::dimension("mean_rows", &xs, &[blocks]));
        }
        let (rows, c) = (xs[0], xs[1]);
        let per = rows / blocks;
        let mut data = vec![0.0; blocks * c];
        let xd = self.data(x);
        for b in 0..blocks {
            for r in 0..per {
                let row = &xd[(b * per + r) * c..(b * per + r + 1) * c];
                for j in 0..c {
                    data[b * c + j] += row[j];
                }
            }
            for j in 0..c {
                data[b * c + j] /= per as f64;
            }
        }
        let rg = self.requires(&[x]);
        Ok(self.record(vec![blocks, c], data, rg, Op::MeanRows { x, blocks }))
    }

    /// Concatenation along the last axis. All inputs must agree on every
    /// leading dimension.
    pub fn concat_cols(&mut self, xs: &[ValueId]) -> Result<ValueId> {
        if xs.is_empty() {
            return Err(Error::Contract("concat_cols needs at least one input".into()));
        }
        let first = self.shape(xs[0]).to_vec();
        if first.is_empty() {
            return Err(Error::dimension("concat_cols", &first, &[]));
        }
        let lead = first[..first.len() - 1].to_vec();
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(Error::dimension("concat_cols", &first, s));
            }
            widths.push(s[s.len() - 1]);
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut col = 0;
        for (&x, &w) in xs.iter().zip(&widths) {
            let xd = self.data(x);
            for r in 0..rows {
                data[r * total + col..r * total + col + w].copy_from_slice(&xd[r * w..(r + 1) * w]);
            }
            col += w;
        }
        let mut oshape = lead;
        oshape.push(total);
        let rg = self.requires(xs);
        Ok(self.record(
            oshape,
            data,
            rg,
            Op::ConcatCols {
                xs: xs.to_vec(),
                widths,
            },
        ))
    }

    /// Concatenation along the first axis of 2-D inputs sharing a width.
    pub fn concat_rows(&mut self, xs: &[ValueId]) -> Result<ValueId> {
        if xs.is_empty() {
            return Err(Error::Contract("concat_rows needs at least one input".into()));
        }
        let c = match self.shape(xs[0]) {
            [_, c] => *c,
            s => return Err(Error::dimension("concat_rows", s, &[0, 0])),
        };
        let mut row_counts = Vec::with_capacity(xs.len());
        let mut data = Vec::new();
        for &x in xs {
            match *self.shape(x) {
                [r, cc] if cc == c => row_counts.push(r),
                ref s => return Err(Error::dimension("concat_rows", self.shape(xs[0]), s)),
            }
            data.extend_from_slice(self.data(x));
        }
        let rows: usize = row_counts.iter().sum();
        let rg = self.requires(xs);
        Ok(self.record(
            vec![rows, c],
            data,
            rg,
            Op::ConcatRows {
                xs: xs.to_vec(),
                row_counts,
            },
        ))
    }

    /// Rows `start..start + len` of a 2-D value.
    pub fn slice_rows(&mut self, x: ValueId, start: usize, len: usize) -> Result<ValueId> {
        let (rows, c) = match *self.shape(x) {
            [r, c] => (r, c),
            ref s => return Err(Error::dimension("slice_rows", s, &[0, 0])),
        };
        if start + len > rows {
            return Err(Error::Index(format!(
                "slice_rows: rows {}..{} out of {rows}",
                start,
                start + len
            )));
        }
        let data = self.data(x)[start * c..(start + len) * c].to_vec();
        let rg = self.requires(&[x]);
        Ok(self.record(vec![len, c], data, rg, Op::SliceRows { x, start }))
    }

    /// Vertically repeats a 2-D value `times` times.
    pub fn tile_rows(&mut self, x: ValueId, times: usize) -> Result<ValueId> {
        let (rows, c) = match *self.shape(x) {
            [r, c] => (r, c),
            ref s => return Err(Error::dimension("tile_rows", s, &[0, 0])),
        };
        let mut data = Vec::with_capacity(rows * c * times);
        for _ in 0..times {
            data.extend_from_slice(self.data(x));
        }
        let rg = self.requires(&[x]);
        Ok(self.record(vec![rows * times, c], data, rg, Op::TileRows { x, times }))
    }

    /// Gathers rows of `table: [v, c]` by id; the differentiable form of an
    /// embedding lookup. `context` names the feature in index errors.
    pub fn lookup_rows(&mut self, table: ValueId, ids: &[u32], context: &str) -> Result<ValueId> {
        let (v, c) = match *self.shape(table) {
            [v, c] => (v, c),
            ref s => return Err(Error::dimension("lookup_rows", s, &[0, 0])),
        };
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            let id = id as usize;
            if id >= v {
                return Err(Error::Index(format!(
                    "{context}: id {id} out of vocabulary of size {v}"
                )));
            }
            data.extend_from_slice(&self.data(table)[id * c..(id + 1) * c]);
        }
        let rg = self.requires(&[table]);
        Ok(self.record(
            vec![ids.len(), c],
            data,
            rg,
            Op::LookupRows {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Numerically stabilized softmax along `axis`. Lanes sum to one.
    pub fn softmax(&mut self, x: ValueId, axis: usize) -> Result<ValueId> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Index(format!(
                "softmax: axis {axis} out of rank {}",
                shape.len()
            )));
        }
        if self.data(x).iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("softmax: non-finite input".into()));
        }
        let mut data = self.data(x).to_vec();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for j in 0..len {
                    mx = mx.max(data[at(j)]);
                }
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (data[at(j)] - mx).exp();
                    data[at(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    data[at(j)] /= sum;
                }
            }
        }
        let rg = self.requires(&[x]);
        Ok(self.record(shape, data, rg, Op::Softmax { x, axis }))
    }

    /// Layer normalization over the last axis with affine gain and bias.
    /// A zero-variance row normalizes to zero and therefore returns the bias.
    pub fn layer_norm(&mut self, x: ValueId, gain: ValueId, bias: ValueId) -> Result<ValueId> {
        let xs = self.shape(x).to_vec();
        let (rows, h) = fold_rows(&xs);
        if self.shape(gain) != [h] || self.shape(bias) != [h] {
            return Err(Error::dimension("layer_norm", &xs, self.shape(gain)));
        }
        let mut data = vec![0.0; rows * h];
        let mut mean = vec![0.0; rows];
        let mut inv_std = vec![0.0; rows];
        {
            let xd = self.data(x);
            let g = self.data(gain);
            let b = self.data(bias);
            for r in 0..rows {
                let row = &xd[r * h..(r + 1) * h];
                let mu = row.iter().sum::<f64>() / h as f64;
                let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / h as f64;
                let is = 1.0 / (var + LN_EPSILON).sqrt();
                mean[r] = mu;
                inv_std[r] = is;
                for j in 0..h {
                    data[r * h + j] = (row[j] - mu) * is * g[j] + b[j];
                }
            }
        }
        let rg = self.requires(&[x, gain, bias]);
        Ok(self.record(
            xs,
            data,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                inv_std,
            },
        ))
    }

    /// Inverted dropout: retained activations are scaled by `1/(1-rate)` so
    /// inference needs no rescale. Identity when `train` is false.
    pub fn dropout<R: Rng>(
        &mut self,
        x: ValueId,
        rate: f64,
        train: bool,
        rng: &mut R,
    ) -> Result<ValueId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Validation(format!(
                "dropout rate must be in [0, 1), got {rate}"
            )));
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.nodes[x.0].numel())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let data: Vec<f64> = self.data(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let rg = self.requires(&[x]);
        Ok(self.record(self.shape(x).to_vec(), data, rg, Op::Dropout { x, mask }))
    }

    /// Multi-head scaled dot-product self-attention applied independently to
    /// `blocks` equal row groups of pre-projected Q/K/V (`[(blocks*t), h]`).
    pub fn block_attention(
        &mut self,
        q: ValueId,
        k: ValueId,
        v: ValueId,
        blocks: usize,
        heads: usize,
    ) -> Result<ValueId> {
        let qs = self.shape(q).to_vec();
        if qs.len() != 2 || self.shape(k) != qs || self.shape(v) != qs {
            return Err(Error::dimension("block_attention", &qs, self.shape(k)));
        }
        let (rows, h) = (qs[0], qs[1]);
        if blocks == 0 || rows % blocks != 0 || heads == 0 || h % heads != 0 {
            return Err(Error::Contract(format!(
                "block_attention: rows {rows} / blocks {blocks}, width {h} / heads {heads} must divide"
            )));
        }
        let t = rows / blocks;
        let dh = h / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = vec![0.0; rows * h];
        let mut probs = vec![0.0; blocks * heads * t * t];
        {
            let qd = self.data(q);
            let kd = self.data(k);
            let vd = self.data(v);
            let mut scores = vec![0.0; t * t];
            for b in 0..blocks {
                for head in 0..heads {
                    let qv = subview(qd, h, b * t, head * dh, t, dh);
                    let kv = subview(kd, h, b * t, head * dh, t, dh);
                    let vv = subview(vd, h, b * t, head * dh, t, dh);
                    general_mat_mul(scale, &qv, &kv.t(), 0.0, &mut view2_mut(&mut scores, t, t));
                    for r in 0..t {
                        let row = &mut scores[r * t..(r + 1) * t];
                        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let mut sum = 0.0;
                        for s in row.iter_mut() {
                            *s = (*s - mx).exp();
                            sum += *s;
                        }
                        for s in row.iter_mut() {
                            *s /= sum;
                        }
                    }
                    let pbase = (b * heads + head) * t * t;
                    probs[pbase..pbase + t * t].copy_from_slice(&scores);
                    let pv = view2(&scores, t, t);
                    let mut ov = subview_mut(&mut out, h, b * t, head * dh, t, dh);
                    general_mat_mul(1.0, &pv, &vv, 0.0, &mut ov);
                }
            }
        }
        let rg = self.requires(&[q, k, v]);
        Ok(self.record(
            qs,
            out,
            rg,
            Op::BlockAttention {
                q,
                k,
                v,
                blocks,
                heads,
                probs,
            },
        ))
    }

    /// Reverse pass from a scalar loss. Populates `grad` for every value with
    /// `requires_grad`. Leaf gradients accumulate across repeated calls;
    /// interior gradients are recomputed fresh each call.
    pub fn backward(&mut self, loss: ValueId) -> Result<()> {
        if self.nodes[loss.0].numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        // Interior values (tape outputs) restart from zero; leaves keep any
        // previously accumulated gradient.
        for step in &self.steps {
            let node = &mut self.nodes[step.out.0];
            if node.requires_grad {
                node.grad = Some(vec![0.0; node.data.len()]);
            }
        }
        for node in &mut self.nodes {
            if node.requires_grad && node.grad.is_none() {
                node.grad = Some(vec![0.0; node.data.len()]);
            }
        }
        if let Some(g) = self.nodes[loss.0].grad.as_mut() {
            g[0] += 1.0;
        }
        for i in (0..self.steps.len()).rev() {
            self.propagate(i);
        }
        Ok(())
    }

    /// Applies the chain rule for step `i`, adding into input gradients.
    fn propagate(&mut self, i: usize) {
        let out = self.steps[i].out;
        if self.nodes[out.0].grad.is_none() {
            return;
        }
        let gout = self.nodes[out.0].grad.take().expect("checked");
        let nodes = &mut self.nodes;
        // Gradients are moved out of the node being written so the data of
        // every other node stays readable during the update.
        macro_rules! with_grad {
            ($id:expr, $g:ident, $body:block) => {
                if nodes[$id.0].requires_grad {
                    let mut $g = nodes[$id.0].grad.take().expect("allocated in backward");
                    $body
                    nodes[$id.0].grad = Some($g);
                }
            };
        }
        match &self.steps[i].op {
            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                let (rows, k) = fold_rows(&nodes[a.0].shape);
                let n = nodes[b.0].shape[1];
                with_grad!(a, ga, {
                    general_mat_mul(
                        1.0,
                        &view2(&gout, rows, n),
                        &view2(&nodes[b.0].data, k, n).t(),
                        1.0,
                        &mut view2_mut(&mut ga, rows, k),
                    );
                });
                with_grad!(b, gb, {
                    general_mat_mul(
                        1.0,
                        &view2(&nodes[a.0].data, rows, k).t(),
                        &view2(&gout, rows, n),
                        1.0,
                        &mut view2_mut(&mut gb, k, n),
                    );
                });
            }
            Op::MatmulNt { a, b } => {
                let (a, b) = (*a, *b);
                let (rows, k) = fold_rows(&nodes[a.0].shape);
                let n = nodes[b.0].shape[0];
                with_grad!(a, ga, {
                    general_mat_mul(
                        1.0,
                        &view2(&gout, rows, n),
                        &view2(&nodes[b.0].data, n, k),
                        1.0,
                        &mut view2_mut(&mut ga, rows, k),
                    );
                });
                with_grad!(b, gb, {
                    general_mat_mul(
                        1.0,
                        &view2(&gout, rows, n).t(),
                        &view2(&nodes[a.0].data, rows, k),
                        1.0,
                        &mut view2_mut(&mut gb, n, k),
                    );
                });
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                with_grad!(a, ga, {
                    axpy(&mut ga, &gout);
                });
                with_grad!(b, gb, {
                    axpy(&mut gb, &gout);
                });
            }
            Op::Sub { a, b } => {
                let (a, b) = (*a, *b);
                with_grad!(a, ga, {
                    axpy(&mut ga, &gout);
                });
                with_grad!(b, gb, {
                    for (g, d) in gb.iter_mut().zip(&gout) {
                        *g -= d;
                    }
                });
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                with_grad!(a, ga, {
                    for ((g, d), o) in ga.iter_mut().zip(&gout).zip(&nodes[b.0].data) {
                        *g += d * o;
                    }
                });
                with_grad!(b, gb, {
                    for ((g, d), o) in gb.iter_mut().zip(&gout).zip(&nodes[a.0].data) {
                        *g += d * o;
                    }
                });
            }
            Op::AddBias { x, bias } => {
                let (x, bias) = (*x, *bias);
                let (rows, c) = fold_rows(&nodes[x.0].shape);
                with_grad!(x, gx, {
                    axpy(&mut gx, &gout);
                });
                with_grad!(bias, gb, {
                    for r in 0..rows {
                        for j in 0..c {
                            gb[j] += gout[r * c + j];
                        }
                    }
                });
            }
            Op::Scale { x, factor } => {
                let (x, factor) = (*x, *factor);
                with_grad!(x, gx, {
                    for (g, d) in gx.iter_mut().zip(&gout) {
                        *g += d * factor;
                    }
                });
            }
            Op::Relu { x } => {
                let x = *x;
                with_grad!(x, gx, {
                    for ((g, d), v) in gx.iter_mut().zip(&gout).zip(&nodes[x.0].data) {
                        if *v > 0.0 {
                            *g += d;
                        }
                    }
                });
            }
            Op::Abs { x } => {
                let x = *x;
                with_grad!(x, gx, {
                    for ((g, d), v) in gx.iter_mut().zip(&gout).zip(&nodes[x.0].data) {
                        // subgradient 0 at exactly 0
                        *g += d * if *v > 0.0 {
                            1.0
                        } else if *v < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                    }
                });
            }
            Op::SumAll { x } => {
                let x = *x;
                with_grad!(x, gx, {
                    for g in gx.iter_mut() {
                        *g += gout[0];
                    }
                });
            }
            Op::MeanAll { x } => {
                let x = *x;
                let n = nodes[x.0].numel().max(1) as f64;
                with_grad!(x, gx, {
                    for g in gx.iter_mut() {
                        *g += gout[0] / n;
                    }
                });
            }
            Op::MeanRows { x, blocks } => {
                let (x, blocks) = (*x, *blocks);
                let (rows, c) = fold_rows(&nodes[x.0].shape);
                let per = rows / blocks;
                with_grad!(x, gx, {
                    for b in 0..blocks {
                        for r in 0..per {
                            for j in 0..c {
                                gx[(b * per + r) * c + j] += gout[b * c + j] / per as f64;
                            }
                        }
                    }
                });
            }
            Op::ConcatCols { xs, widths } => {
                let total: usize = widths.iter().sum();
                let rows = gout.len() / total;
                let mut col = 0;
                for (x, w) in xs.iter().zip(widths) {
                    let (x, w) = (*x, *w);
                    with_grad!(x, gx, {
                        for r in 0..rows {
                            for j in 0..w {
                                gx[r * w + j] += gout[r * total + col + j];
                            }
                        }
                    });
                    col += w;
                }
            }
            Op::ConcatRows { xs, row_counts } => {
                let c = nodes[xs[0].0].shape[1];
                let mut row = 0;
                for (x, r) in xs.iter().zip(row_counts) {
                    let (x, r) = (*x, *r);
                    with_grad!(x, gx, {
                        axpy(&mut gx, &gout[row * c..(row + r) * c]);
                    });
                    row += r;
                }
            }
            Op::SliceRows { x, start } => {
                let (x, start) = (*x, *start);
                let c = nodes[x.0].shape[1];
                with_grad!(x, gx, {
                    axpy(&mut gx[start * c..start * c + gout.len()], &gout);
                });
            }
            Op::TileRows { x, times } => {
                let (x, times) = (*x, *times);
                let n = nodes[x.0].numel();
                with_grad!(x, gx, {
                    for tile in 0..times {
                        axpy(&mut gx, &gout[tile * n..(tile + 1) * n]);
                    }
                });
            }
            Op::LookupRows { table, ids } => {
                let table = *table;
                let c = nodes[table.0].shape[1];
                with_grad!(table, gt, {
                    for (row, &id) in ids.iter().enumerate() {
                        let base = id as usize * c;
                        axpy(&mut gt[base..base + c], &gout[row * c..(row + 1) * c]);
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let (x, axis) = (*x, *axis);
                let shape = &nodes[out.0].shape;
                let len = shape[axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let outer: usize = shape[..axis].iter().product();
                if nodes[x.0].requires_grad {
                    let mut gx = nodes[x.0].grad.take().expect("allocated in backward");
                    let y = &nodes[out.0].data;
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let mut dot = 0.0;
                            for j in 0..len {
                                dot += gout[at(j)] * y[at(j)];
                            }
                            for j in 0..len {
                                gx[at(j)] += y[at(j)] * (gout[at(j)] - dot);
                            }
                        }
                    }
                    nodes[x.0].grad = Some(gx);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                inv_std,
            } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let (rows, h) = fold_rows(&nodes[x.0].shape);
                with_grad!(gain, gg, {
                    let xd = &nodes[x.0].data;
                    for r in 0..rows {
                        for j in 0..h {
                            let xhat = (xd[r * h + j] - mean[r]) * inv_std[r];
                            gg[j] += gout[r * h + j] * xhat;
                        }
                    }
                });
                with_grad!(bias, gb, {
                    for r in 0..rows {
                        for j in 0..h {
                            gb[j] += gout[r * h + j];
                        }
                    }
                });
                with_grad!(x, gx, {
                    let xd = &nodes[x.0].data;
                    let g = &nodes[gain.0].data;
                    for r in 0..rows {
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for j in 0..h {
                            let xhat = (xd[r * h + j] - mean[r]) * inv_std[r];
                            let dxhat = gout[r * h + j] * g[j];
                            mean_dxhat += dxhat;
                            mean_dxhat_xhat += dxhat * xhat;
                        }
                        mean_dxhat /= h as f64;
                        mean_dxhat_xhat /= h as f64;
                        for j in 0..h {
                            let xhat = (xd[r * h + j] - mean[r]) * inv_std[r];
                            let dxhat = gout[r * h + j] * g[j];
                            gx[r * h + j] +=
                                inv_std[r] * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                        }
                    }
                });
            }
            Op::Dropout { x, mask } => {
                let x = *x;
                with_grad!(x, gx, {
                    for ((g, d), m) in gx.iter_mut().zip(&gout).zip(mask) {
                        *g += d * m;
                    }
                });
            }
            Op::BlockAttention {
                q,
                k,
                v,
                blocks,
                heads,
                probs,
            } => {
                let (q, k, v) = (*q, *k, *v);
                let (blocks, heads) = (*blocks, *heads);
                let (rows, h) = fold_rows(&nodes[q.0].shape);
                let t = rows / blocks;
                let dh = h / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                // Q, K and V may alias, so contributions are collected in
                // owned buffers and merged afterwards.
                let mut gq = vec![0.0; rows * h];
                let mut gk = vec![0.0; rows * h];
                let mut gv = vec![0.0; rows * h];
                {
                    let qd = &nodes[q.0].data;
                    let kd = &nodes[k.0].data;
                    let vd = &nodes[v.0].data;
                    let mut dp = vec![0.0; t * t];
                    let mut ds = vec![0.0; t * t];
                    for b in 0..blocks {
                        for head in 0..heads {
                            let pbase = (b * heads + head) * t * t;
                            let p = &probs[pbase..pbase + t * t];
                            let go = subview(&gout, h, b * t, head * dh, t, dh);
                            let vv = subview(vd, h, b * t, head * dh, t, dh);
                            let qv = subview(qd, h, b * t, head * dh, t, dh);
                            let kv = subview(kd, h, b * t, head * dh, t, dh);
                            // dV += P^T dO
                            general_mat_mul(
                                1.0,
                                &view2(p, t, t).t(),
                                &go,
                                1.0,
                                &mut subview_mut(&mut gv, h, b * t, head * dh, t, dh),
                            );
                            // dP = dO V^T
                            general_mat_mul(1.0, &go, &vv.t(), 0.0, &mut view2_mut(&mut dp, t, t));
                            // dS = P ⊙ (dP - rowdot(dP, P)), scaled
                            for r in 0..t {
                                let mut dot = 0.0;
                                for j in 0..t {
                                    dot += dp[r * t + j] * p[r * t + j];
                                }
                                for j in 0..t {
                                    ds[r * t + j] = p[r * t + j] * (dp[r * t + j] - dot) * scale;
                                }
                            }
                            // dQ += dS K ; dK += dS^T Q
                            general_mat_mul(
                                1.0,
                                &view2(&ds, t, t),
                                &kv,
                                1.0,
                                &mut subview_mut(&mut gq, h, b * t, head * dh, t, dh),
                            );
                            general_mat_mul(
                                1.0,
                                &view2(&ds, t, t).t(),
                                &qv,
                                1.0,
                                &mut subview_mut(&mut gk, h, b * t, head * dh, t, dh),
                            );
                        }
                    }
                }
                with_grad!(q, g, {
                    axpy(&mut g, &gq);
                });
                with_grad!(k, g, {
                    axpy(&mut g, &gk);
                });
                with_grad!(v, g, {
                    axpy(&mut g, &gv);
                });
            }
        }
        self.nodes[out.0].grad = Some(gout);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{central_difference, max_relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t2(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        Tensor::new(vec![rows, cols], data).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let a = g.constant(t2(2, 2, vec![1.0, 0.0, 0.0, 1.0]));
        let b = g.constant(t2(2, 2, vec![3.0, 4.0, 5.0, 6.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.data(c), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_direct() {
        let mut g = Graph::new();
        let a = g.constant(t2(1, 2, vec![1.0, 2.0]));
        let b = g.constant(t2(2, 1, vec![3.0, 4.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.data(c), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(t2(2, 3, vec![0.0; 6]));
        let b = g.constant(t2(2, 2, vec![0.0; 4]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a0: Vec<f64> = (0..12).map(|_| rng.random::<f64>() - 0.5).collect();
        let b0: Vec<f64> = (0..8).map(|_| rng.random::<f64>() - 0.5).collect();

        let run = |a_data: &[f64], b_data: &[f64]| -> (f64, Vec<f64>, Vec<f64>) {
            let mut g = Graph::new();
            let a = g.leaf(t2(3, 4, a_data.to_vec()), true);
            let b = g.leaf(t2(4, 2, b_data.to_vec()), true);
            let c = g.matmul(a, b).unwrap();
            let loss = g.sum_all(c);
            g.backward(loss).unwrap();
            let l = g.data(loss)[0];
            (l, g.take_grad(a).unwrap(), g.take_grad(b).unwrap())
        };
        let (_, ga, gb) = run(&a0, &b0);

        let fa = central_difference(|x| run(x, &b0).0, &a0, 1e-5);
        let fb = central_difference(|x| run(&a0, x).0, &b0, 1e-5);
        assert!(max_relative_error(&ga, &fa) < 1e-6);
        assert!(max_relative_error(&gb, &fb) < 1e-6);
    }

    #[test]
    fn matmul_nt_matches_explicit_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a: Vec<f64> = (0..6).map(|_| rng.random::<f64>()).collect();
        let b: Vec<f64> = (0..6).map(|_| rng.random::<f64>()).collect();
        let mut g = Graph::new();
        let av = g.constant(t2(2, 3, a.clone()));
        let bv = g.constant(t2(2, 3, b.clone()));
        let c = g.matmul_nt(av, bv).unwrap();
        // manual a @ b^T
        for r in 0..2 {
            for n in 0..2 {
                let want: f64 = (0..3).map(|k| a[r * 3 + k] * b[n * 3 + k]).sum();
                assert!((g.data(c)[r * 2 + n] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.data(y), &[0.5, 0.5]);

        let big = g.constant(Tensor::new(vec![3], vec![1000.0, 1000.0, 1000.0]).unwrap());
        let yb = g.softmax(big, 0).unwrap();
        for v in g.data(yb) {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }

        let z = g.constant(Tensor::new(vec![2], vec![0.0, 3.0_f64.ln()]).unwrap());
        let yz = g.softmax(z, 0).unwrap();
        assert!((g.data(yz)[0] - 0.25).abs() < 1e-12);
        assert!((g.data(yz)[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let data: Vec<f64> = (0..60).map(|_| (rng.random::<f64>() - 0.5) * 200.0).collect();
        let x = g.constant(t2(10, 6, data));
        let y = g.softmax(x, 1).unwrap();
        for r in 0..10 {
            let row = &g.data(y)[r * 6..(r + 1) * 6];
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-9);
            assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2], vec![f64::NAN, 0.0]).unwrap());
        assert!(matches!(g.softmax(x, 0), Err(Error::Numeric(_))));
    }

    #[test]
    fn layer_norm_zero_variance_returns_bias() {
        let mut g = Graph::new();
        let x = g.constant(t2(1, 3, vec![5.0, 5.0, 5.0]));
        let gain = g.constant(Tensor::new(vec![3], vec![1.0; 3]).unwrap());
        let bias = g.constant(Tensor::new(vec![3], vec![0.0; 3]).unwrap());
        let y = g.layer_norm(x, gain, bias).unwrap();
        assert_eq!(g.data(y), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn layer_norm_direct() {
        let mut g = Graph::new();
        let x = g.constant(t2(1, 2, vec![1.0, 3.0]));
        let gain = g.constant(Tensor::new(vec![2], vec![1.0; 2]).unwrap());
        let bias = g.constant(Tensor::new(vec![2], vec![0.0; 2]).unwrap());
        let y = g.layer_norm(x, gain, bias).unwrap();
        assert!((g.data(y)[0] + 1.0).abs() < 1e-4);
        assert!((g.data(y)[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn layer_norm_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0: Vec<f64> = (0..8).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let g0: Vec<f64> = (0..4).map(|_| rng.random::<f64>() + 0.5).collect();
        let b0: Vec<f64> = (0..4).map(|_| rng.random::<f64>() - 0.5).collect();

        let run = |x: &[f64], gn: &[f64], bs: &[f64]| -> (f64, Vec<f64>, Vec<f64>, Vec<f64>) {
            let mut g = Graph::new();
            let xv = g.leaf(t2(2, 4, x.to_vec()), true);
            let gv = g.leaf(Tensor::new(vec![4], gn.to_vec()).unwrap(), true);
            let bv = g.leaf(Tensor::new(vec![4], bs.to_vec()).unwrap(), true);
            let y = g.layer_norm(xv, gv, bv).unwrap();
            // weighted sum so gradients are non-uniform
            let w = g.constant(t2(
                2,
                4,
                vec![0.3, -1.1, 0.7, 2.0, -0.4, 0.9, 1.3, -0.2],
            ));
            let p = g.mul(y, w).unwrap();
            let loss = g.sum_all(p);
            g.backward(loss).unwrap();
            (
                g.data(loss)[0],
                g.take_grad(xv).unwrap(),
                g.take_grad(gv).unwrap(),
                g.take_grad(bv).unwrap(),
            )
        };
        let (_, gx, gg, gb) = run(&x0, &g0, &b0);
        let fx = central_difference(|x| run(x, &g0, &b0).0, &x0, 1e-5);
        let fg = central_difference(|x| run(&x0, x, &b0).0, &g0, 1e-5);
        let fb = central_difference(|x| run(&x0, &g0, x).0, &b0, 1e-5);
        assert!(max_relative_error(&gx, &fx) < 1e-5);
        assert!(max_relative_error(&gg, &fg) < 1e-5);
        assert!(max_relative_error(&gb, &fb) < 1e-5);
    }

    #[test]
    fn dropout_eval_mode_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let x = g.constant(t2(2, 2, vec![1.0, -2.0, 3.0, 4.0]));
        let y = g.dropout(x, 0.1, false, &mut rng).unwrap();
        assert_eq!(x, y); // same node, exact identity
    }

    #[test]
    fn dropout_scales_retained_activations() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1000], vec![1.0; 1000]).unwrap());
        let y = g.dropout(x, 0.4, true, &mut rng).unwrap();
        let keep = 1.0 / 0.6;
        for v in g.data(y) {
            assert!(*v == 0.0 || (*v - keep).abs() < 1e-12);
        }
    }

    #[test]
    fn embedding_lookup_returns_rows() {
        let mut g = Graph::new();
        let table = g.constant(t2(4, 2, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]));
        let y = g.lookup_rows(table, &[2], "test feature").unwrap();
        assert_eq!(g.data(y), &[4.0, 5.0]);
        let err = g.lookup_rows(table, &[9], "weather level").unwrap_err();
        assert!(err.to_string().contains("weather level"));
    }

    #[test]
    fn concat_shapes() {
        let mut g = Graph::new();
        let a = g.constant(t2(2, 3, vec![0.0; 6]));
        let b = g.constant(t2(2, 5, vec![1.0; 10]));
        let c = g.concat_cols(&[a, b]).unwrap();
        assert_eq!(g.shape(c), &[2, 8]);
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut g = Graph::new();
        let x = g.leaf(t2(2, 3, vec![1.0, -2.0, 0.5, 3.0, 4.0, -1.0]), true);
        let loss = g.sum_all(x);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_square_gives_two_x() {
        let data = vec![1.0, -2.0, 0.5, 3.0];
        let mut g = Graph::new();
        let x = g.leaf(t2(2, 2, data.clone()), true);
        let y = g.mul(x, x).unwrap();
        let loss = g.sum_all(y);
        g.backward(loss).unwrap();
        let grad = g.grad(x).unwrap();
        for (gv, xv) in grad.iter().zip(&data) {
            assert!((gv - 2.0 * xv).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut g = Graph::new();
        let x = g.leaf(t2(2, 2, vec![1.0; 4]), true);
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn repeated_backward_accumulates_leaf_grads() {
        let mut g = Graph::new();
        let x = g.leaf(t2(1, 2, vec![1.0, 2.0]), true);
        let loss = g.sum_all(x);
        g.backward(loss).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn block_attention_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let rows = 4; // 2 blocks of 2 tokens
        let h = 4; // 2 heads of width 2
        let n = rows * h;
        let q0: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
        let k0: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
        let v0: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
        let w: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();

        let run = |q: &[f64], k: &[f64], v: &[f64]| -> (f64, Vec<f64>, Vec<f64>, Vec<f64>) {
            let mut g = Graph::new();
            let qv = g.leaf(t2(rows, h, q.to_vec()), true);
            let kv = g.leaf(t2(rows, h, k.to_vec()), true);
            let vv = g.leaf(t2(rows, h, v.to_vec()), true);
            let o = g.block_attention(qv, kv, vv, 2, 2).unwrap();
            let wv = g.constant(t2(rows, h, w.clone()));
            let p = g.mul(o, wv).unwrap();
            let loss = g.sum_all(p);
            g.backward(loss).unwrap();
            (
                g.data(loss)[0],
                g.take_grad(qv).unwrap(),
                g.take_grad(kv).unwrap(),
                g.take_grad(vv).unwrap(),
            )
        };
        let (_, gq, gk, gv) = run(&q0, &k0, &v0);
        let fq = central_difference(|x| run(x, &k0, &v0).0, &q0, 1e-5);
        let fk = central_difference(|x| run(&q0, x, &v0).0, &k0, 1e-5);
        let fv = central_difference(|x| run(&q0, &k0, x).0, &v0, 1e-5);
        assert!(max_relative_error(&gq, &fq) < 1e-5);
        assert!(max_relative_error(&gk, &fk) < 1e-5);
        assert!(max_relative_error(&gv, &fv) < 1e-5);
    }

    #[test]
    fn block_attention_blocks_are_independent() {
        // Changing block 1's inputs must not change block 0's outputs.
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let base: Vec<f64> = (0..4 * 4).map(|_| rng.random::<f64>()).collect();
        let mut altered = base.clone();
        for v in &mut altered[8..] {
            *v += 1.0;
        }
        let out = |data: &Vec<f64>| {
            let mut g = Graph::new();
            let x = g.constant(t2(4, 4, data.clone()));
            let o = g.block_attention(x, x, x, 2, 2).unwrap();
            g.data(o)[..8].to_vec()
        };
        assert_eq!(out(&base), out(&altered));
    }

    #[test]
    fn mean_rows_blocks() {
        let mut g = Graph::new();
        let x = g.constant(t2(4, 2, vec![1.0, 2.0, 3.0, 4.0, 10.0, 20.0, 30.0, 40.0]));
        let y = g.mean_rows(x, 2).unwrap();
        assert_eq!(g.data(y), &[2.0, 3.0, 20.0, 30.0]);
    }

    #[test]
    fn determinism_same_seed_same_dropout() {
        let run = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g = Graph::new();
            let x = g.constant(Tensor::new(vec![64], vec![1.0; 64]).unwrap());
            let y = g.dropout(x, 0.3, true, &mut rng).unwrap();
            g.data(y).to_vec()
        };
        assert_eq!(run(5), run(5));
        assert_ne!(run(5), run(6));
    }
}
