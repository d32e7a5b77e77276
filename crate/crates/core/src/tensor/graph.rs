use super::kernels::{dot, matmul_acc, matmul_nt_acc, matmul_tn_acc, norm};
use super::Tensor;
use crate::error::{Error, Result};

/// Variance floor inside the layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a tensor recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine {
        x: Var,
        scale: f64,
    },
    Relu(Var),
    Exp(Var),
    Ln(Var),
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Sum(Var),
    MeanAxis {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Softmax(Var),
    MaskedSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    GatherElems {
        x: Var,
        idx: Vec<usize>,
    },
    Slice {
        x: Var,
        row0: usize,
        col0: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SegmentMean {
        x: Var,
        segments: Vec<(usize, usize)>,
    },
    CosineSim {
        u: Var,
        v: Var,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    Reshape(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Eager computation record. Operations are appended in execution order, so
/// node indices are already a topological order of the graph.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Norm floor used by `normalize_rows`.
pub const NORM_EPS: f64 = 1e-12;

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
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

    /// Records an input tensor. Its `requires_grad` flag decides whether
    /// `backward` will produce a gradient for it.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        let rg = inputs.iter().any(|v| self.nodes[v.0].value.requires_grad());
        let t = Tensor::new(shape, data)?.with_requires_grad(rg);
        Ok(self.push(t, op))
    }

    fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    // ── linear algebra ───────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.dims2("matmul")?;
        let (k2, n) = tb.dims2("matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(ta.data(), tb.data(), &mut out, m, k, n);
        self.push_op(vec![m, n], out, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.dims2("matmul_nt")?;
        let (n, k2) = tb.dims2("matmul_nt")?;
        if k != k2 {
            return Err(shape_err("matmul_nt", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        matmul_nt_acc(ta.data(), tb.data(), &mut out, m, k, n);
        self.push_op(vec![m, n], out, Op::MatMulNT(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = ta.dims2("transpose")?;
        let out = transpose(ta.data(), m, n);
        self.push_op(vec![n, m], out, Op::Transpose(a), &[a])
    }

    // ── elementwise ──────────────────────────────────────────────────

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, ta, tb));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = ta.shape().to_vec();
        self.push_op(shape, out, op, &[a, b])
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let tx = self.value(x);
        let out = tx.data().iter().map(|&v| f(v)).collect();
        let shape = tx.shape().to_vec();
        self.push_op(shape, out, op, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds a bias vector to every slice along the last dimension.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let c = tx.last_dim();
        if tb.numel() != c {
            return Err(shape_err("add_row", tx, tb));
        }
        let b = tb.data();
        let out = tx
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let shape = tx.shape().to_vec();
        self.push_op(shape, out, Op::AddRow(x, bias), &[x, bias])
    }

    /// `scale · x + shift`
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        self.map(x, Op::Affine { x, scale }, |v| scale * v + shift)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.affine(x, s, 0.0)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Relu(x), |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Exp(x), f64::exp)
    }

    /// Natural log; inputs must be strictly positive.
    pub fn ln(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.data(x).iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(Error::contract(format!("ln of non-positive value {bad}")));
        }
        self.map(x, Op::Ln(x), f64::ln)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.map(x, Op::Clamp { x, lo, hi }, |v| v.clamp(lo, hi))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().sum();
        self.push_op(vec![1], vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Arithmetic mean along `axis`; the axis is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        let shape = tx.shape();
        if axis >= shape.len() {
            return Err(Error::Index {
                what: "axis",
                index: axis,
                len: shape.len(),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let d = tx.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += d[base + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= len as f64);
        let mut new_shape: Vec<usize> = shape[..axis].iter().chain(&shape[axis + 1..]).copied().collect();
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        self.push_op(new_shape, out, Op::MeanAxis { x, outer, len, inner }, &[x])
    }

    // ── normalisation ────────────────────────────────────────────────

    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.last_dim();
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row, None);
        }
        let shape = tx.shape().to_vec();
        self.push_op(shape, out, Op::Softmax(x), &[x])
    }

    /// Softmax over the entries where `keep` is true; the rest get exactly 0.
    /// A slice with nothing kept is an error rather than a NaN row.
    pub fn masked_softmax(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let tx = self.value(x);
        if keep.len() != tx.numel() {
            return Err(Error::Shape {
                op: "masked_softmax",
                lhs: tx.shape().to_vec(),
                rhs: vec![keep.len()],
            });
        }
        let c = tx.last_dim();
        let mut out = tx.data().to_vec();
        for (r, (row, mask)) in out.chunks_mut(c).zip(keep.chunks(c)).enumerate() {
            if !mask.iter().any(|&k| k) {
                return Err(Error::contract(format!("masked_softmax: slice {r} is fully masked")));
            }
            softmax_in_place(row, Some(mask));
        }
        let shape = tx.shape().to_vec();
        self.push_op(shape, out, Op::MaskedSoftmax(x), &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let c = tx.last_dim();
        if tg.numel() != c {
            return Err(shape_err("layer_norm", tx, tg));
        }
        if tb.numel() != c {
            return Err(shape_err("layer_norm", tx, tb));
        }
        let (g, b) = (tg.data(), tb.data());
        let rows = tx.numel() / c;
        let mut xhat = vec![0.0; tx.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.numel()];
        for (r, row) in tx.data().chunks(c).enumerate() {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = inv;
            for j in 0..c {
                let h = (row[j] - mean) * inv;
                xhat[r * c + j] = h;
                out[r * c + j] = g[j] * h + b[j];
            }
        }
        let shape = tx.shape().to_vec();
        self.push_op(
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    /// Divides every row by `max(‖row‖, NORM_EPS)`, so zero rows stay zero.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.last_dim();
        let mut out = tx.data().to_vec();
        let mut norms = Vec::with_capacity(out.len() / c);
        for row in out.chunks_mut(c) {
            let n = norm(row).max(NORM_EPS);
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let shape = tx.shape().to_vec();
        self.push_op(shape, out, Op::NormalizeRows { x, norms }, &[x])
    }

    /// `uᵀv / (‖u‖ ‖v‖)` for two tensors with the same number of elements.
    pub fn cosine_sim(&mut self, u: Var, v: Var) -> Result<Var> {
        let (tu, tv) = (self.value(u), self.value(v));
        if tu.numel() != tv.numel() {
            return Err(shape_err("cosine_sim", tu, tv));
        }
        let (nu, nv) = (norm(tu.data()), norm(tv.data()));
        if nu == 0.0 || nv == 0.0 {
            return Err(Error::contract("cosine_sim of a zero-norm vector"));
        }
        let s = dot(tu.data(), tv.data()) / (nu * nv);
        self.push_op(vec![1], vec![s], Op::CosineSim { u, v }, &[u, v])
    }

    // ── indexing and layout ──────────────────────────────────────────

    /// Row gather from a rank-2 table; backward scatter-adds into the table.
    pub fn embedding_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (rows, cols) = tt.dims2("embedding_rows")?;
        if ids.is_empty() {
            return Err(Error::contract("embedding_rows: empty id list"));
        }
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(Error::Index {
                    what: "embedding table",
                    index: id,
                    len: rows,
                });
            }
            out.extend_from_slice(tt.row(id));
        }
        self.push_op(
            vec![ids.len(), cols],
            out,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// Picks individual elements by flat index into a vector of `idx.len()`.
    pub fn gather_elems(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        if idx.is_empty() {
            return Err(Error::contract("gather_elems: empty index list"));
        }
        let mut out = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= tx.numel() {
                return Err(Error::Index {
                    what: "tensor",
                    index: i,
                    len: tx.numel(),
                });
            }
            out.push(tx.data()[i]);
        }
        self.push_op(vec![idx.len()], out, Op::GatherElems { x, idx: idx.to_vec() }, &[x])
    }

    /// Rectangular window `[row0, row0+rows) × [col0, col0+cols)` of a matrix.
    pub fn slice(&mut self, x: Var, row0: usize, rows: usize, col0: usize, cols: usize) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = tx.dims2("slice")?;
        if rows == 0 || cols == 0 || row0 + rows > r || col0 + cols > c {
            return Err(Error::Shape {
                op: "slice",
                lhs: vec![r, c],
                rhs: vec![row0 + rows, col0 + cols],
            });
        }
        let d = tx.data();
        let mut out = Vec::with_capacity(rows * cols);
        for i in row0..row0 + rows {
            out.extend_from_slice(&d[i * c + col0..i * c + col0 + cols]);
        }
        self.push_op(vec![rows, cols], out, Op::Slice { x, row0, col0 }, &[x])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::contract("concat_rows: no inputs"))?;
        let (_, c) = self.value(*first).dims2("concat_rows")?;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let tp = self.value(p);
            let (r, pc) = tp.dims2("concat_rows")?;
            if pc != c {
                return Err(shape_err("concat_rows", self.value(*first), tp));
            }
            rows += r;
            out.extend_from_slice(tp.data());
        }
        self.push_op(vec![rows, c], out, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::contract("concat_cols: no inputs"))?;
        let (r, _) = self.value(*first).dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let tp = self.value(p);
            let (pr, pc) = tp.dims2("concat_cols")?;
            if pr != r {
                return Err(shape_err("concat_cols", self.value(*first), tp));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; r * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let d = self.value(p).data();
            for i in 0..r {
                out[i * total + off..i * total + off + w].copy_from_slice(&d[i * w..(i + 1) * w]);
            }
            off += w;
        }
        self.push_op(vec![r, total], out, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Mean of each `(start, len)` block of rows; output has one row per block.
    pub fn segment_mean(&mut self, x: Var, segments: &[(usize, usize)]) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = tx.dims2("segment_mean")?;
        if segments.is_empty() {
            return Err(Error::contract("segment_mean: no segments"));
        }
        let d = tx.data();
        let mut out = vec![0.0; segments.len() * c];
        for (s, &(start, len)) in segments.iter().enumerate() {
            if len == 0 || start + len > r {
                return Err(Error::contract(format!(
                    "segment_mean: segment ({start}, {len}) invalid for {r} rows"
                )));
            }
            let o = &mut out[s * c..(s + 1) * c];
            for i in start..start + len {
                o.iter_mut().zip(&d[i * c..(i + 1) * c]).for_each(|(a, b)| *a += b);
            }
            o.iter_mut().for_each(|v| *v /= len as f64);
        }
        self.push_op(
            vec![segments.len(), c],
            out,
            Op::SegmentMean {
                x,
                segments: segments.to_vec(),
            },
            &[x],
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let data = tx.data().to_vec();
        self.push_op(shape.to_vec(), data, Op::Reshape(x), &[x])
    }

    // ── reverse pass ─────────────────────────────────────────────────

    /// Accumulates `d loss / d node` into every node that requires a gradient.
    /// Calling it twice on the same graph adds the gradients again.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.needs_grad(loss) {
            return Ok(());
        }
        self.nodes[loss.0].value.accumulate_grad(&[1.0]);
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].value.requires_grad() {
                continue;
            }
            let Some(g) = self.nodes[i].value.take_grad() else {
                continue;
            };
            let (dense, sparse) = self.local_grads(i, &g);
            self.nodes[i].value.set_grad(Some(g));
            for (v, cg) in dense {
                if self.needs_grad(v) {
                    self.nodes[v.0].value.accumulate_grad(&cg);
                }
            }
            for (v, cg) in sparse {
                if self.needs_grad(v) {
                    self.nodes[v.0].value.accumulate_grad_at(&cg);
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `i` with upstream gradient `g`, as
    /// dense buffers and as `(flat index, value)` lists for indexing ops.
    #[allow(clippy::type_complexity)]
    fn local_grads(&self, i: usize, g: &[f64]) -> (Vec<(Var, Vec<f64>)>, Vec<(Var, Vec<(usize, f64)>)>) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let want = |v: Var| self.needs_grad(v);
        let mut res = Vec::new();
        let mut sparse = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2("").unwrap();
                let n = self.value(*b).last_dim();
                if want(*a) {
                    let mut ga = vec![0.0; m * k];
                    matmul_nt_acc(g, val(*b), &mut ga, m, n, k);
                    res.push((*a, ga));
                }
                if want(*b) {
                    let mut gb = vec![0.0; k * n];
                    matmul_tn_acc(val(*a), g, &mut gb, m, k, n);
                    res.push((*b, gb));
                }
            }
            Op::MatMulNT(a, b) => {
                // c = a bᵀ, a: m×k, b: n×k
                let (m, k) = self.value(*a).dims2("").unwrap();
                let n = self.value(*b).shape()[0];
                if want(*a) {
                    let mut ga = vec![0.0; m * k];
                    matmul_acc(g, val(*b), &mut ga, m, n, k);
                    res.push((*a, ga));
                }
                if want(*b) {
                    let mut gb = vec![0.0; n * k];
                    matmul_tn_acc(g, val(*a), &mut gb, m, n, k);
                    res.push((*b, gb));
                }
            }
            Op::Transpose(a) => {
                let (m, n) = self.value(*a).dims2("").unwrap();
                res.push((*a, transpose(g, n, m)));
            }
            Op::Add(a, b) => {
                res.push((*a, g.to_vec()));
                res.push((*b, g.to_vec()));
            }
            Op::Sub(a, b) => {
                res.push((*a, g.to_vec()));
                res.push((*b, g.iter().map(|v| -v).collect()));
            }
            Op::Mul(a, b) => {
                let (da, db) = (val(*a), val(*b));
                res.push((*a, g.iter().zip(db).map(|(x, y)| x * y).collect()));
                res.push((*b, g.iter().zip(da).map(|(x, y)| x * y).collect()));
            }
            Op::AddRow(x, bias) => {
                res.push((*x, g.to_vec()));
                if want(*bias) {
                    let c = self.value(*bias).numel();
                    let mut gb = vec![0.0; c];
                    for row in g.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    res.push((*bias, gb));
                }
            }
            Op::Affine { x, scale } => res.push((*x, g.iter().map(|v| v * scale).collect())),
            Op::Relu(x) => {
                let dx = val(*x);
                res.push((
                    *x,
                    g.iter()
                        .zip(dx)
                        .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                        .collect(),
                ));
            }
            Op::Exp(x) => res.push((*x, g.iter().zip(out).map(|(a, b)| a * b).collect())),
            Op::Ln(x) => res.push((*x, g.iter().zip(val(*x)).map(|(a, b)| a / b).collect())),
            Op::Clamp { x, lo, hi } => {
                let dx = val(*x);
                res.push((
                    *x,
                    g.iter()
                        .zip(dx)
                        .map(|(gv, &xv)| if xv >= *lo && xv <= *hi { *gv } else { 0.0 })
                        .collect(),
                ));
            }
            Op::Sum(x) => res.push((*x, vec![g[0]; self.value(*x).numel()])),
            Op::MeanAxis { x, outer, len, inner } => {
                let mut gx = vec![0.0; outer * len * inner];
                let s = 1.0 / *len as f64;
                for o in 0..*outer {
                    for l in 0..*len {
                        for j in 0..*inner {
                            gx[(o * len + l) * inner + j] = g[o * inner + j] * s;
                        }
                    }
                }
                res.push((*x, gx));
            }
            Op::Softmax(x) | Op::MaskedSoftmax(x) => {
                let c = node.value.last_dim();
                let mut gx = vec![0.0; g.len()];
                for ((gr, yr), dr) in g.chunks(c).zip(out.chunks(c)).zip(gx.chunks_mut(c)) {
                    let s = dot(gr, yr);
                    for j in 0..c {
                        dr[j] = yr[j] * (gr[j] - s);
                    }
                }
                res.push((*x, gx));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let c = node.value.last_dim();
                let gn = val(*gain);
                if want(*gain) {
                    let mut gg = vec![0.0; c];
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                    res.push((*gain, gg));
                }
                if want(*bias) {
                    let mut gb = vec![0.0; c];
                    for gr in g.chunks(c) {
                        gb.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                    }
                    res.push((*bias, gb));
                }
                if want(*x) {
                    let mut gx = vec![0.0; g.len()];
                    let cf = c as f64;
                    for (r, ((gr, hr), dr)) in g.chunks(c).zip(xhat.chunks(c)).zip(gx.chunks_mut(c)).enumerate() {
                        let mut sum_d = 0.0;
                        let mut sum_dh = 0.0;
                        for j in 0..c {
                            let dh = gr[j] * gn[j];
                            sum_d += dh;
                            sum_dh += dh * hr[j];
                        }
                        let inv = inv_std[r];
                        for j in 0..c {
                            let dh = gr[j] * gn[j];
                            dr[j] = inv / cf * (cf * dh - sum_d - hr[j] * sum_dh);
                        }
                    }
                    res.push((*x, gx));
                }
            }
            Op::GatherRows { table, ids } => {
                let c = self.value(*table).last_dim();
                let gt = ids
                    .iter()
                    .enumerate()
                    .flat_map(|(r, &id)| (0..c).map(move |j| (id * c + j, g[r * c + j])))
                    .collect();
                sparse.push((*table, gt));
            }
            Op::GatherElems { x, idx } => {
                sparse.push((*x, idx.iter().copied().zip(g.iter().copied()).collect()));
            }
            Op::Slice { x, row0, col0 } => {
                let (_, c) = self.value(*x).dims2("").unwrap();
                let (rows, cols) = node.value.dims2("").unwrap();
                let gx = (0..rows)
                    .flat_map(|i| (0..cols).map(move |j| ((row0 + i) * c + col0 + j, g[i * cols + j])))
                    .collect();
                sparse.push((*x, gx));
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    res.push((p, g[off..off + n].to_vec()));
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let (r, total) = node.value.dims2("").unwrap();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    let mut gp = Vec::with_capacity(r * w);
                    for i in 0..r {
                        gp.extend_from_slice(&g[i * total + off..i * total + off + w]);
                    }
                    res.push((p, gp));
                    off += w;
                }
            }
            Op::SegmentMean { x, segments } => {
                let c = node.value.last_dim();
                let mut gx = vec![0.0; self.value(*x).numel()];
                for (s, &(start, len)) in segments.iter().enumerate() {
                    let inv = 1.0 / len as f64;
                    let gs = &g[s * c..(s + 1) * c];
                    for i in start..start + len {
                        gx[i * c..(i + 1) * c]
                            .iter_mut()
                            .zip(gs)
                            .for_each(|(a, b)| *a += b * inv);
                    }
                }
                res.push((*x, gx));
            }
            Op::CosineSim { u, v } => {
                let (du, dv) = (val(*u), val(*v));
                let (nu, nv) = (norm(du), norm(dv));
                let s = out[0];
                let g0 = g[0];
                if want(*u) {
                    res.push((
                        *u,
                        du.iter()
                            .zip(dv)
                            .map(|(a, b)| g0 * (b / (nu * nv) - s * a / (nu * nu)))
                            .collect(),
                    ));
                }
                if want(*v) {
                    res.push((
                        *v,
                        du.iter()
                            .zip(dv)
                            .map(|(a, b)| g0 * (a / (nu * nv) - s * b / (nv * nv)))
                            .collect(),
                    ));
                }
            }
            Op::NormalizeRows { x, norms } => {
                let c = node.value.last_dim();
                let mut gx = vec![0.0; g.len()];
                for (r, ((gr, yr), dr)) in g.chunks(c).zip(out.chunks(c)).zip(gx.chunks_mut(c)).enumerate() {
                    if norms[r] <= NORM_EPS {
                        dr.iter_mut().zip(gr).for_each(|(d, v)| *d = v / NORM_EPS);
                        continue;
                    }
                    let s = dot(gr, yr);
                    for j in 0..c {
                        dr[j] = (gr[j] - yr[j] * s) / norms[r];
                    }
                }
                res.push((*x, gx));
            }
            Op::Reshape(x) => res.push((*x, g.to_vec())),
        }
        (res, sparse)
    }
}

fn transpose(d: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = d[i * n + j];
        }
    }
    out
}

fn softmax_in_place(row: &mut [f64], keep: Option<&[bool]>) {
    let kept = |j: usize| keep.is_none_or(|k| k[j]);
    let max = (0..row.len())
        .filter(|&j| kept(j))
        .map(|j| row[j])
        .fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (j, v) in row.iter_mut().enumerate() {
        if kept(j) {
            *v = (*v - max).exp();
            sum += *v;
        } else {
            *v = 0.0;
        }
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    fn vecn(v: &[f64]) -> Tensor {
        Tensor::vector(v.to_vec()).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let i2 = g.constant(Tensor::identity(2));
        let m = g.constant(mat(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let r = g.matmul(i2, m).unwrap();
        assert_eq!(g.data(r), &[1.0, 2.0, 3.0, 4.0]);

        let p = g.constant(mat(&[&[1.0, 0.0], &[0.0, 0.0]]));
        let b = g.constant(mat(&[&[5.0, 6.0], &[7.0, 8.0]]));
        let r = g.matmul(p, b).unwrap();
        assert_eq!(g.data(r), &[5.0, 6.0, 0.0, 0.0]);

        let ones = g.constant(mat(&[&[1.0], &[1.0]]));
        let r = g.matmul(m, ones).unwrap();
        assert_eq!(g.shape(r), &[2, 1]);
        assert_eq!(g.data(r), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(vecn(&[0.0, 0.0]));
        let y = g.softmax_lastdim(x).unwrap();
        assert_eq!(g.data(y), &[0.5, 0.5]);

        let x = g.constant(vecn(&[0.0, 3f64.ln()]));
        let y = g.softmax_lastdim(x).unwrap();
        close(g.data(y), &[0.25, 0.75], 1e-15);

        let x = g.constant(vecn(&[1000.0, 1000.0]));
        let y = g.softmax_lastdim(x).unwrap();
        assert_eq!(g.data(y), &[0.5, 0.5]);
    }

    #[test]
    fn masked_softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(vecn(&[5.0, 7.0]));
        let y = g.masked_softmax(x, &[true, false]).unwrap();
        assert_eq!(g.data(y), &[1.0, 0.0]);

        let x = g.constant(vecn(&[0.0, 0.0, 0.0]));
        let y = g.masked_softmax(x, &[true, true, false]).unwrap();
        assert_eq!(g.data(y), &[0.5, 0.5, 0.0]);

        let x = g.constant(vecn(&[0.0, 0.0]));
        assert!(matches!(g.masked_softmax(x, &[false, false]), Err(Error::Contract(_))));
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let one3 = g.constant(Tensor::full(&[3], 1.0));
        let zero3 = g.constant(Tensor::zeros(&[3]));
        let x = g.constant(vecn(&[1.0, 1.0, 1.0]));
        let y = g.layer_norm(x, one3, zero3).unwrap();
        assert_eq!(g.data(y), &[0.0, 0.0, 0.0]);

        let x = g.constant(vecn(&[-1.0, 1.0]));
        let one2 = g.constant(Tensor::full(&[2], 1.0));
        let zero2 = g.constant(Tensor::zeros(&[2]));
        let y = g.layer_norm(x, one2, zero2).unwrap();
        // 1/sqrt(1 + 1e-5)
        let s = 1.0 / (1.0f64 + 1e-5).sqrt();
        close(g.data(y), &[-s, s], 1e-15);

        let gain = g.constant(Tensor::full(&[2], 2.0));
        let bias = g.constant(Tensor::full(&[2], 3.0));
        let y = g.layer_norm(x, gain, bias).unwrap();
        close(g.data(y), &[1.0, 5.0], 1e-4);
    }

    #[test]
    fn relu_and_cosine_examples() {
        let mut g = Graph::new();
        let x = g.constant(vecn(&[1.0, -1.0]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.data(y), &[1.0, 0.0]);

        let e1 = g.constant(vecn(&[1.0, 0.0]));
        let e2 = g.constant(vecn(&[0.0, 1.0]));
        let c = g.cosine_sim(e1, e2).unwrap();
        assert_eq!(g.scalar(c), 0.0);
        let v = g.constant(vecn(&[0.3, -2.0, 5.0]));
        let c = g.cosine_sim(v, v).unwrap();
        assert!((g.scalar(c) - 1.0).abs() < 1e-15);
        let a = g.constant(vecn(&[3.0, 4.0]));
        let b = g.constant(vecn(&[4.0, 3.0]));
        let c = g.cosine_sim(a, b).unwrap();
        assert!((g.scalar(c) - 0.96).abs() < 1e-15);

        let z = g.constant(vecn(&[0.0, 0.0]));
        assert!(matches!(g.cosine_sim(z, a), Err(Error::Contract(_))));
    }

    #[test]
    fn embedding_rows_bounds() {
        let mut g = Graph::new();
        let t = g.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(g.embedding_rows(t, &[0, 3]), Err(Error::Index { .. })));
    }

    #[test]
    fn mean_axis_shapes() {
        let mut g = Graph::new();
        let x = g.constant(mat(&[&[1.0, 2.0, 3.0], &[3.0, 4.0, 5.0]]));
        let m0 = g.mean_axis(x, 0).unwrap();
        assert_eq!(g.data(m0), &[2.0, 3.0, 4.0]);
        let m1 = g.mean_axis(x, 1).unwrap();
        assert_eq!(g.data(m1), &[2.0, 4.0]);
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::new();
        let x = g.param(vecn(&[1.0, -1.0]));
        let r = g.relu(x).unwrap();
        let l = g.sum(r).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0]);

        let mut g = Graph::new();
        let x = g.param(vecn(&[3.0]));
        let sq = g.mul(x, x).unwrap();
        let l = g.sum(sq).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(vecn(&[1.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn two_branches_sum_their_gradients() {
        // L = sum(2x) + sum(x*x) → dL/dx = 2 + 2x
        let mut g = Graph::new();
        let x = g.param(vecn(&[0.5, -1.5]));
        let a = g.scale(x, 2.0).unwrap();
        let b = g.mul(x, x).unwrap();
        let sa = g.sum(a).unwrap();
        let sb = g.sum(b).unwrap();
        let l = g.add(sa, sb).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[3.0, -1.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.param(vecn(&[1.0, 2.0]));
        let c = g.constant(vecn(&[3.0, 4.0]));
        let p = g.mul(x, c).unwrap();
        let l = g.sum(p).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[3.0, 4.0]);
        assert!(g.grad(c).is_none());
    }
}
