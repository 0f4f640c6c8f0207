//! Tape-based reverse-mode autodiff over dense f64 tensors.
//!
//! A `Graph` owns every node produced during a forward pass. Ops append
//! nodes and record their parents; `backward` walks the tape in reverse.
//! Nodes are only "tracked" when they depend on a leaf that requires
//! gradients, so frozen parameters never receive gradient buffers.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Matmul(Var, Var),
    Transpose(Var),
    Embedding { table: Var, ids: Vec<usize> },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize, end: usize },
    SliceRows { x: Var, start: usize, end: usize },
    Reshape(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var },
    Gelu(Var),
    Softmax(Var),
    MeanAxis { x: Var, axis: usize },
    SumAll(Var),
    MeanAll(Var),
    CrossEntropy { logits: Var, targets: Vec<usize> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Matmul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Embedding { .. } => "embedding",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::Reshape(..) => "reshape",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(..) => "gelu",
            Op::Softmax(..) => "softmax",
            Op::MeanAxis { .. } => "mean_axis",
            Op::SumAll(..) => "sum_all",
            Op::MeanAll(..) => "mean_all",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    tracked: bool,
    op: Op,
    /// Forward-pass caches needed by backward (layer norm stats, CE probs).
    aux: Vec<f64>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Strides into `src` for each axis of `out`, zero where `src` broadcasts.
/// `src` is right-aligned against `out`; every axis must match or be 1.
fn broadcast_strides(out_shape: &[usize], src_shape: &[usize]) -> Option<Vec<usize>> {
    if src_shape.len() > out_shape.len() {
        return None;
    }
    let pad = out_shape.len() - src_shape.len();
    let mut strides = vec![0usize; out_shape.len()];
    let mut s = 1usize;
    for i in (0..src_shape.len()).rev() {
        let dim = src_shape[i];
        if dim == out_shape[pad + i] {
            strides[pad + i] = if dim == 1 { 0 } else { s };
        } else if dim == 1 {
            strides[pad + i] = 0;
        } else {
            return None;
        }
        s *= dim;
    }
    Some(strides)
}

/// Maps every flat index of `out_shape` to a flat index of the broadcast
/// source, invoking `f(out_flat, src_flat)`.
fn for_each_broadcast(out_shape: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let nd = out_shape.len();
    let total = numel(out_shape);
    let mut idx = vec![0usize; nd];
    for flat in 0..total {
        let src: usize = idx.iter().zip(strides).map(|(i, s)| i * s).sum();
        f(flat, src);
        for d in (0..nd).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
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

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, tracked: bool, aux: Vec<f64>) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node {
            shape,
            data,
            grad: None,
            tracked,
            op,
            aux,
        });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    /// The single value of a scalar node.
    pub fn value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Copies a gradient out of the graph into the tensor's grad slot.
    /// Leaves the slot as `None` when the graph holds no gradient.
    pub fn write_grad(&self, v: Var, t: &mut Tensor) {
        t.grad = self.nodes[v.0].grad.clone();
    }

    /// Number of nodes per op kind, for structural assertions in tests.
    pub fn op_counts(&self) -> std::collections::BTreeMap<&'static str, usize> {
        let mut m = std::collections::BTreeMap::new();
        for n in &self.nodes {
            *m.entry(n.op.name()).or_insert(0) += 1;
        }
        m
    }

    // ── Leaves ──────────────────────────────────────────────────────────

    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.leaf_tracked(t, t.requires_grad)
    }

    pub fn leaf_tracked(&mut self, t: &Tensor, tracked: bool) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, tracked, vec![])
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        if numel(shape) != data.len() {
            return Err(Error::invalid(format!(
                "constant: shape {:?} wants {} values, got {}",
                shape,
                numel(shape),
                data.len()
            )));
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf, false, vec![]))
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.push(vec![1], vec![v], Op::Leaf, false, vec![])
    }

    // ── Elementwise and broadcast ───────────────────────────────────────

    /// `a + b` where `b` broadcasts into `a` over leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let strides = broadcast_strides(&sa, &sb).ok_or(Error::ShapeMismatch {
            op: "add",
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let mut out = self.nodes[a.0].data.clone();
        {
            let bd = &self.nodes[b.0].data;
            for_each_broadcast(&sa, &strides, |o, s| out[o] += bd[s]);
        }
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(sa, out, Op::Add(a, b), tracked, vec![]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op: "sub",
                lhs: sa,
                rhs: sb,
            });
        }
        let out: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x - y)
            .collect();
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(sa, out, Op::Sub(a, b), tracked, vec![]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: sa,
                rhs: sb,
            });
        }
        let out: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(sa, out, Op::Mul(a, b), tracked, vec![]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x * c).collect();
        let tracked = self.tracked(a);
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, c), tracked, vec![])
    }

    // ── Linear algebra ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        {
            let ad = &self.nodes[a.0].data;
            let bd = &self.nodes[b.0].data;
            for i in 0..m {
                let arow = &ad[i * k..(i + 1) * k];
                let crow = &mut out[i * n..(i + 1) * n];
                for (p, &av) in arow.iter().enumerate() {
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &bd[p * n..(p + 1) * n];
                    for (c, &bv) in crow.iter_mut().zip(brow) {
                        *c += av * bv;
                    }
                }
            }
        }
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(vec![m, n], out, Op::Matmul(a, b), tracked, vec![]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "transpose",
                lhs: sa,
                rhs: vec![],
            });
        }
        let (r, c) = (sa[0], sa[1]);
        let ad = &self.nodes[a.0].data;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = ad[i * c + j];
            }
        }
        let tracked = self.tracked(a);
        Ok(self.push(vec![c, r], out, Op::Transpose(a), tracked, vec![]))
    }

    // ── Structure ───────────────────────────────────────────────────────

    /// Row lookup: `out[i, :] = table[ids[i], :]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "embedding",
                lhs: st,
                rhs: vec![],
            });
        }
        let (n, d) = (st[0], st[1]);
        for &id in ids {
            if id >= n {
                return Err(Error::IndexOutOfRange {
                    op: "embedding",
                    index: id,
                    size: n,
                });
            }
        }
        let td = &self.nodes[table.0].data;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&td[id * d..(id + 1) * d]);
        }
        let tracked = self.tracked(table);
        Ok(self.push(
            vec![ids.len(), d],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            tracked,
            vec![],
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_cols: empty input"));
        }
        let rows = self.shape(parts[0])[0];
        let mut total_cols = 0usize;
        for &p in parts {
            let sp = self.shape(p);
            if sp.len() != 2 || sp[0] != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: sp.to_vec(),
                });
            }
            total_cols += sp[1];
        }
        let mut out = vec![0.0; rows * total_cols];
        let mut col0 = 0usize;
        for &p in parts {
            let c = self.shape(p)[1];
            let pd = &self.nodes[p.0].data;
            for i in 0..rows {
                out[i * total_cols + col0..i * total_cols + col0 + c]
                    .copy_from_slice(&pd[i * c..(i + 1) * c]);
            }
            col0 += c;
        }
        let tracked = parts.iter().any(|&p| self.tracked(p));
        Ok(self.push(
            vec![rows, total_cols],
            out,
            Op::ConcatCols(parts.to_vec()),
            tracked,
            vec![],
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 || start >= end || end > sx[1] {
            return Err(Error::invalid(format!(
                "slice_cols: range {start}..{end} invalid for shape {sx:?}"
            )));
        }
        let (rows, cols) = (sx[0], sx[1]);
        let w = end - start;
        let xd = &self.nodes[x.0].data;
        let mut out = Vec::with_capacity(rows * w);
        for i in 0..rows {
            out.extend_from_slice(&xd[i * cols + start..i * cols + end]);
        }
        let tracked = self.tracked(x);
        Ok(self.push(vec![rows, w], out, Op::SliceCols { x, start, end }, tracked, vec![]))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 || start >= end || end > sx[0] {
            return Err(Error::invalid(format!(
                "slice_rows: range {start}..{end} invalid for shape {sx:?}"
            )));
        }
        let cols = sx[1];
        let xd = &self.nodes[x.0].data;
        let out = xd[start * cols..end * cols].to_vec();
        let tracked = self.tracked(x);
        Ok(self.push(
            vec![end - start, cols],
            out,
            Op::SliceRows { x, start, end },
            tracked,
            vec![],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.nodes[x.0].data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = self.nodes[x.0].data.clone();
        let tracked = self.tracked(x);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(x), tracked, vec![]))
    }

    // ── Nonlinearities ──────────────────────────────────────────────────

    /// Row-wise layer norm with learnable gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: sx,
                rhs: vec![],
            });
        }
        let d = sx[1];
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: sx,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let rows = sx[0];
        let mut out = vec![0.0; rows * d];
        let mut aux = Vec::with_capacity(rows * 2);
        {
            let xd = &self.nodes[x.0].data;
            let gd = &self.nodes[gamma.0].data;
            let bd = &self.nodes[beta.0].data;
            for i in 0..rows {
                let row = &xd[i * d..(i + 1) * d];
                let mu = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
                let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                for j in 0..d {
                    let xhat = (row[j] - mu) * inv_std;
                    out[i * d + j] = gd[j] * xhat + bd[j];
                }
                aux.push(mu);
                aux.push(inv_std);
            }
        }
        let tracked = self.tracked(x) || self.tracked(gamma) || self.tracked(beta);
        Ok(self.push(sx, out, Op::LayerNorm { x, gamma, beta }, tracked, aux))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| gelu_fwd(v)).collect();
        let tracked = self.tracked(x);
        self.push(self.shape(x).to_vec(), out, Op::Gelu(x), tracked, vec![])
    }

    /// Row-wise softmax over the last axis of a 2-d tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "softmax",
                lhs: sx,
                rhs: vec![],
            });
        }
        let (rows, d) = (sx[0], sx[1]);
        let mut out = vec![0.0; rows * d];
        {
            let xd = &self.nodes[x.0].data;
            for i in 0..rows {
                softmax_into(&xd[i * d..(i + 1) * d], &mut out[i * d..(i + 1) * d]);
            }
        }
        let tracked = self.tracked(x);
        Ok(self.push(sx, out, Op::Softmax(x), tracked, vec![]))
    }

    // ── Reductions ──────────────────────────────────────────────────────

    /// Mean over one axis of a 2-d tensor (0 pools rows, 1 pools columns).
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 || axis > 1 {
            return Err(Error::invalid(format!(
                "mean_axis: axis {axis} invalid for shape {sx:?}"
            )));
        }
        let (rows, cols) = (sx[0], sx[1]);
        let xd = &self.nodes[x.0].data;
        let (shape, out) = if axis == 0 {
            let mut acc = vec![0.0; cols];
            for i in 0..rows {
                for j in 0..cols {
                    acc[j] += xd[i * cols + j];
                }
            }
            for v in acc.iter_mut() {
                *v /= rows as f64;
            }
            (vec![cols], acc)
        } else {
            let mut acc = vec![0.0; rows];
            for i in 0..rows {
                acc[i] = xd[i * cols..(i + 1) * cols].iter().sum::<f64>() / cols as f64;
            }
            (vec![rows], acc)
        };
        let tracked = self.tracked(x);
        Ok(self.push(shape, out, Op::MeanAxis { x, axis }, tracked, vec![]))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.nodes[x.0].data.iter().sum();
        let tracked = self.tracked(x);
        self.push(vec![1], vec![s], Op::SumAll(x), tracked, vec![])
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].data.len().max(1);
        let s: f64 = self.nodes[x.0].data.iter().sum::<f64>() / n as f64;
        let tracked = self.tracked(x);
        self.push(vec![1], vec![s], Op::MeanAll(x), tracked, vec![])
    }

    /// Per-row negative log likelihood of `targets` under row logits.
    pub fn cross_entropy_logits(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 || sl[0] != targets.len() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: sl,
                rhs: vec![targets.len()],
            });
        }
        let (n, v) = (sl[0], sl[1]);
        for &t in targets {
            if t >= v {
                return Err(Error::IndexOutOfRange {
                    op: "cross_entropy",
                    index: t,
                    size: v,
                });
            }
        }
        let mut out = vec![0.0; n];
        let mut probs = vec![0.0; n * v];
        {
            let ld = &self.nodes[logits.0].data;
            for i in 0..n {
                let row = &ld[i * v..(i + 1) * v];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..v {
                    let e = (row[j] - m).exp();
                    probs[i * v + j] = e;
                    z += e;
                }
                for j in 0..v {
                    probs[i * v + j] /= z;
                }
                out[i] = m + z.ln() - row[targets[i]];
            }
        }
        let tracked = self.tracked(logits);
        Ok(self.push(
            vec![n],
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            tracked,
            probs,
        ))
    }

    // ── Backward ────────────────────────────────────────────────────────

    fn add_to_grad(&mut self, v: Var, contribution: Vec<f64>) {
        let node = &mut self.nodes[v.0];
        if !node.tracked {
            return;
        }
        match &mut node.grad {
            Some(g) => {
                for (dst, c) in g.iter_mut().zip(contribution) {
                    *dst += c;
                }
            }
            None => node.grad = Some(contribution),
        }
    }

    /// Seeds d(loss)/d(loss) = 1 and accumulates gradients into every
    /// tracked ancestor. Forward values are left untouched.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        if !self.nodes[loss.0].tracked {
            return Ok(());
        }
        self.add_to_grad(loss, vec![1.0]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].tracked || self.nodes[id].grad.is_none() {
                continue;
            }
            let op = self.nodes[id].op.clone();
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    let g = self.nodes[id].grad.clone().unwrap();
                    let sa = self.nodes[a.0].shape.clone();
                    let sb = self.nodes[b.0].shape.clone();
                    let strides = broadcast_strides(&sa, &sb).unwrap();
                    let mut gb = vec![0.0; self.nodes[b.0].data.len()];
                    for_each_broadcast(&sa, &strides, |o, s| gb[s] += g[o]);
                    self.add_to_grad(a, g);
                    self.add_to_grad(b, gb);
                }
                Op::Sub(a, b) => {
                    let g = self.nodes[id].grad.clone().unwrap();
                    let gb: Vec<f64> = g.iter().map(|v| -v).collect();
                    self.add_to_grad(a, g);
                    self.add_to_grad(b, gb);
                }
                Op::Mul(a, b) => {
                    let g = self.nodes[id].grad.clone().unwrap();
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[b.0].data)
                        .map(|(gv, bv)| gv * bv)
                        .collect();
                    let gb: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[a.0].data)
                        .map(|(gv, av)| gv * av)
                        .collect();
                    self.add_to_grad(a, ga);
                    self.add_to_grad(b, gb);
                }
                Op::Scale(a, c) => {
                    let g = self.nodes[id].grad.as_ref().unwrap();
                    let ga: Vec<f64> = g.iter().map(|v| v * c).collect();
                    self.add_to_grad(a, ga);
                }
                Op::Matmul(a, b) => {
                    let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let n = self.nodes[b.0].shape[1];
                    let (ga, gb) = {
                        let g = self.nodes[id].grad.as_ref().unwrap();
                        let ad = &self.nodes[a.0].data;
                        let bd = &self.nodes[b.0].data;
                        let mut ga = vec![0.0; m * k];
                        let mut gb = vec![0.0; k * n];
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            let garow = &mut ga[i * k..(i + 1) * k];
                            for p in 0..k {
                                let brow = &bd[p * n..(p + 1) * n];
                                let mut acc = 0.0;
                                for j in 0..n {
                                    acc += grow[j] * brow[j];
                                }
                                garow[p] += acc;
                            }
                        }
                        for p in 0..k {
                            let gbrow = &mut gb[p * n..(p + 1) * n];
                            for i in 0..m {
                                let av = ad[i * k + p];
                                if av == 0.0 {
                                    continue;
                                }
                                let grow = &g[i * n..(i + 1) * n];
                                for j in 0..n {
                                    gbrow[j] += av * grow[j];
                                }
                            }
                        }
                        (ga, gb)
                    };
                    self.add_to_grad(a, ga);
                    self.add_to_grad(b, gb);
                }
                Op::Transpose(a) => {
                    let (r, c) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let g = self.nodes[id].grad.as_ref().unwrap();
                    let mut ga = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] = g[j * r + i];
                        }
                    }
                    self.add_to_grad(a, ga);
                }
                Op::Embedding { table, ids } => {
                    let d = self.nodes[table.0].shape[1];
                    let g = self.nodes[id].grad.as_ref().unwrap();
                    let mut gt = vec![0.0; self.nodes[table.0].data.len()];
                    for (row, &tok) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[tok * d + j] += g[row * d + j];
                        }
                    }
                    self.add_to_grad(table, gt);
                }
                Op::ConcatCols(parts) => {
                    let total_cols = self.nodes[id].shape[1];
                    let rows = self.nodes[id].shape[0];
                    let g = self.nodes[id].grad.clone().unwrap();
                    let mut col0 = 0usize;
                    for p in parts {
                        let c = self.nodes[p.0].shape[1];
                        let mut gp = vec![0.0; rows * c];
                        for i in 0..rows {
                            gp[i * c..(i + 1) * c].copy_from_slice(
                                &g[i * total_cols + col0..i * total_cols + col0 + c],
                            );
                        }
                        self.add_to_grad(p, gp);
                        col0 += c;
                    }
                }
                Op::SliceCols { x, start, end } => {
                    let cols = self.nodes[x.0].shape[1];
                    let rows = self.nodes[id].shape[0];
                    let w = end - start;
                    let g = self.nodes[id].grad.as_ref().unwrap();
                    let mut gx = vec![0.0; self.nodes[x.0].data.len()];
                    for i in 0..rows {
                        gx[i * cols + start..i * cols + end].copy_from_slice(&g[i * w..(i + 1) * w]);
                    }
                    self.add_to_grad(x, gx);
                }
                Op::SliceRows { x, start, end } => {
                    let cols = self.nodes[x.0].shape[1];
                    let g = self.nodes[id].grad.as_ref().unwrap();
                    let mut gx = vec![0.0; self.nodes[x.0].data.len()];
                    gx[start * cols..end * cols].copy_from_slice(g);
                    self.add_to_grad(x, gx);
                }
                Op::Reshape(x) => {
                    let g = self.nodes[id].grad.clone().unwrap();
                    self.add_to_grad(x, g);
                }
                Op::LayerNorm { x, gamma, beta } => {
                    let d = self.nodes[x.0].shape[1];
                    let rows = self.nodes[x.0].shape[0];
                    let (gx, gg, gb) = {
                        let g = self.nodes[id].grad.as_ref().unwrap();
                        let xd = &self.nodes[x.0].data;
                        let gd = &self.nodes[gamma.0].data;
                        let aux = &self.nodes[id].aux;
                        let mut gx = vec![0.0; rows * d];
                        let mut gg = vec![0.0; d];
                        let mut gb = vec![0.0; d];
                        for i in 0..rows {
                            let mu = aux[i * 2];
                            let inv_std = aux[i * 2 + 1];
                            let row = &xd[i * d..(i + 1) * d];
                            let grow = &g[i * d..(i + 1) * d];
                            let mut mean_gh = 0.0;
                            let mut mean_gh_xhat = 0.0;
                            for j in 0..d {
                                let xhat = (row[j] - mu) * inv_std;
                                let gh = grow[j] * gd[j];
                                gg[j] += grow[j] * xhat;
                                gb[j] += grow[j];
                                mean_gh += gh;
                                mean_gh_xhat += gh * xhat;
                            }
                            mean_gh /= d as f64;
                            mean_gh_xhat /= d as f64;
                            for j in 0..d {
                                let xhat = (row[j] - mu) * inv_std;
                                let gh = grow[j] * gd[j];
                                gx[i * d + j] = inv_std * (gh - mean_gh - xhat * mean_gh_xhat);
                            }
                        }
                        (gx, gg, gb)
                    };
                    self.add_to_grad(x, gx);
                    self.add_to_grad(gamma, gg);
                    self.add_to_grad(beta, gb);
                }
                Op::Gelu(x) => {
                    let gx: Vec<f64> = {
                        let g = self.nodes[id].grad.as_ref().unwrap();
                        self.nodes[x.0]
                            .data
                            .iter()
                            .zip(g)
                            .map(|(&v, gv)| gv * gelu_bwd(v))
                            .collect()
                    };
                    self.add_to_grad(x, gx);
                }
                Op::Softmax(x) => {
                    let (rows, d) = (self.nodes[id].shape[0], self.nodes[id].shape[1]);
                    let gx: Vec<f64> = {
                        let g = self.nodes[id].grad.as_ref().unwrap();
                        let y = &self.nodes[id].data;
                        let mut gx = vec![0.0; rows * d];
                        for i in 0..rows {
                            let yr = &y[i * d..(i + 1) * d];
                            let gr = &g[i * d..(i + 1) * d];
                            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for j in 0..d {
                                gx[i * d + j] = yr[j] * (gr[j] - dot);
                            }
                        }
                        gx
                    };
                    self.add_to_grad(x, gx);
                }
                Op::MeanAxis { x, axis } => {
                    let (rows, cols) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                    let g = self.nodes[id].grad.as_ref().unwrap();
                    let mut gx = vec![0.0; rows * cols];
                    if axis == 0 {
                        for i in 0..rows {
                            for j in 0..cols {
                                gx[i * cols + j] = g[j] / rows as f64;
                            }
                        }
                    } else {
                        for i in 0..rows {
                            for j in 0..cols {
                                gx[i * cols + j] = g[i] / cols as f64;
                            }
                        }
                    }
                    self.add_to_grad(x, gx);
                }
                Op::SumAll(x) => {
                    let g0 = self.nodes[id].grad.as_ref().unwrap()[0];
                    let gx = vec![g0; self.nodes[x.0].data.len()];
                    self.add_to_grad(x, gx);
                }
                Op::MeanAll(x) => {
                    let n = self.nodes[x.0].data.len().max(1);
                    let g0 = self.nodes[id].grad.as_ref().unwrap()[0] / n as f64;
                    let gx = vec![g0; self.nodes[x.0].data.len()];
                    self.add_to_grad(x, gx);
                }
                Op::CrossEntropy { logits, targets } => {
                    let v = self.nodes[logits.0].shape[1];
                    let gl: Vec<f64> = {
                        let g = self.nodes[id].grad.as_ref().unwrap();
                        let probs = &self.nodes[id].aux;
                        let mut gl = vec![0.0; targets.len() * v];
                        for (i, &t) in targets.iter().enumerate() {
                            for j in 0..v {
                                let onehot = if j == t { 1.0 } else { 0.0 };
                                gl[i * v + j] = g[i] * (probs[i * v + j] - onehot);
                            }
                        }
                        gl
                    };
                    self.add_to_grad(logits, gl);
                }
            }
        }
        Ok(())
    }
}

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Numerically stable softmax of one row into `out`.
pub fn softmax_into(row: &[f64], out: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        let e = (x - m).exp();
        *o = e;
        z += e;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

pub fn softmax_vec(row: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; row.len()];
    softmax_into(row, &mut out);
    out
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

/// Central finite differences against reverse-mode gradients.
///
/// `build` must construct the same scalar loss from the bound variables on
/// every call. Returns the worst per-element error, where each element is
/// scored as |analytic - numeric| / max(|analytic|, |numeric|, 1e-3); the
/// floor keeps finite-difference noise on near-zero gradients from
/// dominating the report.
pub fn grad_check<F>(tensors: &[Tensor], build: F, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |ts: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.leaf_tracked(t, false)).collect();
        let loss = build(&mut g, &vars)?;
        Ok(g.value(loss))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = tensors.iter().map(|t| g.leaf_tracked(t, true)).collect();
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| {
            g.grad(v)
                .map(|s| s.to_vec())
                .unwrap_or_else(|| vec![0.0; g.data(v).len()])
        })
        .collect();

    let mut work: Vec<Tensor> = tensors.to_vec();
    let mut worst = 0.0f64;
    for ti in 0..work.len() {
        for (ei, &a) in analytic[ti].iter().enumerate() {
            let orig = work[ti].data[ei];
            work[ti].data[ei] = orig + h;
            let up = eval(&work)?;
            work[ti].data[ei] = orig - h;
            let down = eval(&work)?;
            work[ti].data[ei] = orig;
            let numeric = (up - down) / (2.0 * h);
            let denom = a.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
