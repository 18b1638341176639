use super::kernels as k;
use super::Tensor;
use crate::error::{invalid, shape, Error, Result};

/// Handle to a node on a [`Graph`]. Only valid for the graph that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddRow { x: Var, row: Var },
    MulRow { x: Var, row: Var },
    Scale { x: Var, c: f64 },
    AddScalar { x: Var },
    Gelu { x: Var },
    Normalize { x: Var, inv_std: Vec<f64> },
    Softmax { x: Var },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f64> },
    SliceCols { x: Var, start: usize },
    ConcatRows { parts: Vec<Var> },
    ConcatCols { parts: Vec<Var> },
    Sum { x: Var },
    Mean { x: Var },
    Mae { pred: Var, target: Var, weights: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only tape of forward values. Nodes are stored in creation order,
/// which is a topological order of the computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    no_grad: bool,
}

/// Gradients of a scalar with respect to every node that required one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `v`, all zeros when `v` did not influence the loss.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; len])
    }
}

/// Per-head projections of a multi-head attention layer.
#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

fn check_finite(t: &Tensor, op: &'static str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph that never records gradient requirements or saved activations.
    pub fn no_grad() -> Self {
        Self { nodes: Vec::new(), no_grad: true }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node created after the first `len`. Handles to dropped
    /// nodes become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        check_finite(&value, name)?;
        self.nodes.push(Node { value, op, requires_grad: requires_grad && !self.no_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        !self.no_grad && vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    /// Leaf that receives a gradient on backward.
    pub fn param(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, true, "param")
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, false, "constant")
    }

    /// `x·W + b` for `x[n×d_in]`, `W[d_in×d_out]`, `b[d_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, din) = self.dims(x);
        let (wr, dout) = self.dims(w);
        if wr != din {
            return Err(shape(format!("linear: x has {din} columns, W has {wr} rows")));
        }
        let xv = &self.nodes[x.0].value;
        let mut y = k::matmul(&xv.data, &self.nodes[w.0].value.data, n, din, dout);
        if let Some(b) = b {
            let bv = &self.nodes[b.0].value;
            if bv.len() != dout {
                return Err(shape(format!("linear: bias has {} entries, want {dout}", bv.len())));
            }
            for row in y.chunks_mut(dout) {
                for (a, c) in row.iter_mut().zip(&bv.data) {
                    *a += c;
                }
            }
        }
        let rg = self.rg(&[x, w]) || b.is_some_and(|b| self.rg(&[b]));
        self.push(Tensor::matrix(n, dout, y)?, Op::Linear { x, w, b }, rg, "linear")
    }

    /// `a[n×k]·b[k×m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ka) = self.dims(a);
        let (kb, m) = self.dims(b);
        if ka != kb {
            return Err(shape(format!("matmul: inner dims {ka} and {kb}")));
        }
        let y = k::matmul(&self.nodes[a.0].value.data, &self.nodes[b.0].value.data, n, ka, m);
        let rg = self.rg(&[a, b]);
        self.push(Tensor::matrix(n, m, y)?, Op::MatMul { a, b }, rg, "matmul")
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        let (sa, sb) = (&self.nodes[a.0].value.shape, &self.nodes[b.0].value.shape);
        if sa != sb {
            return Err(shape(format!("{op}: shapes {sa:?} and {sb:?}")));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        Tensor {
            shape: av.shape.clone(),
            data: av.data.iter().zip(&bv.data).map(|(x, y)| f(*x, *y)).collect(),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let y = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(y, Op::Add { a, b }, rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let y = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push(y, Op::Sub { a, b }, rg, "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let y = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push(y, Op::Mul { a, b }, rg, "mul")
    }

    fn row_op(&self, x: Var, row: Var, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (xv, rv) = (&self.nodes[x.0].value, &self.nodes[row.0].value);
        let c = xv.cols();
        if rv.len() != c {
            return Err(shape(format!("{op}: row has {} entries, x has {c} columns", rv.len())));
        }
        let mut data = xv.data.clone();
        for r in data.chunks_mut(c) {
            for (a, b) in r.iter_mut().zip(&rv.data) {
                *a = f(*a, *b);
            }
        }
        Ok(Tensor { shape: xv.shape.clone(), data })
    }

    /// Adds a `[d]` row to every row of `x[n×d]`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let y = self.row_op(x, row, "add_row", |a, b| a + b)?;
        let rg = self.rg(&[x, row]);
        self.push(y, Op::AddRow { x, row }, rg, "add_row")
    }

    /// Multiplies every row of `x[n×d]` by a `[d]` row.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let y = self.row_op(x, row, "mul_row", |a, b| a * b)?;
        let rg = self.rg(&[x, row]);
        self.push(y, Op::MulRow { x, row }, rg, "mul_row")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let y = Tensor { shape: xv.shape.clone(), data: xv.data.iter().map(|v| v * c).collect() };
        let rg = self.rg(&[x]);
        self.push(y, Op::Scale { x, c }, rg, "scale")
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let y = Tensor { shape: xv.shape.clone(), data: xv.data.iter().map(|v| v + c).collect() };
        let rg = self.rg(&[x]);
        self.push(y, Op::AddScalar { x }, rg, "add_scalar")
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let y = Tensor { shape: xv.shape.clone(), data: xv.data.iter().map(|&v| k::gelu(v)).collect() };
        let rg = self.rg(&[x]);
        self.push(y, Op::Gelu { x }, rg, "gelu")
    }

    /// Per-row `(x − mean) / sqrt(var + eps)` with the biased variance.
    pub fn normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(invalid("normalize: eps must be positive"));
        }
        let xv = &self.nodes[x.0].value;
        let c = xv.cols();
        let mut data = xv.data.clone();
        let mut inv_std = Vec::with_capacity(xv.rows());
        for r in data.chunks_mut(c) {
            let mean = r.iter().sum::<f64>() / c as f64;
            let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            for v in r.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let y = Tensor { shape: xv.shape.clone(), data };
        let rg = self.rg(&[x]);
        self.push(y, Op::Normalize { x, inv_std }, rg, "normalize")
    }

    /// Layer normalization with affine `γ`, `β`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let n = self.normalize(x, eps)?;
        let s = self.mul_row(n, gamma)?;
        self.add_row(s, beta)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let mut data = xv.data.clone();
        k::softmax_rows(&mut data, xv.cols());
        let y = Tensor { shape: xv.shape.clone(), data };
        let rg = self.rg(&[x]);
        self.push(y, Op::Softmax { x }, rg, "softmax")
    }

    /// Scaled dot-product attention on already projected `q[n_q×d]`,
    /// `k[n_kv×d]`, `v[n_kv×d]`, split into `heads` column groups of width
    /// `d / heads` and scaled by `1/sqrt(d / heads)`. Output rows depend only
    /// on the matching query row.
    pub fn attention(&mut self, q: Var, kk: Var, v: Var, heads: usize) -> Result<Var> {
        let (nq, d) = self.dims(q);
        let (nk, dk) = self.dims(kk);
        let (nv, dv) = self.dims(v);
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Config(format!("width {d} not divisible by {heads} heads")));
        }
        if dk != d || dv != d || nv != nk {
            return Err(shape(format!("attention: q {nq}x{d}, k {nk}x{dk}, v {nv}x{dv}")));
        }
        if nk == 0 {
            return Err(invalid("attention over zero keys"));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let rg = self.rg(&[q, kk, v]);
        let (qd, kd, vd) = (
            &self.nodes[q.0].value.data,
            &self.nodes[kk.0].value.data,
            &self.nodes[v.0].value.data,
        );
        let mut out = vec![0.0; nq * d];
        let mut probs = Vec::with_capacity(if rg { heads * nq * nk } else { 0 });
        for h in 0..heads {
            let qh = k::take_cols(qd, nq, d, h * dh, dh);
            let kh = k::take_cols(kd, nk, d, h * dh, dh);
            let vh = k::take_cols(vd, nk, d, h * dh, dh);
            let mut s = k::matmul_nt(&qh, &kh, nq, dh, nk);
            s.iter_mut().for_each(|x| *x *= scale);
            k::softmax_rows(&mut s, nk);
            let oh = k::matmul(&s, &vh, nq, nk, dh);
            k::add_cols(&mut out, &oh, nq, d, h * dh, dh);
            if rg {
                probs.extend_from_slice(&s);
            }
        }
        let y = Tensor::matrix(nq, d, out)?;
        self.push(y, Op::Attention { q, k: kk, v, heads, probs }, rg, "attention")
    }

    /// Projects `kv_src` to attention keys and values.
    pub fn project_kv(&mut self, kv_src: Var, p: &AttentionParams) -> Result<(Var, Var)> {
        let kk = self.linear(kv_src, p.wk, Some(p.bk))?;
        let v = self.linear(kv_src, p.wv, Some(p.bv))?;
        Ok((kk, v))
    }

    /// Attends `q_src` rows to projected keys/values and applies the output
    /// projection.
    pub fn attend(&mut self, q_src: Var, kk: Var, v: Var, p: &AttentionParams, heads: usize) -> Result<Var> {
        let q = self.linear(q_src, p.wq, Some(p.bq))?;
        let o = self.attention(q, kk, v, heads)?;
        self.linear(o, p.wo, Some(p.bo))
    }

    /// Full multi-head attention; self-attention is `q_src == kv_src`.
    pub fn multihead_attention(&mut self, q_src: Var, kv_src: Var, p: &AttentionParams, heads: usize) -> Result<Var> {
        let d = self.dims(q_src).1;
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Config(format!("width {d} not divisible by {heads} heads")));
        }
        let (kk, v) = self.project_kv(kv_src, p)?;
        self.attend(q_src, kk, v, p, heads)
    }

    /// Columns `[start, start + width)`.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (n, c) = self.dims(x);
        if start + width > c {
            return Err(shape(format!("slice_cols: [{start}, {}) exceeds {c} columns", start + width)));
        }
        let data = k::take_cols(&self.nodes[x.0].value.data, n, c, start, width);
        let rg = self.rg(&[x]);
        self.push(Tensor::matrix(n, width, data)?, Op::SliceCols { x, start }, rg, "slice_cols")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = parts.first().map(|&p| self.dims(p).1).ok_or_else(|| invalid("concat_rows of nothing"))?;
        let mut data = Vec::new();
        let mut n = 0;
        for &p in parts {
            let (r, pc) = self.dims(p);
            if pc != c {
                return Err(shape(format!("concat_rows: {pc} columns, want {c}")));
            }
            data.extend_from_slice(&self.nodes[p.0].value.data);
            n += r;
        }
        let rg = self.rg(parts);
        self.push(Tensor::matrix(n, c, data)?, Op::ConcatRows { parts: parts.to_vec() }, rg, "concat_rows")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = parts.first().map(|&p| self.dims(p).0).ok_or_else(|| invalid("concat_cols of nothing"))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims(p);
            if r != n {
                return Err(shape(format!("concat_cols: {r} rows, want {n}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; n * total];
        let mut start = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            k::add_cols(&mut data, &self.nodes[p.0].value.data, n, total, start, w);
            start += w;
        }
        let rg = self.rg(parts);
        self.push(Tensor::matrix(n, total, data)?, Op::ConcatCols { parts: parts.to_vec() }, rg, "concat_cols")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.nodes[x.0].value.data.iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if xv.is_empty() {
            return Err(invalid("mean of empty tensor"));
        }
        let s = xv.data.iter().sum::<f64>() / xv.len() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean { x }, rg, "mean")
    }

    /// `(1/n) Σ_i Σ_j w_j |pred_ij − target_ij|` over `n` rows. The
    /// subgradient of `|·|` at 0 is 0.
    pub fn mae_loss(&mut self, pred: Var, target: Var, col_weights: &[f64]) -> Result<Var> {
        self.same_shape(pred, target, "mae_loss")?;
        let (n, c) = self.dims(pred);
        if col_weights.len() != c {
            return Err(shape(format!("mae_loss: {} weights for {c} columns", col_weights.len())));
        }
        if n == 0 {
            return Err(invalid("mae_loss over zero rows"));
        }
        let (pv, tv) = (&self.nodes[pred.0].value.data, &self.nodes[target.0].value.data);
        let mut s = 0.0;
        for (pr, tr) in pv.chunks(c).zip(tv.chunks(c)) {
            for j in 0..c {
                s += col_weights[j] * (pr[j] - tr[j]).abs();
            }
        }
        let rg = self.rg(&[pred, target]);
        let op = Op::Mae { pred, target, weights: col_weights.to_vec() };
        self.push(Tensor::scalar(s / n as f64), op, rg, "mae_loss")
    }

    /// Mean of `|a − b|` over all entries.
    pub fn mean_abs_error(&mut self, a: Var, b: Var) -> Result<Var> {
        let c = self.dims(a).1;
        self.mae_loss(a, b, &vec![1.0 / c as f64; c])
    }

    /// Reverse pass from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.no_grad {
            return Err(invalid("backward on a no-grad graph"));
        }
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(invalid(format!("backward needs a scalar loss, got shape {:?}", lv.shape)));
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &nodes[i];
            backprop(&nodes, &mut grads, &node.op, &node.value, &dy);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(dy);
            }
        }
        for (g, n) in grads.iter_mut().zip(&nodes) {
            if !matches!(n.op, Op::Leaf) {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot => *slot = Some(g),
    }
}

fn col_sums(dy: &[f64], cols: usize) -> Vec<f64> {
    let mut s = vec![0.0; cols];
    for r in dy.chunks(cols) {
        s.iter_mut().zip(r).for_each(|(a, b)| *a += b);
    }
    s
}

fn backprop(nodes: &[Node], grads: &mut [Option<Vec<f64>>], op: &Op, y: &Tensor, dy: &[f64]) {
    let val = |v: &Var| &nodes[v.0].value;
    let rg = |v: &Var| nodes[v.0].requires_grad;
    match op {
        Op::Leaf => {}
        Op::Linear { x, w, b } => {
            let (xv, wv) = (val(x), val(w));
            let (n, din, dout) = (xv.rows(), xv.cols(), wv.cols());
            if rg(x) {
                accumulate(nodes, grads, *x, k::matmul_nt(dy, &wv.data, n, dout, din));
            }
            if rg(w) {
                accumulate(nodes, grads, *w, k::matmul_tn(&xv.data, dy, n, din, dout));
            }
            if let Some(b) = b {
                if rg(b) {
                    accumulate(nodes, grads, *b, col_sums(dy, dout));
                }
            }
        }
        Op::MatMul { a, b } => {
            let (av, bv) = (val(a), val(b));
            let (n, kk, m) = (av.rows(), av.cols(), bv.cols());
            if rg(a) {
                accumulate(nodes, grads, *a, k::matmul_nt(dy, &bv.data, n, m, kk));
            }
            if rg(b) {
                accumulate(nodes, grads, *b, k::matmul_tn(&av.data, dy, n, kk, m));
            }
        }
        Op::Add { a, b } => {
            accumulate(nodes, grads, *a, dy.to_vec());
            accumulate(nodes, grads, *b, dy.to_vec());
        }
        Op::Sub { a, b } => {
            accumulate(nodes, grads, *a, dy.to_vec());
            accumulate(nodes, grads, *b, dy.iter().map(|g| -g).collect());
        }
        Op::Mul { a, b } => {
            let (av, bv) = (val(a), val(b));
            if rg(a) {
                accumulate(nodes, grads, *a, dy.iter().zip(&bv.data).map(|(g, x)| g * x).collect());
            }
            if rg(b) {
                accumulate(nodes, grads, *b, dy.iter().zip(&av.data).map(|(g, x)| g * x).collect());
            }
        }
        Op::AddRow { x, row } => {
            accumulate(nodes, grads, *x, dy.to_vec());
            if rg(row) {
                accumulate(nodes, grads, *row, col_sums(dy, y.cols()));
            }
        }
        Op::MulRow { x, row } => {
            let (xv, rv) = (val(x), val(row));
            let c = xv.cols();
            if rg(x) {
                let mut dx = dy.to_vec();
                for r in dx.chunks_mut(c) {
                    r.iter_mut().zip(&rv.data).for_each(|(a, b)| *a *= b);
                }
                accumulate(nodes, grads, *x, dx);
            }
            if rg(row) {
                let mut dr = vec![0.0; c];
                for (g, xr) in dy.chunks(c).zip(xv.data.chunks(c)) {
                    for j in 0..c {
                        dr[j] += g[j] * xr[j];
                    }
                }
                accumulate(nodes, grads, *row, dr);
            }
        }
        Op::Scale { x, c } => accumulate(nodes, grads, *x, dy.iter().map(|g| g * c).collect()),
        Op::AddScalar { x } => accumulate(nodes, grads, *x, dy.to_vec()),
        Op::Gelu { x } => {
            let dx = dy.iter().zip(&val(x).data).map(|(g, &v)| g * k::gelu_grad(v)).collect();
            accumulate(nodes, grads, *x, dx);
        }
        Op::Normalize { x, inv_std } => {
            let c = y.cols();
            let mut dx = vec![0.0; dy.len()];
            for (r, ((g, yr), dxr)) in dy.chunks(c).zip(y.data.chunks(c)).zip(dx.chunks_mut(c)).enumerate() {
                let mg = g.iter().sum::<f64>() / c as f64;
                let mgy = g.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                for j in 0..c {
                    dxr[j] = inv_std[r] * (g[j] - mg - yr[j] * mgy);
                }
            }
            accumulate(nodes, grads, *x, dx);
        }
        Op::Softmax { x } => accumulate(nodes, grads, *x, k::softmax_backward(&y.data, dy, y.cols())),
        Op::Attention { q, k: kk, v, heads, probs } => {
            let (qv, kv, vv) = (val(q), val(kk), val(v));
            let (nq, d, nk) = (qv.rows(), qv.cols(), kv.rows());
            let dh = d / heads;
            let scale = 1.0 / (dh as f64).sqrt();
            let mut dq = vec![0.0; nq * d];
            let mut dk = vec![0.0; nk * d];
            let mut dv = vec![0.0; nk * d];
            for h in 0..*heads {
                let p = &probs[h * nq * nk..(h + 1) * nq * nk];
                let qh = k::take_cols(&qv.data, nq, d, h * dh, dh);
                let kh = k::take_cols(&kv.data, nk, d, h * dh, dh);
                let vh = k::take_cols(&vv.data, nk, d, h * dh, dh);
                let doh = k::take_cols(dy, nq, d, h * dh, dh);
                let dp = k::matmul_nt(&doh, &vh, nq, dh, nk);
                let mut ds = k::softmax_backward(p, &dp, nk);
                ds.iter_mut().for_each(|x| *x *= scale);
                k::add_cols(&mut dq, &k::matmul(&ds, &kh, nq, nk, dh), nq, d, h * dh, dh);
                k::add_cols(&mut dk, &k::matmul_tn(&ds, &qh, nq, nk, dh), nk, d, h * dh, dh);
                k::add_cols(&mut dv, &k::matmul_tn(p, &doh, nq, nk, dh), nk, d, h * dh, dh);
            }
            accumulate(nodes, grads, *q, dq);
            accumulate(nodes, grads, *kk, dk);
            accumulate(nodes, grads, *v, dv);
        }
        Op::SliceCols { x, start } => {
            let xv = val(x);
            let mut dx = vec![0.0; xv.len()];
            k::add_cols(&mut dx, dy, xv.rows(), xv.cols(), *start, y.cols());
            accumulate(nodes, grads, *x, dx);
        }
        Op::ConcatRows { parts } => {
            let mut off = 0;
            for p in parts {
                let len = val(p).len();
                accumulate(nodes, grads, *p, dy[off..off + len].to_vec());
                off += len;
            }
        }
        Op::ConcatCols { parts } => {
            let (n, total) = (y.rows(), y.cols());
            let mut start = 0;
            for p in parts {
                let w = val(p).cols();
                if rg(p) {
                    accumulate(nodes, grads, *p, k::take_cols(dy, n, total, start, w));
                }
                start += w;
            }
        }
        Op::Sum { x } => accumulate(nodes, grads, *x, vec![dy[0]; val(x).len()]),
        Op::Mean { x } => {
            let n = val(x).len();
            accumulate(nodes, grads, *x, vec![dy[0] / n as f64; n]);
        }
        Op::Mae { pred, target, weights } => {
            let (pv, tv) = (val(pred), val(target));
            let (n, c) = (pv.rows(), pv.cols());
            let s = dy[0] / n as f64;
            let dp: Vec<f64> = pv
                .data
                .iter()
                .zip(&tv.data)
                .enumerate()
                .map(|(i, (a, b))| {
                    let diff = a - b;
                    let sign = if diff > 0.0 { 1.0 } else if diff < 0.0 { -1.0 } else { 0.0 };
                    s * weights[i % c] * sign
                })
                .collect();
            if rg(target) {
                accumulate(nodes, grads, *target, dp.iter().map(|g| -g).collect());
            }
            accumulate(nodes, grads, *pred, dp);
        }
    }
}
