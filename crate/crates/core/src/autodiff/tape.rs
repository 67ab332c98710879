use std::collections::HashMap;

use super::param::{Gradients, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Param(ParamId),
    Input,
    MatMul(Var, Var),
    Add { a: Var, b: Var, broadcast: bool },
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    Relu(Var),
    Gelu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Log(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather { table: Var, ids: Vec<usize> },
    MaskFill { a: Var, keep: Vec<bool> },
    Transpose(Var),
    SliceCols { a: Var, start: usize },
    ConcatCols(Vec<Var>),
    SelectRows { a: Var, rows: Vec<usize> },
    ConcatRows(Vec<Var>),
    Sum(Var),
    Pick { a: Var, index: Vec<usize> },
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    /// `None` for parameter leaves, whose value lives in the store.
    value: Option<Tensor>,
    op: Op,
}

/// Records a forward computation so it can be differentiated in reverse.
///
/// Parameters are read from the borrowed [`ParamStore`] rather than copied.
/// The reverse pass walks nodes in exact reverse recording order, and every
/// reduction uses ascending index order, so results are bitwise repeatable.
pub struct Tape<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
    /// Sign pattern of every relu input, used by the gradient checker to
    /// detect coordinates that straddle a kink.
    kinks: Vec<bool>,
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{op} produced a non-finite value")))
    }
}

impl<'a> Tape<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Tape {
            store,
            nodes: Vec::new(),
            kinks: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => &self.store.get(*id).value,
            (None, _) => unreachable!("only parameter leaves omit their value"),
        }
    }

    pub(crate) fn kink_pattern(&self) -> &[bool] {
        &self.kinks
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant leaf. Its gradient is still reported by [`Tape::backward`].
    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        check_finite("input", &t)?;
        Ok(self.push(t, Op::Input))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = (ta.rows(), ta.cols());
        if tb.shape().len() != 2 || tb.shape()[0] != k {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        }
        let n = tb.cols();
        let (ad, bd) = (ta.data(), tb.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let crow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = ad[i * k + p];
                let brow = &bd[p * n..(p + 1) * n];
                for (c, bv) in crow.iter_mut().zip(brow) {
                    *c += av * bv;
                }
            }
        }
        let t = Tensor::new(vec![m, n], out)?;
        check_finite("matmul", &t)?;
        Ok(self.push(t, Op::MatMul(a, b)))
    }

    /// `a + b`, where `b` either matches `a` exactly or is a single row
    /// broadcast over every row of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let broadcast = if ta.shape() == tb.shape() {
            false
        } else if tb.len() == ta.cols() {
            true
        } else {
            return Err(Error::shape("add", ta.shape(), tb.shape()));
        };
        let c = ta.cols();
        let data: Vec<f64> = if broadcast {
            ta.data()
                .iter()
                .enumerate()
                .map(|(i, x)| x + tb.data()[i % c])
                .collect()
        } else {
            ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect()
        };
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        check_finite("add", &t)?;
        Ok(self.push(t, Op::Add { a, b, broadcast }))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * c).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        check_finite("scale", &t)?;
        Ok(self.push(t, Op::Scale(a, c)))
    }

    /// Elementwise product with a constant tensor of the same size
    /// (dropout masks, per-row loss weights).
    pub fn mul_const(&mut self, a: Var, factors: Vec<f64>) -> Result<Var> {
        let ta = self.value(a);
        if factors.len() != ta.len() {
            return Err(Error::shape("mul_const", ta.shape(), &[factors.len()]));
        }
        let data = ta.data().iter().zip(&factors).map(|(x, f)| x * f).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        check_finite("mul_const", &t)?;
        Ok(self.push(t, Op::MulConst(a, factors)))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let kinks: Vec<bool> = ta.data().iter().map(|&x| x > 0.0).collect();
        let data = ta.data().iter().map(|&x| x.max(0.0)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        self.kinks.extend(kinks);
        Ok(self.push(t, Op::Relu(a)))
    }

    /// Tanh approximation of the Gaussian error linear unit.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| gelu(x)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Gelu(a)))
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        check_finite("softmax input", ta)?;
        let c = ta.cols();
        let mut out = Vec::with_capacity(ta.len());
        for r in 0..ta.rows() {
            out.extend(softmax_row(ta.row(r)));
        }
        debug_assert_eq!(out.len(), c * ta.rows());
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        Ok(self.push(t, Op::Softmax(a)))
    }

    /// Numerically stable log-softmax over the last dimension.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        check_finite("log_softmax input", ta)?;
        let mut out = Vec::with_capacity(ta.len());
        for r in 0..ta.rows() {
            out.extend(log_softmax_row(ta.row(r)));
        }
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        Ok(self.push(t, Op::LogSoftmax(a)))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.data().iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
            return Err(Error::Numeric("log of a non-positive value".into()));
        }
        let data = ta.data().iter().map(|x| x.ln()).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Log(a)))
    }

    /// Row-wise layer normalisation with population variance.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let c = tx.cols();
        if tg.len() != c || tb.len() != c {
            return Err(Error::shape("layer_norm", tx.shape(), tg.shape()));
        }
        check_finite("layer_norm input", tx)?;
        let rows = tx.rows();
        let mut xhat = Vec::with_capacity(tx.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(tx.len());
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * tg.data()[j] + tb.data()[j]);
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        check_finite("layer_norm", &t)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Gathers rows of `table` (`vocab x h`) by id, giving `ids.len() x h`.
    pub fn embedding_gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (v, h) = (tt.rows(), tt.cols());
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Input(format!("token id {bad} out of range for table of {v} rows")));
        }
        let mut out = Vec::with_capacity(ids.len() * h);
        for &i in ids {
            out.extend_from_slice(tt.row(i));
        }
        let t = Tensor::new(vec![ids.len(), h], out)?;
        Ok(self.push(t, Op::Gather {
            table,
            ids: ids.to_vec(),
        }))
    }

    /// Replaces every element whose `keep` flag is false with `value`.
    pub fn mask_fill(&mut self, a: Var, keep: Vec<bool>, value: f64) -> Result<Var> {
        let ta = self.value(a);
        if keep.len() != ta.len() {
            return Err(Error::shape("mask_fill", ta.shape(), &[keep.len()]));
        }
        let data = ta
            .data()
            .iter()
            .zip(&keep)
            .map(|(&x, &k)| if k { x } else { value })
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        check_finite("mask_fill", &t)?;
        Ok(self.push(t, Op::MaskFill { a, keep }))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = (ta.rows(), ta.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = ta.data()[i * n + j];
            }
        }
        let t = Tensor::new(vec![n, m], out)?;
        Ok(self.push(t, Op::Transpose(a)))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = (ta.rows(), ta.cols());
        if start + len > n {
            return Err(Error::shape("slice_cols", ta.shape(), &[start, len]));
        }
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&ta.row(r)[start..start + len]);
        }
        let t = Tensor::new(vec![m, len], out)?;
        Ok(self.push(t, Op::SliceCols { a, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.value(parts[0]).rows();
        for &p in parts {
            if self.value(p).rows() != m {
                return Err(Error::shape(
                    "concat_cols",
                    self.value(parts[0]).shape(),
                    self.value(p).shape(),
                ));
            }
        }
        let n: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec())))
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = (ta.rows(), ta.cols());
        if rows.iter().any(|&r| r >= m) {
            return Err(Error::shape("select_rows", ta.shape(), rows));
        }
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            out.extend_from_slice(ta.row(r));
        }
        let t = Tensor::new(vec![rows.len(), n], out)?;
        Ok(self.push(t, Op::SelectRows {
            a,
            rows: rows.to_vec(),
        }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.value(parts[0]).cols();
        let mut out = Vec::new();
        let mut m = 0;
        for &p in parts {
            let tp = self.value(p);
            if tp.cols() != n {
                return Err(Error::shape(
                    "concat_rows",
                    self.value(parts[0]).shape(),
                    tp.shape(),
                ));
            }
            m += tp.rows();
            out.extend_from_slice(tp.data());
        }
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec())))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum::<f64>();
        let t = Tensor::scalar(s);
        check_finite("sum", &t)?;
        Ok(self.push(t, Op::Sum(a)))
    }

    /// Picks `a[r, index[r]]` for every row, giving a vector of length rows.
    pub fn pick(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = (ta.rows(), ta.cols());
        if index.len() != m || index.iter().any(|&i| i >= n) {
            return Err(Error::shape("pick", ta.shape(), index));
        }
        let data = index.iter().enumerate().map(|(r, &i)| ta.data()[r * n + i]).collect();
        let t = Tensor::new(vec![m], data)?;
        Ok(self.push(t, Op::Pick {
            a,
            index: index.to_vec(),
        }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(a)))
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Returns parameter gradients aligned with the store, plus adjoints for
    /// every [`Tape::input`] leaf.
    pub fn backward(&self, loss: Var) -> Result<(Gradients, InputGrads)> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Tensor::full(lt.shape(), 1.0));
        let mut grads = Gradients::empty(self.store.len());
        let mut inputs = HashMap::new();

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Param(id) => grads.add_param(*id, &g),
                Op::Input => {
                    inputs.insert(idx, g);
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                    let (ad, bd, gd) = (ta.data(), tb.data(), g.data());
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += gd[i * n + j] * bd[p * n + j];
                            }
                            da[i * k + p] = s;
                        }
                    }
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let av = ad[i * k + p];
                            let row = &mut db[p * n..(p + 1) * n];
                            for (d, gv) in row.iter_mut().zip(&gd[i * n..(i + 1) * n]) {
                                *d += av * gv;
                            }
                        }
                    }
                    accum(&mut adj, *a, Tensor::new(ta.shape().to_vec(), da)?);
                    accum(&mut adj, *b, Tensor::new(tb.shape().to_vec(), db)?);
                }
                Op::Add { a, b, broadcast } => {
                    let tb_shape = self.value(*b).shape().to_vec();
                    let db = if *broadcast {
                        let c = g.cols();
                        let mut d = vec![0.0; c];
                        for r in 0..g.rows() {
                            for (dv, gv) in d.iter_mut().zip(g.row(r)) {
                                *dv += gv;
                            }
                        }
                        Tensor::new(tb_shape, d)?
                    } else {
                        g.clone()
                    };
                    accum(&mut adj, *b, db);
                    accum(&mut adj, *a, g);
                }
                Op::Scale(a, c) => {
                    let mut d = g;
                    d.scale_in_place(*c);
                    accum(&mut adj, *a, d);
                }
                Op::MulConst(a, f) => {
                    let mut d = g;
                    for (dv, fv) in d.data_mut().iter_mut().zip(f) {
                        *dv *= fv;
                    }
                    accum(&mut adj, *a, d);
                }
                Op::Relu(a) => {
                    let ta = self.value(*a);
                    let mut d = g;
                    for (dv, x) in d.data_mut().iter_mut().zip(ta.data()) {
                        if *x <= 0.0 {
                            *dv = 0.0;
                        }
                    }
                    accum(&mut adj, *a, d);
                }
                Op::Gelu(a) => {
                    let ta = self.value(*a);
                    let mut d = g;
                    for (dv, x) in d.data_mut().iter_mut().zip(ta.data()) {
                        *dv *= gelu_grad(*x);
                    }
                    accum(&mut adj, *a, d);
                }
                Op::Softmax(a) => {
                    let y = node.value.as_ref().expect("softmax value");
                    let c = y.cols();
                    let mut d = vec![0.0; y.len()];
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            d[r * c + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    accum(&mut adj, *a, Tensor::new(y.shape().to_vec(), d)?);
                }
                Op::LogSoftmax(a) => {
                    let y = node.value.as_ref().expect("log_softmax value");
                    let c = y.cols();
                    let mut d = vec![0.0; y.len()];
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let gsum: f64 = gr.iter().sum();
                        for j in 0..c {
                            d[r * c + j] = gr[j] - yr[j].exp() * gsum;
                        }
                    }
                    accum(&mut adj, *a, Tensor::new(y.shape().to_vec(), d)?);
                }
                Op::Log(a) => {
                    let ta = self.value(*a);
                    let mut d = g;
                    for (dv, x) in d.data_mut().iter_mut().zip(ta.data()) {
                        *dv /= x;
                    }
                    accum(&mut adj, *a, d);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let tg = self.value(*gain);
                    let c = tg.len();
                    let rows = g.rows();
                    let mut dx = vec![0.0; g.len()];
                    let mut dgain = vec![0.0; c];
                    let mut dbias = vec![0.0; c];
                    let nf = c as f64;
                    for r in 0..rows {
                        let gr = g.row(r);
                        let hr = &xhat[r * c..(r + 1) * c];
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..c {
                            let dh = gr[j] * tg.data()[j];
                            sum_dh += dh;
                            sum_dh_h += dh * hr[j];
                            dgain[j] += gr[j] * hr[j];
                            dbias[j] += gr[j];
                        }
                        for j in 0..c {
                            let dh = gr[j] * tg.data()[j];
                            dx[r * c + j] = inv_std[r] / nf * (nf * dh - sum_dh - hr[j] * sum_dh_h);
                        }
                    }
                    let xs = self.value(*x).shape().to_vec();
                    let gs = tg.shape().to_vec();
                    let bs = self.value(*bias).shape().to_vec();
                    accum(&mut adj, *x, Tensor::new(xs, dx)?);
                    accum(&mut adj, *gain, Tensor::new(gs, dgain)?);
                    accum(&mut adj, *bias, Tensor::new(bs, dbias)?);
                }
                Op::Gather { table, ids } => {
                    let tt = self.value(*table);
                    let h = tt.cols();
                    let mut d = Tensor::zeros(tt.shape());
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut d.data_mut()[id * h..(id + 1) * h];
                        for (dv, gv) in dst.iter_mut().zip(g.row(r)) {
                            *dv += gv;
                        }
                    }
                    accum(&mut adj, *table, d);
                }
                Op::MaskFill { a, keep } => {
                    let mut d = g;
                    for (dv, k) in d.data_mut().iter_mut().zip(keep) {
                        if !k {
                            *dv = 0.0;
                        }
                    }
                    accum(&mut adj, *a, d);
                }
                Op::Transpose(a) => {
                    let (m, n) = (g.rows(), g.cols());
                    let mut d = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            d[j * m + i] = g.data()[i * n + j];
                        }
                    }
                    accum(&mut adj, *a, Tensor::new(vec![n, m], d)?);
                }
                Op::SliceCols { a, start } => {
                    let ta = self.value(*a);
                    let n = ta.cols();
                    let len = g.cols();
                    let mut d = Tensor::zeros(ta.shape());
                    for r in 0..g.rows() {
                        d.data_mut()[r * n + start..r * n + start + len].copy_from_slice(g.row(r));
                    }
                    accum(&mut adj, *a, d);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let tp = self.value(p);
                        let w = tp.cols();
                        let mut d = Vec::with_capacity(tp.len());
                        for r in 0..g.rows() {
                            d.extend_from_slice(&g.row(r)[off..off + w]);
                        }
                        off += w;
                        accum(&mut adj, p, Tensor::new(tp.shape().to_vec(), d)?);
                    }
                }
                Op::SelectRows { a, rows } => {
                    let ta = self.value(*a);
                    let n = ta.cols();
                    let mut d = Tensor::zeros(ta.shape());
                    for (i, &r) in rows.iter().enumerate() {
                        for (dv, gv) in d.data_mut()[r * n..(r + 1) * n].iter_mut().zip(g.row(i)) {
                            *dv += gv;
                        }
                    }
                    accum(&mut adj, *a, d);
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let tp = self.value(p);
                        let len = tp.len();
                        let d = g.data()[off..off + len].to_vec();
                        off += len;
                        accum(&mut adj, p, Tensor::new(tp.shape().to_vec(), d)?);
                    }
                }
                Op::Sum(a) => {
                    let ta = self.value(*a);
                    accum(&mut adj, *a, Tensor::full(ta.shape(), g.data()[0]));
                }
                Op::Pick { a, index } => {
                    let ta = self.value(*a);
                    let n = ta.cols();
                    let mut d = Tensor::zeros(ta.shape());
                    for (r, &i) in index.iter().enumerate() {
                        d.data_mut()[r * n + i] += g.data()[r];
                    }
                    accum(&mut adj, *a, d);
                }
                Op::Reshape(a) => {
                    let shape = self.value(*a).shape().to_vec();
                    accum(&mut adj, *a, g.reshaped(&shape)?);
                }
            }
        }
        Ok((grads, InputGrads(inputs)))
    }
}

/// Adjoints of [`Tape::input`] leaves.
#[derive(Debug, Clone, Default)]
pub struct InputGrads(HashMap<usize, Tensor>);

impl InputGrads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0.get(&v.0)
    }
}

fn accum(adj: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut adj[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

pub(crate) fn softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// `x - logsumexp(x)`. The log of the shifted sum is taken as `ln_1p` of
/// the non-maximal terms so a saturated row keeps full relative precision.
pub(crate) fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let (arg, m) = row
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, x)| if x > acc.1 { (i, x) } else { acc });
    let rest: f64 = row
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != arg)
        .map(|(_, x)| (x - m).exp())
        .sum();
    let shift = rest.ln_1p();
    row.iter().map(|x| (x - m) - shift).collect()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}
