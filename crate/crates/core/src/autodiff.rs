//! Reverse-mode differentiation over row-major matrices.
//!
//! A [`Tape`] records one forward pass as a flat list of nodes. Parameter
//! leaves are copied in from a [`ParamStore`]; [`Tape::backward`] walks the
//! nodes in reverse and accumulates parameter gradients back into the store.
//! Ops are coarse (fused layer norm, fused multi-head attention, fused
//! losses) so the node count per transformer layer stays small.

use crate::params::{ParamId, ParamStore};
use crate::tensor::{gelu, gelu_grad, sigmoid, Float, Mat};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// How binary cross-entropy is evaluated from logits.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BceForm {
    /// `max(z,0) − z·y + ln(1+e^{−|z|})`.
    LogSumExp,
    /// Probabilities `σ(z)` clamped to `[eps, 1−eps]`, both BCE terms.
    Clamped { eps: f64 },
    /// Probabilities clamped as above, positive term `−y·ln p` only.
    ClampedPositiveOnly { eps: f64 },
}

enum Op<T> {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Scale(Var, T),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq: usize,
        probs: Vec<T>,
    },
    Gather {
        srcs: Vec<Var>,
        map: Vec<(u32, u32)>,
    },
    Reshape(Var),
    SquaredError {
        pred: Var,
        target: Mat<T>,
        rows: Vec<(usize, T)>,
    },
    Bce {
        logits: Var,
        targets: Mat<T>,
        weight: T,
        form: BceForm,
    },
}

struct Node<T> {
    value: Mat<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    record_grad: bool,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record_grad: true,
        }
    }

    /// A tape for inference: values only, `backward` is rejected.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            record_grad: false,
        }
    }

    pub fn records_grad(&self) -> bool {
        self.record_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        let m = self.value(v);
        debug_assert_eq!(m.len(), 1);
        m.data[0]
    }

    fn needs(&self, v: Var) -> bool {
        self.record_grad && self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Mat<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad: needs_grad && self.record_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Mat<T>) -> Var {
        self.push(value, Op::Input, false)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    /// Adds a `1×c` row to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let b = self.value(bias);
        assert_eq!(b.rows, 1, "bias must be a single row");
        assert_eq!(b.cols, self.value(x).cols, "bias width mismatch");
        let mut value = self.value(x).clone();
        let brow = b.data.clone();
        for r in 0..value.rows {
            for (o, &bb) in value.row_mut(r).iter_mut().zip(&brow) {
                *o += bb;
            }
        }
        let ng = self.needs(x) || self.needs(bias);
        self.push(value, Op::AddBias(x, bias), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let value = self.value(x).map(|v| v * s);
        let ng = self.needs(x);
        self.push(value, Op::Scale(x, s), ng)
    }

    /// `x·W + b`
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let h = self.matmul(x, w);
        self.add_bias(h, b)
    }

    /// Per-row layer normalization followed by elementwise scale and offset.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let g = &self.value(gamma).data;
        let b = &self.value(beta).data;
        assert_eq!(g.len(), cols, "layer norm scale width");
        assert_eq!(b.len(), cols, "layer norm offset width");
        let n = T::lit(cols as f64);
        let eps = T::lit(LAYER_NORM_EPS);
        let mut xhat = Mat::zeros(rows, cols);
        let mut out = Mat::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) / n;
            let var = row
                .iter()
                .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
                / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            let xh = xhat.row_mut(r);
            for c in 0..cols {
                xh[c] = (row[c] - mean) * rs;
            }
            let o = out.row_mut(r);
            for c in 0..cols {
                o[c] = xhat.data[r * cols + c] * g[c] + b[c];
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let (xhat, rstd) = if ng {
            (xhat, rstd)
        } else {
            (Mat::zeros(0, 0), Vec::new())
        };
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        )
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(gelu);
        let ng = self.needs(x);
        self.push(value, Op::Gelu(x), ng)
    }

    /// Scaled dot-product multi-head self-attention over `rows/seq`
    /// independent sequences stacked row-wise. Head `h` uses columns
    /// `h·dh..(h+1)·dh` of the query, key and value matrices.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, seq: usize) -> Var {
        let (rows, d) = self.value(q).shape();
        assert_eq!(self.value(k).shape(), (rows, d), "key shape");
        assert_eq!(self.value(v).shape(), (rows, d), "value shape");
        assert!(seq > 0 && rows % seq == 0, "rows must be a multiple of seq");
        assert!(heads > 0 && d % heads == 0, "width must divide into heads");
        let dh = d / heads;
        let batch = rows / seq;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        let mut out = Mat::zeros(rows, d);
        let mut probs = vec![T::zero(); if ng { batch * heads * seq * seq } else { 0 }];
        let mut scores = vec![T::zero(); seq * seq];
        let (qd, kd, vd) = (
            &self.value(q).data,
            &self.value(k).data,
            &self.value(v).data,
        );
        for b in 0..batch {
            for h in 0..heads {
                let off = b * seq * d + h * dh;
                T::gemm(
                    seq,
                    dh,
                    seq,
                    scale,
                    &qd[off..],
                    (d, 1),
                    &kd[off..],
                    (1, d),
                    T::zero(),
                    &mut scores,
                    (seq, 1),
                );
                softmax_rows(&mut scores, seq);
                T::gemm(
                    seq,
                    seq,
                    dh,
                    T::one(),
                    &scores,
                    (seq, 1),
                    &vd[off..],
                    (d, 1),
                    T::zero(),
                    &mut out.data[off..],
                    (d, 1),
                );
                if ng {
                    let p_off = (b * heads + h) * seq * seq;
                    probs[p_off..p_off + seq * seq].copy_from_slice(&scores);
                }
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                seq,
                probs,
            },
            ng,
        )
    }

    /// Builds a matrix whose row `r` is row `map[r].1` of `srcs[map[r].0]`.
    pub fn gather(&mut self, srcs: &[Var], map: Vec<(u32, u32)>) -> Var {
        assert!(!srcs.is_empty(), "gather needs a source");
        let cols = self.value(srcs[0]).cols;
        for s in srcs {
            assert_eq!(self.value(*s).cols, cols, "gather sources differ in width");
        }
        let mut out = Mat::zeros(map.len(), cols);
        for (r, &(s, row)) in map.iter().enumerate() {
            out.row_mut(r)
                .copy_from_slice(self.value(srcs[s as usize]).row(row as usize));
        }
        let ng = srcs.iter().any(|s| self.needs(*s));
        self.push(
            out,
            Op::Gather {
                srcs: srcs.to_vec(),
                map,
            },
            ng,
        )
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.len(), rows * cols, "reshape changes element count");
        let value = Mat::from_vec(rows, cols, xv.data.clone());
        let ng = self.needs(x);
        self.push(value, Op::Reshape(x), ng)
    }

    /// `Σ_(r,w) w·‖pred_r − target_r‖²` over the listed rows.
    pub fn squared_error(&mut self, pred: Var, target: Mat<T>, rows: Vec<(usize, T)>) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.shape(), target.shape(), "target shape");
        let mut total = T::zero();
        for &(r, w) in &rows {
            let s = pv
                .row(r)
                .iter()
                .zip(target.row(r))
                .fold(T::zero(), |a, (&p, &t)| a + (p - t) * (p - t));
            total += w * s;
        }
        let ng = self.needs(pred);
        self.push(
            Mat::filled(1, 1, total),
            Op::SquaredError { pred, target, rows },
            ng,
        )
    }

    /// `weight · Σ_elements bce(σ(logits), targets)`.
    pub fn bce(&mut self, logits: Var, targets: Mat<T>, weight: T, form: BceForm) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.shape(), targets.shape(), "target shape");
        let total = lv
            .data
            .iter()
            .zip(&targets.data)
            .fold(T::zero(), |a, (&z, &y)| a + bce_value(z, y, form));
        let ng = self.needs(logits);
        self.push(
            Mat::filled(1, 1, weight * total),
            Op::Bce {
                logits,
                targets,
                weight,
                form,
            },
            ng,
        )
    }

    /// Accumulates `seed · ∂loss/∂θ` into `store` for every parameter leaf.
    pub fn backward(&self, loss: Var, seed: T, store: &mut ParamStore<T>) -> crate::Result<()> {
        if !self.record_grad {
            return Err(crate::Error::State(
                "backward on an inference tape".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(crate::Error::State("backward from a non-scalar".into()));
        }
        let mut grads: Vec<Option<Mat<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Mat::filled(1, 1, seed));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, g, &mut grads, store);
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Mat<T>>], v: Var, g: Mat<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(
        &self,
        node: &Node<T>,
        g: Mat<T>,
        grads: &mut [Option<Mat<T>>],
        store: &mut ParamStore<T>,
    ) {
        match &node.op {
            Op::Input => {}
            Op::Param(id) => store.grad_mut(*id).add_assign(&g),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows, av.cols, bv.cols);
                if self.nodes[a.0].needs_grad {
                    let mut da = Mat::zeros(m, k);
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        &g.data,
                        (n, 1),
                        &bv.data,
                        (1, n),
                        T::zero(),
                        &mut da.data,
                        (k, 1),
                    );
                    self.accumulate(grads, *a, da);
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = Mat::zeros(k, n);
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        &av.data,
                        (1, k),
                        &g.data,
                        (n, 1),
                        T::zero(),
                        &mut db.data,
                        (n, 1),
                    );
                    self.accumulate(grads, *b, db);
                }
            }
            Op::AddBias(x, bias) => {
                if self.nodes[bias.0].needs_grad {
                    let mut db = Mat::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (d, &v) in db.data.iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *bias, db);
                }
                self.accumulate(grads, *x, g);
            }
            Op::Add(a, b) => {
                if self.nodes[b.0].needs_grad {
                    self.accumulate(grads, *b, g.clone());
                }
                self.accumulate(grads, *a, g);
            }
            Op::Scale(x, s) => {
                let s = *s;
                self.accumulate(grads, *x, g.map(|v| v * s));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (rows, cols) = g.shape();
                let gam = &self.value(*gamma).data;
                let mut dgamma = Mat::zeros(1, cols);
                let mut dbeta = Mat::zeros(1, cols);
                let mut dx = Mat::zeros(rows, cols);
                let n = T::lit(cols as f64);
                let mut dxhat = vec![T::zero(); cols];
                for r in 0..rows {
                    let gr = g.row(r);
                    let xh = xhat.row(r);
                    let mut mean_dxhat = T::zero();
                    let mut mean_dxhat_xhat = T::zero();
                    for c in 0..cols {
                        dgamma.data[c] += gr[c] * xh[c];
                        dbeta.data[c] += gr[c];
                        dxhat[c] = gr[c] * gam[c];
                        mean_dxhat += dxhat[c];
                        mean_dxhat_xhat += dxhat[c] * xh[c];
                    }
                    mean_dxhat = mean_dxhat / n;
                    mean_dxhat_xhat = mean_dxhat_xhat / n;
                    let rs = rstd[r];
                    let dxr = dx.row_mut(r);
                    for c in 0..cols {
                        dxr[c] = rs * (dxhat[c] - mean_dxhat - xh[c] * mean_dxhat_xhat);
                    }
                }
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
                self.accumulate(grads, *x, dx);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let mut dx = g;
                for (d, &v) in dx.data.iter_mut().zip(&xv.data) {
                    *d *= gelu_grad(v);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                seq,
                probs,
            } => {
                let (heads, seq) = (*heads, *seq);
                let (rows, d) = g.shape();
                let dh = d / heads;
                let batch = rows / seq;
                let scale = T::one() / T::lit(dh as f64).sqrt();
                let (qd, kd, vd) = (
                    &self.value(*q).data,
                    &self.value(*k).data,
                    &self.value(*v).data,
                );
                let mut dq = Mat::zeros(rows, d);
                let mut dk = Mat::zeros(rows, d);
                let mut dv = Mat::zeros(rows, d);
                let mut dp = vec![T::zero(); seq * seq];
                for b in 0..batch {
                    for h in 0..heads {
                        let off = b * seq * d + h * dh;
                        let p_off = (b * heads + h) * seq * seq;
                        let p = &probs[p_off..p_off + seq * seq];
                        // dV = Pᵀ·dO
                        T::gemm(
                            seq,
                            seq,
                            dh,
                            T::one(),
                            p,
                            (1, seq),
                            &g.data[off..],
                            (d, 1),
                            T::zero(),
                            &mut dv.data[off..],
                            (d, 1),
                        );
                        // dP = dO·Vᵀ
                        T::gemm(
                            seq,
                            dh,
                            seq,
                            T::one(),
                            &g.data[off..],
                            (d, 1),
                            &vd[off..],
                            (1, d),
                            T::zero(),
                            &mut dp,
                            (seq, 1),
                        );
                        // dS = P ⊙ (dP − rowsum(dP ⊙ P))
                        for r in 0..seq {
                            let pr = &p[r * seq..(r + 1) * seq];
                            let dpr = &mut dp[r * seq..(r + 1) * seq];
                            let dot = pr
                                .iter()
                                .zip(dpr.iter())
                                .fold(T::zero(), |a, (&x, &y)| a + x * y);
                            for (dv_, &pv) in dpr.iter_mut().zip(pr) {
                                *dv_ = pv * (*dv_ - dot);
                            }
                        }
                        // dQ = scale·dS·K, dK = scale·dSᵀ·Q
                        T::gemm(
                            seq,
                            seq,
                            dh,
                            scale,
                            &dp,
                            (seq, 1),
                            &kd[off..],
                            (d, 1),
                            T::zero(),
                            &mut dq.data[off..],
                            (d, 1),
                        );
                        T::gemm(
                            seq,
                            seq,
                            dh,
                            scale,
                            &dp,
                            (1, seq),
                            &qd[off..],
                            (d, 1),
                            T::zero(),
                            &mut dk.data[off..],
                            (d, 1),
                        );
                    }
                }
                self.accumulate(grads, *q, dq);
                self.accumulate(grads, *k, dk);
                self.accumulate(grads, *v, dv);
            }
            Op::Gather { srcs, map } => {
                let mut parts: Vec<Option<Mat<T>>> = srcs
                    .iter()
                    .map(|s| {
                        let sv = self.value(*s);
                        self.nodes[s.0]
                            .needs_grad
                            .then(|| Mat::zeros(sv.rows, sv.cols))
                    })
                    .collect();
                for (r, &(s, row)) in map.iter().enumerate() {
                    if let Some(part) = &mut parts[s as usize] {
                        for (d, &v) in part.row_mut(row as usize).iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                }
                for (s, part) in srcs.iter().zip(parts) {
                    if let Some(part) = part {
                        self.accumulate(grads, *s, part);
                    }
                }
            }
            Op::Reshape(x) => {
                let xv = self.value(*x);
                self.accumulate(grads, *x, Mat::from_vec(xv.rows, xv.cols, g.data));
            }
            Op::SquaredError { pred, target, rows } => {
                let seed = g.data[0];
                let pv = self.value(*pred);
                let mut dp = Mat::zeros(pv.rows, pv.cols);
                let two = T::lit(2.0);
                for &(r, w) in rows {
                    let coef = two * w * seed;
                    for ((d, &p), &t) in dp.row_mut(r).iter_mut().zip(pv.row(r)).zip(target.row(r)) {
                        *d += coef * (p - t);
                    }
                }
                self.accumulate(grads, *pred, dp);
            }
            Op::Bce {
                logits,
                targets,
                weight,
                form,
            } => {
                let coef = g.data[0] * *weight;
                let lv = self.value(*logits);
                let dz = Mat::from_vec(
                    lv.rows,
                    lv.cols,
                    lv.data
                        .iter()
                        .zip(&targets.data)
                        .map(|(&z, &y)| coef * bce_grad(z, y, *form))
                        .collect(),
                );
                self.accumulate(grads, *logits, dz);
            }
        }
    }
}

fn softmax_rows<T: Float>(data: &mut [T], cols: usize) {
    for row in data.chunks_exact_mut(cols) {
        let max = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
}

fn clamp_prob<T: Float>(z: T, eps: f64) -> T {
    let eps = T::lit(eps);
    sigmoid(z).max(eps).min(T::one() - eps)
}

pub(crate) fn bce_value<T: Float>(z: T, y: T, form: BceForm) -> T {
    match form {
        BceForm::LogSumExp => z.max(T::zero()) - z * y + (T::one() + (-z.abs()).exp()).ln(),
        BceForm::Clamped { eps } => {
            let p = clamp_prob(z, eps);
            -(y * p.ln() + (T::one() - y) * (T::one() - p).ln())
        }
        BceForm::ClampedPositiveOnly { eps } => -(y * clamp_prob(z, eps).ln()),
    }
}

/// Derivative with respect to the logit. The clamped forms use the
/// derivative of the unclamped expression so saturated wrong predictions
/// still receive a corrective gradient.
pub(crate) fn bce_grad<T: Float>(z: T, y: T, form: BceForm) -> T {
    let p = sigmoid(z);
    match form {
        BceForm::LogSumExp | BceForm::Clamped { .. } => p - y,
        BceForm::ClampedPositiveOnly { .. } => -(y * (T::one() - p)),
    }
}
