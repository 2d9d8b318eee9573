//! Minimal dense numeric kernel: row-major 2D tensors, the handful of forward
//! operations the toy decoder needs, their hand-derived backward passes, a
//! parameter store with Adam, and a central-difference gradient checker.
//!
//! Everything is generic over [`Real`] so the same code runs in 32-bit
//! (training speed) and 64-bit (oracle verification).

use std::cell::Cell;
use std::fmt;

use num_traits::{Float, ToPrimitive};
use thiserror::Error;

/// Scalar type the kernel is generic over. Implemented for `f32` and `f64`.
pub trait Real:
    Float
    + ToPrimitive
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + fmt::Debug
    + fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64_lossy(self) -> f64;
}

impl Real for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64_lossy(self) -> f64 {
        self
    }
}

#[derive(Debug, Error)]
pub enum NumError {
    #[error("{op}: shape mismatch, lhs is {lhs_rows}x{lhs_cols}, rhs is {rhs_rows}x{rhs_cols}")]
    ShapeMismatch {
        op: &'static str,
        lhs_rows: usize,
        lhs_cols: usize,
        rhs_rows: usize,
        rhs_cols: usize,
    },
    #[error("non-finite value in {what}")]
    NonFinite { what: String },
    #[error("configuration error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, NumError>;

thread_local! {
    static FLOPS: Cell<u64> = const { Cell::new(0) };
}

/// Reset the thread-local matmul FLOP counter.
pub fn reset_flops() {
    FLOPS.with(|c| c.set(0));
}

/// Read the thread-local matmul FLOP counter (2*m*n*k per gemm).
pub fn flops() -> u64 {
    FLOPS.with(|c| c.get())
}

fn count_flops(n: u64) {
    FLOPS.with(|c| c.set(c.get() + n));
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2D<T: Real> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tensor2D<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length must be rows*cols");
        Self { rows, cols, data }
    }

    pub fn full(rows: usize, cols: usize, v: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// self += other * scale
    pub fn add_scaled(&mut self, other: &Self, scale: T) {
        assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b * scale;
        }
    }

    pub fn hadamard(&self, other: &Self) -> Self {
        assert_eq!(self.shape(), other.shape());
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| a * b)
                .collect(),
        }
    }

    pub fn push_row(&mut self, row: &[T]) {
        assert_eq!(row.len(), self.cols);
        self.data.extend_from_slice(row);
        self.rows += 1;
    }

    /// Stack tensors vertically; all must share the column count.
    pub fn concat_rows(parts: &[&Self]) -> Self {
        let cols = parts.first().map(|p| p.cols).unwrap_or(0);
        let rows = parts.iter().map(|p| p.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            assert_eq!(p.cols, cols);
            data.extend_from_slice(&p.data);
        }
        Self { rows, cols, data }
    }

    /// Sum over rows, returning a 1 x cols tensor.
    pub fn col_sum(&self) -> Self {
        let mut out = Self::zeros(1, self.cols);
        for i in 0..self.rows {
            let r = self.row(i);
            for (o, &v) in out.data.iter_mut().zip(r.iter()) {
                *o += v;
            }
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn to_f64(&self) -> Tensor2D<f64> {
        Tensor2D {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x.to_f64_lossy()).collect(),
        }
    }

    pub fn from_f64(src: &Tensor2D<f64>) -> Self {
        Self {
            rows: src.rows,
            cols: src.cols,
            data: src.data.iter().map(|&x| T::from_f64(x)).collect(),
        }
    }
}

/// Boolean matrix used for attention masks.
#[derive(Debug, Clone, PartialEq)]
pub struct BoolMat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<bool>,
}

impl BoolMat {
    pub fn new(rows: usize, cols: usize, v: bool) -> Self {
        Self {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// Matrix product a*b. Accumulation order over k is ascending for every
/// output element, so incremental (row-at-a-time) and batched computations
/// produce bit-identical results.
pub fn gemm<T: Real>(a: &Tensor2D<T>, b: &Tensor2D<T>) -> Result<Tensor2D<T>> {
    if a.cols != b.rows {
        return Err(NumError::ShapeMismatch {
            op: "gemm",
            lhs_rows: a.rows,
            lhs_cols: a.cols,
            rhs_rows: b.rows,
            rhs_cols: b.cols,
        });
    }
    count_flops(2 * a.rows as u64 * a.cols as u64 * b.cols as u64);
    let mut out = Tensor2D::zeros(a.rows, b.cols);
    // ikj loop: cache-friendly and accumulates k in ascending order.
    for i in 0..a.rows {
        let a_row = a.row(i);
        let out_row = out.row_mut(i);
        for (k, &aik) in a_row.iter().enumerate() {
            let b_row = b.row(k);
            for (o, &bkj) in out_row.iter_mut().zip(b_row.iter()) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// Gradients of gemm: given dC for C = A*B, returns (dA, dB).
pub fn gemm_backward<T: Real>(
    d_out: &Tensor2D<T>,
    a: &Tensor2D<T>,
    b: &Tensor2D<T>,
) -> Result<(Tensor2D<T>, Tensor2D<T>)> {
    let da = gemm(d_out, &b.transpose())?;
    let db = gemm(&a.transpose(), d_out)?;
    Ok((da, db))
}

/// Row-wise softmax restricted to `allowed` entries. Disallowed entries are
/// exactly zero; a row with no allowed entries is all zero.
pub fn masked_softmax_rows<T: Real>(scores: &Tensor2D<T>, allowed: &BoolMat) -> Result<Tensor2D<T>> {
    if scores.rows != allowed.rows || scores.cols != allowed.cols {
        return Err(NumError::ShapeMismatch {
            op: "masked_softmax_rows",
            lhs_rows: scores.rows,
            lhs_cols: scores.cols,
            rhs_rows: allowed.rows,
            rhs_cols: allowed.cols,
        });
    }
    let mut out = Tensor2D::zeros(scores.rows, scores.cols);
    for i in 0..scores.rows {
        let srow = scores.row(i);
        let arow = allowed.row(i);
        let mut max = T::neg_infinity();
        for (s, &ok) in srow.iter().zip(arow.iter()) {
            if ok && *s > max {
                max = *s;
            }
        }
        if max == T::neg_infinity() {
            continue; // fully masked row stays zero
        }
        let orow = out.row_mut(i);
        let mut sum = T::zero();
        for ((o, &s), &ok) in orow.iter_mut().zip(srow.iter()).zip(arow.iter()) {
            if ok {
                let e = (s - max).exp();
                *o = e;
                sum += e;
            }
        }
        for o in orow.iter_mut() {
            *o = *o / sum;
        }
    }
    Ok(out)
}

/// Backward of row-wise softmax: ds = p ⊙ (dp − Σ_j p_j dp_j). Works for
/// masked rows too since masked probabilities are exactly zero.
pub fn softmax_backward_rows<T: Real>(probs: &Tensor2D<T>, d_probs: &Tensor2D<T>) -> Tensor2D<T> {
    assert_eq!(probs.shape(), d_probs.shape());
    let mut out = Tensor2D::zeros(probs.rows, probs.cols);
    for i in 0..probs.rows {
        let p = probs.row(i);
        let dp = d_probs.row(i);
        let mut dot = T::zero();
        for (&pi, &di) in p.iter().zip(dp.iter()) {
            dot += pi * di;
        }
        let o = out.row_mut(i);
        for ((oi, &pi), &di) in o.iter_mut().zip(p.iter()).zip(dp.iter()) {
            *oi = pi * (di - dot);
        }
    }
    out
}

/// RMS norm: each row scaled by 1/sqrt(mean of squares + eps), then gamma.
pub fn rms_norm<T: Real>(x: &Tensor2D<T>, gamma: &[T], eps: T) -> Result<Tensor2D<T>> {
    if gamma.len() != x.cols {
        return Err(NumError::ShapeMismatch {
            op: "rms_norm",
            lhs_rows: x.rows,
            lhs_cols: x.cols,
            rhs_rows: 1,
            rhs_cols: gamma.len(),
        });
    }
    let mut out = Tensor2D::zeros(x.rows, x.cols);
    let n = T::from_f64(x.cols as f64);
    for i in 0..x.rows {
        let xr = x.row(i);
        let mut ms = T::zero();
        for &v in xr {
            ms += v * v;
        }
        ms = ms / n;
        let r = (ms + eps).sqrt().recip();
        let or = out.row_mut(i);
        for ((o, &v), &g) in or.iter_mut().zip(xr.iter()).zip(gamma.iter()) {
            *o = v * r * g;
        }
    }
    Ok(out)
}

/// Backward of rms_norm; returns (dx, dgamma).
pub fn rms_norm_backward<T: Real>(
    x: &Tensor2D<T>,
    gamma: &[T],
    eps: T,
    d_out: &Tensor2D<T>,
) -> (Tensor2D<T>, Vec<T>) {
    let n = T::from_f64(x.cols as f64);
    let mut dx = Tensor2D::zeros(x.rows, x.cols);
    let mut dg = vec![T::zero(); x.cols];
    for i in 0..x.rows {
        let xr = x.row(i);
        let dr = d_out.row(i);
        let mut ms = T::zero();
        for &v in xr {
            ms += v * v;
        }
        ms = ms / n;
        let inv = (ms + eps).sqrt().recip();
        // s = sum_j d_j * gamma_j * x_j
        let mut s = T::zero();
        for ((&d, &g), &v) in dr.iter().zip(gamma.iter()).zip(xr.iter()) {
            s += d * g * v;
            let _ = v;
        }
        let inv3 = inv * inv * inv;
        let dxr = dx.row_mut(i);
        for (j, dxj) in dxr.iter_mut().enumerate() {
            *dxj = dr[j] * gamma[j] * inv - xr[j] * inv3 / n * s;
            dg[j] += dr[j] * xr[j] * inv;
        }
    }
    (dx, dg)
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    (T::one() + (-x).exp()).recip()
}

#[inline]
pub fn silu<T: Real>(x: T) -> T {
    x * sigmoid(x)
}

/// d silu(x)/dx = sigma(x) * (1 + x * (1 - sigma(x)))
#[inline]
pub fn silu_prime<T: Real>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

/// SwiGLU feed-forward: silu(x*w_gate) ⊙ (x*w_up), then *w_down.
pub fn swiglu_ffn<T: Real>(
    x: &Tensor2D<T>,
    w_gate: &Tensor2D<T>,
    w_up: &Tensor2D<T>,
    w_down: &Tensor2D<T>,
) -> Result<Tensor2D<T>> {
    let a = gemm(x, w_gate)?;
    let b = gemm(x, w_up)?;
    let mut h = Tensor2D::zeros(a.rows, a.cols);
    for ((hv, &av), &bv) in h.data.iter_mut().zip(a.data.iter()).zip(b.data.iter()) {
        *hv = silu(av) * bv;
    }
    gemm(&h, w_down)
}

/// Intermediates of a SwiGLU forward, kept for the backward pass.
pub struct SwigluTrace<T: Real> {
    pub a: Tensor2D<T>, // x*w_gate
    pub b: Tensor2D<T>, // x*w_up
    pub h: Tensor2D<T>, // silu(a) ⊙ b
}

pub fn swiglu_forward<T: Real>(
    x: &Tensor2D<T>,
    w_gate: &Tensor2D<T>,
    w_up: &Tensor2D<T>,
    w_down: &Tensor2D<T>,
) -> Result<(Tensor2D<T>, SwigluTrace<T>)> {
    let a = gemm(x, w_gate)?;
    let b = gemm(x, w_up)?;
    let mut h = Tensor2D::zeros(a.rows, a.cols);
    for ((hv, &av), &bv) in h.data.iter_mut().zip(a.data.iter()).zip(b.data.iter()) {
        *hv = silu(av) * bv;
    }
    let y = gemm(&h, w_down)?;
    Ok((y, SwigluTrace { a, b, h }))
}

pub struct SwigluGrads<T: Real> {
    pub dx: Tensor2D<T>,
    pub dw_gate: Tensor2D<T>,
    pub dw_up: Tensor2D<T>,
    pub dw_down: Tensor2D<T>,
}

pub fn swiglu_backward<T: Real>(
    x: &Tensor2D<T>,
    w_gate: &Tensor2D<T>,
    w_up: &Tensor2D<T>,
    w_down: &Tensor2D<T>,
    trace: &SwigluTrace<T>,
    d_out: &Tensor2D<T>,
) -> Result<SwigluGrads<T>> {
    let (dh, dw_down) = gemm_backward(d_out, &trace.h, w_down)?;
    let mut da = Tensor2D::zeros(dh.rows, dh.cols);
    let mut db = Tensor2D::zeros(dh.rows, dh.cols);
    for i in 0..dh.data.len() {
        let a = trace.a.data[i];
        let b = trace.b.data[i];
        let d = dh.data[i];
        da.data[i] = d * b * silu_prime(a);
        db.data[i] = d * silu(a);
    }
    let (dx_a, dw_gate) = gemm_backward(&da, x, w_gate)?;
    let (dx_b, dw_up) = gemm_backward(&db, x, w_up)?;
    let mut dx = dx_a;
    dx.add_scaled(&dx_b, T::one());
    Ok(SwigluGrads {
        dx,
        dw_gate,
        dw_up,
        dw_down,
    })
}

/// Named parameter: value plus accumulated gradient of the same shape.
#[derive(Debug, Clone)]
pub struct Param<T: Real> {
    pub name: String,
    pub value: Tensor2D<T>,
    pub grad: Tensor2D<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Owns every trainable parameter. Weight sharing is expressed by two code
/// paths holding the same ParamId, so gradients from both accumulate into
/// the same storage.
#[derive(Debug, Clone)]
pub struct ParamStore<T: Real> {
    pub params: Vec<Param<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn alloc(&mut self, name: impl Into<String>, value: Tensor2D<T>) -> ParamId {
        let grad = Tensor2D::zeros(value.rows, value.cols);
        self.params.push(Param {
            name: name.into(),
            value,
            grad,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn value(&self, id: ParamId) -> &Tensor2D<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor2D<T> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor2D<T> {
        &self.params[id.0].grad
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: &Tensor2D<T>) {
        self.params[id.0].grad.add_scaled(g, T::one());
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            for g in &mut p.grad.data {
                *g = T::zero();
            }
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }
}

/// Adam optimizer state aligned with a ParamStore.
pub struct Adam<T: Real> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    m: Vec<Tensor2D<T>>,
    v: Vec<Tensor2D<T>>,
    t: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>, lr: T) -> Self {
        Self {
            lr,
            beta1: T::from_f64(0.9),
            beta2: T::from_f64(0.999),
            eps: T::from_f64(1e-8),
            m: store
                .params
                .iter()
                .map(|p| Tensor2D::zeros(p.value.rows, p.value.cols))
                .collect(),
            v: store
                .params
                .iter()
                .map(|p| Tensor2D::zeros(p.value.rows, p.value.cols))
                .collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, frozen: &[ParamId]) {
        self.t += 1;
        let t = T::from_f64(self.t as f64);
        let bc1 = T::one() - self.beta1.powf(t);
        let bc2 = T::one() - self.beta2.powf(t);
        for (idx, p) in store.params.iter_mut().enumerate() {
            if frozen.iter().any(|f| f.0 == idx) {
                continue;
            }
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for i in 0..p.value.data.len() {
                let g = p.grad.data[i];
                m.data[i] = self.beta1 * m.data[i] + (T::one() - self.beta1) * g;
                v.data[i] = self.beta2 * v.data[i] + (T::one() - self.beta2) * g * g;
                let mh = m.data[i] / bc1;
                let vh = v.data[i] / bc2;
                p.value.data[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// One entry's comparison in a gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst: Option<GradCheckEntry>,
    pub checked: usize,
}

/// Central-difference gradient check against the analytic gradients already
/// accumulated in `store.grad`. `loss_fn` must be a pure function of the
/// parameter values. Checks every entry of the listed params, or a sample of
/// `sample_per_param` entries when given (deterministic stride sampling).
pub fn grad_check<T: Real, F>(
    store: &mut ParamStore<T>,
    ids: &[ParamId],
    mut loss_fn: F,
    h: f64,
    sample_per_param: Option<usize>,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore<T>) -> Result<T>,
{
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    for &id in ids {
        let n = store.params[id.0].value.data.len();
        let analytic: Vec<f64> = store.params[id.0]
            .grad
            .data
            .iter()
            .map(|g| g.to_f64_lossy())
            .collect();
        let indices: Vec<usize> = match sample_per_param {
            Some(k) if k < n => {
                let stride = n / k;
                (0..k).map(|i| i * stride).collect()
            }
            _ => (0..n).collect(),
        };
        for idx in indices {
            let orig = store.params[id.0].value.data[idx];
            store.params[id.0].value.data[idx] = orig + T::from_f64(h);
            let lp = loss_fn(store)?.to_f64_lossy();
            store.params[id.0].value.data[idx] = orig - T::from_f64(h);
            let lm = loss_fn(store)?.to_f64_lossy();
            store.params[id.0].value.data[idx] = orig;
            let numeric = (lp - lm) / (2.0 * h);
            let a = analytic[idx];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(NumError::NonFinite {
                    what: format!("gradient of {} at index {}", store.params[id.0].name, idx),
                });
            }
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            let rel = (a - numeric).abs() / denom;
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some(GradCheckEntry {
                    param: store.params[id.0].name.clone(),
                    index: idx,
                    analytic: a,
                    numeric,
                    rel_err: rel,
                });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_tensor(rng: &mut StdRng, r: usize, c: usize) -> Tensor2D<f64> {
        Tensor2D::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn gemm_identity() {
        let mut rng = StdRng::seed_from_u64(1);
        let a = random_tensor(&mut rng, 3, 3);
        let i3 = Tensor2D::identity(3);
        assert_eq!(gemm(&i3, &a).unwrap(), a);
        assert_eq!(gemm(&a, &i3).unwrap(), a);
    }

    #[test]
    fn gemm_annihilator() {
        let mut rng = StdRng::seed_from_u64(2);
        let a = random_tensor(&mut rng, 4, 5);
        let z = Tensor2D::<f64>::zeros(5, 2);
        let out = gemm(&a, &z).unwrap();
        assert!(out.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn gemm_matches_triple_loop_oracle() {
        let mut rng = StdRng::seed_from_u64(3);
        let a = random_tensor(&mut rng, 4, 5);
        let b = random_tensor(&mut rng, 5, 3);
        let c = gemm(&a, &b).unwrap();
        // independent naive triple loop
        for i in 0..4 {
            for j in 0..3 {
                let mut acc = 0.0;
                for k in 0..5 {
                    acc += a.get(i, k) * b.get(k, j);
                }
                assert!((c.get(i, j) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gemm_shape_mismatch_reports_both_shapes() {
        let a = Tensor2D::<f64>::zeros(2, 3);
        let b = Tensor2D::<f64>::zeros(4, 2);
        let err = gemm(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3") && msg.contains("4x2"), "{msg}");
    }

    #[test]
    fn masked_softmax_symmetry_and_full_mask() {
        let s = Tensor2D::from_vec(1, 2, vec![0.0, 0.0]);
        let allowed = BoolMat::new(1, 2, true);
        let p = masked_softmax_rows(&s, &allowed).unwrap();
        assert!((p.get(0, 0) - 0.5).abs() < 1e-15);
        assert!((p.get(0, 1) - 0.5).abs() < 1e-15);

        let s = Tensor2D::from_vec(1, 2, vec![5.0, 9.0]);
        let none = BoolMat::new(1, 2, false);
        let p = masked_softmax_rows(&s, &none).unwrap();
        assert_eq!(p.data, vec![0.0, 0.0]);
    }

    #[test]
    fn masked_softmax_matches_exp_normalize_oracle() {
        let mut rng = StdRng::seed_from_u64(4);
        let s = random_tensor(&mut rng, 3, 4);
        let mut allowed = BoolMat::new(3, 4, false);
        for i in 0..3 {
            for j in 0..4 {
                allowed.set(i, j, rng.gen_bool(0.6));
            }
        }
        let p = masked_softmax_rows(&s, &allowed).unwrap();
        for i in 0..3 {
            // exp-normalize oracle over the allowed subset
            let mut z = 0.0;
            for j in 0..4 {
                if allowed.get(i, j) {
                    z += s.get(i, j).exp();
                }
            }
            for j in 0..4 {
                let expect = if allowed.get(i, j) {
                    s.get(i, j).exp() / z
                } else {
                    0.0
                };
                assert!((p.get(i, j) - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn masked_softmax_rows_sum_to_one_or_zero() {
        let mut rng = StdRng::seed_from_u64(5);
        let s = random_tensor(&mut rng, 8, 6);
        let mut allowed = BoolMat::new(8, 6, false);
        for i in 0..8 {
            for j in 0..6 {
                allowed.set(i, j, rng.gen_bool(0.4));
            }
        }
        let p = masked_softmax_rows(&s, &allowed).unwrap();
        for i in 0..8 {
            let any = (0..6).any(|j| allowed.get(i, j));
            let sum: f64 = p.row(i).iter().sum();
            if any {
                assert!((sum - 1.0).abs() < 1e-12);
            } else {
                assert_eq!(sum, 0.0);
            }
            assert!(p.row(i).iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }

    #[test]
    fn rms_norm_constant_and_zero_rows() {
        let x = Tensor2D::from_vec(1, 4, vec![3.0, 3.0, 3.0, 3.0]);
        let gamma = vec![1.0; 4];
        let y = rms_norm(&x, &gamma, 0.0).unwrap();
        for &v in &y.data {
            assert!((v - 1.0).abs() < 1e-15);
        }
        let z = Tensor2D::from_vec(1, 4, vec![0.0; 4]);
        let y = rms_norm(&z, &gamma, 1e-6).unwrap();
        assert!(y.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rms_norm_matches_definitional_oracle() {
        let mut rng = StdRng::seed_from_u64(6);
        let x = random_tensor(&mut rng, 1, 7);
        let gamma: Vec<f64> = (0..7).map(|_| rng.gen_range(0.5..1.5)).collect();
        let eps = 1e-6;
        let y = rms_norm(&x, &gamma, eps).unwrap();
        let ms: f64 = x.data.iter().map(|v| v * v).sum::<f64>() / 7.0;
        for j in 0..7 {
            let expect = x.get(0, j) / (ms + eps).sqrt() * gamma[j];
            assert!((y.get(0, j) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn rms_norm_scale_invariance_at_zero_eps() {
        let mut rng = StdRng::seed_from_u64(7);
        let x = random_tensor(&mut rng, 2, 5);
        let gamma = vec![1.0; 5];
        let y1 = rms_norm(&x, &gamma, 0.0).unwrap();
        let xs = x.map(|v| v * 17.5);
        let y2 = rms_norm(&xs, &gamma, 0.0).unwrap();
        for (a, b) in y1.data.iter().zip(y2.data.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn swiglu_zero_input_and_scalar_oracle() {
        let x = Tensor2D::<f64>::zeros(2, 3);
        let wg = Tensor2D::identity(3);
        let wu = Tensor2D::identity(3);
        let wd = Tensor2D::identity(3);
        let y = swiglu_ffn(&x, &wg, &wu, &wd).unwrap();
        assert!(y.data.iter().all(|&v| v == 0.0));

        // identity weights, scalar formula oracle: y_j = silu(x_j) * x_j
        let x = Tensor2D::from_vec(1, 3, vec![0.1, -0.2, 0.3]);
        let y = swiglu_ffn(&x, &wg, &wu, &wd).unwrap();
        for j in 0..3 {
            let v: f64 = x.get(0, j);
            let expect = v * (1.0 / (1.0 + (-v).exp())) * v;
            assert!((y.get(0, j) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn swiglu_matches_definitional_oracle_random() {
        let mut rng = StdRng::seed_from_u64(8);
        let x = random_tensor(&mut rng, 3, 4);
        let wg = random_tensor(&mut rng, 4, 6);
        let wu = random_tensor(&mut rng, 4, 6);
        let wd = random_tensor(&mut rng, 6, 4);
        let y = swiglu_ffn(&x, &wg, &wu, &wd).unwrap();
        // definitional oracle via independent scalar loops
        for i in 0..3 {
            for j in 0..4 {
                let mut acc = 0.0;
                for k in 0..6 {
                    let mut a = 0.0;
                    let mut b = 0.0;
                    for m in 0..4 {
                        a += x.get(i, m) * wg.get(m, k);
                        b += x.get(i, m) * wu.get(m, k);
                    }
                    let s = a / (1.0 + (-a).exp());
                    acc += s * b * wd.get(k, j);
                }
                assert!((y.get(i, j) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn grad_check_linear_map() {
        // y = x*W, loss = sum(y); dL/dW = x^T * ones
        let mut rng = StdRng::seed_from_u64(9);
        let x = random_tensor(&mut rng, 3, 4);
        let mut store = ParamStore::new();
        let w = store.alloc("w", random_tensor(&mut rng, 4, 2));
        let ones = Tensor2D::full(3, 2, 1.0);
        let (_, dw) = gemm_backward(&ones, &x, store.value(w)).unwrap();
        store.accumulate_grad(w, &dw);
        let report = grad_check(
            &mut store,
            &[w],
            |s| {
                let y = gemm(&x, s.value(w))?;
                Ok(y.data.iter().sum())
            },
            1e-5,
            None,
        )
        .unwrap();
        assert!(report.max_rel_err <= 1e-8, "{:?}", report.worst);
    }

    #[test]
    fn grad_check_swiglu_params() {
        let mut rng = StdRng::seed_from_u64(10);
        let x = random_tensor(&mut rng, 2, 4);
        let mut store = ParamStore::new();
        let wg = store.alloc("w_gate", random_tensor(&mut rng, 4, 5));
        let wu = store.alloc("w_up", random_tensor(&mut rng, 4, 5));
        let wd = store.alloc("w_down", random_tensor(&mut rng, 5, 4));
        let (_, trace) =
            swiglu_forward(&x, store.value(wg), store.value(wu), store.value(wd)).unwrap();
        let d_out = Tensor2D::full(2, 4, 1.0);
        let grads = swiglu_backward(
            &x,
            store.value(wg),
            store.value(wu),
            store.value(wd),
            &trace,
            &d_out,
        )
        .unwrap();
        store.accumulate_grad(wg, &grads.dw_gate);
        store.accumulate_grad(wu, &grads.dw_up);
        store.accumulate_grad(wd, &grads.dw_down);
        let report = grad_check(
            &mut store,
            &[wg, wu, wd],
            |s| {
                let y = swiglu_ffn(&x, s.value(wg), s.value(wu), s.value(wd))?;
                Ok(y.data.iter().sum())
            },
            1e-5,
            None,
        )
        .unwrap();
        assert!(report.max_rel_err <= 1e-7, "{:?}", report.worst);
    }

    #[test]
    fn rms_norm_backward_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(11);
        let x = random_tensor(&mut rng, 2, 5);
        let gamma: Vec<f64> = (0..5).map(|_| rng.gen_range(0.5..1.5)).collect();
        let eps = 1e-5;
        let d_out = random_tensor(&mut rng, 2, 5);
        let (dx, dg) = rms_norm_backward(&x, &gamma, eps, &d_out);
        let h = 1e-6;
        // dx check
        for idx in 0..x.data.len() {
            let mut xp = x.clone();
            xp.data[idx] += h;
            let mut xm = x.clone();
            xm.data[idx] -= h;
            let lp: f64 = rms_norm(&xp, &gamma, eps)
                .unwrap()
                .data
                .iter()
                .zip(d_out.data.iter())
                .map(|(a, b)| a * b)
                .sum();
            let lm: f64 = rms_norm(&xm, &gamma, eps)
                .unwrap()
                .data
                .iter()
                .zip(d_out.data.iter())
                .map(|(a, b)| a * b)
                .sum();
            let num = (lp - lm) / (2.0 * h);
            assert!((num - dx.data[idx]).abs() < 1e-6, "idx {idx}");
        }
        // dgamma check
        for j in 0..5 {
            let mut gp = gamma.clone();
            gp[j] += h;
            let mut gm = gamma.clone();
            gm[j] -= h;
            let lp: f64 = rms_norm(&x, &gp, eps)
                .unwrap()
                .data
                .iter()
                .zip(d_out.data.iter())
                .map(|(a, b)| a * b)
                .sum();
            let lm: f64 = rms_norm(&x, &gm, eps)
                .unwrap()
                .data
                .iter()
                .zip(d_out.data.iter())
                .map(|(a, b)| a * b)
                .sum();
            let num = (lp - lm) / (2.0 * h);
            assert!((num - dg[j]).abs() < 1e-6);
        }
    }

    #[test]
    fn flop_counter_counts_gemm() {
        reset_flops();
        let a = Tensor2D::<f64>::zeros(3, 4);
        let b = Tensor2D::<f64>::zeros(4, 5);
        let _ = gemm(&a, &b).unwrap();
        assert_eq!(flops(), 2 * 3 * 4 * 5);
    }
}
