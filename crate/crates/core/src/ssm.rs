//! 1D state-space machinery.
//!
//! The continuous system `h' = A h + B x`, `y = C h + D x` is discretized with
//! a zero-order hold of width `Δ`:
//!
//! ```text
//! Ā = exp(ΔA)
//! B̄ = (ΔA)⁻¹ (exp(ΔA) − 1) ΔB
//! h_k = Ā h_{k−1} + B̄ x_k,   y_k = C h_k + D x_k
//! ```
//!
//! `A` is diagonal: every channel carries `N` independent scalar states. For
//! time-invariant parameters the recurrence equals a causal convolution with
//! `K̄ = (C B̄, C Ā B̄, …, C Ā^{L−1} B̄)`; [`lti_scan`] and
//! [`lti_scan_via_kernel`] implement both routes so each can check the other.
//!
//! The selective variant ([`S6`]) derives `B_k`, `C_k` and `Δ_k` from the input
//! at every step.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{Binding, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};

/// Below this `|ΔA|` the hold uses the first-order limit `B̄ = ΔB`.
pub const ZOH_LIMIT: f64 = 1e-4;

/// Zero-order-hold discretization of one diagonal state entry.
#[inline]
pub fn zoh<S: Scalar>(a: S, b: S, delta: S) -> (S, S) {
    let (a_bar, phi) = zoh_factors(a, delta);
    (a_bar, phi * b)
}

/// `(Ā, φ)` with `B̄ = φ B`.
#[inline]
fn zoh_factors<S: Scalar>(a: S, delta: S) -> (S, S) {
    let z = delta * a;
    // One transcendental per entry: e^z − 1 only cancels badly near z = 0.
    let (a_bar, em1) = if z.abs() > S::of(0.5) {
        let e = z.exp();
        (e, e - S::one())
    } else {
        let m = z.exp_m1();
        (m + S::one(), m)
    };
    let phi = if z.abs() < S::of(ZOH_LIMIT) { delta } else { em1 / a };
    (a_bar, phi)
}

/// `∂φ/∂A`, consistent with the branch taken by [`zoh_factors`].
#[inline]
fn dphi_da<S: Scalar>(a: S, delta: S, a_bar: S) -> S {
    let z = delta * a;
    if z.abs() < S::of(ZOH_LIMIT) {
        S::zero()
    } else if z.abs() < S::of(1e-2) {
        // (z e^z − (e^z − 1)) / A² = Δ² Σ_{n≥2} (n−1) z^{n−2} / n!
        let third = S::of(1.0 / 3.0);
        let eighth = S::of(1.0 / 8.0);
        let thirtieth = S::of(1.0 / 30.0);
        delta * delta * (S::of(0.5) + z * (third + z * (eighth + z * thirtieth)))
    } else {
        (z * a_bar - z.exp_m1()) / (a * a)
    }
}

/// Elementwise [`zoh`] over matching slices of diagonal entries.
pub fn discretize_zoh<S: Scalar>(a: &[S], b: &[S], delta: &[S]) -> Result<(Vec<S>, Vec<S>)> {
    if a.len() != b.len() || a.len() != delta.len() {
        return Err(Error::dim(format!(
            "discretize_zoh: lengths {}, {}, {} differ",
            a.len(),
            b.len(),
            delta.len()
        )));
    }
    Ok(a.iter()
        .zip(b)
        .zip(delta)
        .map(|((&a, &b), &d)| zoh(a, b, d))
        .unzip())
}

/// An `L x D` sequence, row-major (`values[k * D + d]`).
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence<S = f32> {
    len: usize,
    dim: usize,
    values: Vec<S>,
}

impl<S: Scalar> Sequence<S> {
    pub fn new(len: usize, dim: usize, values: Vec<S>) -> Result<Self> {
        if len == 0 || dim == 0 {
            return Err(Error::dim("sequence length and width must be positive"));
        }
        if values.len() != len * dim {
            return Err(Error::dim(format!(
                "sequence {len}x{dim} needs {} values, got {}",
                len * dim,
                values.len()
            )));
        }
        Ok(Sequence { len, dim, values })
    }

    pub fn zeros(len: usize, dim: usize) -> Self {
        Sequence {
            len,
            dim,
            values: vec![S::zero(); len * dim],
        }
    }

    /// Single-channel sequence.
    pub fn scalar(values: &[S]) -> Result<Self> {
        Self::new(values.len(), 1, values.to_vec())
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    #[inline]
    pub fn get(&self, k: usize, d: usize) -> S {
        self.values[k * self.dim + d]
    }

    #[inline]
    pub fn set(&mut self, k: usize, d: usize, v: S) {
        self.values[k * self.dim + d] = v;
    }

    /// Channel-major tensor `(1, D, 1, L)`, the layout the tape ops scan over.
    pub fn to_tensor(&self) -> Tensor<S> {
        Tensor::from_fn(Shape::new(1, self.dim, 1, self.len), |_, d, _, k| {
            self.get(k, d)
        })
    }

    /// Inverse of [`Sequence::to_tensor`] for batch entry `b`; positions are read row-major.
    pub fn from_tensor(t: &Tensor<S>, b: usize) -> Self {
        let (dim, len) = (t.shape().channels(), t.shape().spatial());
        let mut s = Sequence::zeros(len, dim);
        for d in 0..dim {
            for (k, &v) in t.plane(b, d).iter().enumerate() {
                s.set(k, d, v);
            }
        }
        s
    }

    pub fn max_abs(&self) -> S {
        self.values.iter().fold(S::zero(), |a, &v| a.max(v.abs()))
    }
}

/// Time-invariant discretized parameters: `D` channels with `N` diagonal states each.
#[derive(Clone, Debug, PartialEq)]
pub struct LtiParams<S = f32> {
    pub dim: usize,
    pub state: usize,
    /// `D x N`
    pub a_bar: Vec<S>,
    /// `D x N`
    pub b_bar: Vec<S>,
    /// `D x N`
    pub c: Vec<S>,
    /// `D`
    pub d_skip: Vec<S>,
}

impl<S: Scalar> LtiParams<S> {
    /// Single channel, single state.
    pub fn scalar(a_bar: S, b_bar: S, c: S, d_skip: S) -> Self {
        LtiParams {
            dim: 1,
            state: 1,
            a_bar: vec![a_bar],
            b_bar: vec![b_bar],
            c: vec![c],
            d_skip: vec![d_skip],
        }
    }

    fn validate(&self) -> Result<()> {
        let dn = self.dim * self.state;
        if self.a_bar.len() != dn
            || self.b_bar.len() != dn
            || self.c.len() != dn
            || self.d_skip.len() != self.dim
        {
            return Err(Error::dim("LTI parameter lengths disagree with D x N"));
        }
        Ok(())
    }
}

/// Recurrent form: `h_k = Ā h_{k−1} + B̄ x_k`, `y_k = C h_k + D x_k`, `h_0 = 0`.
pub fn lti_scan<S: Scalar>(x: &Sequence<S>, p: &LtiParams<S>) -> Result<Sequence<S>> {
    p.validate()?;
    if x.dim() != p.dim {
        return Err(Error::dim(format!(
            "sequence width {} != parameter width {}",
            x.dim(),
            p.dim
        )));
    }
    let n = p.state;
    let mut y = Sequence::zeros(x.len(), x.dim());
    let mut h = vec![S::zero(); n];
    for d in 0..p.dim {
        h.iter_mut().for_each(|v| *v = S::zero());
        let row = d * n..(d + 1) * n;
        let (a, b, c) = (&p.a_bar[row.clone()], &p.b_bar[row.clone()], &p.c[row]);
        for k in 0..x.len() {
            let xv = x.get(k, d);
            let mut acc = p.d_skip[d] * xv;
            for s in 0..n {
                h[s] = a[s] * h[s] + b[s] * xv;
                acc = acc + c[s] * h[s];
            }
            y.set(k, d, acc);
        }
    }
    Ok(y)
}

/// `K̄_j = Σ_n C Ā^j B̄` for `j = 0..len`, returned as an `len x D` sequence.
pub fn lti_conv_kernel<S: Scalar>(p: &LtiParams<S>, len: usize) -> Result<Sequence<S>> {
    p.validate()?;
    if len == 0 {
        return Err(Error::dim("kernel length must be positive"));
    }
    let n = p.state;
    let mut k = Sequence::zeros(len, p.dim);
    for d in 0..p.dim {
        for s in 0..n {
            let i = d * n + s;
            let mut pow = S::one();
            for j in 0..len {
                k.set(j, d, k.get(j, d) + p.c[i] * pow * p.b_bar[i]);
                pow = pow * p.a_bar[i];
            }
        }
    }
    Ok(k)
}

/// Causal convolution `y_k = Σ_{j ≤ k} K̄_j x_{k−j}` (no skip term).
pub fn lti_scan_via_kernel<S: Scalar>(x: &Sequence<S>, kernel: &Sequence<S>) -> Result<Sequence<S>> {
    if kernel.len() != x.len() || kernel.dim() != x.dim() {
        return Err(Error::dim(format!(
            "kernel {}x{} does not match sequence {}x{}",
            kernel.len(),
            kernel.dim(),
            x.len(),
            x.dim()
        )));
    }
    let mut y = Sequence::zeros(x.len(), x.dim());
    for d in 0..x.dim() {
        for k in 0..x.len() {
            let mut acc = S::zero();
            for j in 0..=k {
                acc = acc + kernel.get(j, d) * x.get(k - j, d);
            }
            y.set(k, d, acc);
        }
    }
    Ok(y)
}

/// States saved by [`selective_scan`] for the backward pass.
#[derive(Clone, Debug)]
pub struct ScanCache<S> {
    /// `[b][d][k][n]`
    states: Vec<S>,
}

fn scan_dims<S: Scalar>(
    x: &Tensor<S>,
    delta: &Tensor<S>,
    a_log: &Tensor<S>,
    bm: &Tensor<S>,
    cm: &Tensor<S>,
    d_skip: Option<&Tensor<S>>,
) -> Result<(usize, usize, usize, usize)> {
    let [bn, dn, _, _] = x.shape().0;
    let l = x.shape().spatial();
    if delta.shape() != x.shape() {
        return Err(Error::dim(format!(
            "Δ shape {:?} != input shape {:?}",
            delta.shape(),
            x.shape()
        )));
    }
    let a_shape = a_log.shape();
    if a_shape.batch() != dn || a_shape.height() != 1 || a_shape.width() != 1 {
        return Err(Error::dim(format!("A_log must be ({dn}, N, 1, 1), got {a_shape:?}")));
    }
    let n = a_shape.channels();
    let want = x.shape().with_channels(n);
    if bm.shape() != want || cm.shape() != want {
        return Err(Error::dim(format!(
            "B/C must be {want:?}, got {:?} and {:?}",
            bm.shape(),
            cm.shape()
        )));
    }
    if let Some(d) = d_skip {
        if d.len() != dn {
            return Err(Error::dim(format!("D has {} entries, expected {dn}", d.len())));
        }
    }
    Ok((bn, dn, l, n))
}

/// `[b][k][n]` copy of a `(B, N, H, W)` tensor.
fn transpose_bnl<S: Scalar>(t: &Tensor<S>) -> Vec<S> {
    let [bn, n, _, _] = t.shape().0;
    let l = t.shape().spatial();
    let mut out = vec![S::zero(); bn * l * n];
    for b in 0..bn {
        for s in 0..n {
            for (k, &v) in t.plane(b, s).iter().enumerate() {
                out[(b * l + k) * n + s] = v;
            }
        }
    }
    out
}

fn untranspose_bnl<S: Scalar>(v: &[S], shape: Shape) -> Tensor<S> {
    let [bn, n, _, _] = shape.0;
    let l = shape.spatial();
    let mut out = Tensor::zeros(shape);
    for b in 0..bn {
        for s in 0..n {
            for (k, o) in out.plane_mut(b, s).iter_mut().enumerate() {
                *o = v[(b * l + k) * n + s];
            }
        }
    }
    out
}

/// Time-varying diagonal scan.
///
/// * `x`, `delta`: `(B, D, H, W)`, scanned over the `L = H * W` positions in row-major order
/// * `a_log`: `(D, N, 1, 1)`, with `A = −exp(A_log)`
/// * `bm`, `cm`: `(B, N, H, W)`, shared by all channels
/// * `d_skip`: `D` entries, or `None` for `D = 0`
pub fn selective_scan<S: Scalar>(
    x: &Tensor<S>,
    delta: &Tensor<S>,
    a_log: &Tensor<S>,
    bm: &Tensor<S>,
    cm: &Tensor<S>,
    d_skip: Option<&Tensor<S>>,
) -> Result<(Tensor<S>, ScanCache<S>)> {
    let (bn, dn, l, n) = scan_dims(x, delta, a_log, bm, cm, d_skip)?;
    let bt = transpose_bnl(bm);
    let ct = transpose_bnl(cm);
    let mut y = Tensor::zeros(x.shape());
    let mut states = vec![S::zero(); bn * dn * l * n];
    let mut a = vec![S::zero(); n];
    let mut h = vec![S::zero(); n];
    for b in 0..bn {
        for d in 0..dn {
            for (s, av) in a.iter_mut().enumerate() {
                *av = -a_log.data()[d * n + s].exp();
            }
            let skip = d_skip.map_or(S::zero(), |t| t.data()[d]);
            h.iter_mut().for_each(|v| *v = S::zero());
            let xs = x.plane(b, d);
            let ds = delta.plane(b, d);
            let base = (b * dn + d) * l * n;
            let ys = y.plane_mut(b, d);
            for k in 0..l {
                let (xv, dt) = (xs[k], ds[k]);
                let brow = &bt[(b * l + k) * n..(b * l + k + 1) * n];
                let crow = &ct[(b * l + k) * n..(b * l + k + 1) * n];
                let mut acc = skip * xv;
                for s in 0..n {
                    let (a_bar, phi) = zoh_factors(a[s], dt);
                    h[s] = a_bar * h[s] + phi * brow[s] * xv;
                    acc = acc + crow[s] * h[s];
                }
                states[base + k * n..base + (k + 1) * n].copy_from_slice(&h);
                ys[k] = acc;
            }
        }
    }
    Ok((y, ScanCache { states }))
}

/// Gradients of [`selective_scan`] with respect to its inputs.
#[derive(Clone, Debug)]
pub struct ScanGrads<S> {
    pub x: Tensor<S>,
    pub delta: Tensor<S>,
    pub a_log: Tensor<S>,
    pub b: Tensor<S>,
    pub c: Tensor<S>,
    pub d_skip: Option<Tensor<S>>,
}

/// Reverse-time adjoint of [`selective_scan`]: `λ_k = C_k g_k + Ā_{k+1} λ_{k+1}`.
#[allow(clippy::too_many_arguments)]
pub fn selective_scan_backward<S: Scalar>(
    x: &Tensor<S>,
    delta: &Tensor<S>,
    a_log: &Tensor<S>,
    bm: &Tensor<S>,
    cm: &Tensor<S>,
    d_skip: Option<&Tensor<S>>,
    cache: &ScanCache<S>,
    gy: &Tensor<S>,
) -> ScanGrads<S> {
    let [bn, dn, _, _] = x.shape().0;
    let l = x.shape().spatial();
    let n = a_log.shape().channels();
    let bt = transpose_bnl(bm);
    let ct = transpose_bnl(cm);
    let mut dbt = vec![S::zero(); bt.len()];
    let mut dct = vec![S::zero(); ct.len()];
    let mut dx = Tensor::zeros(x.shape());
    let mut ddelta = Tensor::zeros(x.shape());
    let mut da = vec![S::zero(); dn * n];
    let mut dd = vec![S::zero(); dn];
    let mut a = vec![S::zero(); n];
    let mut lam = vec![S::zero(); n];
    for b in 0..bn {
        for d in 0..dn {
            for (s, av) in a.iter_mut().enumerate() {
                *av = -a_log.data()[d * n + s].exp();
            }
            let skip = d_skip.map_or(S::zero(), |t| t.data()[d]);
            lam.iter_mut().for_each(|v| *v = S::zero());
            let xs = x.plane(b, d);
            let ds = delta.plane(b, d);
            let gs = gy.plane(b, d);
            let base = (b * dn + d) * l * n;
            let da_row = &mut da[d * n..(d + 1) * n];
            let mut dskip_acc = S::zero();
            for k in (0..l).rev() {
                let (xv, dt, g) = (xs[k], ds[k], gs[k]);
                let row = (b * l + k) * n;
                let hk = &cache.states[base + k * n..base + (k + 1) * n];
                let mut dx_k = skip * g;
                let mut ddt = S::zero();
                dskip_acc = dskip_acc + g * xv;
                for s in 0..n {
                    let hprev = if k > 0 {
                        cache.states[base + (k - 1) * n + s]
                    } else {
                        S::zero()
                    };
                    dct[row + s] = dct[row + s] + g * hk[s];
                    let lk = lam[s] + ct[row + s] * g;
                    let (a_bar, phi) = zoh_factors(a[s], dt);
                    let g_abar = lk * hprev;
                    let bx = bt[row + s] * xv;
                    let g_phi = lk * bx;
                    dbt[row + s] = dbt[row + s] + lk * phi * xv;
                    dx_k = dx_k + lk * phi * bt[row + s];
                    let dphi_ddt = if (dt * a[s]).abs() < S::of(ZOH_LIMIT) {
                        S::one()
                    } else {
                        a_bar
                    };
                    ddt = ddt + g_abar * a[s] * a_bar + g_phi * dphi_ddt;
                    da_row[s] = da_row[s] + g_abar * dt * a_bar + g_phi * dphi_da(a[s], dt, a_bar);
                    lam[s] = lk * a_bar;
                }
                dx.plane_mut(b, d)[k] = dx_k;
                ddelta.plane_mut(b, d)[k] = ddt;
            }
            dd[d] = dd[d] + dskip_acc;
        }
    }
    // dA/dA_log = A
    let mut da_log = Tensor::zeros(a_log.shape());
    for (i, o) in da_log.data_mut().iter_mut().enumerate() {
        *o = da[i] * -a_log.data()[i].exp();
    }
    ScanGrads {
        x: dx,
        delta: ddelta,
        a_log: da_log,
        b: untranspose_bnl(&dbt, bm.shape()),
        c: untranspose_bnl(&dct, cm.shape()),
        d_skip: d_skip.map(|t| Tensor::from_vec(t.shape(), dd).expect("D shape")),
    }
}

/// Learnable parameters of one selective (S6) scan over `D` channels with `N` states.
///
/// `B_k = W_B x_k`, `C_k = W_C x_k`, `Δ_k = softplus(W_Δ x_k + b_Δ)`, `A = −exp(A_log)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmParams {
    pub dim: usize,
    pub state: usize,
    /// `(D, N, 1, 1)`
    pub a_log: ParamId,
    /// `(1, D, 1, 1)`
    pub d_skip: ParamId,
    /// `(N, D, 1, 1)`
    pub w_b: ParamId,
    /// `(N, D, 1, 1)`
    pub w_c: ParamId,
    /// `(D, D, 1, 1)`
    pub w_delta: ParamId,
    /// `(1, D, 1, 1)`
    pub b_delta: ParamId,
    /// Drops the `D x` skip path when set.
    pub zero_skip: bool,
}

pub const DELTA_MIN: f64 = 1e-3;
pub const DELTA_MAX: f64 = 1e-1;

/// `softplus⁻¹(v)` for `v > 0`.
pub fn inverse_softplus(v: f64) -> f64 {
    v + (-(-v).exp_m1()).ln()
}

impl SsmParams {
    /// Registers parameters under `prefix`.
    ///
    /// `A` row `d` starts at `−(1, 2, …, N)`, `D = 1`, and `b_Δ` is set so that
    /// `softplus(b_Δ)` is log-spaced over `[DELTA_MIN, DELTA_MAX]` across channels.
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        prefix: &str,
        dim: usize,
        state: usize,
        rng: &mut R,
    ) -> Self {
        let a_log = Tensor::from_fn(Shape::new(dim, state, 1, 1), |d, s, _, _| {
            let _ = d;
            S::of(((s + 1) as f64).ln())
        });
        let d_skip = Tensor::full(Shape::new(1, dim, 1, 1), S::one());
        let proj_scale = 1.0 / (dim as f64).sqrt();
        let w_b = uniform(rng, Shape::new(state, dim, 1, 1), proj_scale);
        let w_c = uniform(rng, Shape::new(state, dim, 1, 1), proj_scale);
        let w_delta = uniform(rng, Shape::new(dim, dim, 1, 1), 0.1 * proj_scale);
        let (lo, hi) = (DELTA_MIN.ln(), DELTA_MAX.ln());
        let b_delta = Tensor::from_fn(Shape::new(1, dim, 1, 1), |_, d, _, _| {
            let t = if dim > 1 {
                d as f64 / (dim - 1) as f64
            } else {
                0.5
            };
            S::of(inverse_softplus((lo + t * (hi - lo)).exp()))
        });
        SsmParams {
            dim,
            state,
            a_log: store.add(format!("{prefix}.a_log"), a_log),
            d_skip: store.add(format!("{prefix}.d_skip"), d_skip),
            w_b: store.add(format!("{prefix}.w_b"), w_b),
            w_c: store.add(format!("{prefix}.w_c"), w_c),
            w_delta: store.add(format!("{prefix}.w_delta"), w_delta),
            b_delta: store.add(format!("{prefix}.b_delta"), b_delta),
            zero_skip: false,
        }
    }

    pub fn ids(&self) -> [ParamId; 6] {
        [
            self.a_log,
            self.d_skip,
            self.w_b,
            self.w_c,
            self.w_delta,
            self.b_delta,
        ]
    }
}

pub(crate) fn uniform<S: Scalar, R: Rng>(rng: &mut R, shape: Shape, bound: f64) -> Tensor<S> {
    Tensor::from_fn(shape, |_, _, _, _| S::of(rng.gen_range(-bound..=bound)))
}

/// Selective scan block on the tape.
#[derive(Clone, Debug)]
pub struct S6<'a> {
    pub params: &'a SsmParams,
}

impl S6<'_> {
    /// `x`: `(B, D, H, W)`, scanned over row-major positions.
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, bind: &Binding, x: Var) -> Result<Var> {
        let p = self.params;
        let bm = tape.linear(x, bind[p.w_b], None)?;
        let cm = tape.linear(x, bind[p.w_c], None)?;
        let pre = tape.linear(x, bind[p.w_delta], Some(bind[p.b_delta]))?;
        let delta = tape.softplus(pre);
        let skip = (!p.zero_skip).then(|| bind[p.d_skip]);
        tape.selective_scan(x, delta, bind[p.a_log], bm, cm, skip)
    }
}

/// Evaluates [`S6`] on a single sequence without recording gradients.
pub fn s6_forward<S: Scalar>(x: &Sequence<S>, store: &ParamStore<S>, params: &SsmParams) -> Result<Sequence<S>> {
    let mut tape = Tape::new();
    let bind = store.bind_constants(&mut tape);
    let xv = tape.constant(x.to_tensor());
    let y = S6 { params }.forward(&mut tape, &bind, xv)?;
    Ok(Sequence::from_tensor(tape.value(y), 0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zoh_closed_form() {
        let (a_bar, b_bar) = zoh(-1.0f64, 1.0, 2f64.ln());
        assert!((a_bar - 0.5).abs() < 1e-15);
        assert!((b_bar - 0.5).abs() < 1e-15);
        // A -> 0: Ā -> 1, B̄ -> ΔB
        let (a_bar, b_bar) = zoh(-1e-9f64, 3.0, 0.5);
        assert!((a_bar - 1.0).abs() < 1e-9);
        assert_eq!(b_bar, 1.5);
        // Δ -> 0+: Ā -> 1, B̄ -> 0
        let (a_bar, b_bar) = zoh(-2.0f64, 3.0, 1e-12);
        assert!((a_bar - 1.0).abs() < 1e-11);
        assert!(b_bar.abs() < 1e-11);
        let (ab, bb) = discretize_zoh(&[-1.0f64, -2.0], &[1.0, 1.0], &[2f64.ln(), 2f64.ln()]).unwrap();
        assert!((ab[1] - 0.25).abs() < 1e-15 && (bb[1] - 0.375).abs() < 1e-15);
        assert!(discretize_zoh(&[1.0f64], &[], &[1.0]).is_err());
    }

    #[test]
    fn zoh_continuous_across_limit() {
        // both sides of the switch agree to first order
        let a = -1.0f64;
        let below = zoh(a, 1.0, 0.99 * ZOH_LIMIT).1 / (0.99 * ZOH_LIMIT);
        let above = zoh(a, 1.0, 1.01 * ZOH_LIMIT).1 / (1.01 * ZOH_LIMIT);
        assert!((below - above).abs() < 1e-4);
    }

    #[test]
    fn dphi_da_series_matches_closed_form() {
        for &(a, dt) in &[(-1.0f64, 5e-3), (-3.0, 3.0e-3), (-0.5, 1.9e-2)] {
            let z: f64 = a * dt;
            let closed = (z * z.exp() - z.exp_m1()) / (a * a);
            let series = dphi_da(a, dt, z.exp());
            assert!((closed - series).abs() <= 1e-9 * closed.abs(), "{closed} vs {series}");
        }
    }

    #[test]
    fn lti_examples() {
        let p = LtiParams::scalar(0.5f64, 1.0, 1.0, 0.0);
        let x = Sequence::scalar(&[1.0, 0.0, 0.0]).unwrap();
        assert_eq!(lti_scan(&x, &p).unwrap().values(), &[1.0, 0.5, 0.25]);
        let zero = Sequence::zeros(5, 1);
        assert!(lti_scan(&zero, &p).unwrap().values().iter().all(|&v| v == 0.0));
        let skip = LtiParams::scalar(0.5f64, 1.0, 0.0, 1.0);
        let r = Sequence::scalar(&[0.3, -1.0, 2.0]).unwrap();
        assert_eq!(lti_scan(&r, &skip).unwrap(), r);
    }

    #[test]
    fn kernel_examples() {
        let p = LtiParams::scalar(0.5f64, 1.0, 1.0, 0.0);
        assert_eq!(lti_conv_kernel(&p, 3).unwrap().values(), &[1.0, 0.5, 0.25]);
        let nil = LtiParams::scalar(0.0f64, 2.0, 3.0, 0.0);
        assert_eq!(lti_conv_kernel(&nil, 4).unwrap().values(), &[6.0, 0.0, 0.0, 0.0]);
        let off = LtiParams::scalar(0.7f64, 2.0, 0.0, 0.0);
        assert!(lti_conv_kernel(&off, 4).unwrap().values().iter().all(|&v| v == 0.0));

        let k = lti_conv_kernel(&p, 3).unwrap();
        let impulse = Sequence::scalar(&[1.0, 0.0, 0.0]).unwrap();
        assert_eq!(lti_scan_via_kernel(&impulse, &k).unwrap(), k);
        let zk = Sequence::zeros(3, 1);
        let r = Sequence::scalar(&[0.3, -1.0, 2.0]).unwrap();
        assert!(lti_scan_via_kernel(&r, &zk).unwrap().values().iter().all(|&v| v == 0.0));
        assert!(lti_scan_via_kernel(&r, &Sequence::zeros(2, 1)).is_err());
    }

    #[test]
    fn causality_of_selective_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let p = SsmParams::new(&mut store, "s6", 3, 4, &mut rng);
        let mut x = Sequence::<f64>::zeros(12, 3);
        for k in 0..12 {
            for d in 0..3 {
                x.set(k, d, rng.gen_range(-1.0..1.0));
            }
        }
        let y = s6_forward(&x, &store, &p).unwrap();
        let mut x2 = x.clone();
        for k in 7..12 {
            for d in 0..3 {
                x2.set(k, d, rng.gen_range(-5.0..5.0));
            }
        }
        let y2 = s6_forward(&x2, &store, &p).unwrap();
        for k in 0..7 {
            for d in 0..3 {
                assert_eq!(y.get(k, d), y2.get(k, d));
            }
        }
    }

    #[test]
    fn delta_init_is_log_spaced_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let p = SsmParams::new(&mut store, "s6", 5, 2, &mut rng);
        let dts: Vec<f64> = store.get(p.b_delta).data().iter().map(|&b| b.softplus()).collect();
        assert!((dts[0] - DELTA_MIN).abs() < 1e-12);
        assert!((dts[4] - DELTA_MAX).abs() < 1e-12);
        assert!(dts.windows(2).all(|w| w[1] > w[0]));
        let a = store.get(p.a_log);
        assert_eq!(-a.at(3, 1, 0, 0).exp(), -2.0);
    }
}
