//! Backward passes for NMF layers.
//!
//! The approximate pass differentiates a single h-dynamics iteration at one
//! retained latent state. For an error `Φ` arriving at the layer output it
//! produces
//!
//! ```text
//! Φ_s   = Σ_i Φ_i W_{si} h_i / R_s                          (input error)
//! δω_si = h_i x_s / R_s² · (Φ_i R_s − Σ_j W_{sj} h_j Φ_j)    (weight gradient)
//! ```
//!
//! using nothing but that state, the input patch and `W`. The unrolled pass
//! is exact reverse-mode differentiation through all `N` iterations and keeps
//! every intermediate state; it is the reference for accuracy, time and memory.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::classic::EPS_DIV;
use crate::error::{Error, Result};
use crate::layer::{
    gather_group_error, group_patches, scatter_group_output, CnmfState, NmfForwardState,
    NmfParams,
};
use crate::tensor::{fold, unfold, ConvSpec, Real, Tensor};

/// Default cap on the unrolled tape, 1 GiB.
pub const UNROLLED_BUDGET_BYTES: usize = 1 << 30;

/// How the approximate pass turns its one-step quantities into gradients.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradMode {
    /// `grad_U = δω`, input error with respect to the normalized patch, no `ε`.
    #[default]
    Direct,
    /// Exact one-step chain rule: scales by `ε`, differentiates the patch
    /// normalization and `W = |U| / Σ|U|`.
    Chain,
}

impl FromStr for GradMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(GradMode::Direct),
            "chain" => Ok(GradMode::Chain),
            other => Err(Error::invalid(format!(
                "unknown gradient mode `{other}` (expected direct or chain)"
            ))),
        }
    }
}

impl std::fmt::Display for GradMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GradMode::Direct => "direct",
            GradMode::Chain => "chain",
        })
    }
}

/// Output of a layer's backward pass.
#[derive(Clone, Debug)]
pub struct BackpropSignal<T = f64> {
    /// Error arriving at the layer output, `[.., I]`.
    pub phi_out: Tensor<T>,
    /// Error passed to the layer input, `[.., S]`.
    pub phi_in: Tensor<T>,
    /// `[S×I]`, summed over all rows.
    pub grad_w: Tensor<T>,
    /// `[S×I]`, fed to the optimizer.
    pub grad_u: Tensor<T>,
}

/// Explicit accounting of live backward-pass buffers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MemoryMeter {
    current: usize,
    peak: usize,
}

impl MemoryMeter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn alloc(&mut self, bytes: usize) {
        self.current += bytes;
        self.peak = self.peak.max(self.current);
    }

    pub fn release(&mut self, bytes: usize) {
        self.current = self.current.saturating_sub(bytes);
    }

    pub fn alloc_elems<T>(&mut self, n: usize) {
        self.alloc(n * std::mem::size_of::<T>());
    }

    pub fn release_elems<T>(&mut self, n: usize) {
        self.release(n * std::mem::size_of::<T>());
    }

    pub fn current(&self) -> usize {
        self.current
    }

    pub fn peak(&self) -> usize {
        self.peak
    }
}

fn check_phi<T: Real>(phi_out: &Tensor<T>, state: &NmfForwardState<T>) -> Result<()> {
    if phi_out.shape() != state.h.shape() {
        return Err(Error::shape(format!(
            "error {:?} does not match the layer output {:?}",
            phi_out.shape(),
            state.h.shape()
        )));
    }
    Ok(())
}

fn input_shape<T: Real>(state: &NmfForwardState<T>) -> Vec<usize> {
    let mut shape = state.h.shape().to_vec();
    *shape.last_mut().unwrap() = state.w.dim(0);
    shape
}

/// `Φ_s = Σ_i Φ_i W_{si} h_i / R_s` at the retained state, per row.
/// The result is the error with respect to the normalized input patch.
pub fn backprop_input<T: Real>(phi_out: &Tensor<T>, state: &NmfForwardState<T>) -> Result<Tensor<T>> {
    check_phi(phi_out, state)?;
    let (s, i) = (state.w.dim(0), state.w.dim(1));
    let wd = state.w.data();
    let h = state.linearization_h();
    let mut out = vec![T::zero(); state.rows() * s];
    for row in 0..state.rows() {
        let phi = &phi_out.data()[row * i..(row + 1) * i];
        let hr = &h[row * i..(row + 1) * i];
        let r = state.r.row(row);
        let o = &mut out[row * s..(row + 1) * s];
        for si in 0..s {
            let wrow = &wd[si * i..(si + 1) * i];
            let mut acc = T::zero();
            for ((&wv, &hv), &pv) in wrow.iter().zip(hr).zip(phi) {
                acc += pv * wv * hv;
            }
            o[si] = acc / r[si];
        }
    }
    Ok(Tensor::from_parts_unchecked(input_shape(state), out))
}

/// `δω_si = Σ_rows h_i x_s / R_s² · (Φ_i R_s − Σ_j W_{sj} h_j Φ_j)`.
///
/// Treated as a loss gradient: the optimizer descends along it.
pub fn weight_grad<T: Real>(phi_out: &Tensor<T>, state: &NmfForwardState<T>) -> Result<Tensor<T>> {
    check_phi(phi_out, state)?;
    let (s, i) = (state.w.dim(0), state.w.dim(1));
    let wd = state.w.data();
    let h = state.linearization_h();
    let mut grad = vec![T::zero(); s * i];
    let mut c = vec![T::zero(); i];
    for row in 0..state.rows() {
        let phi = &phi_out.data()[row * i..(row + 1) * i];
        let hr = &h[row * i..(row + 1) * i];
        let x = state.x_norm.row(row);
        let r = state.r.row(row);
        for ((cv, &pv), &hv) in c.iter_mut().zip(phi).zip(hr) {
            *cv = pv * hv;
        }
        for si in 0..s {
            if x[si] == T::zero() {
                continue;
            }
            let wrow = &wd[si * i..(si + 1) * i];
            let mut m = T::zero();
            for (&wv, &cv) in wrow.iter().zip(&c) {
                m += wv * cv;
            }
            let g = &mut grad[si * i..(si + 1) * i];
            let k = x[si] / (r[si] * r[si]);
            for ii in 0..i {
                g[ii] += k * hr[ii] * (phi[ii] * r[si] - m);
            }
        }
    }
    Ok(Tensor::from_parts_unchecked(vec![s, i], grad))
}

/// Maps a gradient with respect to `W` onto `U`.
///
/// `Direct` passes it through unchanged. `Chain` applies the Jacobian of
/// `W_{si} = |U_{si}| / Σ_k |U_{ki}|`:
/// `grad_U_si = sign(U_si) / Σ_k|U_ki| · (g_si − Σ_k W_ki g_ki)`.
pub fn chain_to_u<T: Real>(grad_w: &Tensor<T>, u: &Tensor<T>, mode: GradMode) -> Result<Tensor<T>> {
    if grad_w.shape() != u.shape() || u.rank() != 2 {
        return Err(Error::shape(format!(
            "gradient {:?} does not match U {:?}",
            grad_w.shape(),
            u.shape()
        )));
    }
    match mode {
        GradMode::Direct => Ok(grad_w.clone()),
        GradMode::Chain => {
            let i = u.dim(1);
            let w = crate::layer::derive_w(u)?;
            let mut col_abs = vec![T::zero(); i];
            let mut col_dot = vec![T::zero(); i];
            for ((urow, wrow), grow) in u
                .data()
                .chunks(i)
                .zip(w.data().chunks(i))
                .zip(grad_w.data().chunks(i))
            {
                for ii in 0..i {
                    col_abs[ii] += urow[ii].abs();
                    col_dot[ii] += wrow[ii] * grow[ii];
                }
            }
            let data = u
                .data()
                .iter()
                .zip(grad_w.data())
                .enumerate()
                .map(|(k, (&uv, &gv))| {
                    let ii = k % i;
                    let sign = if uv > T::zero() {
                        T::one()
                    } else if uv < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    };
                    sign / col_abs[ii] * (gv - col_dot[ii])
                })
                .collect();
            Ok(Tensor::from_parts_unchecked(u.shape().to_vec(), data))
        }
    }
}

/// Chains an error with respect to unit-sum patches back to the raw patches:
/// `φ_k = (φ̂_k − Σ_s φ̂_s x̂_s) / Σ x`. Zero-mass patches map to the constant
/// uniform vector and receive no gradient.
pub fn normalization_backward<T: Real>(phi_norm: &Tensor<T>, state: &NmfForwardState<T>) -> Result<Tensor<T>> {
    let s = state.w.dim(0);
    if phi_norm.len() != state.x_norm.len() {
        return Err(Error::shape(format!(
            "error {:?} does not match the cached patches {:?}",
            phi_norm.shape(),
            state.x_norm.shape()
        )));
    }
    let mut out = phi_norm.data().to_vec();
    for (row, o) in out.chunks_mut(s).enumerate() {
        normalization_backward_row(o, state.x_norm.row(row), state.mass[row]);
    }
    Ok(Tensor::from_parts_unchecked(phi_norm.shape().to_vec(), out))
}

fn normalization_backward_row<T: Real>(phi: &mut [T], x_norm: &[T], mass: T) {
    if mass <= T::zero() {
        phi.fill(T::zero());
        return;
    }
    let mut proj = T::zero();
    for (&p, &x) in phi.iter().zip(x_norm) {
        proj += p * x;
    }
    for p in phi.iter_mut() {
        *p = (*p - proj) / mass;
    }
}

/// The approximate one-step backward pass of a dense NMF layer.
pub fn approx_backward<T: Real>(
    phi_out: &Tensor<T>,
    state: &NmfForwardState<T>,
    params: &NmfParams<T>,
    mode: GradMode,
) -> Result<BackpropSignal<T>> {
    approx_backward_metered(phi_out, state, params, mode, &mut MemoryMeter::new())
}

/// [`approx_backward`] with buffer accounting. The retained forward state is
/// charged to the meter for the duration of the call.
pub fn approx_backward_metered<T: Real>(
    phi_out: &Tensor<T>,
    state: &NmfForwardState<T>,
    params: &NmfParams<T>,
    mode: GradMode,
    meter: &mut MemoryMeter,
) -> Result<BackpropSignal<T>> {
    check_phi(phi_out, state)?;
    if params.u.shape() != state.w.shape() {
        return Err(Error::shape(format!(
            "U {:?} does not match the forward weight {:?}",
            params.u.shape(),
            state.w.shape()
        )));
    }
    let (s, i) = (state.w.dim(0), state.w.dim(1));
    let p = state.rows();
    let retained = state.retained_bytes();
    meter.alloc(retained);

    let wd = state.w.data();
    let h = state.linearization_h();
    let scale = match mode {
        GradMode::Direct => T::one(),
        GradMode::Chain => state.epsilon,
    };
    meter.alloc_elems::<T>(p * s + s * i + i);
    let mut phi_in = vec![T::zero(); p * s];
    let mut grad_w = vec![T::zero(); s * i];
    let mut c = vec![T::zero(); i];
    for row in 0..p {
        let phi = &phi_out.data()[row * i..(row + 1) * i];
        let hr = &h[row * i..(row + 1) * i];
        let x = state.x_norm.row(row);
        let r = state.r.row(row);
        for ((cv, &pv), &hv) in c.iter_mut().zip(phi).zip(hr) {
            *cv = pv * hv;
        }
        let pin = &mut phi_in[row * s..(row + 1) * s];
        for si in 0..s {
            let wrow = &wd[si * i..(si + 1) * i];
            let mut m = T::zero();
            for (&wv, &cv) in wrow.iter().zip(&c) {
                m += wv * cv;
            }
            pin[si] = scale * m / r[si];
            if x[si] == T::zero() {
                continue;
            }
            let a = scale * x[si] / r[si];
            let b = a * m / r[si];
            let g = &mut grad_w[si * i..(si + 1) * i];
            for ii in 0..i {
                g[ii] += a * c[ii] - b * hr[ii];
            }
        }
        if mode == GradMode::Chain {
            normalization_backward_row(pin, x, state.mass[row]);
        }
    }
    meter.release_elems::<T>(i);
    let grad_w = Tensor::from_parts_unchecked(vec![s, i], grad_w);
    if mode == GradMode::Chain {
        meter.alloc_elems::<T>(s * i);
    }
    let grad_u = chain_to_u(&grad_w, &params.u, mode)?;
    let phi_in = Tensor::from_parts_unchecked(input_shape(state), phi_in);
    phi_in.check_finite("NMF approximate backward")?;
    grad_u.check_finite("NMF approximate backward")?;
    meter.alloc_elems::<T>(p * i);
    meter.release(meter.current());
    Ok(BackpropSignal {
        phi_out: phi_out.clone(),
        phi_in,
        grad_w,
        grad_u,
    })
}

/// Every intermediate quantity of an `N`-step forward pass, as reverse-mode
/// differentiation needs them.
#[derive(Clone, Debug)]
pub struct UnrolledTape<T = f64> {
    pub x_norm: Tensor<T>,
    pub mass: Vec<T>,
    pub w: Tensor<T>,
    /// `h(0..=N)`, laid out `[N+1][P][I]`.
    pub hs: Vec<T>,
    /// Floored `R(t)` for `t < N`, `[N][P][S]`.
    pub rs: Vec<T>,
    /// `x / R(t)`, `[N][P][S]`.
    pub qs: Vec<T>,
    /// `Wᵀ(x/R(t))`, `[N][P][I]`.
    pub feedback: Vec<T>,
    pub n_iters: usize,
    pub epsilon: T,
    out_shape: Vec<usize>,
}

impl<T: Real> UnrolledTape<T> {
    pub fn bytes(&self) -> usize {
        (self.x_norm.len()
            + self.mass.len()
            + self.hs.len()
            + self.rs.len()
            + self.qs.len()
            + self.feedback.len())
            * std::mem::size_of::<T>()
    }

    pub fn rows(&self) -> usize {
        self.x_norm.dim(0)
    }

    /// The final state `h(N)`.
    pub fn output(&self) -> Tensor<T> {
        let (p, i) = (self.rows(), self.w.dim(1));
        let start = self.n_iters * p * i;
        Tensor::from_parts_unchecked(self.out_shape.clone(), self.hs[start..start + p * i].to_vec())
    }

    /// Bytes a tape for these sizes would need.
    pub fn required_bytes(rows: usize, s: usize, i: usize, n_iters: usize) -> usize {
        (rows * s + rows + (n_iters + 1) * rows * i + n_iters * rows * (2 * s + i))
            * std::mem::size_of::<T>()
    }
}

/// Result of [`unrolled_backward`].
#[derive(Clone, Debug)]
pub struct UnrolledGrad<T = f64> {
    /// With respect to the raw (unnormalized) input.
    pub phi_in: Tensor<T>,
    pub grad_w: Tensor<T>,
    pub grad_u: Tensor<T>,
}

/// Forward pass that records the whole trajectory. Fails with
/// [`Error::BudgetExceeded`] if the tape would exceed `budget_bytes`.
pub fn unrolled_forward<T: Real>(
    x: &Tensor<T>,
    params: &NmfParams<T>,
    n_iters: usize,
    epsilon: T,
    budget_bytes: usize,
) -> Result<UnrolledTape<T>> {
    if n_iters == 0 {
        return Err(Error::invalid("NMF forward needs at least one iteration"));
    }
    let w = params.derive_w()?;
    let (s, i) = (w.dim(0), w.dim(1));
    if *x.shape().last().unwrap() != s {
        return Err(Error::shape(format!(
            "input {:?} for a weight with {s} inputs",
            x.shape()
        )));
    }
    let p = x.len() / s;
    let needed = UnrolledTape::<T>::required_bytes(p, s, i, n_iters);
    if needed > budget_bytes {
        return Err(Error::BudgetExceeded {
            needed,
            budget: budget_bytes,
        });
    }
    let normalized = crate::layer::normalize_input(x)?;
    let mass: Vec<T> = x
        .data()
        .chunks(s)
        .map(|c| c.iter().fold(T::zero(), |a, &b| a + b))
        .collect();
    let x_norm = normalized.reshape(vec![p, s])?;
    let wd = w.data();
    let floor = T::lit(EPS_DIV);
    let mut hs = vec![T::zero(); (n_iters + 1) * p * i];
    let mut rs = vec![T::zero(); n_iters * p * s];
    let mut qs = vec![T::zero(); n_iters * p * s];
    let mut fb = vec![T::zero(); n_iters * p * i];
    let init = T::one() / T::from_usize(i).unwrap();
    hs[..p * i].fill(init);
    for row in 0..p {
        let xr = x_norm.row(row);
        for t in 0..n_iters {
            let h_off = (t * p + row) * i;
            let s_off = (t * p + row) * s;
            let (head, tail) = hs.split_at_mut((t + 1) * p * i);
            let h = &head[h_off..h_off + i];
            let r = &mut rs[s_off..s_off + s];
            for si in 0..s {
                let wrow = &wd[si * i..(si + 1) * i];
                let mut acc = T::zero();
                for (&wv, &hv) in wrow.iter().zip(h) {
                    acc += wv * hv;
                }
                r[si] = acc.max(floor);
            }
            let q = &mut qs[s_off..s_off + s];
            let a = &mut fb[h_off..h_off + i];
            for si in 0..s {
                q[si] = xr[si] / r[si];
                let wrow = &wd[si * i..(si + 1) * i];
                for (av, &wv) in a.iter_mut().zip(wrow) {
                    *av += q[si] * wv;
                }
            }
            let next = &mut tail[row * i..(row + 1) * i];
            for ii in 0..i {
                next[ii] = h[ii] + epsilon * h[ii] * (a[ii] - T::one());
            }
        }
    }
    let mut out_shape = x.shape().to_vec();
    *out_shape.last_mut().unwrap() = i;
    Ok(UnrolledTape {
        x_norm,
        mass,
        w,
        hs,
        rs,
        qs,
        feedback: fb,
        n_iters,
        epsilon,
        out_shape,
    })
}

/// Exact reverse sweep over a recorded tape.
pub fn unrolled_tape_backward<T: Real>(
    tape: &UnrolledTape<T>,
    phi_out: &Tensor<T>,
    params: &NmfParams<T>,
    meter: &mut MemoryMeter,
) -> Result<UnrolledGrad<T>> {
    let (s, i) = (tape.w.dim(0), tape.w.dim(1));
    let p = tape.rows();
    if phi_out.len() != p * i {
        return Err(Error::shape(format!(
            "error {:?} does not match {p} rows of {i} latents",
            phi_out.shape()
        )));
    }
    meter.alloc(tape.bytes());
    let wd = tape.w.data();
    let eps = tape.epsilon;
    let floor = T::lit(EPS_DIV);
    meter.alloc_elems::<T>(p * s + s * i + 3 * i + 2 * s);
    let mut phi_in = vec![T::zero(); p * s];
    let mut grad_w = vec![T::zero(); s * i];
    let mut g = vec![T::zero(); i];
    let mut g_next = vec![T::zero(); i];
    let mut e = vec![T::zero(); i];
    let mut v = vec![T::zero(); s];
    let mut u = vec![T::zero(); s];
    for row in 0..p {
        g.copy_from_slice(&phi_out.data()[row * i..(row + 1) * i]);
        let xbar = &mut phi_in[row * s..(row + 1) * s];
        for t in (0..tape.n_iters).rev() {
            let h_off = (t * p + row) * i;
            let s_off = (t * p + row) * s;
            let h = &tape.hs[h_off..h_off + i];
            let a = &tape.feedback[h_off..h_off + i];
            let r = &tape.rs[s_off..s_off + s];
            let q = &tape.qs[s_off..s_off + s];
            for ii in 0..i {
                e[ii] = eps * g[ii] * h[ii];
                g_next[ii] = g[ii] * (T::one() + eps * (a[ii] - T::one()));
            }
            for si in 0..s {
                let wrow = &wd[si * i..(si + 1) * i];
                let mut acc = T::zero();
                for (&wv, &ev) in wrow.iter().zip(&e) {
                    acc += wv * ev;
                }
                v[si] = acc;
                xbar[si] += acc / r[si];
                // a floored denominator no longer depends on h or W
                u[si] = if r[si] > floor { acc * q[si] / r[si] } else { T::zero() };
            }
            for si in 0..s {
                let wrow = &wd[si * i..(si + 1) * i];
                let gw = &mut grad_w[si * i..(si + 1) * i];
                let (qv, uv) = (q[si], u[si]);
                for ii in 0..i {
                    gw[ii] += qv * e[ii] - uv * h[ii];
                    g_next[ii] -= uv * wrow[ii];
                }
            }
            std::mem::swap(&mut g, &mut g_next);
        }
        normalization_backward_row(xbar, tape.x_norm.row(row), tape.mass[row]);
    }
    let grad_w = Tensor::from_parts_unchecked(vec![s, i], grad_w);
    meter.alloc_elems::<T>(s * i);
    let grad_u = chain_to_u(&grad_w, &params.u, GradMode::Chain)?;
    let mut in_shape = tape.out_shape.clone();
    *in_shape.last_mut().unwrap() = s;
    let phi_in = Tensor::from_parts_unchecked(in_shape, phi_in);
    phi_in.check_finite("NMF unrolled backward")?;
    meter.release(meter.current());
    Ok(UnrolledGrad {
        phi_in,
        grad_w,
        grad_u,
    })
}

/// Exact gradient of `⟨Φ, h(N)⟩` with respect to the raw input and `U`,
/// differentiating through every iteration, the patch normalization and the
/// weight constraint.
pub fn unrolled_backward<T: Real>(
    x: &Tensor<T>,
    params: &NmfParams<T>,
    n_iters: usize,
    epsilon: T,
    phi_out: &Tensor<T>,
) -> Result<UnrolledGrad<T>> {
    let tape = unrolled_forward(x, params, n_iters, epsilon, UNROLLED_BUDGET_BYTES)?;
    unrolled_tape_backward(&tape, phi_out, params, &mut MemoryMeter::new())
}

/// Approximate backward of a convolutional NMF layer. Returns the error for
/// the layer input `[B, C, H, W]` and one `U` gradient per group.
pub fn cnmf_backward<T: Real>(
    grad_out: &Tensor<T>,
    state: &CnmfState<T>,
    params: &[NmfParams<T>],
    mode: GradMode,
) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    let spec = &state.spec;
    let b = state.batch;
    let (oh, ow) = state.output_hw;
    let l = oh * ow;
    let oc = spec.out_channels;
    if grad_out.shape() != [b, oc, oh, ow] {
        return Err(Error::shape(format!(
            "CNMF error {:?} does not match output [{b}, {oc}, {oh}, {ow}]",
            grad_out.shape()
        )));
    }
    let gs = spec.group_patch_len();
    let k = spec.patch_len();
    let gd = grad_out.data();
    let mut grad_cols = vec![T::zero(); b * l * k];
    let mut grads_u = Vec::with_capacity(spec.groups);
    for (g, (st, p)) in state.groups.iter().zip(params).enumerate() {
        let phi = gather_group_error(gd, spec, g, b, l);
        let phi = Tensor::from_parts_unchecked(st.h.shape().to_vec(), phi);
        let sig = approx_backward(&phi, st, p, mode)?;
        for (row, src) in sig.phi_in.data().chunks(gs).enumerate() {
            grad_cols[row * k + g * gs..row * k + (g + 1) * gs].copy_from_slice(src);
        }
        grads_u.push(sig.grad_u);
    }
    let grad_cols = Tensor::from_parts_unchecked(vec![b, l, k], grad_cols);
    let grad_x = fold(&grad_cols, spec, state.input_hw)?;
    Ok((grad_x, grads_u))
}

/// Unrolled tapes of a convolutional NMF layer, one per group.
#[derive(Clone, Debug)]
pub struct CnmfTape<T = f64> {
    pub groups: Vec<UnrolledTape<T>>,
    pub spec: ConvSpec,
    pub batch: usize,
    pub input_hw: (usize, usize),
    pub output_hw: (usize, usize),
}

impl<T: Real> CnmfTape<T> {
    pub fn bytes(&self) -> usize {
        self.groups.iter().map(UnrolledTape::bytes).sum()
    }
}

/// Convolutional NMF forward that records full tapes. `budget_bytes` caps
/// the sum over groups.
pub fn cnmf_unrolled_forward<T: Real>(
    x: &Tensor<T>,
    params: &[NmfParams<T>],
    spec: &ConvSpec,
    n_iters: usize,
    epsilon: T,
    budget_bytes: usize,
) -> Result<(Tensor<T>, CnmfTape<T>)> {
    spec.validate()?;
    if params.len() != spec.groups || x.rank() != 4 {
        return Err(Error::shape(format!(
            "{} weight groups and input {:?} for a {}-group layer",
            params.len(),
            x.shape(),
            spec.groups
        )));
    }
    let (b, h, w) = (x.dim(0), x.dim(2), x.dim(3));
    let (oh, ow) = spec.output_hw(h, w)?;
    let l = oh * ow;
    let cols = unfold(x, spec)?;
    let mut out = vec![T::zero(); b * spec.out_channels * l];
    let mut tapes = Vec::with_capacity(spec.groups);
    let mut used = 0;
    for (g, p) in params.iter().enumerate() {
        let patches = group_patches(&cols, spec, g);
        let tape = unrolled_forward(&patches, p, n_iters, epsilon, budget_bytes - used)
            .map_err(|e| match e {
                Error::BudgetExceeded { needed, .. } => Error::BudgetExceeded {
                    needed: used + needed,
                    budget: budget_bytes,
                },
                other => other,
            })?;
        used += tape.bytes();
        scatter_group_output(&mut out, tape.output().data(), spec, g, b, l);
        tapes.push(tape);
    }
    Ok((
        Tensor::from_parts_unchecked(vec![b, spec.out_channels, oh, ow], out),
        CnmfTape {
            groups: tapes,
            spec: *spec,
            batch: b,
            input_hw: (h, w),
            output_hw: (oh, ow),
        },
    ))
}

/// Exact backward of [`cnmf_unrolled_forward`].
pub fn cnmf_unrolled_backward<T: Real>(
    grad_out: &Tensor<T>,
    tape: &CnmfTape<T>,
    params: &[NmfParams<T>],
) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    let spec = &tape.spec;
    let b = tape.batch;
    let (oh, ow) = tape.output_hw;
    let l = oh * ow;
    if grad_out.shape() != [b, spec.out_channels, oh, ow] {
        return Err(Error::shape(format!(
            "CNMF error {:?} does not match output [{b}, {}, {oh}, {ow}]",
            grad_out.shape(),
            spec.out_channels
        )));
    }
    let (gs, gi, k) = (spec.group_patch_len(), spec.group_out(), spec.patch_len());
    let mut grad_cols = vec![T::zero(); b * l * k];
    let mut grads_u = Vec::with_capacity(spec.groups);
    for (g, (t, p)) in tape.groups.iter().zip(params).enumerate() {
        let phi = Tensor::from_parts_unchecked(
            vec![b * l, gi],
            gather_group_error(grad_out.data(), spec, g, b, l),
        );
        let grad = unrolled_tape_backward(t, &phi, p, &mut MemoryMeter::new())?;
        for (row, src) in grad.phi_in.data().chunks(gs).enumerate() {
            grad_cols[row * k + g * gs..row * k + (g + 1) * gs].copy_from_slice(src);
        }
        grads_u.push(grad.grad_u);
    }
    let grad_cols = Tensor::from_parts_unchecked(vec![b, l, k], grad_cols);
    Ok((fold(&grad_cols, spec, tape.input_hw)?, grads_u))
}
