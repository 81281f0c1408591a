//! Supervised NMF layers.
//!
//! The trainable object is an unconstrained matrix `U [S×I]`; the layer
//! weight is derived on every forward call as `W_{si} = |U_{si}| / Σ_k |U_{ki}|`,
//! so optimizer steps on `U` can never leave the constraint set. The layer
//! output is the latent vector `h` reached after `N` iterations of
//!
//! ```text
//! h_i ← h_i + ε·h_i·(Σ_s x_s W_{si} / R_s − 1),   R_s = Σ_j W_{sj} h_j
//! ```
//!
//! started from `h_i = 1/I`, with each input patch normalized to sum one.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classic::EPS_DIV;
use crate::error::{Error, Result};
use crate::tensor::{unfold, ConvSpec, Real, Tensor};

pub const DEFAULT_ITERS: usize = 75;
pub const DEFAULT_EPSILON: f64 = 1.0;

/// Rows handed to one rayon task.
const ROW_CHUNK: usize = 32;

/// Which latent state the one-step backward rule is evaluated at.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Linearization {
    /// The layer output `h(N)`.
    #[default]
    FinalState,
    /// The state `h(N−1)` entering the last iteration; the one-step rule is
    /// then the exact derivative of that iteration.
    LastStep,
}

/// Trainable parameters of one NMF weight matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct NmfParams<T = f64> {
    /// `[S×I]`, unconstrained.
    pub u: Tensor<T>,
}

impl<T: Real> NmfParams<T> {
    pub fn new(u: Tensor<T>) -> Result<Self> {
        if u.rank() != 2 {
            return Err(Error::shape(format!("U must be [S×I], got {:?}", u.shape())));
        }
        Ok(NmfParams { u })
    }

    /// `|N(0,1)| / S` entries.
    pub fn init(s: usize, i: usize, rng: &mut impl Rng) -> Self {
        let scale = 1.0 / s as f64;
        let u = Tensor::from_fn(vec![s, i], |_| {
            let z: f64 = rng.sample(StandardNormal);
            T::lit(z.abs() * scale)
        });
        NmfParams { u }
    }

    pub fn inputs(&self) -> usize {
        self.u.dim(0)
    }

    pub fn latents(&self) -> usize {
        self.u.dim(1)
    }

    pub fn derive_w(&self) -> Result<Tensor<T>> {
        derive_w(&self.u)
    }
}

/// `W = |U|` normalized so every column sums to one.
pub fn derive_w<T: Real>(u: &Tensor<T>) -> Result<Tensor<T>> {
    if u.rank() != 2 {
        return Err(Error::shape(format!("U must be [S×I], got {:?}", u.shape())));
    }
    let i = u.dim(1);
    let mut sums = vec![T::zero(); i];
    for row in u.data().chunks(i) {
        for (acc, &v) in sums.iter_mut().zip(row) {
            *acc += v.abs();
        }
    }
    if let Some(index) = sums.iter().position(|&v| v == T::zero() || !v.is_finite()) {
        return Err(Error::DeadLatent { index });
    }
    let data = u
        .data()
        .iter()
        .enumerate()
        .map(|(k, &v)| v.abs() / sums[k % i])
        .collect();
    Ok(Tensor::from_parts_unchecked(u.shape().to_vec(), data))
}

/// Scales a non-negative patch to unit sum in place and returns its original
/// mass. An all-zero patch becomes the uniform vector.
fn normalize_patch<T: Real>(patch: &mut [T]) -> Result<T> {
    let mut mass = T::zero();
    for &v in patch.iter() {
        if v < T::zero() {
            return Err(Error::invalid(format!(
                "NMF input must be non-negative, found {v}"
            )));
        }
        mass += v;
    }
    if mass > T::zero() {
        for v in patch.iter_mut() {
            *v /= mass;
        }
    } else {
        let u = T::one() / T::from_usize(patch.len()).unwrap();
        patch.iter_mut().for_each(|v| *v = u);
    }
    Ok(mass)
}

/// Normalizes every patch (last axis) to sum one.
pub fn normalize_input<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = *x.shape().last().unwrap();
    let mut out = x.clone();
    for patch in out.data_mut().chunks_mut(s) {
        normalize_patch(patch)?;
    }
    Ok(out)
}

/// Row kernel for the h-dynamics with a fixed weight.
struct Dynamics<'a, T> {
    w: &'a [T],
    /// `Wᵀ`, so both reconstruction and feedback run as contiguous axpys.
    wt: Vec<T>,
    s: usize,
    i: usize,
    epsilon: T,
}

impl<'a, T: Real> Dynamics<'a, T> {
    fn new(w: &'a Tensor<T>, epsilon: T) -> Self {
        let (s, i) = (w.dim(0), w.dim(1));
        let wd = w.data();
        let mut wt = vec![T::zero(); s * i];
        for si in 0..s {
            for ii in 0..i {
                wt[ii * s + si] = wd[si * i + ii];
            }
        }
        Dynamics {
            w: wd,
            wt,
            s,
            i,
            epsilon,
        }
    }

    /// `R_s = max(Σ_j W_{sj} h_j, EPS_DIV)`.
    fn reconstruct(&self, h: &[T], r: &mut [T]) {
        r.fill(T::zero());
        for (ii, &hv) in h.iter().enumerate() {
            let wrow = &self.wt[ii * self.s..(ii + 1) * self.s];
            for (rv, &wv) in r.iter_mut().zip(wrow) {
                *rv += hv * wv;
            }
        }
        let floor = T::lit(EPS_DIV);
        r.iter_mut().for_each(|v| *v = v.max(floor));
    }

    /// One iteration: `out = h + ε h (Wᵀ(x/R) − 1)`. `r` and `a` are scratch.
    fn step(&self, x: &[T], h: &[T], r: &mut [T], a: &mut [T], out: &mut [T]) {
        self.reconstruct(h, r);
        a.fill(T::zero());
        for si in 0..self.s {
            let q = x[si] / r[si];
            if q == T::zero() {
                continue;
            }
            let wrow = &self.w[si * self.i..(si + 1) * self.i];
            for (av, &wv) in a.iter_mut().zip(wrow) {
                *av += q * wv;
            }
        }
        for ii in 0..self.i {
            out[ii] = h[ii] + self.epsilon * h[ii] * (a[ii] - T::one());
        }
    }
}

/// One h-dynamics iteration for a batch of patterns: `x [P×S]`, `h [P×I]`.
///
/// With `ε = 1` this is exactly the classical multiplicative h-update.
pub fn h_step<T: Real>(x: &Tensor<T>, w: &Tensor<T>, h: &Tensor<T>, epsilon: T) -> Result<Tensor<T>> {
    if x.rank() != 2 || w.rank() != 2 || h.rank() != 2 {
        return Err(Error::shape("h_step expects x [P×S], W [S×I], h [P×I]"));
    }
    let (p, s, i) = (x.dim(0), w.dim(0), w.dim(1));
    if x.dim(1) != s || h.dim(0) != p || h.dim(1) != i {
        return Err(Error::shape(format!(
            "h_step: x {:?}, W {:?}, h {:?}",
            x.shape(),
            w.shape(),
            h.shape()
        )));
    }
    let dynamics = Dynamics::new(w, epsilon);
    let mut out = vec![T::zero(); p * i];
    let mut r = vec![T::zero(); s];
    let mut a = vec![T::zero(); i];
    for row in 0..p {
        dynamics.step(
            x.row(row),
            h.row(row),
            &mut r,
            &mut a,
            &mut out[row * i..(row + 1) * i],
        );
    }
    let out = Tensor::from_parts_unchecked(vec![p, i], out);
    out.check_finite("h_step")?;
    Ok(out)
}

/// Everything the one-step backward needs from a forward pass. Only the final
/// iteration's quantities are kept, whatever the number of iterations.
#[derive(Clone, Debug)]
pub struct NmfForwardState<T = f64> {
    /// Layer output `h(N)`, shaped like the input with the last axis `I`.
    pub h: Tensor<T>,
    /// `h(N−1)`, kept only under [`Linearization::LastStep`].
    pub h_prev: Option<Tensor<T>>,
    /// Floored `R_s` at the linearization state, `[P×S]`.
    pub r: Tensor<T>,
    /// Unit-sum input patches, `[P×S]`.
    pub x_norm: Tensor<T>,
    /// Pre-normalization patch sums, one per row.
    pub mass: Vec<T>,
    /// The weight the forward pass used.
    pub w: Tensor<T>,
    pub n_iters: usize,
    pub epsilon: T,
    pub linearization: Linearization,
}

impl<T: Real> NmfForwardState<T> {
    /// Number of patterns (rows).
    pub fn rows(&self) -> usize {
        self.x_norm.dim(0)
    }

    /// The latent state the backward rule linearizes around, `[P×I]`.
    pub fn linearization_h(&self) -> &[T] {
        match &self.h_prev {
            Some(prev) => prev.data(),
            None => self.h.data(),
        }
    }

    /// Bytes retained for the backward pass.
    pub fn retained_bytes(&self) -> usize {
        self.h.bytes()
            + self.h_prev.as_ref().map_or(0, Tensor::bytes)
            + self.r.bytes()
            + self.x_norm.bytes()
            + self.mass.len() * std::mem::size_of::<T>()
    }
}

/// Runs the h-dynamics for every patch in `x` (any leading shape, last axis
/// `S`) with the weight derived from `params`.
pub fn nmf_forward<T: Real>(
    x: &Tensor<T>,
    params: &NmfParams<T>,
    n_iters: usize,
    epsilon: T,
    linearization: Linearization,
) -> Result<NmfForwardState<T>> {
    let w = params.derive_w()?;
    nmf_forward_with_w(x, w, n_iters, epsilon, linearization)
}

pub(crate) fn nmf_forward_with_w<T: Real>(
    x: &Tensor<T>,
    w: Tensor<T>,
    n_iters: usize,
    epsilon: T,
    linearization: Linearization,
) -> Result<NmfForwardState<T>> {
    if n_iters == 0 {
        return Err(Error::invalid("NMF forward needs at least one iteration"));
    }
    let (s, i) = (w.dim(0), w.dim(1));
    let last = *x.shape().last().unwrap();
    if last != s {
        return Err(Error::shape(format!(
            "input patches of length {last} for a weight with {s} inputs"
        )));
    }
    let p = x.len() / s;
    let mut x_norm = x.data().to_vec();
    let mut mass = Vec::with_capacity(p);
    for patch in x_norm.chunks_mut(s) {
        mass.push(normalize_patch(patch)?);
    }

    let keep_prev = linearization == Linearization::LastStep;
    let dynamics = Dynamics::new(&w, epsilon);
    let mut h = vec![T::zero(); p * i];
    let mut h_prev = vec![T::zero(); if keep_prev { p * i } else { 0 }];
    let mut r = vec![T::zero(); p * s];
    let init = T::one() / T::from_usize(i).unwrap();

    let run_rows = |x_rows: &[T], h_rows: &mut [T], prev_rows: &mut [T], r_rows: &mut [T]| {
        let mut cur = vec![init; i];
        let mut next = vec![T::zero(); i];
        let mut a = vec![T::zero(); i];
        for (row, (xr, hr)) in x_rows.chunks(s).zip(h_rows.chunks_mut(i)).enumerate() {
            let rr = &mut r_rows[row * s..(row + 1) * s];
            cur.fill(init);
            for t in 0..n_iters {
                if keep_prev && t + 1 == n_iters {
                    prev_rows[row * i..(row + 1) * i].copy_from_slice(&cur);
                }
                dynamics.step(xr, &cur, rr, &mut a, &mut next);
                std::mem::swap(&mut cur, &mut next);
            }
            hr.copy_from_slice(&cur);
            let lin: &[T] = if keep_prev {
                &prev_rows[row * i..(row + 1) * i]
            } else {
                &cur
            };
            dynamics.reconstruct(lin, rr);
        }
    };

    let chunk = ROW_CHUNK;
    if keep_prev {
        x_norm
            .par_chunks(chunk * s)
            .zip(h.par_chunks_mut(chunk * i))
            .zip(h_prev.par_chunks_mut(chunk * i))
            .zip(r.par_chunks_mut(chunk * s))
            .for_each(|(((xc, hc), pc), rc)| run_rows(xc, hc, pc, rc));
    } else {
        x_norm
            .par_chunks(chunk * s)
            .zip(h.par_chunks_mut(chunk * i))
            .zip(r.par_chunks_mut(chunk * s))
            .for_each(|((xc, hc), rc)| run_rows(xc, hc, &mut [], rc));
    }

    let mut out_shape = x.shape().to_vec();
    *out_shape.last_mut().unwrap() = i;
    let h = Tensor::from_parts_unchecked(out_shape, h);
    h.check_finite("NMF forward")?;
    Ok(NmfForwardState {
        h,
        h_prev: keep_prev.then(|| Tensor::from_parts_unchecked(vec![p, i], h_prev)),
        r: Tensor::from_parts_unchecked(vec![p, s], r),
        x_norm: Tensor::from_parts_unchecked(vec![p, s], x_norm),
        mass,
        w,
        n_iters,
        epsilon,
        linearization,
    })
}

/// Forward state of a convolutional NMF layer: one dense state per group,
/// each over `B·L` patch rows.
#[derive(Clone, Debug)]
pub struct CnmfState<T = f64> {
    pub groups: Vec<NmfForwardState<T>>,
    pub spec: ConvSpec,
    pub batch: usize,
    pub input_hw: (usize, usize),
    pub output_hw: (usize, usize),
}

impl<T: Real> CnmfState<T> {
    pub fn retained_bytes(&self) -> usize {
        self.groups.iter().map(NmfForwardState::retained_bytes).sum()
    }
}

/// Group `g`'s slice of unfolded patches, `[B, L, S_g]`.
pub(crate) fn group_patches<T: Real>(cols: &Tensor<T>, spec: &ConvSpec, g: usize) -> Tensor<T> {
    if spec.groups == 1 {
        return cols.clone();
    }
    let (k, gs) = (spec.patch_len(), spec.group_patch_len());
    let mut data = Vec::with_capacity(cols.len() / spec.groups);
    for row in cols.data().chunks(k) {
        data.extend_from_slice(&row[g * gs..(g + 1) * gs]);
    }
    Tensor::from_parts_unchecked(vec![cols.dim(0), cols.dim(1), gs], data)
}

/// Writes per-position latents `h [B·L×I_g]` into channels of `out [B, outC, L]`.
pub(crate) fn scatter_group_output<T: Real>(
    out: &mut [T],
    h: &[T],
    spec: &ConvSpec,
    g: usize,
    b: usize,
    l: usize,
) {
    let (oc, gi) = (spec.out_channels, spec.group_out());
    for bi in 0..b {
        for li in 0..l {
            let hrow = &h[(bi * l + li) * gi..(bi * l + li + 1) * gi];
            for (ii, &v) in hrow.iter().enumerate() {
                out[(bi * oc + g * gi + ii) * l + li] = v;
            }
        }
    }
}

/// Inverse of [`scatter_group_output`] for an error map.
pub(crate) fn gather_group_error<T: Real>(grad: &[T], spec: &ConvSpec, g: usize, b: usize, l: usize) -> Vec<T> {
    let (oc, gi) = (spec.out_channels, spec.group_out());
    let mut phi = vec![T::zero(); b * l * gi];
    for bi in 0..b {
        for ii in 0..gi {
            let src = &grad[(bi * oc + g * gi + ii) * l..(bi * oc + g * gi + ii + 1) * l];
            for (li, &v) in src.iter().enumerate() {
                phi[(bi * l + li) * gi + ii] = v;
            }
        }
    }
    phi
}

/// Convolutional NMF: unfold into receptive-field patches, split channels
/// into groups, and run the shared-weight NMF dynamics at every position.
/// `params[g]` is `[(C/groups)·kh·kw × outC/groups]`.
pub fn cnmf_forward<T: Real>(
    x: &Tensor<T>,
    params: &[NmfParams<T>],
    spec: &ConvSpec,
    n_iters: usize,
    epsilon: T,
    linearization: Linearization,
) -> Result<(Tensor<T>, CnmfState<T>)> {
    spec.validate()?;
    if params.len() != spec.groups {
        return Err(Error::shape(format!(
            "{} weight groups for a {}-group layer",
            params.len(),
            spec.groups
        )));
    }
    let (gs, gi) = (spec.group_patch_len(), spec.group_out());
    for (g, p) in params.iter().enumerate() {
        if p.u.shape() != [gs, gi] {
            return Err(Error::shape(format!(
                "group {g} weight is {:?}, expected [{gs}, {gi}]",
                p.u.shape()
            )));
        }
    }
    if x.rank() != 4 {
        return Err(Error::shape(format!("CNMF input must be [B,C,H,W], got {:?}", x.shape())));
    }
    let (b, h, w) = (x.dim(0), x.dim(2), x.dim(3));
    let (oh, ow) = spec.output_hw(h, w)?;
    let l = oh * ow;
    let cols = unfold(x, spec)?;
    let oc = spec.out_channels;
    let mut out = vec![T::zero(); b * oc * l];
    let mut states = Vec::with_capacity(spec.groups);
    for (g, p) in params.iter().enumerate() {
        let patches = group_patches(&cols, spec, g);
        let state = nmf_forward(&patches, p, n_iters, epsilon, linearization)?;
        scatter_group_output(&mut out, state.h.data(), spec, g, b, l);
        states.push(state);
    }
    Ok((
        Tensor::from_parts_unchecked(vec![b, oc, oh, ow], out),
        CnmfState {
            groups: states,
            spec: *spec,
            batch: b,
            input_hw: (h, w),
            output_hw: (oh, ow),
        },
    ))
}
