//! Reference Lee–Seung NMF under the KL objective.
//!
//! Layout: `X` is `[M×S]` (one pattern per row), `W` is `[S×I]`, `H` is
//! `[M×I]`, and the reconstruction of pattern μ is `Σ_j W_{sj} h^μ_j`.
//! Used as the unsupervised baseline, as the oracle for the NMF layer's
//! h-dynamics, and behind the `factorize` CLI command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Added to every reconstruction denominator.
pub const EPS_DIV: f64 = 1e-20;

/// Result of [`factorize`].
#[derive(Clone, Debug)]
pub struct Factorization<T = f64> {
    /// `[S×I]`, columns sum to one.
    pub w: Tensor<T>,
    /// `[M×I]`.
    pub h: Tensor<T>,
    /// Divergence at initialization followed by one entry per round.
    pub divergence_history: Vec<T>,
}

fn dims<T: Real>(x: &Tensor<T>, w: &Tensor<T>, h: &Tensor<T>) -> Result<(usize, usize, usize)> {
    if x.rank() != 2 || w.rank() != 2 || h.rank() != 2 {
        return Err(Error::shape("X, W and H must be matrices"));
    }
    let (m, s) = (x.dim(0), x.dim(1));
    let i = w.dim(1);
    if w.dim(0) != s || h.dim(0) != m || h.dim(1) != i {
        return Err(Error::shape(format!(
            "X {:?}, W {:?}, H {:?} are not [M×S], [S×I], [M×I]",
            x.shape(),
            w.shape(),
            h.shape()
        )));
    }
    Ok((m, s, i))
}

fn check_non_negative<T: Real>(t: &Tensor<T>, name: &str) -> Result<()> {
    if t.data().iter().any(|&v| v < T::zero()) {
        return Err(Error::invalid(format!("{name} has negative entries")));
    }
    Ok(())
}

/// `R[μ, s] = Σ_j W_{sj} h^μ_j`, accumulated over j in index order.
pub fn reconstruct<T: Real>(w: &Tensor<T>, h: &Tensor<T>) -> Tensor<T> {
    let (s, i) = (w.dim(0), w.dim(1));
    let m = h.dim(0);
    let mut r = vec![T::zero(); m * s];
    for mu in 0..m {
        let hrow = h.row(mu);
        for si in 0..s {
            let wrow = &w.data()[si * i..(si + 1) * i];
            let mut acc = T::zero();
            for (&wv, &hv) in wrow.iter().zip(hrow) {
                acc += wv * hv;
            }
            r[mu * s + si] = acc;
        }
    }
    Tensor::from_parts_unchecked(vec![m, s], r)
}

/// Reconstruction with the denominator floor applied, failing where data
/// is positive but the reconstruction is exactly zero.
fn denominators<T: Real>(x: &Tensor<T>, w: &Tensor<T>, h: &Tensor<T>) -> Result<Tensor<T>> {
    let mut r = reconstruct(w, h);
    let s = x.dim(1);
    let eps = T::lit(EPS_DIV);
    for (idx, (rv, &xv)) in r.data_mut().iter_mut().zip(x.data()).enumerate() {
        if *rv == T::zero() && xv > T::zero() {
            return Err(Error::UndefinedDivergence {
                row: idx / s,
                col: idx % s,
            });
        }
        *rv += eps;
    }
    Ok(r)
}

/// `D(X‖WH) = Σ_{μ,s} X_{μs} ln(X_{μs} / Σ_j W_{sj} h^μ_j)` with `0·ln 0 = 0`.
///
/// This is the generalized KL divergence without the `−X + WH` mass terms, so
/// it is only a proper divergence when `Σ WH = Σ X`; [`factorize`] keeps the
/// two masses equal after every round.
pub fn kl_divergence<T: Real>(x: &Tensor<T>, w: &Tensor<T>, h: &Tensor<T>) -> Result<T> {
    dims(x, w, h)?;
    let r = reconstruct(w, h);
    let s = x.dim(1);
    let mut total = T::zero();
    for (idx, (&xv, &rv)) in x.data().iter().zip(r.data()).enumerate() {
        if xv == T::zero() {
            continue;
        }
        if rv <= T::zero() {
            return Err(Error::UndefinedDivergence {
                row: idx / s,
                col: idx % s,
            });
        }
        total += xv * (xv / rv).ln();
    }
    Ok(total)
}

/// Lee–Seung objective `Σ X ln(X/WH) − X + WH`.
pub fn generalized_kl_divergence<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    h: &Tensor<T>,
) -> Result<T> {
    let d = kl_divergence(x, w, h)?;
    Ok(d - x.sum() + reconstruct(w, h).sum())
}

/// `h^μ_i ← h^μ_i Σ_s W_{si} X_{μs} / Σ_j W_{sj} h^μ_j`.
pub fn update_h_classic<T: Real>(x: &Tensor<T>, w: &Tensor<T>, h: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, s, i) = dims(x, w, h)?;
    check_non_negative(x, "X")?;
    check_non_negative(w, "W")?;
    check_non_negative(h, "H")?;
    let r = denominators(x, w, h)?;
    let mut out = h.clone();
    for mu in 0..m {
        let xrow = x.row(mu);
        let rrow = r.row(mu);
        let orow = &mut out.data_mut()[mu * i..(mu + 1) * i];
        for (ii, o) in orow.iter_mut().enumerate() {
            let mut acc = T::zero();
            for si in 0..s {
                acc += w.data()[si * i + ii] * xrow[si] / rrow[si];
            }
            *o *= acc;
        }
    }
    out.check_finite("update_h_classic")?;
    Ok(out)
}

/// `W_{si} ← W_{si} Σ_μ h^μ_i X_{μs} / Σ_j W_{sj} h^μ_j` (unnormalized; follow
/// with [`normalize_w`]).
pub fn update_w_classic<T: Real>(x: &Tensor<T>, w: &Tensor<T>, h: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, s, i) = dims(x, w, h)?;
    check_non_negative(x, "X")?;
    check_non_negative(w, "W")?;
    check_non_negative(h, "H")?;
    let r = denominators(x, w, h)?;
    let mut acc = vec![T::zero(); s * i];
    for mu in 0..m {
        let hrow = h.row(mu);
        for si in 0..s {
            let q = x.data()[mu * s + si] / r.data()[mu * s + si];
            if q == T::zero() {
                continue;
            }
            for (a, &hv) in acc[si * i..(si + 1) * i].iter_mut().zip(hrow) {
                *a += hv * q;
            }
        }
    }
    let data = w.data().iter().zip(&acc).map(|(&wv, &a)| wv * a).collect();
    let out = Tensor::from_parts_unchecked(w.shape().to_vec(), data);
    out.check_finite("update_w_classic")?;
    Ok(out)
}

/// Per-column sums of an `[S×I]` matrix.
pub fn column_sums<T: Real>(w: &Tensor<T>) -> Vec<T> {
    let i = w.dim(1);
    let mut sums = vec![T::zero(); i];
    for row in w.data().chunks(i) {
        for (acc, &v) in sums.iter_mut().zip(row) {
            *acc += v;
        }
    }
    sums
}

/// `W_{si} ← W_{si} / Σ_j W_{ji}`.
pub fn normalize_w<T: Real>(w: &Tensor<T>) -> Result<Tensor<T>> {
    if w.rank() != 2 {
        return Err(Error::shape(format!("W must be a matrix, got {:?}", w.shape())));
    }
    let sums = column_sums(w);
    if let Some(index) = sums.iter().position(|&v| v <= T::zero()) {
        return Err(Error::DeadLatent { index });
    }
    let i = w.dim(1);
    let data = w
        .data()
        .iter()
        .enumerate()
        .map(|(k, &v)| v / sums[k % i])
        .collect();
    Ok(Tensor::from_parts_unchecked(w.shape().to_vec(), data))
}

/// Alternating KL-NMF from a seeded strictly positive start.
///
/// Each round applies the h-update, the W-update, and column normalization.
/// H is rescaled alongside the normalization so that the product `WH` equals
/// the one produced by the standard (denominator-carrying) Lee–Seung W-update;
/// with that, every recorded divergence is the Lee–Seung objective and the
/// history is non-increasing.
pub fn factorize<T: Real>(
    x: &Tensor<T>,
    rank: usize,
    iters: usize,
    seed: u64,
) -> Result<Factorization<T>> {
    if rank == 0 {
        return Err(Error::invalid("factorization rank must be at least 1"));
    }
    if x.rank() != 2 {
        return Err(Error::shape(format!("X must be a matrix, got {:?}", x.shape())));
    }
    check_non_negative(x, "X")?;
    let (m, s) = (x.dim(0), x.dim(1));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniform = || T::lit(rng.gen_range(0.1..1.1));
    let w0 = Tensor::from_fn(vec![s, rank], |_| uniform());
    let mut h = Tensor::from_fn(vec![m, rank], |_| uniform());
    let w0_sums = column_sums(&w0);
    let mut w = normalize_w(&w0)?;
    for row in h.data_mut().chunks_mut(rank) {
        for (v, &c) in row.iter_mut().zip(&w0_sums) {
            *v *= c;
        }
    }
    // Match the reconstruction mass to the data mass; this is the optimal
    // global scale under the Lee–Seung objective.
    let mass = reconstruct(&w, &h).sum();
    if mass > T::zero() {
        let k = x.sum() / mass;
        h = h.scale(k);
    }

    let mut history = Vec::with_capacity(iters + 1);
    history.push(kl_divergence(x, &w, &h)?);
    for _ in 0..iters {
        h = update_h_classic(x, &w, &h)?;
        let h_mass = column_sums(&h);
        let w_raw = update_w_classic(x, &w, &h)?;
        let raw_sums = column_sums(&w_raw);
        w = normalize_w(&w_raw)?;
        for row in h.data_mut().chunks_mut(rank) {
            for ((v, &c), &hm) in row.iter_mut().zip(&raw_sums).zip(&h_mass) {
                if hm > T::zero() {
                    *v *= c / hm;
                }
            }
        }
        history.push(kl_divergence(x, &w, &h)?);
    }
    Ok(Factorization {
        w,
        h,
        divergence_history: history,
    })
}
