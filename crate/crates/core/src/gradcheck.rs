//! Finite-difference checks of the NMF layer derivatives on seeded random
//! instances.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backprop::{approx_backward, backprop_input, chain_to_u, unrolled_backward, weight_grad, GradMode};
use crate::error::Result;
use crate::layer::{derive_w, h_step, nmf_forward, Linearization, NmfParams};
use crate::tensor::Tensor;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-6;

/// `max |a − b| / max |b|`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 && nb == 0.0 {
        1.0
    } else if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Central differences of `f` with respect to every entry of `at`.
pub fn central_difference(at: &Tensor, step: f64, mut f: impl FnMut(&Tensor) -> f64) -> Vec<f64> {
    (0..at.len())
        .map(|k| {
            let mut p = at.clone();
            p.data_mut()[k] += step;
            let mut m = at.clone();
            m.data_mut()[k] -= step;
            (f(&p) - f(&m)) / (2.0 * step)
        })
        .collect()
}

/// A random small layer problem: signed `U`, positive input, signed error.
#[derive(Clone, Debug)]
pub struct Instance {
    pub x: Tensor,
    pub params: NmfParams,
    pub phi: Tensor,
    pub n_iters: usize,
}

impl Instance {
    pub fn random(rng: &mut impl Rng, max_s: usize, max_i: usize, max_n: usize, batch: usize) -> Self {
        let s = rng.gen_range(2..=max_s);
        let i = rng.gen_range(2..=max_i);
        let n_iters = rng.gen_range(1..=max_n);
        let u = Tensor::from_fn(vec![s, i], |_| {
            let v: f64 = rng.gen_range(0.2..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        });
        Instance {
            x: Tensor::from_fn(vec![batch, s], |_| rng.gen_range(0.1..1.0)),
            params: NmfParams::new(u).expect("rank 2"),
            phi: Tensor::from_fn(vec![batch, i], |_| rng.gen_range(-1.0..1.0)),
            n_iters,
        }
    }

    /// `⟨h(N), Φ⟩` as a function of the raw input and of `U`.
    pub fn objective(&self, x: &Tensor, params: &NmfParams) -> f64 {
        nmf_forward(x, params, self.n_iters, 1.0, Linearization::FinalState)
            .and_then(|st| st.h.dot(&self.phi))
            .expect("valid instance")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckRow {
    pub layer: &'static str,
    pub mode: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
    pub min_cosine: f64,
    /// `None` for rows that are reported but not thresholded.
    pub tolerance: Option<f64>,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.tolerance.is_none_or(|t| self.max_rel_err <= t)
    }
}

impl fmt::Display for CheckRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tol = self.tolerance.map_or_else(|| "-".into(), |t| format!("{t:.0e}"));
        let status = match (self.tolerance, self.passed()) {
            (None, _) => "info",
            (_, true) => "ok",
            (_, false) => "FAIL",
        };
        write!(
            f,
            "{:<14} {:<8} {:>5} {:>12.3e} {:>10.6} {:>7} {}",
            self.layer, self.mode, self.instances, self.max_rel_err, self.min_cosine, tol, status
        )
    }
}

pub fn table_header() -> String {
    format!(
        "{:<14} {:<8} {:>5} {:>12} {:>10} {:>7} status",
        "layer", "mode", "n", "max_rel_err", "cosine", "tol"
    )
}

struct Acc {
    err: f64,
    cos: f64,
    n: usize,
}

impl Acc {
    fn new() -> Self {
        Acc {
            err: 0.0,
            cos: 1.0,
            n: 0,
        }
    }

    fn add(&mut self, analytic: &[f64], reference: &[f64]) {
        self.err = self.err.max(rel_err(analytic, reference));
        self.cos = self.cos.min(cosine(analytic, reference));
        self.n += 1;
    }

    fn row(&self, layer: &'static str, mode: &'static str, tolerance: Option<f64>) -> CheckRow {
        CheckRow {
            layer,
            mode,
            instances: self.n,
            max_rel_err: self.err,
            min_cosine: self.cos,
            tolerance,
        }
    }
}

/// Runs every check on `instances` random problems (S ≤ 8, I ≤ 6, N ≤ 30).
pub fn run_gradcheck(instances: usize, seed: u64) -> Result<Vec<CheckRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut one_in = Acc::new();
    let mut one_w = Acc::new();
    let mut chain = Acc::new();
    let mut un_x = Acc::new();
    let mut un_u = Acc::new();
    let mut n1 = Acc::new();
    let mut approx = Acc::new();
    for _ in 0..instances {
        let inst = Instance::random(&mut rng, 8, 6, 30, 2);
        let (x, p, phi) = (&inst.x, &inst.params, &inst.phi);

        let st = nmf_forward(x, p, inst.n_iters, 1.0, Linearization::FinalState)?;
        let h = st.h.clone();
        let fd = central_difference(&st.x_norm, FD_STEP, |xn| {
            h_step(xn, &st.w, &h, 1.0).and_then(|o| o.dot(phi)).expect("valid")
        });
        one_in.add(backprop_input(phi, &st)?.data(), &fd);
        let fd = central_difference(&st.w, FD_STEP, |w| {
            h_step(&st.x_norm, w, &h, 1.0).and_then(|o| o.dot(phi)).expect("valid")
        });
        let gw = weight_grad(phi, &st)?;
        one_w.add(gw.data(), &fd);
        let fd = central_difference(&p.u, FD_STEP, |u| derive_w(u).and_then(|w| w.dot(&gw)).expect("valid"));
        chain.add(chain_to_u(&gw, &p.u, GradMode::Chain)?.data(), &fd);

        let un = unrolled_backward(x, p, inst.n_iters, 1.0, phi)?;
        un_x.add(un.phi_in.data(), &central_difference(x, FD_STEP, |xx| inst.objective(xx, p)));
        let fd_u = central_difference(&p.u, FD_STEP, |u| inst.objective(x, &NmfParams { u: u.clone() }));
        un_u.add(un.grad_u.data(), &fd_u);
        let ap = approx_backward(phi, &st, p, GradMode::Chain)?;
        approx.add(ap.phi_in.data(), un.phi_in.data());

        let st1 = nmf_forward(x, p, 1, 1.0, Linearization::LastStep)?;
        let ap1 = approx_backward(phi, &st1, p, GradMode::Chain)?;
        let un1 = unrolled_backward(x, p, 1, 1.0, phi)?;
        n1.add(
            &[ap1.phi_in.data(), ap1.grad_u.data()].concat(),
            &[un1.phi_in.data(), un1.grad_u.data()].concat(),
        );
    }
    Ok(vec![
        one_in.row("nmf_one_step", "input", Some(1e-4)),
        one_w.row("nmf_one_step", "weight", Some(1e-4)),
        chain.row("nmf_derive_w", "chain", Some(1e-6)),
        un_x.row("nmf_unrolled", "input", Some(1e-4)),
        un_u.row("nmf_unrolled", "u", Some(1e-4)),
        n1.row("nmf_n1", "chain", Some(1e-10)),
        approx.row("nmf_approx", "vs_exact", None),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_thresholded_rows_pass() {
        let rows = run_gradcheck(5, 11).unwrap();
        assert_eq!(rows.len(), 7);
        for r in &rows {
            assert!(r.passed(), "{r}");
            assert_eq!(r.instances, 5);
        }
        assert!(rows[6].to_string().ends_with("info"));
    }

    #[test]
    fn helpers() {
        assert_eq!(rel_err(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert!((rel_err(&[1.1, 2.0], &[1.0, 2.0]) - 0.05).abs() < 1e-12);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert_eq!(cosine(&[0.0], &[0.0]), 1.0);
        let t = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let g = central_difference(&t, 1e-5, |v| v.data()[0] * v.data()[1]);
        assert!((g[0] - 2.0).abs() < 1e-8 && (g[1] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn failing_row_is_reported() {
        let r = CheckRow {
            layer: "x",
            mode: "y",
            instances: 1,
            max_rel_err: 1.0,
            min_cosine: 0.0,
            tolerance: Some(1e-4),
        };
        assert!(!r.passed());
        assert!(r.to_string().ends_with("FAIL"));
    }
}
