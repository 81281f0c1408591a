//! Backward-pass time and memory of three arms on one dense layer `S → I`:
//! a linear (CNN) layer, an NMF layer differentiated by the full unrolled
//! reverse sweep, and an NMF layer using the one-step approximate rule.
//!
//! Memory is explicit buffer accounting (see [`MemoryMeter`]): the bytes the
//! forward pass retains for the backward pass plus every buffer the backward
//! pass allocates. Parameters and their derived weight are not counted.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backprop::{
    approx_backward_metered, unrolled_forward, unrolled_tape_backward, GradMode, MemoryMeter,
    UNROLLED_BUDGET_BYTES,
};
use crate::error::{Error, Result};
use crate::layer::{nmf_forward, Linearization, NmfParams, DEFAULT_EPSILON};
use crate::tensor::{matmul, Tensor};

/// Instability threshold on median absolute deviation over median.
pub const MAD_LIMIT: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Cnn,
    NmfUnrolled,
    NmfApprox,
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "cnn" => Ok(Arm::Cnn),
            "unrolled" | "nmf_unrolled" => Ok(Arm::NmfUnrolled),
            "approx" | "nmf_approx" => Ok(Arm::NmfApprox),
            other => Err(Error::invalid(format!(
                "unknown arm `{other}` (expected cnn, unrolled or approx)"
            ))),
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arm::Cnn => "cnn",
            Arm::NmfUnrolled => "nmf_unrolled",
            Arm::NmfApprox => "nmf_approx",
        })
    }
}

/// Parses a comma-separated arm list such as `cnn,unrolled,approx`.
pub fn parse_arms(s: &str) -> Result<Vec<Arm>> {
    s.split(',').filter(|p| !p.trim().is_empty()).map(str::parse).collect()
}

/// Layer under test: `S` inputs, `I` latents, batch `B`, iteration counts `N`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub inputs: usize,
    pub latents: usize,
    pub batch: usize,
    pub n_iters: Vec<usize>,
    pub epsilon: f64,
}

impl Default for LayerSpec {
    fn default() -> Self {
        LayerSpec {
            inputs: 1600,
            latents: 64,
            batch: 32,
            n_iters: vec![20, 40, 80],
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl FromStr for LayerSpec {
    type Err = Error;

    /// `S=1600,I=64,N=20/40/80,B=32` (any order; omitted keys keep defaults).
    fn from_str(s: &str) -> Result<Self> {
        let mut spec = LayerSpec::default();
        for part in s.split(',').filter(|p| !p.trim().is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("expected KEY=VALUE, got `{part}`")))?;
            let num = |v: &str| {
                v.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::invalid(format!("`{v}` is not a positive integer")))
            };
            match k.trim() {
                "S" => spec.inputs = num(v)?,
                "I" => spec.latents = num(v)?,
                "B" => spec.batch = num(v)?,
                "N" => spec.n_iters = v.split('/').map(num).collect::<Result<_>>()?,
                "eps" => {
                    spec.epsilon = v
                        .trim()
                        .parse()
                        .map_err(|_| Error::invalid(format!("`{v}` is not a number")))?
                }
                other => return Err(Error::invalid(format!("unknown layer key `{other}`"))),
            }
        }
        if spec.inputs == 0 || spec.latents == 0 || spec.batch == 0 || spec.n_iters.contains(&0) {
            return Err(Error::invalid("layer sizes and iteration counts must be positive"));
        }
        if spec.n_iters.is_empty() {
            return Err(Error::invalid("no iteration counts"));
        }
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub layer: LayerSpec,
    pub arms: Vec<Arm>,
    pub repetitions: usize,
    pub warmup: usize,
    pub seed: u64,
    pub budget_bytes: usize,
    /// Worker threads; 1 keeps timings stable.
    pub threads: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            layer: LayerSpec::default(),
            arms: vec![Arm::Cnn, Arm::NmfUnrolled, Arm::NmfApprox],
            repetitions: 11,
            warmup: 3,
            seed: 0,
            budget_bytes: UNROLLED_BUDGET_BYTES,
            threads: 1,
        }
    }
}

/// One measured `(arm, N)` pair. Ratios are relative to the cnn arm and
/// rounded to three significant figures.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub arm: Arm,
    /// 0 for the cnn arm.
    pub n_iters: usize,
    pub batch: usize,
    pub inputs: usize,
    pub latents: usize,
    pub threads: usize,
    pub forward_ns: Option<u64>,
    pub backward_ns: Option<u64>,
    pub backward_mad_ratio: Option<f64>,
    pub unstable: bool,
    pub peak_bytes: Option<u64>,
    pub mem_ratio: Option<f64>,
    pub time_ratio: Option<f64>,
    /// Cosine between approximate (chain mode) and exact input errors.
    pub cosine: Option<f64>,
    pub budget_exceeded: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub repetitions: usize,
}

impl BenchReport {
    pub fn row(&self, arm: Arm, n_iters: usize) -> Option<&BenchRow> {
        self.rows
            .iter()
            .find(|r| r.arm == arm && (arm == Arm::Cnn || r.n_iters == n_iters))
    }
}

pub fn round_sig(x: f64, digits: i32) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    let mag = x.abs().log10().floor() as i32;
    let scale = 10f64.powi(digits - 1 - mag);
    (x * scale).round() / scale
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Median absolute deviation divided by the median.
pub fn mad_ratio(xs: &[f64]) -> f64 {
    let m = median(xs);
    let dev: Vec<f64> = xs.iter().map(|x| (x - m).abs()).collect();
    if m > 0.0 {
        median(&dev) / m
    } else {
        0.0
    }
}

struct Timing {
    forward: Vec<f64>,
    backward: Vec<f64>,
    peak: usize,
}

fn time_ns(f: impl FnOnce()) -> f64 {
    let t = Instant::now();
    f();
    t.elapsed().as_nanos() as f64
}

/// Dense `y = x U` and its exact backward, with the same accounting.
fn dense_backward_metered(x: &Tensor, w: &Tensor, g: &Tensor, meter: &mut MemoryMeter) -> (Tensor, Tensor) {
    let (b, s, i) = (x.dim(0), x.dim(1), w.dim(1));
    meter.alloc(x.bytes());
    meter.alloc_elems::<f64>(s * i + b * s);
    let mut grad_w = vec![0.0; s * i];
    let mut grad_x = vec![0.0; b * s];
    for r in 0..b {
        let xr = x.row(r);
        let gr = g.row(r);
        for si in 0..s {
            let wrow = &w.data()[si * i..(si + 1) * i];
            let gw = &mut grad_w[si * i..(si + 1) * i];
            let mut acc = 0.0;
            for ii in 0..i {
                gw[ii] += xr[si] * gr[ii];
                acc += gr[ii] * wrow[ii];
            }
            grad_x[r * s + si] = acc;
        }
    }
    meter.release(meter.current());
    (
        Tensor::new(vec![b, s], grad_x).expect("finite"),
        Tensor::new(vec![s, i], grad_w).expect("finite"),
    )
}

fn run_arm(
    arm: Arm,
    n: usize,
    cfg: &BenchConfig,
    x: &Tensor,
    params: &NmfParams,
    phi: &Tensor,
) -> Result<Timing> {
    let eps = cfg.layer.epsilon;
    let total = cfg.warmup + cfg.repetitions;
    let mut t = Timing {
        forward: Vec::with_capacity(cfg.repetitions),
        backward: Vec::with_capacity(cfg.repetitions),
        peak: 0,
    };
    for rep in 0..total {
        let keep = rep >= cfg.warmup;
        let mut meter = MemoryMeter::new();
        let (fwd, bwd) = match arm {
            Arm::Cnn => {
                let mut y = None;
                let f = time_ns(|| y = Some(matmul(x, &params.u)));
                y.expect("ran")?;
                let b = time_ns(|| {
                    dense_backward_metered(x, &params.u, phi, &mut meter);
                });
                (f, b)
            }
            Arm::NmfApprox => {
                let mut st = None;
                let f = time_ns(|| st = Some(nmf_forward(x, params, n, eps, Linearization::FinalState)));
                let st = st.expect("ran")?;
                let mut out = None;
                let b = time_ns(|| {
                    out = Some(approx_backward_metered(phi, &st, params, GradMode::Direct, &mut meter))
                });
                out.expect("ran")?;
                (f, b)
            }
            Arm::NmfUnrolled => {
                let mut tape = None;
                let f = time_ns(|| tape = Some(unrolled_forward(x, params, n, eps, cfg.budget_bytes)));
                let tape = tape.expect("ran")?;
                let mut out = None;
                let b = time_ns(|| out = Some(unrolled_tape_backward(&tape, phi, params, &mut meter)));
                out.expect("ran")?;
                (f, b)
            }
        };
        if keep {
            t.forward.push(fwd);
            t.backward.push(bwd);
        }
        t.peak = t.peak.max(meter.peak());
    }
    Ok(t)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn instance_cosine(x: &Tensor, params: &NmfParams, phi: &Tensor, n: usize, eps: f64, budget: usize) -> Result<f64> {
    let st = nmf_forward(x, params, n, eps, Linearization::FinalState)?;
    let approx = crate::backprop::approx_backward(phi, &st, params, GradMode::Chain)?;
    let tape = unrolled_forward(x, params, n, eps, budget)?;
    let exact = unrolled_tape_backward(&tape, phi, params, &mut MemoryMeter::new())?;
    Ok(cosine(approx.phi_in.data(), exact.phi_in.data()))
}

fn bench_inner(cfg: &BenchConfig, threads: usize) -> Result<BenchReport> {
    let l = &cfg.layer;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let x = Tensor::from_fn(vec![l.batch, l.inputs], |_| rng.gen_range(0.0..1.0));
    let params = NmfParams::init(l.inputs, l.latents, &mut rng);
    let phi = Tensor::from_fn(vec![l.batch, l.latents], |_| rng.sample::<f64, _>(StandardNormal));

    let mut rows = Vec::new();
    let base_row = |arm, n| BenchRow {
        arm,
        n_iters: n,
        batch: l.batch,
        inputs: l.inputs,
        latents: l.latents,
        threads,
        forward_ns: None,
        backward_ns: None,
        backward_mad_ratio: None,
        unstable: false,
        peak_bytes: None,
        mem_ratio: None,
        time_ratio: None,
        cosine: None,
        budget_exceeded: false,
    };
    let mut cnn: Option<(f64, usize)> = None;
    let mut jobs: Vec<(Arm, usize)> = Vec::new();
    for &arm in &cfg.arms {
        if arm == Arm::Cnn {
            jobs.push((arm, 0));
        } else {
            jobs.extend(l.n_iters.iter().map(|&n| (arm, n)));
        }
    }
    for (arm, n) in jobs {
        let mut row = base_row(arm, n);
        match run_arm(arm, n, cfg, &x, &params, &phi) {
            Ok(t) => {
                let bwd = median(&t.backward);
                let mad = mad_ratio(&t.backward);
                row.forward_ns = Some(median(&t.forward).round() as u64);
                row.backward_ns = Some(bwd.round() as u64);
                row.backward_mad_ratio = Some(round_sig(mad, 3));
                row.unstable = mad >= MAD_LIMIT;
                row.peak_bytes = Some(t.peak as u64);
                if arm == Arm::Cnn {
                    cnn = Some((bwd, t.peak));
                }
            }
            Err(Error::BudgetExceeded { .. }) => row.budget_exceeded = true,
            Err(e) => return Err(e),
        }
        if arm == Arm::NmfApprox && cfg.arms.contains(&Arm::NmfUnrolled) {
            row.cosine = match instance_cosine(&x, &params, &phi, n, l.epsilon, cfg.budget_bytes) {
                Ok(c) => Some(round_sig(c, 3)),
                Err(Error::BudgetExceeded { .. }) => None,
                Err(e) => return Err(e),
            };
        }
        rows.push(row);
    }
    if let Some((time, mem)) = cnn {
        for r in &mut rows {
            r.time_ratio = r.backward_ns.map(|b| round_sig(b as f64 / time.max(1.0), 3));
            r.mem_ratio = r.peak_bytes.map(|p| round_sig(p as f64 / mem as f64, 3));
        }
    }
    Ok(BenchReport {
        rows,
        repetitions: cfg.repetitions,
    })
}

/// Runs every requested arm at every iteration count. An unrolled run over
/// the memory budget yields a row flagged `budget_exceeded` with no timings.
pub fn bench_backward(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.arms.is_empty() {
        return Err(Error::invalid("no benchmark arms selected"));
    }
    if cfg.repetitions < 5 {
        return Err(Error::invalid("at least 5 repetitions are required"));
    }
    let threads = cfg.threads.max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::invalid(e.to_string()))?;
    pool.install(|| bench_inner(cfg, threads))
}

pub fn report_csv(report: &BenchReport) -> Result<String> {
    if report.rows.is_empty() {
        return Err(Error::invalid("empty benchmark report"));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &report.rows {
        w.serialize(r).map_err(|e| Error::invalid(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn parse_report_csv(text: &str) -> Result<Vec<BenchRow>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .enumerate()
        .map(|(k, r)| {
            r.map_err(|e| Error::Parse {
                line: k + 2,
                msg: e.to_string(),
            })
        })
        .collect()
}

fn opt<T: fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "-".to_string(), ToString::to_string)
}

/// Fixed-width text table of a report.
pub fn report_table(report: &BenchReport) -> String {
    let mut out = format!(
        "{:<13} {:>5} {:>14} {:>14} {:>12} {:>9} {:>9} {:>7} {}\n",
        "arm", "N", "forward_ns", "backward_ns", "peak_bytes", "mem_x", "time_x", "cosine", "flags"
    );
    for r in &report.rows {
        let mut flags = Vec::new();
        if r.unstable {
            flags.push("unstable");
        }
        if r.budget_exceeded {
            flags.push("over-budget");
        }
        out.push_str(&format!(
            "{:<13} {:>5} {:>14} {:>14} {:>12} {:>9} {:>9} {:>7} {}\n",
            r.arm.to_string(),
            r.n_iters,
            opt(&r.forward_ns),
            opt(&r.backward_ns),
            opt(&r.peak_bytes),
            opt(&r.mem_ratio),
            opt(&r.time_ratio),
            opt(&r.cosine),
            flags.join(",")
        ));
    }
    out
}

/// Writes the CSV to `path` and returns the text table.
pub fn emit_report(report: &BenchReport, path: &Path) -> Result<String> {
    std::fs::write(path, report_csv(report)?)?;
    Ok(report_table(report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic() -> BenchReport {
        let row = |arm, n, b: u64, p: u64| BenchRow {
            arm,
            n_iters: n,
            batch: 2,
            inputs: 8,
            latents: 4,
            threads: 1,
            forward_ns: Some(10),
            backward_ns: Some(b),
            backward_mad_ratio: Some(0.01),
            unstable: false,
            peak_bytes: Some(p),
            mem_ratio: Some(round_sig(p as f64 / 100.0, 3)),
            time_ratio: Some(round_sig(b as f64 / 30.0, 3)),
            cosine: None,
            budget_exceeded: false,
        };
        BenchReport {
            rows: vec![
                row(Arm::Cnn, 0, 30, 100),
                row(Arm::NmfUnrolled, 20, 900, 1234),
                BenchRow {
                    cosine: Some(0.973),
                    ..row(Arm::NmfApprox, 20, 40, 150)
                },
                BenchRow {
                    forward_ns: None,
                    backward_ns: None,
                    backward_mad_ratio: None,
                    peak_bytes: None,
                    mem_ratio: None,
                    time_ratio: None,
                    budget_exceeded: true,
                    ..row(Arm::NmfUnrolled, 80, 0, 0)
                },
            ],
            repetitions: 5,
        }
    }

    #[test]
    fn significant_figures() {
        assert_eq!(round_sig(12.345, 3), 12.3);
        assert_eq!(round_sig(0.0012345, 3), 0.00123);
        assert_eq!(round_sig(29.96, 3), 30.0);
        assert_eq!(round_sig(0.0, 3), 0.0);
    }

    #[test]
    fn median_and_mad() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(mad_ratio(&[10.0, 10.0, 10.0, 11.0, 9.0]), 0.0);
        assert!(mad_ratio(&[1.0, 2.0, 3.0, 4.0, 5.0]) > MAD_LIMIT);
    }

    #[test]
    fn golden_csv_and_round_trip() {
        let r = synthetic();
        let csv = report_csv(&r).unwrap();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "arm,n_iters,batch,inputs,latents,threads,forward_ns,backward_ns,backward_mad_ratio,unstable,peak_bytes,mem_ratio,time_ratio,cosine,budget_exceeded"
        );
        assert_eq!(lines.next().unwrap(), "cnn,0,2,8,4,1,10,30,0.01,false,100,1.0,1.0,,false");
        assert_eq!(lines.last().unwrap(), "nmf_unrolled,80,2,8,4,1,,,,false,,,,,true");
        assert_eq!(parse_report_csv(&csv).unwrap(), r.rows);
        let table = report_table(&r);
        assert!(table.lines().nth(4).unwrap().ends_with("over-budget"));
    }

    #[test]
    fn empty_inputs_are_errors() {
        let cfg = BenchConfig {
            arms: vec![],
            ..BenchConfig::default()
        };
        assert!(bench_backward(&cfg).is_err());
        let empty = BenchReport {
            rows: vec![],
            repetitions: 5,
        };
        assert!(report_csv(&empty).is_err());
    }

    #[test]
    fn parses_layer_and_arm_lists() {
        let l: LayerSpec = "S=100,I=8,N=20/40/80,B=4".parse().unwrap();
        assert_eq!((l.inputs, l.latents, l.batch), (100, 8, 4));
        assert_eq!(l.n_iters, [20, 40, 80]);
        assert!("S=0".parse::<LayerSpec>().is_err());
        assert!("Q=1".parse::<LayerSpec>().is_err());
        assert_eq!(
            parse_arms("cnn,unrolled,approx").unwrap(),
            [Arm::Cnn, Arm::NmfUnrolled, Arm::NmfApprox]
        );
        assert!(parse_arms("gpu").is_err());
    }

    #[test]
    fn small_benchmark_has_expected_shape() {
        let cfg = BenchConfig {
            layer: "S=40,I=6,N=5/20,B=4".parse().unwrap(),
            repetitions: 5,
            warmup: 1,
            ..BenchConfig::default()
        };
        let r = bench_backward(&cfg).unwrap();
        assert_eq!(r.rows.len(), 5);
        assert_eq!(r.row(Arm::Cnn, 0).unwrap().mem_ratio, Some(1.0));
        let a5 = r.row(Arm::NmfApprox, 5).unwrap().peak_bytes.unwrap();
        let a20 = r.row(Arm::NmfApprox, 20).unwrap().peak_bytes.unwrap();
        assert_eq!(a5, a20);
        let u5 = r.row(Arm::NmfUnrolled, 5).unwrap().peak_bytes.unwrap();
        let u20 = r.row(Arm::NmfUnrolled, 20).unwrap().peak_bytes.unwrap();
        assert!(u20 > 2 * u5);
        assert!(r.row(Arm::NmfApprox, 20).unwrap().cosine.is_some());
    }

    #[test]
    fn over_budget_unrolled_arm_is_flagged() {
        let cfg = BenchConfig {
            layer: "S=40,I=6,N=50,B=4".parse().unwrap(),
            arms: vec![Arm::NmfUnrolled, Arm::NmfApprox],
            repetitions: 5,
            warmup: 0,
            budget_bytes: 10_000,
            ..BenchConfig::default()
        };
        let r = bench_backward(&cfg).unwrap();
        let u = r.row(Arm::NmfUnrolled, 50).unwrap();
        assert!(u.budget_exceeded && u.backward_ns.is_none());
        assert!(r.row(Arm::NmfApprox, 50).unwrap().backward_ns.is_some());
    }
}
