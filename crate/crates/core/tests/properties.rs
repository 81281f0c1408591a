use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nmfnet::backprop::{approx_backward, unrolled_backward, GradMode};
use nmfnet::classic::{column_sums, generalized_kl_divergence, kl_divergence, update_h_classic, update_w_classic};
use nmfnet::layer::{derive_w, h_step, nmf_forward, normalize_input, Linearization, NmfParams};
use nmfnet::network::{build, loss, BlockKind, LossConfig, NetworkConfig, Preset};
use nmfnet::tensor::{conv2d, fold, softmax, unfold, ConvSpec};
use nmfnet::train::{color_jitter, crop, hflip, AugmentConfig, Augmenter, PlateauScheduler, ScheduleAction, TrainConfig};
use nmfnet::Tensor;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn positive(r: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    Tensor::from_fn(shape, |_| r.gen_range(0.01..1.0))
}

fn signed(r: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0))
}

/// Direct seven-loop grouped cross-correlation.
fn naive_conv(x: &Tensor, w: &Tensor, s: &ConvSpec) -> Vec<f64> {
    let (b, c, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (oh, ow) = s.output_hw(h, wd).unwrap();
    let (gi, go) = (c / s.groups, s.out_channels / s.groups);
    let mut out = vec![0.0; b * s.out_channels * oh * ow];
    for n in 0..b {
        for o in 0..s.out_channels {
            let g = o / go;
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..gi {
                        for ky in 0..s.kernel_h {
                            for kx in 0..s.kernel_w {
                                let iy = (y * s.stride + ky) as isize - s.padding as isize;
                                let ix = (xx * s.stride + kx) as isize - s.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((n * c + g * gi + ci) * h + iy as usize) * wd + ix as usize];
                                let wv = w.data()[((o * gi + ci) * s.kernel_h + ky) * s.kernel_w + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((n * s.out_channels + o) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    out
}

fn conv_case() -> impl Strategy<Value = (ConvSpec, usize, usize, u64)> {
    (1usize..=3, 1usize..=3, 1usize..=3, 1usize..=2, 0usize..=1, 1usize..=2, 1usize..=3, any::<u64>()).prop_filter_map(
        "valid geometry",
        |(gi, go, k, stride, pad, groups, extra, seed)| {
            let spec = ConvSpec::new(gi * groups, go * groups, (k, k), stride, pad, groups).ok()?;
            let hw = k + extra;
            Some((spec, hw, hw + 1, seed))
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_equals_direct_loops((spec, h, w, seed) in conv_case()) {
        let mut r = rng(seed);
        let x = signed(&mut r, vec![2, spec.in_channels, h, w]);
        let wt = signed(&mut r, vec![spec.out_channels, spec.group_in(), spec.kernel_h, spec.kernel_w]);
        let y = conv2d(&x, &wt, &spec).unwrap();
        for (a, b) in y.data().iter().zip(naive_conv(&x, &wt, &spec)) {
            prop_assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0));
        }
    }

    #[test]
    fn fold_is_the_adjoint_of_unfold((spec, h, w, seed) in conv_case()) {
        let mut r = rng(seed);
        let x = signed(&mut r, vec![2, spec.in_channels, h, w]);
        let cols = unfold(&x, &spec).unwrap();
        let y = signed(&mut r, cols.shape().to_vec());
        let lhs = cols.dot(&y).unwrap();
        let rhs = x.dot(&fold(&y, &spec, (h, w)).unwrap()).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn softmax_rows_are_distributions_and_shift_invariant(
        seed in any::<u64>(), b in 1usize..5, k in 2usize..12, shift in -50.0f64..50.0,
    ) {
        let mut r = rng(seed);
        let z = Tensor::from_fn(vec![b, k], |_| r.gen_range(-20.0..20.0));
        let p = softmax(&z).unwrap();
        for row in p.data().chunks(k) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        let zs = z.map(|v| v + shift);
        let ps = softmax(&zs).unwrap();
        for (a, c) in p.data().iter().zip(ps.data()) {
            prop_assert!((a - c).abs() <= 1e-10);
        }
        let labels: Vec<usize> = (0..b).map(|_| r.gen_range(0..k)).collect();
        let lc = LossConfig::default();
        let l0: f64 = loss(&z, &labels, &lc).unwrap();
        prop_assert!((l0 - loss(&zs, &labels, &lc).unwrap()).abs() <= 1e-10);
    }

    #[test]
    fn classic_updates_keep_factors_non_negative_and_never_increase_divergence(
        seed in any::<u64>(), m in 1usize..8, s in 1usize..8, i in 1usize..5,
    ) {
        let mut r = rng(seed);
        let x = positive(&mut r, vec![m, s]);
        let mut w = positive(&mut r, vec![s, i]);
        let mut h = positive(&mut r, vec![m, i]);
        let mut d = generalized_kl_divergence(&x, &w, &h).unwrap();
        // standard Lee–Seung steps: divide by the column sums of the other factor
        let divide_columns = |t: Tensor, by: &Tensor| {
            let sums = column_sums(by);
            let k = sums.len();
            Tensor::from_fn(t.shape().to_vec(), |idx| t.data()[idx] / sums[idx % k])
        };
        for _ in 0..10 {
            h = divide_columns(update_h_classic(&x, &w, &h).unwrap(), &w);
            w = divide_columns(update_w_classic(&x, &w, &h).unwrap(), &h);
            prop_assert!(h.min_value() >= 0.0 && w.min_value() >= 0.0);
            let next = generalized_kl_divergence(&x, &w, &h).unwrap();
            prop_assert!(next <= d + 1e-12 * x.sum());
            d = next;
        }
    }

    #[test]
    fn latent_state_is_non_negative_and_on_the_simplex(
        seed in any::<u64>(), s in 2usize..20, i in 1usize..10, eps in 0.05f64..=1.0,
    ) {
        let mut r = rng(seed);
        let x = normalize_input(&positive(&mut r, vec![3, s])).unwrap();
        let w = derive_w(&signed(&mut r, vec![s, i])).unwrap();
        let mut h = Tensor::full(vec![3, i], 1.0 / i as f64);
        for _ in 0..40 {
            h = h_step(&x, &w, &h, eps).unwrap();
            prop_assert!(h.min_value() >= 0.0);
            for row in h.data().chunks(i) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn divergence_along_the_trajectory_never_increases(
        seed in any::<u64>(), s in 2usize..16, i in 1usize..8,
    ) {
        let mut r = rng(seed);
        let x = normalize_input(&positive(&mut r, vec![1, s])).unwrap();
        let w = derive_w(&signed(&mut r, vec![s, i])).unwrap();
        let mut h = Tensor::full(vec![1, i], 1.0 / i as f64);
        let mut d = kl_divergence(&x, &w, &h).unwrap();
        for _ in 0..30 {
            h = h_step(&x, &w, &h, 1.0).unwrap();
            let next = kl_divergence(&x, &w, &h).unwrap();
            prop_assert!(next <= d + 1e-13);
            d = next;
        }
    }

    #[test]
    fn scaling_a_column_of_u_by_a_power_of_two_changes_nothing(
        seed in any::<u64>(), s in 2usize..10, i in 1usize..6, e in -20i32..20, neg in any::<bool>(),
    ) {
        let mut r = rng(seed);
        let u = signed(&mut r, vec![s, i]);
        let col = r.gen_range(0..i);
        let c = if neg { -(2f64.powi(e)) } else { 2f64.powi(e) };
        let mut v = u.clone();
        for row in 0..s {
            v.data_mut()[row * i + col] *= c;
        }
        prop_assert_eq!(derive_w(&u).unwrap(), derive_w(&v).unwrap());
        let x = positive(&mut r, vec![2, s]);
        let a = nmf_forward(&x, &NmfParams::new(u).unwrap(), 10, 1.0, Linearization::FinalState).unwrap();
        let b = nmf_forward(&x, &NmfParams::new(v).unwrap(), 10, 1.0, Linearization::FinalState).unwrap();
        prop_assert_eq!(a.h, b.h);
    }

    #[test]
    fn scaling_a_column_of_u_by_any_constant_changes_w_within_rounding(
        seed in any::<u64>(), s in 2usize..10, i in 1usize..6, c in 0.01f64..100.0,
    ) {
        let mut r = rng(seed);
        let u = signed(&mut r, vec![s, i]);
        let w0 = derive_w(&u).unwrap();
        let w1 = derive_w(&u.scale(c)).unwrap();
        for (a, b) in w0.data().iter().zip(w1.data()) {
            prop_assert!((a - b).abs() <= 1e-15 * a.abs().max(1e-300) * 4.0);
        }
    }

    #[test]
    fn zero_error_propagates_nothing(seed in any::<u64>(), s in 2usize..10, i in 1usize..6, n in 1usize..20) {
        let mut r = rng(seed);
        let p = NmfParams::new(signed(&mut r, vec![s, i])).unwrap();
        let x = positive(&mut r, vec![2, s]);
        let zero = Tensor::zeros(vec![2, i]);
        for lin in [Linearization::FinalState, Linearization::LastStep] {
            let st = nmf_forward(&x, &p, n, 1.0, lin).unwrap();
            for mode in [GradMode::Direct, GradMode::Chain] {
                let sig = approx_backward(&zero, &st, &p, mode).unwrap();
                prop_assert_eq!(sig.phi_in.max_abs(), 0.0);
                prop_assert_eq!(sig.grad_w.max_abs(), 0.0);
                prop_assert_eq!(sig.grad_u.max_abs(), 0.0);
            }
        }
        let un = unrolled_backward(&x, &p, n, 1.0, &zero).unwrap();
        prop_assert_eq!(un.phi_in.max_abs(), 0.0);
        prop_assert_eq!(un.grad_u.max_abs(), 0.0);
    }

    #[test]
    fn input_error_mass_is_consistent(seed in any::<u64>(), s in 2usize..12, i in 1usize..8) {
        let mut r = rng(seed);
        let p = NmfParams::new(signed(&mut r, vec![s, i])).unwrap();
        let x = positive(&mut r, vec![1, s]);
        let phi = signed(&mut r, vec![1, i]);
        let st = nmf_forward(&x, &p, 15, 1.0, Linearization::FinalState).unwrap();
        let pin = nmfnet::backprop::backprop_input(&phi, &st).unwrap();
        let lhs: f64 = pin.sum();
        let (w, h, rr) = (st.w.data(), st.h.data(), st.r.data());
        let rhs: f64 = (0..i)
            .map(|k| phi.data()[k] * (0..s).map(|si| w[si * i + k] * h[k] / rr[si]).sum::<f64>())
            .sum();
        prop_assert!((lhs - rhs).abs() <= 1e-10 * rhs.abs().max(1.0));
    }

    #[test]
    fn augmented_views_stay_in_range(seed in any::<u64>(), d in 0.0f64..0.9, flip in any::<bool>(), cropped in any::<bool>()) {
        let mut r = rng(seed);
        let shape = (3, 8, 8);
        let img: Vec<f64> = (0..3 * 64).map(|_| r.gen_range(0.0..=1.0)).collect();
        let aug = Augmenter {
            cfg: AugmentConfig { hflip: flip, brightness: d, contrast: d, saturation: d, crop: cropped },
            out_hw: (6, 6),
        };
        let v = aug.train_view(&img, shape, &mut r);
        prop_assert_eq!(v.len(), 3 * 36);
        prop_assert!(v.iter().all(|&p| (0.0..=1.0).contains(&p)));
        let mut j = img.clone();
        color_jitter(&mut j, 3, (1.0 + d, 1.0 - d, 1.0 + d));
        prop_assert!(j.iter().all(|&p| (0.0..=1.0).contains(&p)));
        prop_assert_eq!(hflip(&hflip(&img, shape), shape), img.clone());
        prop_assert_eq!(crop(&img, shape, (0, 0), (8, 8)), img);
    }

    #[test]
    fn learning_rate_trace_is_quantized_and_non_increasing(
        losses in prop::collection::vec(0.0f64..2.0, 1..200), patience in 1usize..6,
    ) {
        let cfg = TrainConfig { plateau_patience: patience, ..TrainConfig::default() };
        let mut s = PlateauScheduler::new(&cfg);
        let mut last = s.lr();
        for &l in &losses {
            if s.observe(l) == ScheduleAction::Stop {
                break;
            }
            let lr = s.lr();
            prop_assert!(lr <= last);
            let k = (cfg.lr0 / lr).log10();
            prop_assert!((k - k.round()).abs() < 1e-9);
            last = lr;
        }
    }
}

fn analytic_param_count(cfg: &NetworkConfig) -> usize {
    let (mut c_in, _, _) = cfg.input_shape;
    let mut total = 0;
    for (idx, b) in cfg.blocks.iter().enumerate() {
        let c_out = cfg.block_channels(idx);
        let (kh, kw) = b.kernel;
        total += c_out * (c_in / b.groups_main) * kh * kw;
        let bn = if b.batch_norm { 2 * c_out } else { 0 };
        total += bn;
        if b.mix_1x1 {
            total += c_out * (c_out / b.groups_mix) + bn;
        }
        c_in = c_out;
    }
    total
}

#[test]
fn parameter_counts_match_the_formula_across_the_sweep() {
    for preset in Preset::ALL {
        for width in [1, 2, 4, 8] {
            for groups in [1, 2, 4, 8, 16] {
                let cfg = NetworkConfig::preset(preset, width, groups);
                let m = build::<f64>(&cfg, 0).unwrap();
                assert_eq!(m.param_count(), analytic_param_count(&cfg), "{preset} ×{width} g{groups}");
            }
        }
    }
    // hand count of the mixed CNMF preset at width 1
    let m = build::<f64>(&NetworkConfig::preset(Preset::CnmfMix, 1, 1), 0).unwrap();
    assert_eq!(m.param_count(), 3552 + 55552 + 162816 + 8740);
}

#[test]
fn width_scales_inner_convolution_weights_quadratically() {
    let count = |w| {
        let m = build::<f64>(&NetworkConfig::preset(Preset::Cnn, w, 1), 0).unwrap();
        m.parameters()
            .into_iter()
            .filter(|(n, _)| n.starts_with("block2.main"))
            .map(|(_, t)| t.len())
            .sum::<usize>()
    };
    assert_eq!(count(4), 16 * count(1));
}

#[test]
fn nmf_layers_see_non_negative_inputs() {
    let cfg = NetworkConfig::preset(Preset::CnmfMix, 1, 2);
    let mut small = cfg.clone();
    small.set_nmf_iters(3);
    assert!(small.blocks.iter().all(|b| b.kind == BlockKind::Cnmf));
    let m = build::<f64>(&small, 1).unwrap();
    let mut r = rng(5);
    let x = positive(&mut r, vec![2, 3, 28, 28]);
    for (li, l) in m.layers().iter().enumerate() {
        if l.name.ends_with(".main") {
            assert!(m.forward_prefix(&x, li).unwrap().min_value() >= 0.0, "{}", l.name);
        }
    }
}
