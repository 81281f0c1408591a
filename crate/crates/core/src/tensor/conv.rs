use serde::{Deserialize, Serialize};

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Geometry of a (grouped) 2-D convolution or CNMF layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvSpec {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        let spec = ConvSpec {
            kernel_h: kernel.0,
            kernel_w: kernel.1,
            stride,
            padding,
            groups,
            in_channels,
            out_channels,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// 1×1, stride 1, unpadded channel mixing.
    pub fn pointwise(in_channels: usize, out_channels: usize, groups: usize) -> Result<Self> {
        Self::new(in_channels, out_channels, (1, 1), 1, 0, groups)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_h == 0 || self.kernel_w == 0 || self.stride == 0 {
            return Err(Error::invalid(format!(
                "kernel and stride must be positive: {self:?}"
            )));
        }
        if self.groups == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::invalid(format!(
                "groups and channel counts must be positive: {self:?}"
            )));
        }
        if !self.in_channels.is_multiple_of(self.groups) || !self.out_channels.is_multiple_of(self.groups) {
            return Err(Error::invalid(format!(
                "{} groups do not divide {} input / {} output channels",
                self.groups, self.in_channels, self.out_channels
            )));
        }
        Ok(())
    }

    pub fn kernel_area(&self) -> usize {
        self.kernel_h * self.kernel_w
    }

    /// Full patch length `C·kh·kw` produced by [`unfold`].
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_area()
    }

    pub fn group_in(&self) -> usize {
        self.in_channels / self.groups
    }

    pub fn group_out(&self) -> usize {
        self.out_channels / self.groups
    }

    /// Patch length seen by one group, `(C/groups)·kh·kw`.
    pub fn group_patch_len(&self) -> usize {
        self.group_in() * self.kernel_area()
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if ph < self.kernel_h || pw < self.kernel_w {
            return Err(Error::shape(format!(
                "{}x{} window does not fit a {h}x{w} input padded by {}",
                self.kernel_h, self.kernel_w, self.padding
            )));
        }
        Ok((
            (ph - self.kernel_h) / self.stride + 1,
            (pw - self.kernel_w) / self.stride + 1,
        ))
    }

    fn check_input<T: Real>(&self, x: &Tensor<T>) -> Result<(usize, usize, usize)> {
        if x.rank() != 4 || x.dim(1) != self.in_channels {
            return Err(Error::shape(format!(
                "expected [B, {}, H, W] input, got {:?}",
                self.in_channels,
                x.shape()
            )));
        }
        Ok((x.dim(0), x.dim(2), x.dim(3)))
    }
}

/// im2col: `[B, C, H, W]` → `[B, L, C·kh·kw]`, one receptive field per row.
///
/// Patch entries are ordered channel-major then kernel row then kernel column,
/// so the slice belonging to channel group `g` is contiguous. Out-of-range
/// taps read zero.
pub fn unfold<T: Real>(x: &Tensor<T>, spec: &ConvSpec) -> Result<Tensor<T>> {
    let (b, h, w) = spec.check_input(x)?;
    let (oh, ow) = spec.output_hw(h, w)?;
    let c = spec.in_channels;
    let (kh, kw) = (spec.kernel_h, spec.kernel_w);
    let l = oh * ow;
    let k = spec.patch_len();
    let src = x.data();
    let mut out = vec![T::zero(); b * l * k];
    for bi in 0..b {
        let img = &src[bi * c * h * w..(bi + 1) * c * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let row = &mut out[(bi * l + oy * ow + ox) * k..(bi * l + oy * ow + ox + 1) * k];
                for ci in 0..c {
                    for ky in 0..kh {
                        let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            row[(ci * kh + ky) * kw + kx] =
                                img[(ci * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts_unchecked(vec![b, l, k], out))
}

/// col2im: the adjoint of [`unfold`]. Overlapping taps accumulate; taps in
/// the padding are dropped.
pub fn fold<T: Real>(cols: &Tensor<T>, spec: &ConvSpec, hw: (usize, usize)) -> Result<Tensor<T>> {
    let (h, w) = hw;
    let (oh, ow) = spec.output_hw(h, w)?;
    let l = oh * ow;
    let k = spec.patch_len();
    if cols.rank() != 3 || cols.dim(1) != l || cols.dim(2) != k {
        return Err(Error::shape(format!(
            "fold expects [B, {l}, {k}], got {:?}",
            cols.shape()
        )));
    }
    let b = cols.dim(0);
    let c = spec.in_channels;
    let (kh, kw) = (spec.kernel_h, spec.kernel_w);
    let src = cols.data();
    let mut out = vec![T::zero(); b * c * h * w];
    for bi in 0..b {
        let img = &mut out[bi * c * h * w..(bi + 1) * c * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let row = &src[(bi * l + oy * ow + ox) * k..(bi * l + oy * ow + ox + 1) * k];
                for ci in 0..c {
                    for ky in 0..kh {
                        let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            img[(ci * h + iy as usize) * w + ix as usize] +=
                                row[(ci * kh + ky) * kw + kx];
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts_unchecked(vec![b, c, h, w], out))
}

fn check_weight<T: Real>(weight: &Tensor<T>, spec: &ConvSpec) -> Result<()> {
    let expected = [
        spec.out_channels,
        spec.group_in(),
        spec.kernel_h,
        spec.kernel_w,
    ];
    if weight.shape() != expected {
        return Err(Error::shape(format!(
            "conv weight should be {expected:?}, got {:?}",
            weight.shape()
        )));
    }
    Ok(())
}

/// Grouped cross-correlation (no kernel flip) with zero padding.
/// `weight` is `[outC, inC/groups, kh, kw]`; output is `[B, outC, H', W']`.
pub fn conv2d<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, spec: &ConvSpec) -> Result<Tensor<T>> {
    spec.validate()?;
    check_weight(weight, spec)?;
    let (b, h, w) = spec.check_input(x)?;
    let (oh, ow) = spec.output_hw(h, w)?;
    let cols = unfold(x, spec)?;
    Ok(conv_from_cols(&cols, weight, spec, b, oh, ow))
}

/// Convolution given precomputed patches; used by layers that cache `cols`.
pub(crate) fn conv_from_cols<T: Real>(
    cols: &Tensor<T>,
    weight: &Tensor<T>,
    spec: &ConvSpec,
    b: usize,
    oh: usize,
    ow: usize,
) -> Tensor<T> {
    let l = oh * ow;
    let k = spec.patch_len();
    let gk = spec.group_patch_len();
    let og = spec.group_out();
    let oc_total = spec.out_channels;
    let wd = weight.data();
    let cd = cols.data();
    let mut out = vec![T::zero(); b * oc_total * l];
    for bi in 0..b {
        for li in 0..l {
            let col = &cd[(bi * l + li) * k..(bi * l + li + 1) * k];
            for oc in 0..oc_total {
                let g = oc / og;
                let patch = &col[g * gk..(g + 1) * gk];
                let wrow = &wd[oc * gk..(oc + 1) * gk];
                let mut acc = T::zero();
                for (&a, &p) in wrow.iter().zip(patch) {
                    acc += a * p;
                }
                out[(bi * oc_total + oc) * l + li] = acc;
            }
        }
    }
    Tensor::from_parts_unchecked(vec![b, oc_total, oh, ow], out)
}

/// Backward of [`conv2d`] from the cached patches of its input.
/// Returns `(grad_input, grad_weight)`.
pub fn conv2d_backward<T: Real>(
    cols: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    spec: &ConvSpec,
    input_hw: (usize, usize),
) -> Result<(Tensor<T>, Tensor<T>)> {
    check_weight(weight, spec)?;
    let (oh, ow) = spec.output_hw(input_hw.0, input_hw.1)?;
    let l = oh * ow;
    let k = spec.patch_len();
    if cols.rank() != 3 || cols.dim(1) != l || cols.dim(2) != k {
        return Err(Error::shape(format!(
            "cached patches {:?} do not match {spec:?}",
            cols.shape()
        )));
    }
    let b = cols.dim(0);
    if grad_out.shape() != [b, spec.out_channels, oh, ow] {
        return Err(Error::shape(format!(
            "grad_out {:?} does not match [{b}, {}, {oh}, {ow}]",
            grad_out.shape(),
            spec.out_channels
        )));
    }
    let gk = spec.group_patch_len();
    let og = spec.group_out();
    let oc_total = spec.out_channels;
    let wd = weight.data();
    let cd = cols.data();
    let gd = grad_out.data();
    let mut grad_w = vec![T::zero(); weight.len()];
    let mut grad_cols = vec![T::zero(); cols.len()];
    for bi in 0..b {
        for li in 0..l {
            let base = (bi * l + li) * k;
            for oc in 0..oc_total {
                let g = oc / og;
                let go = gd[(bi * oc_total + oc) * l + li];
                if go == T::zero() {
                    continue;
                }
                let patch = &cd[base + g * gk..base + (g + 1) * gk];
                let gw = &mut grad_w[oc * gk..(oc + 1) * gk];
                for (acc, &p) in gw.iter_mut().zip(patch) {
                    *acc += go * p;
                }
                let wrow = &wd[oc * gk..(oc + 1) * gk];
                let gc = &mut grad_cols[base + g * gk..base + (g + 1) * gk];
                for (acc, &wv) in gc.iter_mut().zip(wrow) {
                    *acc += go * wv;
                }
            }
        }
    }
    let grad_cols = Tensor::from_parts_unchecked(cols.shape().to_vec(), grad_cols);
    let grad_x = fold(&grad_cols, spec, input_hw)?;
    Ok((
        grad_x,
        Tensor::from_parts_unchecked(weight.shape().to_vec(), grad_w),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::matmul;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Vec<usize>, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Direct sliding-window patch extraction, written independently of `unfold`.
    fn naive_patches(x: &Tensor, kh: usize, kw: usize, stride: usize, pad: usize) -> Vec<Vec<f64>> {
        let (c, h, w) = (x.dim(1), x.dim(2), x.dim(3));
        let at = |ci: usize, y: isize, xx: isize| -> f64 {
            if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                0.0
            } else {
                x.data()[(ci * h + y as usize) * w + xx as usize]
            }
        };
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let mut rows = Vec::new();
        for oy in 0..oh {
            for ox in 0..ow {
                let mut row = Vec::new();
                for ci in 0..c {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let y = (oy * stride + ky) as isize - pad as isize;
                            let xx = (ox * stride + kx) as isize - pad as isize;
                            row.push(at(ci, y, xx));
                        }
                    }
                }
                rows.push(row);
            }
        }
        rows
    }

    #[test]
    fn unfold_1x1_is_pixel_per_row() {
        let x = random(vec![1, 3, 4, 5], 1);
        let spec = ConvSpec::pointwise(3, 3, 1).unwrap();
        let cols = unfold(&x, &spec).unwrap();
        assert_eq!(cols.shape(), &[1, 20, 3]);
        for r in 0..20 {
            for c in 0..3 {
                assert_eq!(cols.data()[r * 3 + c], x.data()[c * 20 + r]);
            }
        }
    }

    #[test]
    fn unfold_full_window_is_flattened_input() {
        let x = random(vec![1, 2, 3, 3], 2);
        let spec = ConvSpec::new(2, 1, (3, 3), 1, 0, 1).unwrap();
        let cols = unfold(&x, &spec).unwrap();
        assert_eq!(cols.shape(), &[1, 1, 18]);
        assert_eq!(cols.data(), x.data());
    }

    #[test]
    fn unfold_matches_naive_sliding_window() {
        let x = random(vec![1, 2, 4, 4], 3);
        let spec = ConvSpec::new(2, 1, (3, 3), 1, 1, 1).unwrap();
        let cols = unfold(&x, &spec).unwrap();
        let naive = naive_patches(&x, 3, 3, 1, 1);
        assert_eq!(cols.dim(1), naive.len());
        for (r, row) in naive.iter().enumerate() {
            assert_eq!(cols.row(0)[r * 18..(r + 1) * 18], row[..]);
        }
    }

    #[test]
    fn window_larger_than_input_is_rejected() {
        let x = random(vec![1, 1, 2, 2], 4);
        let spec = ConvSpec::new(1, 1, (3, 3), 1, 0, 1).unwrap();
        assert!(unfold(&x, &spec).is_err());
    }

    #[test]
    fn fold_of_unfold_1x1_is_identity() {
        let x = random(vec![2, 3, 4, 4], 5);
        let spec = ConvSpec::pointwise(3, 3, 1).unwrap();
        let back = fold(&unfold(&x, &spec).unwrap(), &spec, (4, 4)).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn identity_pointwise_conv() {
        let x = random(vec![2, 3, 4, 4], 6);
        let spec = ConvSpec::pointwise(3, 3, 1).unwrap();
        let w = Tensor::from_fn(vec![3, 3, 1, 1], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        assert_eq!(conv2d(&x, &w, &spec).unwrap(), x);
    }

    #[test]
    fn ones_kernel_on_ones_input() {
        let x = Tensor::full(vec![1, 1, 2, 2], 1.0);
        let w = Tensor::full(vec![1, 1, 2, 2], 1.0);
        let spec = ConvSpec::new(1, 1, (2, 2), 1, 0, 1).unwrap();
        let y = conv2d(&x, &w, &spec).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[4.0]);
    }

    #[test]
    fn grouped_conv_matches_unfold_matmul() {
        let spec = ConvSpec::new(4, 6, (3, 3), 2, 1, 2).unwrap();
        let x = random(vec![2, 4, 7, 7], 7);
        let w = random(vec![6, 2, 3, 3], 8);
        let y = conv2d(&x, &w, &spec).unwrap();
        let cols = unfold(&x, &spec).unwrap();
        let (l, k, gk) = (cols.dim(1), spec.patch_len(), spec.group_patch_len());
        for b in 0..2 {
            for g in 0..2 {
                let patches = Tensor::from_fn(vec![l, gk], |i| {
                    cols.data()[(b * l + i / gk) * k + g * gk + i % gk]
                });
                let wg = Tensor::from_fn(vec![gk, 3], |i| {
                    w.data()[(g * 3 + i % 3) * gk + i / 3]
                });
                let prod = matmul(&patches, &wg).unwrap();
                for li in 0..l {
                    for o in 0..3 {
                        let got = y.data()[(b * 6 + g * 3 + o) * l + li];
                        let exp = prod.data()[li * 3 + o];
                        assert!((got - exp).abs() <= 1e-12 * exp.abs().max(1e-12));
                    }
                }
            }
        }
    }

    #[test]
    fn group_mismatch_is_an_error() {
        assert!(ConvSpec::new(3, 32, (5, 5), 2, 2, 2).is_err());
        let spec = ConvSpec::new(4, 4, (1, 1), 1, 0, 2).unwrap();
        let x = random(vec![1, 4, 2, 2], 9);
        let bad = random(vec![4, 4, 1, 1], 9);
        assert!(conv2d(&x, &bad, &spec).is_err());
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let spec = ConvSpec::new(2, 4, (3, 3), 2, 1, 2).unwrap();
        let x = random(vec![1, 2, 5, 5], 10);
        let w = random(vec![4, 1, 3, 3], 11);
        let probe = random(vec![1, 4, 3, 3], 12);
        let objective = |x: &Tensor, w: &Tensor| conv2d(x, w, &spec).unwrap().dot(&probe).unwrap();
        let cols = unfold(&x, &spec).unwrap();
        let (gx, gw) = conv2d_backward(&cols, &w, &probe, &spec, (5, 5)).unwrap();
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (objective(&xp, &w) - objective(&xm, &w)) / (2.0 * h);
            assert!((fd - gx.data()[i]).abs() < 1e-7, "dx[{i}]");
        }
        for i in 0..w.len() {
            let mut wp = w.clone();
            wp.data_mut()[i] += h;
            let mut wm = w.clone();
            wm.data_mut()[i] -= h;
            let fd = (objective(&x, &wp) - objective(&x, &wm)) / (2.0 * h);
            assert!((fd - gw.data()[i]).abs() < 1e-7, "dw[{i}]");
        }
    }
}
