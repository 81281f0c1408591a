use super::{Real, Tensor};
use crate::error::{Error, Result};

/// `a[M×K] · b[K×N]`.
///
/// Each output element accumulates its K products strictly in index order,
/// so the result is bit-identical across runs of the same build.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::shape(format!(
            "matmul expects matrices, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k) = (a.dim(0), a.dim(1));
    let (k2, n) = (b.dim(0), b.dim(1));
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul inner dimensions differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![T::zero(); m * n];
    matmul_slices(a.data(), b.data(), m, k, n, &mut out);
    Ok(Tensor::from_parts_unchecked(vec![m, n], out))
}

/// Raw kernel behind [`matmul`]; adds `a·b` into `out`.
///
/// Loop order i-k-j keeps the inner loop contiguous while preserving the
/// left-to-right accumulation over k for every `out[i][j]`.
pub fn matmul_slices<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &aik) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
}

pub fn transpose<T: Real>(a: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 {
        return Err(Error::shape(format!("transpose of {:?}", a.shape())));
    }
    let (m, n) = (a.dim(0), a.dim(1));
    let src = a.data();
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = src[i * n + j];
        }
    }
    Ok(Tensor::from_parts_unchecked(vec![n, m], out))
}
