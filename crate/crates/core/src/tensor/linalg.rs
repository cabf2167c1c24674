use super::Tensor;
use crate::error::{shape_err, Result};
use crate::scalar::Scalar;

/// Row-major matrix product.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 {
        return shape_err("matmul needs two matrices");
    }
    let (n, k) = (a.rows(), a.cols());
    let (k2, m) = (b.rows(), b.cols());
    if k != k2 {
        return shape_err(format!("matmul inner extents {k} vs {k2}"));
    }
    let mut out = vec![T::zero(); n * m];
    let (ad, bd) = (a.data(), b.data());
    // Four output rows share each streamed row of `b`.
    let mut blocks = out.chunks_exact_mut(4 * m);
    let mut i = 0;
    for block in &mut blocks {
        let (r0, rest) = block.split_at_mut(m);
        let (r1, rest) = rest.split_at_mut(m);
        let (r2, r3) = rest.split_at_mut(m);
        for p in 0..k {
            let c0 = ad[i * k + p];
            let c1 = ad[(i + 1) * k + p];
            let c2 = ad[(i + 2) * k + p];
            let c3 = ad[(i + 3) * k + p];
            let brow = &bd[p * m..(p + 1) * m];
            for ((((&bv, o0), o1), o2), o3) in brow
                .iter()
                .zip(r0.iter_mut())
                .zip(r1.iter_mut())
                .zip(r2.iter_mut())
                .zip(r3.iter_mut())
            {
                *o0 += c0 * bv;
                *o1 += c1 * bv;
                *o2 += c2 * bv;
                *o3 += c3 * bv;
            }
        }
        i += 4;
    }
    for orow in blocks.into_remainder().chunks_exact_mut(m) {
        for (p, &aip) in ad[i * k..(i + 1) * k].iter().enumerate() {
            if aip != T::zero() {
                axpy(aip, &bd[p * m..(p + 1) * m], orow);
            }
        }
        i += 1;
    }
    Tensor::new(vec![n, m], out)
}

/// `y += alpha * x`
#[inline]
pub(crate) fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Dot product with eight independent accumulators so the loop vectorizes.
#[inline]
pub(crate) fn dot<T: Scalar>(x: &[T], y: &[T]) -> T {
    let n = x.len().min(y.len());
    let (x, y) = (&x[..n], &y[..n]);
    let mut acc = [T::zero(); 8];
    let xc = x.chunks_exact(8);
    let yc = y.chunks_exact(8);
    let (xr, yr) = (xc.remainder(), yc.remainder());
    for (a, b) in xc.zip(yc) {
        for k in 0..8 {
            acc[k] += a[k] * b[k];
        }
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for (&a, &b) in xr.iter().zip(yr) {
        s += a * b;
    }
    s
}
