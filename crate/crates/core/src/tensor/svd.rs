//! Thin SVD: column-pivoted Householder QR, then one-sided (Hestenes) Jacobi
//! on the transposed triangular factor. Jacobi keeps the singular vectors
//! orthonormal to working precision, which the truncation-error accounting
//! depends on.

use super::linalg::{axpy, dot};
use super::Tensor;
use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;

/// Singular values at or below this fraction of the largest are treated as zero.
pub const RANK_TOLERANCE: f64 = 1e-12;

const MAX_SWEEPS: usize = 80;

#[derive(Debug, Clone)]
pub struct SvdResult<T = f64> {
    /// `p × r`, orthonormal columns.
    pub u: Tensor<T>,
    /// Non-increasing, non-negative.
    pub sigma: Vec<T>,
    /// `r × q`, orthonormal rows.
    pub vt: Tensor<T>,
    /// Sum of squared singular values not represented in `sigma`.
    pub discarded_energy: T,
}

impl<T: Scalar> SvdResult<T> {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    /// Number of singular values above the rank tolerance.
    pub fn numerical_rank(&self) -> usize {
        self.sigma.iter().filter(|&&s| s > T::zero()).count()
    }

    /// `u · diag(sigma) · vt`
    pub fn reconstruct(&self) -> Tensor<T> {
        self.u_sigma()
            .and_then(|us| super::matmul(&us, &self.vt))
            .expect("consistent svd factors")
    }

    /// `u · diag(sigma)`
    pub fn u_sigma(&self) -> Result<Tensor<T>> {
        let r = self.sigma.len();
        let mut d = self.u.data().to_vec();
        for row in d.chunks_mut(r) {
            for (x, &s) in row.iter_mut().zip(&self.sigma) {
                *x *= s;
            }
        }
        Tensor::new(self.u.shape().to_vec(), d)
    }

    /// `diag(sigma) · vt`
    pub fn sigma_vt(&self) -> Result<Tensor<T>> {
        let q = self.vt.cols();
        let mut d = self.vt.data().to_vec();
        for (row, &s) in d.chunks_mut(q).zip(&self.sigma) {
            for x in row {
                *x *= s;
            }
        }
        Tensor::new(self.vt.shape().to_vec(), d)
    }
}

/// Singular value decomposition of a matrix, optionally keeping only the
/// leading `max_rank` triplets.
///
/// The returned rank is `min(p, q, max_rank)` even when trailing singular
/// values are zero, so callers get deterministic shapes.
pub fn svd<T: Scalar>(m: &Tensor<T>, max_rank: Option<usize>) -> Result<SvdResult<T>> {
    if m.rank() != 2 {
        return shape_err(format!("svd needs a matrix, got shape {:?}", m.shape()));
    }
    if !m.is_finite() {
        return Err(Error::Numeric("svd input has non-finite entries".into()));
    }
    if max_rank == Some(0) {
        return shape_err("svd rank cap must be at least 1");
    }
    let (p, q) = (m.rows(), m.cols());

    // Work on a tall column-major matrix. A row-major p×q matrix read as
    // column-major is its q×p transpose.
    let wide = p < q;
    let (tall, rows, cols) = if wide {
        (m.data().to_vec(), q, p)
    } else {
        (m.transpose()?.into_data(), p, q)
    };
    let TallSvd {
        u: u_cols,
        sigma: mut sig,
        v: v_cols,
        zeroed_energy,
    } = tall_svd(tall, rows, cols);

    let n = sig.len();
    let r = max_rank.map_or(n, |c| c.min(n));

    let mut discarded = zeroed_energy;
    for &s in &sig[r..] {
        discarded += s * s;
    }
    sig.truncate(r);

    // tall = U Σ Vᵀ. For the wide case m = tallᵀ = V Σ Uᵀ.
    let (left, left_len, right, right_len) = if wide {
        (&v_cols, cols, &u_cols, rows)
    } else {
        (&u_cols, rows, &v_cols, cols)
    };
    let mut ud = vec![T::zero(); left_len * r];
    for j in 0..r {
        let col = &left[j * left_len..(j + 1) * left_len];
        for (i, &x) in col.iter().enumerate() {
            ud[i * r + j] = x;
        }
    }
    let vtd = right[..r * right_len].to_vec();

    Ok(SvdResult {
        u: Tensor::new(vec![left_len, r], ud)?,
        sigma: sig,
        vt: Tensor::new(vec![r, right_len], vtd)?,
        discarded_energy: discarded,
    })
}

struct TallSvd<T> {
    /// `rows × cols` column-major, orthonormal columns.
    u: Vec<T>,
    sigma: Vec<T>,
    /// `cols × cols` column-major.
    v: Vec<T>,
    /// Energy of singular values flushed to zero by the rank tolerance.
    zeroed_energy: T,
}

/// SVD of a `rows × cols` column-major matrix with `rows >= cols`.
fn tall_svd<T: Scalar>(mut a: Vec<T>, rows: usize, cols: usize) -> TallSvd<T> {
    debug_assert!(rows >= cols);
    let two = T::one() + T::one();

    // Householder QR with column pivoting, A P = Q R; reflector k acts on
    // entries k..rows.
    let mut perm: Vec<usize> = (0..cols).collect();
    let mut rem: Vec<T> = (0..cols).map(|j| col_sq(&a, rows, j)).collect();
    let mut rem_ref = rem.clone();
    let mut reflectors: Vec<Option<Vec<T>>> = Vec::with_capacity(cols);
    let mut r = vec![T::zero(); cols * cols];
    for k in 0..cols {
        let piv = (k..cols)
            .max_by(|&x, &y| rem[x].partial_cmp(&rem[y]).unwrap().then(y.cmp(&x)))
            .expect("k < cols");
        if piv != k {
            let (lo, hi) = a.split_at_mut(piv * rows);
            lo[k * rows..(k + 1) * rows].swap_with_slice(&mut hi[..rows]);
            perm.swap(k, piv);
            rem.swap(k, piv);
            rem_ref.swap(k, piv);
        }
        let (head, tail) = a.split_at_mut((k + 1) * rows);
        let x = &mut head[k * rows + k..];
        let norm = dot(x, x).sqrt();
        if norm == T::zero() {
            reflectors.push(None);
        } else {
            let alpha = if x[0] > T::zero() { -norm } else { norm };
            let mut v = x.to_vec();
            v[0] -= alpha;
            let vv = dot(&v, &v);
            for (off, col) in tail.chunks_mut(rows).enumerate() {
                let seg = &mut col[k..];
                let f = two * dot(&v, seg) / vv;
                axpy(-f, &v, seg);
                let j = k + 1 + off;
                rem[j] -= seg[0] * seg[0];
                if rem[j] <= T::from_f64_lossy(1e-6) * rem_ref[j] {
                    rem[j] = dot(&seg[1..], &seg[1..]);
                    rem_ref[j] = rem[j];
                }
            }
            x[0] = alpha;
            for xi in &mut x[1..] {
                *xi = T::zero();
            }
            reflectors.push(Some(v));
        }
        for i in 0..=k {
            r[k * cols + i] = a[k * rows + i];
        }
    }

    // Jacobi on Rᵀ of a pivoted QR converges in a few sweeps.
    // Rᵀ = X Σ Yᵀ gives R = Y Σ Xᵀ, so A = (Q Y) Σ (P X)ᵀ.
    let mut rt = vec![T::zero(); cols * cols];
    for j in 0..cols {
        for i in 0..cols {
            rt[i * cols + j] = r[j * cols + i];
        }
    }
    drop(r);
    let (x_cols, sigma, mut ur, zeroed_energy) = jacobi(rt, cols);
    let mut v = vec![T::zero(); cols * cols];
    for j in 0..cols {
        for i in 0..cols {
            v[j * cols + perm[i]] = x_cols[j * cols + i];
        }
    }

    let u = apply_q(&reflectors, rows, &ur);
    ur.clear();
    TallSvd {
        u,
        sigma,
        v,
        zeroed_energy,
    }
}

/// One-sided Jacobi on a square column-major matrix `b` (n × n).
/// Returns (U, sigma, V, flushed energy) with columns sorted by decreasing sigma.
#[allow(clippy::type_complexity)]
fn jacobi<T: Scalar>(mut b: Vec<T>, n: usize) -> (Vec<T>, Vec<T>, Vec<T>, T) {
    let mut v = vec![T::zero(); n * n];
    for i in 0..n {
        v[i * n + i] = T::one();
    }
    let tol = T::epsilon() * T::from_usize_lossy(n.max(1)).sqrt();
    let mut norms: Vec<T> = (0..n).map(|j| col_sq(&b, n, j)).collect();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..n {
            for j in i + 1..n {
                let alpha = norms[i];
                let beta = norms[j];
                if alpha == T::zero() || beta == T::zero() {
                    continue;
                }
                let gamma = dot(&b[i * n..(i + 1) * n], &b[j * n..(j + 1) * n]);
                if gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (gamma + gamma);
                let t = zeta.signum() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                rotate(&mut b, n, i, j, c, s);
                rotate(&mut v, n, i, j, c, s);
                norms[i] = alpha - t * gamma;
                norms[j] = beta + t * gamma;
            }
        }
        // refresh cached norms to stop drift
        for (j, nj) in norms.iter_mut().enumerate() {
            *nj = col_sq(&b, n, j);
        }
        if !rotated {
            break;
        }
    }

    let mut sig: Vec<T> = norms.iter().map(|x| x.sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| sig[y].partial_cmp(&sig[x]).unwrap().then(x.cmp(&y)));

    let smax = order.first().map_or(T::zero(), |&k| sig[k]);
    let thresh = smax * T::from_f64_lossy(RANK_TOLERANCE).max(T::epsilon() * T::from_usize_lossy(n));

    let mut u_out = vec![T::zero(); n * n];
    let mut v_out = vec![T::zero(); n * n];
    let mut sig_out = Vec::with_capacity(n);
    let mut pending = Vec::new();
    let mut zeroed = T::zero();
    for (dst, &src) in order.iter().enumerate() {
        v_out[dst * n..(dst + 1) * n].copy_from_slice(&v[src * n..(src + 1) * n]);
        let s = sig[src];
        if s > thresh && s > T::zero() {
            let inv = T::one() / s;
            for (o, &x) in u_out[dst * n..(dst + 1) * n].iter_mut().zip(&b[src * n..(src + 1) * n]) {
                *o = x * inv;
            }
            sig_out.push(s);
        } else {
            zeroed += s * s;
            sig_out.push(T::zero());
            pending.push(dst);
        }
    }
    sig.clear();
    complete_basis(&mut u_out, n, &pending);
    (u_out, sig_out, v_out, zeroed)
}

/// `Q · [E; 0]` with `Q = H_0 ⋯ H_{n-1}` applied in compact WY form
/// `Q = I - V S Vᵀ`, so the heavy lifting is two matrix products.
/// `e` is `n × n` column-major; the result is `rows × n` column-major.
fn apply_q<T: Scalar>(refl: &[Option<Vec<T>>], rows: usize, e: &[T]) -> Vec<T> {
    let n = refl.len();
    let two = T::one() + T::one();
    let tau: Vec<T> = refl
        .iter()
        .map(|r| r.as_ref().map_or(T::zero(), |v| two / dot(v, v)))
        .collect();

    let mut s = vec![T::zero(); n * n];
    let mut g = vec![T::zero(); n];
    for k in 0..n {
        let Some(vk) = &refl[k] else { continue };
        for (i, gi) in g[..k].iter_mut().enumerate() {
            *gi = refl[i].as_ref().map_or(T::zero(), |vi| dot(&vi[k - i..], vk));
        }
        for i in 0..k {
            let row = &s[i * n..i * n + k];
            let acc = dot(&row[i..], &g[i..k]);
            s[i * n + k] = -tau[k] * acc;
        }
        s[k * n + k] = tau[k];
    }

    let mut vmat = vec![T::zero(); rows * n];
    for (k, r) in refl.iter().enumerate() {
        if let Some(vk) = r {
            for (off, &x) in vk.iter().enumerate() {
                vmat[(k + off) * n + k] = x;
            }
        }
    }
    let mut e_rm = vec![T::zero(); n * n];
    for j in 0..n {
        for i in 0..n {
            e_rm[i * n + j] = e[j * n + i];
        }
    }
    let product = || -> Result<Tensor<T>> {
        let v = Tensor::new(vec![rows, n], vmat.clone())?;
        let v_top = Tensor::new(vec![n, n], vmat[..n * n].to_vec())?;
        let w = super::matmul(&v_top.transpose()?, &Tensor::new(vec![n, n], e_rm.clone())?)?;
        let z = super::matmul(&Tensor::new(vec![n, n], s.clone())?, &w)?;
        super::matmul(&v, &z)
    };
    let vz = product().expect("consistent WY shapes");
    let mut u = vz.into_data();
    for x in &mut u {
        *x = -*x;
    }
    for (x, &y) in u[..n * n].iter_mut().zip(&e_rm) {
        *x += y;
    }
    Tensor::new(vec![rows, n], u)
        .and_then(|t| t.transpose())
        .expect("consistent WY shapes")
        .into_data()
}

fn col_sq<T: Scalar>(m: &[T], n: usize, j: usize) -> T {
    let c = &m[j * n..(j + 1) * n];
    dot(c, c)
}

fn rotate<T: Scalar>(m: &mut [T], n: usize, i: usize, j: usize, c: T, s: T) {
    let (lo, hi) = m.split_at_mut(j * n);
    let ci = &mut lo[i * n..(i + 1) * n];
    let cj = &mut hi[..n];
    for (x, y) in ci.iter_mut().zip(cj.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Fills the listed columns of the column-major `n × n` matrix `u` with unit
/// vectors orthogonal to every other column.
fn complete_basis<T: Scalar>(u: &mut [T], n: usize, pending: &[usize]) {
    if pending.is_empty() {
        return;
    }
    let mut filled: Vec<usize> = (0..n).filter(|j| !pending.contains(j)).collect();
    let accept = T::from_f64_lossy(0.1);
    let mut start = 0usize;
    for &dst in pending {
        let mut best: Option<(T, Vec<T>)> = None;
        for step in 0..n {
            let t = (start + step) % n;
            let mut cand = vec![T::zero(); n];
            cand[t] = T::one();
            for _ in 0..2 {
                for &k in &filled {
                    let col = &u[k * n..(k + 1) * n];
                    let f = dot(col, &cand);
                    axpy(-f, col, &mut cand);
                }
            }
            let norm = dot(&cand, &cand).sqrt();
            let good = norm > accept;
            if best.as_ref().is_none_or(|(bn, _)| norm > *bn) {
                best = Some((norm, cand));
            }
            if good {
                start = t + 1;
                break;
            }
        }
        let (norm, cand) = best.expect("n >= 1");
        let inv = T::one() / norm;
        for (o, x) in u[dst * n..(dst + 1) * n].iter_mut().zip(cand) {
            *o = x * inv;
        }
        filled.push(dst);
    }
}
