//! Matrix product operator (tensor-train) factorization of matrices.
//!
//! A matrix `W` of shape `I × J` with `I = ∏ i_k`, `J = ∏ j_k` is written as a
//! chain of 4-order local tensors `T_k[d_{k-1}, i_k, j_k, d_k]` contracted
//! over the bond indices `d_k` (with `d_0 = d_m = 1`).
//!
//! Index convention: the row index of `W` is `(i_1 .. i_m)` and the column
//! index `(j_1 .. j_m)`, both row-major. Before factoring, `W` is reshaped to
//! `[i_1 .. i_m, j_1 .. j_m]` and permuted to the interleaved order
//! `(i_1, j_1, i_2, j_2, ..)`, so step `k` of the sweep peels off one
//! `(i_k, j_k)` pair with the previous bond as the slowest row index.
//! [`reconstruct`] undoes exactly this.

mod plan;

pub use plan::{bond_dimensions, plan_factorization, FactorizationPlan};

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{matmul, svd, Tensor};

/// Ordered local tensors of one MPO factorization.
#[derive(Debug, Clone, PartialEq)]
pub struct MpoFactors<T = f64> {
    locals: Vec<Tensor<T>>,
    bond_dims: Vec<usize>,
    central_index: usize,
    truncation_eps: Vec<T>,
}

/// Index of the central tensor: the middle one for odd `m`, right of the
/// middle for even `m`.
pub fn central_index(m: usize) -> usize {
    m / 2
}

impl<T: Scalar> MpoFactors<T> {
    /// Assembles factors from local tensors, checking the bond interfaces.
    /// Truncation errors are recorded as zero.
    pub fn from_locals(locals: Vec<Tensor<T>>) -> Result<Self> {
        if locals.is_empty() {
            return shape_err("an MPO needs at least one local tensor");
        }
        for (k, t) in locals.iter().enumerate() {
            if t.rank() != 4 {
                return shape_err(format!("local {k} has shape {:?}, not 4-order", t.shape()));
            }
        }
        let m = locals.len();
        if locals[0].shape()[0] != 1 || locals[m - 1].shape()[3] != 1 {
            return shape_err("boundary bonds must have extent 1");
        }
        let mut bond_dims = vec![1];
        for k in 0..m - 1 {
            let (l, r) = (locals[k].shape()[3], locals[k + 1].shape()[0]);
            if l != r {
                return shape_err(format!("bond {} mismatch: {l} vs {r}", k + 1));
            }
            bond_dims.push(l);
        }
        bond_dims.push(1);
        Ok(Self {
            locals,
            bond_dims,
            central_index: central_index(m),
            truncation_eps: vec![T::zero(); m - 1],
        })
    }

    pub fn m(&self) -> usize {
        self.locals.len()
    }

    pub fn locals(&self) -> &[Tensor<T>] {
        &self.locals
    }

    pub fn into_locals(self) -> Vec<Tensor<T>> {
        self.locals
    }

    /// `d_0 .. d_m`, including the unit boundary bonds.
    pub fn bond_dims(&self) -> &[usize] {
        &self.bond_dims
    }

    pub fn central_index(&self) -> usize {
        self.central_index
    }

    pub fn central(&self) -> &Tensor<T> {
        &self.locals[self.central_index]
    }

    pub fn truncation_eps(&self) -> &[T] {
        &self.truncation_eps
    }

    pub fn row_factors(&self) -> Vec<usize> {
        self.locals.iter().map(|t| t.shape()[1]).collect()
    }

    pub fn col_factors(&self) -> Vec<usize> {
        self.locals.iter().map(|t| t.shape()[2]).collect()
    }

    pub fn rows(&self) -> usize {
        self.row_factors().iter().product()
    }

    pub fn cols(&self) -> usize {
        self.col_factors().iter().product()
    }

    pub fn plan(&self) -> FactorizationPlan {
        FactorizationPlan::new(self.row_factors(), self.col_factors())
            .expect("factors of a valid MPO form a valid plan")
    }

    pub fn reconstruct(&self) -> Result<Tensor<T>> {
        reconstruct(self)
    }

    pub fn count_params(&self) -> ParamCount {
        count_params(self)
    }

    /// Frobenius-norm bound on the reconstruction error.
    pub fn truncation_bound(&self) -> T {
        truncation_bound(&self.truncation_eps)
    }
}

/// Axis order taking `[i_1..i_m, j_1..j_m]` to `(i_1, j_1, .., i_m, j_m)`.
fn interleave_axes(m: usize) -> Vec<usize> {
    (0..m).flat_map(|k| [k, m + k]).collect()
}

/// Inverse of [`interleave_axes`].
fn deinterleave_axes(m: usize) -> Vec<usize> {
    (0..m).map(|k| 2 * k).chain((0..m).map(|k| 2 * k + 1)).collect()
}

/// Reorders an `I × J` matrix into the interleaved `(i_1, j_1, ..)` flat layout.
fn to_interleaved<T: Scalar>(w: &Tensor<T>, rows: &[usize], cols: &[usize]) -> Result<Tensor<T>> {
    let full: Vec<usize> = rows.iter().chain(cols).copied().collect();
    w.reshape(&full)?.permute(&interleave_axes(rows.len()))
}

fn from_interleaved<T: Scalar>(t: Tensor<T>, rows: &[usize], cols: &[usize]) -> Result<Tensor<T>> {
    let m = rows.len();
    let inter: Vec<usize> = (0..m).flat_map(|k| [rows[k], cols[k]]).collect();
    let i: usize = rows.iter().product();
    let j: usize = cols.iter().product();
    t.into_reshape(&inter)?
        .permute(&deinterleave_axes(m))?
        .into_reshape(&[i, j])
}

/// Sequential truncated-SVD sweep producing the local tensors.
pub fn decompose<T: Scalar>(w: &Tensor<T>, plan: &FactorizationPlan) -> Result<MpoFactors<T>> {
    plan.validate()?;
    if w.rank() != 2 || w.rows() != plan.rows() || w.cols() != plan.cols() {
        return shape_err(format!(
            "matrix shape {:?} does not match plan {}x{}",
            w.shape(),
            plan.rows(),
            plan.cols()
        ));
    }
    if !w.is_finite() {
        return Err(Error::Numeric("matrix has non-finite entries".into()));
    }
    let m = plan.m();
    let (ri, cj) = (plan.row_factors(), plan.col_factors());
    let bonds = plan.effective_bonds();

    let mut work = to_interleaved(w, ri, cj)?;
    let mut d_prev = 1usize;
    let mut locals = Vec::with_capacity(m);
    let mut eps = Vec::with_capacity(m.saturating_sub(1));
    for k in 0..m - 1 {
        let rows = d_prev * ri[k] * cj[k];
        let cols = work.len() / rows;
        let mat = work.into_reshape(&[rows, cols])?;
        let cap = bonds[k].min(rows).min(cols);
        let s = svd(&mat, Some(cap))?;
        locals.push(s.u.reshape(&[d_prev, ri[k], cj[k], cap])?);
        eps.push(s.discarded_energy.max(T::zero()).sqrt());
        work = s.sigma_vt()?;
        d_prev = cap;
    }
    locals.push(work.into_reshape(&[d_prev, ri[m - 1], cj[m - 1], 1])?);

    let mut f = MpoFactors::from_locals(locals)?;
    f.truncation_eps = eps;
    Ok(f)
}

/// Left-to-right contraction of the chain back to an `I × J` matrix.
pub fn reconstruct<T: Scalar>(f: &MpoFactors<T>) -> Result<Tensor<T>> {
    let first = &f.locals[0];
    let s = first.shape();
    let mut acc = first.reshape(&[s[0] * s[1] * s[2], s[3]])?;
    for t in &f.locals[1..] {
        let ts = t.shape();
        if acc.cols() != ts[0] {
            return shape_err(format!("bond mismatch: {} vs {}", acc.cols(), ts[0]));
        }
        let p = acc.rows();
        let step = matmul(&acc, &t.reshape(&[ts[0], ts[1] * ts[2] * ts[3]])?)?;
        acc = step.into_reshape(&[p * ts[1] * ts[2], ts[3]])?;
    }
    from_interleaved(acc, &f.row_factors(), &f.col_factors())
}

/// `sqrt(Σ ε_k²)`: upper bound on `||W - reconstruct(decompose(W))||_F`.
pub fn truncation_bound<T: Scalar>(eps: &[T]) -> T {
    eps.iter().map(|&e| e * e).sum::<T>().sqrt()
}

/// Post-processing applied to decomposed factors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    #[default]
    None,
    /// Rescale every local tensor to the geometric mean of their norms.
    Balance,
}

impl std::str::FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "balance" => Ok(Self::Balance),
            _ => Err(Error::Config(format!("unknown normalization {s:?}"))),
        }
    }
}

pub fn normalize<T: Scalar>(f: &MpoFactors<T>, mode: Normalization) -> Result<MpoFactors<T>> {
    match mode {
        Normalization::None => Ok(f.clone()),
        Normalization::Balance => {
            let norms: Vec<T> = f.locals.iter().map(Tensor::frobenius_norm).collect();
            if let Some(k) = norms.iter().position(|&n| n == T::zero() || !n.is_finite()) {
                return Err(Error::DegenerateScale(format!(
                    "local tensor {k} has norm {}",
                    norms[k]
                )));
            }
            let mean_log = norms.iter().map(|n| n.ln()).sum::<T>() / T::from_usize_lossy(norms.len());
            let target = mean_log.exp();
            let mut out = f.clone();
            for (t, &n) in out.locals.iter_mut().zip(&norms) {
                *t = t.scale(target / n);
            }
            Ok(out)
        }
    }
}

/// Parameter split between the central tensor and the auxiliary tensors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamCount {
    pub central: usize,
    pub auxiliary: usize,
    /// `central / auxiliary`; `+inf` when there are no auxiliary tensors.
    pub gamma: f64,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.central + self.auxiliary
    }
}

pub fn count_params<T: Scalar>(f: &MpoFactors<T>) -> ParamCount {
    let central = f.central().len();
    let auxiliary: usize = f
        .locals
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != f.central_index)
        .map(|(_, t)| t.len())
        .sum();
    let gamma = if auxiliary == 0 {
        f64::INFINITY
    } else {
        central as f64 / auxiliary as f64
    };
    ParamCount {
        central,
        auxiliary,
        gamma,
    }
}

/// Element counts of the local tensors of an untruncated decomposition
/// under `plan`, without performing it.
pub fn planned_local_sizes(plan: &FactorizationPlan) -> Vec<usize> {
    let mut bonds = vec![1];
    bonds.extend(plan.effective_bonds());
    bonds.push(1);
    (0..plan.m())
        .map(|k| bonds[k] * plan.row_factors()[k] * plan.col_factors()[k] * bonds[k + 1])
        .collect()
}

/// [`count_params`] for the decomposition `plan` would produce.
pub fn planned_param_count(plan: &FactorizationPlan) -> ParamCount {
    let sizes = planned_local_sizes(plan);
    let c = central_index(plan.m());
    let central = sizes[c];
    let auxiliary: usize = sizes.iter().sum::<usize>() - central;
    ParamCount {
        central,
        auxiliary,
        gamma: if auxiliary == 0 {
            f64::INFINITY
        } else {
            central as f64 / auxiliary as f64
        },
    }
}

/// Gradients of a scalar loss with respect to each local tensor, given the
/// gradient `grad_w` with respect to the reconstructed matrix.
///
/// `W` is multilinear in the local tensors, so the gradient for `T_k` is
/// `grad_w` contracted with every other local tensor. Entries of `wanted`
/// that are `false` are skipped and returned as `None`.
pub fn local_gradients<T: Scalar>(
    f: &MpoFactors<T>,
    grad_w: &Tensor<T>,
    wanted: &[bool],
) -> Result<Vec<Option<Tensor<T>>>> {
    let m = f.m();
    if wanted.len() != m {
        return shape_err(format!("wanted mask has {} entries for {m} locals", wanted.len()));
    }
    if grad_w.shape() != [f.rows(), f.cols()] {
        return shape_err(format!(
            "gradient shape {:?} does not match {}x{}",
            grad_w.shape(),
            f.rows(),
            f.cols()
        ));
    }
    let (ri, cj) = (f.row_factors(), f.col_factors());
    let g = to_interleaved(grad_w, &ri, &cj)?.into_data();

    // left[k]: contraction of T_0..T_{k-1}, shape [P_k, d_k]
    let mut left = Vec::with_capacity(m);
    left.push(Tensor::<T>::identity(1));
    for k in 0..m - 1 {
        let t = &f.locals[k];
        let ts = t.shape();
        let prev: &Tensor<T> = &left[k];
        let p = prev.rows();
        let next = matmul(prev, &t.reshape(&[ts[0], ts[1] * ts[2] * ts[3]])?)?
            .into_reshape(&[p * ts[1] * ts[2], ts[3]])?;
        left.push(next);
    }
    // right[k]: contraction of T_{k+1}..T_{m-1}, shape [d_{k+1}, S_k]
    let mut right = vec![Tensor::<T>::identity(1); m];
    for k in (0..m - 1).rev() {
        let t = &f.locals[k + 1];
        let ts = t.shape();
        let next = &right[k + 1];
        let s = next.cols();
        right[k] = matmul(&t.reshape(&[ts[0] * ts[1] * ts[2], ts[3]])?, next)?
            .into_reshape(&[ts[0], ts[1] * ts[2] * s])?;
    }

    let mut out = Vec::with_capacity(m);
    for k in 0..m {
        if !wanted[k] {
            out.push(None);
            continue;
        }
        let ts = f.locals[k].shape().to_vec();
        let (l, r) = (&left[k], &right[k]);
        let (p, s) = (l.rows(), r.cols());
        let ij = ts[1] * ts[2];
        let gk = Tensor::new(vec![p, ij * s], g.clone())?;
        let x = matmul(&l.transpose()?, &gk)?.into_reshape(&[ts[0] * ij, s])?;
        let dk = matmul(&x, &r.transpose()?)?.into_reshape(&ts)?;
        out.push(Some(dk));
    }
    Ok(out)
}
