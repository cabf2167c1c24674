//! Routed feed-forward experts shared by the MPO-backed and dense banks:
//! `E_i(x) = ReLU(x·W1_i + b1_i)·W2_i + b2_i`, `y = Σ_i G(x)_i · E_i(x)`.

use crate::error::{shape_err, Result};
use crate::gating::{gate_backward, GateConfig, GateDecision, GateGrad};
use crate::scalar::Scalar;
use crate::tensor::{matmul, Tensor};

pub(crate) struct ExpertView<'a, T> {
    pub w1: &'a Tensor<T>,
    pub b1: &'a [T],
    pub w2: &'a Tensor<T>,
    pub b2: &'a [T],
}

pub(crate) struct MoeGrads<T> {
    /// `None` for experts no row was routed to.
    pub dw1: Vec<Option<Tensor<T>>>,
    pub dw2: Vec<Option<Tensor<T>>>,
    pub db1: Vec<Vec<T>>,
    pub db2: Vec<Vec<T>>,
    pub d_gate: Tensor<T>,
    pub d_noise: Option<Tensor<T>>,
    pub dx: Tensor<T>,
}

/// Rows routed to each expert, with their gate weights, in row order.
fn assignments<T: Scalar>(decisions: &[GateDecision<T>], n: usize) -> Vec<Vec<(usize, T)>> {
    let mut out = vec![Vec::new(); n];
    for (r, d) in decisions.iter().enumerate() {
        for &i in &d.output.selected {
            out[i].push((r, d.output.weights[i]));
        }
    }
    out
}

fn gather<T: Scalar>(x: &Tensor<T>, rows: &[(usize, T)]) -> Result<Tensor<T>> {
    let d = x.cols();
    let mut data = Vec::with_capacity(rows.len() * d);
    for &(r, _) in rows {
        data.extend_from_slice(x.row(r));
    }
    Tensor::new(vec![rows.len(), d], data)
}

fn add_bias<T: Scalar>(m: &mut Tensor<T>, b: &[T]) {
    let c = m.cols();
    for row in m.data_mut().chunks_mut(c) {
        for (x, &bv) in row.iter_mut().zip(b) {
            *x += bv;
        }
    }
}

struct ExpertPass<T> {
    input: Tensor<T>,
    pre: Tensor<T>,
    hidden: Tensor<T>,
    out: Tensor<T>,
}

fn expert_pass<T: Scalar>(x: &Tensor<T>, rows: &[(usize, T)], e: &ExpertView<'_, T>) -> Result<ExpertPass<T>> {
    let input = gather(x, rows)?;
    let mut pre = matmul(&input, e.w1)?;
    add_bias(&mut pre, e.b1);
    let hidden = pre.map(|v| v.max(T::zero()));
    let mut out = matmul(&hidden, e.w2)?;
    add_bias(&mut out, e.b2);
    Ok(ExpertPass {
        input,
        pre,
        hidden,
        out,
    })
}

fn check<T: Scalar>(x: &Tensor<T>, experts: &[ExpertView<'_, T>], decisions: &[GateDecision<T>]) -> Result<()> {
    if x.rank() != 2 {
        return shape_err(format!("input must be batch × d_model, got {:?}", x.shape()));
    }
    if decisions.len() != x.rows() {
        return shape_err(format!("{} routing decisions for {} rows", decisions.len(), x.rows()));
    }
    if let Some(e) = experts.first() {
        if e.w1.rows() != x.cols() {
            return shape_err(format!("input width {} vs expert width {}", x.cols(), e.w1.rows()));
        }
    }
    Ok(())
}

pub(crate) fn moe_forward<T: Scalar>(
    x: &Tensor<T>,
    experts: &[ExpertView<'_, T>],
    decisions: &[GateDecision<T>],
) -> Result<Tensor<T>> {
    check(x, experts, decisions)?;
    let d_out = experts.first().map_or(x.cols(), |e| e.w2.cols());
    let mut y = Tensor::zeros(&[x.rows(), d_out]);
    for (rows, e) in assignments(decisions, experts.len()).iter().zip(experts) {
        if rows.is_empty() {
            continue;
        }
        let pass = expert_pass(x, rows, e)?;
        let yd = y.data_mut();
        for (k, &(r, g)) in rows.iter().enumerate() {
            for (o, &v) in yd[r * d_out..(r + 1) * d_out].iter_mut().zip(pass.out.row(k)) {
                *o += g * v;
            }
        }
    }
    Ok(y)
}

pub(crate) fn moe_backward<T: Scalar>(
    x: &Tensor<T>,
    grad_y: &Tensor<T>,
    experts: &[ExpertView<'_, T>],
    gate: &GateConfig<T>,
    decisions: &[GateDecision<T>],
) -> Result<MoeGrads<T>> {
    check(x, experts, decisions)?;
    let n = experts.len();
    let (batch, d_model) = (x.rows(), x.cols());
    if grad_y.shape() != [batch, d_model] {
        return shape_err(format!("grad_y shape {:?}", grad_y.shape()));
    }
    let mut dx = Tensor::zeros(&[batch, d_model]);
    let mut d_weights = vec![vec![T::zero(); n]; batch];
    let mut grads = MoeGrads {
        dw1: vec![None; n],
        dw2: vec![None; n],
        db1: Vec::with_capacity(n),
        db2: Vec::with_capacity(n),
        d_gate: Tensor::zeros(gate.gate_weights().shape()),
        d_noise: gate.noise_weights().map(|w| Tensor::zeros(w.shape())),
        dx: Tensor::zeros(&[1]),
    };

    for (i, (rows, e)) in assignments(decisions, n).iter().zip(experts).enumerate() {
        let d_ff = e.w1.cols();
        if rows.is_empty() {
            grads.db1.push(vec![T::zero(); d_ff]);
            grads.db2.push(vec![T::zero(); d_model]);
            continue;
        }
        let pass = expert_pass(x, rows, e)?;
        let mut d_out = Vec::with_capacity(rows.len() * d_model);
        for (k, &(r, g)) in rows.iter().enumerate() {
            let gy = grad_y.row(r);
            d_weights[r][i] = gy.iter().zip(pass.out.row(k)).map(|(&a, &b)| a * b).sum();
            d_out.extend(gy.iter().map(|&v| g * v));
        }
        let d_out = Tensor::new(vec![rows.len(), d_model], d_out)?;

        grads.dw2[i] = Some(matmul(&pass.hidden.transpose()?, &d_out)?);
        grads.db2.push(column_sums(&d_out));
        let dh = matmul(&d_out, &e.w2.transpose()?)?;
        let mut dpre = dh;
        for (g, &p) in dpre.data_mut().iter_mut().zip(pass.pre.data()) {
            if p <= T::zero() {
                *g = T::zero();
            }
        }
        grads.dw1[i] = Some(matmul(&pass.input.transpose()?, &dpre)?);
        grads.db1.push(column_sums(&dpre));
        let dxi = matmul(&dpre, &e.w1.transpose()?)?;
        let dxd = dx.data_mut();
        for (k, &(r, _)) in rows.iter().enumerate() {
            for (o, &v) in dxd[r * d_model..(r + 1) * d_model].iter_mut().zip(dxi.row(k)) {
                *o += v;
            }
        }
    }

    for (r, dec) in decisions.iter().enumerate() {
        let dxd = dx.data_mut();
        gate_backward(
            gate,
            gate.kind(),
            x.row(r),
            dec,
            &d_weights[r],
            GateGrad {
                d_gate: &mut grads.d_gate,
                d_noise: grads.d_noise.as_mut(),
                dx: &mut dxd[r * d_model..(r + 1) * d_model],
            },
        );
    }
    grads.dx = dx;
    Ok(grads)
}

fn column_sums<T: Scalar>(m: &Tensor<T>) -> Vec<T> {
    let mut out = vec![T::zero(); m.cols()];
    for row in m.data().chunks(m.cols()) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

/// `E(x)` for every row of `x`, ignoring any gate.
pub(crate) fn expert_apply<T: Scalar>(x: &Tensor<T>, e: &ExpertView<'_, T>) -> Result<Tensor<T>> {
    if x.rank() != 2 || x.cols() != e.w1.rows() {
        return shape_err(format!("input shape {:?} vs expert width {}", x.shape(), e.w1.rows()));
    }
    let rows: Vec<(usize, T)> = (0..x.rows()).map(|r| (r, T::one())).collect();
    Ok(expert_pass(x, &rows, e)?.out)
}
