//! Mixture-of-experts layers: the MPO-backed bank whose experts share one
//! central tensor per weight slot, and a dense baseline with the same
//! routing and expert architecture.

mod accounting;
mod dense;
mod ffn;
pub mod gradcheck;
mod mpoe;

pub use accounting::{bank_param_counts, efficiency_ratio, BankParamCounts, ExpertPlacement, ModelScaleAccounting};
pub use dense::{DenseGradients, DenseMoeBank};
pub use mpoe::{BankGradients, MpoeExpertBank, SlotBank};

use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gating::{GateConfig, GateDecision};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use ffn::ExpertView;

/// The two weight matrices of a feed-forward expert.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Slot {
    /// `d_model × d_ff`
    W1,
    /// `d_ff × d_model`
    W2,
}

impl Slot {
    pub const ALL: [Slot; 2] = [Slot::W1, Slot::W2];

    pub fn index(self) -> usize {
        match self {
            Slot::W1 => 0,
            Slot::W2 => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Slot::W1 => "w1",
            Slot::W2 => "w2",
        }
    }
}

/// Per-row routing record from a forward pass, consumed by `backward`.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingTrace<T = f64> {
    pub decisions: Vec<GateDecision<T>>,
    fingerprint: u64,
}

impl<T: Scalar> RoutingTrace<T> {
    pub fn rows(&self) -> usize {
        self.decisions.len()
    }

    pub fn selected(&self, row: usize) -> &[usize] {
        &self.decisions[row].output.selected
    }

    pub fn weights(&self, row: usize) -> &[T] {
        &self.decisions[row].output.weights
    }

    /// How many rows each expert received.
    pub fn expert_loads(&self, n_experts: usize) -> Vec<usize> {
        let mut loads = vec![0; n_experts];
        for d in &self.decisions {
            for &i in &d.output.selected {
                loads[i] += 1;
            }
        }
        loads
    }

    pub(crate) fn check(&self, x: &Tensor<T>, fingerprint: u64) -> Result<()> {
        if x.rows() != self.rows() {
            return Err(Error::Contract(format!(
                "trace covers {} rows, input has {}",
                self.rows(),
                x.rows()
            )));
        }
        if fingerprint != self.fingerprint {
            return Err(Error::Contract(
                "parameters changed since the forward pass that produced this trace".into(),
            ));
        }
        Ok(())
    }
}

pub(crate) fn hash_tensor<T: Scalar>(h: &mut DefaultHasher, t: &Tensor<T>) {
    for &d in t.shape() {
        h.write_usize(d);
    }
    for &v in t.data() {
        h.write_u64(v.to_f64_lossy().to_bits());
    }
}

pub(crate) fn hash_slice<T: Scalar>(h: &mut DefaultHasher, v: &[T]) {
    for &x in v {
        h.write_u64(x.to_f64_lossy().to_bits());
    }
}

pub(crate) fn hash_gate<T: Scalar>(h: &mut DefaultHasher, g: &GateConfig<T>) {
    hash_tensor(h, g.gate_weights());
    if let Some(w) = g.noise_weights() {
        hash_tensor(h, w);
    }
}

/// Shared interface of the expert banks.
pub trait MoeBank<T: Scalar> {
    fn n_experts(&self) -> usize;
    fn d_model(&self) -> usize;
    fn d_ff(&self) -> usize;
    fn gate(&self) -> &GateConfig<T>;
    fn expert_weight(&self, slot: Slot, expert: usize) -> Result<Tensor<T>>;
    fn bias(&self, slot: Slot, expert: usize) -> &[T];
    /// Hash of every parameter, used to detect stale routing traces.
    fn fingerprint(&self) -> u64;
    fn param_counts(&self) -> BankParamCounts;

    fn gate_param_count(&self) -> usize {
        let g = self.gate();
        g.gate_weights().len() + g.noise_weights().map_or(0, Tensor::len)
    }

    /// Dense weights of every expert, `[expert] -> (W1, W2)`.
    fn all_expert_weights(&self) -> Result<Vec<(Tensor<T>, Tensor<T>)>> {
        (0..self.n_experts())
            .map(|i| Ok((self.expert_weight(Slot::W1, i)?, self.expert_weight(Slot::W2, i)?)))
            .collect()
    }

    /// Gating decision for every row of `x`.
    fn route<R: Rng + ?Sized>(&self, x: &Tensor<T>, rng: &mut R) -> Result<Vec<GateDecision<T>>> {
        if x.rank() != 2 || x.cols() != self.d_model() {
            return Err(Error::Shape(format!(
                "input shape {:?}, expected batch × {}",
                x.shape(),
                self.d_model()
            )));
        }
        (0..x.rows()).map(|r| self.gate().route(x.row(r), rng)).collect()
    }

    /// Combines expert outputs under given routing decisions.
    fn forward_routed(&self, x: &Tensor<T>, decisions: &[GateDecision<T>]) -> Result<Tensor<T>> {
        let weights = self.all_expert_weights()?;
        let views = views(self, &weights);
        ffn::moe_forward(x, &views, decisions)
    }

    fn forward<R: Rng + ?Sized>(&self, x: &Tensor<T>, rng: &mut R) -> Result<(Tensor<T>, RoutingTrace<T>)> {
        if !x.is_finite() {
            return Err(Error::Numeric("input has non-finite entries".into()));
        }
        let decisions = self.route(x, rng)?;
        let y = self.forward_routed(x, &decisions)?;
        Ok((
            y,
            RoutingTrace {
                decisions,
                fingerprint: self.fingerprint(),
            },
        ))
    }

    /// Raw output `E_i(x)` of one expert for every row, ignoring the gate.
    fn expert_output(&self, expert: usize, x: &Tensor<T>) -> Result<Tensor<T>> {
        if expert >= self.n_experts() {
            return Err(Error::IndexOutOfRange {
                index: expert,
                len: self.n_experts(),
            });
        }
        let w1 = self.expert_weight(Slot::W1, expert)?;
        let w2 = self.expert_weight(Slot::W2, expert)?;
        let view = ExpertView {
            w1: &w1,
            b1: self.bias(Slot::W1, expert),
            w2: &w2,
            b2: self.bias(Slot::W2, expert),
        };
        ffn::expert_apply(x, &view)
    }
}

fn views<'a, T: Scalar, B: MoeBank<T> + ?Sized>(
    bank: &'a B,
    weights: &'a [(Tensor<T>, Tensor<T>)],
) -> Vec<ExpertView<'a, T>> {
    weights
        .iter()
        .enumerate()
        .map(|(i, (w1, w2))| ExpertView {
            w1,
            b1: bank.bias(Slot::W1, i),
            w2,
            b2: bank.bias(Slot::W2, i),
        })
        .collect()
}

/// Mean squared error over all elements and its gradient.
pub fn mse_loss<T: Scalar>(y: &Tensor<T>, target: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    let diff = y.sub(target)?;
    let n = T::from_usize_lossy(diff.len());
    let loss = diff.sum_squares() / n;
    let two = T::one() + T::one();
    Ok((loss, diff.scale(two / n)))
}


#[cfg(test)]
mod tests;
