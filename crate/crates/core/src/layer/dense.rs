use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;

use crate::error::{shape_err, Error, Result};
use crate::gating::GateConfig;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::ffn::{self, ExpertView};
use super::{hash_gate, hash_slice, hash_tensor, BankParamCounts, MoeBank, RoutingTrace, Slot};

/// Mixture of experts with an independent dense weight pair per expert.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMoeBank<T = f64> {
    weights: [Vec<Tensor<T>>; 2],
    biases: [Vec<Vec<T>>; 2],
    gate: GateConfig<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGradients<T = f64> {
    /// `[slot][expert]`; zero for experts no row was routed to.
    pub weights: [Vec<Tensor<T>>; 2],
    pub biases: [Vec<Vec<T>>; 2],
    pub gate_weights: Tensor<T>,
    pub noise_weights: Option<Tensor<T>>,
    pub input: Tensor<T>,
}

impl<T: Scalar> DenseMoeBank<T> {
    pub fn new(
        w1: Vec<Tensor<T>>,
        w2: Vec<Tensor<T>>,
        b1: Vec<Vec<T>>,
        b2: Vec<Vec<T>>,
        gate: GateConfig<T>,
    ) -> Result<Self> {
        let n = gate.n_experts();
        if [w1.len(), w2.len(), b1.len(), b2.len()].iter().any(|&l| l != n) {
            return shape_err(format!("every parameter list needs {n} experts"));
        }
        let d_model = gate.d_model();
        let Some(first) = w1.first() else {
            return Err(Error::Config("a bank needs at least one expert".into()));
        };
        if first.rank() != 2 || first.rows() != d_model {
            return shape_err(format!("w1 shape {:?} does not start with d_model {d_model}", first.shape()));
        }
        let d_ff = first.cols();
        for i in 0..n {
            if w1[i].shape() != [d_model, d_ff] || w2[i].shape() != [d_ff, d_model] {
                return shape_err(format!(
                    "expert {i} shapes {:?}, {:?}; expected [{d_model}, {d_ff}], [{d_ff}, {d_model}]",
                    w1[i].shape(),
                    w2[i].shape()
                ));
            }
            if b1[i].len() != d_ff || b2[i].len() != d_model {
                return shape_err(format!("expert {i} bias lengths"));
            }
        }
        Ok(Self {
            weights: [w1, w2],
            biases: [b1, b2],
            gate,
        })
    }

    /// Dense copy of any bank: reconstructed weights, same biases and gate.
    pub fn from_bank<B: MoeBank<T> + ?Sized>(bank: &B) -> Result<Self> {
        let n = bank.n_experts();
        let (w1, w2): (Vec<_>, Vec<_>) = bank.all_expert_weights()?.into_iter().unzip();
        let bias = |s: Slot| (0..n).map(|i| bank.bias(s, i).to_vec()).collect();
        Self::new(w1, w2, bias(Slot::W1), bias(Slot::W2), bank.gate().clone())
    }

    pub fn weight(&self, slot: Slot, expert: usize) -> &Tensor<T> {
        &self.weights[slot.index()][expert]
    }

    pub(crate) fn weight_mut(&mut self, slot: Slot, expert: usize) -> &mut Tensor<T> {
        &mut self.weights[slot.index()][expert]
    }

    pub(crate) fn bias_mut(&mut self, slot: Slot, expert: usize) -> &mut [T] {
        &mut self.biases[slot.index()][expert]
    }

    pub(crate) fn gate_mut(&mut self) -> &mut GateConfig<T> {
        &mut self.gate
    }

    fn views(&self) -> Vec<ExpertView<'_, T>> {
        (0..self.n_experts())
            .map(|i| ExpertView {
                w1: &self.weights[0][i],
                b1: &self.biases[0][i],
                w2: &self.weights[1][i],
                b2: &self.biases[1][i],
            })
            .collect()
    }

    pub fn backward(&self, x: &Tensor<T>, grad_y: &Tensor<T>, trace: &RoutingTrace<T>) -> Result<DenseGradients<T>> {
        trace.check(x, self.fingerprint())?;
        let g = ffn::moe_backward(x, grad_y, &self.views(), &self.gate, &trace.decisions)?;
        let fill = |dws: Vec<Option<Tensor<T>>>, s: usize| -> Vec<Tensor<T>> {
            dws.into_iter()
                .zip(&self.weights[s])
                .map(|(d, w)| d.unwrap_or_else(|| Tensor::zeros(w.shape())))
                .collect()
        };
        Ok(DenseGradients {
            weights: [fill(g.dw1, 0), fill(g.dw2, 1)],
            biases: [g.db1, g.db2],
            gate_weights: g.d_gate,
            noise_weights: g.d_noise,
            input: g.dx,
        })
    }
}

impl<T: Scalar> MoeBank<T> for DenseMoeBank<T> {
    fn n_experts(&self) -> usize {
        self.gate.n_experts()
    }

    fn d_model(&self) -> usize {
        self.gate.d_model()
    }

    fn d_ff(&self) -> usize {
        self.weights[0][0].cols()
    }

    fn gate(&self) -> &GateConfig<T> {
        &self.gate
    }

    fn expert_weight(&self, slot: Slot, expert: usize) -> Result<Tensor<T>> {
        let n = self.n_experts();
        self.weights[slot.index()]
            .get(expert)
            .cloned()
            .ok_or(Error::IndexOutOfRange { index: expert, len: n })
    }

    fn bias(&self, slot: Slot, expert: usize) -> &[T] {
        &self.biases[slot.index()][expert]
    }

    fn all_expert_weights(&self) -> Result<Vec<(Tensor<T>, Tensor<T>)>> {
        Ok(self.weights[0].iter().cloned().zip(self.weights[1].iter().cloned()).collect())
    }

    fn forward_routed(&self, x: &Tensor<T>, decisions: &[crate::gating::GateDecision<T>]) -> Result<Tensor<T>> {
        ffn::moe_forward(x, &self.views(), decisions)
    }

    fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for per_slot in &self.weights {
            for w in per_slot {
                hash_tensor(&mut h, w);
            }
        }
        for per_slot in &self.biases {
            for b in per_slot {
                hash_slice(&mut h, b);
            }
        }
        hash_gate(&mut h, &self.gate);
        h.finish()
    }

    fn param_counts(&self) -> BankParamCounts {
        let n = self.n_experts();
        let per_expert = 2 * self.d_model() * self.d_ff();
        BankParamCounts::new(n, 0, per_expert, n * (self.d_model() + self.d_ff()), self.gate_param_count())
    }
}
