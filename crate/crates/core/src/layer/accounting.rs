use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mpo::{planned_param_count, FactorizationPlan};

use super::MoeBank;
use crate::scalar::Scalar;

/// MPOE-to-MoE expert parameter ratio `(n + γ) / (n (γ + 1))`.
pub fn efficiency_ratio(n: usize, gamma: f64) -> f64 {
    let n = n as f64;
    (n + gamma) / (n * (gamma + 1.0))
}

/// Parameter totals of an expert bank. Weight counts exclude biases and the
/// gate, which are reported separately.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BankParamCounts {
    pub n_experts: usize,
    /// Central tensors of both slots; zero for a dense bank.
    pub shared: usize,
    /// Expert-specific weight parameters of one expert.
    pub per_expert: usize,
    /// `shared + n * per_expert`
    pub total: usize,
    /// `n * (shared + per_expert)`: every expert holding a full MPO.
    pub dense_equivalent_total: usize,
    pub biases: usize,
    pub gate: usize,
    /// `shared / per_expert`
    pub gamma: f64,
}

impl BankParamCounts {
    pub fn new(n_experts: usize, shared: usize, per_expert: usize, biases: usize, gate: usize) -> Self {
        Self {
            n_experts,
            shared,
            per_expert,
            total: shared + n_experts * per_expert,
            dense_equivalent_total: n_experts * (shared + per_expert),
            biases,
            gate,
            gamma: if per_expert == 0 {
                f64::INFINITY
            } else {
                shared as f64 / per_expert as f64
            },
        }
    }

    /// `total / dense_equivalent_total`
    pub fn ratio(&self) -> f64 {
        self.total as f64 / self.dense_equivalent_total as f64
    }
}

pub fn bank_param_counts<T: Scalar, B: MoeBank<T> + ?Sized>(bank: &B) -> BankParamCounts {
    bank.param_counts()
}

/// Whether an expert bank sits next to the original FFN of a layer or
/// takes its place.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExpertPlacement {
    Alongside,
    Replace,
}

/// Arithmetic parameter totals for a transformer whose FFN layers get an
/// expert bank. Every FFN and expert carries both biases; each layer adds one
/// `d_model × n` gate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelScaleAccounting {
    pub layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_experts: usize,
    pub base_params: u64,
    pub w1_plan: FactorizationPlan,
    pub w2_plan: FactorizationPlan,
}

impl ModelScaleAccounting {
    /// 12 layers, 768 × 3072 FFNs, 124,439,808 base parameters (tied
    /// embeddings), five-way factorization `i = (3,4,4,4,4)`, `j = (4,4,8,6,4)`.
    pub fn gpt2_small(n_experts: usize) -> Result<Self> {
        let w1_plan = FactorizationPlan::new(vec![3, 4, 4, 4, 4], vec![4, 4, 8, 6, 4])?;
        let w2_plan = w1_plan.transposed();
        Self::new(12, 768, 3072, n_experts, 124_439_808, w1_plan, w2_plan)
    }

    pub fn new(
        layers: usize,
        d_model: usize,
        d_ff: usize,
        n_experts: usize,
        base_params: u64,
        w1_plan: FactorizationPlan,
        w2_plan: FactorizationPlan,
    ) -> Result<Self> {
        if n_experts == 0 {
            return Err(Error::Config("n_experts must be at least 1".into()));
        }
        if (w1_plan.rows(), w1_plan.cols()) != (d_model, d_ff) || (w2_plan.rows(), w2_plan.cols()) != (d_ff, d_model) {
            return Err(Error::Config(format!(
                "plans {w1_plan} / {w2_plan} do not cover {d_model}x{d_ff} / {d_ff}x{d_model}"
            )));
        }
        Ok(Self {
            layers,
            d_model,
            d_ff,
            n_experts,
            base_params,
            w1_plan,
            w2_plan,
        })
    }

    /// Weights and biases of one dense FFN.
    pub fn ffn_params(&self) -> u64 {
        (2 * self.d_model * self.d_ff + self.d_model + self.d_ff) as u64
    }

    fn gate_params(&self) -> u64 {
        (self.d_model * self.n_experts) as u64
    }

    /// Shared-central bank of one layer: central tensors once, auxiliary
    /// tensors and biases per expert.
    pub fn mpoe_bank_params(&self) -> u64 {
        let n = self.n_experts;
        let weights: usize = [&self.w1_plan, &self.w2_plan]
            .iter()
            .map(|p| {
                let c = planned_param_count(p);
                c.central + n * c.auxiliary
            })
            .sum();
        (weights + n * (self.d_model + self.d_ff)) as u64
    }

    pub fn moe_bank_params(&self) -> u64 {
        self.n_experts as u64 * self.ffn_params()
    }

    fn place(&self, bank: u64, placement: ExpertPlacement) -> u64 {
        let l = self.layers as u64;
        let per_layer = bank + self.gate_params();
        match placement {
            ExpertPlacement::Alongside => self.base_params + l * per_layer,
            ExpertPlacement::Replace => self.base_params - l * self.ffn_params() + l * per_layer,
        }
    }

    pub fn moe_total(&self, placement: ExpertPlacement) -> u64 {
        self.place(self.moe_bank_params(), placement)
    }

    pub fn mpoe_total(&self, placement: ExpertPlacement) -> u64 {
        self.place(self.mpoe_bank_params(), placement)
    }
}
