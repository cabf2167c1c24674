//! Finite-difference check of [`MpoeExpertBank::backward`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::tensor::Tensor;

use super::{BankGradients, MoeBank, MpoeExpertBank, Slot};

/// One parameter group of an [`MpoeExpertBank`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ParamGroup {
    Central(Slot),
    Auxiliary { slot: Slot, expert: usize, j: usize },
    Bias { slot: Slot, expert: usize },
    GateWeights,
    NoiseWeights,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupCheck {
    pub group: ParamGroup,
    pub entries: usize,
    pub max_abs_error: f64,
    /// Largest `|numeric|` in the group.
    pub scale: f64,
    /// `max_abs_error / scale`, or `max_abs_error` when the group's
    /// gradient vanishes.
    pub relative_error: f64,
}

fn params_mut(bank: &mut MpoeExpertBank<f64>, g: ParamGroup) -> &mut [f64] {
    match g {
        ParamGroup::Central(s) => bank.slot_mut(s).central_mut().data_mut(),
        ParamGroup::Auxiliary { slot, expert, j } => bank.slot_mut(slot).auxiliaries_mut(expert)[j].data_mut(),
        ParamGroup::Bias { slot, expert } => bank.bias_mut(slot, expert),
        ParamGroup::GateWeights => bank.gate_mut().gate_weights_mut().data_mut(),
        ParamGroup::NoiseWeights => bank
            .gate_mut()
            .noise_weights_mut()
            .expect("noise group listed only when present")
            .data_mut(),
    }
}

fn analytic(g: &BankGradients<f64>, p: ParamGroup) -> &[f64] {
    match p {
        ParamGroup::Central(s) => g.central[s.index()].as_ref().expect("central requested").data(),
        ParamGroup::Auxiliary { slot, expert, j } => g.auxiliaries[slot.index()][expert][j].data(),
        ParamGroup::Bias { slot, expert } => &g.biases[slot.index()][expert],
        ParamGroup::GateWeights => g.gate_weights.data(),
        ParamGroup::NoiseWeights => g.noise_weights.as_ref().expect("noise gradient").data(),
    }
}

fn groups(bank: &MpoeExpertBank<f64>) -> Vec<ParamGroup> {
    let mut out = Vec::new();
    for slot in Slot::ALL {
        out.push(ParamGroup::Central(slot));
        for expert in 0..bank.n_experts() {
            for j in 0..bank.slot(slot).auxiliaries(expert).len() {
                out.push(ParamGroup::Auxiliary { slot, expert, j });
            }
            out.push(ParamGroup::Bias { slot, expert });
        }
    }
    out.push(ParamGroup::GateWeights);
    if bank.gate().noise_weights().is_some() {
        out.push(ParamGroup::NoiseWeights);
    }
    out
}

/// Compares analytic gradients of `L = Σ y ⊙ probe` against central
/// differences with step `h`. Every loss evaluation routes with a fresh
/// generator seeded by `seed`, so noise draws are identical throughout.
pub fn check_gradients(
    bank: &MpoeExpertBank<f64>,
    x: &Tensor<f64>,
    probe: &Tensor<f64>,
    seed: u64,
    h: f64,
) -> Result<Vec<GroupCheck>> {
    let loss = |b: &MpoeExpertBank<f64>| -> Result<f64> {
        let (y, _) = b.forward(x, &mut ChaCha8Rng::seed_from_u64(seed))?;
        Ok(y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum())
    };
    let (_, trace) = bank.forward(x, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let grads = bank.backward(x, probe, &trace, true)?;

    let mut out = Vec::new();
    let mut work = bank.clone();
    for g in groups(bank) {
        let a = analytic(&grads, g);
        let (mut max_abs_error, mut scale) = (0.0f64, 0.0f64);
        for (e, &ae) in a.iter().enumerate() {
            let orig = params_mut(&mut work, g)[e];
            params_mut(&mut work, g)[e] = orig + h;
            let up = loss(&work)?;
            params_mut(&mut work, g)[e] = orig - h;
            let down = loss(&work)?;
            params_mut(&mut work, g)[e] = orig;
            let numeric = (up - down) / (2.0 * h);
            max_abs_error = max_abs_error.max((ae - numeric).abs());
            scale = scale.max(numeric.abs());
        }
        out.push(GroupCheck {
            group: g,
            entries: a.len(),
            max_abs_error,
            scale,
            relative_error: if scale > 0.0 {
                max_abs_error / scale
            } else {
                max_abs_error
            },
        });
    }
    Ok(out)
}
