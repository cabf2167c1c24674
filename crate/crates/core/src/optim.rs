//! Parameter updates for expert banks: SGD with a Bernoulli mask on the
//! shared central tensors, plain SGD, and the inverse-square-root warmup
//! schedule.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::layer::{BankGradients, DenseGradients, DenseMoeBank, MoeBank, MpoeExpertBank, Slot};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskGranularity {
    /// One draw per step decides whether the whole central tensor moves.
    #[default]
    PerStepScalar,
    /// An independent draw for every central element.
    PerElement,
}

impl std::str::FromStr for MaskGranularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_step_scalar" | "scalar" => Ok(Self::PerStepScalar),
            "per_element" | "element" => Ok(Self::PerElement),
            _ => Err(Error::Config(format!("unknown mask granularity {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskedUpdateConfig {
    pub learning_rate: f64,
    /// Probability `p_b` of discarding a central update.
    pub mask_probability: f64,
    #[serde(default)]
    pub granularity: MaskGranularity,
    pub seed: u64,
    /// Heavy-ball coefficient; 0 gives plain SGD.
    #[serde(default)]
    pub momentum: f64,
}

impl MaskedUpdateConfig {
    pub fn new(learning_rate: f64, mask_probability: f64, seed: u64) -> Result<Self> {
        let cfg = Self {
            learning_rate,
            mask_probability,
            granularity: MaskGranularity::PerStepScalar,
            seed,
            momentum: 0.0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !(0.0..=1.0).contains(&self.mask_probability) {
            return Err(Error::Config(format!(
                "mask probability {} outside [0, 1]",
                self.mask_probability
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        Ok(())
    }
}

/// Bernoulli draws `b`; `true` discards the corresponding central update.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Mask {
    Scalar(bool),
    Elementwise(Vec<bool>),
}

impl Mask {
    /// True when every update is discarded, so the central gradient is not
    /// needed at all.
    pub fn discards_all(&self) -> bool {
        match self {
            Mask::Scalar(b) => *b,
            Mask::Elementwise(v) => v.iter().all(|&b| b),
        }
    }

    fn keeps(&self, e: usize) -> bool {
        match self {
            Mask::Scalar(b) => !*b,
            Mask::Elementwise(v) => !v[e],
        }
    }
}

/// Draws `b ~ Bernoulli(p_b)`: one value, or `len` values under
/// [`MaskGranularity::PerElement`].
pub fn generate_mask<R: Rng + ?Sized>(
    p_b: f64,
    granularity: MaskGranularity,
    len: usize,
    rng: &mut R,
) -> Result<Mask> {
    if !(0.0..=1.0).contains(&p_b) {
        return Err(Error::Config(format!("mask probability {p_b} outside [0, 1]")));
    }
    Ok(match granularity {
        MaskGranularity::PerStepScalar => Mask::Scalar(rng.random_bool(p_b)),
        MaskGranularity::PerElement => Mask::Elementwise((0..len).map(|_| rng.random_bool(p_b)).collect()),
    })
}

/// Masks for the two central tensors of one step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CentralMask(pub [Mask; 2]);

impl CentralMask {
    pub fn needs_central_gradient(&self) -> bool {
        !self.0.iter().all(Mask::discards_all)
    }

    fn updates_any(&self) -> bool {
        self.needs_central_gradient()
    }
}

/// Optimizer state: step counter, mask generator and momentum buffers.
#[derive(Debug, Clone)]
pub struct TrainState<T = f64> {
    step: u64,
    central_updates: u64,
    rng: ChaCha8Rng,
    velocities: Vec<Vec<T>>,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(seed: u64) -> Self {
        Self {
            step: 0,
            central_updates: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            velocities: Vec::new(),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Steps on which some central entry was updated.
    pub fn central_updates(&self) -> u64 {
        self.central_updates
    }

    /// Draws this step's masks. Call before `backward` so the central
    /// gradient can be skipped when it would be discarded anyway.
    pub fn draw_mask(&mut self, bank: &MpoeExpertBank<T>, cfg: &MaskedUpdateConfig) -> Result<CentralMask> {
        let mut draw = |s: Slot| {
            generate_mask(
                cfg.mask_probability,
                cfg.granularity,
                bank.slot(s).central().len(),
                &mut self.rng,
            )
        };
        let w1 = draw(Slot::W1)?;
        let w2 = match (cfg.granularity, &w1) {
            (MaskGranularity::PerStepScalar, m) => m.clone(),
            _ => draw(Slot::W2)?,
        };
        Ok(CentralMask([w1, w2]))
    }
}

/// Walks parameter groups in a fixed order, applying SGD with optional
/// momentum. Group `idx` owns velocity buffer `idx`.
struct Updater<'a, T> {
    lr: T,
    momentum: T,
    velocities: &'a mut Vec<Vec<T>>,
    idx: usize,
}

impl<'a, T: Scalar> Updater<'a, T> {
    fn new(cfg_lr: f64, momentum: f64, velocities: &'a mut Vec<Vec<T>>) -> Self {
        Self {
            lr: T::from_f64_lossy(cfg_lr),
            momentum: T::from_f64_lossy(momentum),
            velocities,
            idx: 0,
        }
    }

    fn apply(&mut self, params: &mut [T], grad: &[T], mask: Option<&Mask>) -> Result<()> {
        if params.len() != grad.len() {
            return shape_err(format!("gradient has {} entries, parameter {}", grad.len(), params.len()));
        }
        let idx = self.idx;
        self.idx += 1;
        let keep = |e: usize| mask.is_none_or(|m| m.keeps(e));
        if self.momentum == T::zero() {
            for (e, (p, &g)) in params.iter_mut().zip(grad).enumerate() {
                if keep(e) {
                    *p -= self.lr * g;
                }
            }
            return Ok(());
        }
        if self.velocities.len() <= idx {
            self.velocities.resize(idx + 1, Vec::new());
        }
        let v = &mut self.velocities[idx];
        if v.is_empty() {
            v.resize(params.len(), T::zero());
        }
        for (e, ((p, &g), ve)) in params.iter_mut().zip(grad).zip(v.iter_mut()).enumerate() {
            if keep(e) {
                *ve = self.momentum * *ve + g;
                *p -= self.lr * *ve;
            }
        }
        Ok(())
    }

    fn skip(&mut self) {
        self.idx += 1;
    }
}

fn apply_shared<T: Scalar>(
    bank: &mut MpoeExpertBank<T>,
    grads: &BankGradients<T>,
    up: &mut Updater<'_, T>,
) -> Result<()> {
    let n = bank.n_experts();
    for s in Slot::ALL {
        let si = s.index();
        if grads.auxiliaries[si].len() != n || grads.biases[si].len() != n {
            return shape_err(format!("gradients cover {} experts, bank has {n}", grads.auxiliaries[si].len()));
        }
        for i in 0..n {
            let aux = bank.slot_mut(s).auxiliaries_mut(i);
            if grads.auxiliaries[si][i].len() != aux.len() {
                return shape_err("auxiliary gradient count mismatch");
            }
            for (t, g) in aux.iter_mut().zip(&grads.auxiliaries[si][i]) {
                up.apply(t.data_mut(), g.data(), None)?;
            }
            up.apply(bank.bias_mut(s, i), &grads.biases[si][i], None)?;
        }
    }
    let gate = bank.gate_mut();
    up.apply(gate.gate_weights_mut().data_mut(), grads.gate_weights.data(), None)?;
    if let (Some(w), Some(g)) = (gate.noise_weights_mut(), &grads.noise_weights) {
        up.apply(w.data_mut(), g.data(), None)?;
    }
    Ok(())
}

/// One update: central tensors move by `α·g⊙(1−b)`, everything else by
/// `α·g`. The step counter always advances.
pub fn masked_step<T: Scalar>(
    bank: &mut MpoeExpertBank<T>,
    state: &mut TrainState<T>,
    grads: &BankGradients<T>,
    mask: &CentralMask,
    cfg: &MaskedUpdateConfig,
) -> Result<()> {
    cfg.validate()?;
    let mut up = Updater::new(cfg.learning_rate, cfg.momentum, &mut state.velocities);
    for s in Slot::ALL {
        let m = &mask.0[s.index()];
        if m.discards_all() {
            up.skip();
            continue;
        }
        let Some(g) = &grads.central[s.index()] else {
            return Err(Error::Contract("mask keeps a central update but its gradient was skipped".into()));
        };
        if let Mask::Elementwise(v) = m {
            if v.len() != g.len() {
                return shape_err(format!("mask has {} entries, central {}", v.len(), g.len()));
            }
        }
        up.apply(bank.slot_mut(s).central_mut().data_mut(), g.data(), Some(m))?;
    }
    apply_shared(bank, grads, &mut up)?;
    if mask.updates_any() {
        state.central_updates += 1;
    }
    state.step += 1;
    Ok(())
}

/// Unmasked SGD on every parameter of an MPO-backed bank.
pub fn sgd_step<T: Scalar>(
    bank: &mut MpoeExpertBank<T>,
    state: &mut TrainState<T>,
    grads: &BankGradients<T>,
    learning_rate: f64,
    momentum: f64,
) -> Result<()> {
    let mut up = Updater::new(learning_rate, momentum, &mut state.velocities);
    for s in Slot::ALL {
        let Some(g) = &grads.central[s.index()] else {
            return Err(Error::Contract("plain SGD needs central gradients".into()));
        };
        up.apply(bank.slot_mut(s).central_mut().data_mut(), g.data(), None)?;
    }
    apply_shared(bank, grads, &mut up)?;
    state.central_updates += 1;
    state.step += 1;
    Ok(())
}

/// SGD on every parameter of a dense bank.
pub fn dense_sgd_step<T: Scalar>(
    bank: &mut DenseMoeBank<T>,
    state: &mut TrainState<T>,
    grads: &DenseGradients<T>,
    learning_rate: f64,
    momentum: f64,
) -> Result<()> {
    let mut up = Updater::new(learning_rate, momentum, &mut state.velocities);
    let n = bank.n_experts();
    for s in Slot::ALL {
        let si = s.index();
        if grads.weights[si].len() != n {
            return shape_err(format!("gradients cover {} experts, bank has {n}", grads.weights[si].len()));
        }
        for i in 0..n {
            up.apply(bank.weight_mut(s, i).data_mut(), grads.weights[si][i].data(), None)?;
            up.apply(bank.bias_mut(s, i), &grads.biases[si][i], None)?;
        }
    }
    let gate = bank.gate_mut();
    up.apply(gate.gate_weights_mut().data_mut(), grads.gate_weights.data(), None)?;
    if let (Some(w), Some(g)) = (gate.noise_weights_mut(), &grads.noise_weights) {
        up.apply(w.data_mut(), g.data(), None)?;
    }
    state.step += 1;
    Ok(())
}

/// `d_model^-0.5 · min(step^-0.5, step · warmup^-1.5)`
pub fn warmup_lr(step: u64, d_model: usize, warmup_steps: u64) -> Result<f64> {
    if step == 0 || d_model == 0 || warmup_steps == 0 {
        return Err(Error::Config(format!(
            "warmup schedule needs step, d_model and warmup >= 1 (got {step}, {d_model}, {warmup_steps})"
        )));
    }
    let s = step as f64;
    let w = warmup_steps as f64;
    Ok((d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5)))
}

#[cfg(test)]
mod tests;
