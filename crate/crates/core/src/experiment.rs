//! Seeded desk-scale experiments: a teacher-student regression task, the
//! masked training loop, the factorization sweep and the truncation-bound
//! harness.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gating::{GateConfig, GateKind};
use crate::layer::{
    bank_param_counts, mse_loss, BankParamCounts, DenseMoeBank, MoeBank, MpoeExpertBank, Slot,
};
use crate::mpo::{self, plan_factorization, FactorizationPlan};
use crate::optim::{dense_sgd_step, masked_step, warmup_lr, MaskGranularity, MaskedUpdateConfig, TrainState};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub teacher_experts: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_samples: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            teacher_experts: 4,
            d_model: 16,
            d_ff: 32,
            n_samples: 512,
            noise_std: 0.01,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GateSpec {
    pub kind: GateKind,
    pub k: usize,
    pub noise: bool,
}

impl Default for GateSpec {
    fn default() -> Self {
        Self {
            kind: GateKind::TopK,
            k: 2,
            noise: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_experts: usize,
    pub m: usize,
    /// Explicit `[w1, w2]` plans in `i=..;j=..` form; derived from `m` when
    /// absent, with the W2 plan the transpose of the W1 plan.
    pub plans: Option<[String; 2]>,
    pub gate: GateSpec,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_experts: 4,
            m: 5,
            plans: None,
            gate: GateSpec::default(),
            seed: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "lowercase")]
pub enum LrSchedule {
    Constant(f64),
    /// `scale · d_model^-0.5 · min(step^-0.5, step · warmup^-1.5)`
    Warmup {
        d_model: usize,
        warmup_steps: u64,
        scale: f64,
    },
}

impl LrSchedule {
    pub fn at(&self, step: u64) -> Result<f64> {
        match *self {
            LrSchedule::Constant(lr) => Ok(lr),
            LrSchedule::Warmup {
                d_model,
                warmup_steps,
                scale,
            } => Ok(scale * warmup_lr(step, d_model, warmup_steps)?),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: LrSchedule,
    pub p_b: f64,
    pub granularity: MaskGranularity,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: LrSchedule::Constant(0.05),
            p_b: 0.5,
            granularity: MaskGranularity::PerStepScalar,
            momentum: 0.9,
            epochs: 125,
            batch_size: 32,
            seed: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub report_path: Option<String>,
    pub checkpoint_path: Option<String>,
    pub loss_csv_path: Option<String>,
    /// Probe inputs fed to every expert for the report's MMD tests.
    pub report_probes: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            report_path: None,
            checkpoint_path: None,
            loss_csv_path: None,
            report_probes: 256,
        }
    }
}

/// Full description of a training run. Every random choice derives from
/// one of the explicit seeds.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub task: TaskConfig,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub outputs: OutputConfig,
}

impl ExperimentConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.task.n_samples.div_ceil(self.optimizer.batch_size.max(1))
    }

    pub fn total_steps(&self) -> usize {
        self.optimizer.epochs * self.steps_per_epoch()
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.task;
        let bad = |msg: String| Err(Error::Config(msg));
        if t.d_model == 0 || t.d_ff == 0 || t.teacher_experts == 0 || t.n_samples == 0 {
            return bad("task dimensions and sample count must be positive".into());
        }
        if !(t.noise_std >= 0.0 && t.noise_std.is_finite()) {
            return bad(format!("noise_std {} must be non-negative", t.noise_std));
        }
        let m = &self.model;
        if m.n_experts == 0 {
            return bad("n_experts must be positive".into());
        }
        if m.plans.is_none() && m.m < 2 {
            return bad(format!("m = {} leaves no auxiliary tensors to specialise", m.m));
        }
        if m.gate.k == 0 || m.gate.k > m.n_experts {
            return bad(format!("gate k = {} outside 1..={}", m.gate.k, m.n_experts));
        }
        self.plans()?;
        let o = &self.optimizer;
        if o.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.outputs.report_probes < 2 {
            return bad("report_probes must be at least 2".into());
        }
        let lr_ok = match o.lr {
            LrSchedule::Constant(lr) => lr > 0.0 && lr.is_finite(),
            LrSchedule::Warmup {
                d_model,
                warmup_steps,
                scale,
            } => d_model > 0 && warmup_steps > 0 && scale > 0.0,
        };
        if !lr_ok {
            return bad(format!("invalid learning-rate schedule {:?}", o.lr));
        }
        MaskedUpdateConfig {
            learning_rate: 1.0,
            mask_probability: o.p_b,
            granularity: o.granularity,
            seed: o.seed,
            momentum: o.momentum,
        }
        .validate()
    }

    /// `[w1, w2]` plans for `d_model × d_ff` and `d_ff × d_model`.
    pub fn plans(&self) -> Result<[FactorizationPlan; 2]> {
        let (d, f) = (self.task.d_model, self.task.d_ff);
        let [p1, p2] = match &self.model.plans {
            Some([a, b]) => [a.parse::<FactorizationPlan>()?, b.parse()?],
            None => {
                let p = plan_factorization(d, f, self.model.m)?;
                let t = p.transposed();
                [p, t]
            }
        };
        if (p1.rows(), p1.cols(), p2.rows(), p2.cols()) != (d, f, f, d) {
            return Err(Error::Config(format!("plans {p1} / {p2} do not cover {d}x{f} / {f}x{d}")));
        }
        if p1.m() < 2 || p2.m() < 2 {
            return Err(Error::Config("plans need m >= 2".into()));
        }
        Ok([p1, p2])
    }
}

/// Standard normal probe inputs for redundancy reports.
pub fn probe_inputs(n: usize, d_model: usize, seed: u64) -> Tensor {
    randn(&[n, d_model], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn randn(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
}

/// Frozen random dense mixture and a noisy dataset it labels.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub teacher: DenseMoeBank,
    pub inputs: Tensor,
    pub targets: Tensor,
}

impl SyntheticTask {
    pub fn generate(cfg: &TaskConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (d, f, n) = (cfg.d_model, cfg.d_ff, cfg.teacher_experts);
        let gate = GateConfig::new(GateKind::TopK, n.min(2), randn(&[d, n], 1.0, &mut rng), None, false)?;
        let w1 = (0..n).map(|_| randn(&[d, f], (1.0 / d as f64).sqrt(), &mut rng)).collect();
        let w2 = (0..n).map(|_| randn(&[f, d], (2.0 / f as f64).sqrt(), &mut rng)).collect();
        let b1 = (0..n).map(|_| randn(&[f], 0.1, &mut rng).into_data()).collect();
        let b2 = (0..n).map(|_| randn(&[d], 0.1, &mut rng).into_data()).collect();
        let teacher = DenseMoeBank::new(w1, w2, b1, b2, gate)?;
        let inputs = randn(&[cfg.n_samples, d], 1.0, &mut rng);
        let clean = teacher.forward_routed(&inputs, &teacher.route(&inputs, &mut rng)?)?;
        let targets = clean.add(&randn(&[cfg.n_samples, d], cfg.noise_std, &mut rng))?;
        Ok(Self {
            teacher,
            inputs,
            targets,
        })
    }

    fn batch(&self, idx: &[usize]) -> Result<(Tensor, Tensor)> {
        let pick = |t: &Tensor| {
            let mut data = Vec::with_capacity(idx.len() * t.cols());
            for &r in idx {
                data.extend_from_slice(t.row(r));
            }
            Tensor::new(vec![idx.len(), t.cols()], data)
        };
        Ok((pick(&self.inputs)?, pick(&self.targets)?))
    }

    /// Mean squared error of `bank` over the whole dataset.
    pub fn loss<B: MoeBank<f64>>(&self, bank: &B, routing_seed: u64) -> Result<f64> {
        let (y, _) = bank.forward(&self.inputs, &mut ChaCha8Rng::seed_from_u64(routing_seed))?;
        Ok(mse_loss(&y, &self.targets)?.0)
    }
}

/// The student before training: one random dense FFN, decomposed and
/// replicated into every expert.
pub fn initial_bank(cfg: &ExperimentConfig) -> Result<MpoeExpertBank> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.model.seed);
    let (d, f, n) = (cfg.task.d_model, cfg.task.d_ff, cfg.model.n_experts);
    let g = &cfg.model.gate;
    let noise = g.noise.then(|| randn(&[d, n], 0.1, &mut rng));
    let gate = GateConfig::new(g.kind, g.k, randn(&[d, n], 0.5, &mut rng), noise, g.noise)?;
    let w1 = randn(&[d, f], (1.0 / d as f64).sqrt(), &mut rng);
    let w2 = randn(&[f, d], (1.0 / f as f64).sqrt(), &mut rng);
    let [p1, p2] = cfg.plans()?;
    MpoeExpertBank::init_from_dense(&w1, &w2, &p1, &p2, gate)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub central_updated: bool,
}

pub fn loss_csv(records: &[StepRecord]) -> String {
    let mut s = String::from("step,loss,lr,central_updated\n");
    for r in records {
        let _ = writeln!(s, "{},{:e},{:e},{}", r.step, r.loss, r.lr, u8::from(r.central_updated));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub central_updates: u64,
    pub param_counts: BankParamCounts,
}

pub struct TrainOutcome {
    pub bank: MpoeExpertBank,
    pub initial_central: [Tensor; 2],
    pub records: Vec<StepRecord>,
    pub summary: TrainSummary,
}

/// Seed for whole-dataset evaluation, separate from the training streams.
fn eval_seed(cfg: &ExperimentConfig) -> u64 {
    cfg.optimizer.seed ^ 0x5eed_e7a1
}

/// Drives `step` over the configured epochs with a shared data order and
/// routing stream, so different banks see identical batches and noise.
fn run_epochs(
    cfg: &ExperimentConfig,
    task: &SyntheticTask,
    mut step: impl FnMut(u64, f64, &Tensor, &Tensor, &mut ChaCha8Rng) -> Result<StepRecord>,
) -> Result<Vec<StepRecord>> {
    let o = &cfg.optimizer;
    let mut order_rng = ChaCha8Rng::seed_from_u64(o.seed);
    let mut route_rng = ChaCha8Rng::seed_from_u64(o.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..cfg.task.n_samples).collect();
    let mut records = Vec::with_capacity(cfg.total_steps());
    let mut t = 0u64;
    for _ in 0..o.epochs {
        order.shuffle(&mut order_rng);
        for chunk in order.chunks(o.batch_size) {
            t += 1;
            let lr = o.lr.at(t)?;
            let (x, target) = task.batch(chunk)?;
            let rec = step(t, lr, &x, &target, &mut route_rng)?;
            if !rec.loss.is_finite() {
                return Err(Error::Numeric(format!("loss diverged at step {t}")));
            }
            records.push(rec);
        }
    }
    Ok(records)
}

/// Masked training of the student bank on the synthetic task.
pub fn train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let task = SyntheticTask::generate(&cfg.task)?;
    let mut bank = initial_bank(cfg)?;
    train_bank(cfg, &task, &mut bank).map(|(records, summary, initial_central)| TrainOutcome {
        bank,
        initial_central,
        records,
        summary,
    })
}

fn train_bank(
    cfg: &ExperimentConfig,
    task: &SyntheticTask,
    bank: &mut MpoeExpertBank,
) -> Result<(Vec<StepRecord>, TrainSummary, [Tensor; 2])> {
    let o = &cfg.optimizer;
    let initial_central = [bank.slot(Slot::W1).central().clone(), bank.slot(Slot::W2).central().clone()];
    let initial_loss = task.loss(bank, eval_seed(cfg))?;
    let mut state = TrainState::new(o.seed.wrapping_add(2));
    let records = run_epochs(cfg, task, |t, lr, x, target, route_rng| {
        let update = MaskedUpdateConfig {
            learning_rate: lr,
            mask_probability: o.p_b,
            granularity: o.granularity,
            seed: o.seed,
            momentum: o.momentum,
        };
        let (y, trace) = bank.forward(x, route_rng)?;
        let (loss, gy) = mse_loss(&y, target)?;
        let mask = state.draw_mask(bank, &update)?;
        let central_updated = mask.needs_central_gradient();
        let grads = bank.backward(x, &gy, &trace, central_updated)?;
        masked_step(bank, &mut state, &grads, &mask, &update)?;
        Ok(StepRecord {
            step: t,
            loss,
            lr,
            central_updated,
        })
    })?;
    let summary = TrainSummary {
        steps: state.step(),
        initial_loss,
        final_loss: task.loss(bank, eval_seed(cfg))?,
        central_updates: state.central_updates(),
        param_counts: bank_param_counts(bank),
    };
    Ok((records, summary, initial_central))
}

/// Trains a dense copy of the initial student with plain SGD under the same
/// data order, routing stream, schedule and momentum.
pub fn train_dense_baseline(cfg: &ExperimentConfig) -> Result<(DenseMoeBank, TrainSummary)> {
    cfg.validate()?;
    let task = SyntheticTask::generate(&cfg.task)?;
    let mut bank = DenseMoeBank::from_bank(&initial_bank(cfg)?)?;
    let initial_loss = task.loss(&bank, eval_seed(cfg))?;
    let mut state = TrainState::new(0);
    let momentum = cfg.optimizer.momentum;
    run_epochs(cfg, &task, |t, lr, x, target, route_rng| {
        let (y, trace) = bank.forward(x, route_rng)?;
        let (loss, gy) = mse_loss(&y, target)?;
        let grads = bank.backward(x, &gy, &trace)?;
        dense_sgd_step(&mut bank, &mut state, &grads, lr, momentum)?;
        Ok(StepRecord {
            step: t,
            loss,
            lr,
            central_updated: true,
        })
    })?;
    let summary = TrainSummary {
        steps: state.step(),
        initial_loss,
        final_loss: task.loss(&bank, eval_seed(cfg))?,
        central_updates: state.step(),
        param_counts: bank_param_counts(&bank),
    };
    Ok((bank, summary))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub m: usize,
    pub plans: [String; 2],
    /// Weight parameters of the MPO bank (shared plus every expert).
    pub mpo_params: usize,
    pub shared: usize,
    pub per_expert: usize,
    pub gamma: f64,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Trains the configured run once per `m`, with automatic plans.
pub fn sweep_m(cfg: &ExperimentConfig, ms: &[usize]) -> Result<Vec<SweepRow>> {
    if let Some(&m) = ms.iter().find(|&&m| m < 2) {
        return Err(Error::Config(format!("m = {m} leaves no auxiliary tensors to specialise")));
    }
    let task = SyntheticTask::generate(&cfg.task)?;
    ms.iter()
        .map(|&m| {
            let mut c = cfg.clone();
            c.model.m = m;
            c.model.plans = None;
            c.validate()?;
            let mut bank = initial_bank(&c)?;
            let (_, summary, _) = train_bank(&c, &task, &mut bank)?;
            let p = summary.param_counts;
            let [p1, p2] = c.plans()?;
            Ok(SweepRow {
                m,
                plans: [p1.to_string(), p2.to_string()],
                mpo_params: p.total,
                shared: p.shared,
                per_expert: p.per_expert,
                gamma: p.gamma,
                initial_loss: summary.initial_loss,
                final_loss: summary.final_loss,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundTrial {
    pub trial: usize,
    /// Seed that regenerates this trial alone.
    pub seed: u64,
    pub rows: usize,
    pub cols: usize,
    pub plan: String,
    pub error: f64,
    pub bound: f64,
    pub norm: f64,
    pub ok: bool,
}

/// Per-trial seed derived from the run seed.
pub fn trial_seed(seed: u64, trial: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(trial as u64)
}

/// One random decomposition. With `truncate`, caps are drawn strictly below
/// the full bond at one or more bonds and the realized error must stay
/// within `bound·(1+1e-8)`. Without, caps equal the full bonds and the
/// relative error must stay below `1e-10`.
pub fn bound_trial(trial: usize, seed: u64, max_dim: usize, truncate: bool) -> Result<BoundTrial> {
    if max_dim < 4 {
        return Err(Error::Config(format!("max_dim {max_dim} must be at least 4")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (plan, full) = loop {
        let rows = rng.random_range(2..=max_dim);
        let cols = rng.random_range(2..=max_dim);
        let m = rng.random_range(2..=5);
        let plan = plan_factorization(rows, cols, m)?;
        let full = plan.bond_dimensions();
        if full.iter().any(|&b| b > 1) {
            break (plan, full);
        }
    };
    let caps: Vec<usize> = if truncate {
        let mut caps: Vec<usize> = full.iter().map(|&b| rng.random_range(1..=b)).collect();
        if caps == full {
            let k = full.iter().position(|&b| b > 1).expect("some bond exceeds 1");
            caps[k] = rng.random_range(1..full[k]);
        }
        caps
    } else {
        full.clone()
    };
    let plan = plan.with_caps(caps)?;
    let w = randn(&[plan.rows(), plan.cols()], 1.0, &mut rng);
    let f = mpo::decompose(&w, &plan)?;
    let error = f.reconstruct()?.sub(&w)?.frobenius_norm();
    let bound = f.truncation_bound();
    let norm = w.frobenius_norm();
    let ok = if truncate {
        error <= bound * (1.0 + 1e-8)
    } else {
        error < 1e-10 * norm
    };
    Ok(BoundTrial {
        trial,
        seed,
        rows: plan.rows(),
        cols: plan.cols(),
        plan: plan.to_string(),
        error,
        bound,
        norm,
        ok,
    })
}

pub fn verify_bound(trials: usize, max_dim: usize, seed: u64, truncate: bool) -> Result<Vec<BoundTrial>> {
    (0..trials)
        .map(|t| bound_trial(t, trial_seed(seed, t), max_dim, truncate))
        .collect()
}
