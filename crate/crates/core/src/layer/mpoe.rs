use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;

use crate::error::{shape_err, Error, Result};
use crate::gating::GateConfig;
use crate::mpo::{self, central_index, FactorizationPlan, MpoFactors, ParamCount};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::ffn::{self, ExpertView};
use super::{hash_gate, hash_slice, hash_tensor, BankParamCounts, MoeBank, RoutingTrace, Slot};

/// One weight slot of the bank: a shared central tensor plus, per expert,
/// the remaining `m - 1` local tensors in chain order.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotBank<T = f64> {
    plan: FactorizationPlan,
    central: Tensor<T>,
    auxiliaries: Vec<Vec<Tensor<T>>>,
}

impl<T: Scalar> SlotBank<T> {
    fn replicate(f: MpoFactors<T>, n: usize) -> Self {
        let plan = f.plan();
        let c = f.central_index();
        let mut locals = f.into_locals();
        let central = locals.remove(c);
        Self {
            plan,
            central,
            auxiliaries: vec![locals; n],
        }
    }

    pub fn plan(&self) -> &FactorizationPlan {
        &self.plan
    }

    pub fn m(&self) -> usize {
        self.plan.m()
    }

    pub fn central_index(&self) -> usize {
        central_index(self.m())
    }

    pub fn central(&self) -> &Tensor<T> {
        &self.central
    }

    /// Auxiliary tensors of `expert`, in chain order with the central removed.
    pub fn auxiliaries(&self, expert: usize) -> &[Tensor<T>] {
        &self.auxiliaries[expert]
    }

    pub(crate) fn central_mut(&mut self) -> &mut Tensor<T> {
        &mut self.central
    }

    pub(crate) fn auxiliaries_mut(&mut self, expert: usize) -> &mut [Tensor<T>] {
        &mut self.auxiliaries[expert]
    }

    /// Position in the chain of auxiliary number `j`.
    pub fn chain_position(&self, j: usize) -> usize {
        if j < self.central_index() {
            j
        } else {
            j + 1
        }
    }

    pub fn factors(&self, expert: usize) -> Result<MpoFactors<T>> {
        let aux = self.auxiliaries.get(expert).ok_or(Error::IndexOutOfRange {
            index: expert,
            len: self.auxiliaries.len(),
        })?;
        let mut locals = aux.clone();
        locals.insert(self.central_index(), self.central.clone());
        MpoFactors::from_locals(locals)
    }

    pub fn param_count(&self) -> ParamCount {
        let central = self.central.len();
        let auxiliary = self.auxiliaries.first().map_or(0, |a| a.iter().map(Tensor::len).sum());
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
}

/// Expert bank whose FFN weights are MPO factorizations sharing one central
/// tensor per slot.
#[derive(Debug, Clone, PartialEq)]
pub struct MpoeExpertBank<T = f64> {
    slots: [SlotBank<T>; 2],
    biases: [Vec<Vec<T>>; 2],
    gate: GateConfig<T>,
    d_model: usize,
    d_ff: usize,
}

/// Gradients from [`MpoeExpertBank::backward`]. Auxiliary gradients are
/// indexed `[slot][expert][j]` like [`SlotBank::auxiliaries`].
#[derive(Debug, Clone, PartialEq)]
pub struct BankGradients<T = f64> {
    /// `None` when the central gradient was not requested.
    pub central: [Option<Tensor<T>>; 2],
    pub auxiliaries: [Vec<Vec<Tensor<T>>>; 2],
    pub biases: [Vec<Vec<T>>; 2],
    pub gate_weights: Tensor<T>,
    pub noise_weights: Option<Tensor<T>>,
    pub input: Tensor<T>,
}

impl<T: Scalar> MpoeExpertBank<T> {
    /// Decomposes both dense weights once without truncation, shares the
    /// central tensors and gives every expert its own copy of the auxiliary
    /// tensors. Biases start at zero.
    pub fn init_from_dense(
        w1: &Tensor<T>,
        w2: &Tensor<T>,
        plan1: &FactorizationPlan,
        plan2: &FactorizationPlan,
        gate: GateConfig<T>,
    ) -> Result<Self> {
        let n = gate.n_experts();
        if w1.rank() != 2 || w2.rank() != 2 {
            return shape_err("expert weights must be matrices");
        }
        let (d_model, d_ff) = (w1.rows(), w1.cols());
        if w2.shape() != [d_ff, d_model] {
            return shape_err(format!("w2 shape {:?}, expected [{d_ff}, {d_model}]", w2.shape()));
        }
        if gate.d_model() != d_model {
            return shape_err(format!("gate width {} vs d_model {d_model}", gate.d_model()));
        }
        for (plan, w) in [(plan1, w1), (plan2, w2)] {
            if plan.m() < 2 {
                return Err(Error::Config("a shared central tensor needs m >= 2".into()));
            }
            if plan.rows() != w.rows() || plan.cols() != w.cols() {
                return Err(Error::Config(format!(
                    "plan {plan} covers {}x{}, weight is {}x{}",
                    plan.rows(),
                    plan.cols(),
                    w.rows(),
                    w.cols()
                )));
            }
        }
        let f1 = mpo::decompose(w1, &plan1.clone().without_caps())?;
        let f2 = mpo::decompose(w2, &plan2.clone().without_caps())?;
        Ok(Self {
            slots: [SlotBank::replicate(f1, n), SlotBank::replicate(f2, n)],
            biases: [vec![vec![T::zero(); d_ff]; n], vec![vec![T::zero(); d_model]; n]],
            gate,
            d_model,
            d_ff,
        })
    }

    /// Reassembles a bank from stored parameters. Auxiliaries are indexed
    /// `[slot][expert][j]`, biases `[slot][expert]`.
    pub fn from_parts(
        plans: [FactorizationPlan; 2],
        centrals: [Tensor<T>; 2],
        auxiliaries: [Vec<Vec<Tensor<T>>>; 2],
        biases: [Vec<Vec<T>>; 2],
        gate: GateConfig<T>,
    ) -> Result<Self> {
        let n = gate.n_experts();
        let [p1, p2] = plans;
        let [c1, c2] = centrals;
        let [a1, a2] = auxiliaries;
        let mut slots = Vec::with_capacity(2);
        for (plan, central, aux) in [(p1, c1, a1), (p2, c2, a2)] {
            plan.validate()?;
            if plan.m() < 2 {
                return Err(Error::Config("a shared central tensor needs m >= 2".into()));
            }
            if aux.len() != n {
                return shape_err(format!("{} auxiliary sets for {n} experts", aux.len()));
            }
            let s = SlotBank {
                plan,
                central,
                auxiliaries: aux,
            };
            for i in 0..n {
                if s.auxiliaries[i].len() != s.m() - 1 {
                    return shape_err(format!("expert {i} has {} auxiliaries", s.auxiliaries[i].len()));
                }
                let f = s.factors(i)?;
                if f.row_factors() != s.plan.row_factors() || f.col_factors() != s.plan.col_factors() {
                    return shape_err(format!("expert {i} factors do not follow plan {}", s.plan));
                }
                if f.bond_dims() != s.factors(0)?.bond_dims() {
                    return shape_err(format!("expert {i} bond dims differ from expert 0"));
                }
            }
            slots.push(s);
        }
        let (d_model, d_ff) = (slots[0].plan.rows(), slots[0].plan.cols());
        if (slots[1].plan.rows(), slots[1].plan.cols()) != (d_ff, d_model) {
            return shape_err(format!("slot plans {} and {} do not chain", slots[0].plan, slots[1].plan));
        }
        if gate.d_model() != d_model {
            return shape_err(format!("gate width {} vs d_model {d_model}", gate.d_model()));
        }
        for (b, len) in biases.iter().zip([d_ff, d_model]) {
            if b.len() != n || b.iter().any(|v| v.len() != len) {
                return shape_err("bias shapes do not match the bank");
            }
        }
        let s2 = slots.pop().expect("two slots");
        let s1 = slots.pop().expect("two slots");
        Ok(Self {
            slots: [s1, s2],
            biases,
            gate,
            d_model,
            d_ff,
        })
    }

    pub fn slot(&self, slot: Slot) -> &SlotBank<T> {
        &self.slots[slot.index()]
    }

    pub(crate) fn slot_mut(&mut self, slot: Slot) -> &mut SlotBank<T> {
        &mut self.slots[slot.index()]
    }

    pub(crate) fn bias_mut(&mut self, slot: Slot, expert: usize) -> &mut [T] {
        &mut self.biases[slot.index()][expert]
    }

    pub(crate) fn gate_mut(&mut self) -> &mut GateConfig<T> {
        &mut self.gate
    }

    pub fn factors(&self, slot: Slot, expert: usize) -> Result<MpoFactors<T>> {
        self.slot(slot).factors(expert)
    }

    pub fn set_central(&mut self, slot: Slot, t: Tensor<T>) -> Result<()> {
        let s = &mut self.slots[slot.index()];
        if t.shape() != s.central.shape() {
            return shape_err(format!("central shape {:?}, expected {:?}", t.shape(), s.central.shape()));
        }
        s.central = t;
        Ok(())
    }

    pub fn set_auxiliary(&mut self, slot: Slot, expert: usize, j: usize, t: Tensor<T>) -> Result<()> {
        let s = &mut self.slots[slot.index()];
        let n = s.auxiliaries.len();
        let aux = s
            .auxiliaries
            .get_mut(expert)
            .ok_or(Error::IndexOutOfRange { index: expert, len: n })?;
        let len = aux.len();
        let cur = aux.get_mut(j).ok_or(Error::IndexOutOfRange { index: j, len })?;
        if t.shape() != cur.shape() {
            return shape_err(format!("auxiliary shape {:?}, expected {:?}", t.shape(), cur.shape()));
        }
        *cur = t;
        Ok(())
    }

    pub fn set_bias(&mut self, slot: Slot, expert: usize, b: Vec<T>) -> Result<()> {
        let n = self.gate.n_experts();
        let cur = self.biases[slot.index()]
            .get_mut(expert)
            .ok_or(Error::IndexOutOfRange { index: expert, len: n })?;
        if b.len() != cur.len() {
            return shape_err(format!("bias length {}, expected {}", b.len(), cur.len()));
        }
        *cur = b;
        Ok(())
    }

    /// Backpropagates `grad_y` through the pass recorded in `trace`.
    ///
    /// The central gradient sums every routed expert's contribution in
    /// expert order; it is skipped entirely when `include_central` is false.
    /// Experts no row was routed to get exactly zero gradients.
    pub fn backward(
        &self,
        x: &Tensor<T>,
        grad_y: &Tensor<T>,
        trace: &RoutingTrace<T>,
        include_central: bool,
    ) -> Result<BankGradients<T>> {
        trace.check(x, self.fingerprint())?;
        let weights = self.all_expert_weights()?;
        let views: Vec<ExpertView<'_, T>> = weights
            .iter()
            .enumerate()
            .map(|(i, (w1, w2))| ExpertView {
                w1,
                b1: &self.biases[0][i],
                w2,
                b2: &self.biases[1][i],
            })
            .collect();
        let g = ffn::moe_backward(x, grad_y, &views, &self.gate, &trace.decisions)?;

        let mut central: [Option<Tensor<T>>; 2] = [None, None];
        let mut auxiliaries: [Vec<Vec<Tensor<T>>>; 2] = [Vec::new(), Vec::new()];
        for (s, dws) in [&g.dw1, &g.dw2].into_iter().enumerate() {
            let bank = &self.slots[s];
            let c = bank.central_index();
            let mut acc = include_central.then(|| Tensor::zeros(bank.central.shape()));
            let mut aux = Vec::with_capacity(dws.len());
            for (i, dw) in dws.iter().enumerate() {
                let Some(dw) = dw else {
                    aux.push(bank.auxiliaries[i].iter().map(|t| Tensor::zeros(t.shape())).collect());
                    continue;
                };
                let f = bank.factors(i)?;
                let mut wanted = vec![true; bank.m()];
                wanted[c] = include_central;
                let mut locals = mpo::local_gradients(&f, dw, &wanted)?;
                if let (Some(acc), Some(gc)) = (acc.as_mut(), locals[c].take()) {
                    acc.axpy_in_place(T::one(), &gc)?;
                }
                locals.remove(c);
                aux.push(locals.into_iter().map(|t| t.expect("auxiliary gradient requested")).collect());
            }
            central[s] = acc;
            auxiliaries[s] = aux;
        }
        Ok(BankGradients {
            central,
            auxiliaries,
            biases: [g.db1, g.db2],
            gate_weights: g.d_gate,
            noise_weights: g.d_noise,
            input: g.dx,
        })
    }
}

impl<T: Scalar> MoeBank<T> for MpoeExpertBank<T> {
    fn n_experts(&self) -> usize {
        self.gate.n_experts()
    }

    fn d_model(&self) -> usize {
        self.d_model
    }

    fn d_ff(&self) -> usize {
        self.d_ff
    }

    fn gate(&self) -> &GateConfig<T> {
        &self.gate
    }

    fn expert_weight(&self, slot: Slot, expert: usize) -> Result<Tensor<T>> {
        self.factors(slot, expert)?.reconstruct()
    }

    fn bias(&self, slot: Slot, expert: usize) -> &[T] {
        &self.biases[slot.index()][expert]
    }

    fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for s in &self.slots {
            hash_tensor(&mut h, &s.central);
            for aux in &s.auxiliaries {
                for t in aux {
                    hash_tensor(&mut h, t);
                }
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
        let counts = [self.slots[0].param_count(), self.slots[1].param_count()];
        let shared: usize = counts.iter().map(|c| c.central).sum();
        let per_expert: usize = counts.iter().map(|c| c.auxiliary).sum();
        BankParamCounts::new(
            n,
            shared,
            per_expert,
            n * (self.d_model + self.d_ff),
            self.gate_param_count(),
        )
    }
}
