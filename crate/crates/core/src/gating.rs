//! Gating networks that turn an input row into a sparse distribution over
//! experts: plain softmax, noisy top-k, and switch (top-1) routing.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateKind {
    /// Dense softmax over all experts.
    Softmax,
    /// Softmax over the `k` largest (optionally noisy) logits.
    TopK,
    /// Single expert per row, weighted by its softmax probability.
    Switch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateConfig<T = f64> {
    kind: GateKind,
    k: usize,
    /// `d_model × n_experts`
    gate_weights: Tensor<T>,
    /// `d_model × n_experts`
    noise_weights: Option<Tensor<T>>,
    noise_enabled: bool,
}

/// Dense gate weights; entries off `selected` are exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct GateOutput<T = f64> {
    pub weights: Vec<T>,
    pub selected: Vec<usize>,
}

/// Everything the backward pass needs to differentiate one gating decision.
#[derive(Debug, Clone, PartialEq)]
pub struct GateDecision<T = f64> {
    pub output: GateOutput<T>,
    /// `x · W_g`
    pub clean_logits: Vec<T>,
    /// `x · W_noise`, present when noise was applied.
    pub noise_logits: Option<Vec<T>>,
    /// Standard normal draws, present when noise was applied.
    pub noise_draws: Option<Vec<T>>,
}

impl<T: Scalar> GateConfig<T> {
    pub fn new(
        kind: GateKind,
        k: usize,
        gate_weights: Tensor<T>,
        noise_weights: Option<Tensor<T>>,
        noise_enabled: bool,
    ) -> Result<Self> {
        if gate_weights.rank() != 2 {
            return Err(Error::Config("gate weights must be a matrix".into()));
        }
        let n = gate_weights.cols();
        if k == 0 || k > n {
            return Err(Error::Config(format!("k = {k} outside [1, {n}]")));
        }
        if let Some(w) = &noise_weights {
            if w.shape() != gate_weights.shape() {
                return Err(Error::Config(format!(
                    "noise weights {:?} do not match gate weights {:?}",
                    w.shape(),
                    gate_weights.shape()
                )));
            }
        }
        if noise_enabled && noise_weights.is_none() {
            return Err(Error::Config("noise enabled without noise weights".into()));
        }
        Ok(Self {
            kind,
            k,
            gate_weights,
            noise_weights,
            noise_enabled,
        })
    }

    pub fn kind(&self) -> GateKind {
        self.kind
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_experts(&self) -> usize {
        self.gate_weights.cols()
    }

    pub fn d_model(&self) -> usize {
        self.gate_weights.rows()
    }

    pub fn gate_weights(&self) -> &Tensor<T> {
        &self.gate_weights
    }

    pub fn noise_weights(&self) -> Option<&Tensor<T>> {
        self.noise_weights.as_ref()
    }

    pub fn noise_enabled(&self) -> bool {
        self.noise_enabled
    }

    pub(crate) fn gate_weights_mut(&mut self) -> &mut Tensor<T> {
        &mut self.gate_weights
    }

    pub(crate) fn noise_weights_mut(&mut self) -> Option<&mut Tensor<T>> {
        self.noise_weights.as_mut()
    }

    fn logits(&self, w: &Tensor<T>, x: &[T]) -> Vec<T> {
        let n = w.cols();
        let mut out = vec![T::zero(); n];
        for (d, &xd) in x.iter().enumerate() {
            for (o, &wv) in out.iter_mut().zip(w.row(d)) {
                *o += xd * wv;
            }
        }
        out
    }

    fn check_input(&self, x: &[T]) -> Result<()> {
        if x.len() != self.d_model() {
            return Err(Error::Shape(format!(
                "gate input has {} features, expected {}",
                x.len(),
                self.d_model()
            )));
        }
        Ok(())
    }

    /// Routes one row according to the configured kind. `rng` is only
    /// consumed by noisy top-k gating with noise enabled.
    pub fn route<R: Rng + ?Sized>(&self, x: &[T], rng: &mut R) -> Result<GateDecision<T>> {
        match self.kind {
            GateKind::Softmax => {
                self.check_input(x)?;
                let clean = self.logits(&self.gate_weights, x);
                let weights = softmax(&clean);
                Ok(GateDecision {
                    output: GateOutput {
                        weights,
                        selected: (0..self.n_experts()).collect(),
                    },
                    clean_logits: clean,
                    noise_logits: None,
                    noise_draws: None,
                })
            }
            GateKind::TopK => noisy_topk_decision(x, self, rng),
            GateKind::Switch => switch_decision(x, self),
        }
    }
}

/// Numerically stable softmax; `-inf` entries get weight zero.
pub fn softmax<T: Scalar>(v: &[T]) -> Vec<T> {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = v.iter().map(|&x| (x - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Indices of the `k` largest entries, ties going to the lower index.
fn top_k_indices<T: Scalar>(v: &[T], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| {
        v[b].partial_cmp(&v[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// Keeps the `k` largest entries and sets the rest to `-inf`.
pub fn keep_top_k<T: Scalar>(v: &[T], k: usize) -> Result<Vec<T>> {
    if k == 0 || k > v.len() {
        return Err(Error::Config(format!("k = {k} outside [1, {}]", v.len())));
    }
    let keep = top_k_indices(v, k);
    let mut out = vec![T::neg_infinity(); v.len()];
    for i in keep {
        out[i] = v[i];
    }
    Ok(out)
}

fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn noisy_topk_decision<T: Scalar, R: Rng + ?Sized>(
    x: &[T],
    cfg: &GateConfig<T>,
    rng: &mut R,
) -> Result<GateDecision<T>> {
    cfg.check_input(x)?;
    let clean = cfg.logits(&cfg.gate_weights, x);
    let (h, noise_logits, draws) = if cfg.noise_enabled {
        let wn = cfg
            .noise_weights
            .as_ref()
            .ok_or_else(|| Error::Config("noise enabled without noise weights".into()))?;
        let nl = cfg.logits(wn, x);
        let draws: Vec<T> = (0..cfg.n_experts())
            .map(|_| T::from_f64_lossy(rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let h = clean
            .iter()
            .zip(&nl)
            .zip(&draws)
            .map(|((&c, &s), &nu)| c + nu * softplus(s))
            .collect();
        (h, Some(nl), Some(draws))
    } else {
        (clean.clone(), None, None)
    };
    let selected = top_k_indices(&h, cfg.k);
    let weights = softmax(&keep_top_k(&h, cfg.k)?);
    Ok(GateDecision {
        output: GateOutput { weights, selected },
        clean_logits: clean,
        noise_logits,
        noise_draws: draws,
    })
}

/// `softmax(KeepTopK(H(x), k))` with `H(x) = x·W_g + ν ⊙ softplus(x·W_noise)`
/// when noise is enabled, `H(x) = x·W_g` otherwise.
pub fn noisy_topk_gate<T: Scalar, R: Rng + ?Sized>(
    x: &[T],
    cfg: &GateConfig<T>,
    rng: &mut R,
) -> Result<GateOutput<T>> {
    Ok(noisy_topk_decision(x, cfg, rng)?.output)
}

fn switch_decision<T: Scalar>(x: &[T], cfg: &GateConfig<T>) -> Result<GateDecision<T>> {
    cfg.check_input(x)?;
    let clean = cfg.logits(&cfg.gate_weights, x);
    let p = softmax(&clean);
    let winner = top_k_indices(&clean, 1)[0];
    let mut weights = vec![T::zero(); p.len()];
    weights[winner] = p[winner];
    Ok(GateDecision {
        output: GateOutput {
            weights,
            selected: vec![winner],
        },
        clean_logits: clean,
        noise_logits: None,
        noise_draws: None,
    })
}

/// Top-1 routing. The weight is the winner's un-renormalized softmax
/// probability, so the weights do not sum to one unless `n_experts == 1`.
pub fn switch_gate<T: Scalar>(x: &[T], cfg: &GateConfig<T>) -> Result<GateOutput<T>> {
    Ok(switch_decision(x, cfg)?.output)
}

/// Gradients of one routing decision with respect to the gate parameters
/// and the input row, given `dL/dweights`.
pub(crate) struct GateGrad<'a, T> {
    pub d_gate: &'a mut Tensor<T>,
    pub d_noise: Option<&'a mut Tensor<T>>,
    pub dx: &'a mut [T],
}

pub(crate) fn gate_backward<T: Scalar>(
    cfg: &GateConfig<T>,
    kind: GateKind,
    x: &[T],
    decision: &GateDecision<T>,
    d_weights: &[T],
    out: GateGrad<'_, T>,
) {
    let n = cfg.n_experts();
    let w = &decision.output.weights;
    let mut dh = vec![T::zero(); n];
    match kind {
        GateKind::Softmax | GateKind::TopK => {
            let sel = &decision.output.selected;
            let mean: T = sel.iter().map(|&i| w[i] * d_weights[i]).sum();
            for &i in sel {
                dh[i] = w[i] * (d_weights[i] - mean);
            }
        }
        GateKind::Switch => {
            let j = decision.output.selected[0];
            let p = softmax(&decision.clean_logits);
            let g = d_weights[j] * p[j];
            for i in 0..n {
                let delta = if i == j { T::one() } else { T::zero() };
                dh[i] = g * (delta - p[i]);
            }
        }
    }

    let d_model = cfg.d_model();
    accumulate_linear(&cfg.gate_weights, x, &dh, out.d_gate, out.dx, d_model);

    if let (Some(nl), Some(nu), Some(wn), Some(d_noise)) = (
        &decision.noise_logits,
        &decision.noise_draws,
        &cfg.noise_weights,
        out.d_noise,
    ) {
        let dn: Vec<T> = (0..n).map(|i| dh[i] * nu[i] * sigmoid(nl[i])).collect();
        accumulate_linear(wn, x, &dn, d_noise, out.dx, d_model);
    }
}

/// For `z = x · W`: `dW += xᵀ dz`, `dx += W dz`.
fn accumulate_linear<T: Scalar>(
    w: &Tensor<T>,
    x: &[T],
    dz: &[T],
    dw: &mut Tensor<T>,
    dx: &mut [T],
    d_model: usize,
) {
    let n = dz.len();
    let dwd = dw.data_mut();
    for d in 0..d_model {
        let wrow = w.row(d);
        let mut acc = T::zero();
        for i in 0..n {
            dwd[d * n + i] += x[d] * dz[i];
            acc += wrow[i] * dz[i];
        }
        dx[d] += acc;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// d_model = 3 with identity-like weights so the logits equal `x`.
    fn cfg(kind: GateKind, k: usize, noise: bool) -> GateConfig {
        let w = Tensor::identity(3);
        let wn = Tensor::from_fn(&[3, 3], |i| 0.1 * i as f64 - 0.3);
        GateConfig::new(kind, k, w, Some(wn), noise).unwrap()
    }

    #[test]
    fn keep_top_k_examples() {
        let ninf = f64::NEG_INFINITY;
        assert_eq!(keep_top_k(&[1.0, 3.0, 2.0], 1).unwrap(), vec![ninf, 3.0, ninf]);
        assert_eq!(keep_top_k(&[1.0, 3.0, 2.0], 3).unwrap(), vec![1.0, 3.0, 2.0]);
        assert_eq!(keep_top_k(&[5.0, 5.0, 0.0], 1).unwrap(), vec![5.0, ninf, ninf]);
        assert!(keep_top_k(&[1.0], 0).is_err());
        assert!(keep_top_k(&[1.0], 2).is_err());
    }

    #[test]
    fn topk_without_noise_k2() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = noisy_topk_gate(&[0.1, 2.0, -1.0], &cfg(GateKind::TopK, 2, false), &mut rng).unwrap();
        assert_eq!(out.selected, vec![0, 1]);
        // softmax(0.1, 2.0) evaluated by hand: 1 / (1 + e^{1.9})
        let w0 = 1.0 / (1.0 + 1.9f64.exp());
        assert!((out.weights[0] - w0).abs() < 1e-15);
        assert!((out.weights[1] - (1.0 - w0)).abs() < 1e-15);
        assert_eq!(out.weights[2], 0.0);
        assert!((out.weights[0] - 0.130).abs() < 5e-4);
        assert!((out.weights[1] - 0.870).abs() < 5e-4);
    }

    #[test]
    fn topk_full_equals_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = [0.3, -0.7, 1.1];
        let out = noisy_topk_gate(&x, &cfg(GateKind::TopK, 3, false), &mut rng).unwrap();
        let sm = softmax(&x);
        for (a, b) in out.weights.iter().zip(&sm) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn noisy_gate_is_seed_deterministic() {
        let c = cfg(GateKind::TopK, 2, true);
        let x = [0.3, -0.7, 1.1];
        let a = noisy_topk_gate(&x, &c, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        let b = noisy_topk_gate(&x, &c, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        assert_eq!(a, b);
        let total: f64 = a.weights.iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
        assert!(a.weights.iter().filter(|&&w| w > 0.0).count() <= 2);
    }

    #[test]
    fn noise_without_weights_is_config_error() {
        let r = GateConfig::new(GateKind::TopK, 1, Tensor::<f64>::identity(2), None, true);
        assert!(matches!(r, Err(Error::Config(_))));
        assert!(GateConfig::new(GateKind::TopK, 3, Tensor::<f64>::identity(2), None, false).is_err());
    }

    #[test]
    fn switch_examples() {
        let c = cfg(GateKind::Switch, 1, false);
        let out = switch_gate(&[0.1, 2.0, -1.0], &c).unwrap();
        assert_eq!(out.selected, vec![1]);
        let z: f64 = [0.1f64, 2.0, -1.0].iter().map(|v| v.exp()).sum();
        let p1 = 2.0f64.exp() / z;
        assert!((out.weights[1] - p1).abs() < 1e-15);
        assert!((out.weights[1] - 0.8338).abs() < 1e-4);

        let shifted = switch_gate(&[5.1, 7.0, 4.0], &c).unwrap();
        assert_eq!(shifted.selected, out.selected);

        let single = GateConfig::new(GateKind::Switch, 1, Tensor::from_fn(&[3, 1], |_| 0.5), None, false).unwrap();
        let o = switch_gate(&[1.0, -2.0, 0.5], &single).unwrap();
        assert_eq!(o.selected, vec![0]);
        assert_eq!(o.weights, vec![1.0]);
    }

    #[test]
    fn switch_tie_goes_to_lower_index() {
        let c = cfg(GateKind::Switch, 1, false);
        assert_eq!(switch_gate(&[1.0, 1.0, 0.0], &c).unwrap().selected, vec![0]);
        assert_eq!(switch_gate(&[0.0, 1.0, 1.0], &c).unwrap().selected, vec![1]);
    }

    #[test]
    fn wrong_input_width() {
        let c = cfg(GateKind::Switch, 1, false);
        assert!(switch_gate(&[1.0, 2.0], &c).is_err());
    }

    #[test]
    fn softplus_and_sigmoid_stable() {
        assert!((softplus(0.0f64) - 2f64.ln()).abs() < 1e-15);
        assert!((softplus(800.0f64) - 800.0).abs() < 1e-12);
        assert!(softplus(-800.0f64) >= 0.0);
        assert_eq!(sigmoid(-1000.0f64), 0.0);
        assert_eq!(sigmoid(1000.0f64), 1.0);
    }
}
