use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::*;
use crate::gating::{GateConfig, GateKind};
use crate::layer::mse_loss;
use crate::mpo::plan_factorization;
use crate::tensor::Tensor;

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| 0.4 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
}

fn small_bank(seed: u64) -> MpoeExpertBank {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gate = GateConfig::new(GateKind::TopK, 2, randn(&[6, 3], &mut rng), None, false).unwrap();
    let w1 = randn(&[6, 8], &mut rng);
    let w2 = randn(&[8, 6], &mut rng);
    let p1 = plan_factorization(6, 8, 3).unwrap();
    let p2 = plan_factorization(8, 6, 3).unwrap();
    MpoeExpertBank::init_from_dense(&w1, &w2, &p1, &p2, gate).unwrap()
}

fn batch(step: u64) -> (Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + step);
    (randn(&[4, 6], &mut rng), randn(&[4, 6], &mut rng))
}

fn masked_run(bank: &mut MpoeExpertBank, cfg: &MaskedUpdateConfig, steps: u64) -> TrainState {
    let mut state = TrainState::new(cfg.seed);
    for t in 0..steps {
        let (x, target) = batch(t);
        let (y, trace) = bank.forward(&x, &mut ChaCha8Rng::seed_from_u64(t)).unwrap();
        let (_, gy) = mse_loss(&y, &target).unwrap();
        let mask = state.draw_mask(bank, cfg).unwrap();
        let grads = bank.backward(&x, &gy, &trace, mask.needs_central_gradient()).unwrap();
        masked_step(bank, &mut state, &grads, &mask, cfg).unwrap();
    }
    state
}

#[test]
fn mask_degenerate_probabilities() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..100 {
        assert_eq!(generate_mask(0.0, MaskGranularity::PerStepScalar, 1, &mut rng).unwrap(), Mask::Scalar(false));
        assert_eq!(generate_mask(1.0, MaskGranularity::PerStepScalar, 1, &mut rng).unwrap(), Mask::Scalar(true));
    }
    let Mask::Elementwise(v) = generate_mask(1.0, MaskGranularity::PerElement, 7, &mut rng).unwrap() else {
        panic!("expected elementwise mask");
    };
    assert_eq!(v, vec![true; 7]);
    assert!(generate_mask(1.5, MaskGranularity::PerElement, 1, &mut rng).is_err());
}

#[test]
fn mask_frequency() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let hits = (0..10_000)
        .filter(|_| generate_mask(0.9, MaskGranularity::PerStepScalar, 1, &mut rng).unwrap() == Mask::Scalar(true))
        .count();
    let mean = hits as f64 / 10_000.0;
    assert!((0.89..=0.91).contains(&mean), "{mean}");
}

#[test]
fn full_mask_freezes_central_only() {
    let mut bank = small_bank(2);
    let start = bank.clone();
    let cfg = MaskedUpdateConfig::new(0.05, 1.0, 3).unwrap();
    let state = masked_run(&mut bank, &cfg, 200);
    assert_eq!(state.step(), 200);
    assert_eq!(state.central_updates(), 0);
    for s in Slot::ALL {
        assert_eq!(bank.slot(s).central(), start.slot(s).central());
        assert_ne!(bank.slot(s).auxiliaries(0), start.slot(s).auxiliaries(0));
    }
    assert_ne!(bank.gate().gate_weights(), start.gate().gate_weights());
}

#[test]
fn empty_mask_equals_plain_sgd() {
    let cfg = MaskedUpdateConfig::new(0.05, 0.0, 4).unwrap();
    let mut masked = small_bank(5);
    masked_run(&mut masked, &cfg, 50);

    let mut plain = small_bank(5);
    let mut state = TrainState::new(0);
    for t in 0..50 {
        let (x, target) = batch(t);
        let (y, trace) = plain.forward(&x, &mut ChaCha8Rng::seed_from_u64(t)).unwrap();
        let (_, gy) = mse_loss(&y, &target).unwrap();
        let grads = plain.backward(&x, &gy, &trace, true).unwrap();
        sgd_step(&mut plain, &mut state, &grads, 0.05, 0.0).unwrap();
    }
    assert_eq!(masked, plain);
}

#[test]
fn central_update_fraction() {
    let mut bank = small_bank(6);
    let cfg = MaskedUpdateConfig::new(0.01, 0.9, 7).unwrap();
    let state = masked_run(&mut bank, &cfg, 2000);
    let frac = state.central_updates() as f64 / 2000.0;
    // 3σ for 2000 draws is about 0.02.
    assert!((0.08..=0.12).contains(&frac), "{frac}");
}

#[test]
fn per_element_mask_freezes_masked_entries() {
    let mut bank = small_bank(8);
    let start = bank.clone();
    let cfg = MaskedUpdateConfig {
        granularity: MaskGranularity::PerElement,
        ..MaskedUpdateConfig::new(0.05, 0.5, 9).unwrap()
    };
    let mut state = TrainState::new(cfg.seed);
    let (x, target) = batch(0);
    let (y, trace) = bank.forward(&x, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let (_, gy) = mse_loss(&y, &target).unwrap();
    let mask = state.draw_mask(&bank, &cfg).unwrap();
    let grads = bank.backward(&x, &gy, &trace, true).unwrap();
    masked_step(&mut bank, &mut state, &grads, &mask, &cfg).unwrap();
    for s in Slot::ALL {
        let Mask::Elementwise(b) = &mask.0[s.index()] else { panic!() };
        let (old, new) = (start.slot(s).central().data(), bank.slot(s).central().data());
        let g = grads.central[s.index()].as_ref().unwrap().data();
        for e in 0..b.len() {
            if b[e] {
                assert_eq!(old[e], new[e]);
            } else {
                assert_eq!(new[e], old[e] - 0.05 * g[e]);
            }
        }
    }
}

#[test]
fn kept_update_without_gradient_is_contract_error() {
    let mut bank = small_bank(10);
    let cfg = MaskedUpdateConfig::new(0.05, 0.0, 0).unwrap();
    let mut state = TrainState::new(0);
    let (x, target) = batch(0);
    let (y, trace) = bank.forward(&x, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let (_, gy) = mse_loss(&y, &target).unwrap();
    let grads = bank.backward(&x, &gy, &trace, false).unwrap();
    let mask = CentralMask([Mask::Scalar(false), Mask::Scalar(false)]);
    assert!(matches!(
        masked_step(&mut bank, &mut state, &grads, &mask, &cfg),
        Err(Error::Contract(_))
    ));
}

#[test]
fn training_is_deterministic() {
    let cfg = MaskedUpdateConfig {
        momentum: 0.9,
        ..MaskedUpdateConfig::new(0.02, 0.5, 11).unwrap()
    };
    let mut a = small_bank(12);
    let mut b = small_bank(12);
    masked_run(&mut a, &cfg, 30);
    masked_run(&mut b, &cfg, 30);
    assert_eq!(a, b);
}

#[test]
fn config_validation() {
    assert!(MaskedUpdateConfig::new(0.0, 0.5, 0).is_err());
    assert!(MaskedUpdateConfig::new(0.1, -0.1, 0).is_err());
    let bad = MaskedUpdateConfig {
        momentum: 1.0,
        ..MaskedUpdateConfig::new(0.1, 0.5, 0).unwrap()
    };
    assert!(bad.validate().is_err());
    assert_eq!("per_element".parse::<MaskGranularity>().unwrap(), MaskGranularity::PerElement);
}

#[test]
fn warmup_schedule() {
    let lr = warmup_lr(4000, 512, 4000).unwrap();
    assert!((lr - 512f64.powf(-0.5) * 4000f64.powf(-0.5)).abs() < 1e-15);
    assert!((lr - 6.987_712e-4).abs() < 1e-9);
    let w = 500;
    let at = |s| warmup_lr(s, 768, w).unwrap();
    assert!((1..w).all(|s| at(s) < at(s + 1)));
    assert!((w..3 * w).all(|s| at(s) > at(s + 1)));
    assert!(warmup_lr(0, 512, 10).is_err());
}
