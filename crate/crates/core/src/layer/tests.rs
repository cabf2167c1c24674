use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::gradcheck::check_gradients;
use super::*;
use crate::gating::{GateConfig, GateKind};
use crate::mpo::{count_params, plan_factorization};

fn randn(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| scale * rng.sample::<f64, _>(StandardNormal))
}

fn gate(kind: GateKind, k: usize, n: usize, d: usize, noise: bool, rng: &mut ChaCha8Rng) -> GateConfig {
    let wn = noise.then(|| randn(&[d, n], 0.5, rng));
    GateConfig::new(kind, k, randn(&[d, n], 0.5, rng), wn, noise).unwrap()
}

fn bank(d: usize, f: usize, m: usize, g: GateConfig, rng: &mut ChaCha8Rng) -> (MpoeExpertBank, Tensor, Tensor) {
    let w1 = randn(&[d, f], 0.4, rng);
    let w2 = randn(&[f, d], 0.4, rng);
    let p1 = plan_factorization(d, f, m).unwrap();
    let p2 = plan_factorization(f, d, m).unwrap();
    let b = MpoeExpertBank::init_from_dense(&w1, &w2, &p1, &p2, g).unwrap();
    (b, w1, w2)
}

/// Moves every auxiliary tensor and bias of every expert independently.
fn diversify(b: &mut MpoeExpertBank, rng: &mut ChaCha8Rng) {
    for s in Slot::ALL {
        for i in 0..b.n_experts() {
            for j in 0..b.slot(s).auxiliaries(i).len() {
                let t = b.slot(s).auxiliaries(i)[j].clone();
                let noise = randn(t.shape(), 0.1, rng);
                b.set_auxiliary(s, i, j, t.add(&noise).unwrap()).unwrap();
            }
            let len = b.bias(s, i).len();
            b.set_bias(s, i, (0..len).map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal)).collect())
                .unwrap();
        }
    }
}

/// Plain-loop `ReLU(x W1 + b1) W2 + b2` for one row.
fn ffn_oracle(x: &[f64], w1: &Tensor, b1: &[f64], w2: &Tensor, b2: &[f64]) -> Vec<f64> {
    let (d, f) = (w1.rows(), w1.cols());
    let h: Vec<f64> = (0..f)
        .map(|c| ((0..d).map(|r| x[r] * w1.at(r, c)).sum::<f64>() + b1[c]).max(0.0))
        .collect();
    (0..d).map(|c| (0..f).map(|r| h[r] * w2.at(r, c)).sum::<f64>() + b2[c]).collect()
}

#[test]
fn init_replicates_and_round_trips() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let g = gate(GateKind::TopK, 2, 3, 6, false, &mut rng);
    let (b, w1, w2) = bank(6, 8, 3, g, &mut rng);
    for i in 0..3 {
        assert!(b.expert_weight(Slot::W1, i).unwrap().max_abs_diff(&w1).unwrap() < 1e-10);
        assert!(b.expert_weight(Slot::W2, i).unwrap().max_abs_diff(&w2).unwrap() < 1e-10);
        assert_eq!(b.expert_weight(Slot::W1, i).unwrap(), b.expert_weight(Slot::W1, 0).unwrap());
        assert!(b.bias(Slot::W1, i).iter().all(|&v| v == 0.0));
    }
    let direct = count_params(&crate::mpo::decompose(&w1, b.slot(Slot::W1).plan()).unwrap());
    assert_eq!(b.slot(Slot::W1).param_count(), direct);
}

#[test]
fn init_rejects_mismatch() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let g = gate(GateKind::TopK, 1, 2, 6, false, &mut rng);
    let w1 = randn(&[6, 8], 1.0, &mut rng);
    let w2 = randn(&[8, 6], 1.0, &mut rng);
    let p = plan_factorization(6, 6, 3).unwrap();
    let p2 = plan_factorization(8, 6, 3).unwrap();
    assert!(matches!(
        MpoeExpertBank::init_from_dense(&w1, &w2, &p, &p2, g.clone()),
        Err(Error::Config(_))
    ));
    let p1 = plan_factorization(6, 8, 1).unwrap();
    assert!(MpoeExpertBank::init_from_dense(&w1, &w2, &p1, &p2, g).is_err());
}

#[test]
fn isolation_and_sharing() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let g = gate(GateKind::TopK, 1, 2, 6, false, &mut rng);
    let (mut b, _, _) = bank(6, 8, 3, g, &mut rng);
    let before: Vec<Tensor> = (0..2).map(|i| b.expert_weight(Slot::W1, i).unwrap()).collect();

    let a = b.slot(Slot::W1).auxiliaries(0)[0].map(|v| v * 1.5);
    b.set_auxiliary(Slot::W1, 0, 0, a).unwrap();
    assert_eq!(b.expert_weight(Slot::W1, 1).unwrap(), before[1]);
    assert_ne!(b.expert_weight(Slot::W1, 0).unwrap(), before[0]);

    let c = b.slot(Slot::W1).central().map(|v| v + 0.01);
    b.set_central(Slot::W1, c).unwrap();
    assert_ne!(b.expert_weight(Slot::W1, 1).unwrap(), before[1]);
    assert!(b.set_central(Slot::W1, Tensor::zeros(&[1, 1, 1, 1])).is_err());
    assert!(matches!(b.expert_weight(Slot::W1, 2), Err(Error::IndexOutOfRange { .. })));
}

#[test]
fn identical_experts_give_identical_outputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let g = gate(GateKind::Switch, 1, 3, 6, false, &mut rng);
    let (b, _, _) = bank(6, 8, 3, g, &mut rng);
    let x = randn(&[5, 6], 1.0, &mut rng);
    let e0 = b.expert_output(0, &x).unwrap();
    for i in 1..3 {
        assert_eq!(b.expert_output(i, &x).unwrap(), e0);
    }
}

#[test]
fn single_expert_matches_dense_ffn() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let g = gate(GateKind::Switch, 1, 1, 6, false, &mut rng);
    let (mut b, _, _) = bank(6, 8, 3, g, &mut rng);
    diversify(&mut b, &mut rng);
    let x = randn(&[7, 6], 1.0, &mut rng);
    let (y, trace) = b.forward(&x, &mut rng).unwrap();
    let (w1, w2) = (b.expert_weight(Slot::W1, 0).unwrap(), b.expert_weight(Slot::W2, 0).unwrap());
    for r in 0..7 {
        assert_eq!(trace.weights(r), &[1.0]);
        let want = ffn_oracle(x.row(r), &w1, b.bias(Slot::W1, 0), &w2, b.bias(Slot::W2, 0));
        for (a, e) in y.row(r).iter().zip(&want) {
            assert!((a - e).abs() < 1e-10);
        }
    }
}

#[test]
fn switch_rows_equal_weighted_expert_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let g = gate(GateKind::Switch, 1, 3, 6, false, &mut rng);
    let (mut b, _, _) = bank(6, 8, 3, g, &mut rng);
    diversify(&mut b, &mut rng);
    let x = randn(&[12, 6], 1.0, &mut rng);
    let (y, trace) = b.forward(&x, &mut rng).unwrap();
    for r in 0..12 {
        let j = trace.selected(r)[0];
        let w = trace.weights(r)[j];
        let w1 = b.expert_weight(Slot::W1, j).unwrap();
        let w2 = b.expert_weight(Slot::W2, j).unwrap();
        let want = ffn_oracle(x.row(r), &w1, b.bias(Slot::W1, j), &w2, b.bias(Slot::W2, j));
        for (a, e) in y.row(r).iter().zip(&want) {
            assert!((a - w * e).abs() < 1e-8);
        }
    }
}

#[test]
fn dense_copy_forward_matches() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let g = gate(GateKind::TopK, 2, 4, 6, true, &mut rng);
    let (mut b, _, _) = bank(6, 8, 3, g, &mut rng);
    diversify(&mut b, &mut rng);
    let dense = DenseMoeBank::from_bank(&b).unwrap();
    assert_eq!(dense.param_counts().shared, 0);
    for seed in 0..20 {
        let x = randn(&[9, 6], 1.0, &mut rng);
        let (ya, _) = b.forward(&x, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let (yb, _) = dense.forward(&x, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        assert!(ya.relative_error(&yb).unwrap() < 1e-8);
    }
}

#[test]
fn gradients_match_finite_differences() {
    for (kind, k, noise, seed) in [
        (GateKind::TopK, 2, true, 8),
        (GateKind::TopK, 2, false, 9),
        (GateKind::Switch, 1, false, 10),
        (GateKind::Softmax, 2, false, 11),
    ] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = gate(kind, k, 2, 6, noise, &mut rng);
        let (mut b, _, _) = bank(6, 8, 3, g, &mut rng);
        diversify(&mut b, &mut rng);
        let x = randn(&[5, 6], 1.0, &mut rng);
        let probe = randn(&[5, 6], 1.0, &mut rng);
        for c in check_gradients(&b, &x, &probe, seed, 1e-5).unwrap() {
            assert!(c.relative_error < 1e-5, "{kind:?} {c:?}");
        }
    }
}

#[test]
fn central_gradient_sums_experts() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let g = gate(GateKind::Softmax, 2, 2, 6, false, &mut rng);
    let (mut b, _, _) = bank(6, 8, 3, g, &mut rng);
    diversify(&mut b, &mut rng);
    let x = randn(&[4, 6], 1.0, &mut rng);
    let probe = randn(&[4, 6], 1.0, &mut rng);
    let (_, trace) = b.forward(&x, &mut rng).unwrap();
    let with = b.backward(&x, &probe, &trace, true).unwrap();
    let without = b.backward(&x, &probe, &trace, false).unwrap();
    assert!(without.central.iter().all(Option::is_none));
    assert_eq!(with.auxiliaries, without.auxiliaries);
    assert!(with.central[0].as_ref().unwrap().frobenius_norm() > 0.0);
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let g = gate(GateKind::TopK, 2, 3, 6, true, &mut rng);
    let (b, _, _) = bank(6, 8, 3, g, &mut rng);
    let x = randn(&[4, 6], 1.0, &mut rng);
    let (_, trace) = b.forward(&x, &mut rng).unwrap();
    let g = b.backward(&x, &Tensor::zeros(&[4, 6]), &trace, true).unwrap();
    let all_zero = |t: &Tensor| t.data().iter().all(|&v| v == 0.0);
    assert!(g.central.iter().flatten().all(all_zero));
    assert!(g.auxiliaries.iter().flatten().flatten().all(all_zero));
    assert!(g.biases.iter().flatten().flatten().all(|&v| v == 0.0));
    assert!(all_zero(&g.gate_weights) && all_zero(&g.input));
}

#[test]
fn unrouted_expert_has_zero_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    // Positive inputs and a gate that only favours expert 0.
    let mut wg = Tensor::zeros(&[6, 3]);
    for r in 0..6 {
        wg.data_mut()[r * 3] = 1.0;
    }
    let g = GateConfig::new(GateKind::TopK, 1, wg, None, false).unwrap();
    let (mut b, _, _) = bank(6, 8, 3, g, &mut rng);
    diversify(&mut b, &mut rng);
    let x = Tensor::from_fn(&[5, 6], |_| rng.random_range(0.1..1.0));
    let (_, trace) = b.forward(&x, &mut rng).unwrap();
    assert_eq!(trace.expert_loads(3), vec![5, 0, 0]);
    let g = b.backward(&x, &randn(&[5, 6], 1.0, &mut rng), &trace, true).unwrap();
    for s in 0..2 {
        for i in 1..3 {
            assert!(g.auxiliaries[s][i].iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
        }
        assert!(g.auxiliaries[s][0].iter().any(|t| t.frobenius_norm() > 0.0));
    }
}

#[test]
fn stale_trace_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let g = gate(GateKind::TopK, 1, 2, 6, false, &mut rng);
    let (mut b, _, _) = bank(6, 8, 3, g, &mut rng);
    let x = randn(&[3, 6], 1.0, &mut rng);
    let (_, trace) = b.forward(&x, &mut rng).unwrap();
    b.set_bias(Slot::W2, 1, vec![1.0; 6]).unwrap();
    let gy = Tensor::zeros(&[3, 6]);
    assert!(matches!(b.backward(&x, &gy, &trace, true), Err(Error::Contract(_))));
    let x2 = randn(&[2, 6], 1.0, &mut rng);
    assert!(matches!(b.backward(&x2, &gy, &trace, true), Err(Error::Contract(_))));
}

#[test]
fn forward_rejects_bad_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let g = gate(GateKind::TopK, 1, 2, 6, false, &mut rng);
    let (b, _, _) = bank(6, 8, 3, g, &mut rng);
    assert!(matches!(b.forward(&randn(&[3, 5], 1.0, &mut rng), &mut rng), Err(Error::Shape(_))));
    let nan = Tensor::from_fn(&[2, 6], |i| if i == 3 { f64::NAN } else { 0.0 });
    assert!(matches!(b.forward(&nan, &mut rng), Err(Error::Numeric(_))));
}

#[test]
fn dense_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let g = gate(GateKind::TopK, 2, 3, 4, false, &mut rng);
    let w1: Vec<Tensor> = (0..3).map(|_| randn(&[4, 5], 0.5, &mut rng)).collect();
    let w2: Vec<Tensor> = (0..3).map(|_| randn(&[5, 4], 0.5, &mut rng)).collect();
    let b1 = vec![vec![0.1; 5]; 3];
    let b2 = vec![vec![-0.1; 4]; 3];
    let dense = DenseMoeBank::new(w1, w2, b1, b2, g).unwrap();
    let x = randn(&[6, 4], 1.0, &mut rng);
    let probe = randn(&[6, 4], 1.0, &mut rng);
    let loss = |b: &DenseMoeBank| -> f64 {
        let (y, _) = b.forward(&x, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
    };
    let (_, trace) = dense.forward(&x, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let grads = dense.backward(&x, &probe, &trace).unwrap();
    let h = 1e-5;
    for s in Slot::ALL {
        for i in 0..3 {
            for e in 0..20 {
                let mut up = dense.clone();
                up.weight_mut(s, i).data_mut()[e] += h;
                let mut down = dense.clone();
                down.weight_mut(s, i).data_mut()[e] -= h;
                let numeric = (loss(&up) - loss(&down)) / (2.0 * h);
                let a = grads.weights[s.index()][i].data()[e];
                assert!((a - numeric).abs() < 1e-7, "{s:?} {i} {e}: {a} vs {numeric}");
            }
        }
    }
}

#[test]
fn param_counts_follow_ratio() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    for n in [1, 2, 5] {
        let g = gate(GateKind::TopK, 1, n, 6, false, &mut rng);
        let (b, _, _) = bank(6, 8, 3, g, &mut rng);
        let c = bank_param_counts(&b);
        assert!((c.ratio() - efficiency_ratio(n, c.gamma)).abs() < 1e-12);
        assert_eq!(c.biases, n * 14);
        assert_eq!(c.gate, 6 * n);
        if n == 1 {
            let full = b.factors(Slot::W1, 0).unwrap().count_params().total()
                + b.factors(Slot::W2, 0).unwrap().count_params().total();
            assert_eq!(c.total, full);
        }
    }
}

#[test]
fn mse_loss_gradient() {
    let y = Tensor::new(vec![1, 2], vec![1.0, 3.0]).unwrap();
    let t = Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
    let (l, g): (f64, Tensor) = mse_loss(&y, &t).unwrap();
    assert!((l - 2.5).abs() < 1e-15);
    assert_eq!(g.data(), &[1.0, 2.0]);
}
