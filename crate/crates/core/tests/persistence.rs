use mpoe::analysis::{redundancy_report, RedundancyReport, ReportOptions};
use mpoe::experiment::{initial_bank, probe_inputs, train, ExperimentConfig};
use mpoe::io::{self, load_checkpoint, load_decomposition, save_checkpoint, save_decomposition, Dtype};
use mpoe::layer::{MoeBank, Slot};
use mpoe::mpo::{decompose, Normalization};
use mpoe::{Error, FactorizationPlan, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn quick() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.task.n_samples = 64;
    c.optimizer.epochs = 3;
    c.optimizer.batch_size = 16;
    c.model.gate.noise = true;
    c
}

#[test]
fn trained_checkpoint_round_trips() {
    let run = train(&quick()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &run.bank, Some(&run.initial_central)).unwrap();
    let ck = load_checkpoint(dir.path()).unwrap();
    assert_eq!(ck.bank, run.bank);
    assert_eq!(ck.initial_central.as_ref(), Some(&run.initial_central));

    let x = probe_inputs(32, run.bank.d_model(), 9);
    let (a, _) = run.bank.forward(&x, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let (b, _) = ck.bank.forward(&x, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn checkpoint_rejects_tampering() {
    let bank = initial_bank(&quick()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &bank, None).unwrap();
    assert!(load_checkpoint(dir.path()).unwrap().initial_central.is_none());

    // A central tensor with the wrong shape must not load.
    let central = bank.slot(Slot::W1).central();
    let wrong: Tensor = Tensor::zeros(&[central.len()]);
    io::write_tensor(&dir.path().join("w1_central.mpot"), &wrong, Dtype::F64).unwrap();
    assert!(load_checkpoint(dir.path()).is_err());

    let manifest = dir.path().join(io::MANIFEST_NAME);
    let text = std::fs::read_to_string(&manifest).unwrap();
    std::fs::write(&manifest, text.replace("mpoe-checkpoint", "something-else")).unwrap();
    assert!(matches!(load_checkpoint(dir.path()), Err(Error::Format(_))));
}

#[test]
fn decomposition_round_trips_in_both_dtypes() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w = Tensor::from_fn(&[24, 30], |_| rand::Rng::random_range(&mut rng, -1.0..1.0));
    let plan: FactorizationPlan = "i=2,3,4;j=5,3,2".parse().unwrap();
    let f = decompose(&w, &plan).unwrap();
    for dtype in [Dtype::F64, Dtype::F32] {
        let dir = tempfile::tempdir().unwrap();
        let saved = save_decomposition(dir.path(), &plan, &f, Normalization::None, &w, dtype).unwrap();
        let (manifest, back) = load_decomposition(dir.path()).unwrap();
        assert_eq!(manifest, saved);
        assert_eq!(back.bond_dims(), f.bond_dims());
        let tol = if dtype == Dtype::F64 { 1e-12 } else { 1e-5 };
        assert!(back.reconstruct().unwrap().max_abs_diff(&w).unwrap() < tol);
    }
}

#[test]
fn report_serializes_and_parses() {
    let cfg = quick();
    let bank = initial_bank(&cfg).unwrap();
    let report = redundancy_report(&bank, &probe_inputs(40, cfg.task.d_model, 3), ReportOptions::default()).unwrap();
    let text = serde_json::to_string(&report).unwrap();
    let back: RedundancyReport = serde_json::from_str(&text).unwrap();
    assert_eq!(back, report);
    assert_eq!(back.mmd.len(), 6);
    assert!(back.reference_threshold > back.threshold_at_2500);
}
