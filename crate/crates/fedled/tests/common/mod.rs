//! Shared pieces of the acceptance gate: a serialization lock so each
//! criterion's wall-clock measurement is unpolluted by sibling tests, a
//! one-line verdict printer, numeric helpers, and a small three-party
//! world cheap enough to train in milliseconds.

use std::sync::{Mutex, MutexGuard, PoisonError};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fedled::data::{generate_synthetic, DomainDataset, EvalLabels, SyntheticConfig};
use fedled::losses::KernelConfig;
use fedled::models::{
    collect_grads, derive_seed, lr_schedule, mlp_forward, AdamState, MlpParams, MlpVars,
    NetConfig,
};
use fedled::protocol::{Batcher, TrainHyper, TrainSetup};
use fedled::tape::Tape;
use fedled::Tensor;

static GATE: Mutex<()> = Mutex::new(());

/// Serialize criteria so that measured runtimes mean what they say. A
/// failed sibling poisons the mutex; the guard is still valid.
pub fn gate() -> MutexGuard<'static, ()> {
    GATE.lock().unwrap_or_else(PoisonError::into_inner)
}

/// Print the criterion's verdict line, then enforce it.
pub fn verdict(num: usize, name: &str, pass: bool, detail: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    println!("criterion {num} ({name}): {tag} [{detail}]");
    assert!(pass, "criterion {num} ({name}): {detail}");
}

/// Central finite differences of a scalar function.
pub fn fd_gradient(f: &dyn Fn(&[f64]) -> f64, params: &[f64], h: f64) -> Vec<f64> {
    let mut grad = vec![0.0; params.len()];
    let mut probe = params.to_vec();
    for i in 0..params.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let hi = f(&probe);
        probe[i] = orig - h;
        let lo = f(&probe);
        probe[i] = orig;
        grad[i] = (hi - lo) / (2.0 * h);
    }
    grad
}

/// Relative error with an absolute floor for near-zero pairs.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / f64::max(a.abs(), f64::max(b.abs(), 1e-8))
}

/// Reproducible values in roughly [-1, 1].
pub fn seeded_vec(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Largest per-element difference between two parameter sets.
pub fn max_param_diff(a: &MlpParams, b: &MlpParams) -> f64 {
    a.flatten()
        .iter()
        .zip(b.flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Gradient tensors in registration order, concatenated to match
/// `MlpParams::flatten`.
pub fn flat_grads(grads: &[Tensor]) -> Vec<f64> {
    grads.iter().flat_map(|t| t.data().iter().copied()).collect()
}

/// A 24-sample world with 6/5 raw features, 3 classes and a 4-wide
/// latent space. Returns the training setup plus both raw tables (for
/// audit contexts) and the target's held-back labels.
pub fn tiny_setup(
    seed: u64,
    lambda: f64,
    beta: f64,
    epochs: usize,
) -> (TrainSetup, DomainDataset, DomainDataset, EvalLabels) {
    let dcfg = SyntheticConfig {
        samples_per_domain: 24,
        source_features: 6,
        target_features: 5,
        overlapping_features: 3,
        latent_dim: 4,
        classes: 3,
        seed,
        ..SyntheticConfig::default()
    };
    let (src, tgt, hidden) = generate_synthetic(&dcfg).expect("tiny world generates");
    let net = NetConfig {
        extractor_hidden: vec![8],
        latent_dim: 4,
        classifier_hidden: vec![6],
        num_classes: 3,
        disc_hidden: vec![8],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "init"));
    let setup = TrainSetup {
        source_extractor: MlpParams::init(&net.extractor_dims(6), &mut rng),
        target_extractor: MlpParams::init(&net.extractor_dims(5), &mut rng),
        classifier: MlpParams::init(&net.classifier_dims(), &mut rng),
        discriminator: MlpParams::init(&net.discriminator_dims(4 * 3), &mut rng),
        rml: None,
        source_data: src.clone(),
        target_data: tgt.clone(),
        target_eval: tgt.features.clone(),
        hyper: TrainHyper {
            lambda,
            beta,
            lr0: 0.01,
            batch: 8,
            epochs,
            kernel: KernelConfig::default(),
        },
        seed,
    };
    (setup, src, tgt, hidden)
}

/// Ordinary supervised minibatch training on the labeled table: one
/// combined graph per round, Adam per network, the same annealed step
/// size. No agents, no messages, no discriminator.
pub fn plain_supervised(
    mut extractor: MlpParams,
    mut classifier: MlpParams,
    data: &DomainDataset,
    batch: usize,
    lr0: f64,
    rounds_total: usize,
    batch_seed: u64,
) -> (MlpParams, MlpParams) {
    let mut adam_f = AdamState::new(&extractor);
    let mut adam_c = AdamState::new(&classifier);
    let mut batcher = Batcher::new(data.len(), batch, batch_seed);
    for r in 0..rounds_total {
        let idx = batcher.next_batch();
        let sub = data.subset(&idx);
        let sub_labels = sub.labels.clone().expect("supervised data is labeled");
        let mut tape = Tape::new();
        let f_vars = MlpVars::register(&mut tape, &extractor);
        let c_vars = MlpVars::register(&mut tape, &classifier);
        let x = tape.leaf(sub.features);
        let latent = *mlp_forward(&mut tape, &f_vars, &extractor, x)
            .last()
            .expect("extractor has layers");
        let logits = *mlp_forward(&mut tape, &c_vars, &classifier, latent)
            .last()
            .expect("classifier has layers");
        let loss = tape.cross_entropy(logits, &sub_labels);
        let grads = tape.backward(loss);
        let f_grads = collect_grads(&tape, &f_vars, &grads);
        let c_grads = collect_grads(&tape, &c_vars, &grads);
        let p = (r + 1) as f64 / rounds_total as f64;
        let lr = lr_schedule(lr0, p);
        adam_f.step(&mut extractor, &f_grads, lr);
        adam_c.step(&mut classifier, &c_grads, lr);
    }
    (extractor, classifier)
}
