mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use repair_core::diff::derive_edits;
use repair_core::grammar::serialize;
use repair_core::model::{ModelConfig, Seq2Seq};
use repair_core::train::*;
use repair_core::RepairError;

/// Pairs whose fix is a single token replacement, insertion or deletion.
fn single_edit_corpus(n: usize, words: u32, seed: u64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let x: Vec<u32> = (0..rng.gen_range(6..14)).map(|_| rng.gen_range(0..words)).collect();
            let mut y = x.clone();
            let k = rng.gen_range(0..x.len());
            match rng.gen_range(0..3) {
                0 => y[k] = (y[k] + 1) % words,
                1 => y.insert(k, rng.gen_range(0..words)),
                _ => {
                    y.remove(k);
                }
            }
            Example { edits: serialize(&derive_edits(&x, &y).unwrap()).unwrap(), x }
        })
        .collect()
}

fn same_params(a: &Seq2Seq<f32>, b: &Seq2Seq<f32>) -> bool {
    a.params().iter().zip(b.params().iter()).all(|(p, q)| {
        p.name == q.name && p.value.data().iter().zip(q.value.data()).all(|(u, v)| u.to_bits() == v.to_bits())
    })
}

fn small_model(seed: u64) -> Seq2Seq<f32> {
    let mut c = common::toy_config(12, 16, 1, 16);
    c.dropout = 0.1;
    c.init_std = 0.02;
    c.max_decode_len = 24;
    Seq2Seq::new(c, seed).unwrap()
}

#[test]
fn zero_epochs_keep_initialization() {
    let model = small_model(1);
    let init = model.clone();
    let mut t = Trainer::new(model, TrainConfig { epochs: 0, ..Default::default() }).unwrap();
    t.fit(&single_edit_corpus(10, 12, 1), &[]).unwrap();
    assert_eq!(t.epochs_done(), 0);
    assert!(same_params(t.model(), &init));
    assert!(same_params(t.best_model(), &init));
}

#[test]
fn resumed_training_is_bit_exact() {
    let data = single_edit_corpus(24, 12, 2);
    let valid = single_edit_corpus(4, 12, 3);
    let config = TrainConfig { epochs: 4, batch_size: 5, lr: 3e-3, patience: 10, seed: 9, decode_max_len: 20, ..Default::default() };

    let mut straight = Trainer::new(small_model(4), config.clone()).unwrap();
    straight.fit(&data, &valid).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut first = Trainer::new(small_model(4), config.clone()).unwrap();
    first.run_epoch(&data, &valid).unwrap();
    first.run_epoch(&data, &valid).unwrap();
    first.save_state(dir.path()).unwrap();
    drop(first);
    let mut resumed: Trainer<f32> = Trainer::resume(dir.path(), None).unwrap();
    assert_eq!(resumed.epochs_done(), 2);
    resumed.fit(&data, &valid).unwrap();

    assert_eq!(resumed.epochs_done(), 4);
    assert!(same_params(resumed.model(), straight.model()));
    assert!(same_params(resumed.best_model(), straight.best_model()));
    assert_eq!(resumed.history(), straight.history());
}

#[test]
fn resume_rejects_changed_hyperparameters() {
    let dir = tempfile::tempdir().unwrap();
    let t = Trainer::new(small_model(5), TrainConfig { epochs: 2, ..Default::default() }).unwrap();
    t.save_state(dir.path()).unwrap();
    let longer = TrainConfig { epochs: 8, ..Default::default() };
    assert!(Trainer::<f32>::resume(dir.path(), Some(longer)).is_ok());
    let other = TrainConfig { lr: 1.0, ..Default::default() };
    assert!(matches!(Trainer::<f32>::resume(dir.path(), Some(other)), Err(RepairError::Config(_))));
}

#[test]
fn patience_stops_training_and_keeps_best() {
    let data = single_edit_corpus(8, 12, 6);
    let config = TrainConfig { epochs: 10, lr: 0.0, patience: 2, batch_size: 4, decode_max_len: 20, ..Default::default() };
    let mut t = Trainer::new(small_model(7), config).unwrap();
    let init = t.model().clone();
    t.fit(&data, &data).unwrap();
    // nothing moves at lr 0, so the first epoch stays best
    assert!(t.stopped_early());
    assert_eq!(t.epochs_done(), 3);
    assert_eq!(t.best_epoch(), 1);
    assert!(same_params(t.best_model(), &init));
    let scores: Vec<f64> = t.history().iter().map(|r| r.valid_exact.unwrap()).collect();
    assert!(scores.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn non_finite_loss_aborts() {
    let mut model = small_model(8);
    let id = model.params().id("head.word.b").unwrap();
    model.params_mut().get_mut(id).value.data_mut()[0] = f32::NAN;
    let mut t = Trainer::new(model, TrainConfig { epochs: 1, ..Default::default() }).unwrap();
    let err = t.fit(&single_edit_corpus(4, 12, 8), &[]).unwrap_err();
    assert!(matches!(err, RepairError::Diverged { epoch: 0, .. }));
    assert_eq!(t.epochs_done(), 0);
}

#[test]
fn bad_inputs_are_rejected() {
    let mut t = Trainer::new(small_model(9), TrainConfig::default()).unwrap();
    assert!(matches!(t.run_epoch(&[], &[]), Err(RepairError::Config(_))));
    assert!(Trainer::new(small_model(9), TrainConfig { batch_size: 0, ..Default::default() }).is_err());
}

#[test]
fn loss_decreases_on_single_edit_corpus() {
    let mut decreasing = 0;
    for seed in 0..10 {
        let data = single_edit_corpus(200, 40, 100 + seed);
        let model: Seq2Seq<f32> = Seq2Seq::new(ModelConfig::tiny(261), seed).unwrap();
        let config = TrainConfig { epochs: 5, batch_size: 16, patience: 0, seed, ..Default::default() };
        let mut t = Trainer::new(model, config).unwrap();
        t.fit(&data, &[]).unwrap();
        let losses: Vec<f64> = t.history().iter().map(|r| r.train_loss).collect();
        eprintln!("seed {seed}: {losses:?}");
        if losses.windows(2).all(|w| w[1] < w[0]) {
            decreasing += 1;
        }
    }
    assert!(decreasing >= 9, "{decreasing}/10 seeds decreased monotonically");
}
