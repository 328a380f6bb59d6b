//! Teacher-forced training with AdamW, a triangular schedule and early
//! stopping on greedy exact match.

use std::cell::RefCell;
use std::fs;
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use repair_tensor::checkpoint::{read_tensors, write_tensors};
use repair_tensor::{triangular_lr, AdamW, AdamWConfig, Graph, Real, TensorError};
use serde::{Deserialize, Serialize};

use crate::decoding::{greedy_decode, hypothesis_to_fixed_code, ModelScorer};
use crate::diff::apply_edits;
use crate::error::{RepairError, Result};
use crate::grammar::{parse, EditToken};
use crate::model::Seq2Seq;
use crate::tokenizer::TokenId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    /// Epochs without a validation improvement before stopping; 0 never stops early.
    pub patience: usize,
    pub location_weight: f64,
    pub seed: u64,
    /// Validation examples used for early stopping; `None` uses all.
    pub valid_limit: Option<usize>,
    /// Token budget of the greedy validation decode.
    pub decode_max_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 16,
            lr: 1e-4,
            warmup_frac: 0.1,
            weight_decay: 0.01,
            patience: 5,
            location_weight: 1.0,
            seed: 0,
            valid_limit: None,
            decode_max_len: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(RepairError::Config("batch_size must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(RepairError::Config(format!("bad learning rate {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(RepairError::Config(format!("warmup_frac {} outside [0, 1]", self.warmup_frac)));
        }
        Ok(())
    }
}

/// A buggy input and its serialized edit tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub x: Vec<TokenId>,
    pub edits: Vec<EditToken>,
}

impl Example {
    /// The fixed sequence the edits produce.
    pub fn target(&self) -> Result<Vec<TokenId>> {
        apply_edits(&self.x, &parse(&self.edits)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_exact: Option<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct Progress {
    epochs_done: usize,
    history: Vec<EpochRecord>,
    best_epoch: usize,
    best_score: Option<f64>,
    bad_epochs: usize,
    stopped: bool,
}

pub struct Trainer<T: Real> {
    config: TrainConfig,
    model: Seq2Seq<T>,
    best: Seq2Seq<T>,
    optimizer: AdamW<T>,
    progress: Progress,
}

fn diverged(epoch: usize, msg: impl Into<String>) -> RepairError {
    RepairError::Diverged { epoch, msg: msg.into() }
}

impl<T: Real> Trainer<T> {
    pub fn new(model: Seq2Seq<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = AdamW::new(AdamWConfig { weight_decay: config.weight_decay, ..AdamWConfig::default() });
        Ok(Self { best: model.clone(), model, optimizer, config, progress: Progress::default() })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &Seq2Seq<T> {
        &self.model
    }

    /// Parameters from the best validation epoch, or the latest when no
    /// validation ran.
    pub fn best_model(&self) -> &Seq2Seq<T> {
        &self.best
    }

    pub fn into_best(self) -> Seq2Seq<T> {
        self.best
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.progress.history
    }

    pub fn epochs_done(&self) -> usize {
        self.progress.epochs_done
    }

    pub fn best_epoch(&self) -> usize {
        self.progress.best_epoch
    }

    pub fn stopped_early(&self) -> bool {
        self.progress.stopped
    }

    fn total_steps(&self, n: usize) -> u64 {
        (self.config.epochs * n.div_ceil(self.config.batch_size)) as u64
    }

    /// One pass over `train` in a seeded order. On a non-finite loss or
    /// gradient the parameters roll back to the start of the epoch.
    pub fn run_epoch(&mut self, train: &[Example], valid: &[Example]) -> Result<EpochRecord> {
        if train.is_empty() {
            return Err(RepairError::Config("empty training set".into()));
        }
        let epoch = self.progress.epochs_done;
        let rng = RefCell::new(ChaCha8Rng::seed_from_u64(self.config.seed.wrapping_add(epoch as u64)));
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut *rng.borrow_mut());
        let snapshot = (self.model.clone(), self.optimizer.clone());
        let total = self.total_steps(train.len());
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for batch in order.chunks(self.config.batch_size) {
            self.model.params_mut().zero_grad();
            for &i in batch {
                let ex = &train[i];
                let g = Graph::new();
                let loss = self.model.teacher_forced_loss_with(&g, &ex.x, &ex.edits, self.config.location_weight, Some(&rng))?;
                let value = g.value(loss).item().as_f64();
                if !value.is_finite() {
                    (self.model, self.optimizer) = snapshot;
                    return Err(diverged(epoch, format!("loss {value} on example {i}")));
                }
                loss_sum += value;
                g.backward_into(loss, self.model.params_mut())?;
            }
            self.model.params_mut().scale_grads(T::lit(1.0 / batch.len() as f64));
            lr = triangular_lr(self.optimizer.steps_taken() + 1, total, self.config.warmup_frac, self.config.lr);
            match self.optimizer.step(self.model.params_mut(), lr) {
                Ok(()) => {}
                Err(e @ TensorError::NonFiniteGradient { .. }) => {
                    (self.model, self.optimizer) = snapshot;
                    return Err(diverged(epoch, e.to_string()));
                }
                Err(e) => return Err(e.into()),
            }
        }
        let train_loss = loss_sum / train.len() as f64;
        let valid_exact = if valid.is_empty() || self.config.patience == 0 {
            None
        } else {
            let n = self.config.valid_limit.unwrap_or(valid.len()).min(valid.len());
            Some(greedy_exact_match(&self.model, &valid[..n], self.config.decode_max_len)?)
        };
        let record = EpochRecord { epoch: epoch + 1, train_loss, valid_exact, lr };
        info!("epoch {} loss {:.4} valid {:?}", record.epoch, train_loss, valid_exact);
        let p = &mut self.progress;
        p.epochs_done += 1;
        match valid_exact {
            Some(score) if p.best_score.map_or(true, |b| score > b) => {
                p.best_score = Some(score);
                p.best_epoch = p.epochs_done;
                p.bad_epochs = 0;
                self.best = self.model.clone();
            }
            Some(_) => {
                p.bad_epochs += 1;
                if p.bad_epochs >= self.config.patience {
                    p.stopped = true;
                }
            }
            None => {
                p.best_epoch = p.epochs_done;
                self.best = self.model.clone();
            }
        }
        p.history.push(record.clone());
        Ok(record)
    }

    /// Trains until the epoch budget is spent or patience runs out.
    pub fn fit(&mut self, train: &[Example], valid: &[Example]) -> Result<()> {
        while self.progress.epochs_done < self.config.epochs && !self.progress.stopped {
            self.run_epoch(train, valid)?;
        }
        Ok(())
    }

    /// Writes everything needed to resume into `dir`.
    pub fn save_state(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        self.model.save(dir.join("current.bin"))?;
        self.best.save(dir.join("best.bin"))?;
        let state = self.optimizer.state_tensors(self.model.params());
        let refs: Vec<(String, &repair_tensor::Tensor<T>)> = state.iter().map(|(n, t)| (n.clone(), t)).collect();
        let mut f = std::io::BufWriter::new(fs::File::create(dir.join("optimizer.bin"))?);
        write_tensors(&mut f, &refs)?;
        let meta = ResumeMeta { config: self.config.clone(), progress: self.progress.clone(), steps: self.optimizer.steps_taken() };
        fs::write(dir.join("progress.json"), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    /// Restores a trainer written by [`save_state`](Self::save_state).
    /// `config` may extend the epoch budget; the other fields must match.
    pub fn resume(dir: impl AsRef<Path>, config: Option<TrainConfig>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta: ResumeMeta = serde_json::from_str(&fs::read_to_string(dir.join("progress.json"))?)?;
        let config = match config {
            Some(c) if (TrainConfig { epochs: meta.config.epochs, ..c.clone() }) != meta.config => {
                return Err(RepairError::Config("resume config differs from the saved run beyond `epochs`".into()))
            }
            Some(c) => c,
            None => meta.config,
        };
        let model = Seq2Seq::load(dir.join("current.bin"))?;
        let best = Seq2Seq::load(dir.join("best.bin"))?;
        let mut trainer = Self::new(model, config)?;
        let mut f = std::io::BufReader::new(fs::File::open(dir.join("optimizer.bin"))?);
        let tensors = read_tensors(&mut f)?;
        trainer.optimizer.restore(trainer.model.params(), meta.steps, &tensors)?;
        trainer.best = best;
        trainer.progress = meta.progress;
        Ok(trainer)
    }
}

#[derive(Serialize, Deserialize)]
struct ResumeMeta {
    config: TrainConfig,
    progress: Progress,
    steps: u64,
}

/// Fraction of `examples` whose greedy decode reproduces the target exactly.
pub fn greedy_exact_match<T: Real>(model: &Seq2Seq<T>, examples: &[Example], max_len: usize) -> Result<f64> {
    if examples.is_empty() {
        return Err(RepairError::Evaluation("no examples to evaluate".into()));
    }
    let mut hits = 0;
    for ex in examples {
        let scorer = ModelScorer::new(model, &ex.x)?;
        let hyp = greedy_decode(&scorer, max_len, 0.6)?;
        if hypothesis_to_fixed_code(&ex.x, &hyp.tokens).ok() == Some(ex.target()?) {
            hits += 1;
        }
    }
    Ok(hits as f64 / examples.len() as f64)
}
