//! Reranking heads over beam hypotheses and their linear ensemble with the
//! beam log-probability.

use std::cell::RefCell;
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use repair_tensor::{triangular_lr, AdamW, AdamWConfig, Graph, ParamId, ParamStore, Real, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{RepairError, Result};
use crate::grammar::EditToken;
use crate::layers::{copy_matching, Fwd, Init, Linear};
use crate::model::{manifest_path, Encoder, ModelConfig, Network, Seq2Seq};
use crate::tokenizer::TokenId;

pub const DEFAULT_TEMPERATURE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Encoder-decoder; reads the decoder state at the final [EOS].
    Transformer,
    /// Encoder over the hypothesis followed by the input; reads position 0.
    Encoder,
}

/// One beam hypothesis with its gold label.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub tokens: Vec<EditToken>,
    pub log_prob: f64,
    pub lp_score: f64,
    pub correct: bool,
}

/// A buggy input and its beam hypotheses in beam order.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub id: String,
    pub x: Vec<TokenId>,
    pub candidates: Vec<Candidate>,
}

impl Instance {
    /// Beam rank of the first correct hypothesis.
    pub fn label(&self) -> Option<usize> {
        self.candidates.iter().position(|c| c.correct)
    }
}

/// Instances with at least one correct hypothesis.
pub fn trainable(instances: &[Instance]) -> Vec<&Instance> {
    instances.iter().filter(|i| i.label().is_some()).collect()
}

enum Body {
    Transformer(Network),
    Encoder { enc: Encoder, marker: ParamId },
}

pub struct RerankHead<T: Real> {
    kind: HeadKind,
    config: ModelConfig,
    store: ParamStore<T>,
    body: Body,
    readout: Linear,
}

impl<T: Real> Clone for RerankHead<T> {
    fn clone(&self) -> Self {
        let body = match &self.body {
            Body::Transformer(n) => Body::Transformer(n.clone()),
            Body::Encoder { enc, marker } => Body::Encoder { enc: enc.clone(), marker: *marker },
        };
        Self { kind: self.kind, config: self.config.clone(), store: self.store.clone(), body, readout: self.readout.clone() }
    }
}

impl<T: Real> RerankHead<T> {
    /// Randomly initialized head.
    pub fn fresh(kind: HeadKind, config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init { store: &mut store, rng: &mut rng, std: config.init_std };
        let body = match kind {
            HeadKind::Transformer => Body::Transformer(Network::new(&mut init, &config)?),
            HeadKind::Encoder => {
                let enc = Encoder::new(&mut init, &config)?;
                let marker = init.normal("rerank.loc_marker", &[1, config.d_model])?;
                Body::Encoder { enc, marker }
            }
        };
        let readout = Linear::new(&mut init, "rerank.readout", config.d_model, 1)?;
        Ok(Self { kind, config, store, body, readout })
    }

    /// Head whose shared parameters start from `main`.
    pub fn from_main(kind: HeadKind, main: &Seq2Seq<T>, seed: u64) -> Result<Self> {
        let mut head = Self::fresh(kind, main.config().clone(), seed)?;
        copy_matching(&mut head.store, main.params())?;
        Ok(head)
    }

    pub fn kind(&self) -> HeadKind {
        self.kind
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    fn check(&self, x: &[TokenId], hyps: &[&[EditToken]]) -> Result<()> {
        self.config.check_input(x)?;
        if hyps.is_empty() {
            return Err(RepairError::Input("no hypotheses to score".into()));
        }
        for h in hyps {
            if h.is_empty() || h.len() > self.config.max_decode_len {
                return Err(RepairError::Input(format!("hypothesis of {} tokens", h.len())));
            }
            if let Some(l) = h.iter().find_map(|t| match t {
                EditToken::Loc(l) if *l > x.len() => Some(*l),
                _ => None,
            }) {
                return Err(RepairError::Input(format!("location {l} beyond input length {}", x.len())));
            }
        }
        Ok(())
    }

    /// Raw scalar per hypothesis, shape `[1, K]`.
    fn raw(&self, f: &Fwd<T>, x: &[TokenId], hyps: &[&[EditToken]]) -> Result<Var> {
        let g = f.g;
        let c = &self.config;
        let mut outs = Vec::with_capacity(hyps.len());
        match &self.body {
            Body::Transformer(net) => {
                let memory = net.encode(f, c, x)?;
                let kv = net.dec.cross_kv(f, memory)?;
                for h in hyps {
                    let hidden = net.decode(f, c, memory, &kv, h)?;
                    let n = h.len();
                    let last = g.slice(hidden, 0, n - 1, n)?;
                    outs.push(self.readout.forward(f, last)?);
                }
            }
            Body::Encoder { enc, marker } => {
                let zero = g.constant(Tensor::zeros(vec![1, c.d_model]));
                let markers = g.concat(&[zero, f.p(*marker)], 0)?;
                for h in hyps {
                    let mut ids = Vec::with_capacity(h.len() + x.len());
                    let mut is_loc = Vec::with_capacity(h.len() + x.len());
                    for &t in h.iter() {
                        let (id, loc) = match t {
                            EditToken::Loc(l) => (x.get(l).copied().unwrap_or(c.specials.eos), 1),
                            other => (c.token_id(other).expect("not a location"), 0),
                        };
                        ids.push(id as usize);
                        is_loc.push(loc);
                    }
                    ids.extend(x.iter().map(|&t| t as usize));
                    is_loc.resize(ids.len(), 0);
                    let emb = g.embedding_gather(f.p(enc.tok_emb), &ids)?;
                    let emb = g.add(emb, g.embedding_gather(markers, &is_loc)?)?;
                    let out = enc.forward_embedded(f, emb)?;
                    outs.push(self.readout.forward(f, g.slice(out, 0, 0, 1)?)?);
                }
            }
        }
        Ok(if outs.len() == 1 { outs[0] } else { g.concat(&outs, 1)? })
    }

    /// Unnormalized head outputs, one per hypothesis.
    pub fn raw_scores(&self, x: &[TokenId], hyps: &[&[EditToken]]) -> Result<Vec<f64>> {
        self.check(x, hyps)?;
        let g = Graph::new();
        let f = Fwd::eval(&g, &self.store);
        let raw = self.raw(&f, x, hyps)?;
        let out = g.value(raw).to_f64_vec();
        Ok(out)
    }

    /// Log-softmax of the raw outputs divided by `temperature`.
    pub fn head_scores(&self, x: &[TokenId], hyps: &[&[EditToken]], temperature: f64) -> Result<Vec<f64>> {
        temperature_scores(&self.raw_scores(x, hyps)?, temperature)
    }

    fn loss(&self, g: &Graph<T>, inst: &Instance, label: usize, temperature: f64, rng: &RefCell<ChaCha8Rng>) -> Result<Var> {
        let hyps: Vec<&[EditToken]> = inst.candidates.iter().map(|c| c.tokens.as_slice()).collect();
        self.check(&inst.x, &hyps)?;
        let f = Fwd { g, store: &self.store, dropout: self.config.dropout, rng: Some(rng) };
        let raw = self.raw(&f, &inst.x, &hyps)?;
        let logits = g.scale(raw, T::lit(1.0 / temperature))?;
        Ok(g.cross_entropy(logits, &[label])?)
    }
}

/// `log softmax(raw / T)`.
pub fn temperature_scores(raw: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if raw.is_empty() {
        return Err(RepairError::Input("no hypotheses to score".into()));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(RepairError::Config(format!("temperature must be positive, got {temperature}")));
    }
    if raw.iter().any(|r| !r.is_finite()) {
        return Err(RepairError::Numeric("non-finite reranker output".into()));
    }
    let z: Vec<f64> = raw.iter().map(|r| r / temperature).collect();
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok(z.iter().map(|v| v - lse).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RerankTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for RerankTrainConfig {
    fn default() -> Self {
        Self { epochs: 12, batch_size: 16, lr: 1e-4, warmup_frac: 0.1, weight_decay: 0.01, temperature: DEFAULT_TEMPERATURE, seed: 0 }
    }
}

/// K-way classification training on instances with a correct hypothesis.
/// Returns the mean loss of each epoch.
pub fn train_head<T: Real>(head: &mut RerankHead<T>, instances: &[Instance], config: &RerankTrainConfig) -> Result<Vec<f64>> {
    let usable = trainable(instances);
    if usable.is_empty() {
        return Err(RepairError::TrainingData("no instance has a correct hypothesis".into()));
    }
    if config.batch_size == 0 {
        return Err(RepairError::Config("batch_size must be positive".into()));
    }
    let mut opt = AdamW::<T>::new(AdamWConfig { weight_decay: config.weight_decay, ..AdamWConfig::default() });
    let total = (config.epochs * usable.len().div_ceil(config.batch_size)) as u64;
    let mut losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let rng = RefCell::new(ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(epoch as u64)));
        let mut order: Vec<usize> = (0..usable.len()).collect();
        order.shuffle(&mut *rng.borrow_mut());
        let mut sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            head.store.zero_grad();
            for &i in batch {
                let inst = usable[i];
                let g = Graph::new();
                let loss = head.loss(&g, inst, inst.label().expect("filtered"), config.temperature, &rng)?;
                let v = g.value(loss).item().as_f64();
                if !v.is_finite() {
                    return Err(RepairError::Diverged { epoch, msg: format!("reranker loss {v} on {}", inst.id) });
                }
                sum += v;
                g.backward_into(loss, &mut head.store)?;
            }
            head.store.scale_grads(T::lit(1.0 / batch.len() as f64));
            let lr = triangular_lr(opt.steps_taken() + 1, total, config.warmup_frac, config.lr);
            opt.step(&mut head.store, lr).map_err(|e| RepairError::Diverged { epoch, msg: e.to_string() })?;
        }
        let mean = sum / usable.len() as f64;
        info!("{:?} head epoch {} loss {mean:.4}", head.kind, epoch + 1);
        losses.push(mean);
    }
    Ok(losses)
}

/// The two heads of the ensemble.
#[derive(Clone)]
pub struct HeadPair<T: Real> {
    pub transformer: RerankHead<T>,
    pub encoder: RerankHead<T>,
}

#[derive(Serialize, Deserialize)]
struct HeadManifest {
    config: ModelConfig,
}

impl<T: Real> HeadPair<T> {
    pub fn from_main(main: &Seq2Seq<T>, seed: u64) -> Result<Self> {
        Ok(Self {
            transformer: RerankHead::from_main(HeadKind::Transformer, main, seed)?,
            encoder: RerankHead::from_main(HeadKind::Encoder, main, seed.wrapping_add(1))?,
        })
    }

    /// Trains both heads; returns their per-epoch losses.
    pub fn train(&mut self, instances: &[Instance], config: &RerankTrainConfig) -> Result<(Vec<f64>, Vec<f64>)> {
        let t = train_head(&mut self.transformer, instances, config)?;
        let e = train_head(&mut self.encoder, instances, config)?;
        Ok((t, e))
    }

    /// Scores every candidate of every instance with both heads.
    pub fn score(&self, instances: &[Instance], temperature: f64) -> Result<Vec<ScoredInstance>> {
        instances
            .iter()
            .map(|inst| {
                let hyps: Vec<&[EditToken]> = inst.candidates.iter().map(|c| c.tokens.as_slice()).collect();
                let st = self.transformer.head_scores(&inst.x, &hyps, temperature)?;
                let se = self.encoder.head_scores(&inst.x, &hyps, temperature)?;
                let candidates = inst
                    .candidates
                    .iter()
                    .enumerate()
                    .map(|(k, c)| ScoredCandidate {
                        beam_rank: k,
                        log_prob: c.log_prob,
                        score_t: st[k],
                        score_e: se[k],
                        correct: c.correct,
                    })
                    .collect();
                Ok(ScoredInstance { id: inst.id.clone(), candidates })
            })
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut records: Vec<(String, &Tensor<T>)> = Vec::new();
        for (prefix, head) in [("transformer/", &self.transformer), ("encoder/", &self.encoder)] {
            records.extend(head.store.iter().map(|p| (format!("{prefix}{}", p.name), &p.value)));
        }
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        repair_tensor::checkpoint::write_tensors(&mut f, &records)?;
        std::io::Write::flush(&mut f)?;
        let manifest = HeadManifest { config: self.transformer.config.clone() };
        std::fs::write(manifest_path(path), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let manifest: HeadManifest = serde_json::from_str(&std::fs::read_to_string(manifest_path(path))?)?;
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let records = repair_tensor::checkpoint::read_tensors::<T, _>(&mut f)?;
        let mut pair = Self {
            transformer: RerankHead::fresh(HeadKind::Transformer, manifest.config.clone(), 0)?,
            encoder: RerankHead::fresh(HeadKind::Encoder, manifest.config, 0)?,
        };
        for (prefix, head) in [("transformer/", &mut pair.transformer), ("encoder/", &mut pair.encoder)] {
            let part: Vec<(String, Tensor<T>)> = records
                .iter()
                .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
                .collect();
            if part.len() != head.store.len() {
                return Err(RepairError::Config(format!(
                    "{prefix} has {} tensors, the head needs {}",
                    part.len(),
                    head.store.len()
                )));
            }
            head.store.load_values_from(&ParamStore::from_records(part)?)?;
        }
        Ok(pair)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub beam_rank: usize,
    pub log_prob: f64,
    pub score_t: f64,
    pub score_e: f64,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredInstance {
    pub id: String,
    pub candidates: Vec<ScoredCandidate>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleWeights {
    pub c1: f64,
    pub c2: f64,
    pub temperature: f64,
}

impl EnsembleWeights {
    /// Beam log-probability alone.
    pub const BEAM_ONLY: EnsembleWeights = EnsembleWeights { c1: 0.0, c2: 0.0, temperature: DEFAULT_TEMPERATURE };
    /// Tuned values reported for the small abstract Tufano benchmark.
    pub const TUFANO_SMALL_ABSTRACT: EnsembleWeights = EnsembleWeights { c1: 0.4, c2: 0.4, temperature: DEFAULT_TEMPERATURE };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedHypothesis {
    pub beam_rank: usize,
    pub log_prob: f64,
    pub score_t: f64,
    pub score_e: f64,
    pub score: f64,
    pub correct: bool,
}

/// Sorts by `log_prob + c1 * score_t + c2 * score_e`, descending; equal
/// scores keep beam order.
pub fn ensemble_rank(instance: &ScoredInstance, c1: f64, c2: f64) -> Vec<RankedHypothesis> {
    let mut out: Vec<RankedHypothesis> = instance
        .candidates
        .iter()
        .map(|c| RankedHypothesis {
            beam_rank: c.beam_rank,
            log_prob: c.log_prob,
            score_t: c.score_t,
            score_e: c.score_e,
            score: c.log_prob + c1 * c.score_t + c2 * c.score_e,
            correct: c.correct,
        })
        .collect();
    out.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.beam_rank.cmp(&b.beam_rank)));
    out
}

/// Fraction of instances with a correct hypothesis among the first k, for
/// k = 1..=width.
pub fn topk_accuracy(ranked: &[Vec<RankedHypothesis>], width: usize) -> Vec<f64> {
    if ranked.is_empty() {
        return vec![0.0; width];
    }
    (1..=width)
        .map(|k| ranked.iter().filter(|r| r.iter().take(k).any(|h| h.correct)).count() as f64 / ranked.len() as f64)
        .collect()
}

fn top1(instances: &[ScoredInstance], c1: f64, c2: f64) -> f64 {
    let hits = instances.iter().filter(|i| ensemble_rank(i, c1, c2).first().is_some_and(|h| h.correct)).count();
    hits as f64 / instances.len() as f64
}

/// Per-axis candidates: 10 log-spaced in [0.01, 100], then 20 linear in [0.1, 2].
pub fn grid_axes() -> (Vec<f64>, Vec<f64>) {
    let log = (0..10).map(|k| 10f64.powf(-2.0 + 4.0 * k as f64 / 9.0)).collect();
    let lin = (0..20).map(|k| 0.1 + 1.9 * k as f64 / 19.0).collect();
    (log, lin)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub c1: f64,
    pub c2: f64,
    pub top1: f64,
    pub evaluated: usize,
}

/// Best (c1, c2) by validation top-1 over both grids and (0, 0); ties go to
/// the lexicographically smaller pair.
pub fn grid_search_coefficients(valid: &[ScoredInstance]) -> Result<GridResult> {
    if valid.is_empty() {
        return Err(RepairError::Config("empty validation set".into()));
    }
    let (log, lin) = grid_axes();
    let mut pairs = vec![(0.0, 0.0)];
    for axis in [&log, &lin] {
        for &a in axis.iter() {
            for &b in axis.iter() {
                pairs.push((a, b));
            }
        }
    }
    let mut best: Option<GridResult> = None;
    for &(c1, c2) in &pairs {
        let acc = top1(valid, c1, c2);
        let better = match best {
            None => true,
            Some(b) => acc > b.top1 || (acc == b.top1 && (c1, c2) < (b.c1, b.c2)),
        };
        if better {
            best = Some(GridResult { c1, c2, top1: acc, evaluated: pairs.len() });
        }
    }
    Ok(best.expect("grid is non-empty"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub chosen_epochs: usize,
    /// (epochs, top-1 on the held-out quarter) per candidate.
    pub split_scores: Vec<(usize, f64)>,
}

/// Picks the epoch count on a seeded 75:25 re-split of `valid`, then tunes
/// both heads from their current state on all of `valid` for that many
/// epochs. `weights` are kept as they are.
pub fn finetune_on_validation<T: Real>(
    heads: &HeadPair<T>,
    valid: &[Instance],
    weights: EnsembleWeights,
    config: &RerankTrainConfig,
    epoch_candidates: &[usize],
) -> Result<(HeadPair<T>, FinetuneReport)> {
    if valid.len() < 4 {
        return Err(RepairError::Config(format!("{} validation instances cannot be split 75:25", valid.len())));
    }
    if epoch_candidates.is_empty() {
        return Err(RepairError::Config("no fine-tuning epoch candidates".into()));
    }
    let mut order: Vec<usize> = (0..valid.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed));
    let cut = valid.len() * 3 / 4;
    let fit: Vec<Instance> = order[..cut].iter().map(|&i| valid[i].clone()).collect();
    let held: Vec<Instance> = order[cut..].iter().map(|&i| valid[i].clone()).collect();
    let tune = |epochs: usize, data: &[Instance]| -> Result<HeadPair<T>> {
        let mut h = heads.clone();
        if epochs > 0 && !trainable(data).is_empty() {
            h.train(data, &RerankTrainConfig { epochs, lr: config.lr / 10.0, ..config.clone() })?;
        }
        Ok(h)
    };
    let mut scores = Vec::new();
    let mut best: Option<(usize, f64)> = None;
    for &b in epoch_candidates {
        let tuned = tune(b, &fit)?;
        let acc = top1(&tuned.score(&held, weights.temperature)?, weights.c1, weights.c2);
        scores.push((b, acc));
        if best.map_or(true, |(bb, ba)| acc > ba || (acc == ba && b < bb)) {
            best = Some((b, acc));
        }
    }
    let chosen = best.expect("non-empty").0;
    Ok((tune(chosen, valid)?, FinetuneReport { chosen_epochs: chosen, split_scores: scores }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    /// `None` stands for minus infinity.
    pub threshold: Option<f64>,
    pub accepted: usize,
    /// `None` when nothing is accepted.
    pub precision: Option<f64>,
    pub recall: f64,
}

/// Accepts predictions whose confidence is at least `threshold`.
/// `points` holds (confidence, correct) per instance.
pub fn confidence_threshold(points: &[(f64, bool)], threshold: f64) -> Result<PrPoint> {
    if points.is_empty() {
        return Err(RepairError::Config("no instances".into()));
    }
    let accepted: Vec<bool> = points.iter().filter(|(s, _)| *s >= threshold).map(|&(_, c)| c).collect();
    let correct = accepted.iter().filter(|&&c| c).count();
    Ok(PrPoint {
        threshold: (threshold != f64::NEG_INFINITY).then_some(threshold),
        accepted: accepted.len(),
        precision: (!accepted.is_empty()).then(|| correct as f64 / accepted.len() as f64),
        recall: accepted.len() as f64 / points.len() as f64,
    })
}

/// Curve over minus infinity plus `n` thresholds spread evenly over the
/// observed confidences, ascending.
pub fn pr_curve(points: &[(f64, bool)], n: usize) -> Result<Vec<PrPoint>> {
    if points.is_empty() {
        return Err(RepairError::Config("no instances".into()));
    }
    let lo = points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let hi = points.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let mut thresholds = vec![f64::NEG_INFINITY];
    for k in 0..n {
        let t = if n == 1 { lo } else { lo + (hi - lo) * k as f64 / (n - 1) as f64 };
        thresholds.push(t);
    }
    thresholds.into_iter().map(|t| confidence_threshold(points, t)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurves {
    /// Confidence = ensemble score of the top prediction.
    pub ensemble: Vec<PrPoint>,
    /// Confidence = beam log-probability of the same prediction.
    pub beam: Vec<PrPoint>,
}

/// Both curves for the ensemble's top predictions.
pub fn pr_sweep(ranked: &[Vec<RankedHypothesis>], n_thresholds: usize) -> Result<PrCurves> {
    let tops: Vec<&RankedHypothesis> = ranked.iter().filter_map(|r| r.first()).collect();
    let ens: Vec<(f64, bool)> = tops.iter().map(|h| (h.score, h.correct)).collect();
    let beam: Vec<(f64, bool)> = tops.iter().map(|h| (h.log_prob, h.correct)).collect();
    Ok(PrCurves { ensemble: pr_curve(&ens, n_thresholds)?, beam: pr_curve(&beam, n_thresholds)? })
}
