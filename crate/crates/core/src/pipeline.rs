//! End-to-end runs: corpus, tokenizer, gold edits, training, beam search,
//! reranking and evaluation, each stage cached in a work directory.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    build_instances, ingest, read_jsonl, split, write_atomic, write_jsonl, EditRecord, FilterCounts, HypsRecord, Sample,
};
use crate::decoding::{beam_search, hypothesis_to_fixed_code, BeamConfig, ModelScorer};
use crate::diff::{stats_of_programs, EditStats};
use crate::error::{RepairError, Result};
use crate::grammar::{parse, EditCodec};
use crate::model::{manifest_path, ModelConfig, Seq2Seq};
use crate::reranker::{
    ensemble_rank, finetune_on_validation, grid_search_coefficients, pr_sweep, EnsembleWeights, FinetuneReport,
    GridResult, HeadPair, Instance, PrCurves, RankedHypothesis, RerankTrainConfig, ScoredCandidate, ScoredInstance,
};
use crate::synth::{generate_programs, synthesize_bug_corpus, BugPair, MutationSpec};
use crate::tokenizer::{train_bpe_up_to, word_corpus, TokenId, Vocab};
use crate::train::{EpochRecord, Trainer};

/// Network precision used by the pipeline.
pub type Float = f32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CorpusSource {
    Synthetic { programs: usize, pairs: usize, mutations: MutationSpec },
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RerankStage {
    pub train: RerankTrainConfig,
    /// Training pairs decoded to build reranker data; `None` uses all.
    pub max_train_instances: Option<usize>,
    pub finetune_epochs: Vec<usize>,
}

impl Default for RerankStage {
    fn default() -> Self {
        Self { train: RerankTrainConfig::default(), max_train_instances: None, finetune_epochs: vec![1, 2, 3] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub corpus: CorpusSource,
    pub train_frac: f64,
    pub valid_frac: f64,
    /// Upper bound; a small corpus may support fewer merges.
    pub vocab_size: usize,
    /// `vocab_size` is replaced by the trained vocabulary's size.
    pub model: ModelConfig,
    pub train: crate::train::TrainConfig,
    pub beam: BeamConfig,
    /// `None` skips every reranker stage.
    pub rerank: Option<RerankStage>,
    pub pr_thresholds: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::synthetic(5000, 0)
    }
}

impl PipelineConfig {
    /// Synthetic corpus of `pairs` bugs with the tiny model, at most 20
    /// epochs and reranker data from up to 1000 training pairs.
    pub fn synthetic(pairs: usize, seed: u64) -> Self {
        Self {
            seed,
            corpus: CorpusSource::Synthetic { programs: pairs, pairs, mutations: MutationSpec::default() },
            train_frac: 0.8,
            valid_frac: 0.1,
            vocab_size: 1000,
            model: ModelConfig { max_len: 128, ..ModelConfig::tiny(0) },
            train: crate::train::TrainConfig { epochs: 20, lr: 1e-3, valid_limit: Some(200), seed, ..Default::default() },
            beam: BeamConfig::default(),
            rerank: Some(RerankStage {
                train: RerankTrainConfig { seed, ..Default::default() },
                max_train_instances: Some(1000),
                ..Default::default()
            }),
            pr_thresholds: 20,
        }
    }

    pub fn fingerprint(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(self)?)))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.train_frac > 0.0 && self.valid_frac > 0.0 && self.train_frac + self.valid_frac < 1.0) {
            return Err(RepairError::Config("train, valid and test splits must all be non-empty".into()));
        }
        if self.beam.beam_size == 0 {
            return Err(RepairError::Config("beam_size must be positive".into()));
        }
        self.train.validate()
    }
}

/// Ranked fixed-code candidates for one instance; `None` marks a hypothesis
/// that failed to apply.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub id: String,
    pub candidates: Vec<Option<Vec<TokenId>>>,
}

/// Top-k exact match for k = 1..=width against gold fixed code, matched by id.
pub fn exact_match_topk(predictions: &[Prediction], gold: &[(String, Vec<TokenId>)], width: usize) -> Result<Vec<f64>> {
    if predictions.len() != gold.len() {
        return Err(RepairError::Evaluation(format!("{} predictions for {} gold programs", predictions.len(), gold.len())));
    }
    if gold.is_empty() {
        return Err(RepairError::Evaluation("nothing to evaluate".into()));
    }
    let mut first_hit = Vec::with_capacity(gold.len());
    for (p, (id, y)) in predictions.iter().zip(gold) {
        if &p.id != id {
            return Err(RepairError::Evaluation(format!("id mismatch: prediction {} vs gold {id}", p.id)));
        }
        first_hit.push(p.candidates.iter().position(|c| c.as_ref() == Some(y)));
    }
    Ok((1..=width)
        .map(|k| first_hit.iter().filter(|h| h.is_some_and(|r| r < k)).count() as f64 / gold.len() as f64)
        .collect())
}

/// Beam search over every sample, in order.
pub fn decode_samples(model: &Seq2Seq<Float>, samples: &[Sample], beam: &BeamConfig) -> Result<Vec<HypsRecord>> {
    let codec = EditCodec::new(model.config().vocab_size, model.config().specials);
    samples
        .iter()
        .map(|s| {
            let scorer = ModelScorer::new(model, &s.x)?;
            Ok(HypsRecord::new(&s.id, &beam_search(&scorer, beam)?.hypotheses, &codec))
        })
        .collect()
}

/// Scores without heads, for the beam-only rows.
pub fn unscored(instances: &[Instance]) -> Vec<ScoredInstance> {
    instances
        .iter()
        .map(|inst| ScoredInstance {
            id: inst.id.clone(),
            candidates: inst
                .candidates
                .iter()
                .enumerate()
                .map(|(k, c)| ScoredCandidate { beam_rank: k, log_prob: c.log_prob, score_t: 0.0, score_e: 0.0, correct: c.correct })
                .collect(),
        })
        .collect()
}

fn fixed_candidates(inst: &Instance) -> Vec<Option<Vec<TokenId>>> {
    inst.candidates.iter().map(|c| hypothesis_to_fixed_code(&inst.x, &c.tokens).ok()).collect()
}

/// Predictions in beam order.
pub fn beam_predictions(instances: &[Instance]) -> Vec<Prediction> {
    instances.iter().map(|i| Prediction { id: i.id.clone(), candidates: fixed_candidates(i) }).collect()
}

/// Predictions in the order of `ranked`.
pub fn ranked_predictions(instances: &[Instance], ranked: &[Vec<RankedHypothesis>]) -> Vec<Prediction> {
    instances
        .iter()
        .zip(ranked)
        .map(|(inst, r)| {
            let fixed = fixed_candidates(inst);
            Prediction { id: inst.id.clone(), candidates: r.iter().map(|h| fixed[h.beam_rank].clone()).collect() }
        })
        .collect()
}

pub fn rank_all(scored: &[ScoredInstance], weights: EnsembleWeights) -> Vec<Vec<RankedHypothesis>> {
    scored.iter().map(|s| ensemble_rank(s, weights.c1, weights.c2)).collect()
}

/// Hypotheses that parse but cannot be applied to their input.
pub fn application_failures(instances: &[Instance]) -> usize {
    instances
        .iter()
        .flat_map(|i| i.candidates.iter().map(move |c| (i, c)))
        .filter(|(i, c)| parse(&c.tokens).is_ok() && hypothesis_to_fixed_code(&i.x, &c.tokens).is_err())
        .count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub name: String,
    pub topk: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetCounts {
    pub pairs: usize,
    pub train: FilterCounts,
    pub valid: FilterCounts,
    pub test: FilterCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fingerprint: String,
    pub vocab_size: usize,
    pub counts: DatasetCounts,
    pub edit_stats: EditStats,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// Test-set top-k rows, k = 1..=beam width.
    pub rows: Vec<AccuracyRow>,
    /// Every row agrees at k = beam width.
    pub topk_invariant: bool,
    pub application_failures: usize,
    pub weights: Option<EnsembleWeights>,
    pub grid: Option<GridResult>,
    pub finetune: Option<FinetuneReport>,
    pub pr: PrCurves,
}

pub const ROW_BEAM_LP: &str = "beam (length-penalized order)";
pub const ROW_BEAM_ONLY: &str = "beam-only (log-prob order)";
pub const ROW_ENSEMBLE: &str = "ensemble";
pub const ROW_FINETUNED: &str = "fine-tuned ensemble";

impl EvalReport {
    pub fn row(&self, name: &str) -> Option<&AccuracyRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn to_table(&self) -> String {
        let width = self.rows.first().map_or(0, |r| r.topk.len());
        let mut s = String::new();
        let _ = write!(s, "{:<32}", "ranking");
        for k in 1..=width {
            let _ = write!(s, "{:>8}", format!("top-{k}"));
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{:<32}", r.name);
            for a in &r.topk {
                let _ = write!(s, "{:>8.2}", 100.0 * a);
            }
            s.push('\n');
        }
        let c = &self.counts;
        let _ = writeln!(s, "\npairs {} | train {} valid {} test {}", c.pairs, c.train.kept, c.valid.kept, c.test.kept);
        let _ = writeln!(s, "vocabulary {} | best epoch {} of {}", self.vocab_size, self.best_epoch, self.history.len());
        if let Some(w) = self.weights {
            let _ = writeln!(s, "ensemble weights c1 = {:.4} c2 = {:.4} temperature {}", w.c1, w.c2, w.temperature);
        }
        if let Some(f) = &self.finetune {
            let _ = writeln!(s, "fine-tuning epochs {}", f.chosen_epochs);
        }
        let _ = writeln!(s, "application failures {} | top-k set invariant {}", self.application_failures, self.topk_invariant);
        let _ = writeln!(s, "\n{:>12} {:>10} {:>10} {:>10} {:>10}", "threshold", "recall", "precision", "beam rec", "beam prec");
        let fmt = |p: Option<f64>| p.map_or("-".to_string(), |v| format!("{:.2}", 100.0 * v));
        for (e, b) in self.pr.ensemble.iter().zip(&self.pr.beam) {
            let t = e.threshold.map_or("-inf".to_string(), |t| format!("{t:.3}"));
            let _ = writeln!(
                s,
                "{t:>12} {:>10.2} {:>10} {:>10.2} {:>10}",
                100.0 * e.recall,
                fmt(e.precision),
                100.0 * b.recall,
                fmt(b.precision)
            );
        }
        s
    }
}

/// Where every stage keeps its output.
pub struct WorkDir(PathBuf);

impl WorkDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self(root.into())
    }

    pub fn root(&self) -> &Path {
        &self.0
    }

    pub fn pairs(&self) -> PathBuf {
        self.0.join("pairs.jsonl")
    }
    pub fn vocab(&self) -> PathBuf {
        self.0.join("vocab.json")
    }
    pub fn samples(&self, split: &str) -> PathBuf {
        self.0.join(format!("samples.{split}.jsonl"))
    }
    pub fn counts(&self) -> PathBuf {
        self.0.join("counts.json")
    }
    pub fn train_state(&self) -> PathBuf {
        self.0.join("train")
    }
    pub fn model(&self) -> PathBuf {
        self.0.join("model.bin")
    }
    pub fn hyps(&self, split: &str) -> PathBuf {
        self.0.join(format!("hyps.{split}.jsonl"))
    }
    pub fn heads(&self) -> PathBuf {
        self.0.join("heads.bin")
    }
    pub fn ensemble(&self) -> PathBuf {
        self.0.join("ensemble.json")
    }
    pub fn heads_finetuned(&self) -> PathBuf {
        self.0.join("heads_ft.bin")
    }
    pub fn finetune(&self) -> PathBuf {
        self.0.join("finetune.json")
    }
    pub fn report(&self) -> PathBuf {
        self.0.join("report.json")
    }
    pub fn report_text(&self) -> PathBuf {
        self.0.join("report.txt")
    }
}

const SPLITS: [&str; 3] = ["train", "valid", "test"];

fn load_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Loads the pairs named by `source`, or synthesizes them.
pub fn load_corpus(source: &CorpusSource, seed: u64) -> Result<Vec<BugPair>> {
    match source {
        CorpusSource::Synthetic { programs, pairs, mutations } => {
            synthesize_bug_corpus(&generate_programs(*programs, seed), mutations, *pairs, seed)
        }
        CorpusSource::File { path } => read_jsonl(path),
    }
}

fn check_fingerprint(dir: &Path, fingerprint: &str) -> Result<()> {
    let path = dir.join("fingerprint.txt");
    match fs::read_to_string(&path) {
        Ok(old) if old.trim() == fingerprint => Ok(()),
        Ok(old) => Err(RepairError::Config(format!(
            "{} holds a run with config {}, not {fingerprint}",
            dir.display(),
            old.trim()
        ))),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => write_atomic(path, fingerprint),
        Err(e) => Err(e.into()),
    }
}

struct Prepared {
    vocab: Vocab,
    splits: HashMap<&'static str, Vec<Sample>>,
    counts: DatasetCounts,
}

fn prepare(config: &PipelineConfig, work: &WorkDir) -> Result<Prepared> {
    let pairs = if work.pairs().exists() {
        read_jsonl(work.pairs())?
    } else {
        let pairs = load_corpus(&config.corpus, config.seed)?;
        write_jsonl(work.pairs(), &pairs)?;
        pairs
    };
    let parts = split(&pairs, config.train_frac, config.valid_frac, config.seed)?;
    let vocab = if work.vocab().exists() {
        Vocab::load(work.vocab())?
    } else {
        let texts: Vec<&str> = parts.train.iter().flat_map(|p| [p.buggy.as_str(), p.fixed.as_str()]).collect();
        let vocab = train_bpe_up_to(&word_corpus(&texts), config.vocab_size)?;
        vocab.save(work.vocab())?;
        vocab
    };
    let codec = EditCodec::for_vocab(&vocab);
    let ready = SPLITS.iter().all(|s| work.samples(s).exists()) && work.counts().exists();
    let mut splits = HashMap::new();
    let counts = if ready {
        for s in SPLITS {
            let records: Vec<EditRecord> = read_jsonl(work.samples(s))?;
            splits.insert(s, records.iter().map(|r| r.to_sample(&codec)).collect::<Result<Vec<_>>>()?);
        }
        load_json(&work.counts())?
    } else {
        let mut counts = DatasetCounts { pairs: pairs.len(), ..Default::default() };
        for (name, part, slot) in [
            ("train", &parts.train, &mut counts.train),
            ("valid", &parts.valid, &mut counts.valid),
            ("test", &parts.test, &mut counts.test),
        ] {
            let (samples, c) = ingest(part, &vocab, config.model.max_len, config.model.max_decode_len)?;
            *slot = c;
            let records: Vec<EditRecord> = samples.iter().map(|s| EditRecord::from_sample(s, &codec)).collect();
            write_jsonl(work.samples(name), &records)?;
            splits.insert(name, samples);
        }
        write_atomic(work.counts(), &serde_json::to_string_pretty(&counts)?)?;
        counts
    };
    for s in SPLITS {
        if splits[s].is_empty() {
            return Err(RepairError::Config(format!("the {s} split is empty after filtering")));
        }
    }
    Ok(Prepared { vocab, splits, counts })
}

fn train_model(config: &PipelineConfig, work: &WorkDir, data: &Prepared) -> Result<(Seq2Seq<Float>, Vec<EpochRecord>, usize)> {
    let state = work.train_state();
    let mut trainer = if state.join("progress.json").exists() {
        info!("resuming training from {}", state.display());
        Trainer::<Float>::resume(&state, Some(config.train.clone()))?
    } else {
        let model_config = ModelConfig { vocab_size: data.vocab.len(), specials: data.vocab.specials(), ..config.model.clone() };
        Trainer::new(Seq2Seq::new(model_config, config.seed)?, config.train.clone())?
    };
    let train: Vec<_> = data.splits["train"].iter().map(Sample::example).collect();
    let valid: Vec<_> = data.splits["valid"].iter().map(Sample::example).collect();
    if !manifest_path(&work.model()).exists() {
        while trainer.epochs_done() < config.train.epochs && !trainer.stopped_early() {
            trainer.run_epoch(&train, &valid)?;
            trainer.save_state(&state)?;
        }
        trainer.best_model().save(work.model())?;
    }
    let history = trainer.history().to_vec();
    let best_epoch = trainer.best_epoch();
    Ok((Seq2Seq::load(work.model())?, history, best_epoch))
}

fn hyps_for(work: &WorkDir, split: &str, model: &Seq2Seq<Float>, samples: &[Sample], beam: &BeamConfig) -> Result<Vec<HypsRecord>> {
    let path = work.hyps(split);
    if path.exists() {
        return read_jsonl(path);
    }
    info!("decoding {} {split} inputs", samples.len());
    let hyps = decode_samples(model, samples, beam)?;
    write_jsonl(path, &hyps)?;
    Ok(hyps)
}

fn cached_heads(path: &Path, build: impl FnOnce() -> Result<HeadPair<Float>>) -> Result<HeadPair<Float>> {
    if manifest_path(path).exists() {
        return HeadPair::load(path);
    }
    let heads = build()?;
    heads.save(path)?;
    Ok(heads)
}

/// Runs or resumes every stage in `work_dir` and writes `report.json` and
/// `report.txt`.
pub fn run_pipeline(config: &PipelineConfig, work_dir: impl AsRef<Path>) -> Result<EvalReport> {
    config.validate()?;
    let work = WorkDir::new(work_dir.as_ref());
    fs::create_dir_all(work.root())?;
    let fingerprint = config.fingerprint()?;
    check_fingerprint(work.root(), &fingerprint)?;

    let data = prepare(config, &work)?;
    let programs = SPLITS
        .iter()
        .flat_map(|s| data.splits[s].iter().map(|x| parse(&x.edits).map_err(RepairError::from)))
        .collect::<Result<Vec<_>>>()?;
    let edit_stats = stats_of_programs(&programs)?;

    let (model, history, best_epoch) = train_model(config, &work, &data)?;
    let codec = EditCodec::new(model.config().vocab_size, model.config().specials);
    let beam = BeamConfig { max_len: config.beam.max_len.min(model.config().max_decode_len), ..config.beam };
    let test = &data.splits["test"];
    let test_inst = build_instances(test, &hyps_for(&work, "test", &model, test, &beam)?, &codec)?;
    let gold: Vec<(String, Vec<TokenId>)> = test.iter().map(|s| (s.id.clone(), s.y.clone())).collect();
    let width = config.beam.beam_size;

    let mut rows = vec![AccuracyRow { name: ROW_BEAM_LP.into(), topk: exact_match_topk(&beam_predictions(&test_inst), &gold, width)? }];
    let plain = unscored(&test_inst);
    let beam_only = rank_all(&plain, EnsembleWeights::BEAM_ONLY);
    rows.push(AccuracyRow {
        name: ROW_BEAM_ONLY.into(),
        topk: exact_match_topk(&ranked_predictions(&test_inst, &beam_only), &gold, width)?,
    });

    let (mut weights, mut grid, mut finetune, mut final_ranking) = (None, None, None, beam_only);
    if let Some(stage) = &config.rerank {
        let temperature = stage.train.temperature;
        let train = &data.splits["train"];
        let n_train = stage.max_train_instances.unwrap_or(train.len()).min(train.len());
        let valid = &data.splits["valid"];
        let train_inst = build_instances(&train[..n_train], &hyps_for(&work, "train", &model, &train[..n_train], &beam)?, &codec)?;
        let valid_inst = build_instances(valid, &hyps_for(&work, "valid", &model, valid, &beam)?, &codec)?;

        let heads = cached_heads(&work.heads(), || {
            let mut heads = HeadPair::from_main(&model, config.seed)?;
            if crate::reranker::trainable(&train_inst).is_empty() {
                warn!("no training instance has a correct hypothesis; heads stay untrained");
            } else {
                heads.train(&train_inst, &stage.train)?;
            }
            Ok(heads)
        })?;
        let tuned: GridResult = if work.ensemble().exists() {
            load_json(&work.ensemble())?
        } else {
            let g = grid_search_coefficients(&heads.score(&valid_inst, temperature)?)?;
            write_atomic(work.ensemble(), &serde_json::to_string_pretty(&g)?)?;
            g
        };
        let w = EnsembleWeights { c1: tuned.c1, c2: tuned.c2, temperature };
        let mut report: Option<FinetuneReport> =
            if work.finetune().exists() { Some(load_json(&work.finetune())?) } else { None };
        let heads_ft = cached_heads(&work.heads_finetuned(), || {
            let (h, r) = finetune_on_validation(&heads, &valid_inst, w, &stage.train, &stage.finetune_epochs)?;
            write_atomic(work.finetune(), &serde_json::to_string_pretty(&r)?)?;
            report = Some(r);
            Ok(h)
        })?;

        let ensemble = rank_all(&heads.score(&test_inst, temperature)?, w);
        rows.push(AccuracyRow {
            name: ROW_ENSEMBLE.into(),
            topk: exact_match_topk(&ranked_predictions(&test_inst, &ensemble), &gold, width)?,
        });
        let ranked_ft = rank_all(&heads_ft.score(&test_inst, temperature)?, w);
        rows.push(AccuracyRow {
            name: ROW_FINETUNED.into(),
            topk: exact_match_topk(&ranked_predictions(&test_inst, &ranked_ft), &gold, width)?,
        });
        weights = Some(w);
        grid = Some(tuned);
        finetune = report;
        final_ranking = ranked_ft;
    }

    let last = |r: &AccuracyRow| r.topk.last().copied();
    let topk_invariant = rows.iter().all(|r| last(r) == last(&rows[0]));
    let report = EvalReport {
        fingerprint,
        vocab_size: data.vocab.len(),
        counts: data.counts,
        edit_stats,
        history,
        best_epoch,
        rows,
        topk_invariant,
        application_failures: application_failures(&test_inst),
        weights,
        grid,
        finetune,
        pr: pr_sweep(&final_ranking, config.pr_thresholds)?,
    };
    write_atomic(work.report(), &serde_json::to_string_pretty(&report)?)?;
    write_atomic(work.report_text(), &report.to_table())?;
    Ok(report)
}
