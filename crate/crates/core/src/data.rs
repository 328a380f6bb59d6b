//! JSONL records, ingestion and splits.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::decoding::{hypothesis_to_fixed_code, Hypothesis};
use crate::diff::derive_edits;
use crate::error::{RepairError, Result};
use crate::grammar::{serialize, EditCodec, EditToken};
use crate::reranker::{Candidate, Instance, RankedHypothesis};
use crate::synth::BugPair;
use crate::tokenizer::{TokenId, Vocab};
use crate::train::Example;

/// Version written into every JSONL record.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Versioned<T> {
    v: u32,
    #[serde(flatten)]
    body: T,
}

/// Reads one record per non-empty line.
pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let file = fs::File::open(path.as_ref())?;
    let mut out = Vec::new();
    for (k, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Versioned<T> =
            serde_json::from_str(&line).map_err(|e| RepairError::Ingest { line: k + 1, msg: e.to_string() })?;
        if rec.v != SCHEMA_VERSION {
            return Err(RepairError::Ingest { line: k + 1, msg: format!("schema version {} is not {SCHEMA_VERSION}", rec.v) });
        }
        out.push(rec.body);
    }
    Ok(out)
}

/// Writes through a temporary file so a crash never leaves half a file.
pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, records: &[T]) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(fs::File::create(&tmp)?);
        for r in records {
            serde_json::to_writer(&mut w, &Versioned { v: SCHEMA_VERSION, body: r })?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}

/// Writes `text` through a temporary file.
pub fn write_atomic(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text)?;
    fs::rename(tmp, path)?;
    Ok(())
}

/// A tokenized pair with its gold edits.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub x: Vec<TokenId>,
    pub y: Vec<TokenId>,
    pub edits: Vec<EditToken>,
}

impl Sample {
    pub fn example(&self) -> Example {
        Example { x: self.x.clone(), edits: self.edits.clone() }
    }
}

/// Serialized form of a [`Sample`]; edits are flat codec ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRecord {
    pub id: String,
    pub x: Vec<TokenId>,
    pub y: Vec<TokenId>,
    pub edits: Vec<u32>,
}

impl EditRecord {
    pub fn from_sample(s: &Sample, codec: &EditCodec) -> Self {
        Self { id: s.id.clone(), x: s.x.clone(), y: s.y.clone(), edits: codec.encode(&s.edits) }
    }

    pub fn to_sample(&self, codec: &EditCodec) -> Result<Sample> {
        Ok(Sample { id: self.id.clone(), x: self.x.clone(), y: self.y.clone(), edits: codec.decode(&self.edits)? })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterCounts {
    pub kept: usize,
    pub too_long_input: usize,
    pub too_long_edits: usize,
}

/// Tokenizes pairs, derives gold edits and drops pairs the model cannot take:
/// buggy or fixed code longer than `max_len` tokens, or an edit sequence
/// longer than `max_edit_tokens`.
pub fn ingest(pairs: &[BugPair], vocab: &Vocab, max_len: usize, max_edit_tokens: usize) -> Result<(Vec<Sample>, FilterCounts)> {
    let mut counts = FilterCounts::default();
    let mut out = Vec::with_capacity(pairs.len());
    for p in pairs {
        let x = vocab.encode(&p.buggy).0;
        let y = vocab.encode(&p.fixed).0;
        if x.len() > max_len || y.len() > max_len {
            counts.too_long_input += 1;
            continue;
        }
        let edits = serialize(&derive_edits(&x, &y)?)?;
        if edits.len() > max_edit_tokens {
            counts.too_long_edits += 1;
            continue;
        }
        out.push(Sample { id: p.id.clone(), x, y, edits });
    }
    counts.kept = out.len();
    if counts.too_long_input + counts.too_long_edits > 0 {
        info!("ingest kept {} pairs, dropped {} long inputs and {} long edit sequences", counts.kept, counts.too_long_input, counts.too_long_edits);
    }
    Ok((out, counts))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Splits<T> {
    pub train: Vec<T>,
    pub valid: Vec<T>,
    pub test: Vec<T>,
}

/// Seeded shuffle, then `train_frac` and `valid_frac` of the items; the rest
/// is test.
pub fn split<T: Clone>(items: &[T], train_frac: f64, valid_frac: f64, seed: u64) -> Result<Splits<T>> {
    if !(train_frac >= 0.0 && valid_frac >= 0.0 && train_frac + valid_frac <= 1.0) {
        return Err(RepairError::Config(format!("bad split fractions {train_frac} / {valid_frac}")));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (items.len() as f64 * train_frac).round() as usize;
    let n_valid = ((items.len() as f64 * valid_frac).round() as usize).min(items.len() - n_train);
    let take = |r: std::ops::Range<usize>| order[r].iter().map(|&i| items[i].clone()).collect();
    Ok(Splits {
        train: take(0..n_train),
        valid: take(n_train..n_train + n_valid),
        test: take(n_train + n_valid..items.len()),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisRecord {
    pub tokens: Vec<u32>,
    pub log_prob: f64,
    pub lp_score: f64,
}

/// Beam output for one input, best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypsRecord {
    pub id: String,
    pub hypotheses: Vec<HypothesisRecord>,
}

impl HypsRecord {
    pub fn new(id: &str, hyps: &[Hypothesis], codec: &EditCodec) -> Self {
        Self {
            id: id.to_string(),
            hypotheses: hyps
                .iter()
                .map(|h| HypothesisRecord { tokens: codec.encode(&h.tokens), log_prob: h.log_prob, lp_score: h.lp_score })
                .collect(),
        }
    }
}

/// Joins beam output with gold samples by id, marking each hypothesis whose
/// applied program reproduces the gold fixed code.
pub fn build_instances(samples: &[Sample], hyps: &[HypsRecord], codec: &EditCodec) -> Result<Vec<Instance>> {
    if samples.len() != hyps.len() {
        return Err(RepairError::Evaluation(format!("{} samples but {} hypothesis lists", samples.len(), hyps.len())));
    }
    samples
        .iter()
        .zip(hyps)
        .map(|(s, h)| {
            if s.id != h.id {
                return Err(RepairError::Evaluation(format!("id mismatch: {} vs {}", s.id, h.id)));
            }
            let candidates = h
                .hypotheses
                .iter()
                .map(|r| {
                    let tokens = codec.decode(&r.tokens)?;
                    let correct = hypothesis_to_fixed_code(&s.x, &tokens).is_ok_and(|y| y == s.y);
                    Ok(Candidate { tokens, log_prob: r.log_prob, lp_score: r.lp_score, correct })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Instance { id: s.id.clone(), x: s.x.clone(), candidates })
        })
        .collect()
}

/// One reranked hypothesis with every score that went into its position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub beam_rank: usize,
    pub tokens: Vec<u32>,
    pub log_prob: f64,
    pub score_t: f64,
    pub score_e: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedRecord {
    pub id: String,
    pub hypotheses: Vec<RankedEntry>,
}

impl RankedRecord {
    pub fn new(instance: &Instance, ranked: &[RankedHypothesis], codec: &EditCodec) -> Self {
        Self {
            id: instance.id.clone(),
            hypotheses: ranked
                .iter()
                .map(|h| RankedEntry {
                    beam_rank: h.beam_rank,
                    tokens: codec.encode(&instance.candidates[h.beam_rank].tokens),
                    log_prob: h.log_prob,
                    score_t: h.score_t,
                    score_e: h.score_e,
                    score: h.score,
                })
                .collect(),
        }
    }

    /// Ranked hypotheses checked against `sample`, with their fixed code
    /// (`None` when a hypothesis fails to apply).
    pub fn resolve(&self, sample: &Sample, codec: &EditCodec) -> Result<Vec<(RankedHypothesis, Option<Vec<TokenId>>)>> {
        if self.id != sample.id {
            return Err(RepairError::Evaluation(format!("id mismatch: {} vs {}", self.id, sample.id)));
        }
        self.hypotheses
            .iter()
            .map(|e| {
                let fixed = hypothesis_to_fixed_code(&sample.x, &codec.decode(&e.tokens)?).ok();
                let h = RankedHypothesis {
                    beam_rank: e.beam_rank,
                    log_prob: e.log_prob,
                    score_t: e.score_t,
                    score_e: e.score_e,
                    score: e.score,
                    correct: fixed.as_ref() == Some(&sample.y),
                };
                Ok((h, fixed))
            })
            .collect()
    }
}
