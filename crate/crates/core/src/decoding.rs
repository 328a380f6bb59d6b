//! Grammar-constrained beam search over edit tokens.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::diff::apply_edits;
use crate::error::{RepairError, Result};
use crate::grammar::{parse, DecoderMode, EditCodec, EditToken, FsmState, GrammarCursor};
use crate::model::{EncoderMemory, Seq2Seq};
use crate::tokenizer::{SpecialIds, TokenId};
use repair_tensor::Real;

/// Next-token log-probabilities for one input.
pub trait StepScorer {
    /// Buggy input length; locations range over `0..=input_len`.
    fn input_len(&self) -> usize;
    fn vocab_size(&self) -> usize;
    fn specials(&self) -> SpecialIds;
    /// Longest token sequence the scorer accepts, [BOS] and [EOS] included.
    fn max_tokens(&self) -> usize;
    /// Log-probabilities after `prefix`: indexed by vocabulary id in
    /// word/action mode, by location otherwise.
    fn log_probs(&self, prefix: &[EditToken], mode: DecoderMode) -> Result<Vec<f64>>;
}

/// A model paired with the encoded input.
pub struct ModelScorer<'a, T: Real> {
    pub model: &'a Seq2Seq<T>,
    pub memory: EncoderMemory<T>,
}

impl<'a, T: Real> ModelScorer<'a, T> {
    pub fn new(model: &'a Seq2Seq<T>, x: &[TokenId]) -> Result<Self> {
        Ok(Self { model, memory: model.encode(x)? })
    }
}

impl<T: Real> StepScorer for ModelScorer<'_, T> {
    fn input_len(&self) -> usize {
        self.memory.input_len()
    }

    fn vocab_size(&self) -> usize {
        self.model.config().vocab_size
    }

    fn specials(&self) -> SpecialIds {
        self.model.config().specials
    }

    fn max_tokens(&self) -> usize {
        self.model.config().max_decode_len
    }

    fn log_probs(&self, prefix: &[EditToken], mode: DecoderMode) -> Result<Vec<f64>> {
        self.model.step_log_probs(&self.memory, prefix, mode)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BeamConfig {
    pub beam_size: usize,
    /// Longest hypothesis in tokens, [BOS] and [EOS] included.
    pub max_len: usize,
    pub alpha: f64,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self { beam_size: 5, max_len: 64, alpha: 0.6 }
    }
}

#[derive(Debug, Clone)]
pub struct Hypothesis {
    /// Starts with [BOS].
    pub tokens: Vec<EditToken>,
    /// One entry per token; 0 for the leading [BOS].
    pub token_logprobs: Vec<f64>,
    pub log_prob: f64,
    pub lp_score: f64,
    cursor: GrammarCursor,
}

impl Hypothesis {
    fn start(input_len: usize, alpha: f64) -> Self {
        let mut cursor = GrammarCursor::new(input_len);
        cursor.advance(EditToken::Bos).expect("BOS starts every program");
        Self { tokens: vec![EditToken::Bos], token_logprobs: vec![0.0], log_prob: 0.0, lp_score: length_penalized(0.0, 1, alpha), cursor }
    }

    fn extend(&self, token: EditToken, logprob: f64, alpha: f64) -> Self {
        let mut next = self.clone();
        next.cursor.advance(token).expect("candidate was allowed");
        next.tokens.push(token);
        next.token_logprobs.push(logprob);
        next.log_prob += logprob;
        next.lp_score = length_penalized(next.log_prob, next.tokens.len(), alpha);
        next
    }

    pub fn fsm_state(&self) -> FsmState {
        self.cursor.state()
    }

    pub fn finished(&self) -> bool {
        self.cursor.state() == FsmState::Eos
    }
}

/// `log_prob / ((5 + len) / 6)^alpha`.
pub fn length_penalized(log_prob: f64, len: usize, alpha: f64) -> f64 {
    log_prob / ((5.0 + len as f64) / 6.0).powf(alpha)
}

/// Worst kept and best discarded score of one selection step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepTrace {
    pub kept_min: f64,
    pub discarded_max: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct BeamOutput {
    /// Finished hypotheses, best first.
    pub hypotheses: Vec<Hypothesis>,
    pub trace: Vec<StepTrace>,
}

/// Tokens that may follow `h` and still finish within `max_len` tokens.
fn legal_continuations(h: &Hypothesis, vocab_size: usize, specials: SpecialIds, max_len: usize) -> Vec<EditToken> {
    let c = &h.cursor;
    let mut out = Vec::new();
    match c.mode() {
        DecoderMode::Location => {
            if let Some((lo, hi)) = c.location_range() {
                out.extend((lo..=hi).map(EditToken::Loc));
            }
        }
        DecoderMode::WordAction => {
            out.extend([EditToken::Eos, EditToken::Delete, EditToken::Insert].into_iter().filter(|&t| c.allows(t)));
            if c.can_word() {
                out.extend((0..vocab_size as TokenId).filter(|&w| !specials.contains(w)).map(EditToken::Word));
            }
        }
    }
    let len = h.tokens.len();
    out.retain(|&t| {
        let mut next = c.clone();
        next.advance(t).is_ok() && len + 1 + next.min_tokens_to_finish() <= max_len
    });
    out
}

fn vocab_index(t: EditToken, specials: SpecialIds) -> usize {
    match t {
        EditToken::Word(w) => w as usize,
        EditToken::Eos => specials.eos as usize,
        EditToken::Delete => specials.delete as usize,
        EditToken::Insert => specials.insert as usize,
        EditToken::Bos => specials.bos as usize,
        EditToken::Loc(l) => l,
    }
}

/// A pool entry: a finished beam carried over, or a beam plus one token.
struct Candidate {
    parent: usize,
    token: Option<EditToken>,
    logprob: f64,
    lp_score: f64,
}

fn candidate_ids(beams: &[Hypothesis], c: &Candidate, codec: &EditCodec) -> Vec<u32> {
    let mut ids = codec.encode(&beams[c.parent].tokens);
    ids.extend(c.token.map(|t| codec.to_id(t)));
    ids
}

/// Higher score first, then lexicographically smaller flat ids.
fn rank(beams: &[Hypothesis], a: &Candidate, b: &Candidate, codec: &EditCodec) -> Ordering {
    b.lp_score
        .total_cmp(&a.lp_score)
        .then_with(|| candidate_ids(beams, a, codec).cmp(&candidate_ids(beams, b, codec)))
}

fn expand(scorer: &dyn StepScorer, beams: &[Hypothesis], parent: usize, max_len: usize, alpha: f64) -> Result<Vec<Candidate>> {
    let h = &beams[parent];
    let specials = scorer.specials();
    let legal = legal_continuations(h, scorer.vocab_size(), specials, max_len);
    if legal.is_empty() {
        return Ok(Vec::new());
    }
    let lp = scorer.log_probs(&h.tokens, h.cursor.mode())?;
    let len = h.tokens.len() + 1;
    legal
        .into_iter()
        .map(|t| {
            let i = vocab_index(t, specials);
            let v = *lp.get(i).ok_or_else(|| RepairError::Input(format!("scorer returned {} scores, needed index {i}", lp.len())))?;
            Ok(Candidate { parent, token: Some(t), logprob: v, lp_score: length_penalized(h.log_prob + v, len, alpha) })
        })
        .collect()
}

fn effective_max_len(scorer: &dyn StepScorer, config: &BeamConfig) -> Result<usize> {
    if config.beam_size == 0 {
        return Err(RepairError::Config("beam size must be at least 1".into()));
    }
    if config.max_len < 2 {
        return Err(RepairError::Config("max_len must be at least 2".into()));
    }
    Ok(config.max_len.min(scorer.max_tokens()))
}

/// Top-K search. Finished hypotheses keep their score and stay in the pool.
pub fn beam_search(scorer: &dyn StepScorer, config: &BeamConfig) -> Result<BeamOutput> {
    let max_len = effective_max_len(scorer, config)?;
    let codec = EditCodec::new(scorer.vocab_size(), scorer.specials());
    let mut beams = vec![Hypothesis::start(scorer.input_len(), config.alpha)];
    let mut trace = Vec::new();
    while beams.iter().any(|h| !h.finished()) {
        let mut pool = Vec::new();
        for (k, h) in beams.iter().enumerate() {
            if h.finished() {
                pool.push(Candidate { parent: k, token: None, logprob: 0.0, lp_score: h.lp_score });
            } else {
                pool.extend(expand(scorer, &beams, k, max_len, config.alpha)?);
            }
        }
        if pool.is_empty() {
            return Err(RepairError::DecodeFailure("no legal continuation in any beam".into()));
        }
        pool.sort_by(|a, b| rank(&beams, a, b, &codec));
        let discarded_max = pool.get(config.beam_size).map(|c| c.lp_score);
        pool.truncate(config.beam_size);
        let kept_min = pool.last().map(|c| c.lp_score).unwrap_or(f64::NEG_INFINITY);
        trace.push(StepTrace { kept_min, discarded_max });
        beams = pool
            .iter()
            .map(|c| match c.token {
                Some(t) => beams[c.parent].extend(t, c.logprob, config.alpha),
                None => beams[c.parent].clone(),
            })
            .collect();
    }
    let mut hypotheses: Vec<Hypothesis> = Vec::with_capacity(beams.len());
    for h in beams {
        if !hypotheses.iter().any(|k| k.tokens == h.tokens) {
            hypotheses.push(h);
        }
    }
    if hypotheses.is_empty() {
        return Err(RepairError::DecodeFailure("no hypothesis finished".into()));
    }
    Ok(BeamOutput { hypotheses, trace })
}

/// Picks the most probable legal token at every step; ties go to the
/// smallest flat id.
pub fn greedy_decode(scorer: &dyn StepScorer, max_len: usize, alpha: f64) -> Result<Hypothesis> {
    let max_len = effective_max_len(scorer, &BeamConfig { beam_size: 1, max_len, alpha })?;
    let specials = scorer.specials();
    let codec = EditCodec::new(scorer.vocab_size(), specials);
    let mut h = Hypothesis::start(scorer.input_len(), alpha);
    while !h.finished() {
        let legal = legal_continuations(&h, scorer.vocab_size(), specials, max_len);
        if legal.is_empty() {
            return Err(RepairError::DecodeFailure("greedy decoding reached a dead end".into()));
        }
        let lp = scorer.log_probs(&h.tokens, h.cursor.mode())?;
        let mut best: Option<(EditToken, f64)> = None;
        for t in legal {
            let v = lp[vocab_index(t, specials)];
            let better = match best {
                None => true,
                Some((bt, bv)) => v > bv || (v == bv && codec.to_id(t) < codec.to_id(bt)),
            };
            if better {
                best = Some((t, v));
            }
        }
        let (t, v) = best.expect("non-empty");
        h = h.extend(t, v, alpha);
    }
    Ok(h)
}

/// Applies the hypothesis's program to `x`.
pub fn hypothesis_to_fixed_code(x: &[TokenId], tokens: &[EditToken]) -> Result<Vec<TokenId>> {
    let program = parse(tokens)?;
    if program.max_location() > x.len() {
        return Err(RepairError::Apply(format!(
            "location {} is beyond the input length {}",
            program.max_location(),
            x.len()
        )));
    }
    apply_edits(x, &program)
}
