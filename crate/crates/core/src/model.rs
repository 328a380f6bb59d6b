//! Encoder-decoder with a word/action head and a pointer head over encoder
//! memory rows.

use std::cell::RefCell;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use repair_tensor::{Graph, ParamStore, Real, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{RepairError, Result};
use crate::grammar::{run_fsm, DecoderMode, EditToken, FsmState, MAX_SEQ_LEN};
use crate::layers::{DecoderLayer, EncoderLayer, Fwd, Init, LayerNorm, Linear};
use crate::tokenizer::{SpecialIds, TokenId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub ffn_dim: usize,
    /// Longest buggy input, in tokens.
    pub max_len: usize,
    /// Longest edit-token sequence the decoder accepts, [BOS] and [EOS] included.
    pub max_decode_len: usize,
    pub vocab_size: usize,
    pub specials: SpecialIds,
    pub dropout: f64,
    pub init_std: f64,
}

impl ModelConfig {
    /// h=128, 4 heads, 2+2 layers, ffn 256.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            d_model: 128,
            n_heads: 4,
            n_encoder_layers: 2,
            n_decoder_layers: 2,
            ffn_dim: 256,
            max_len: MAX_SEQ_LEN,
            max_decode_len: 128,
            vocab_size,
            specials: SpecialIds::STANDARD,
            dropout: 0.1,
            init_std: 0.02,
        }
    }

    /// h=64, 4 heads, 2+2 layers, ffn 128; sized for single-core runs.
    pub fn tiny(vocab_size: usize) -> Self {
        Self { d_model: 64, ffn_dim: 128, max_decode_len: 64, ..Self::desk(vocab_size) }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(RepairError::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.max_len > MAX_SEQ_LEN {
            return bad(format!("max_len {} exceeds the location budget {MAX_SEQ_LEN}", self.max_len));
        }
        if self.max_decode_len < 2 {
            return bad("max_decode_len must be at least 2".into());
        }
        let s = self.specials;
        for id in [s.bos, s.eos, s.pad, s.delete, s.insert] {
            if id as usize >= self.vocab_size {
                return bad(format!("special id {id} is outside the vocabulary of {}", self.vocab_size));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} is not in [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Encoder position table size; also covers the encoder reranker's
    /// concatenated `[BOS] edits [EOS] x` input.
    pub fn encoder_positions(&self) -> usize {
        self.max_len + 1 + self.max_decode_len
    }

    pub fn is_word(&self, id: TokenId) -> bool {
        (id as usize) < self.vocab_size && !self.specials.contains(id)
    }

    pub(crate) fn token_id(&self, t: EditToken) -> Option<TokenId> {
        let s = self.specials;
        Some(match t {
            EditToken::Bos => s.bos,
            EditToken::Eos => s.eos,
            EditToken::Delete => s.delete,
            EditToken::Insert => s.insert,
            EditToken::Word(w) => w,
            EditToken::Loc(_) => return None,
        })
    }

    pub(crate) fn check_input(&self, x: &[TokenId]) -> Result<()> {
        if x.len() > self.max_len {
            return Err(RepairError::Input(format!(
                "input has {} tokens, the model accepts at most {}",
                x.len(),
                self.max_len
            )));
        }
        if let Some(&bad) = x.iter().find(|&&t| !self.is_word(t)) {
            return Err(RepairError::Input(format!("input id {bad} is not a word token")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Encoder {
    pub tok_emb: repair_tensor::ParamId,
    pos_emb: repair_tensor::ParamId,
    layers: Vec<EncoderLayer>,
    ln_f: LayerNorm,
}

impl Encoder {
    pub fn new<T: Real, R: rand::Rng>(init: &mut Init<T, R>, c: &ModelConfig) -> Result<Self> {
        Ok(Self {
            tok_emb: init.normal("enc.tok_emb", &[c.vocab_size, c.d_model])?,
            pos_emb: init.normal("enc.pos_emb", &[c.encoder_positions(), c.d_model])?,
            layers: (0..c.n_encoder_layers)
                .map(|i| EncoderLayer::new(init, &format!("enc.layer{i}"), c.d_model, c.n_heads, c.ffn_dim))
                .collect::<repair_tensor::Result<_>>()?,
            ln_f: LayerNorm::new(init, "enc.ln_f", c.d_model)?,
        })
    }

    /// Adds positions to already-embedded rows and runs the stack.
    pub fn forward_embedded<T: Real>(&self, f: &Fwd<T>, emb: Var) -> Result<Var> {
        let g = f.g;
        let n = g.shape(emb)[0];
        let positions: Vec<usize> = (0..n).collect();
        let pos = g.embedding_gather(f.p(self.pos_emb), &positions)?;
        let mut h = f.drop(g.add(emb, pos)?)?;
        for layer in &self.layers {
            h = layer.forward(f, h)?;
        }
        Ok(self.ln_f.forward(f, h)?)
    }

    pub fn forward<T: Real>(&self, f: &Fwd<T>, ids: &[usize]) -> Result<Var> {
        let emb = f.g.embedding_gather(f.p(self.tok_emb), ids)?;
        self.forward_embedded(f, emb)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Decoder {
    tok_emb: repair_tensor::ParamId,
    pos_emb: repair_tensor::ParamId,
    layers: Vec<DecoderLayer>,
    ln_f: LayerNorm,
}

impl Decoder {
    fn new<T: Real, R: rand::Rng>(init: &mut Init<T, R>, c: &ModelConfig) -> Result<Self> {
        Ok(Self {
            tok_emb: init.normal("dec.tok_emb", &[c.vocab_size, c.d_model])?,
            pos_emb: init.normal("dec.pos_emb", &[c.max_decode_len, c.d_model])?,
            layers: (0..c.n_decoder_layers)
                .map(|i| DecoderLayer::new(init, &format!("dec.layer{i}"), c.d_model, c.n_heads, c.ffn_dim))
                .collect::<repair_tensor::Result<_>>()?,
            ln_f: LayerNorm::new(init, "dec.ln_f", c.d_model)?,
        })
    }

    pub fn cross_kv<T: Real>(&self, f: &Fwd<T>, memory: Var) -> Result<Vec<(Var, Var)>> {
        Ok(self.layers.iter().map(|l| l.cross_keys_values(f, memory)).collect::<repair_tensor::Result<_>>()?)
    }

    /// Input rows for `inputs`: token embeddings, or memory row `l` for `Loc(l)`.
    pub fn embed<T: Real>(&self, f: &Fwd<T>, c: &ModelConfig, memory: Var, inputs: &[EditToken]) -> Result<Var> {
        let g = f.g;
        let (mut tok_ids, mut loc_ids) = (Vec::new(), Vec::new());
        let mut slots = Vec::with_capacity(inputs.len());
        for &t in inputs {
            match t {
                EditToken::Loc(l) => {
                    slots.push((true, loc_ids.len()));
                    loc_ids.push(l);
                }
                other => {
                    slots.push((false, tok_ids.len()));
                    tok_ids.push(c.token_id(other).expect("not a location") as usize);
                }
            }
        }
        let mut parts = Vec::with_capacity(2);
        if !tok_ids.is_empty() {
            parts.push(g.embedding_gather(f.p(self.tok_emb), &tok_ids)?);
        }
        if !loc_ids.is_empty() {
            parts.push(g.embedding_gather(memory, &loc_ids)?);
        }
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let all = g.concat(&parts, 0)?;
        let order: Vec<usize> =
            slots.iter().map(|&(is_loc, k)| if is_loc { tok_ids.len() + k } else { k }).collect();
        Ok(g.embedding_gather(all, &order)?)
    }

    pub fn forward<T: Real>(&self, f: &Fwd<T>, emb: Var, kv: &[(Var, Var)]) -> Result<Var> {
        let g = f.g;
        let n = g.shape(emb)[0];
        let positions: Vec<usize> = (0..n).collect();
        let pos = g.embedding_gather(f.p(self.pos_emb), &positions)?;
        let mut h = f.drop(g.add(emb, pos)?)?;
        for (layer, &ckv) in self.layers.iter().zip(kv) {
            h = layer.forward(f, h, ckv)?;
        }
        Ok(self.ln_f.forward(f, h)?)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Network {
    pub enc: Encoder,
    pub dec: Decoder,
    word_head: Linear,
    ptr_in: Linear,
    ptr_out: Linear,
}

impl Network {
    pub fn new<T: Real, R: rand::Rng>(init: &mut Init<T, R>, c: &ModelConfig) -> Result<Self> {
        Ok(Self {
            enc: Encoder::new(init, c)?,
            dec: Decoder::new(init, c)?,
            word_head: Linear::new(init, "head.word", c.d_model, c.vocab_size)?,
            ptr_in: Linear::new(init, "head.ptr1", c.d_model, c.d_model)?,
            ptr_out: Linear::new(init, "head.ptr2", c.d_model, c.d_model)?,
        })
    }

    /// Memory rows for `x` plus the boundary row: shape `[len + 1, h]`.
    pub fn encode<T: Real>(&self, f: &Fwd<T>, c: &ModelConfig, x: &[TokenId]) -> Result<Var> {
        let mut ids: Vec<usize> = x.iter().map(|&t| t as usize).collect();
        ids.push(c.specials.eos as usize);
        self.enc.forward(f, &ids)
    }

    pub fn word_logits<T: Real>(&self, f: &Fwd<T>, hidden: Var) -> Result<Var> {
        Ok(self.word_head.forward(f, hidden)?)
    }

    pub fn pointer_latent<T: Real>(&self, f: &Fwd<T>, hidden: Var) -> Result<Var> {
        let h = f.g.gelu(self.ptr_in.forward(f, hidden)?)?;
        Ok(self.ptr_out.forward(f, h)?)
    }

    pub fn pointer_scores<T: Real>(&self, f: &Fwd<T>, hidden: Var, memory: Var) -> Result<Var> {
        let v = self.pointer_latent(f, hidden)?;
        Ok(f.g.matmul_nt(v, memory)?)
    }

    /// Decoder states for `inputs` (teacher forced), shape `[inputs.len(), h]`.
    pub fn decode<T: Real>(
        &self,
        f: &Fwd<T>,
        c: &ModelConfig,
        memory: Var,
        kv: &[(Var, Var)],
        inputs: &[EditToken],
    ) -> Result<Var> {
        if inputs.is_empty() || inputs.len() > c.max_decode_len {
            return Err(RepairError::Input(format!(
                "decoder input has {} tokens, expected 1..={}",
                inputs.len(),
                c.max_decode_len
            )));
        }
        let emb = self.dec.embed(f, c, memory, inputs)?;
        self.dec.forward(f, emb, kv)
    }

    /// Loss of `e` given memory; the mode at each position follows the type of
    /// the token to be predicted.
    pub fn loss<T: Real>(
        &self,
        f: &Fwd<T>,
        c: &ModelConfig,
        memory: Var,
        e: &[EditToken],
        location_weight: f64,
    ) -> Result<Var> {
        let g = f.g;
        let kv = self.dec.cross_kv(f, memory)?;
        let hidden = self.decode(f, c, memory, &kv, &e[..e.len() - 1])?;
        let (mut word_rows, mut word_targets, mut loc_rows, mut loc_targets) =
            (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (pos, &t) in e[1..].iter().enumerate() {
            match t {
                EditToken::Loc(l) => {
                    loc_rows.push(pos);
                    loc_targets.push(l);
                }
                other => {
                    word_rows.push(pos);
                    word_targets.push(c.token_id(other).expect("not a location") as usize);
                }
            }
        }
        let rows = g.embedding_gather(hidden, &word_rows)?;
        let mut loss = g.cross_entropy(self.word_logits(f, rows)?, &word_targets)?;
        if !loc_rows.is_empty() {
            let rows = g.embedding_gather(hidden, &loc_rows)?;
            let scores = self.pointer_scores(f, rows, memory)?;
            let loc = g.cross_entropy(scores, &loc_targets)?;
            let loc = if location_weight == 1.0 { loc } else { g.scale(loc, T::lit(location_weight))? };
            loss = g.add(loss, loc)?;
        }
        Ok(loss)
    }
}

/// Encoder output for one input: `input_len + 1` rows, the last one for the
/// end-of-sequence boundary.
#[derive(Debug)]
pub struct EncoderMemory<T: Real> {
    rows: Tensor<T>,
    cross: OnceLock<Vec<(Tensor<T>, Tensor<T>)>>,
}

impl<T: Real> EncoderMemory<T> {
    pub fn new(rows: Tensor<T>) -> Result<Self> {
        let (n, _) = rows.dims2()?;
        if n == 0 {
            return Err(RepairError::Input("encoder memory has no rows".into()));
        }
        Ok(Self { rows, cross: OnceLock::new() })
    }

    pub fn rows(&self) -> &Tensor<T> {
        &self.rows
    }

    /// Number of buggy tokens `L`; locations run over `0..=L`.
    pub fn input_len(&self) -> usize {
        self.rows.shape()[0] - 1
    }

    pub fn row(&self, l: usize) -> &[T] {
        self.rows.row(l)
    }
}

/// Last-position outputs of one decoder step.
#[derive(Debug, Clone)]
pub struct StepOutput<T> {
    /// Activation fed to both output heads.
    pub hidden: Vec<T>,
    pub logits: Vec<T>,
}

pub struct Seq2Seq<T: Real> {
    config: ModelConfig,
    store: ParamStore<T>,
    pub(crate) net: Network,
}

impl<T: Real> Seq2Seq<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Network::new(&mut Init { store: &mut store, rng: &mut rng, std: config.init_std }, &config)?;
        Ok(Self { config, store, net })
    }

    /// Wraps externally produced parameters; names and shapes must match.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if params.len() != model.store.len() {
            return Err(RepairError::Config(format!(
                "checkpoint has {} parameters, the model needs {}",
                params.len(),
                model.store.len()
            )));
        }
        model.store.load_values_from(&params)?;
        Ok(model)
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

    pub fn encode(&self, x: &[TokenId]) -> Result<EncoderMemory<T>> {
        self.config.check_input(x)?;
        let g = Graph::new();
        let f = Fwd::eval(&g, &self.store);
        let memory = self.net.encode(&f, &self.config, x)?;
        let kv = self.net.dec.cross_kv(&f, memory)?;
        let mem = EncoderMemory::new(g.value(memory).clone())?;
        let cached = kv.iter().map(|&(k, v)| (g.value(k).clone(), g.value(v).clone())).collect();
        let _ = mem.cross.set(cached);
        Ok(mem)
    }

    fn cross_cache<'m>(&self, memory: &'m EncoderMemory<T>) -> Result<&'m [(Tensor<T>, Tensor<T>)]> {
        if let Some(c) = memory.cross.get() {
            return Ok(c);
        }
        let g = Graph::new();
        let f = Fwd::eval(&g, &self.store);
        let m = g.constant(memory.rows.clone());
        let kv = self.net.dec.cross_kv(&f, m)?;
        let cached = kv.iter().map(|&(k, v)| (g.value(k).clone(), g.value(v).clone())).collect();
        let _ = memory.cross.set(cached);
        Ok(memory.cross.get().expect("just set"))
    }

    fn check_memory(&self, memory: &EncoderMemory<T>) -> Result<()> {
        let shape = memory.rows.shape();
        if shape[1] != self.config.d_model {
            return Err(RepairError::Input(format!(
                "memory width {} does not match d_model {}",
                shape[1], self.config.d_model
            )));
        }
        Ok(())
    }

    fn check_prefix(&self, memory: &EncoderMemory<T>, prefix: &[EditToken]) -> Result<()> {
        for &t in prefix {
            match t {
                EditToken::Loc(l) if l > memory.input_len() => {
                    return Err(RepairError::Input(format!(
                        "location {l} is beyond the input length {}",
                        memory.input_len()
                    )))
                }
                EditToken::Word(w) if !self.config.is_word(w) => {
                    return Err(RepairError::Input(format!("word id {w} is not in the vocabulary")))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Runs the decoder over `prefix` and returns the last position's outputs.
    pub fn decode_step(&self, memory: &EncoderMemory<T>, prefix: &[EditToken]) -> Result<StepOutput<T>> {
        self.check_memory(memory)?;
        self.check_prefix(memory, prefix)?;
        let g = Graph::new();
        let f = Fwd::eval(&g, &self.store);
        let (m, kv) = self.import_memory(&g, memory)?;
        let hidden = self.net.decode(&f, &self.config, m, &kv, prefix)?;
        let n = prefix.len();
        let last = g.slice(hidden, 0, n - 1, n)?;
        let logits = self.net.word_logits(&f, last)?;
        let out = StepOutput { hidden: g.value(last).data().to_vec(), logits: g.value(logits).data().to_vec() };
        Ok(out)
    }

    fn import_memory(&self, g: &Graph<T>, memory: &EncoderMemory<T>) -> Result<(Var, Vec<(Var, Var)>)> {
        let cache = self.cross_cache(memory)?;
        let m = g.constant(memory.rows.clone());
        let kv = cache.iter().map(|(k, v)| (g.constant(k.clone()), g.constant(v.clone()))).collect();
        Ok((m, kv))
    }

    /// Decoder input rows for `inputs` before positions are added.
    pub fn decoder_inputs(&self, memory: &EncoderMemory<T>, inputs: &[EditToken]) -> Result<Tensor<T>> {
        self.check_memory(memory)?;
        self.check_prefix(memory, inputs)?;
        let g = Graph::new();
        let f = Fwd::eval(&g, &self.store);
        let m = g.constant(memory.rows.clone());
        let emb = self.net.dec.embed(&f, &self.config, m, inputs)?;
        let out = g.value(emb).clone();
        Ok(out)
    }

    /// Final decoder activations for every position of `inputs`.
    pub fn decoder_states(&self, memory: &EncoderMemory<T>, inputs: &[EditToken]) -> Result<Tensor<T>> {
        self.check_memory(memory)?;
        self.check_prefix(memory, inputs)?;
        let g = Graph::new();
        let f = Fwd::eval(&g, &self.store);
        let (m, kv) = self.import_memory(&g, memory)?;
        let hidden = self.net.decode(&f, &self.config, m, &kv, inputs)?;
        let out = g.value(hidden).clone();
        Ok(out)
    }

    /// Pointer-head latent for a decoder activation.
    pub fn pointer_latent(&self, hidden: &[T]) -> Result<Vec<T>> {
        let g = Graph::new();
        let f = Fwd::eval(&g, &self.store);
        let h = g.constant(Tensor::new(vec![1, hidden.len()], hidden.to_vec())?);
        let v = self.net.pointer_latent(&f, h)?;
        let out = g.value(v).data().to_vec();
        Ok(out)
    }

    /// Log-probabilities of the next token after `prefix`: over the whole
    /// vocabulary in word/action mode, over locations `0..=L` otherwise.
    pub fn step_log_probs(&self, memory: &EncoderMemory<T>, prefix: &[EditToken], mode: DecoderMode) -> Result<Vec<f64>> {
        self.check_memory(memory)?;
        self.check_prefix(memory, prefix)?;
        let g = Graph::new();
        let f = Fwd::eval(&g, &self.store);
        let (m, kv) = self.import_memory(&g, memory)?;
        let hidden = self.net.decode(&f, &self.config, m, &kv, prefix)?;
        let n = prefix.len();
        let last = g.slice(hidden, 0, n - 1, n)?;
        let scores = match mode {
            DecoderMode::WordAction => self.net.word_logits(&f, last)?,
            DecoderMode::Location => self.net.pointer_scores(&f, last, m)?,
        };
        let raw = g.value(scores).to_f64_vec();
        log_softmax(&raw)
    }

    /// Log-probability of each token of `tokens` after the leading [BOS],
    /// scored in one teacher-forced pass.
    pub fn sequence_log_probs(&self, x: &[TokenId], tokens: &[EditToken]) -> Result<Vec<f64>> {
        validate_edit_tokens(tokens, x.len(), false)?;
        let memory = self.encode(x)?;
        let g = Graph::new();
        let f = Fwd::eval(&g, &self.store);
        let (m, kv) = self.import_memory(&g, &memory)?;
        let hidden = self.net.decode(&f, &self.config, m, &kv, &tokens[..tokens.len() - 1])?;
        let h = self.config.d_model;
        let states = g.value(hidden).clone();
        let mut out = Vec::with_capacity(tokens.len() - 1);
        for (pos, &t) in tokens[1..].iter().enumerate() {
            let row = g.constant(Tensor::new(vec![1, h], states.row(pos).to_vec())?);
            let (scores, target) = match t {
                EditToken::Loc(l) => (self.net.pointer_scores(&f, row, m)?, l),
                other => (self.net.word_logits(&f, row)?, self.config.token_id(other).expect("word") as usize),
            };
            out.push(log_softmax(&g.value(scores).to_f64_vec())?[target]);
        }
        Ok(out)
    }

    /// Teacher-forced loss in eval mode (no dropout), location weight 1.
    pub fn teacher_forced_loss(&self, g: &Graph<T>, x: &[TokenId], e: &[EditToken]) -> Result<Var> {
        self.teacher_forced_loss_with(g, x, e, 1.0, None)
    }

    pub fn teacher_forced_loss_with(
        &self,
        g: &Graph<T>,
        x: &[TokenId],
        e: &[EditToken],
        location_weight: f64,
        dropout_rng: Option<&RefCell<ChaCha8Rng>>,
    ) -> Result<Var> {
        self.config.check_input(x)?;
        validate_edit_tokens(e, x.len(), true)?;
        if e.len() > self.config.max_decode_len {
            return Err(RepairError::TrainingData(format!(
                "edit sequence has {} tokens, the decoder accepts {}",
                e.len(),
                self.config.max_decode_len
            )));
        }
        let f = Fwd { g, store: &self.store, dropout: self.config.dropout, rng: dropout_rng };
        let memory = self.net.encode(&f, &self.config, x)?;
        self.net.loss(&f, &self.config, memory, e, location_weight)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.store.save(path)?;
        std::fs::write(manifest_path(path), serde_json::to_string_pretty(&self.config)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let config: ModelConfig = serde_json::from_str(&std::fs::read_to_string(manifest_path(path))?)?;
        Self::from_params(config, ParamStore::load(path)?)
    }
}

impl<T: Real> Clone for Seq2Seq<T> {
    fn clone(&self) -> Self {
        Self { config: self.config.clone(), store: self.store.clone(), net: self.net.clone() }
    }
}

/// `<checkpoint>.json` next to a checkpoint file.
pub fn manifest_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

/// Checks that `e` starts with [BOS], follows the FSM to EOS and only points
/// at locations `0..=input_len`.
fn validate_edit_tokens(e: &[EditToken], input_len: usize, training: bool) -> Result<()> {
    let err = |m: String| if training { RepairError::TrainingData(m) } else { RepairError::Input(m) };
    match run_fsm(e) {
        Ok(FsmState::Eos) => {}
        Ok(s) => return Err(err(format!("edit sequence ends in state {s:?}"))),
        Err(g) => return Err(err(g.to_string())),
    }
    if let Some(l) = e.iter().find_map(|t| match t {
        EditToken::Loc(l) if *l > input_len => Some(*l),
        _ => None,
    }) {
        return Err(err(format!("location {l} is beyond the input length {input_len}")));
    }
    Ok(())
}

fn log_softmax(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.iter().any(|s| s.is_nan()) {
        return Err(RepairError::Numeric("NaN score".into()));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    Ok(scores.iter().map(|s| s - lse).collect())
}

/// Softmax over the word/action logits.
pub fn word_action_distribution(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(RepairError::Input("empty logits".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(RepairError::Numeric("non-finite logit".into()));
    }
    Ok(log_softmax(logits)?.into_iter().map(f64::exp).collect())
}

/// Softmax over `v · m[l]` for every memory row `l`.
pub fn location_distribution<T: Real>(v: &[f64], memory: &EncoderMemory<T>) -> Result<Vec<f64>> {
    let (rows, h) = memory.rows.dims2()?;
    if v.len() != h {
        return Err(RepairError::Tensor(repair_tensor::TensorError::Shape {
            op: "location_distribution",
            lhs: vec![v.len()],
            rhs: vec![rows, h],
        }));
    }
    let scores: Vec<f64> = (0..rows)
        .map(|l| memory.row(l).iter().zip(v).map(|(m, a)| m.as_f64() * a).sum())
        .collect();
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(RepairError::Numeric("non-finite location score".into()));
    }
    Ok(log_softmax(&scores)?.into_iter().map(f64::exp).collect())
}
