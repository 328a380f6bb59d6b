//! Byte-level BPE: training, encoding and decoding.
//!
//! Ids `0..256` are the raw bytes, the next five ids are the special tokens and
//! every id after that is a learned merge, in training order.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{RepairError, Result};

pub type TokenId = u32;

pub const NUM_BYTES: usize = 256;
pub const NUM_SPECIALS: usize = 5;
pub const DEFAULT_VOCAB_SIZE: usize = 1000;

const SPECIAL_NAMES: [&str; NUM_SPECIALS] = ["[BOS]", "[EOS]", "[PAD]", "[DELETE]", "[INSERT]"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialIds {
    pub bos: TokenId,
    pub eos: TokenId,
    pub pad: TokenId,
    pub delete: TokenId,
    pub insert: TokenId,
}

impl SpecialIds {
    pub const STANDARD: SpecialIds = SpecialIds {
        bos: NUM_BYTES as TokenId,
        eos: NUM_BYTES as TokenId + 1,
        pad: NUM_BYTES as TokenId + 2,
        delete: NUM_BYTES as TokenId + 3,
        insert: NUM_BYTES as TokenId + 4,
    };

    pub fn contains(&self, id: TokenId) -> bool {
        id == self.bos || id == self.eos || id == self.pad || id == self.delete || id == self.insert
    }

    fn as_array(&self) -> [TokenId; NUM_SPECIALS] {
        [self.bos, self.eos, self.pad, self.delete, self.insert]
    }
}

/// Token sequence over a [`Vocab`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSeq(pub Vec<TokenId>);

impl TokenSeq {
    pub fn ids(&self) -> &[TokenId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl From<Vec<TokenId>> for TokenSeq {
    fn from(ids: Vec<TokenId>) -> Self {
        TokenSeq(ids)
    }
}

impl std::ops::Deref for TokenSeq {
    type Target = [TokenId];
    fn deref(&self) -> &[TokenId] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    merges: Vec<(TokenId, TokenId)>,
    token_bytes: Vec<Vec<u8>>,
    token_to_id: HashMap<Vec<u8>, TokenId>,
    ranks: HashMap<(TokenId, TokenId), usize>,
    specials: SpecialIds,
}

impl Vocab {
    /// Vocabulary with no merges.
    pub fn byte_level() -> Self {
        Self::from_merges(Vec::new()).expect("byte-level vocabulary is always valid")
    }

    fn from_merges(merges: Vec<(TokenId, TokenId)>) -> Result<Self> {
        let mut token_bytes: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        token_bytes.extend(std::iter::repeat(Vec::new()).take(NUM_SPECIALS));
        let mut ranks = HashMap::with_capacity(merges.len());
        for (rank, &(l, r)) in merges.iter().enumerate() {
            let next = token_bytes.len() as TokenId;
            for id in [l, r] {
                if id >= next || SpecialIds::STANDARD.contains(id) {
                    return Err(RepairError::Config(format!(
                        "merge {rank} refers to invalid token {id}"
                    )));
                }
            }
            if ranks.insert((l, r), rank).is_some() {
                return Err(RepairError::Config(format!("duplicate merge ({l}, {r})")));
            }
            let mut bytes = token_bytes[l as usize].clone();
            bytes.extend_from_slice(&token_bytes[r as usize]);
            token_bytes.push(bytes);
        }
        let mut token_to_id = HashMap::with_capacity(token_bytes.len());
        for (id, bytes) in token_bytes.iter().enumerate() {
            if SpecialIds::STANDARD.contains(id as TokenId) {
                continue;
            }
            if token_to_id.insert(bytes.clone(), id as TokenId).is_some() {
                return Err(RepairError::Config(format!(
                    "token {id} duplicates an earlier token"
                )));
            }
        }
        Ok(Self { merges, token_bytes, token_to_id, ranks, specials: SpecialIds::STANDARD })
    }

    pub fn len(&self) -> usize {
        self.token_bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn merges(&self) -> &[(TokenId, TokenId)] {
        &self.merges
    }

    pub fn specials(&self) -> SpecialIds {
        self.specials
    }

    pub fn is_word(&self, id: TokenId) -> bool {
        (id as usize) < self.len() && !self.specials.contains(id)
    }

    /// Byte content of a word token.
    pub fn token_bytes(&self, id: TokenId) -> Option<&[u8]> {
        self.is_word(id).then(|| self.token_bytes[id as usize].as_slice())
    }

    pub fn token_id(&self, bytes: &[u8]) -> Option<TokenId> {
        self.token_to_id.get(bytes).copied()
    }

    /// Printable form of any id, specials included.
    pub fn display_token(&self, id: TokenId) -> String {
        if let Some(k) = self.specials.as_array().iter().position(|&s| s == id) {
            return SPECIAL_NAMES[k].to_string();
        }
        match self.token_bytes(id) {
            Some(b) => String::from_utf8_lossy(b).into_owned(),
            None => format!("<unk:{id}>"),
        }
    }

    pub fn encode(&self, text: &str) -> TokenSeq {
        self.encode_bytes(text.as_bytes())
    }

    pub fn encode_bytes(&self, bytes: &[u8]) -> TokenSeq {
        let mut ids: Vec<TokenId> = bytes.iter().map(|&b| b as TokenId).collect();
        let merge_base = (NUM_BYTES + NUM_SPECIALS) as TokenId;
        loop {
            let best = ids
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).map(|&r| (r, w[0], w[1])))
                .min();
            let Some((rank, l, r)) = best else { break };
            ids = merge_pair(&ids, l, r, merge_base + rank as TokenId);
        }
        TokenSeq(ids)
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        String::from_utf8(self.decode_bytes(ids)?)
            .map_err(|e| RepairError::Domain(format!("decoded bytes are not UTF-8: {e}")))
    }

    pub fn decode_bytes(&self, ids: &[TokenId]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            match self.token_bytes(id) {
                Some(b) => out.extend_from_slice(b),
                None => {
                    return Err(RepairError::Domain(format!(
                        "id {id} ({}) is not a word token",
                        self.display_token(id)
                    )))
                }
            }
        }
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        let specials: BTreeMap<String, TokenId> = SPECIAL_NAMES
            .iter()
            .zip(self.specials.as_array())
            .map(|(n, id)| (n.to_string(), id))
            .collect();
        let table = byte_to_char_table();
        let tokens = (0..self.len() as TokenId)
            .map(|id| match self.token_bytes(id) {
                Some(b) => b.iter().map(|&c| table[c as usize]).collect(),
                None => self.display_token(id),
            })
            .collect();
        let file = VocabFile { merges: self.merges.clone(), specials, tokens };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: VocabFile = serde_json::from_str(text)?;
        let vocab = Self::from_merges(file.merges)?;
        for (k, name) in SPECIAL_NAMES.iter().enumerate() {
            if file.specials.get(*name) != Some(&vocab.specials.as_array()[k]) {
                return Err(RepairError::Config(format!("unexpected id for special {name}")));
            }
        }
        if file.tokens.len() != vocab.len() {
            return Err(RepairError::Config(format!(
                "token list has {} entries, merges imply {}",
                file.tokens.len(),
                vocab.len()
            )));
        }
        let table = byte_to_char_table();
        for (id, tok) in file.tokens.iter().enumerate() {
            let expected = match vocab.token_bytes(id as TokenId) {
                Some(b) => b.iter().map(|&c| table[c as usize]).collect::<String>(),
                None => vocab.display_token(id as TokenId),
            };
            if *tok != expected {
                return Err(RepairError::Config(format!(
                    "token {id} is {tok:?}, merges imply {expected:?}"
                )));
            }
        }
        Ok(vocab)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    merges: Vec<(TokenId, TokenId)>,
    specials: BTreeMap<String, TokenId>,
    tokens: Vec<String>,
}

/// Reversible byte to printable-char mapping used for the `tokens` listing.
fn byte_to_char_table() -> [char; 256] {
    let mut table = ['\0'; 256];
    let mut extra = 0u32;
    for b in 0..256u32 {
        let printable = (0x21..=0x7e).contains(&b) || (0xa1..=0xac).contains(&b) || (0xae..=0xff).contains(&b);
        table[b as usize] = if printable {
            char::from_u32(b).unwrap()
        } else {
            extra += 1;
            char::from_u32(255 + extra).unwrap()
        };
    }
    table
}

fn concat(bytes: &[Vec<u8>], l: TokenId, r: TokenId) -> Vec<u8> {
    let mut out = bytes[l as usize].clone();
    out.extend_from_slice(&bytes[r as usize]);
    out
}

fn merge_pair(ids: &[TokenId], l: TokenId, r: TokenId, new: TokenId) -> Vec<TokenId> {
    let mut out = Vec::with_capacity(ids.len());
    let mut i = 0;
    while i < ids.len() {
        if i + 1 < ids.len() && ids[i] == l && ids[i + 1] == r {
            out.push(new);
            i += 2;
        } else {
            out.push(ids[i]);
            i += 1;
        }
    }
    out
}

/// Learns `vocab_size - 261` merges from `corpus`.
///
/// Each round merges the most frequent adjacent pair; equal counts go to the
/// smallest `(left, right)` id pair.
pub fn train_bpe<S: AsRef<str>>(corpus: &[S], vocab_size: usize) -> Result<Vocab> {
    learn_merges(corpus, vocab_size, true)
}

/// Like [`train_bpe`], but stops early instead of failing when the corpus
/// runs out of pairs.
pub fn train_bpe_up_to<S: AsRef<str>>(corpus: &[S], vocab_size: usize) -> Result<Vocab> {
    learn_merges(corpus, vocab_size, false)
}

/// Splits texts into whitespace-delimited words, each after the first
/// carrying its leading space, so merges never span two words.
pub fn word_corpus<S: AsRef<str>>(texts: &[S]) -> Vec<String> {
    texts
        .iter()
        .flat_map(|t| {
            t.as_ref().split_whitespace().enumerate().map(|(i, w)| if i == 0 { w.to_string() } else { format!(" {w}") })
        })
        .collect()
}

fn learn_merges<S: AsRef<str>>(corpus: &[S], vocab_size: usize, strict: bool) -> Result<Vocab> {
    let base = NUM_BYTES + NUM_SPECIALS;
    if vocab_size < base {
        return Err(RepairError::Config(format!(
            "vocab_size {vocab_size} is below the byte-level minimum {base}"
        )));
    }
    if corpus.iter().all(|d| d.as_ref().is_empty()) {
        return Err(RepairError::Config("empty corpus".into()));
    }
    let mut counts: BTreeMap<Vec<TokenId>, u64> = BTreeMap::new();
    for doc in corpus {
        let ids = doc.as_ref().bytes().map(|b| b as TokenId).collect();
        *counts.entry(ids).or_default() += 1;
    }
    let mut words: Vec<(Vec<TokenId>, u64)> = counts.into_iter().collect();

    let mut pair_counts: HashMap<(TokenId, TokenId), u64> = HashMap::new();
    let mut occurs: HashMap<(TokenId, TokenId), HashSet<usize>> = HashMap::new();
    for (k, (ids, n)) in words.iter().enumerate() {
        for w in ids.windows(2) {
            *pair_counts.entry((w[0], w[1])).or_default() += n;
            occurs.entry((w[0], w[1])).or_default().insert(k);
        }
    }

    // Two different merges may spell the same bytes; only the first is kept.
    let mut bytes: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
    bytes.extend(std::iter::repeat(Vec::new()).take(NUM_SPECIALS));
    let mut known: HashSet<Vec<u8>> = bytes[..NUM_BYTES].iter().cloned().collect();

    let wanted = vocab_size - base;
    let mut merges = Vec::with_capacity(wanted);
    while merges.len() < wanted {
        let best = pair_counts
            .iter()
            .filter(|((l, r), _)| !known.contains(&concat(&bytes, *l, *r)))
            .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)))
            .map(|(&p, _)| p);
        let Some((l, r)) = best else {
            if !strict {
                break;
            }
            return Err(RepairError::Config(format!(
                "corpus supports only {} merges, {wanted} requested",
                merges.len()
            )));
        };
        let new = (base + merges.len()) as TokenId;
        let touched = occurs.remove(&(l, r)).unwrap_or_default();
        for k in touched {
            let (ids, n) = &mut words[k];
            for w in ids.windows(2) {
                let key = (w[0], w[1]);
                let c = pair_counts.get_mut(&key).expect("pair counted");
                *c -= *n;
                if *c == 0 {
                    pair_counts.remove(&key);
                }
            }
            *ids = merge_pair(ids, l, r, new);
            for w in ids.windows(2) {
                *pair_counts.entry((w[0], w[1])).or_default() += *n;
                occurs.entry((w[0], w[1])).or_default().insert(k);
            }
        }
        let merged = concat(&bytes, l, r);
        known.insert(merged.clone());
        bytes.push(merged);
        merges.push((l, r));
    }
    Vocab::from_merges(merges)
}
