//! The edit language: tokens, the finite state machine, structured programs
//! and their serialized forms.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokenizer::{SpecialIds, TokenId, Vocab};

/// Longest buggy sequence the location alphabet can address.
pub const MAX_SEQ_LEN: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EditToken {
    Bos,
    Eos,
    Delete,
    Insert,
    Word(TokenId),
    Loc(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TokenKind {
    Bos,
    Eos,
    Delete,
    Insert,
    Word,
    Loc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FsmState {
    Bos,
    Action,
    InsAt,
    DelFrom,
    DelTo,
    Word,
    Eos,
}

/// Which output head the decoder uses at a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DecoderMode {
    WordAction,
    Location,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GrammarError {
    #[error("grammar violation at token {position}: {kind:?} not allowed in state {state:?}")]
    Violation { position: usize, state: FsmState, kind: TokenKind },
    #[error("state {0:?} has no outgoing transitions")]
    Terminal(FsmState),
    #[error("sequence ends in state {0:?}, expected EOS")]
    Incomplete(FsmState),
    #[error("invalid edit program: {0}")]
    Semantic(String),
    #[error("location {0} exceeds the budget of {MAX_SEQ_LEN}")]
    LocationBudget(usize),
    #[error("token id {0} is not an edit token")]
    UnknownId(u32),
    #[error("cannot parse edit text: {0}")]
    Text(String),
}

impl EditToken {
    pub fn kind(self) -> TokenKind {
        match self {
            EditToken::Bos => TokenKind::Bos,
            EditToken::Eos => TokenKind::Eos,
            EditToken::Delete => TokenKind::Delete,
            EditToken::Insert => TokenKind::Insert,
            EditToken::Word(_) => TokenKind::Word,
            EditToken::Loc(_) => TokenKind::Loc,
        }
    }
}

impl fmt::Display for EditToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EditToken::Bos => write!(f, "[BOS]"),
            EditToken::Eos => write!(f, "[EOS]"),
            EditToken::Delete => write!(f, "[DELETE]"),
            EditToken::Insert => write!(f, "[INSERT]"),
            EditToken::Word(id) => write!(f, "w{id}"),
            EditToken::Loc(l) => write!(f, "[LOC_{l}]"),
        }
    }
}

impl FsmState {
    pub fn mode(self) -> DecoderMode {
        match self {
            FsmState::InsAt | FsmState::DelFrom | FsmState::DelTo => DecoderMode::Location,
            _ => DecoderMode::WordAction,
        }
    }
}

pub fn fsm_next(state: FsmState, token: EditToken) -> Result<FsmState, GrammarError> {
    use FsmState as S;
    use TokenKind as K;
    let next = match (state, token.kind()) {
        (S::Bos, K::Bos) => S::Action,
        (S::Action, K::Eos) | (S::Word, K::Eos) => S::Eos,
        (S::Action, K::Insert) | (S::Word, K::Insert) => S::InsAt,
        (S::Action, K::Delete) | (S::Word, K::Delete) => S::DelFrom,
        (S::DelFrom, K::Loc) => S::DelTo,
        (S::DelTo, K::Loc) => S::Action,
        (S::InsAt, K::Loc) => S::Word,
        (S::Word, K::Word) => S::Word,
        (state, kind) => return Err(GrammarError::Violation { position: 0, state, kind }),
    };
    Ok(next)
}

pub fn valid_token_kinds(state: FsmState) -> Result<&'static [TokenKind], GrammarError> {
    use TokenKind as K;
    Ok(match state {
        FsmState::Bos => &[K::Bos],
        FsmState::Action => &[K::Delete, K::Insert, K::Eos],
        FsmState::DelFrom | FsmState::DelTo | FsmState::InsAt => &[K::Loc],
        FsmState::Word => &[K::Word, K::Delete, K::Insert, K::Eos],
        FsmState::Eos => return Err(GrammarError::Terminal(FsmState::Eos)),
    })
}

/// Runs the FSM over `tokens` and returns the final state.
pub fn run_fsm(tokens: &[EditToken]) -> Result<FsmState, GrammarError> {
    let mut state = FsmState::Bos;
    for (position, &tok) in tokens.iter().enumerate() {
        state = fsm_next(state, tok).map_err(|e| match e {
            GrammarError::Violation { state, kind, .. } => {
                GrammarError::Violation { position, state, kind }
            }
            other => other,
        })?;
    }
    Ok(state)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EditAction {
    Delete { from: usize, to: usize },
    Insert { at: usize, words: Vec<TokenId> },
}

impl EditAction {
    /// Sort key: location first, an insert before a delete at the same place.
    fn key(&self) -> (usize, u8) {
        match self {
            EditAction::Insert { at, .. } => (*at, 0),
            EditAction::Delete { from, .. } => (*from, 1),
        }
    }

    pub fn max_location(&self) -> usize {
        match self {
            EditAction::Delete { to, .. } => *to,
            EditAction::Insert { at, .. } => *at,
        }
    }
}

/// Actions in original-sequence coordinates.
///
/// Valid programs have strictly increasing `(location, insert-before-delete)`
/// keys, disjoint deletes, non-empty inserts and no insert strictly inside a
/// deleted range.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EditProgram {
    pub actions: Vec<EditAction>,
}

impl EditProgram {
    pub fn new(actions: Vec<EditAction>) -> Result<Self, GrammarError> {
        let p = Self { actions };
        p.validate()?;
        Ok(p)
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn validate(&self) -> Result<(), GrammarError> {
        let sem = |m: String| Err(GrammarError::Semantic(m));
        let mut deletes = Vec::new();
        for (k, a) in self.actions.iter().enumerate() {
            if a.max_location() > MAX_SEQ_LEN {
                return Err(GrammarError::LocationBudget(a.max_location()));
            }
            match a {
                EditAction::Delete { from, to } => {
                    if from >= to {
                        return sem(format!("action {k}: delete range [{from}, {to}) is empty"));
                    }
                    deletes.push((*from, *to));
                }
                EditAction::Insert { words, .. } => {
                    if words.is_empty() {
                        return sem(format!("action {k}: insert has no words"));
                    }
                    if let Some(w) = words.iter().find(|&&w| SpecialIds::STANDARD.contains(w)) {
                        return sem(format!("action {k}: insert contains special id {w}"));
                    }
                }
            }
            if k > 0 && self.actions[k - 1].key() >= a.key() {
                return sem(format!("action {k} is out of order"));
            }
        }
        for w in deletes.windows(2) {
            if w[1].0 < w[0].1 {
                return sem(format!("deletes {:?} and {:?} overlap", w[0], w[1]));
            }
        }
        for a in &self.actions {
            if let EditAction::Insert { at, .. } = a {
                if deletes.iter().any(|&(f, t)| f < *at && *at < t) {
                    return sem(format!("insert at {at} falls inside a deleted range"));
                }
            }
        }
        Ok(())
    }

    /// Number of word tokens inserted across all actions.
    pub fn insertion_len(&self) -> usize {
        self.actions
            .iter()
            .map(|a| match a {
                EditAction::Insert { words, .. } => words.len(),
                EditAction::Delete { .. } => 0,
            })
            .sum()
    }

    pub fn max_location(&self) -> usize {
        self.actions.iter().map(EditAction::max_location).max().unwrap_or(0)
    }
}

pub fn serialize(program: &EditProgram) -> Result<Vec<EditToken>, GrammarError> {
    program.validate()?;
    let mut out = vec![EditToken::Bos];
    for a in &program.actions {
        match a {
            EditAction::Delete { from, to } => {
                out.extend([EditToken::Delete, EditToken::Loc(*from), EditToken::Loc(*to)])
            }
            EditAction::Insert { at, words } => {
                out.extend([EditToken::Insert, EditToken::Loc(*at)]);
                out.extend(words.iter().map(|&w| EditToken::Word(w)));
            }
        }
    }
    out.push(EditToken::Eos);
    Ok(out)
}

pub fn parse(tokens: &[EditToken]) -> Result<EditProgram, GrammarError> {
    let end = run_fsm(tokens)?;
    if end != FsmState::Eos {
        return Err(GrammarError::Incomplete(end));
    }
    let mut actions = Vec::new();
    let mut i = 1;
    let loc = |t: EditToken| match t {
        EditToken::Loc(l) => l,
        _ => unreachable!("FSM guarantees a location"),
    };
    while i < tokens.len() {
        match tokens[i] {
            EditToken::Delete => {
                actions.push(EditAction::Delete { from: loc(tokens[i + 1]), to: loc(tokens[i + 2]) });
                i += 3;
            }
            EditToken::Insert => {
                let at = loc(tokens[i + 1]);
                i += 2;
                let mut words = Vec::new();
                while let EditToken::Word(w) = tokens[i] {
                    words.push(w);
                    i += 1;
                }
                actions.push(EditAction::Insert { at, words });
            }
            EditToken::Eos => break,
            _ => unreachable!("FSM guarantees an action"),
        }
    }
    let program = EditProgram { actions };
    program.validate()?;
    Ok(program)
}

/// Incremental validity tracker used while decoding.
///
/// Beyond the FSM it enforces the program rules (ordering, disjoint deletes,
/// non-empty inserts) and the bound `location <= input_len`, so every sequence
/// it accepts parses and applies.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrammarCursor {
    state: FsmState,
    input_len: usize,
    last_key: Option<(usize, u8)>,
    delete_end: usize,
    pending_from: usize,
    words_in_insert: usize,
}

impl GrammarCursor {
    pub fn new(input_len: usize) -> Self {
        Self {
            state: FsmState::Bos,
            input_len,
            last_key: None,
            delete_end: 0,
            pending_from: 0,
            words_in_insert: 0,
        }
    }

    pub fn state(&self) -> FsmState {
        self.state
    }

    pub fn mode(&self) -> DecoderMode {
        self.state.mode()
    }

    pub fn input_len(&self) -> usize {
        self.input_len
    }

    fn insert_min(&self) -> usize {
        let after = self.last_key.map_or(0, |(p, _)| p + 1);
        after.max(self.delete_end)
    }

    fn delete_min(&self) -> usize {
        let after = match self.last_key {
            None => 0,
            Some((p, 0)) => p,
            Some((p, _)) => p + 1,
        };
        after.max(self.delete_end)
    }

    fn can_close_insert(&self) -> bool {
        self.state == FsmState::Action || (self.state == FsmState::Word && self.words_in_insert > 0)
    }

    pub fn can_end(&self) -> bool {
        self.can_close_insert()
    }

    pub fn can_delete(&self) -> bool {
        self.can_close_insert() && self.delete_min() < self.input_len
    }

    pub fn can_insert(&self) -> bool {
        self.can_close_insert() && self.insert_min() <= self.input_len
    }

    pub fn can_word(&self) -> bool {
        self.state == FsmState::Word
    }

    /// Inclusive range of legal locations, if the next token is a location.
    pub fn location_range(&self) -> Option<(usize, usize)> {
        let (lo, hi) = match self.state {
            FsmState::DelFrom => (self.delete_min(), self.input_len.checked_sub(1)?),
            FsmState::DelTo => (self.pending_from + 1, self.input_len),
            FsmState::InsAt => (self.insert_min(), self.input_len),
            _ => return None,
        };
        (lo <= hi).then_some((lo, hi))
    }

    pub fn allows(&self, token: EditToken) -> bool {
        match token {
            EditToken::Bos => self.state == FsmState::Bos,
            EditToken::Eos => self.can_end(),
            EditToken::Delete => self.can_delete(),
            EditToken::Insert => self.can_insert(),
            EditToken::Word(w) => self.can_word() && !SpecialIds::STANDARD.contains(w),
            EditToken::Loc(l) => self.location_range().is_some_and(|(lo, hi)| lo <= l && l <= hi),
        }
    }

    pub fn advance(&mut self, token: EditToken) -> Result<(), GrammarError> {
        if !self.allows(token) {
            let next = fsm_next(self.state, token)?;
            return Err(GrammarError::Semantic(format!(
                "{token} is FSM-legal ({:?} -> {next:?}) but breaks program rules",
                self.state
            )));
        }
        let next = fsm_next(self.state, token)?;
        match (self.state, token) {
            (FsmState::DelFrom, EditToken::Loc(l)) => self.pending_from = l,
            (FsmState::DelTo, EditToken::Loc(l)) => {
                self.last_key = Some((self.pending_from, 1));
                self.delete_end = l;
            }
            (FsmState::InsAt, EditToken::Loc(l)) => {
                self.last_key = Some((l, 0));
                self.words_in_insert = 0;
            }
            (FsmState::Word, EditToken::Word(_)) => self.words_in_insert += 1,
            _ => {}
        }
        self.state = next;
        Ok(())
    }

    /// Fewest further tokens needed to reach EOS.
    pub fn min_tokens_to_finish(&self) -> usize {
        match self.state {
            FsmState::Eos => 0,
            FsmState::Bos => 2,
            FsmState::Action => 1,
            FsmState::Word if self.words_in_insert > 0 => 1,
            FsmState::Word => 2,
            FsmState::DelTo => 2,
            FsmState::InsAt | FsmState::DelFrom => 3,
        }
    }
}

/// Maps edit tokens to flat ids: vocabulary ids first, then `vocab_size + l`
/// for location `l`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EditCodec {
    vocab_size: usize,
    specials: SpecialIds,
}

impl EditCodec {
    pub fn new(vocab_size: usize, specials: SpecialIds) -> Self {
        Self { vocab_size, specials }
    }

    pub fn for_vocab(vocab: &Vocab) -> Self {
        Self::new(vocab.len(), vocab.specials())
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn specials(&self) -> SpecialIds {
        self.specials
    }

    pub fn to_id(&self, token: EditToken) -> u32 {
        let s = self.specials;
        match token {
            EditToken::Bos => s.bos,
            EditToken::Eos => s.eos,
            EditToken::Delete => s.delete,
            EditToken::Insert => s.insert,
            EditToken::Word(w) => w,
            EditToken::Loc(l) => (self.vocab_size + l) as u32,
        }
    }

    pub fn from_id(&self, id: u32) -> Result<EditToken, GrammarError> {
        let s = self.specials;
        let idx = id as usize;
        Ok(match id {
            _ if id == s.bos => EditToken::Bos,
            _ if id == s.eos => EditToken::Eos,
            _ if id == s.delete => EditToken::Delete,
            _ if id == s.insert => EditToken::Insert,
            _ if id == s.pad => return Err(GrammarError::UnknownId(id)),
            _ if idx < self.vocab_size => EditToken::Word(id),
            _ if idx - self.vocab_size <= MAX_SEQ_LEN => EditToken::Loc(idx - self.vocab_size),
            _ => return Err(GrammarError::UnknownId(id)),
        })
    }

    pub fn encode(&self, tokens: &[EditToken]) -> Vec<u32> {
        tokens.iter().map(|&t| self.to_id(t)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Result<Vec<EditToken>, GrammarError> {
        ids.iter().map(|&i| self.from_id(i)).collect()
    }
}

/// One-line text form, e.g. `DEL 1 2 | INS 2 "@Override" " public"`.
///
/// Each inserted word is printed as a JSON string of its bytes, or as `0x..`
/// hex when the token is not valid UTF-8 on its own. An empty program is an
/// empty line.
pub fn program_to_text(program: &EditProgram, vocab: &Vocab) -> Result<String, GrammarError> {
    let mut parts = Vec::with_capacity(program.len());
    for a in &program.actions {
        match a {
            EditAction::Delete { from, to } => parts.push(format!("DEL {from} {to}")),
            EditAction::Insert { at, words } => {
                let mut s = format!("INS {at}");
                for &w in words {
                    let bytes = vocab.token_bytes(w).ok_or(GrammarError::UnknownId(w))?;
                    s.push(' ');
                    match std::str::from_utf8(bytes) {
                        Ok(text) => s.push_str(&serde_json::to_string(text).expect("string")),
                        Err(_) => s.push_str(&format!("0x{}", hex::encode(bytes))),
                    }
                }
                parts.push(s);
            }
        }
    }
    Ok(parts.join(" | "))
}

pub fn program_from_text(line: &str, vocab: &Vocab) -> Result<EditProgram, GrammarError> {
    let line = line.trim();
    let mut actions = Vec::new();
    if line.is_empty() {
        return Ok(EditProgram::default());
    }
    let mut rest = line;
    loop {
        let (action, tail) = parse_text_action(rest, vocab)?;
        actions.push(action);
        let tail = tail.trim_start();
        if tail.is_empty() {
            break;
        }
        rest = tail
            .strip_prefix('|')
            .ok_or_else(|| GrammarError::Text(format!("expected '|' before {tail:?}")))?
            .trim_start();
    }
    EditProgram::new(actions)
}

fn parse_text_action<'a>(s: &'a str, vocab: &Vocab) -> Result<(EditAction, &'a str), GrammarError> {
    let bad = |m: &str| GrammarError::Text(m.to_string());
    let (head, mut rest) = split_word(s);
    match head {
        "DEL" => {
            let (a, r) = split_word(rest);
            let (b, r) = split_word(r);
            let from = a.parse().map_err(|_| bad("bad DEL start"))?;
            let to = b.parse().map_err(|_| bad("bad DEL end"))?;
            Ok((EditAction::Delete { from, to }, r))
        }
        "INS" => {
            let (a, r) = split_word(rest);
            let at = a.parse().map_err(|_| bad("bad INS location"))?;
            rest = r.trim_start();
            let mut words = Vec::new();
            loop {
                let bytes = if rest.starts_with('"') {
                    let mut de = serde_json::Deserializer::from_str(rest).into_iter::<String>();
                    let text = de
                        .next()
                        .ok_or_else(|| bad("unterminated word"))?
                        .map_err(|e| GrammarError::Text(e.to_string()))?;
                    rest = &rest[de.byte_offset()..];
                    text.into_bytes()
                } else if let Some(h) = rest.strip_prefix("0x") {
                    let (digits, r) = split_word(h);
                    rest = r;
                    hex::decode(digits).map_err(|e| GrammarError::Text(e.to_string()))?
                } else {
                    break;
                };
                let id = vocab
                    .token_id(&bytes)
                    .ok_or_else(|| GrammarError::Text(format!("{bytes:?} is not a vocabulary token")))?;
                words.push(id);
                rest = rest.trim_start();
            }
            Ok((EditAction::Insert { at, words }, rest))
        }
        other => Err(GrammarError::Text(format!("unknown action {other:?}"))),
    }
}

fn split_word(s: &str) -> (&str, &str) {
    let s = s.trim_start();
    let end = s.find(char::is_whitespace).unwrap_or(s.len());
    (&s[..end], &s[end..])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cursor_finishing_bounds_are_reachable() {
        let mut c = GrammarCursor::new(3);
        c.advance(EditToken::Bos).unwrap();
        c.advance(EditToken::Insert).unwrap();
        assert_eq!(c.min_tokens_to_finish(), 3);
        c.advance(EditToken::Loc(3)).unwrap();
        assert_eq!(c.min_tokens_to_finish(), 2);
        assert!(!c.can_end());
        c.advance(EditToken::Word(7)).unwrap();
        assert!(c.can_end());
        assert!(!c.can_insert());
        assert!(!c.can_delete());
    }

    #[test]
    fn cursor_blocks_insert_inside_delete() {
        let mut c = GrammarCursor::new(5);
        for t in [EditToken::Bos, EditToken::Delete, EditToken::Loc(1), EditToken::Loc(4), EditToken::Insert] {
            c.advance(t).unwrap();
        }
        assert_eq!(c.location_range(), Some((4, 5)));
    }
}
