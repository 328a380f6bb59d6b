//! Recursive longest-matching-block diffing, edit application and corpus
//! statistics.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{RepairError, Result};
use crate::grammar::{serialize, EditAction, EditProgram, MAX_SEQ_LEN};
use crate::tokenizer::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpTag {
    Equal,
    Delete,
    Insert,
    Replace,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Opcode {
    pub tag: OpTag,
    pub i1: usize,
    pub i2: usize,
    pub j1: usize,
    pub j2: usize,
}

/// A matching block `x[i..i + len] == y[j..j + len]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Block {
    pub i: usize,
    pub j: usize,
    pub len: usize,
}

/// Longest common block of `x[xlo..xhi]` and `y[ylo..yhi]`; ties go to the
/// smallest `i`, then the smallest `j`. Returns `len == 0` if nothing matches.
pub fn longest_matching_block<T: Eq + Hash>(
    x: &[T],
    y: &[T],
    (xlo, xhi): (usize, usize),
    (ylo, yhi): (usize, usize),
) -> Block {
    let mut positions: HashMap<&T, Vec<usize>> = HashMap::new();
    for (j, t) in y.iter().enumerate().take(yhi).skip(ylo) {
        positions.entry(t).or_default().push(j);
    }
    longest_in(x, &positions, (xlo, xhi), (ylo, yhi))
}

fn longest_in<T: Eq + Hash>(
    x: &[T],
    positions: &HashMap<&T, Vec<usize>>,
    (xlo, xhi): (usize, usize),
    (ylo, yhi): (usize, usize),
) -> Block {
    let mut best = Block { i: xlo, j: ylo, len: 0 };
    // run[j] = length of the match ending at (i - 1, j - 1)
    let mut run: HashMap<usize, usize> = HashMap::new();
    for (i, t) in x.iter().enumerate().take(xhi).skip(xlo) {
        let mut next = HashMap::new();
        if let Some(js) = positions.get(t) {
            for &j in js {
                if j < ylo {
                    continue;
                }
                if j >= yhi {
                    break;
                }
                let k = run.get(&j).copied().unwrap_or(0) + 1;
                next.insert(j + 1, k);
                if k > best.len {
                    best = Block { i: i + 1 - k, j: j + 1 - k, len: k };
                }
            }
        }
        run = next;
    }
    best
}

/// All matching blocks in order, adjacent blocks merged, without the
/// zero-length sentinel.
pub fn matching_blocks<T: Eq + Hash>(x: &[T], y: &[T]) -> Vec<Block> {
    let mut positions: HashMap<&T, Vec<usize>> = HashMap::new();
    for (j, t) in y.iter().enumerate() {
        positions.entry(t).or_default().push(j);
    }
    let mut found = Vec::new();
    let mut stack = vec![(0, x.len(), 0, y.len())];
    while let Some((xlo, xhi, ylo, yhi)) = stack.pop() {
        let b = longest_in(x, &positions, (xlo, xhi), (ylo, yhi));
        if b.len == 0 {
            continue;
        }
        found.push(b);
        if xlo < b.i && ylo < b.j {
            stack.push((xlo, b.i, ylo, b.j));
        }
        if b.i + b.len < xhi && b.j + b.len < yhi {
            stack.push((b.i + b.len, xhi, b.j + b.len, yhi));
        }
    }
    found.sort_by_key(|b| (b.i, b.j));
    let mut merged: Vec<Block> = Vec::with_capacity(found.len());
    for b in found {
        match merged.last_mut() {
            Some(last) if last.i + last.len == b.i && last.j + last.len == b.j => last.len += b.len,
            _ => merged.push(b),
        }
    }
    merged
}

pub fn opcodes<T: Eq + Hash>(x: &[T], y: &[T]) -> Vec<Opcode> {
    let mut ops = Vec::new();
    let (mut i, mut j) = (0, 0);
    let sentinel = Block { i: x.len(), j: y.len(), len: 0 };
    for b in matching_blocks(x, y).into_iter().chain(std::iter::once(sentinel)) {
        let tag = match (i < b.i, j < b.j) {
            (true, true) => Some(OpTag::Replace),
            (true, false) => Some(OpTag::Delete),
            (false, true) => Some(OpTag::Insert),
            (false, false) => None,
        };
        if let Some(tag) = tag {
            ops.push(Opcode { tag, i1: i, i2: b.i, j1: j, j2: b.j });
        }
        if b.len > 0 {
            ops.push(Opcode { tag: OpTag::Equal, i1: b.i, i2: b.i + b.len, j1: b.j, j2: b.j + b.len });
        }
        i = b.i + b.len;
        j = b.j + b.len;
    }
    ops
}

/// Edit program turning `x` into `y`. A replaced range becomes a delete
/// followed by an insert at the end of the range.
pub fn derive_edits(x: &[TokenId], y: &[TokenId]) -> Result<EditProgram> {
    if x.len() > MAX_SEQ_LEN {
        return Err(RepairError::Input(format!(
            "buggy sequence has {} tokens, the limit is {MAX_SEQ_LEN}",
            x.len()
        )));
    }
    let mut actions = Vec::new();
    for op in opcodes(x, y) {
        let words = || y[op.j1..op.j2].to_vec();
        match op.tag {
            OpTag::Equal => {}
            OpTag::Delete => actions.push(EditAction::Delete { from: op.i1, to: op.i2 }),
            OpTag::Insert => actions.push(EditAction::Insert { at: op.i1, words: words() }),
            OpTag::Replace => {
                actions.push(EditAction::Delete { from: op.i1, to: op.i2 });
                actions.push(EditAction::Insert { at: op.i2, words: words() });
            }
        }
    }
    let program = EditProgram { actions };
    debug_assert!(program.validate().is_ok());
    Ok(program)
}

fn check_applicable(x: &[TokenId], p: &EditProgram) -> Result<()> {
    p.validate().map_err(|e| RepairError::Domain(e.to_string()))?;
    let max = p.max_location();
    if max > x.len() {
        return Err(RepairError::Apply(format!(
            "location {max} is out of range for a sequence of {} tokens",
            x.len()
        )));
    }
    Ok(())
}

/// Applies `p` right to left so that original indices stay valid.
pub fn apply_edits(x: &[TokenId], p: &EditProgram) -> Result<Vec<TokenId>> {
    check_applicable(x, p)?;
    let mut out = x.to_vec();
    for a in p.actions.iter().rev() {
        match a {
            EditAction::Delete { from, to } => {
                out.drain(*from..*to);
            }
            EditAction::Insert { at, words } => {
                out.splice(*at..*at, words.iter().copied());
            }
        }
    }
    Ok(out)
}

/// Same result as [`apply_edits`], applied left to right with a running offset.
pub fn apply_edits_forward(x: &[TokenId], p: &EditProgram) -> Result<Vec<TokenId>> {
    check_applicable(x, p)?;
    let mut out = x.to_vec();
    let mut offset: isize = 0;
    for a in &p.actions {
        let shift = |k: usize| (k as isize + offset) as usize;
        match a {
            EditAction::Delete { from, to } => {
                out.drain(shift(*from)..shift(*to));
                offset -= (to - from) as isize;
            }
            EditAction::Insert { at, words } => {
                let at = shift(*at);
                out.splice(at..at, words.iter().copied());
                offset += words.len() as isize;
            }
        }
    }
    Ok(out)
}

/// Mean and median of a multiset of counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountSummary {
    pub count: usize,
    pub sum: usize,
    /// Lower median: the element at index `(count - 1) / 2` of the sorted values.
    pub median: usize,
}

impl CountSummary {
    pub fn from_counts(values: &[usize]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut sorted = values.to_vec();
        sorted.sort_unstable();
        Some(Self { count: values.len(), sum: values.iter().sum(), median: sorted[(values.len() - 1) / 2] })
    }

    pub fn mean(&self) -> f64 {
        self.sum as f64 / self.count as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditStats {
    pub edits: CountSummary,
    pub insertion_len: CountSummary,
    pub sequence_len: CountSummary,
}

/// Per-program counts: actions, inserted words and serialized length.
pub fn program_counts(p: &EditProgram) -> Result<(usize, usize, usize)> {
    Ok((p.len(), p.insertion_len(), serialize(p)?.len()))
}

pub fn edit_stats<X: AsRef<[TokenId]>>(pairs: &[(X, X)]) -> Result<EditStats> {
    let programs = pairs
        .iter()
        .map(|(x, y)| derive_edits(x.as_ref(), y.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    stats_of_programs(&programs)
}

pub fn stats_of_programs(programs: &[EditProgram]) -> Result<EditStats> {
    if programs.is_empty() {
        return Err(RepairError::Config("edit statistics need at least one pair".into()));
    }
    let (mut edits, mut ins, mut seq) = (Vec::new(), Vec::new(), Vec::new());
    for p in programs {
        let (e, i, s) = program_counts(p)?;
        edits.push(e);
        ins.push(i);
        seq.push(s);
    }
    let summary = |v: &[usize]| CountSummary::from_counts(v).expect("nonempty");
    Ok(EditStats { edits: summary(&edits), insertion_len: summary(&ins), sequence_len: summary(&seq) })
}
