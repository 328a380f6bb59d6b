//! A small Java-like language and seeded bug injection.
//!
//! Programs are single methods written as whitespace-separated words. Every
//! construct a mutation touches follows a convention visible in the
//! surrounding words, so each injected bug can be located and undone from
//! context alone:
//!
//! - conditions always join with `&&` or `||`, never `&` or `|`;
//! - loops from 0 compare with `<`, loops from 1 with `<=`;
//! - `== null` guards return, `!= null` guards dereference;
//! - `setVisible ( true )` precedes `show`, `setVisible ( false )` precedes `hide`;
//! - `run`, `close` and `toString` carry `@Override`, other methods do not.

use std::collections::{BTreeMap, HashSet};

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{RepairError, Result};

const FIELDS: &[&str] = &[
    "count", "size", "index", "total", "value", "item", "buffer", "result", "name", "data", "node", "limit",
    "offset", "width", "height", "cache", "queue", "state", "entry", "cursor", "target", "source", "parent",
    "child",
];
const METHODS: &[&str] = &["update", "process", "reset", "refresh", "handle", "apply", "render", "load", "flush", "compute"];
const OVERRIDES: &[&str] = &["run", "close"];
const KEYWORDS: &[&str] = &[
    "public", "void", "int", "String", "return", "if", "for", "this", "null", "true", "false", "new",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MutationKind {
    /// `&&`/`||` to `&`/`|`, `<` and `<=` swapped, `==` and `!=` swapped.
    OperatorSwap,
    BooleanFlip,
    /// Drops a `;` or an `@Override`; the fix inserts it back.
    MissingToken,
    /// Repeats an identifier; the fix deletes the copy.
    ExtraToken,
}

impl MutationKind {
    pub const ALL: [MutationKind; 4] =
        [MutationKind::OperatorSwap, MutationKind::BooleanFlip, MutationKind::MissingToken, MutationKind::ExtraToken];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MutationSpec {
    pub kinds: Vec<MutationKind>,
    /// Chance that a pair carries two bugs instead of one.
    pub double_rate: f64,
    /// Rewrite identifiers to `VAR_n` / `METHOD_n` by first appearance.
    pub normalize_identifiers: bool,
}

impl Default for MutationSpec {
    fn default() -> Self {
        Self { kinds: MutationKind::ALL.to_vec(), double_rate: 0.3, normalize_identifiers: false }
    }
}

/// A buggy program and its fix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BugPair {
    pub id: String,
    pub buggy: String,
    pub fixed: String,
}

fn pick<'a>(rng: &mut impl Rng, items: &[&'a str]) -> &'a str {
    items[rng.gen_range(0..items.len())]
}

fn two_fields<'a>(rng: &mut impl Rng) -> (&'a str, &'a str) {
    let a = pick(rng, FIELDS);
    let mut b = pick(rng, FIELDS);
    while b == a {
        b = pick(rng, FIELDS);
    }
    (a, b)
}

fn statement(rng: &mut impl Rng) -> String {
    let (a, b) = two_fields(rng);
    let c = pick(rng, FIELDS);
    match rng.gen_range(0..8) {
        0 => {
            let op = if rng.gen_bool(0.5) { "&&" } else { "||" };
            format!("if ( {a} > 0 {op} {b} > 0 ) {{ {c} = {a} ; }}")
        }
        1 => {
            let (start, op) = if rng.gen_bool(0.5) { (0, "<") } else { (1, "<=") };
            format!("for ( int i = {start} ; i {op} {a} ; i ++ ) {{ {b} += i ; }}")
        }
        2 => format!("if ( {a} == null ) {{ return ; }}"),
        3 => format!("if ( {a} != null ) {{ {a} . close ( ) ; }}"),
        4 => {
            let (lit, verb) = if rng.gen_bool(0.5) { ("true", "show") } else { ("false", "hide") };
            format!("{a} . setVisible ( {lit} ) ; {a} . {verb} ( ) ;")
        }
        5 => format!("{c} = {a} + {b} ;"),
        6 => format!("{a} . add ( {b} ) ;"),
        _ => format!("this . {a} = {b} ;"),
    }
}

/// One random method in the mini language.
pub fn generate_program(rng: &mut impl Rng) -> String {
    let body: Vec<String> = (0..rng.gen_range(1..=3)).map(|_| statement(rng)).collect();
    let body = body.join(" ");
    match rng.gen_range(0..6) {
        0 => format!("@Override public void {} ( ) {{ {body} }}", pick(rng, OVERRIDES)),
        1 => format!("@Override public String toString ( ) {{ {body} return {} ; }}", pick(rng, FIELDS)),
        2 => {
            let (a, b) = two_fields(rng);
            format!("public void {} ( int {a} , int {b} ) {{ {body} }}", pick(rng, METHODS))
        }
        _ => format!("public void {} ( ) {{ {body} }}", pick(rng, METHODS)),
    }
}

/// `n` seeded programs.
pub fn generate_programs(n: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| generate_program(&mut rng)).collect()
}

fn is_identifier(w: &str) -> bool {
    let mut chars = w.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
        && !KEYWORDS.contains(&w)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Site {
    Replace(usize, &'static str),
    Remove(usize),
    Duplicate(usize),
}

impl Site {
    fn index(self) -> usize {
        match self {
            Site::Replace(i, _) | Site::Remove(i) | Site::Duplicate(i) => i,
        }
    }
}

fn sites(words: &[&str], kind: MutationKind) -> Vec<Site> {
    let mut out = Vec::new();
    for (i, &w) in words.iter().enumerate() {
        let site = match (kind, w) {
            (MutationKind::OperatorSwap, "&&") => Some(Site::Replace(i, "&")),
            (MutationKind::OperatorSwap, "||") => Some(Site::Replace(i, "|")),
            (MutationKind::OperatorSwap, "<") => Some(Site::Replace(i, "<=")),
            (MutationKind::OperatorSwap, "<=") => Some(Site::Replace(i, "<")),
            (MutationKind::OperatorSwap, "==") => Some(Site::Replace(i, "!=")),
            (MutationKind::OperatorSwap, "!=") => Some(Site::Replace(i, "==")),
            (MutationKind::BooleanFlip, "true") => Some(Site::Replace(i, "false")),
            (MutationKind::BooleanFlip, "false") => Some(Site::Replace(i, "true")),
            (MutationKind::MissingToken, ";" | "@Override") => Some(Site::Remove(i)),
            // identifiers used as values, not declarations or calls
            (MutationKind::ExtraToken, _)
                if is_identifier(w)
                    && words.get(i + 1).is_some_and(|n| matches!(*n, ";" | ")" | "+" | ">"))
                    && i > 0
                    && !matches!(words[i - 1], "int" | "." | "void") =>
            {
                Some(Site::Duplicate(i))
            }
            _ => None,
        };
        out.extend(site);
    }
    out
}

/// Applies up to `count` mutations at distinct words; `None` when the program
/// offers no site of an enabled kind.
fn mutate(program: &str, spec: &MutationSpec, count: usize, rng: &mut impl Rng) -> Option<String> {
    let words: Vec<&str> = program.split_whitespace().collect();
    let mut chosen: Vec<Site> = Vec::new();
    for _ in 0..count {
        let mut kinds = spec.kinds.clone();
        kinds.shuffle(rng);
        let site = kinds.iter().find_map(|&k| {
            let options: Vec<Site> =
                sites(&words, k).into_iter().filter(|s| chosen.iter().all(|c| c.index().abs_diff(s.index()) > 1)).collect();
            options.choose(rng).copied()
        });
        chosen.extend(site);
    }
    if chosen.is_empty() {
        return None;
    }
    chosen.sort_by_key(|s| std::cmp::Reverse(s.index()));
    let mut out: Vec<&str> = words.clone();
    for s in chosen {
        match s {
            Site::Replace(i, w) => out[i] = w,
            Site::Remove(i) => {
                out.remove(i);
            }
            Site::Duplicate(i) => out.insert(i, words[i]),
        }
    }
    Some(out.join(" "))
}

/// Renames identifiers in both programs with one mapping built from `fixed`.
pub fn normalize_identifiers(buggy: &str, fixed: &str) -> (String, String) {
    let mut names: BTreeMap<String, String> = BTreeMap::new();
    let (mut vars, mut methods) = (0, 0);
    let words: Vec<&str> = fixed.split_whitespace().chain(buggy.split_whitespace()).collect();
    for (i, w) in words.iter().enumerate() {
        if is_identifier(w) && !names.contains_key(*w) {
            let call = words.get(i + 1) == Some(&"(");
            let fresh = if call {
                methods += 1;
                format!("METHOD_{methods}")
            } else {
                vars += 1;
                format!("VAR_{vars}")
            };
            names.insert(w.to_string(), fresh);
        }
    }
    let rename = |s: &str| {
        s.split_whitespace().map(|w| names.get(w).map_or(w, |n| n.as_str())).collect::<Vec<_>>().join(" ")
    };
    (rename(buggy), rename(fixed))
}

/// Seeded (buggy, fixed) pairs drawn from `programs` in order, wrapping
/// around. Programs without an applicable site are skipped; duplicate pairs
/// are dropped.
pub fn synthesize_bug_corpus(programs: &[String], spec: &MutationSpec, n: usize, seed: u64) -> Result<Vec<BugPair>> {
    if programs.is_empty() {
        return Err(RepairError::Config("seed corpus is empty".into()));
    }
    if spec.kinds.is_empty() {
        return Err(RepairError::Config("no mutation kinds enabled".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    let mut seen = HashSet::new();
    let mut misses = 0usize;
    let mut k = 0usize;
    while out.len() < n {
        let program = &programs[k % programs.len()];
        k += 1;
        let count = if rng.gen_bool(spec.double_rate) { 2 } else { 1 };
        let fixed = program.split_whitespace().collect::<Vec<_>>().join(" ");
        match mutate(&fixed, spec, count, &mut rng) {
            Some(buggy) if buggy != fixed => {
                let (buggy, fixed) = if spec.normalize_identifiers { normalize_identifiers(&buggy, &fixed) } else { (buggy, fixed) };
                if seen.insert((buggy.clone(), fixed.clone())) {
                    out.push(BugPair { id: format!("syn-{}", out.len()), buggy, fixed });
                    misses = 0;
                    continue;
                }
            }
            Some(_) => {}
            None => warn!("program {} has no applicable mutation site", (k - 1) % programs.len()),
        }
        misses += 1;
        if misses > 1000 {
            return Err(RepairError::Config(format!("could not produce {n} distinct pairs, stopped at {}", out.len())));
        }
    }
    Ok(out)
}
