#![allow(dead_code)]

use rand::Rng;
use repair_core::grammar::{EditAction, EditProgram};

/// Random valid program over an input of `len` tokens, words drawn from `words`.
pub fn random_program(rng: &mut impl Rng, len: usize, words: &[u32]) -> EditProgram {
    let mut actions = Vec::new();
    let mut p = 0;
    while p <= len {
        if rng.gen_bool(0.25) {
            let n = rng.gen_range(1..=3);
            let ws = (0..n).map(|_| words[rng.gen_range(0..words.len())]).collect();
            actions.push(EditAction::Insert { at: p, words: ws });
        }
        if p < len && rng.gen_bool(0.25) {
            let k = rng.gen_range(1..=(len - p).min(3));
            actions.push(EditAction::Delete { from: p, to: p + k });
            p += k;
            if rng.gen_bool(0.5) {
                let n = rng.gen_range(1..=3);
                let ws = (0..n).map(|_| words[rng.gen_range(0..words.len())]).collect();
                actions.push(EditAction::Insert { at: p, words: ws });
            }
        }
        p += 1;
    }
    EditProgram::new(actions).expect("generator emits valid programs")
}

use repair_core::model::ModelConfig;
use repair_core::tokenizer::SpecialIds;

/// Model over `words` word ids `0..words`, specials right after them.
pub fn toy_config(words: u32, d_model: usize, layers: usize, max_len: usize) -> ModelConfig {
    let w = words;
    ModelConfig {
        d_model,
        n_heads: 2,
        n_encoder_layers: layers,
        n_decoder_layers: layers,
        ffn_dim: 2 * d_model,
        max_len,
        max_decode_len: 16,
        vocab_size: words as usize + 5,
        specials: SpecialIds { bos: w, eos: w + 1, pad: w + 2, delete: w + 3, insert: w + 4 },
        dropout: 0.0,
        init_std: 0.3,
    }
}
