use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use repair_core::data::*;
use repair_core::diff::derive_edits;
use repair_core::grammar::{serialize, EditCodec, EditToken};
use repair_core::model::ModelConfig;
use repair_core::pipeline::*;
use repair_core::synth::BugPair;
use repair_core::tokenizer::Vocab;
use repair_core::RepairError;

fn pair(id: &str, buggy: &str, fixed: &str) -> BugPair {
    BugPair { id: id.into(), buggy: buggy.into(), fixed: fixed.into() }
}

#[test]
fn jsonl_roundtrip_and_line_numbered_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pairs.jsonl");
    let pairs = vec![pair("a", "x & y", "x && y"), pair("b", "p", "p ;")];
    write_jsonl(&path, &pairs).unwrap();
    assert_eq!(read_jsonl::<BugPair>(&path).unwrap(), pairs);
    assert!(std::fs::read_to_string(&path).unwrap().lines().all(|l| l.contains("\"v\":1")));

    std::fs::write(&path, "{\"v\":1,\"id\":\"a\",\"buggy\":\"x\",\"fixed\":\"y\"}\n{\"v\":1,\"id\":\n").unwrap();
    assert!(matches!(read_jsonl::<BugPair>(&path), Err(RepairError::Ingest { line: 2, .. })));
    std::fs::write(&path, "{\"v\":2,\"id\":\"a\",\"buggy\":\"x\",\"fixed\":\"y\"}\n").unwrap();
    assert!(matches!(read_jsonl::<BugPair>(&path), Err(RepairError::Ingest { line: 1, .. })));
}

#[test]
fn ingest_filters_and_caches_gold_programs() {
    let vocab = Vocab::byte_level();
    let pairs = vec![
        pair("long", &"a ".repeat(40), "a"),
        pair("same", "keep me", "keep me"),
        pair("fix", "if ( a & b )", "if ( a && b )"),
        pair("many", "abcdefgh", "hgfedcba"),
    ];
    let (samples, counts) = ingest(&pairs, &vocab, 32, 12).unwrap();
    assert_eq!(counts, FilterCounts { kept: 2, too_long_input: 1, too_long_edits: 1 });
    assert_eq!(samples[0].id, "same");
    assert_eq!(samples[0].edits, vec![EditToken::Bos, EditToken::Eos]);

    let codec = EditCodec::for_vocab(&vocab);
    for s in &samples {
        let cached = EditRecord::from_sample(s, &codec).to_sample(&codec).unwrap();
        assert_eq!(&cached, s);
        assert_eq!(cached.edits, serialize(&derive_edits(&s.x, &s.y).unwrap()).unwrap());
    }
}

#[test]
fn splits_are_seeded_disjoint_and_complete() {
    let items: Vec<usize> = (0..103).collect();
    let s = split(&items, 0.8, 0.1, 4).unwrap();
    assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (82, 10, 11));
    let all: HashSet<usize> = s.train.iter().chain(&s.valid).chain(&s.test).copied().collect();
    assert_eq!(all.len(), 103);
    assert_eq!(s, split(&items, 0.8, 0.1, 4).unwrap());
    assert_ne!(s, split(&items, 0.8, 0.1, 5).unwrap());
    assert!(split(&items, 0.8, 0.3, 4).is_err());
}

fn gold(ids: &[&str]) -> Vec<(String, Vec<u32>)> {
    ids.iter().map(|id| (id.to_string(), vec![1, 2, 3])).collect()
}

#[test]
fn exact_match_examples() {
    let right = Some(vec![1, 2, 3]);
    let wrong = Some(vec![9]);
    let all = vec![Prediction { id: "a".into(), candidates: vec![right.clone(), wrong.clone()] }];
    assert_eq!(exact_match_topk(&all, &gold(&["a"]), 5).unwrap(), vec![1.0; 5]);

    let third = vec![Prediction { id: "a".into(), candidates: vec![wrong.clone(), None, right.clone(), wrong.clone()] }];
    assert_eq!(exact_match_topk(&third, &gold(&["a"]), 5).unwrap(), vec![0.0, 0.0, 1.0, 1.0, 1.0]);

    assert!(matches!(exact_match_topk(&third, &gold(&["b"]), 5), Err(RepairError::Evaluation(_))));
    assert!(matches!(exact_match_topk(&third, &gold(&["a", "b"]), 5), Err(RepairError::Evaluation(_))));
}

#[test]
fn exact_match_agrees_with_a_recount() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ids: Vec<String> = (0..300).map(|i| format!("i{i}")).collect();
    let gold: Vec<(String, Vec<u32>)> =
        ids.iter().map(|id| (id.clone(), (0..rng.gen_range(1..4)).map(|_| rng.gen_range(0..3)).collect())).collect();
    let preds: Vec<Prediction> = ids
        .iter()
        .map(|id| Prediction {
            id: id.clone(),
            candidates: (0..rng.gen_range(0..7))
                .map(|_| rng.gen_bool(0.9).then(|| (0..rng.gen_range(1..4)).map(|_| rng.gen_range(0..3)).collect()))
                .collect(),
        })
        .collect();
    let acc = exact_match_topk(&preds, &gold, 5).unwrap();
    for k in 1..=5 {
        let mut hits = 0;
        for (p, (_, y)) in preds.iter().zip(&gold) {
            let mut found = false;
            for c in p.candidates.iter().take(k).flatten() {
                if c == y {
                    found = true;
                }
            }
            hits += found as usize;
        }
        assert_eq!(acc[k - 1], hits as f64 / gold.len() as f64);
    }
    assert!(acc.windows(2).all(|w| w[0] <= w[1]));
}

fn small_config(seed: u64, rerank: bool) -> PipelineConfig {
    let mut c = PipelineConfig::synthetic(150, seed);
    c.model = ModelConfig { d_model: 32, ffn_dim: 64, n_encoder_layers: 1, n_decoder_layers: 1, max_len: 96, ..ModelConfig::tiny(0) };
    c.train.epochs = 2;
    c.train.batch_size = 8;
    c.beam.beam_size = 3;
    c.pr_thresholds = 5;
    match &mut c.rerank {
        Some(r) if rerank => {
            r.max_train_instances = Some(40);
            r.train.epochs = 1;
            r.finetune_epochs = vec![0, 1];
        }
        _ => c.rerank = None,
    }
    c
}

#[test]
fn skipping_the_reranker_leaves_beam_rows() {
    let dir = tempfile::tempdir().unwrap();
    let report = run_pipeline(&small_config(1, false), dir.path()).unwrap();
    let names: Vec<&str> = report.rows.iter().map(|r| r.name.as_str()).collect();
    assert_eq!(names, vec![ROW_BEAM_LP, ROW_BEAM_ONLY]);
    assert!(report.weights.is_none() && report.finetune.is_none());
    assert!(report.rows.iter().all(|r| r.topk.len() == 3 && r.topk.windows(2).all(|w| w[0] <= w[1])));
    assert!(report.topk_invariant);
    assert_eq!(report.counts.pairs, 150);
    assert_eq!(report.pr.ensemble, report.pr.beam);
}

#[test]
fn full_run_resumes_from_its_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(2, true);
    let first = run_pipeline(&config, dir.path()).unwrap();
    assert_eq!(first.rows.len(), 4);
    assert!(first.topk_invariant);
    assert_eq!(first.application_failures, 0);
    let text = std::fs::read_to_string(dir.path().join("report.txt")).unwrap();
    assert!(text.contains(ROW_FINETUNED));

    // drop the late stages; they are rebuilt from the cached earlier ones
    for f in ["report.json", "heads_ft.bin", "heads_ft.bin.json", "finetune.json"] {
        std::fs::remove_file(dir.path().join(f)).unwrap();
    }
    let saved = std::fs::read(dir.path().join("model.bin")).unwrap();
    let second = run_pipeline(&config, dir.path()).unwrap();
    assert_eq!(first, second);
    assert_eq!(saved, std::fs::read(dir.path().join("model.bin")).unwrap());

    let mut other = config.clone();
    other.seed = 3;
    assert!(matches!(run_pipeline(&other, dir.path()), Err(RepairError::Config(_))));
}

#[test]
fn hypotheses_join_gold_by_id() {
    let vocab = Vocab::byte_level();
    let codec = EditCodec::for_vocab(&vocab);
    let (samples, _) = ingest(&[pair("a", "ab", "b")], &vocab, 8, 16).unwrap();
    let good = codec.encode(&samples[0].edits);
    let hyps = vec![HypsRecord {
        id: "a".into(),
        hypotheses: vec![
            HypothesisRecord { tokens: codec.encode(&[EditToken::Bos, EditToken::Eos]), log_prob: -0.1, lp_score: -0.1 },
            HypothesisRecord { tokens: good, log_prob: -0.5, lp_score: -0.4 },
        ],
    }];
    let inst = build_instances(&samples, &hyps, &codec).unwrap();
    assert_eq!(inst[0].label(), Some(1));
    let renamed = vec![HypsRecord { id: "z".into(), ..hyps[0].clone() }];
    assert!(matches!(build_instances(&samples, &renamed, &codec), Err(RepairError::Evaluation(_))));
}
