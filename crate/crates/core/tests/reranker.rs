mod common;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use repair_core::grammar::EditToken;
use repair_core::reranker::*;
use repair_core::RepairError;

const K: usize = 5;
const PLANTED: u32 = 0;

fn hypothesis(loc: usize, word: u32) -> Vec<EditToken> {
    vec![EditToken::Bos, EditToken::Insert, EditToken::Loc(loc), EditToken::Word(word), EditToken::Eos]
}

/// Five insertions per input; only the correct one inserts the planted word.
fn planted_instances(n: usize, words: u32, seed: u64) -> Vec<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let x: Vec<u32> = (0..6).map(|_| rng.gen_range(1..words)).collect();
            let mut candidates: Vec<Candidate> = (0..K)
                .map(|k| {
                    let word = if k == 0 { PLANTED } else { rng.gen_range(1..words) };
                    Candidate { tokens: hypothesis(rng.gen_range(0..=6), word), log_prob: -(k as f64), lp_score: 0.0, correct: k == 0 }
                })
                .collect();
            candidates.shuffle(&mut rng);
            Instance { id: format!("p{i}"), x, candidates }
        })
        .collect()
}

fn random_scored(rng: &mut impl Rng, id: usize) -> ScoredInstance {
    let candidates = (0..K)
        .map(|k| ScoredCandidate {
            beam_rank: k,
            log_prob: -(k as f64) - rng.gen_range(0.0..0.5),
            score_t: rng.gen_range(-3.0..0.0),
            score_e: rng.gen_range(-3.0..0.0),
            correct: rng.gen_bool(0.3),
        })
        .collect();
    ScoredInstance { id: format!("r{id}"), candidates }
}

fn toy_head(kind: HeadKind, seed: u64) -> RerankHead<f64> {
    RerankHead::fresh(kind, common::toy_config(12, 16, 1, 8), seed).unwrap()
}

#[test]
fn singleton_and_symmetric_scores() {
    assert_eq!(temperature_scores(&[3.7], 0.5).unwrap(), vec![0.0]);
    for k in 1..8 {
        let s = temperature_scores(&vec![1.25; k], 0.5).unwrap();
        assert!(s.iter().all(|v| (v - (1.0 / k as f64).ln()).abs() < 1e-12));
    }
    assert!(matches!(temperature_scores(&[], 0.5), Err(RepairError::Input(_))));
    assert!(temperature_scores(&[1.0], 0.0).is_err());

    let head = toy_head(HeadKind::Transformer, 1);
    let h = hypothesis(2, 3);
    assert_eq!(head.head_scores(&[1, 2, 3], &[&h], 0.5).unwrap(), vec![0.0]);
    assert!(matches!(head.head_scores(&[1, 2, 3], &[], 0.5), Err(RepairError::Input(_))));
}

#[test]
fn temperature_never_reorders() {
    let argmax = |v: &[f64]| v.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
    for kind in [HeadKind::Transformer, HeadKind::Encoder] {
        let head = toy_head(kind, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for inst in planted_instances(10, 12, 4) {
            let hyps: Vec<&[EditToken]> = inst.candidates.iter().map(|c| c.tokens.as_slice()).collect();
            let raw = head.raw_scores(&inst.x, &hyps).unwrap();
            for _ in 0..5 {
                let t = rng.gen_range(0.01..10.0);
                assert_eq!(argmax(&head.head_scores(&inst.x, &hyps, t).unwrap()), argmax(&raw));
            }
        }
    }
}

#[test]
fn every_hypothesis_goes_through_the_same_head() {
    for kind in [HeadKind::Transformer, HeadKind::Encoder] {
        let head = toy_head(kind, 5);
        let inst = &planted_instances(1, 12, 6)[0];
        let hyps: Vec<&[EditToken]> = inst.candidates.iter().map(|c| c.tokens.as_slice()).collect();
        let together = head.raw_scores(&inst.x, &hyps).unwrap();
        for (k, h) in hyps.iter().enumerate() {
            let alone = head.raw_scores(&inst.x, &[h]).unwrap();
            assert!((alone[0] - together[k]).abs() < 1e-12);
        }
    }
}

#[test]
fn filtering_keeps_instances_with_a_correct_hypothesis() {
    let mut data = planted_instances(20, 12, 7);
    for inst in data.iter_mut().step_by(3) {
        inst.candidates.iter_mut().for_each(|c| c.correct = false);
    }
    data[1].candidates.iter_mut().for_each(|c| c.correct = true);
    let kept = trainable(&data);
    assert_eq!(kept.len(), data.iter().filter(|i| i.candidates.iter().any(|c| c.correct)).count());
    assert_eq!(data[1].label(), Some(0));
    assert!(kept.iter().all(|i| i.label().is_some()));

    let hopeless: Vec<Instance> = data.iter().step_by(3).cloned().collect();
    let mut head = toy_head(HeadKind::Encoder, 8);
    let err = train_head(&mut head, &hopeless, &RerankTrainConfig::default()).unwrap_err();
    assert!(matches!(err, RepairError::TrainingData(_)));
}

#[test]
fn planted_signal_is_learned() {
    let train = planted_instances(200, 12, 10);
    let held = planted_instances(100, 12, 11);
    let config = RerankTrainConfig { epochs: 8, lr: 3e-3, batch_size: 8, seed: 1, ..Default::default() };
    for kind in [HeadKind::Transformer, HeadKind::Encoder] {
        let mut head = RerankHead::<f32>::fresh(kind, common::toy_config(12, 16, 1, 8), 12).unwrap();
        let losses = train_head(&mut head, &train, &config).unwrap();
        let hits = held
            .iter()
            .filter(|inst| {
                let hyps: Vec<&[EditToken]> = inst.candidates.iter().map(|c| c.tokens.as_slice()).collect();
                let s = head.head_scores(&inst.x, &hyps, 0.5).unwrap();
                let best = s.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
                inst.candidates[best].correct
            })
            .count();
        let acc = hits as f64 / held.len() as f64;
        eprintln!("{kind:?}: losses {losses:?} held-out top-1 {acc}");
        assert!(losses.last().unwrap() < losses.first().unwrap());
        assert!(acc > 0.6, "{kind:?} top-1 {acc}");
    }
}

#[test]
fn degenerate_ensemble_is_log_prob_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for i in 0..200 {
        let mut inst = random_scored(&mut rng, i);
        inst.candidates.shuffle(&mut rng);
        let ranked = ensemble_rank(&inst, 0.0, 0.0);
        let mut expected = inst.candidates.clone();
        expected.sort_by(|a, b| b.log_prob.total_cmp(&a.log_prob).then(a.beam_rank.cmp(&b.beam_rank)));
        let got: Vec<usize> = ranked.iter().map(|h| h.beam_rank).collect();
        assert_eq!(got, expected.iter().map(|c| c.beam_rank).collect::<Vec<_>>());
    }
}

#[test]
fn ensemble_score_is_recomputable_and_ties_keep_beam_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for i in 0..100 {
        let inst = random_scored(&mut rng, i);
        let (c1, c2) = (rng.gen_range(0.0..3.0), rng.gen_range(0.0..3.0));
        let ranked = ensemble_rank(&inst, c1, c2);
        for h in &ranked {
            assert!((h.score - (h.log_prob + c1 * h.score_t + c2 * h.score_e)).abs() < 1e-9);
        }
        assert!(ranked.windows(2).all(|w| w[0].score >= w[1].score));
    }
    let tied = ScoredInstance {
        id: "t".into(),
        candidates: (0..K)
            .map(|k| ScoredCandidate { beam_rank: k, log_prob: -1.0, score_t: 0.0, score_e: 0.0, correct: false })
            .collect(),
    };
    let order: Vec<usize> = ensemble_rank(&tied, 0.4, 0.4).iter().map(|h| h.beam_rank).collect();
    assert_eq!(order, vec![0, 1, 2, 3, 4]);
}

#[test]
fn permuting_inputs_permutes_outputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for i in 0..100 {
        let inst = random_scored(&mut rng, i);
        let mut shuffled = inst.clone();
        shuffled.candidates.shuffle(&mut rng);
        let a: Vec<usize> = ensemble_rank(&inst, 0.7, 1.3).iter().map(|h| h.beam_rank).collect();
        let b: Vec<usize> = ensemble_rank(&shuffled, 0.7, 1.3).iter().map(|h| h.beam_rank).collect();
        assert_eq!(a, b);
    }
}

#[test]
fn reranking_keeps_the_top_k_set() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let insts: Vec<ScoredInstance> = (0..300).map(|i| random_scored(&mut rng, i)).collect();
    let base = topk_accuracy(&insts.iter().map(|i| ensemble_rank(i, 0.0, 0.0)).collect::<Vec<_>>(), K);
    assert!(base.windows(2).all(|w| w[0] <= w[1]));
    for _ in 0..20 {
        let (c1, c2) = (rng.gen_range(0.0..50.0), rng.gen_range(0.0..50.0));
        let acc = topk_accuracy(&insts.iter().map(|i| ensemble_rank(i, c1, c2)).collect::<Vec<_>>(), K);
        assert_eq!(acc[K - 1], base[K - 1]);
        assert!(acc.windows(2).all(|w| w[0] <= w[1]));
    }
}

#[test]
fn reference_constants() {
    assert_eq!(DEFAULT_TEMPERATURE, 0.5);
    let w = EnsembleWeights::TUFANO_SMALL_ABSTRACT;
    assert_eq!((w.c1, w.c2, w.temperature), (0.4, 0.4, 0.5));
    assert_eq!(RerankTrainConfig::default().epochs, 12);
}

#[test]
fn grid_has_both_stages() {
    let (log, lin) = grid_axes();
    assert_eq!((log.len(), lin.len()), (10, 20));
    assert!((log[0] - 0.01).abs() < 1e-15 && (log[9] - 100.0).abs() < 1e-9);
    assert!(log.windows(2).all(|w| (w[1] / w[0] - 10f64.powf(4.0 / 9.0)).abs() < 1e-9));
    assert!((lin[0] - 0.1).abs() < 1e-15 && (lin[19] - 2.0).abs() < 1e-12);
    assert!(lin.windows(2).all(|w| (w[1] - w[0] - 0.1).abs() < 1e-12));
}

#[test]
fn grid_search_dominates_beam_only() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let insts: Vec<ScoredInstance> = (0..150).map(|i| random_scored(&mut rng, i)).collect();
    let best = grid_search_coefficients(&insts).unwrap();
    let top1 = |c1, c2| topk_accuracy(&insts.iter().map(|i| ensemble_rank(i, c1, c2)).collect::<Vec<_>>(), 1)[0];
    assert_eq!(best.evaluated, 1 + 100 + 400);
    assert!(best.top1 >= top1(0.0, 0.0));
    assert_eq!(best.top1, top1(best.c1, best.c2));
    assert!(matches!(grid_search_coefficients(&[]), Err(RepairError::Config(_))));

    // beam order already perfect: every pair reaching 100% ties, the smallest wins
    let perfect: Vec<ScoredInstance> = insts
        .iter()
        .map(|i| {
            let mut i = i.clone();
            i.candidates.iter_mut().enumerate().for_each(|(k, c)| {
                c.correct = k == 0;
                c.log_prob = -(k as f64) * 10.0;
            });
            i
        })
        .collect();
    let g = grid_search_coefficients(&perfect).unwrap();
    assert_eq!((g.c1, g.c2, g.top1), (0.0, 0.0, 1.0));
}

fn same_head_params(a: &RerankHead<f64>, b: &RerankHead<f64>) -> bool {
    a.params().iter().zip(b.params().iter()).all(|(p, q)| p.name == q.name && p.value.data() == q.value.data())
}

fn toy_pair(seed: u64) -> HeadPair<f64> {
    HeadPair { transformer: toy_head(HeadKind::Transformer, seed), encoder: toy_head(HeadKind::Encoder, seed + 1) }
}

#[test]
fn zero_epoch_finetune_leaves_heads_unchanged() {
    let heads = toy_pair(18);
    let valid = planted_instances(12, 12, 19);
    let cfg = RerankTrainConfig { seed: 3, ..Default::default() };
    let (tuned, report) = finetune_on_validation(&heads, &valid, EnsembleWeights::BEAM_ONLY, &cfg, &[0]).unwrap();
    assert_eq!(report.chosen_epochs, 0);
    assert!(same_head_params(&tuned.transformer, &heads.transformer));
    assert!(same_head_params(&tuned.encoder, &heads.encoder));

    assert!(matches!(
        finetune_on_validation(&heads, &valid[..3], EnsembleWeights::BEAM_ONLY, &cfg, &[1]),
        Err(RepairError::Config(_))
    ));
}

#[test]
fn finetune_is_deterministic_and_keeps_top_k() {
    let heads = toy_pair(20);
    let valid = planted_instances(16, 12, 21);
    let w = EnsembleWeights { c1: 0.4, c2: 0.4, temperature: 0.5 };
    let cfg = RerankTrainConfig { lr: 1e-2, seed: 4, ..Default::default() };
    let (a, ra) = finetune_on_validation(&heads, &valid, w, &cfg, &[1, 2, 3]).unwrap();
    let (b, rb) = finetune_on_validation(&heads, &valid, w, &cfg, &[1, 2, 3]).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(ra.split_scores.len(), 3);
    assert!(same_head_params(&a.transformer, &b.transformer));
    assert!(!same_head_params(&a.encoder, &heads.encoder));

    let test = planted_instances(30, 12, 22);
    let before: Vec<_> = heads.score(&test, 0.5).unwrap().iter().map(|s| ensemble_rank(s, w.c1, w.c2)).collect();
    let after: Vec<_> = a.score(&test, 0.5).unwrap().iter().map(|s| ensemble_rank(s, w.c1, w.c2)).collect();
    assert_eq!(topk_accuracy(&before, K)[K - 1], topk_accuracy(&after, K)[K - 1]);
}

#[test]
fn head_pair_roundtrips_through_disk() {
    let heads = toy_pair(23);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("heads.bin");
    heads.save(&path).unwrap();
    let back = HeadPair::<f64>::load(&path).unwrap();
    let test = planted_instances(5, 12, 24);
    assert_eq!(heads.score(&test, 0.5).unwrap(), back.score(&test, 0.5).unwrap());
}

#[test]
fn thresholding_laws() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let points: Vec<(f64, bool)> = (0..200).map(|_| (rng.gen_range(-5.0..0.0), rng.gen_bool(0.4))).collect();
    let overall = points.iter().filter(|p| p.1).count() as f64 / points.len() as f64;
    let all = confidence_threshold(&points, f64::NEG_INFINITY).unwrap();
    assert_eq!((all.recall, all.precision, all.threshold), (1.0, Some(overall), None));
    let below = confidence_threshold(&points, -6.0).unwrap();
    assert_eq!((below.recall, below.precision), (1.0, Some(overall)));
    let none = confidence_threshold(&points, 1.0).unwrap();
    assert_eq!((none.accepted, none.precision, none.recall), (0, None, 0.0));

    let curve = pr_curve(&points, 25).unwrap();
    assert_eq!(curve.len(), 26);
    assert!(curve.windows(2).all(|w| w[0].recall >= w[1].recall));
    assert!(curve.windows(2).all(|w| w[0].threshold.map_or(true, |t| Some(t) <= w[1].threshold)));

    let single = pr_curve(&[(-1.0, true)], 5).unwrap();
    assert!(single.iter().filter(|p| p.accepted > 0).all(|p| p.precision == Some(1.0)));
    assert!(confidence_threshold(&[], 0.0).is_err());
}

#[test]
fn both_curves_share_the_full_recall_endpoint() {
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let ranked: Vec<_> = (0..100).map(|i| ensemble_rank(&random_scored(&mut rng, i), 0.5, 1.5)).collect();
    let curves = pr_sweep(&ranked, 10).unwrap();
    let top1 = topk_accuracy(&ranked, 1)[0];
    for c in [&curves.ensemble, &curves.beam] {
        assert_eq!(c[0].recall, 1.0);
        assert_eq!(c[0].precision, Some(top1));
    }
    assert_eq!(curves.ensemble[0], curves.beam[0]);
}
