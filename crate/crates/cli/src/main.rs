use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use repair_core::data::{
    build_instances, ingest, read_jsonl, write_atomic, write_jsonl, EditRecord, HypsRecord, RankedRecord, Sample,
};
use repair_core::decoding::BeamConfig;
use repair_core::diff::{apply_edits, stats_of_programs};
use repair_core::grammar::{parse, EditCodec};
use repair_core::model::{ModelConfig, Seq2Seq};
use repair_core::pipeline::{
    application_failures, decode_samples, exact_match_topk, run_pipeline, Float, PipelineConfig, Prediction,
};
use repair_core::reranker::{
    ensemble_rank, finetune_on_validation, grid_search_coefficients, pr_sweep, EnsembleWeights, HeadPair,
    DEFAULT_TEMPERATURE,
};
use repair_core::synth::{generate_programs, synthesize_bug_corpus, BugPair, MutationKind, MutationSpec};
use repair_core::tokenizer::{train_bpe, train_bpe_up_to, word_corpus, Vocab};
use repair_core::train::Trainer;
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "repair", version, about = "Learn to fix buggy code by predicting edit programs")]
struct Cli {
    /// Pipeline configuration (JSON); missing fields take their defaults.
    #[arg(long, global = true, env = "REPAIR_CONFIG")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    OperatorSwap,
    BooleanFlip,
    MissingToken,
    ExtraToken,
}

impl From<Kind> for MutationKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::OperatorSwap => MutationKind::OperatorSwap,
            Kind::BooleanFlip => MutationKind::BooleanFlip,
            Kind::MissingToken => MutationKind::MissingToken,
            Kind::ExtraToken => MutationKind::ExtraToken,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Learn a byte-level BPE vocabulary from the buggy and fixed code of a
    /// pairs file, or from every line of the files in a directory.
    TokenizerTrain {
        #[arg(long, required_unless_present = "corpus", conflicts_with = "corpus")]
        pairs: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        vocab_size: usize,
        /// Fail instead of stopping early when the corpus runs out of merges.
        #[arg(long)]
        strict: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate programs in the mini language and inject bugs into them.
    Synthesize {
        #[arg(long, default_value_t = 5000)]
        programs: usize,
        #[arg(long, default_value_t = 5000)]
        pairs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, value_delimiter = ',')]
        kinds: Vec<Kind>,
        #[arg(long, default_value_t = 0.3)]
        double_rate: f64,
        #[arg(long)]
        normalize_identifiers: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tokenize pairs and derive their gold edit programs.
    DeriveEdits {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long, default_value_t = 512)]
        max_len: usize,
        #[arg(long, default_value_t = 128)]
        max_edit_tokens: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply each record's edit program and write the fixed code as text.
    ApplyEdits {
        #[arg(long)]
        edits: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Edit counts, inserted words and serialized lengths of gold programs.
    Stats {
        #[arg(long)]
        edits: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
    },
    /// Train the edit model with teacher forcing.
    Train {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        valid: Option<PathBuf>,
        #[arg(long)]
        vocab: PathBuf,
        /// Checkpoint directory; an existing one is resumed.
        #[arg(long)]
        state: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Beam search over the inputs of an edits file.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        edits: PathBuf,
        #[arg(long)]
        beam_size: Option<usize>,
        #[arg(long)]
        max_len: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train both reranking heads on beam output for the training set.
    RerankTrain {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        hyps: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Grid-search the ensemble weights on validation, then fine-tune the heads there.
    RerankTune {
        #[arg(long)]
        heads: PathBuf,
        #[arg(long)]
        val: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        out_weights: PathBuf,
        #[arg(long)]
        out_heads: PathBuf,
    },
    /// Rerank beam output with the ensemble and store every component score.
    RerankApply {
        #[arg(long)]
        heads: PathBuf,
        #[arg(long)]
        hyps: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        /// "c1,c2", or a weights file written by rerank-tune.
        #[arg(long)]
        weights: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Top-k exact match of beam or reranked output against gold fixed code.
    Evaluate {
        #[arg(long, conflicts_with = "hyps", required_unless_present = "hyps")]
        ranked: Option<PathBuf>,
        #[arg(long)]
        hyps: Option<PathBuf>,
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        width: Option<usize>,
    },
    /// Precision and recall when low-confidence predictions are discarded.
    PrSweep {
        #[arg(long)]
        ranked: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long, default_value_t = 20)]
        thresholds: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Every stage end to end, resuming from whatever the work directory holds.
    RunPipeline {
        #[arg(long, env = "REPAIR_WORK_DIR", default_value = "work")]
        work_dir: PathBuf,
        /// Pairs file to use instead of the configured corpus.
        #[arg(long, env = "REPAIR_CORPUS")]
        corpus: Option<PathBuf>,
    },
}

#[derive(Serialize, Deserialize)]
struct FixedRecord {
    id: String,
    fixed: String,
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?)
        }
        None => Ok(PipelineConfig::default()),
    }
}

fn load_samples(path: &Path, codec: &EditCodec) -> Result<Vec<Sample>> {
    let records: Vec<EditRecord> = read_jsonl(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(records.iter().map(|r| r.to_sample(codec)).collect::<repair_core::Result<_>>()?)
}

fn model_codec(model: &Seq2Seq<Float>) -> EditCodec {
    EditCodec::new(model.config().vocab_size, model.config().specials)
}

fn heads_codec(heads: &HeadPair<Float>) -> EditCodec {
    let c = heads.transformer.config();
    EditCodec::new(c.vocab_size, c.specials)
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn parse_weights(spec: &str) -> Result<EnsembleWeights> {
    if Path::new(spec).is_file() {
        return Ok(serde_json::from_str(&fs::read_to_string(spec)?)?);
    }
    let parts: Vec<&str> = spec.split(',').map(str::trim).collect();
    let [c1, c2] = parts.as_slice() else { bail!("weights must be \"c1,c2\" or a weights file, got {spec:?}") };
    Ok(EnsembleWeights { c1: c1.parse()?, c2: c2.parse()?, temperature: DEFAULT_TEMPERATURE })
}

/// Ranked records joined with gold samples by position and id.
fn resolve_ranked(
    path: &Path,
    gold: &[Sample],
    codec: &EditCodec,
) -> Result<(Vec<Vec<repair_core::reranker::RankedHypothesis>>, Vec<Prediction>)> {
    let ranked: Vec<RankedRecord> = read_jsonl(path)?;
    if ranked.len() != gold.len() {
        bail!("{} ranked records for {} gold samples", ranked.len(), gold.len());
    }
    let mut lists = Vec::new();
    let mut preds = Vec::new();
    for (r, s) in ranked.iter().zip(gold) {
        let (hyps, fixed): (Vec<_>, Vec<_>) = r.resolve(s, codec)?.into_iter().unzip();
        lists.push(hyps);
        preds.push(Prediction { id: r.id.clone(), candidates: fixed });
    }
    Ok((lists, preds))
}

fn corpus_lines(dir: &Path) -> Result<Vec<String>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.is_file());
    files.sort();
    let mut lines = Vec::new();
    for f in files {
        let text = fs::read_to_string(&f).with_context(|| format!("reading {}", f.display()))?;
        lines.extend(text.lines().filter(|l| !l.trim().is_empty()).map(str::to_string));
    }
    if lines.is_empty() {
        bail!("no text found in {}", dir.display());
    }
    Ok(lines)
}

fn run(cli: Cli) -> Result<()> {
    let config = || load_config(cli.config.as_deref());
    match cli.command {
        Command::TokenizerTrain { pairs, corpus, vocab_size, strict, out } => {
            let texts = match (pairs, corpus) {
                (Some(path), _) => {
                    let pairs: Vec<BugPair> = read_jsonl(&path)?;
                    pairs.into_iter().flat_map(|p| [p.buggy, p.fixed]).collect()
                }
                (None, Some(dir)) => corpus_lines(&dir)?,
                (None, None) => bail!("either --pairs or --corpus is required"),
            };
            let corpus = word_corpus(&texts);
            let vocab = if strict { train_bpe(&corpus, vocab_size)? } else { train_bpe_up_to(&corpus, vocab_size)? };
            vocab.save(&out)?;
            info!("{} tokens written to {}", vocab.len(), out.display());
        }
        Command::Synthesize { programs, pairs, seed, kinds, double_rate, normalize_identifiers, out } => {
            let kinds = if kinds.is_empty() { MutationKind::ALL.to_vec() } else { kinds.into_iter().map(Into::into).collect() };
            let spec = MutationSpec { kinds, double_rate, normalize_identifiers };
            let corpus = synthesize_bug_corpus(&generate_programs(programs, seed), &spec, pairs, seed)?;
            write_jsonl(&out, &corpus)?;
            info!("{} pairs written to {}", corpus.len(), out.display());
        }
        Command::DeriveEdits { pairs, vocab, max_len, max_edit_tokens, out } => {
            let vocab = Vocab::load(&vocab)?;
            let pairs: Vec<BugPair> = read_jsonl(&pairs)?;
            let (samples, counts) = ingest(&pairs, &vocab, max_len, max_edit_tokens)?;
            let codec = EditCodec::for_vocab(&vocab);
            let records: Vec<EditRecord> = samples.iter().map(|s| EditRecord::from_sample(s, &codec)).collect();
            write_jsonl(&out, &records)?;
            print_json(&counts)?;
        }
        Command::ApplyEdits { edits, vocab, out } => {
            let vocab = Vocab::load(&vocab)?;
            let samples = load_samples(&edits, &EditCodec::for_vocab(&vocab))?;
            let mut fixed = Vec::with_capacity(samples.len());
            let mut mismatches = 0;
            for s in &samples {
                let y = apply_edits(&s.x, &parse(&s.edits)?)?;
                mismatches += usize::from(y != s.y);
                fixed.push(FixedRecord { id: s.id.clone(), fixed: vocab.decode(&y)? });
            }
            write_jsonl(&out, &fixed)?;
            info!("{} programs applied, {mismatches} differ from the stored fixed code", samples.len());
            if mismatches > 0 {
                bail!("{mismatches} programs do not reproduce their fixed code");
            }
        }
        Command::Stats { edits, vocab } => {
            let vocab = Vocab::load(&vocab)?;
            let samples = load_samples(&edits, &EditCodec::for_vocab(&vocab))?;
            let programs = samples.iter().map(|s| parse(&s.edits)).collect::<Result<Vec<_>, _>>()?;
            let stats = stats_of_programs(&programs)?;
            print_json(&stats)?;
            eprintln!(
                "edits mean {:.3} median {} | inserted words mean {:.3} median {} | sequence length mean {:.3} median {}",
                stats.edits.mean(),
                stats.edits.median,
                stats.insertion_len.mean(),
                stats.insertion_len.median,
                stats.sequence_len.mean(),
                stats.sequence_len.median
            );
        }
        Command::Train { train, valid, vocab, state, out } => {
            let config = config()?;
            let vocab = Vocab::load(&vocab)?;
            let codec = EditCodec::for_vocab(&vocab);
            let train: Vec<_> = load_samples(&train, &codec)?.iter().map(Sample::example).collect();
            let valid: Vec<_> = match valid {
                Some(v) => load_samples(&v, &codec)?.iter().map(Sample::example).collect(),
                None => Vec::new(),
            };
            let mut trainer = match &state {
                Some(dir) if dir.join("progress.json").exists() => Trainer::<Float>::resume(dir, Some(config.train.clone()))?,
                _ => {
                    let mc = ModelConfig { vocab_size: vocab.len(), specials: vocab.specials(), ..config.model.clone() };
                    Trainer::new(Seq2Seq::new(mc, config.seed)?, config.train.clone())?
                }
            };
            while trainer.epochs_done() < config.train.epochs && !trainer.stopped_early() {
                trainer.run_epoch(&train, &valid)?;
                if let Some(dir) = &state {
                    trainer.save_state(dir)?;
                }
            }
            trainer.best_model().save(&out)?;
            print_json(&trainer.history())?;
        }
        Command::Predict { model, edits, beam_size, max_len, alpha, out } => {
            let base = config()?.beam;
            let beam = BeamConfig {
                beam_size: beam_size.unwrap_or(base.beam_size),
                max_len: max_len.unwrap_or(base.max_len),
                alpha: alpha.unwrap_or(base.alpha),
            };
            let model = Seq2Seq::<Float>::load(&model)?;
            let samples = load_samples(&edits, &model_codec(&model))?;
            let hyps = decode_samples(&model, &samples, &beam)?;
            write_jsonl(&out, &hyps)?;
            info!("{} inputs decoded", hyps.len());
        }
        Command::RerankTrain { model, hyps, gold, out } => {
            let config = config()?;
            let stage = config.rerank.clone().unwrap_or_default();
            let model = Seq2Seq::<Float>::load(&model)?;
            let codec = model_codec(&model);
            let hyps: Vec<HypsRecord> = read_jsonl(&hyps)?;
            let instances = build_instances(&load_samples(&gold, &codec)?, &hyps, &codec)?;
            let mut heads = HeadPair::from_main(&model, config.seed)?;
            let (lt, le) = heads.train(&instances, &stage.train)?;
            heads.save(&out)?;
            print_json(&serde_json::json!({ "transformer_losses": lt, "encoder_losses": le }))?;
        }
        Command::RerankTune { heads, val, gold, out_weights, out_heads } => {
            let stage = config()?.rerank.unwrap_or_default();
            let heads = HeadPair::<Float>::load(&heads)?;
            let codec = heads_codec(&heads);
            let hyps: Vec<HypsRecord> = read_jsonl(&val)?;
            let valid = build_instances(&load_samples(&gold, &codec)?, &hyps, &codec)?;
            let temperature = stage.train.temperature;
            let grid = grid_search_coefficients(&heads.score(&valid, temperature)?)?;
            let weights = EnsembleWeights { c1: grid.c1, c2: grid.c2, temperature };
            let (tuned, report) = finetune_on_validation(&heads, &valid, weights, &stage.train, &stage.finetune_epochs)?;
            tuned.save(&out_heads)?;
            write_atomic(&out_weights, &serde_json::to_string_pretty(&weights)?)?;
            print_json(&serde_json::json!({ "grid": grid, "finetune": report }))?;
        }
        Command::RerankApply { heads, hyps, gold, weights, out } => {
            let weights = parse_weights(&weights)?;
            let heads = HeadPair::<Float>::load(&heads)?;
            let codec = heads_codec(&heads);
            let hyps: Vec<HypsRecord> = read_jsonl(&hyps)?;
            let instances = build_instances(&load_samples(&gold, &codec)?, &hyps, &codec)?;
            let scored = heads.score(&instances, weights.temperature)?;
            let records: Vec<RankedRecord> = instances
                .iter()
                .zip(&scored)
                .map(|(inst, s)| RankedRecord::new(inst, &ensemble_rank(s, weights.c1, weights.c2), &codec))
                .collect();
            write_jsonl(&out, &records)?;
            info!("{} instances reranked", records.len());
        }
        Command::Evaluate { ranked, hyps, gold, vocab, width } => {
            let width = width.unwrap_or(config()?.beam.beam_size);
            let codec = EditCodec::for_vocab(&Vocab::load(&vocab)?);
            let gold = load_samples(&gold, &codec)?;
            let golds: Vec<_> = gold.iter().map(|s| (s.id.clone(), s.y.clone())).collect();
            let (preds, failures) = match (ranked, hyps) {
                (Some(r), _) => {
                    let (_, preds) = resolve_ranked(&r, &gold, &codec)?;
                    let failures = preds.iter().map(|p| p.candidates.iter().filter(|c| c.is_none()).count()).sum();
                    (preds, failures)
                }
                (None, Some(h)) => {
                    let hyps: Vec<HypsRecord> = read_jsonl(&h)?;
                    let instances = build_instances(&gold, &hyps, &codec)?;
                    (repair_core::pipeline::beam_predictions(&instances), application_failures(&instances))
                }
                (None, None) => unreachable!("clap requires one of them"),
            };
            let topk = exact_match_topk(&preds, &golds, width)?;
            print_json(&serde_json::json!({ "topk": topk, "application_failures": failures }))?;
        }
        Command::PrSweep { ranked, gold, vocab, thresholds, out } => {
            let codec = EditCodec::for_vocab(&Vocab::load(&vocab)?);
            let gold = load_samples(&gold, &codec)?;
            let (lists, _) = resolve_ranked(&ranked, &gold, &codec)?;
            let curves = pr_sweep(&lists, thresholds)?;
            match out {
                Some(path) => write_atomic(&path, &serde_json::to_string_pretty(&curves)?)?,
                None => print_json(&curves)?,
            }
        }
        Command::RunPipeline { work_dir, corpus } => {
            let mut config = config()?;
            if let Some(path) = corpus {
                config.corpus = repair_core::pipeline::CorpusSource::File { path };
            }
            let report = run_pipeline(&config, &work_dir)?;
            print!("{}", report.to_table());
            info!("report written to {}", work_dir.join("report.json").display());
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
