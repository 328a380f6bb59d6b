use std::path::Path;

use assert_cmd::Command;
use repair_core::model::ModelConfig;
use repair_core::pipeline::PipelineConfig;

fn repair(dir: &Path) -> Command {
    let mut cmd = Command::cargo_bin("repair").unwrap();
    cmd.current_dir(dir).env("REPAIR_CONFIG", dir.join("config.json")).env_remove("REPAIR_WORK_DIR").env_remove("REPAIR_CORPUS");
    cmd
}

fn write_config(dir: &Path) {
    let mut c = PipelineConfig::synthetic(200, 1);
    c.model = ModelConfig { d_model: 32, ffn_dim: 64, n_encoder_layers: 1, n_decoder_layers: 1, max_len: 96, ..ModelConfig::tiny(0) };
    c.train.epochs = 4;
    c.train.lr = 3e-3;
    c.train.batch_size = 8;
    c.train.patience = 0;
    c.beam.beam_size = 3;
    let r = c.rerank.as_mut().unwrap();
    r.train.epochs = 1;
    r.max_train_instances = Some(60);
    r.finetune_epochs = vec![1];
    std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(&c).unwrap()).unwrap();
}

fn run(dir: &Path, args: &[&str]) -> String {
    let out = repair(dir).args(args).assert().success();
    String::from_utf8(out.get_output().stdout.clone()).unwrap()
}

#[test]
fn stages_chain_through_files() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write_config(d);
    run(d, &["synthesize", "--programs", "300", "--pairs", "300", "--seed", "2", "--out", "pairs.jsonl"]);
    assert_eq!(std::fs::read_to_string(d.join("pairs.jsonl")).unwrap().lines().count(), 300);
    run(d, &["tokenizer-train", "--pairs", "pairs.jsonl", "--vocab-size", "400", "--out", "vocab.json"]);
    let counts = run(d, &["derive-edits", "--pairs", "pairs.jsonl", "--vocab", "vocab.json", "--max-len", "96", "--max-edit-tokens", "64", "--out", "edits.jsonl"]);
    assert!(counts.contains("\"kept\": 300"));
    run(d, &["apply-edits", "--edits", "edits.jsonl", "--vocab", "vocab.json", "--out", "fixed.jsonl"]);
    let stats = run(d, &["stats", "--edits", "edits.jsonl", "--vocab", "vocab.json"]);
    assert!(stats.contains("insertion_len"));

    run(d, &["train", "--train", "edits.jsonl", "--vocab", "vocab.json", "--state", "train", "--out", "model.bin"]);
    assert!(d.join("train/progress.json").exists());
    run(d, &["predict", "--model", "model.bin", "--edits", "edits.jsonl", "--out", "hyps.jsonl"]);
    run(d, &["rerank-train", "--model", "model.bin", "--hyps", "hyps.jsonl", "--gold", "edits.jsonl", "--out", "heads.bin"]);
    run(d, &["rerank-tune", "--heads", "heads.bin", "--val", "hyps.jsonl", "--gold", "edits.jsonl", "--out-weights", "weights.json", "--out-heads", "heads_ft.bin"]);
    run(d, &["rerank-apply", "--heads", "heads_ft.bin", "--hyps", "hyps.jsonl", "--gold", "edits.jsonl", "--weights", "weights.json", "--out", "ranked.jsonl"]);
    run(d, &["rerank-apply", "--heads", "heads.bin", "--hyps", "hyps.jsonl", "--gold", "edits.jsonl", "--weights", "0,0", "--out", "plain.jsonl"]);

    let parse = |s: String| serde_json::from_str::<serde_json::Value>(&s).unwrap();
    let beam = parse(run(d, &["evaluate", "--hyps", "hyps.jsonl", "--gold", "edits.jsonl", "--vocab", "vocab.json"]));
    let ranked = parse(run(d, &["evaluate", "--ranked", "ranked.jsonl", "--gold", "edits.jsonl", "--vocab", "vocab.json"]));
    let plain = parse(run(d, &["evaluate", "--ranked", "plain.jsonl", "--gold", "edits.jsonl", "--vocab", "vocab.json"]));
    assert_eq!(beam["topk"].as_array().unwrap().len(), 3);
    assert_eq!(beam["topk"][2], ranked["topk"][2]);
    assert_eq!(beam["topk"][2], plain["topk"][2]);

    let pr = parse(run(d, &["pr-sweep", "--ranked", "ranked.jsonl", "--gold", "edits.jsonl", "--vocab", "vocab.json", "--thresholds", "5"]));
    assert_eq!(pr["ensemble"].as_array().unwrap().len(), 6);
    assert_eq!(pr["ensemble"][0], pr["beam"][0]);
    assert_eq!(pr["ensemble"][0]["precision"], ranked["topk"][0]);
}

#[test]
fn pipeline_reads_paths_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write_config(d);
    let out = repair(d).arg("run-pipeline").env("REPAIR_WORK_DIR", d.join("work")).assert().success();
    let table = String::from_utf8(out.get_output().stdout.clone()).unwrap();
    assert!(table.contains("fine-tuned ensemble"));
    assert!(d.join("work/report.json").exists());
    assert!(d.join("work/report.txt").exists());
}

#[test]
fn tokenizer_trains_on_a_text_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write_config(d);
    std::fs::create_dir(d.join("src")).unwrap();
    std::fs::write(d.join("src/a.txt"), "int x = y ;\nreturn x ;\n").unwrap();
    std::fs::write(d.join("src/b.txt"), "x = x + 1 ;\n").unwrap();
    run(d, &["tokenizer-train", "--corpus", "src", "--vocab-size", "270", "--out", "vocab.json"]);
    let vocab = repair_core::tokenizer::Vocab::load(d.join("vocab.json")).unwrap();
    assert!(vocab.len() > 261 && vocab.len() <= 270);
    repair(d).args(["tokenizer-train", "--out", "v.json"]).assert().failure();
}

#[test]
fn bad_input_fails_with_a_line_number() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write_config(d);
    std::fs::write(d.join("pairs.jsonl"), "{\"v\":1,\"id\":\"a\",\"buggy\":\"x\",\"fixed\":\"y\"}\nnot json\n").unwrap();
    let out = repair(d).args(["tokenizer-train", "--pairs", "pairs.jsonl", "--out", "v.json"]).assert().failure();
    let err = String::from_utf8(out.get_output().stderr.clone()).unwrap();
    assert!(err.contains("line 2"), "{err}");
}
