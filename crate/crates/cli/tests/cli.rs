use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn depjudge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_depjudge")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = depjudge(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen(dir: &Path, extra: &[&str]) {
    let mut args = vec!["gen-corpus", "--n", "60", "--articles", "8", "--charges", "4", "--seed", "7", "--out", p(dir)];
    args.extend_from_slice(extra);
    ok(&args);
}

/// Fast fine-tuning settings; model keys only apply when no checkpoint is loaded.
fn tiny_config(dir: &Path, fresh_model: bool) -> String {
    let path = dir.join(if fresh_model { "tiny_model.conf" } else { "tiny.conf" });
    let mut conf = String::from("# fast settings\nmax_epochs = 2\npatience = 1\nmicro_batch = 8\naccumulation_steps = 1\nmax_out_len = 40\n");
    if fresh_model {
        conf.push_str("max_len = 256\n");
    }
    fs::write(&path, conf).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn gen_corpus_is_byte_identical_across_runs() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    gen(&a, &[]);
    gen(&b, &[]);
    for name in ["corpus.jsonl", "train.jsonl", "val.jsonl", "test.jsonl", "catalog.json"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
    let c = t.path().join("c");
    ok(&["gen-corpus", "--n", "60", "--seed", "8", "--out", p(&c)]);
    assert_ne!(fs::read(a.join("corpus.jsonl")).unwrap(), fs::read(c.join("corpus.jsonl")).unwrap());
}

#[test]
fn eval_of_gold_predictions_is_perfect() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    gen(&data, &[]);
    let mut preds = String::new();
    for line in fs::read_to_string(data.join("test.jsonl")).unwrap().lines() {
        let case: Value = serde_json::from_str(line).unwrap();
        let months = match case["penalty"]["type"].as_str().unwrap() {
            "fixed" => case["penalty"]["months"].as_u64().unwrap(),
            "life" => 350,
            _ => 400,
        };
        let rec = serde_json::json!({
            "id": case["id"], "articles": case["articles"], "charges": case["charges"], "penalty_months": months
        });
        preds.push_str(&format!("{rec}\n"));
    }
    let pred_path = t.path().join("gold_preds.jsonl");
    fs::write(&pred_path, preds).unwrap();
    let out = t.path().join("eval");
    ok(&["eval", "--data", p(&data), "--predictions", p(&pred_path), "--out", p(&out)]);
    let report: Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    // labels absent from the split score zero in the macro average
    let support = |key: &str, n: f64| {
        let mut seen = std::collections::HashSet::new();
        for line in fs::read_to_string(data.join("test.jsonl")).unwrap().lines() {
            let case: Value = serde_json::from_str(line).unwrap();
            for l in case[key].as_array().unwrap() {
                seen.insert(l.as_str().unwrap().to_string());
            }
        }
        seen.len() as f64 / n
    };
    for task in report["tasks"].as_array().unwrap() {
        let macro_ = task["macro_f1"].as_f64();
        match task["task"].as_str().unwrap() {
            "P" => assert_eq!(task["log_distance"].as_f64(), Some(0.0)),
            "A" => assert!((macro_.unwrap() - support("articles", 8.0)).abs() < 1e-12),
            "C" => assert!((macro_.unwrap() - support("charges", 4.0)).abs() < 1e-12),
            _ => {}
        }
        if task["task"] != "P" {
            assert_eq!(task["micro_f1"].as_f64(), Some(1.0));
        }
    }
}

fn error_line(out: &Output) -> String {
    let err = String::from_utf8_lossy(&out.stderr).to_string();
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "expected one error line, got {err:?}");
    assert!(lines[0].starts_with("error kind="), "{err}");
    lines[0].to_string()
}

#[test]
fn failures_map_to_distinct_exit_codes() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    gen(&data, &[]);
    let out = p(t.path());

    let usage = depjudge(&["gen-corpus", "--bogus"]);
    assert_eq!(usage.status.code(), Some(2));
    assert!(error_line(&usage).contains("kind=usage"));

    let missing = depjudge(&["train", "--data", "/nonexistent/dir", "--out", out]);
    assert_eq!(missing.status.code(), Some(3));
    assert!(error_line(&missing).contains("kind=missing_file"));

    let mut bad = b"DEPJCKPT".to_vec();
    bad.extend_from_slice(&99u32.to_le_bytes());
    bad.extend_from_slice(&[0; 32]);
    let ck = t.path().join("future.ckpt");
    fs::write(&ck, bad).unwrap();
    let version = depjudge(&["eval", "--data", p(&data), "--checkpoint", p(&ck), "--out", out]);
    assert_eq!(version.status.code(), Some(4));
    assert!(error_line(&version).contains("kind=checkpoint_version"));

    let conf = t.path().join("bad.conf");
    fs::write(&conf, "max_epochs = 3\npatience = 1\nlearning_speed = 9\n").unwrap();
    let config = depjudge(&["train", "--data", p(&data), "--model", "tiny", "--config", p(&conf), "--out", out]);
    assert_eq!(config.status.code(), Some(5));
    assert!(error_line(&config).contains("learning_speed"));
}

#[test]
fn order_sweep_writes_one_row_per_permutation() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    gen(&data, &[]);
    let conf = tiny_config(t.path(), true);
    let out = t.path().join("sweep");
    ok(&["order-sweep", "--data", p(&data), "--tasks", "ACP", "--model", "tiny", "--config", &conf, "--out", p(&out)]);
    let report: Value = serde_json::from_str(&fs::read_to_string(out.join("order_sweep.json")).unwrap()).unwrap();
    let orders: Vec<&str> = report["rows"].as_array().unwrap().iter().map(|r| r["order"].as_str().unwrap()).collect();
    assert_eq!(orders, ["ACP", "APC", "CAP", "CPA", "PAC", "PCA"]);
    assert!(out.join("order_sweep.csv").exists());
}

#[test]
fn full_pipeline_runs_and_is_reproducible() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    ok(&["gen-corpus", "--n", "60", "--articles", "40", "--charges", "4", "--seed", "7", "--out", p(&data)]);
    let conf = tiny_config(t.path(), false);
    ok(&["build-vocab", "--data", p(&data), "--out", p(&data)]);
    assert!(data.join("vocab.txt").exists());

    let pre = t.path().join("pre");
    let pre_conf = t.path().join("pre.conf");
    fs::write(&pre_conf, "max_len = 256\nmax_epochs = 1\npatience = 0\nmicro_batch = 8\naccumulation_steps = 1\n").unwrap();
    ok(&["pretrain", "--data", p(&data), "--model", "tiny", "--config", p(&pre_conf), "--out", p(&pre)]);
    let ckpt = pre.join("pretrained.ckpt");

    let train = |dir: &Path| {
        ok(&["train", "--data", p(&data), "--init", p(&ckpt), "--mode", "dep:ACP", "--config", &conf, "--out", p(dir)]);
    };
    let (t1, t2) = (t.path().join("t1"), t.path().join("t2"));
    train(&t1);
    train(&t2);
    assert_eq!(fs::read(t1.join("model.ckpt")).unwrap(), fs::read(t2.join("model.ckpt")).unwrap());
    assert_eq!(fs::read(t1.join("train_log.jsonl")).unwrap(), fs::read(t2.join("train_log.jsonl")).unwrap());
    let log = fs::read_to_string(t1.join("train_log.jsonl")).unwrap();
    let first: Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for key in ["epoch", "train_loss", "val_metric", "best_so_far"] {
        assert!(first.get(key).is_some(), "{key}");
    }

    let model = t1.join("model.ckpt");
    let ev = t.path().join("ev");
    ok(&["eval", "--data", p(&data), "--checkpoint", p(&model), "--out", p(&ev)]);
    let n_test = fs::read_to_string(data.join("test.jsonl")).unwrap().lines().count();
    assert_eq!(fs::read_to_string(ev.join("predictions.jsonl")).unwrap().lines().count(), n_test);

    let case_id: Value = serde_json::from_str(fs::read_to_string(data.join("test.jsonl")).unwrap().lines().next().unwrap()).unwrap();
    let case_id = case_id["id"].as_str().unwrap();
    let an = t.path().join("an");
    ok(&["dump-attention", "--data", p(&data), "--checkpoint", p(&model), "--case", case_id, "--out", p(&an)]);
    ok(&["counterfactual", "--data", p(&data), "--checkpoint", p(&model), "--case", case_id, "--task", "A", "--out", p(&an)]);
    ok(&["analyze-pmi", "--data", p(&data), "--predictions", p(&ev.join("predictions.jsonl")), "--out", p(&an)]);
    for f in ["attention.json", "attention.csv", "counterfactual.json", "pmi.json", "pmi_gold_article_charge.csv"] {
        assert!(an.join(f).exists(), "{f}");
    }

    let sz = t.path().join("sz");
    ok(&["size-sweep", "--data", p(&data), "--init", p(&ckpt), "--sizes", "10,20", "--config", &conf, "--out", p(&sz)]);
    assert_eq!(fs::read_to_string(sz.join("size_sweep.csv")).unwrap().lines().count(), 3);

    let mb = t.path().join("mb");
    ok(&[
        "match-baseline", "--data", p(&data), "--init", p(&ckpt), "--neg-ratio", "3", "--limit", "3", "--generative",
        p(&model), "--config", &conf, "--out", p(&mb),
    ]);
    let report: Value = serde_json::from_str(&fs::read_to_string(mb.join("match_report.json")).unwrap()).unwrap();
    assert_eq!(report["catalog_size"], 40);
    assert!(report["generative_secs_per_case"].as_f64().is_some());
}
