use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ivtlr::latent::ar_steps;
use serde_json::Value;

fn ivtlr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ivtlr"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen(dir: &Path, n: usize, seed: u64) -> Output {
    ivtlr(&["gen-data", "--task", "grid-sum", "--n", &n.to_string(), "--seed", &seed.to_string(), "--out", p(dir)])
}

const TINY: &str = r#"{
  "model": {"n_layers": 1, "n_heads": 2, "d_model": 16, "d_ff": 32},
  "train": {"epochs_per_stage": 1},
  "task": {"short_rationale_fraction": 0.0}
}"#;

fn tiny_run(root: &Path) -> (PathBuf, PathBuf) {
    let data = root.join("data");
    let out = root.join("run");
    let o = ivtlr(&[
        "gen-data", "--task", "grid-sum", "--n", "20", "--seed", "3", "--short-fraction", "0", "--out", p(&data),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let cfg = root.join("cfg.json");
    fs::write(&cfg, TINY).unwrap();
    let o = ivtlr(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    (data, out)
}

fn csv(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn gen_data_is_deterministic_and_counted() {
    let d = tempfile::tempdir().unwrap();
    let (a, b) = (d.path().join("a"), d.path().join("b"));
    assert_eq!(code(&gen(&a, 2500, 7)), 0);
    assert_eq!(code(&gen(&b, 2500, 7)), 0);
    let ma: Value = serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    let mb: Value = serde_json::from_str(&fs::read_to_string(b.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(ma["content_hash"], mb["content_hash"]);
    for split in ["train", "test"] {
        let lines = fs::read_to_string(a.join(format!("{split}.jsonl"))).unwrap().lines().count();
        assert_eq!(ma["counts"][split].as_u64().unwrap() as usize, lines);
    }
    assert_eq!(ma["counts"]["test"], 500);
}

#[test]
fn gen_data_errors() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("zero");
    assert_eq!(code(&gen(&out, 0, 1)), 2);
    assert!(!out.join("train.jsonl").exists());
    let o = ivtlr(&["gen-data", "--task", "maze", "--n", "5", "--seed", "1", "--out", p(d.path())]);
    assert_eq!(code(&o), 2);
    assert_eq!(code(&ivtlr(&["gen-data", "--task", "grid-sum", "--n", "5"])), 1);
    assert_eq!(code(&ivtlr(&["frobnicate"])), 1);
    assert_eq!(code(&ivtlr(&["--help"])), 0);
}

#[test]
fn train_writes_stages_and_replays_exactly() {
    let d = tempfile::tempdir().unwrap();
    let (data, out) = tiny_run(d.path());
    for s in 0..4 {
        assert!(out.join(format!("stage{s}.ivtl")).exists());
    }
    assert!(!out.join("stage4.ivtl").exists());
    let log = fs::read_to_string(out.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 4);
    let first: Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert!(first["wallclock_ms"].is_number() && first["mean_loss"].is_number());
    let fc: Value = serde_json::from_str(&fs::read_to_string(out.join("final_config.json")).unwrap()).unwrap();
    assert_eq!(fc["train"]["learning_rate"], 4e-5);
    assert_eq!(fc["latent"]["k"], 4);
    assert_eq!(fc["latent"]["n_latent_eval"], 3);

    let again = d.path().join("again");
    let o = ivtlr(&["train", "--config", p(&out.join("final_config.json")), "--data", p(&data), "--out", p(&again)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for s in 0..4 {
        let name = format!("stage{s}.ivtl");
        assert_eq!(fs::read(out.join(&name)).unwrap(), fs::read(again.join(&name)).unwrap());
    }
}

#[test]
fn bad_configs_exit_two() {
    let d = tempfile::tempdir().unwrap();
    let data = d.path().join("data");
    assert_eq!(code(&gen(&data, 10, 1)), 0);
    let cfg = d.path().join("bad.json");
    fs::write(&cfg, "{\n  \"train\": {\n    \"batch_size\": 4,,\n  }\n}").unwrap();
    let o = ivtlr(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&d.path().join("o"))]);
    assert_eq!(code(&o), 2);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 3") && err.contains("column"), "{err}");

    fs::write(&cfg, r#"{"train": {"learning_rat": 1.0}}"#).unwrap();
    let o = ivtlr(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&d.path().join("o"))]);
    assert_eq!(code(&o), 2);
    let o = ivtlr(&["train", "--data", p(&d.path().join("missing")), "--out", p(&d.path().join("o"))]);
    assert_eq!(code(&o), 2);
    let o = ivtlr(&["train", "--data", p(&data)]);
    assert_eq!(code(&o), 1);
}

#[test]
fn divergence_exits_three() {
    let d = tempfile::tempdir().unwrap();
    let data = d.path().join("data");
    assert_eq!(code(&gen(&data, 10, 1)), 0);
    let cfg = d.path().join("cfg.json");
    fs::write(
        &cfg,
        r#"{"model": {"n_layers": 1, "n_heads": 2, "d_model": 16, "d_ff": 32, "init_std": 1e30}, "train": {"epochs_per_stage": 1}}"#,
    )
    .unwrap();
    let out = d.path().join("run");
    let o = ivtlr(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&out)]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!out.join("stage0.ivtl").exists());
}

#[test]
fn eval_report_and_dump_agree() {
    let d = tempfile::tempdir().unwrap();
    let (data, out) = tiny_run(d.path());
    let report = d.path().join("m.csv");
    let dump = d.path().join("per.jsonl");
    let o = ivtlr(&[
        "eval", "--ckpt", p(&out.join("stage3.ivtl")), "--data", p(&data.join("test.jsonl")), "--n-latent", "3",
        "--report", p(&report), "--dump-per-sample", p(&dump),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows = csv(&report);
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].join(","), "run_id,stage,n_latent,split,accuracy,ar_steps_mean,latency_ms_mean,n_samples");
    assert_eq!(&rows[1][..4], ["stage3", "3", "3", "test"]);
    for field in &rows[1][4..7] {
        assert_eq!(field.split('.').nth(1).unwrap().len(), 6, "{field}");
    }
    let acc: f64 = rows[1][4].parse().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    let per: Vec<Value> = fs::read_to_string(&dump)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(per.len().to_string(), rows[1][7]);
    let recomputed: Vec<usize> = per
        .iter()
        .map(|r| ar_steps(r["n_latent"].as_u64().unwrap() as usize, r["tokens"].as_array().unwrap().len()))
        .collect();
    for (r, c) in per.iter().zip(&recomputed) {
        assert_eq!(r["ar_steps"].as_u64().unwrap() as usize, *c);
    }
    let mean = recomputed.iter().sum::<usize>() as f64 / recomputed.len() as f64;
    assert_eq!(format!("{mean:.6}"), rows[1][5]);

    let base = d.path().join("b.csv");
    let o = ivtlr(&[
        "eval", "--ckpt", p(&out.join("stage0.ivtl")), "--data", p(&data.join("test.jsonl")), "--n-latent", "0",
        "--report", p(&base),
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(&csv(&base)[1][..3], ["stage0", "0", "0"]);

    let broken = d.path().join("broken.ivtl");
    let mut bytes = fs::read(out.join("stage0.ivtl")).unwrap();
    bytes[0] = b'X';
    fs::write(&broken, bytes).unwrap();
    let o = ivtlr(&["eval", "--ckpt", p(&broken), "--data", p(&data.join("test.jsonl")), "--n-latent", "0", "--report", p(&base)]);
    assert_eq!(code(&o), 2);
    fs::write(d.path().join("junk.jsonl"), "{\"id\": 1}\n").unwrap();
    let o = ivtlr(&[
        "eval", "--ckpt", p(&out.join("stage0.ivtl")), "--data", p(&d.path().join("junk.jsonl")), "--n-latent", "0",
        "--report", p(&base),
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn analyze_modes() {
    let d = tempfile::tempdir().unwrap();
    let (data, out) = tiny_run(d.path());
    let test = data.join("test.jsonl");
    let att = d.path().join("att.csv");
    let o = ivtlr(&[
        "analyze", "--mode", "attention", "--ckpt", p(&out.join("stage3.ivtl")), "--data", p(&test), "--n-latent", "3",
        "--out", p(&att),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows = csv(&att);
    let n_test = fs::read_to_string(&test).unwrap().lines().count();
    assert_eq!(rows[0].join(","), "sample_id,step,R,F");
    assert_eq!(rows.len() - 1, n_test * 3);
    let max_keys = 160f64;
    for r in &rows[1..] {
        let f: f64 = r[3].parse().unwrap();
        assert!(f >= 1.0 / (max_keys.ln() + 1e-6) - 1e-6 && f <= 1e6 + 1e-6, "{f}");
        assert!(r[2].parse::<f64>().unwrap() >= 0.0);
    }

    let st = d.path().join("st.csv");
    let o = ivtlr(&["analyze", "--mode", "sweep-stage", "--ckpt-dir", p(&out), "--data", p(&test), "--out", p(&st)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows = csv(&st);
    assert_eq!(rows.iter().skip(1).map(|r| r[0].as_str()).collect::<Vec<_>>(), ["1", "2", "3"]);

    let o = ivtlr(&["analyze", "--mode", "heatmap", "--out", p(&st)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn ablation_emits_one_row_per_variant() {
    let d = tempfile::tempdir().unwrap();
    let data = d.path().join("data");
    assert_eq!(code(&gen(&data, 10, 2)), 0);
    let cfg = d.path().join("cfg.json");
    fs::write(&cfg, TINY).unwrap();
    let abl = d.path().join("abl.csv");
    let o = ivtlr(&["analyze", "--mode", "ablation", "--config", p(&cfg), "--data", p(&data), "--out", p(&abl)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows = csv(&abl);
    let names: Vec<&str> = rows[1..].iter().map(|r| r[0].as_str()).collect();
    assert_eq!(
        names,
        ["full", "no_latent_text", "no_latent_vision", "no_latent_part", "no_cot", "explicit_cot"]
    );

    let sk = d.path().join("sk.csv");
    let o = ivtlr(&[
        "analyze", "--mode", "sweep-k", "--config", p(&cfg), "--data", p(&data), "--k-values", "1,4", "--out", p(&sk),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(csv(&sk).len(), 3);
}
