use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ivtlr::analysis::{evaluate, run_ablation, sweep_latent_length, RunMetrics, Variant};
use ivtlr::checkpoint::{load_checkpoint, save_checkpoint, write_atomic, Manifest};
use ivtlr::curriculum::{train_curriculum, TrainConfig};
use ivtlr::latent::LatentOptions;
use ivtlr::model::Params;
use ivtlr::tasks::{content_hash, from_jsonl, generate_dataset, to_jsonl, Sample, TaskSpec};
use ivtlr::Error;
use serde_json::json;

use crate::config::Config;
use crate::{AnalyzeArgs, CliError, CliResult, EvalArgs, GenDataArgs, TrainArgs};

pub const METRICS_HEADER: &str = "run_id,stage,n_latent,split,accuracy,ar_steps_mean,latency_ms_mean,n_samples";
pub const ATTENTION_HEADER: &str = "sample_id,step,R,F";
pub const ABLATION_HEADER: &str = "variant,accuracy,ar_steps_mean,latency_ms_mean,n_samples,R_per_step,F_per_step";
pub const SWEEP_K_HEADER: &str = "k,accuracy,ar_steps_mean,latency_ms_mean";
pub const SWEEP_STAGE_HEADER: &str = "stage,n_latent,accuracy,ar_steps_mean,latency_ms_mean,n_samples";

pub fn checkpoint_name(stage: usize) -> String {
    format!("stage{stage}.ivtl")
}

fn f6(x: f64) -> String {
    format!("{x:.6}")
}

fn read_samples(path: &Path) -> CliResult<Vec<Sample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let samples = from_jsonl(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if samples.is_empty() {
        return Err(Error::Format(format!("{} holds no samples", path.display())).into());
    }
    Ok(samples)
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(Error::from)?;
    }
    write_atomic(path, contents.as_bytes())?;
    Ok(())
}

fn required<'a, T>(v: &'a Option<T>, flag: &str, mode: &str) -> CliResult<&'a T> {
    v.as_ref()
        .ok_or_else(|| CliError::Usage(format!("--{flag} is required for {mode}")))
}

fn load_config(path: Option<&PathBuf>) -> CliResult<Config> {
    Ok(match path {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    })
}

pub fn gen_data(a: &GenDataArgs) -> CliResult<()> {
    if a.task != "grid-sum" {
        return Err(Error::Spec(format!("unknown task {:?}; only grid-sum is available", a.task)).into());
    }
    let defaults = TaskSpec::default();
    let spec = TaskSpec {
        n_samples: a.n,
        seed: a.seed,
        hop_count: a.hops.unwrap_or(defaults.hop_count),
        short_rationale_fraction: a.short_fraction.unwrap_or(defaults.short_rationale_fraction),
    };
    let data = generate_dataset(&spec)?;
    let train = to_jsonl(&data.train)?;
    let test = to_jsonl(&data.test)?;
    let mut both = train.clone().into_bytes();
    both.extend_from_slice(test.as_bytes());
    let manifest = json!({
        "task": "grid-sum",
        "spec": spec,
        "counts": { "train": data.train.len(), "test": data.test.len() },
        "content_hash": content_hash(&both),
        "files": {
            "train.jsonl": content_hash(train.as_bytes()),
            "test.jsonl": content_hash(test.as_bytes()),
        },
    });
    fs::create_dir_all(&a.out).map_err(Error::from)?;
    write_file(&a.out.join("train.jsonl"), &train)?;
    write_file(&a.out.join("test.jsonl"), &test)?;
    write_file(
        &a.out.join("manifest.json"),
        &(serde_json::to_string_pretty(&manifest).map_err(Error::from)? + "\n"),
    )?;
    println!("{} train, {} test -> {}", data.train.len(), data.test.len(), a.out.display());
    Ok(())
}

pub fn train(a: &TrainArgs) -> CliResult<()> {
    let mut cfg = load_config(a.config.as_ref())?;
    if a.seed.is_some() {
        cfg.seed = a.seed;
    }
    if let Some(n) = a.n_stages {
        cfg.train.n_stages = n;
        cfg.latent.n_latent_eval = None;
    }
    if let Some(e) = a.epochs_per_stage {
        cfg.train.epochs_per_stage = e;
    }
    if a.k.is_some() {
        cfg.latent.k = a.k;
    }
    if let Some(d) = &a.data {
        cfg.io.data_dir = Some(d.clone());
    }
    if let Some(o) = &a.out {
        cfg.io.out_dir = Some(o.clone());
    }
    let cfg = cfg.resolve()?;
    let data_dir = required(&cfg.io.data_dir, "data", "train")?;
    let out = required(&cfg.io.out_dir, "out", "train")?.clone();
    let variant = Variant::parse(&a.variant)?;
    let samples = read_samples(&data_dir.join("train.jsonl"))?;

    fs::create_dir_all(&out).map_err(Error::from)?;
    write_file(
        &out.join("final_config.json"),
        &(serde_json::to_string_pretty(&cfg).map_err(Error::from)? + "\n"),
    )?;
    let (n_stages, _) = variant.schedule(&cfg.train);
    let tc = TrainConfig {
        n_stages,
        ..cfg.train.clone()
    };
    let opts = variant.latent_options(&cfg.latent_options());
    let mut params = Params::<f32>::init(&cfg.model, tc.seed)?;
    let mut log = String::new();
    let result = train_curriculum(
        &mut params,
        &samples,
        variant.supervision(),
        &tc,
        &opts,
        0,
        |e| {
            log::info!("stage {} epoch {} loss {:.6}", e.stage, e.epoch, e.mean_loss);
            log.push_str(&serde_json::to_string(e).expect("epoch log serializes"));
            log.push('\n');
        },
        |stage, p, _| save_checkpoint(p, Some(stage), &out.join(checkpoint_name(stage))),
    );
    write_file(&out.join("train_log.jsonl"), &log)?;
    result?;
    println!("{n_stages} stage checkpoints -> {}", out.display());
    Ok(())
}

fn eval_options(manifest: &Manifest, k: Option<usize>, variant: &str) -> CliResult<LatentOptions> {
    let v = Variant::parse(variant)?;
    Ok(v.latent_options(&LatentOptions::with_k(k.unwrap_or(manifest.model.default_k))))
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn metrics_row(run_id: &str, stage: Option<usize>, n_latent: usize, split: &str, m: &RunMetrics) -> String {
    format!(
        "{run_id},{},{n_latent},{split},{},{},{},{}",
        stage.map(|s| s.to_string()).unwrap_or_default(),
        f6(m.accuracy),
        f6(m.ar_steps_mean),
        f6(m.latency_ms_mean),
        m.n_samples
    )
}

pub fn eval(a: &EvalArgs) -> CliResult<()> {
    let (params, manifest) = load_checkpoint::<f32>(&a.ckpt)?;
    let samples = read_samples(&a.data)?;
    let opts = eval_options(&manifest, a.k, &a.variant)?;
    let (m, per) = evaluate(&params, &samples, a.n_latent, &opts)?;
    let run_id = a.run_id.clone().unwrap_or_else(|| stem(&a.ckpt));
    let split = a.split.clone().unwrap_or_else(|| stem(&a.data));
    let row = metrics_row(&run_id, manifest.stage, a.n_latent, &split, &m);
    write_file(&a.report, &format!("{METRICS_HEADER}\n{row}\n"))?;
    if let Some(dump) = &a.dump_per_sample {
        let mut out = String::new();
        for r in &per {
            out.push_str(&serde_json::to_string(r).map_err(Error::from)?);
            out.push('\n');
        }
        write_file(dump, &out)?;
    }
    println!("accuracy {} over {} samples", f6(m.accuracy), m.n_samples);
    Ok(())
}

pub fn analyze(a: &AnalyzeArgs) -> CliResult<()> {
    match a.mode.as_str() {
        "attention" => analyze_attention(a),
        "ablation" => analyze_ablation(a),
        "sweep-k" => analyze_sweep_k(a),
        "sweep-stage" => analyze_sweep_stage(a),
        other => Err(Error::Config(format!(
            "unknown analyze mode {other:?}; expected attention, ablation, sweep-k or sweep-stage"
        ))
        .into()),
    }
}

fn analyze_attention(a: &AnalyzeArgs) -> CliResult<()> {
    let ckpt = required(&a.ckpt, "ckpt", "attention mode")?;
    let (params, manifest) = load_checkpoint::<f32>(ckpt)?;
    let samples = read_samples(required(&a.data, "data", "attention mode")?)?;
    let n_latent = a.n_latent.or(manifest.stage).unwrap_or(0);
    let opts = LatentOptions::with_k(a.k.unwrap_or(manifest.model.default_k));
    let (m, per) = evaluate(&params, &samples, n_latent, &opts)?;
    let mut out = format!("{ATTENTION_HEADER}\n");
    for r in &per {
        for p in &r.trajectory {
            writeln!(out, "{},{},{},{}", r.id, p.step, f6(p.ratio), f6(p.focus)).unwrap();
        }
    }
    write_file(&a.out, &out)?;
    for (i, (r, f)) in m.per_step_ratio.iter().zip(&m.per_step_focus).enumerate() {
        println!("step {}: mean R {} mean F {}", i + 1, f6(*r), f6(*f));
    }
    Ok(())
}

struct Experiment {
    cfg: Config,
    train: Vec<Sample>,
    test: Vec<Sample>,
}

fn experiment(a: &AnalyzeArgs, mode: &str) -> CliResult<Experiment> {
    let mut cfg = load_config(a.config.as_ref())?;
    if a.k.is_some() {
        cfg.latent.k = a.k;
    }
    if let Some(d) = &a.data {
        cfg.io.data_dir = Some(d.clone());
    }
    let cfg = cfg.resolve()?;
    let dir = required(&cfg.io.data_dir, "data", mode)?.clone();
    Ok(Experiment {
        train: read_samples(&dir.join("train.jsonl"))?,
        test: read_samples(&dir.join("test.jsonl"))?,
        cfg,
    })
}

fn joined(xs: &[f64]) -> String {
    xs.iter().map(|x| f6(*x)).collect::<Vec<_>>().join(";")
}

fn analyze_ablation(a: &AnalyzeArgs) -> CliResult<()> {
    let ex = experiment(a, "ablation mode")?;
    let variants = if a.variants.is_empty() {
        Variant::ALL.to_vec()
    } else {
        a.variants.iter().map(|v| Variant::parse(v)).collect::<ivtlr::Result<_>>()?
    };
    let mut out = format!("{ABLATION_HEADER}\n");
    for v in variants {
        log::info!("ablation {}", v.name());
        let m = run_ablation(v, &ex.train, &ex.test, &ex.cfg.model, &ex.cfg.train, &ex.cfg.latent_options())?;
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            v.name(),
            f6(m.accuracy),
            f6(m.ar_steps_mean),
            f6(m.latency_ms_mean),
            m.n_samples,
            joined(&m.per_step_ratio),
            joined(&m.per_step_focus)
        )
        .unwrap();
    }
    write_file(&a.out, &out)
}

fn analyze_sweep_k(a: &AnalyzeArgs) -> CliResult<()> {
    let ex = experiment(a, "sweep-k mode")?;
    let rep = sweep_latent_length(&a.k_values, &ex.train, &ex.test, &ex.cfg.model, &ex.cfg.train, &ex.cfg.latent_options())?;
    let mut out = format!("{SWEEP_K_HEADER}\n");
    for r in &rep.rows {
        writeln!(out, "{},{},{},{}", r.k, f6(r.accuracy), f6(r.ar_steps_mean), f6(r.latency_ms_mean)).unwrap();
    }
    write_file(&a.out, &out)?;
    println!("spearman(k, accuracy) {}", f6(rep.spearman));
    Ok(())
}

fn analyze_sweep_stage(a: &AnalyzeArgs) -> CliResult<()> {
    let dir = required(&a.ckpt_dir, "ckpt-dir", "sweep-stage mode")?;
    let samples = read_samples(required(&a.data, "data", "sweep-stage mode")?)?;
    let mut out = format!("{SWEEP_STAGE_HEADER}\n");
    let mut stage = 1;
    while dir.join(checkpoint_name(stage)).exists() {
        let (params, manifest) = load_checkpoint::<f32>(&dir.join(checkpoint_name(stage)))?;
        let opts = LatentOptions::with_k(a.k.unwrap_or(manifest.model.default_k));
        let (m, _) = evaluate(&params, &samples, stage, &opts)?;
        writeln!(
            out,
            "{stage},{stage},{},{},{},{}",
            f6(m.accuracy),
            f6(m.ar_steps_mean),
            f6(m.latency_ms_mean),
            m.n_samples
        )
        .unwrap();
        stage += 1;
    }
    if stage == 1 {
        return Err(Error::Format(format!("no latent stage checkpoints in {}", dir.display())).into());
    }
    write_file(&a.out, &out)
}
