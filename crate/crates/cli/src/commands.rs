use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use umtam::analysis::{memory_report, SpectralLog};
use umtam::checkpoint::{
    parse_config, read_checkpoint, read_config, read_weights, write_checkpoint, write_report, write_weights,
    ExperimentConfig, TaskKind,
};
use umtam::experiment::{initial_weights, run_training, TaskInstance};
use umtam::merge::{interference_report, merge as merge_checkpoints, task_vector, MergeSpec, Strategy};
use umtam::tensor::{effective_rank, energy_ratio, stable_rank};
use umtam::Matrix;

use crate::manifest::{input, sha256_hex, Manifest};
use crate::{Ablate, AnalyzeArgs, EvalArgs, Failure, MemreportArgs, MergeArgs, Method, TrainArgs};

type Outcome = Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig, Failure> {
    Ok(match path {
        Some(p) => read_config(p)?,
        None => parse_config("")?,
    })
}

fn print_json<T: Serialize>(value: &T) -> Outcome {
    let text = serde_json::to_string_pretty(value).map_err(umtam::Error::from)?;
    println!("{text}");
    Ok(())
}

pub fn train(args: &TrainArgs) -> Outcome {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(kind) = args.task {
        cfg.task.kind = kind;
    }
    if let Some(r) = args.rank {
        if r == 0 {
            return Err(usage("--rank must be positive"));
        }
        cfg.optimizer.rank = r;
        cfg.optimizer.rank_min = cfg.optimizer.rank_min.min(r);
        cfg.optimizer.rank_max = cfg.optimizer.rank_max.max(r);
    }
    if let Some(lr) = args.lr {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(usage("--lr must be positive and finite"));
        }
        cfg.optimizer.lr_schedule = cfg.optimizer.lr_schedule.with_eta0(lr);
    }
    if let Some(steps) = args.steps {
        cfg.train.steps = steps;
    }
    if let Some(seed) = args.seed {
        cfg.task.seed = seed;
    }
    let (m, n) = cfg.task.shape();
    if args.rank.is_none() && cfg.optimizer.rank > m.min(n) {
        log::info!("rank {} clamped to min({m}, {n})", cfg.optimizer.rank);
        cfg.optimizer.rank = m.min(n);
        cfg.optimizer.rank_min = cfg.optimizer.rank_min.min(m.min(n));
    }
    if cfg.optimizer.rank > m.min(n) {
        return Err(usage(format!("--rank {} exceeds min({m}, {n})", cfg.optimizer.rank)));
    }
    cfg.validate()?;
    let seed = cfg.task.seed;

    let task = TaskInstance::from_config(&cfg.task)?;
    let w0 = initial_weights(&cfg.task)?;
    let mut log = args.spectral_log.as_ref().map(|_| SpectralLog::new(cfg.train.spectral_ranks.clone()));
    let outcome = run_training(&task, &w0, &cfg, seed, log.as_mut())?;

    let config_json = serde_json::to_vec(&cfg).map_err(umtam::Error::from)?;
    let mut meta = BTreeMap::new();
    meta.insert("task".to_string(), cfg.task.kind.as_str().to_string());
    meta.insert("steps".to_string(), cfg.train.steps.to_string());
    meta.insert("config_sha256".to_string(), sha256_hex(&config_json));
    let name = format!("{}-{seed}", cfg.task.kind.as_str());
    let ckpt = umtam::merge::TaskCheckpoint::from_state(name, &outcome.state, meta);
    write_checkpoint(&ckpt, &args.out)?;

    let mut manifest = Manifest::new("train", Some(seed), &cfg);
    manifest.inputs.extend(args.config.as_deref().map(input));
    manifest.outputs.push(args.out.clone());
    if let (Some(path), Some(log)) = (&args.spectral_log, &log) {
        log.save_csv(path)?;
        manifest.outputs.push(path.clone());
    }
    manifest.write(&args.out)?;

    let first = outcome.losses.first().copied().unwrap_or(f64::NAN);
    let last = outcome.losses.last().copied().unwrap_or(f64::NAN);
    println!(
        "trained {} for {} steps: loss {first:.6e} -> {last:.6e}, final rank {}",
        ckpt.name,
        cfg.train.steps,
        outcome.state.current_rank()
    );
    Ok(())
}

fn merge_spec(args: &MergeArgs) -> Result<(Vec<MergeSpec>, ExperimentConfig), Failure> {
    let mut cfg = load_config(args.config.as_deref())?;
    let m = &mut cfg.merge;
    if let Some(method) = args.method {
        m.strategy = match method {
            Method::Umtam => Strategy::Umtam,
            Method::Linear => Strategy::Linear,
            Method::Ties => Strategy::TiesMagnitude,
        };
    }
    if let Some(k) = args.sparsity {
        if !(k > 0.0 && k <= 100.0) {
            return Err(usage(format!("--sparsity {k} is not in (0, 100]")));
        }
        m.sparsity_k = k;
        m.sparsity_sweep = None;
    }
    for (flag, value, slot) in [
        ("--lambda1", args.lambda1, &mut m.lambda1),
        ("--lambda2", args.lambda2, &mut m.lambda2),
    ] {
        if let Some(v) = value {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(usage(format!("{flag} must be non-negative and finite")));
            }
            *slot = v;
        }
    }
    for a in &args.ablate {
        match a {
            Ablate::Prune => m.ablation.use_curvature_pruning = false,
            Ablate::Sign => m.ablation.use_sign_election = false,
            Ablate::Aggregate => m.ablation.use_curvature_aggregation = false,
        }
    }
    if let Some(p) = &args.priors {
        if p.len() != args.experts.len() {
            return Err(usage(format!(
                "--priors lists {} values for {} experts",
                p.len(),
                args.experts.len()
            )));
        }
        m.priors = Some(p.clone());
    }
    m.validate("merge").map_err(|e| usage(e.to_string()))?;
    Ok((m.specs(), cfg))
}

/// `merged.umtk` becomes `merged.k20.umtk` when a sweep writes several files.
fn sweep_path(out: &Path, k: f64) -> PathBuf {
    let stem = out.file_stem().unwrap_or_default().to_string_lossy();
    let name = match out.extension() {
        Some(ext) => format!("{stem}.k{k}.{}", ext.to_string_lossy()),
        None => format!("{stem}.k{k}"),
    };
    out.with_file_name(name)
}

#[derive(Serialize)]
struct MergeRunReport<'a> {
    report: &'a umtam::merge::MergeReport,
    interference: &'a umtam::merge::InterferenceReport,
}

pub fn merge(args: &MergeArgs) -> Outcome {
    if args.experts.len() < 2 {
        return Err(usage(format!(
            "--experts needs at least 2 checkpoints, got {}",
            args.experts.len()
        )));
    }
    let (specs, cfg) = merge_spec(args)?;
    let ckpts = args
        .experts
        .iter()
        .map(|p| read_checkpoint(p))
        .collect::<umtam::Result<Vec<_>>>()?;
    let interference = interference_report(&ckpts)?;

    let mut manifest = Manifest::new("merge", None, &cfg.merge);
    manifest.inputs.extend(args.experts.iter().map(|p| input(p)));
    manifest.inputs.extend(args.config.as_deref().map(input));
    let sweeping = specs.len() > 1;
    let mut reports = Vec::new();
    for spec in &specs {
        let (merged, report) = merge_checkpoints(&ckpts, spec)?;
        let out = if sweeping { sweep_path(&args.out, spec.sparsity_k) } else { args.out.clone() };
        let mut meta = BTreeMap::new();
        let strategy = serde_json::to_value(spec.strategy).map_err(umtam::Error::from)?;
        meta.insert("strategy".to_string(), strategy.as_str().unwrap_or_default().to_string());
        meta.insert("sparsity_k".to_string(), spec.sparsity_k.to_string());
        let mut names = report.task_names.clone();
        names.sort();
        meta.insert("experts".to_string(), names.join(","));
        write_weights(&merged, &meta, &out)?;
        println!(
            "merged {} experts (k = {}): sign conflict rate {:.4}, retained {:?}",
            ckpts.len(),
            spec.sparsity_k,
            report.sign_conflict_rate,
            report.retained_fraction
        );
        manifest.outputs.push(out);
        reports.push(report);
    }
    if let Some(path) = &args.report {
        let runs: Vec<MergeRunReport> = reports
            .iter()
            .map(|report| MergeRunReport {
                report,
                interference: &interference,
            })
            .collect();
        if sweeping {
            write_report(&runs, path)?;
        } else {
            write_report(&runs[0], path)?;
        }
        manifest.outputs.push(path.clone());
    }
    manifest.write(&args.out)?;
    Ok(())
}

fn csv_error(e: csv::Error) -> umtam::Error {
    umtam::Error::Csv(e.to_string())
}

fn spectral_row(
    out: &mut csv::Writer<Box<dyn Write>>,
    ckpt: &Path,
    name: &str,
    m: &Matrix,
    ranks: &[usize],
) -> umtam::Result<()> {
    let cell = |v: umtam::Result<f64>| v.map(|x| format!("{x:.12e}")).unwrap_or_default();
    let mut row = vec![
        ckpt.display().to_string(),
        name.to_string(),
        m.rows().to_string(),
        m.cols().to_string(),
        format!("{:.12e}", m.frobenius_norm()),
        cell(stable_rank(m)),
        cell(effective_rank(m)),
    ];
    row.extend(ranks.iter().map(|&r| cell(energy_ratio(m, r))));
    out.write_record(&row).map_err(csv_error)
}

pub fn analyze(args: &AnalyzeArgs) -> Outcome {
    if args.ranks.contains(&0) {
        return Err(usage("--ranks entries must be positive"));
    }
    let sink: Box<dyn Write> = match &args.out_csv {
        Some(p) => Box::new(std::fs::File::create(p).map_err(|e| {
            umtam::Error::Input(format!("cannot create {}: {e}", p.display()))
        })?),
        None => Box::new(std::io::stdout()),
    };
    let mut out = csv::Writer::from_writer(sink);
    let mut header: Vec<String> = ["checkpoint", "tensor", "rows", "cols", "frobenius", "stable_rank", "effective_rank"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(args.ranks.iter().map(|r| format!("energy_r{r}")));
    out.write_record(&header).map_err(csv_error)?;

    let mut ckpts = Vec::new();
    for path in &args.ckpt {
        let ckpt = read_checkpoint(path)?;
        spectral_row(&mut out, path, "weights", &ckpt.weights, &args.ranks)?;
        spectral_row(&mut out, path, "task_vector", &task_vector(&ckpt)?, &args.ranks)?;
        spectral_row(&mut out, path, "momentum", &ckpt.momentum.reconstruct(), &args.ranks)?;
        spectral_row(&mut out, path, "saliency", &ckpt.saliency, &args.ranks)?;
        ckpts.push(ckpt);
    }
    out.flush().map_err(|e| umtam::Error::Input(format!("writing csv: {e}")))?;
    if ckpts.len() >= 2 {
        let rep = interference_report(&ckpts)?;
        eprintln!(
            "sign conflict rate {:.4} over {} entries (saliency weighted {:.4})",
            rep.sign_conflict_rate, rep.entries, rep.saliency_weighted_conflict
        );
    }
    if let Some(path) = &args.out_csv {
        let mut manifest = Manifest::new("analyze", None, serde_json::json!({ "ranks": args.ranks }));
        manifest.inputs.extend(args.ckpt.iter().map(|p| input(p)));
        manifest.outputs.push(path.clone());
        manifest.write(path)?;
    }
    Ok(())
}

pub fn memreport(args: &MemreportArgs) -> Outcome {
    if !(args.sparsity > 0.0 && args.sparsity <= 100.0) {
        return Err(usage(format!("--sparsity {} is not in (0, 100]", args.sparsity)));
    }
    for (flag, v) in [("--m", args.m), ("--n", args.n), ("--rank", args.rank), ("--tasks", args.tasks)] {
        if v == 0 {
            return Err(usage(format!("{flag} must be positive")));
        }
    }
    let report = memory_report(args.m, args.n, args.rank, args.tasks, args.sparsity)?;
    print_json(&report)?;
    if let Some(path) = &args.out {
        write_report(&report, path)?;
        let mut manifest = Manifest::new("memreport", None, &report);
        manifest.outputs.push(path.clone());
        manifest.write(path)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct TaskEval {
    config: PathBuf,
    kind: TaskKind,
    loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    accuracy: Option<f64>,
}

#[derive(Serialize)]
struct EvalReport {
    weights: PathBuf,
    tasks: Vec<TaskEval>,
    mean_loss: f64,
}

pub fn eval(args: &EvalArgs) -> Outcome {
    let path = args.ckpt.as_ref().or(args.merged.as_ref()).expect("clap enforces one source");
    let weights = read_weights(path)?;
    let mut tasks = Vec::new();
    for cfg_path in &args.task_config {
        let cfg = read_config(cfg_path)?;
        let task = TaskInstance::from_config(&cfg.task)?;
        if task.shape() != weights.shape() {
            return Err(Failure::Runtime(umtam::Error::Input(format!(
                "{} has shape {:?} but {} describes {:?}",
                path.display(),
                weights.shape(),
                cfg_path.display(),
                task.shape()
            ))));
        }
        let accuracy = match &task {
            TaskInstance::Mlp(t) => Some(t.accuracy(std::slice::from_ref(&weights))?),
            _ => None,
        };
        tasks.push(TaskEval {
            config: cfg_path.clone(),
            kind: cfg.task.kind,
            loss: task.loss(&weights)?,
            accuracy,
        });
    }
    let mean_loss = tasks.iter().map(|t| t.loss).sum::<f64>() / tasks.len() as f64;
    let report = EvalReport {
        weights: path.clone(),
        tasks,
        mean_loss,
    };
    print_json(&report)?;
    if let Some(out) = &args.out {
        write_report(&report, out)?;
        let mut manifest = Manifest::new("eval", None, serde_json::json!({ "task_configs": args.task_config }));
        manifest.inputs.push(input(path));
        manifest.inputs.extend(args.task_config.iter().map(|p| input(p)));
        manifest.outputs.push(out.clone());
        manifest.write(out)?;
    }
    Ok(())
}
