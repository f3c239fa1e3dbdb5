//! Subcommand implementations. Each run-producing command resolves one
//! `TrainConfig` (defaults, then config file, then CLI flags), writes its
//! artifacts under `--out`, and seals the directory with a manifest.
//!
//! Sweeps place every point in its own subdirectory (`<label>-s<seed>/`)
//! with full artifacts, then merge the evaluations into `runs.csv`,
//! `summary.csv`, and a chart at the sweep root.

use crate::manifest::{self, RunManifest};
use crate::plot::{self, Bar, Series};
use crate::sweep;
use crate::{ReportArgs, RunArgs};
use qt_core::{
    behavior_value, collect, evaluate, evaluate_greedy, rollout, score_anchors, stitch_split,
    train, BehaviorPolicy, Checkpoint, Dataset, Error, EvalReport, PolicyKind, Result,
    RewardMode, ToyEnv, TrainConfig,
};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const DATASET_FILE: &str = "dataset.qtds";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.qtck";

/// Seeds per sweep point: enough for a spread without tripling desk time.
const REPLICATES: u64 = 3;
/// Action-lattice size for the critic-greedy baseline.
const GREEDY_ACTIONS: usize = 64;

/// Defaults, then the config file (a manifest works too), then CLI flags.
pub fn resolve_config(args: &RunArgs) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path)
            .map_err(|source| Error::File { path: path.clone(), source })?;
        cfg.apply_kv_text(&manifest::config_lines(&text))?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(env) = &args.env {
        cfg.env = env.clone();
    }
    if let Some(eta) = args.eta {
        cfg.eta = eta;
    }
    if let Some(k) = args.context_k {
        cfg.context_k = k;
    }
    if let Some(steps) = args.steps {
        cfg.total_steps = steps;
    }
    if let Some(mode) = &args.reward_mode {
        cfg.reward_mode = mode.clone();
    }
    if args.stitch_split {
        cfg.stitch_split = true;
    }
    if args.no_train_q {
        cfg.train_with_q = false;
    }
    if args.no_infer_q {
        cfg.eval_with_q = false;
    }
    if args.one_step {
        cfg.use_nstep = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn build_env(cfg: &TrainConfig) -> Result<ToyEnv> {
    ToyEnv::make(&cfg.env, RewardMode::parse(&cfg.reward_mode)?)
}

/// Generates the offline dataset the config describes. Deterministic in
/// `data_seed`, so a manifest alone is enough to rebuild it bit-for-bit.
pub fn build_dataset(cfg: &TrainConfig) -> Result<Dataset> {
    let mut env = build_env(cfg)?;
    let behavior = BehaviorPolicy::parse(&cfg.behavior)?;
    let full = collect(&mut env, behavior, cfg.episodes, cfg.data_seed)?;
    if cfg.stitch_split {
        stitch_split(&full, cfg.stitch_cut)
    } else {
        Ok(full)
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|source| Error::File { path: dir.to_path_buf(), source })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)
        .map_err(|source| Error::File { path: path.to_path_buf(), source })
}

pub fn gen_data(args: &RunArgs) -> Result<()> {
    let cfg = resolve_config(args)?;
    create_dir(&args.out)?;
    let ds = build_dataset(&cfg)?;
    ds.save(&args.out.join(DATASET_FILE))?;
    let mut man = RunManifest::new("gen-data", cfg);
    man.add_file(&args.out, DATASET_FILE)?;
    man.save(&args.out)?;
    println!(
        "dataset: {} trajectories, returns in [{:.3}, {:.3}], behavior mean {:.3}",
        ds.trajectories.len(),
        ds.min_return,
        ds.max_return,
        behavior_value(&ds)?
    );
    println!("wrote {}", args.out.display());
    Ok(())
}

/// Trains one run into `dir`: dataset, metrics CSV, checkpoint, manifest.
pub fn train_run(cfg: &TrainConfig, dir: &Path, command: &str) -> Result<qt_core::TrainArtifacts> {
    create_dir(dir)?;
    let ds = build_dataset(cfg)?;
    ds.save(&dir.join(DATASET_FILE))?;
    let mut env = build_env(cfg)?;
    let artifacts = train(cfg, &ds, &mut env, Some(dir))?;
    let mut man = RunManifest::new(command, cfg.clone());
    man.add_file(dir, DATASET_FILE)?;
    man.add_file(dir, METRICS_FILE)?;
    man.add_file(dir, CHECKPOINT_FILE)?;
    man.save(dir)?;
    Ok(artifacts)
}

pub fn train_cmd(args: &RunArgs) -> Result<()> {
    let cfg = resolve_config(args)?;
    let artifacts = train_run(&cfg, &args.out, "train")?;
    match &artifacts.final_eval {
        Some(r) => println!(
            "trained {} steps; eval return {:.3} +/- {:.3}, success {:.0}%",
            cfg.total_steps,
            r.mean,
            r.std,
            100.0 * r.success_rate
        ),
        None => println!("trained {} steps (no evaluation episodes configured)", cfg.total_steps),
    }
    println!("wrote {}", args.out.display());
    Ok(())
}

pub fn eval_cmd(args: &RunArgs) -> Result<()> {
    let cfg = resolve_config(args)?;
    let ck = Checkpoint::load(&args.out.join(CHECKPOINT_FILE))?;
    let mut env = build_env(&cfg)?;
    // Normalized scores are best-effort: some env/reward pairs have no
    // usable anchors and then only raw returns are reported.
    let anchors = score_anchors(&mut env, 100, cfg.seed).ok();
    let agent = ck.agent(cfg.eval_candidates, cfg.eval_with_q);
    let report = evaluate(&mut env, &agent, cfg.eval_episodes, cfg.seed, anchors.as_ref())?;
    let mut csv = String::from("episode,return\n");
    for (i, r) in report.returns.iter().enumerate() {
        let _ = writeln!(csv, "{i},{r}");
    }
    write_text(&args.out.join("eval.csv"), &csv)?;
    let trace = rollout(&mut env, &agent, cfg.seed)?;
    write_text(&args.out.join("trace.csv"), &trace.to_csv())?;
    println!(
        "eval over {} episodes: return {:.3} +/- {:.3}, success {:.0}%, mean length {:.1}",
        report.returns.len(),
        report.mean,
        report.std,
        100.0 * report.success_rate,
        report.steps_per_episode
    );
    if let Some(n) = report.normalized_mean {
        println!("normalized score: {n:.1}");
    }
    println!("wrote eval.csv and trace.csv under {}", args.out.display());
    Ok(())
}

// ---------------------------------------------------------------- sweeps --

struct SweepJob {
    /// Key column values for this point, e.g. `["qt-nstep", "0"]`.
    key: Vec<String>,
    cfg: TrainConfig,
    dir: PathBuf,
    /// Also roll out the critic-greedy baseline from the trained critics.
    greedy: bool,
}

struct SweepRow {
    key: Vec<String>,
    report: EvalReport,
    greedy: Option<EvalReport>,
    /// `(step, eval return)` points harvested from the metrics log.
    curve: Vec<(f64, f64)>,
}

fn dir_label(key: &[String]) -> String {
    let mut parts = key.to_vec();
    let seed = parts.pop().unwrap_or_default();
    format!("{}-s{}", parts.join("-"), seed)
}

/// Runs every sweep point (respecting `QT_THREADS`) and returns rows in job
/// order. Each point trains in its own subdirectory with a full artifact
/// set, so any one of them can be reproduced from its manifest.
fn run_sweep(command: &str, jobs: &[SweepJob]) -> Result<Vec<SweepRow>> {
    sweep::run_jobs(jobs, |job| {
        if job.cfg.eval_episodes == 0 {
            return Err(Error::Config("sweeps need eval_episodes >= 1".into()));
        }
        let artifacts = train_run(&job.cfg, &job.dir, command)?;
        let report = artifacts
            .final_eval
            .expect("eval_episodes >= 1 guarantees a final evaluation");
        let greedy = if job.greedy {
            let mut env = build_env(&job.cfg)?;
            Some(evaluate_greedy(
                &mut env,
                &artifacts.state.critics,
                &artifacts.state.state_mean,
                &artifacts.state.state_std,
                GREEDY_ACTIONS,
                job.cfg.eval_episodes,
                job.cfg.seed,
            )?)
        } else {
            None
        };
        let curve = artifacts
            .metrics
            .iter()
            .filter_map(|m| m.eval_return_mean.map(|v| (m.step as f64, v)))
            .collect();
        Ok(SweepRow { key: job.key.clone(), report, greedy, curve })
    })
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
    (mean, var.sqrt())
}

/// `runs.csv`: one row per sweep point, keys first, then the evaluation.
fn runs_csv(key_cols: &[&str], rows: &[(Vec<String>, &EvalReport)]) -> String {
    let mut csv = format!("{},return_mean,return_std,success_rate\n", key_cols.join(","));
    for (key, r) in rows {
        let _ = writeln!(csv, "{},{},{},{}", key.join(","), r.mean, r.std, r.success_rate);
    }
    csv
}

/// Collapses rows over the trailing seed column, preserving first-seen
/// group order: mean and spread of the per-seed means plus mean success.
fn summarize(rows: &[(Vec<String>, &EvalReport)]) -> Vec<(Vec<String>, f64, f64, f64)> {
    let mut groups: Vec<(Vec<String>, Vec<f64>, Vec<f64>)> = Vec::new();
    for (key, r) in rows {
        let group_key = key[..key.len() - 1].to_vec();
        let slot = match groups.iter_mut().find(|(k, _, _)| *k == group_key) {
            Some(s) => s,
            None => {
                groups.push((group_key, Vec::new(), Vec::new()));
                groups.last_mut().unwrap()
            }
        };
        slot.1.push(r.mean);
        slot.2.push(r.success_rate);
    }
    groups
        .into_iter()
        .map(|(k, means, succ)| {
            let (m, s) = mean_std(&means);
            let (p, _) = mean_std(&succ);
            (k, m, s, p)
        })
        .collect()
}

fn summary_csv(key_cols: &[&str], summary: &[(Vec<String>, f64, f64, f64)]) -> String {
    let mut csv = format!("{},return_mean,return_std,success_rate\n", key_cols.join(","));
    for (key, m, s, p) in summary {
        let _ = writeln!(csv, "{},{m},{s},{p}", key.join(","));
    }
    csv
}

/// Writes the merged sweep artifacts plus the sweep-root manifest, and
/// prints one line per summary group.
fn finish_sweep(
    command: &str,
    out: &Path,
    base: &TrainConfig,
    key_cols: &[&str],
    rows: &[(Vec<String>, &EvalReport)],
    chart_name: &str,
    chart: String,
) -> Result<()> {
    let summary = summarize(rows);
    write_text(&out.join("runs.csv"), &runs_csv(key_cols, rows))?;
    write_text(&out.join("summary.csv"), &summary_csv(key_cols, &summary))?;
    write_text(&out.join(chart_name), &chart)?;
    let mut man = RunManifest::new(command, base.clone());
    man.add_file(out, "runs.csv")?;
    man.add_file(out, "summary.csv")?;
    man.add_file(out, chart_name)?;
    man.save(out)?;
    for (key, m, s, p) in &summary {
        println!("{}: return {m:.3} +/- {s:.3}, success {:.0}%", key.join("/"), 100.0 * p);
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn seeded(base: &TrainConfig, seed: u64) -> TrainConfig {
    let mut cfg = base.clone();
    cfg.seed = seed;
    cfg
}

/// The component grid: behavior cloning with and without critics, the
/// sequence policy with the Q pathway disabled everywhere, each pathway
/// alone, and the full method under both critic-target styles.
fn component_variants(base: &TrainConfig) -> Vec<(&'static str, TrainConfig)> {
    let mut bc = base.clone();
    bc.policy_kind = PolicyKind::Mlp;
    bc.eta = 0.0;
    bc.train_with_q = false;
    bc.eval_with_q = false;

    let mut bc_q = base.clone();
    bc_q.policy_kind = PolicyKind::Mlp;
    bc_q.train_with_q = true;
    // The feedforward policy ignores return targets, so candidate search
    // would pick among identical actions; skip it.
    bc_q.eval_with_q = false;

    let mut dt = base.clone();
    dt.eta = 0.0;
    dt.train_with_q = false;
    dt.eval_with_q = false;

    let mut infer_only = base.clone();
    infer_only.train_with_q = false;
    infer_only.eval_with_q = true;

    let mut train_only = base.clone();
    train_only.train_with_q = true;
    train_only.eval_with_q = false;

    let mut one_step = base.clone();
    one_step.train_with_q = true;
    one_step.eval_with_q = true;
    one_step.use_nstep = false;

    let mut full = base.clone();
    full.train_with_q = true;
    full.eval_with_q = true;
    full.use_nstep = true;

    vec![
        ("bc", bc),
        ("bc+q", bc_q),
        ("dt", dt),
        ("qt-infer-only", infer_only),
        ("qt-train-only", train_only),
        ("qt-1step", one_step),
        ("qt-nstep", full),
    ]
}

pub fn ablate_components(args: &RunArgs) -> Result<()> {
    let base = resolve_config(args)?;
    create_dir(&args.out)?;
    let mut jobs = Vec::new();
    for (label, cfg) in component_variants(&base) {
        for r in 0..REPLICATES {
            let key = vec![label.to_string(), (base.seed + r).to_string()];
            jobs.push(SweepJob {
                dir: args.out.join(dir_label(&key)),
                cfg: seeded(&cfg, base.seed + r),
                key,
                greedy: false,
            });
        }
    }
    let rows = run_sweep("ablate-components", &jobs)?;
    let flat: Vec<_> = rows.iter().map(|r| (r.key.clone(), &r.report)).collect();
    let summary = summarize(&flat);
    let bars: Vec<Bar> = summary
        .iter()
        .map(|(k, m, s, _)| Bar { label: k.join("/"), value: *m, spread: *s })
        .collect();
    let chart = plot::bar_chart("component sweep: evaluation return", "return", &bars);
    finish_sweep("ablate-components", &args.out, &base, &["variant", "seed"], &flat, "components.svg", chart)
}

pub fn ablate_stitch(args: &RunArgs) -> Result<()> {
    let mut base = resolve_config(args)?;
    // The whole point of this sweep is composing partial trajectories.
    base.stitch_split = true;
    let mut dt = base.clone();
    dt.eta = 0.0;
    dt.train_with_q = false;
    dt.eval_with_q = false;
    create_dir(&args.out)?;
    let mut jobs = Vec::new();
    for (label, cfg) in [("dt", &dt), ("qt", &base)] {
        for r in 0..REPLICATES {
            let key = vec![label.to_string(), (base.seed + r).to_string()];
            jobs.push(SweepJob {
                dir: args.out.join(dir_label(&key)),
                cfg: seeded(cfg, base.seed + r),
                key,
                greedy: false,
            });
        }
    }
    let rows = run_sweep("ablate-stitch", &jobs)?;
    let flat: Vec<_> = rows.iter().map(|r| (r.key.clone(), &r.report)).collect();
    let bars: Vec<Bar> = summarize(&flat)
        .iter()
        .map(|(k, _, _, p)| Bar { label: k.join("/"), value: *p, spread: 0.0 })
        .collect();
    let chart = plot::bar_chart("stitched data: goal rate", "success rate", &bars);
    finish_sweep("ablate-stitch", &args.out, &base, &["variant", "seed"], &flat, "stitch.svg", chart)
}

pub fn ablate_sparse(args: &RunArgs) -> Result<()> {
    let base = resolve_config(args)?;
    create_dir(&args.out)?;
    let mut jobs = Vec::new();
    for mode in ["dense", "delayed"] {
        let mut cfg = base.clone();
        cfg.reward_mode = mode.to_string();
        for r in 0..REPLICATES {
            let key = vec![mode.to_string(), (base.seed + r).to_string()];
            jobs.push(SweepJob {
                dir: args.out.join(dir_label(&key)),
                cfg: seeded(&cfg, base.seed + r),
                key,
                greedy: true,
            });
        }
    }
    let rows = run_sweep("ablate-sparse", &jobs)?;
    // Expand to (mode, agent, seed) rows: the trained policy next to the
    // critic-greedy baseline that shares its critics.
    let mut flat: Vec<(Vec<String>, &EvalReport)> = Vec::new();
    for row in &rows {
        let (mode, seed) = (&row.key[0], &row.key[1]);
        flat.push((vec![mode.clone(), "qt".into(), seed.clone()], &row.report));
        let greedy = row.greedy.as_ref().expect("sparse sweep jobs request the baseline");
        flat.push((vec![mode.clone(), "critic-greedy".into(), seed.clone()], greedy));
    }
    let bars: Vec<Bar> = summarize(&flat)
        .iter()
        .map(|(k, m, s, _)| Bar { label: k.join("/"), value: *m, spread: *s })
        .collect();
    let chart = plot::bar_chart("reward sparsity: evaluation return", "return", &bars);
    finish_sweep(
        "ablate-sparse",
        &args.out,
        &base,
        &["reward_mode", "agent", "seed"],
        &flat,
        "sparse.svg",
        chart,
    )
}

pub fn ablate_eta(args: &RunArgs) -> Result<()> {
    let base = resolve_config(args)?;
    create_dir(&args.out)?;
    let grid = [0.01, 0.1, 1.0, 2.0, 3.0];
    let mut jobs = Vec::new();
    for mode in ["dense", "delayed"] {
        for eta in grid {
            let mut cfg = base.clone();
            cfg.reward_mode = mode.to_string();
            cfg.eta = eta;
            let key = vec![format!("{eta}"), mode.to_string(), base.seed.to_string()];
            jobs.push(SweepJob { dir: args.out.join(dir_label(&key)), cfg, key, greedy: false });
        }
    }
    let rows = run_sweep("ablate-eta", &jobs)?;
    let flat: Vec<_> = rows.iter().map(|r| (r.key.clone(), &r.report)).collect();
    let series: Vec<Series> = ["dense", "delayed"]
        .iter()
        .map(|mode| Series {
            label: (*mode).to_string(),
            points: flat
                .iter()
                .filter(|(k, _)| k[1] == *mode)
                .map(|(k, r)| (k[0].parse::<f64>().unwrap_or(f64::NAN), r.mean))
                .collect(),
        })
        .collect();
    let chart =
        plot::line_chart("regularization weight sweep", "eta", "evaluation return", &series);
    for mode in ["dense", "delayed"] {
        if let Some((k, r)) = flat
            .iter()
            .filter(|(k, _)| k[1] == mode)
            .max_by(|a, b| a.1.mean.total_cmp(&b.1.mean))
        {
            println!("best eta ({mode}): {} with return {:.3}", k[0], r.mean);
        }
    }
    finish_sweep(
        "ablate-eta",
        &args.out,
        &base,
        &["eta", "reward_mode", "seed"],
        &flat,
        "eta.svg",
        chart,
    )
}

pub fn ablate_context(args: &RunArgs) -> Result<()> {
    let base = resolve_config(args)?;
    create_dir(&args.out)?;
    let grid = [5usize, 10, 20, 40];
    let mut jobs = Vec::new();
    for k in grid {
        let mut cfg = base.clone();
        cfg.context_k = k;
        for r in 0..REPLICATES {
            let key = vec![format!("k{k}"), (base.seed + r).to_string()];
            jobs.push(SweepJob {
                dir: args.out.join(dir_label(&key)),
                cfg: seeded(&cfg, base.seed + r),
                key,
                greedy: false,
            });
        }
    }
    let rows = run_sweep("ablate-context", &jobs)?;
    let flat: Vec<_> = rows.iter().map(|r| (r.key.clone(), &r.report)).collect();
    // Learning curves per window length, averaged over seeds pointwise.
    let mut series = Vec::new();
    for k in grid {
        let label = format!("k{k}");
        let curves: Vec<&Vec<(f64, f64)>> =
            rows.iter().filter(|r| r.key[0] == label).map(|r| &r.curve).collect();
        let shortest = curves.iter().map(|c| c.len()).min().unwrap_or(0);
        let points = (0..shortest)
            .map(|i| {
                let step = curves[0][i].0;
                let mean = curves.iter().map(|c| c[i].1).sum::<f64>() / curves.len() as f64;
                (step, mean)
            })
            .collect();
        series.push(Series { label, points });
    }
    let chart =
        plot::line_chart("context window sweep", "step", "evaluation return", &series);
    finish_sweep(
        "ablate-context",
        &args.out,
        &base,
        &["context_k", "seed"],
        &flat,
        "context.svg",
        chart,
    )
}

// ---------------------------------------------------------------- report --

/// Merges `metrics.csv` from each run directory into one CSV (rows get a
/// leading `run` column) and charts every run's evaluation curve. Missing
/// directories are listed and fail the command.
pub fn report(args: &ReportArgs) -> Result<()> {
    let mut absent = Vec::new();
    let mut found: Vec<(String, String)> = Vec::new();
    for dir in &args.dirs {
        let path = dir.join(METRICS_FILE);
        match std::fs::read_to_string(&path) {
            Ok(text) => found.push((dir.display().to_string(), text)),
            Err(_) => absent.push(path),
        }
    }
    if !absent.is_empty() {
        for path in &absent {
            eprintln!("absent: {}", path.display());
        }
        let path = absent.swap_remove(0);
        let source = std::io::Error::new(
            std::io::ErrorKind::NotFound,
            "run directory has no metrics.csv",
        );
        return Err(Error::File { path, source });
    }
    create_dir(&args.out)?;

    let mut merged = String::new();
    let mut header: Option<String> = None;
    let mut series = Vec::new();
    let mut total_rows = 0usize;
    for (run, text) in &found {
        let mut lines = text.lines();
        let head = lines.next().unwrap_or_default();
        match &header {
            None => {
                header = Some(head.to_string());
                let _ = writeln!(merged, "run,{head}");
            }
            Some(h) if h == head => {}
            Some(h) => {
                return Err(Error::Corrupt(format!(
                    "metrics headers differ: '{run}' has '{head}', expected '{h}'"
                )))
            }
        }
        let cols: Vec<&str> = head.split(',').collect();
        let step_col = cols.iter().position(|c| *c == "step");
        let eval_col = cols.iter().position(|c| *c == "eval_return_mean");
        let mut points = Vec::new();
        for line in lines {
            if line.is_empty() {
                continue;
            }
            let _ = writeln!(merged, "{run},{line}");
            total_rows += 1;
            if let (Some(si), Some(ei)) = (step_col, eval_col) {
                let fields: Vec<&str> = line.split(',').collect();
                let step = fields.get(si).and_then(|v| v.parse::<f64>().ok());
                let ret = fields.get(ei).and_then(|v| v.parse::<f64>().ok());
                if let (Some(s), Some(r)) = (step, ret) {
                    points.push((s, r));
                }
            }
        }
        series.push(Series { label: run.clone(), points });
    }
    write_text(&args.out.join("report.csv"), &merged)?;
    let chart = plot::line_chart("evaluation return by run", "step", "return", &series);
    debug_assert!(plot::check_well_formed(&chart).is_ok());
    write_text(&args.out.join("report.svg"), &chart)?;
    println!(
        "merged {} runs ({total_rows} rows) into {}",
        found.len(),
        args.out.join("report.csv").display()
    );
    Ok(())
}
