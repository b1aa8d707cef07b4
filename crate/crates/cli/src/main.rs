mod args;
mod config;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::Parser;
use serde_json::Value;
use spj_core::debias::{read_nodewise, write_nodewise};
use spj_core::design::{generate, read_csv, read_csv_raw, CsvOptions};
use spj_core::pipeline::{
    run_distributed_demo, run_fit_stats, run_fit_with, run_simulate, RunArtifacts, RunInputs, RunReport,
    SimulationReport,
};
use spj_core::stats::{compute_shard_stats_capped, merge_merged, read_merged, write_merged, DEFAULT_MAX_P};
use spj_core::{MergedStats, NodewiseFit, RunConfig, SpjError};

use args::{Cli, Command, CsvFlags, DebiasArgs, FitArgs, MergeStatsArgs, ReportArgs, ShardStatsArgs, SimulateArgs};
use config::{build_run_config, build_sim_config, ConfigError, FileConfig};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 1 for configuration problems, 2 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() || matches!(cause.downcast_ref::<SpjError>(), Some(SpjError::Config(_))) {
            return 1;
        }
    }
    2
}

fn run(cli: Cli) -> Result<()> {
    let file = FileConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Simulate(a) => simulate(a, file),
        Command::Fit(a) => fit(a, file),
        Command::ShardStats(a) => shard_stats(a, file),
        Command::MergeStats(a) => merge_stats(a, file),
        Command::Debias(a) => debias(a, file),
        Command::Report(a) => report(a, file),
    }
}

fn csv_options(flags: &CsvFlags, center: bool) -> CsvOptions {
    CsvOptions {
        has_header: !flags.no_header,
        response: flags.response.clone(),
        center,
    }
}

fn simulate(args: SimulateArgs, file: FileConfig) -> Result<()> {
    file.check_mode("simulate")?;
    let cfg = build_run_config(&args.run, &file)?;
    let sim = build_sim_config(&args, &file, cfg.seed)?;
    let out_dir = file.paths.out_dir.clone().or(args.out_dir);
    if let Some(shards) = file.shards.or(args.shards) {
        let dir = out_dir.ok_or_else(|| ConfigError::new("--shards needs --out-dir for the shard files"))?;
        let (data, _) = generate(&sim)?;
        let rep = run_distributed_demo(&data, shards, &cfg, &dir)?;
        output::write_json(&dir.join("distributed.json"), &rep)?;
        output::write_run(&dir, &rep.report, None)?;
        let d = &rep.diffs;
        println!(
            "{} shards: stats rel diff {:.2e}, projected mean {:.2e}, intervals {:.2e}, selection identical: {}",
            rep.shards, d.xtx.max(d.xty), d.projected_mean, d.interval_bounds, d.selection_identical
        );
        println!(
            "shard compute {:.3}s (sum), monolithic {:.3}s, merge {:.3}s",
            rep.shard_compute_secs, rep.monolithic_compute_secs, rep.merge_secs
        );
        return Ok(());
    }
    let reps = file.replications.or(args.reps).unwrap_or(1);
    let report = run_simulate(&sim, &cfg, reps)?;
    match out_dir {
        Some(dir) => {
            output::write_simulation(&dir, &report)?;
            print_simulation(&report);
        }
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    Ok(())
}

enum Source {
    Csv(PathBuf),
    Stats(PathBuf),
}

fn source(input: Option<PathBuf>, stats: Option<PathBuf>, file: &FileConfig) -> Result<Source> {
    let input = file.paths.input.clone().or(input);
    let stats = file.paths.stats.clone().or(stats);
    match (input, stats) {
        (Some(i), None) => Ok(Source::Csv(i)),
        (None, Some(s)) => Ok(Source::Stats(s)),
        (Some(_), Some(_)) => Err(ConfigError::new("give either --in or --stats, not both").into()),
        (None, None) => Err(ConfigError::new("an input is required: --in data.csv or --stats merged.spstats").into()),
    }
}

/// Loads a nodewise cache when the file exists.
fn load_cache(path: Option<&Path>, schema: u64) -> Result<Option<Vec<NodewiseFit>>> {
    match path {
        Some(p) if p.exists() => Ok(Some(
            read_nodewise(p, schema).with_context(|| format!("reading nodewise cache {}", p.display()))?,
        )),
        _ => Ok(None),
    }
}

struct Fitted {
    report: RunReport,
    artifacts: RunArtifacts,
    names: Option<Vec<String>>,
    schema: u64,
}

fn fit_source(src: &Source, csv: &CsvFlags, center: bool, cfg: &RunConfig, cache: Option<&Path>) -> Result<Fitted> {
    match src {
        Source::Csv(path) => {
            let data = read_csv(path, &csv_options(csv, center)).with_context(|| format!("reading {}", path.display()))?;
            let schema = data.schema_hash();
            let inputs = RunInputs {
                nodewise: load_cache(cache, schema)?,
                ..Default::default()
            };
            let (report, artifacts) = run_fit_with(&data, cfg, inputs)?;
            Ok(Fitted {
                report,
                artifacts,
                names: data.column_names,
                schema,
            })
        }
        Source::Stats(path) => {
            if center {
                return Err(ConfigError::new("--center is not available for statistics input").into());
            }
            let raw = read_merged(path).with_context(|| format!("reading {}", path.display()))?;
            let (stats, _) = raw.standardized()?;
            let inputs = RunInputs {
                nodewise: load_cache(cache, stats.schema_hash)?,
                ..Default::default()
            };
            let (report, artifacts) = run_fit_stats(&stats, cfg, inputs)?;
            Ok(Fitted {
                report,
                artifacts,
                names: None,
                schema: stats.schema_hash,
            })
        }
    }
}

fn save_cache(path: Option<&Path>, fitted: &Fitted) -> Result<()> {
    if let Some(p) = path {
        if !p.exists() && !fitted.artifacts.nodewise.is_empty() {
            write_nodewise(&fitted.artifacts.nodewise, fitted.schema, p)
                .with_context(|| format!("writing nodewise cache {}", p.display()))?;
        }
    }
    Ok(())
}

fn fit(args: FitArgs, file: FileConfig) -> Result<()> {
    file.check_mode("fit")?;
    let cfg = build_run_config(&args.run, &file)?;
    let src = source(args.input, args.stats, &file)?;
    let cache = file.paths.nodewise.clone().or(args.nodewise);
    let fitted = fit_source(&src, &args.csv, args.center, &cfg, cache.as_deref())?;
    save_cache(cache.as_deref(), &fitted)?;
    match file.paths.out_dir.clone().or(args.out_dir) {
        Some(dir) => {
            output::write_run(&dir, &fitted.report, fitted.names.as_deref())?;
            if args.export_draws {
                output::write_projected_draws(&dir.join("draws.csv"), &fitted.artifacts)?;
            }
            print_run(&fitted.report, fitted.names.as_deref());
        }
        None => println!("{}", serde_json::to_string_pretty(&fitted.report)?),
    }
    Ok(())
}

fn debias(args: DebiasArgs, file: FileConfig) -> Result<()> {
    file.check_mode("debias")?;
    let mut cfg = build_run_config(&args.run, &file)?;
    if !cfg.debias {
        return Err(ConfigError::new("the debias command cannot run with debiasing disabled").into());
    }
    cfg.debias = true;
    let src = source(args.input, args.stats, &file)?;
    let cache = file.paths.nodewise.clone().or(args.cache);
    let fitted = fit_source(&src, &args.csv, false, &cfg, cache.as_deref())?;
    save_cache(cache.as_deref(), &fitted)?;
    match file.paths.out_dir.clone().or(args.out_dir) {
        Some(dir) => {
            std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            output::write_json(&dir.join("report.json"), &fitted.report)?;
            output::write_intervals(&dir.join("intervals.csv"), &fitted.report, fitted.names.as_deref())?;
            if args.export_draws {
                output::write_debiased_draws(&dir.join("debiased_draws.csv"), &fitted.artifacts)?;
            }
            print_intervals(&fitted.report, fitted.names.as_deref());
        }
        None => println!("{}", serde_json::to_string_pretty(&fitted.report.intervals)?),
    }
    Ok(())
}

fn shard_stats(args: ShardStatsArgs, file: FileConfig) -> Result<()> {
    file.check_mode("shard-stats")?;
    let table = read_csv_raw(&args.input, &csv_options(&args.csv, false))
        .with_context(|| format!("reading {}", args.input.display()))?;
    let stats = compute_shard_stats_capped(
        &table.x,
        &table.y,
        table.schema_hash(),
        args.max_p.unwrap_or(DEFAULT_MAX_P),
    )?;
    let merged: MergedStats = stats.into();
    write_merged(&merged, &args.out).with_context(|| format!("writing {}", args.out.display()))?;
    println!(
        "{}: n = {}, p = {}, schema {:#018x}",
        args.out.display(),
        merged.n,
        merged.p,
        merged.schema_hash
    );
    Ok(())
}

fn merge_stats(args: MergeStatsArgs, file: FileConfig) -> Result<()> {
    file.check_mode("merge-stats")?;
    let parts = args
        .inputs
        .iter()
        .map(|p| read_merged(p).with_context(|| format!("reading {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let merged = merge_merged(&parts).map_err(|e| match e {
        SpjError::ShardMismatch { index, reason } => {
            anyhow::anyhow!("{}: {reason}", args.inputs[index].display())
        }
        other => other.into(),
    })?;
    write_merged(&merged, &args.out).with_context(|| format!("writing {}", args.out.display()))?;
    println!(
        "{}: n = {}, p = {}, shards = {}",
        args.out.display(),
        merged.n,
        merged.p,
        merged.shard_count
    );
    Ok(())
}

fn report(args: ReportArgs, file: FileConfig) -> Result<()> {
    file.check_mode("report")?;
    let text = std::fs::read_to_string(&args.input).with_context(|| format!("reading {}", args.input.display()))?;
    let value: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", args.input.display()))?;
    if value.get("outcomes").is_some() {
        let sim: SimulationReport = serde_json::from_value(value)?;
        print_simulation(&sim);
    } else if value.get("diffs").is_some() {
        let rep: RunReport = serde_json::from_value(value["report"].clone())?;
        println!("distributed run, shards = {}", value["shards"]);
        println!("diffs: {}", value["diffs"]);
        print_run(&rep, None);
    } else if value.get("selection").is_some() {
        let rep: RunReport = serde_json::from_value(value)?;
        print_run(&rep, None);
        print_intervals(&rep, None);
    } else {
        bail!("{} is not a run, distributed or simulation report", args.input.display());
    }
    Ok(())
}

fn label(names: Option<&[String]>, j: usize) -> String {
    names.and_then(|n| n.get(j).cloned()).unwrap_or_else(|| j.to_string())
}

fn print_run(rep: &RunReport, names: Option<&[String]>) {
    println!("n = {}, p = {}, shards = {}", rep.n, rep.p, rep.shard_count);
    println!(
        "lambda = {:.4} (projection {:.4}), sigma_tilde^2 = {:.4}",
        rep.lambda.lambda, rep.lambda.lambda_projection, rep.variance.sigma_tilde_sq
    );
    let sel: Vec<String> = rep.selection.selected.iter().map(|&j| label(names, j)).collect();
    println!("selected ({}): [{}]", sel.len(), sel.join(", "));
    println!(
        "top model frequency {:.3}, sign match {:.3}",
        rep.selection.top_model_frequency(),
        rep.selection.sign_match_prob
    );
    if let Some(e) = &rep.ellipsoid {
        println!("ellipsoid on {} coordinates, radius {:.4}", e.s_hat.len(), e.radius);
    }
    if let Some(m) = &rep.metrics {
        println!("TPR {:.3}  FDP {:.3}  MCC {:.3}  MSE {:.4}", m.tpr, m.fdp, m.mcc, m.mse);
    }
    for w in &rep.warnings {
        println!("warning: {w}");
    }
}

fn print_intervals(rep: &RunReport, names: Option<&[String]>) {
    for d in &rep.intervals {
        let i = &d.interval;
        println!("  {:>8}  [{:+.4}, {:+.4}]", label(names, i.j), i.lower, i.upper);
    }
}

fn print_simulation(sim: &SimulationReport) {
    println!(
        "replications {} (failures {}), n = {}, p = {}, s0 = {}, rho = {}",
        sim.replications, sim.failures, sim.sim.n, sim.sim.p, sim.sim.s0, sim.sim.rho
    );
    let s = &sim.summary;
    let show = |name: &str, v: Option<spj_core::inference::MeanSd>| {
        if let Some(m) = v {
            println!("  {name:<16} {:.4} ({:.4})", m.mean, m.sd);
        }
    };
    show("MSE", s.mse);
    show("TPR", s.tpr);
    show("FDP", s.fdp);
    show("MCC", s.mcc);
    show("signal length", s.signal_length);
    show("noise length", s.noise_length);
    if let Some(c) = s.pooled_signal_coverage {
        println!("  {:<16} {c:.4}", "signal coverage");
    }
    if let Some(c) = s.pooled_noise_coverage {
        println!("  {:<16} {c:.4}", "noise coverage");
    }
    if let Some(c) = sim.ellipsoid_coverage {
        println!("  {:<16} {c:.4}", "ellipsoid cover");
    }
}
