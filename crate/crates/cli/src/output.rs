//! JSON and CSV writers for run outputs.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;
use spj_core::pipeline::{RunArtifacts, RunReport, SimulationReport};

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))
}

fn name_of(names: Option<&[String]>, j: usize) -> String {
    names.and_then(|n| n.get(j).cloned()).unwrap_or_else(|| j.to_string())
}

/// Writes `report.json`, `selection.csv`, `posterior_summary.csv`,
/// `intervals.csv` and (when built) `ellipsoid.json` under `dir`.
pub fn write_run(dir: &Path, report: &RunReport, names: Option<&[String]>) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_json(&dir.join("report.json"), report)?;

    let sel = &report.selection;
    let mut w = csv_writer(&dir.join("selection.csv"))?;
    w.write_record(["j", "name", "inclusion_prop", "selected", "point_estimate"])?;
    for (j, prop) in sel.inclusion_prop.iter().enumerate() {
        let selected = sel.selected.binary_search(&j).is_ok();
        w.write_record([
            j.to_string(),
            name_of(names, j),
            prop.to_string(),
            u8::from(selected).to_string(),
            sel.point_estimate[j].to_string(),
        ])?;
    }
    w.flush()?;

    let mut w = csv_writer(&dir.join("posterior_summary.csv"))?;
    w.write_record(["j", "name", "ridge_mean", "projected_mean", "inclusion_prop", "point_estimate"])?;
    for c in &report.coordinates {
        w.write_record([
            c.j.to_string(),
            name_of(names, c.j),
            c.ridge_mean.to_string(),
            c.projected_mean.to_string(),
            c.inclusion_prop.to_string(),
            c.point_estimate.to_string(),
        ])?;
    }
    w.flush()?;

    write_intervals(&dir.join("intervals.csv"), report, names)?;
    if let Some(e) = &report.ellipsoid {
        write_json(&dir.join("ellipsoid.json"), e)?;
    }
    Ok(())
}

pub fn write_intervals(path: &Path, report: &RunReport, names: Option<&[String]>) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record([
        "j",
        "name",
        "lower",
        "upper",
        "length",
        "level",
        "kind",
        "draw_mean",
        "draw_var",
        "sigma_jj_over_n",
        "reference_half_width",
        "few_draws",
    ])?;
    for d in &report.intervals {
        let i = &d.interval;
        let kind = serde_json::to_value(i.kind)?;
        w.write_record([
            i.j.to_string(),
            name_of(names, i.j),
            i.lower.to_string(),
            i.upper.to_string(),
            i.length().to_string(),
            i.level.to_string(),
            kind.as_str().unwrap_or_default().to_owned(),
            d.draw_mean.to_string(),
            d.draw_var.to_string(),
            d.sigma_jj_over_n.to_string(),
            i.reference_half_width.map(|h| h.to_string()).unwrap_or_default(),
            u8::from(i.few_draws).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One row per draw: index, σ*, then the dense projected coefficients.
pub fn write_projected_draws(path: &Path, artifacts: &RunArtifacts) -> Result<()> {
    let mut w = csv_writer(path)?;
    let p = artifacts.projected.p();
    let mut header = vec!["draw".to_owned(), "sigma_star".to_owned()];
    header.extend((0..p).map(|j| format!("theta_{j}")));
    w.write_record(&header)?;
    for (d, (draw, sigma)) in artifacts.projected.draws.iter().zip(&artifacts.sigma_star).enumerate() {
        let mut row = vec![d.to_string(), sigma.to_string()];
        row.extend(draw.to_dense().iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// One row per draw, one column per debiased coordinate.
pub fn write_debiased_draws(path: &Path, artifacts: &RunArtifacts) -> Result<()> {
    let mut w = csv_writer(path)?;
    let mut header = vec!["draw".to_owned()];
    header.extend(artifacts.debiased_coords.iter().map(|j| format!("theta_{j}")));
    w.write_record(&header)?;
    for (d, row) in artifacts.debiased.iter().enumerate() {
        let mut rec = vec![d.to_string()];
        rec.extend(row.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `simulation.json`, `summary.csv` (mean and sd per metric) and
/// `replications.csv` (one row per replication).
pub fn write_simulation(dir: &Path, sim: &SimulationReport) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_json(&dir.join("simulation.json"), sim)?;

    let mut w = csv_writer(&dir.join("summary.csv"))?;
    w.write_record(["metric", "mean", "sd", "count"])?;
    let s = &sim.summary;
    let rows = [
        ("mse", s.mse),
        ("tpr", s.tpr),
        ("fdp", s.fdp),
        ("mcc", s.mcc),
        ("signal_coverage", s.signal_coverage),
        ("noise_coverage", s.noise_coverage),
        ("signal_length", s.signal_length),
        ("noise_length", s.noise_length),
        ("true_sign_match_prob", sim.true_sign_match_prob),
        ("lambda", sim.lambda),
    ];
    for (name, v) in rows {
        if let Some(m) = v {
            w.write_record([name.to_owned(), m.mean.to_string(), m.sd.to_string(), m.count.to_string()])?;
        }
    }
    let single = [
        ("pooled_signal_coverage", s.pooled_signal_coverage),
        ("pooled_noise_coverage", s.pooled_noise_coverage),
        ("ellipsoid_coverage", sim.ellipsoid_coverage),
    ];
    for (name, v) in single {
        if let Some(x) = v {
            w.write_record([name.to_owned(), x.to_string(), String::new(), String::new()])?;
        }
    }
    w.flush()?;

    let mut w = csv_writer(&dir.join("replications.csv"))?;
    w.write_record([
        "index",
        "seed",
        "lambda",
        "selected",
        "tpr",
        "fdp",
        "mcc",
        "mse",
        "signal_coverage",
        "noise_coverage",
        "ellipsoid_covers_truth",
        "error",
    ])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for o in &sim.outcomes {
        let mut rec = vec![o.index.to_string(), o.seed.to_string()];
        match &o.report {
            Some(r) => {
                let m = r.metrics.as_ref();
                rec.push(r.lambda.lambda.to_string());
                rec.push(r.selection.selected.len().to_string());
                rec.push(opt(m.map(|m| m.tpr)));
                rec.push(opt(m.map(|m| m.fdp)));
                rec.push(opt(m.map(|m| m.mcc)));
                rec.push(opt(m.map(|m| m.mse)));
                rec.push(opt(m.and_then(|m| m.signal_coverage)));
                rec.push(opt(m.and_then(|m| m.noise_coverage)));
                rec.push(r.ellipsoid_covers_truth.map(|c| u8::from(c).to_string()).unwrap_or_default());
                rec.push(String::new());
            }
            None => {
                rec.extend(std::iter::repeat_n(String::new(), 9));
                rec.push(o.error.clone().unwrap_or_default());
            }
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
