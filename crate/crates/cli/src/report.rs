//! Summary figures and tables rendered from the artifacts of earlier commands.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use dcmil_survival::plot::{heatmap_svg, km_svg};
use dcmil_survival::km_estimate;
use dcmil_trainer::{Result, TrainError};

use crate::Context;

fn records(path: &Path) -> Result<Vec<csv::StringRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.records().collect::<std::result::Result<_, _>>()?)
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, k: usize, path: &Path) -> Result<T> {
    rec.get(k)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| TrainError::Invalid(format!("{}: malformed column {k} in `{}`", path.display(), rec.as_slice())))
}

/// Markdown table of per-fold and aggregate C-index and logrank p-values.
pub fn ci_table(metrics: &Path) -> Result<String> {
    let mut out = String::from("| fold | dataset | C-index | logrank p | patients |\n|---|---|---|---|---|\n");
    let rows = records(metrics)?;
    let get = |label: &str| rows.iter().find(|r| r.get(0) == Some(label));
    for r in &rows {
        if r.get(0).is_some_and(|f| f.parse::<usize>().is_ok()) {
            let _ = writeln!(out, "| {} | {} | {} | {} | {} |", &r[0], &r[1], &r[2], &r[3], &r[4]);
        }
    }
    if let (Some(m), Some(s)) = (get("mean"), get("std")) {
        let _ = writeln!(out, "| mean +/- std | {} | {} +/- {} | {} | {} |", &m[1], &m[2], &s[2], &m[3], &m[4]);
    }
    if let Some(p) = get("pooled") {
        let _ = writeln!(out, "| pooled | {} | | {} | {} |", &p[1], &p[3], &p[4]);
    }
    Ok(out)
}

fn km_from_risks(path: &Path) -> Result<String> {
    let mut groups: BTreeMap<String, (Vec<f64>, Vec<bool>)> = BTreeMap::new();
    let mut x_max: f64 = 1.0;
    for rec in records(path)? {
        let t: f64 = field(&rec, 3, path)?;
        let e: u8 = field(&rec, 4, path)?;
        let g = groups.entry(rec.get(5).unwrap_or("").to_string()).or_default();
        g.0.push(t);
        g.1.push(e == 1);
        x_max = x_max.max(t);
    }
    let curves = groups
        .iter()
        .map(|(name, (t, e))| Ok((format!("{name} risk"), km_estimate(t, e)?)))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<(&str, _)> = curves.iter().map(|(n, c)| (n.as_str(), c)).collect();
    Ok(km_svg("Held-out Kaplan-Meier by predicted risk group", &refs, x_max))
}

/// Rows are patients, columns their instances' selector scores.
fn indicator_heatmap(path: &Path, fold: usize) -> Result<String> {
    let mut grid: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for rec in records(path)? {
        let score: f64 = field(&rec, 2, path)?;
        grid.entry(rec[0].to_string()).or_default().push(score);
    }
    let rows: Vec<Vec<f64>> = grid.into_values().collect();
    Ok(heatmap_svg(&format!("Fold {fold} soft-bag selector scores (rows: patients)"), &rows))
}

pub fn report(ctx: &Context) -> Result<()> {
    let metrics = ctx.out.join("metrics.csv");
    let risks = ctx.out.join("exports/risks.csv");
    for (p, what) in [(&metrics, "metrics"), (&risks, "held-out risks")] {
        if !p.is_file() {
            return Err(TrainError::Missing(format!("{what} ({}); run `evaluate` first", p.display())));
        }
    }
    let dir = ctx.out.join("report");
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("ci_table.md"), ci_table(&metrics)?)?;
    fs::write(dir.join("km.svg"), km_from_risks(&risks)?)?;
    for fold in 0..ctx.cfg.folds {
        let ind = ctx.out.join(format!("exports/indicators_fold{fold}.csv"));
        if ind.is_file() {
            fs::write(dir.join(format!("indicators_fold{fold}.svg")), indicator_heatmap(&ind, fold)?)?;
        }
    }
    log::info!("report written to {}", dir.display());
    Ok(())
}
