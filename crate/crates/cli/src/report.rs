//! `report` subcommand: cross-run aggregation of loss logs and evaluation
//! summaries into combined CSVs and SVG plots.

use std::path::{Path, PathBuf};

use triseg_core::{Error, Result};

use crate::plots;

struct RunData {
    name: String,
    /// `(iteration, total)` pairs from loss.csv.
    losses: Vec<(f64, f64)>,
    /// `(label, dice_mean)` rows from summary.csv, when present.
    summary: Vec<(String, f64)>,
}

fn read_loss_csv(path: &Path) -> Result<Vec<(f64, f64)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in text.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() < 3 {
            continue;
        }
        let it: f64 = cols[0].parse().map_err(|_| bad_row(path, line))?;
        let total: f64 = cols[2].parse().map_err(|_| bad_row(path, line))?;
        out.push((it, total));
    }
    Ok(out)
}

fn bad_row(path: &Path, line: &str) -> Error {
    Error::Runtime(format!("malformed row in {}: {line}", path.display()))
}

fn read_summary_csv(path: &Path) -> Result<Vec<(String, f64)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in text.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() < 2 {
            continue;
        }
        let dice: f64 = cols[1].parse().map_err(|_| bad_row(path, line))?;
        out.push((cols[0].to_string(), dice));
    }
    Ok(out)
}

fn find_summary(run: &Path) -> Option<PathBuf> {
    let direct = run.join("summary.csv");
    if direct.exists() {
        return Some(direct);
    }
    // eval subdirectories produced by `triseg eval --out`
    let mut candidates: Vec<PathBuf> = std::fs::read_dir(run)
        .ok()?
        .flatten()
        .map(|e| e.path().join("summary.csv"))
        .filter(|p| p.exists())
        .collect();
    candidates.sort();
    candidates.into_iter().next()
}

pub fn cmd_report(runs: &[PathBuf], out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut data = Vec::new();
    for run in runs {
        let loss_path = run.join("loss.csv");
        if !loss_path.exists() {
            return Err(Error::Runtime(format!(
                "{} has no loss.csv",
                run.display()
            )));
        }
        let name = run
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| run.display().to_string());
        let summary = match find_summary(run) {
            Some(p) => read_summary_csv(&p)?,
            None => Vec::new(),
        };
        data.push(RunData {
            name,
            losses: read_loss_csv(&loss_path)?,
            summary,
        });
    }

    // combined losses
    let mut combined = String::from("run,iteration,total\n");
    for run in &data {
        for (it, total) in &run.losses {
            combined.push_str(&format!("{},{it},{total}\n", run.name));
        }
    }
    let combined_path = out.join("combined_losses.csv");
    std::fs::write(&combined_path, combined).map_err(|e| Error::io(&combined_path, e))?;

    // combined summaries (when any run was evaluated)
    let with_summary: Vec<&RunData> = data.iter().filter(|r| !r.summary.is_empty()).collect();
    if !with_summary.is_empty() {
        let mut s = String::from("run,label,dice_mean\n");
        for run in &with_summary {
            for (label, dice) in &run.summary {
                s.push_str(&format!("{},{label},{dice}\n", run.name));
            }
        }
        let p = out.join("combined_summaries.csv");
        std::fs::write(&p, s).map_err(|e| Error::io(&p, e))?;

        let labels: Vec<String> = with_summary[0].summary.iter().map(|(l, _)| l.clone()).collect();
        let series: Vec<(String, Vec<f64>)> = with_summary
            .iter()
            .map(|r| {
                let vals = labels
                    .iter()
                    .map(|l| {
                        r.summary
                            .iter()
                            .find(|(rl, _)| rl == l)
                            .map(|(_, d)| *d)
                            .unwrap_or(0.0)
                    })
                    .collect();
                (r.name.clone(), vals)
            })
            .collect();
        plots::bar_chart("per-class Dice", &labels, &series, &out.join("dice_bars.svg"))?;
    }

    let series: Vec<(String, Vec<(f64, f64)>)> = data
        .iter()
        .map(|r| (r.name.clone(), r.losses.clone()))
        .collect();
    plots::line_chart("total loss", &series, &out.join("loss_curves.svg"))?;
    println!(
        "report over {} runs written to {}",
        data.len(),
        out.display()
    );
    Ok(())
}
