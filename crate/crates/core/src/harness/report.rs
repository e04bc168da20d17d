use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{ExperimentConfig, RoundReport, RunStatus};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub round: usize,
    pub labeled_count: usize,
    /// Mean test accuracy over the runs that reached this round.
    pub mean_accuracy: f64,
    pub runs: usize,
}

/// Accuracy-vs-round curve for one (selector, alpha) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub label: String,
    pub alpha: f64,
    pub points: Vec<CurvePoint>,
}

impl Curve {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.points.last().map(|p| p.mean_accuracy)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub curves: Vec<Curve>,
}

impl Summary {
    pub fn curves_csv(&self) -> String {
        let mut out = String::from("label,alpha,round,labeled,mean_accuracy,runs\n");
        for c in &self.curves {
            for p in &c.points {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    c.label, c.alpha, p.round, p.labeled_count, p.mean_accuracy, p.runs
                );
            }
        }
        out
    }

    /// Final accuracy per alpha for each selector, when more than one alpha
    /// value is present.
    pub fn alpha_sweep_csv(&self) -> Option<String> {
        let mut alphas: Vec<f64> = self.curves.iter().map(|c| c.alpha).collect();
        alphas.sort_by(f64::total_cmp);
        alphas.dedup();
        if alphas.len() < 2 {
            return None;
        }
        let mut out = String::from("label,alpha,final_accuracy\n");
        for c in &self.curves {
            let _ = writeln!(out, "{},{},{}", c.label, c.alpha, c.final_accuracy().unwrap_or(f64::NAN));
        }
        Some(out)
    }

    pub fn table(&self) -> String {
        let mut out = format!("{:<14} {:>6} {:>6} {:>8} {:>9}\n", "selector", "alpha", "round", "labeled", "accuracy");
        for c in &self.curves {
            for p in &c.points {
                let _ = writeln!(
                    out,
                    "{:<14} {:>6} {:>6} {:>8} {:>9.4}",
                    c.label, c.alpha, p.round, p.labeled_count, p.mean_accuracy
                );
            }
        }
        out
    }
}

fn run_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    if dir.join("config.txt").is_file() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut runs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("config.txt").is_file())
        .collect();
    runs.sort();
    if runs.is_empty() {
        return Err(Error::Report(format!("no run directories under {}", dir.display())));
    }
    Ok(runs)
}

fn read_run(run: &Path, gaps: &mut Vec<String>) -> Result<(ExperimentConfig, Vec<RoundReport>)> {
    let config = ExperimentConfig::load(run.join("config.txt"))?;
    let status_path = run.join("status.txt");
    let last_round = match fs::read_to_string(&status_path) {
        Ok(text) => match RunStatus::from_line(&text) {
            Some(RunStatus::Completed) => config.rounds,
            Some(RunStatus::PoolExhausted { round }) => round,
            None => return Err(Error::Report(format!("unreadable status in {}", status_path.display()))),
        },
        Err(_) => {
            gaps.push(format!("{}: status.txt", run.display()));
            config.rounds
        }
    };
    let mut reports = Vec::new();
    for round in 0..=last_round {
        let path = run.join(format!("round_{round}.json"));
        match fs::read_to_string(&path) {
            Ok(text) => reports.push(
                serde_json::from_str(&text)
                    .map_err(|e| Error::Report(format!("{}: {e}", path.display())))?,
            ),
            Err(_) => gaps.push(format!("{}: round {round}", run.display())),
        }
    }
    Ok((config, reports))
}

/// Aggregates one run directory, or a directory of run directories, into
/// accuracy-vs-round curves keyed by selector and alpha. Writes
/// `curves.csv` (and `alpha_sweep.csv` for multi-alpha sweeps) into `dir`.
pub fn report(dir: impl AsRef<Path>) -> Result<Summary> {
    let dir = dir.as_ref();
    let mut gaps = Vec::new();
    let mut grouped: BTreeMap<(String, u64), Vec<Vec<RoundReport>>> = BTreeMap::new();
    for run in run_dirs(dir)? {
        let (config, reports) = read_run(&run, &mut gaps)?;
        grouped
            .entry((config.label(), config.alpha.to_bits()))
            .or_default()
            .push(reports);
    }
    if !gaps.is_empty() {
        return Err(Error::Report(format!("missing round files: {}", gaps.join(", "))));
    }
    let curves: Vec<Curve> = grouped
        .into_iter()
        .map(|((label, alpha), runs)| {
            let longest = runs.iter().map(Vec::len).max().unwrap_or(0);
            let points = (0..longest)
                .map(|r| {
                    let reached: Vec<&RoundReport> = runs.iter().filter_map(|rs| rs.get(r)).collect();
                    CurvePoint {
                        round: r,
                        labeled_count: reached[0].labeled_count,
                        mean_accuracy: reached.iter().map(|x| x.test_accuracy).sum::<f64>() / reached.len() as f64,
                        runs: reached.len(),
                    }
                })
                .collect();
            Curve {
                label,
                alpha: f64::from_bits(alpha),
                points,
            }
        })
        .collect();
    let summary = Summary { curves };
    let curves_path = dir.join("curves.csv");
    fs::write(&curves_path, summary.curves_csv()).map_err(|e| Error::io(&curves_path, e))?;
    if let Some(sweep) = summary.alpha_sweep_csv() {
        let path = dir.join("alpha_sweep.csv");
        fs::write(&path, sweep).map_err(|e| Error::io(&path, e))?;
    }
    Ok(summary)
}
