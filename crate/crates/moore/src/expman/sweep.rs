//! Sweeps: run a config across one axis and the seed list, aggregate per
//! evaluation step with a normal-approximation 95% confidence interval.

use std::path::{Path, PathBuf};

use super::config::{ExperimentConfig, HeadChoice, ReprChoice};
use super::runner::{run_many, EarlyStop, RunArtifacts};
use super::ExpError;

#[derive(Debug, Clone)]
pub enum SweepAxis {
    K(Vec<usize>),
    Representation(Vec<ReprChoice>),
    HeadMode(Vec<HeadChoice>),
    /// Expert-order permutations; `None` entries mean identity.
    Permutation(Vec<Vec<usize>>),
}

impl SweepAxis {
    pub fn cells(&self, base: &ExperimentConfig) -> Result<Vec<(String, ExperimentConfig)>, ExpError> {
        let mut cells = Vec::new();
        match self {
            SweepAxis::K(ks) => {
                if ks.is_empty() {
                    return Err(ExpError::Config("empty sweep axis".into()));
                }
                for &k in ks {
                    let mut cfg = base.clone();
                    cfg.k = k;
                    cells.push((format!("k={k}"), cfg));
                }
            }
            SweepAxis::Representation(reprs) => {
                if reprs.is_empty() {
                    return Err(ExpError::Config("empty sweep axis".into()));
                }
                for &r in reprs {
                    let mut cfg = base.clone();
                    cfg.representation = r;
                    cells.push((format!("representation={r:?}").to_lowercase(), cfg));
                }
            }
            SweepAxis::HeadMode(modes) => {
                if modes.is_empty() {
                    return Err(ExpError::Config("empty sweep axis".into()));
                }
                for &m in modes {
                    let mut cfg = base.clone();
                    cfg.head_mode = m;
                    cells.push((format!("head={m:?}").to_lowercase(), cfg));
                }
            }
            SweepAxis::Permutation(perms) => {
                if perms.is_empty() {
                    return Err(ExpError::Config("empty sweep axis".into()));
                }
                for p in perms {
                    let mut cfg = base.clone();
                    cfg.expert_permutation = Some(p.clone());
                    let label = p.iter().map(|i| i.to_string()).collect::<String>();
                    cells.push((format!("perm={label}"), cfg));
                }
            }
        }
        for (_, cfg) in &cells {
            cfg.validate()?;
        }
        Ok(cells)
    }
}

#[derive(Debug, Clone)]
pub struct AggregateRow {
    pub cell: String,
    pub step: u64,
    pub mean: f64,
    pub ci95_lo: f64,
    pub ci95_hi: f64,
}

#[derive(Debug)]
pub struct SweepReport {
    pub rows: Vec<AggregateRow>,
    pub csv_path: PathBuf,
    pub runs: Vec<RunArtifacts>,
}

/// Mean and normal-approximation 95% interval over seeds.
pub fn mean_ci95(values: &[f64]) -> (f64, f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, mean, mean);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    let half = 1.96 * (var / n).sqrt();
    (mean, mean - half, mean + half)
}

/// Aggregates one cell's runs: per evaluation index, the mean avg_return
/// across seeds with its interval.
fn aggregate_cell(cell: &str, runs: &[&RunArtifacts]) -> Vec<AggregateRow> {
    let n_evals = runs.iter().map(|r| r.records.len()).min().unwrap_or(0);
    (0..n_evals)
        .map(|i| {
            let step = runs[0].records[i].step;
            let values: Vec<f64> = runs.iter().map(|r| r.records[i].avg_return).collect();
            let (mean, lo, hi) = mean_ci95(&values);
            AggregateRow {
                cell: cell.to_string(),
                step,
                mean,
                ci95_lo: lo,
                ci95_hi: hi,
            }
        })
        .collect()
}

pub fn write_csv(path: &Path, rows: &[AggregateRow]) -> Result<(), ExpError> {
    let mut out = String::from("cell,step,mean,ci95_lo,ci95_hi\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.cell, r.step, r.mean, r.ci95_lo, r.ci95_hi
        ));
    }
    std::fs::write(path, out).map_err(|e| ExpError::Io(e.to_string()))
}

/// Runs every cell of the axis across the config's seed list.
pub fn sweep(
    base: &ExperimentConfig,
    axis: &SweepAxis,
    out_dir: &Path,
    early_stop: EarlyStop,
) -> Result<SweepReport, ExpError> {
    std::fs::create_dir_all(out_dir).map_err(|e| ExpError::Io(e.to_string()))?;
    let cells = axis.cells(base)?;
    let mut jobs = Vec::new();
    let mut labels = Vec::new();
    for (label, cfg) in &cells {
        for &seed in &cfg.seeds {
            let cell_dir = out_dir.join(label.replace('=', "_"));
            jobs.push((cfg.clone(), seed, cell_dir, early_stop));
            labels.push(label.clone());
        }
    }
    let results = run_many(jobs);
    let mut runs = Vec::new();
    for r in results {
        runs.push(r?);
    }
    let mut rows = Vec::new();
    for (label, _) in &cells {
        let cell_runs: Vec<&RunArtifacts> = runs
            .iter()
            .zip(&labels)
            .filter(|(_, l)| *l == label)
            .map(|(r, _)| r)
            .collect();
        rows.extend(aggregate_cell(label, &cell_runs));
    }
    let csv_path = out_dir.join("aggregate.csv");
    write_csv(&csv_path, &rows)?;
    Ok(SweepReport {
        rows,
        csv_path,
        runs,
    })
}

/// Final-evaluation comparison table across cells, one line per cell.
pub fn comparison_table(report: &SweepReport) -> String {
    let mut cells: Vec<&str> = report.rows.iter().map(|r| r.cell.as_str()).collect();
    cells.dedup();
    let mut out = String::from("cell | final_mean | ci95_lo | ci95_hi\n");
    for cell in cells {
        if let Some(last) = report.rows.iter().rfind(|r| r.cell == cell) {
            out.push_str(&format!(
                "{} | {:.4} | {:.4} | {:.4}\n",
                cell, last.mean, last.ci95_lo, last.ci95_hi
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ci_over_seeds() {
        let (mean, lo, hi) = mean_ci95(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(mean, 3.0);
        assert!(lo < 3.0 && hi > 3.0);
        assert!((hi - mean - 1.96 * (2.5f64 / 5.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn axis_cells_enumerate() {
        let base = ExperimentConfig::defaults_for("grid_mt3").unwrap();
        let cells = SweepAxis::K(vec![2, 4]).cells(&base).unwrap();
        assert_eq!(cells.len(), 2);
        assert_eq!(cells[0].1.k, 2);
        assert_eq!(cells[1].1.k, 4);
        let cells = SweepAxis::Representation(vec![ReprChoice::Moore, ReprChoice::Moe])
            .cells(&base)
            .unwrap();
        assert_eq!(cells.len(), 2);
        assert!(SweepAxis::K(vec![]).cells(&base).is_err());
    }

    #[test]
    fn permutation_axis_mirrors_initial_expert_study() {
        let mut base = ExperimentConfig::defaults_for("grid_mt5").unwrap();
        base.k = 3;
        let perms = vec![vec![0, 1, 2], vec![1, 2, 0], vec![2, 0, 1]];
        let cells = SweepAxis::Permutation(perms).cells(&base).unwrap();
        assert_eq!(cells.len(), 3);
        assert_eq!(cells[1].1.expert_permutation, Some(vec![1, 2, 0]));
    }
}
