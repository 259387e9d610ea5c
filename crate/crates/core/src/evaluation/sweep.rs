use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Baseline, EvalReport, CHANCE};
use crate::error::{Error, Result};

pub const DEFAULT_ISOLINE_LEVELS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

/// Named hyperparameter axes; cells are their cartesian product with the
/// last axis varying fastest.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub axes: Vec<(String, Vec<f64>)>,
}

impl Grid {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn axis(mut self, name: impl Into<String>, values: Vec<f64>) -> Self {
        self.axes.push((name.into(), values));
        self
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (name, values) in &self.axes {
            if !seen.insert(name) {
                return Err(Error::Config(format!("sweep axis {name:?} appears twice")));
            }
            if values.is_empty() {
                return Err(Error::Config(format!("sweep axis {name:?} has no values")));
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config(format!("sweep axis {name:?} has a non-finite value")));
            }
        }
        Ok(())
    }

    pub fn cells(&self) -> Vec<BTreeMap<String, f64>> {
        let mut cells = vec![BTreeMap::new()];
        for (name, values) in &self.axes {
            cells = cells
                .into_iter()
                .flat_map(|cell| {
                    values.iter().map(move |&v| {
                        let mut c = cell.clone();
                        c.insert(name.clone(), v);
                        c
                    })
                })
                .collect();
        }
        cells
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub hyperparameters: BTreeMap<String, f64>,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedCell {
    pub hyperparameters: BTreeMap<String, f64>,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepOutcome {
    /// Successful cells in grid order.
    pub points: Vec<SweepPoint>,
    pub failed: Vec<FailedCell>,
}

/// Evaluates every grid cell in parallel. A failing cell is recorded and
/// the sweep continues.
pub fn run_sweep<F>(grid: &Grid, pipeline: F) -> Result<SweepOutcome>
where
    F: Fn(&BTreeMap<String, f64>) -> Result<EvalReport> + Sync,
{
    grid.validate()?;
    let results: Vec<(BTreeMap<String, f64>, Result<EvalReport>)> = grid
        .cells()
        .into_par_iter()
        .map(|cell| {
            let r = pipeline(&cell);
            (cell, r)
        })
        .collect();
    let mut outcome = SweepOutcome::default();
    for (hyperparameters, r) in results {
        match r {
            Ok(report) => outcome.points.push(SweepPoint {
                hyperparameters,
                report,
            }),
            Err(e) => {
                log::warn!("sweep cell {hyperparameters:?} failed: {e}");
                outcome.failed.push(FailedCell {
                    hyperparameters,
                    error: e.to_string(),
                });
            }
        }
    }
    Ok(outcome)
}

fn dominates(a: &EvalReport, b: &EvalReport) -> bool {
    a.acc_retain >= b.acc_retain
        && a.acc_forget <= b.acc_forget
        && (a.acc_retain > b.acc_retain || a.acc_forget < b.acc_forget)
}

/// Points not dominated in (maximize acc_retain, minimize acc_forget).
/// Points with equal coordinates appear once (first occurrence). Sorted by
/// acc_retain descending, then acc_forget ascending.
pub fn pareto_frontier(points: &[SweepPoint]) -> Vec<SweepPoint> {
    let mut out: Vec<SweepPoint> = Vec::new();
    for p in points {
        if points.iter().any(|q| dominates(&q.report, &p.report)) {
            continue;
        }
        let dup = out.iter().any(|o| {
            o.report.acc_retain == p.report.acc_retain && o.report.acc_forget == p.report.acc_forget
        });
        if !dup {
            out.push(p.clone());
        }
    }
    out.sort_by(|a, b| {
        b.report
            .acc_retain
            .total_cmp(&a.report.acc_retain)
            .then(a.report.acc_forget.total_cmp(&b.report.acc_forget))
    });
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IsolinePoint {
    pub alignment: f64,
    pub acc_retain: f64,
    pub acc_forget: f64,
}

/// Samples of constant alignment in (acc_retain, acc_forget) space. Along
/// each line `R_good` runs from the level to 1 and `R_bad = 1 − level/R_good`.
pub fn alignment_isolines(baseline: Baseline, levels: &[f64], samples: usize) -> Vec<IsolinePoint> {
    let span_r = baseline.acc_retain - CHANCE;
    let span_f = baseline.acc_forget - CHANCE;
    if span_r <= 0.0 || span_f <= 0.0 || samples < 2 {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(levels.len() * samples);
    for &level in levels.iter().filter(|l| **l > 0.0 && **l <= 1.0) {
        for s in 0..samples {
            let r_good = level + (1.0 - level) * s as f64 / (samples - 1) as f64;
            let r_bad = 1.0 - level / r_good;
            out.push(IsolinePoint {
                alignment: level,
                acc_retain: CHANCE + r_good * span_r,
                acc_forget: CHANCE + r_bad * span_f,
            });
        }
    }
    out
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Data {
        line: None,
        message: format!("{}: {e}", path.display()),
    }
}

/// One row per point: hyperparameters (sorted by name) then metrics.
pub fn write_points_csv(path: impl AsRef<Path>, points: &[SweepPoint]) -> Result<()> {
    let path = path.as_ref();
    let names: BTreeSet<&String> = points.iter().flat_map(|p| p.hyperparameters.keys()).collect();
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    let mut header: Vec<String> = names.iter().map(|s| s.to_string()).collect();
    header.extend(
        ["config_id", "acc_forget", "acc_retain", "retention_forget", "retention_retain", "alignment"]
            .map(String::from),
    );
    w.write_record(&header).map_err(csv_err(path))?;
    for p in points {
        let mut row: Vec<String> = names
            .iter()
            .map(|n| p.hyperparameters.get(*n).map(|v| v.to_string()).unwrap_or_default())
            .collect();
        let r = &p.report;
        row.push(r.config_id.clone());
        row.extend(
            [r.acc_forget, r.acc_retain, r.retention_forget, r.retention_retain, r.alignment].map(|v| v.to_string()),
        );
        w.write_record(&row).map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_isolines_csv(path: impl AsRef<Path>, points: &[IsolinePoint]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    for p in points {
        w.serialize(p).map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(retain: f64, forget: f64) -> SweepPoint {
        let mut report = EvalReport::from_accuracies(
            "p",
            forget,
            retain,
            Baseline {
                acc_forget: 0.9,
                acc_retain: 0.9,
            },
            1e-9,
        );
        report.config_id = format!("{retain}/{forget}");
        SweepPoint {
            hyperparameters: BTreeMap::new(),
            report,
        }
    }

    fn coords(ps: &[SweepPoint]) -> Vec<(f64, f64)> {
        ps.iter().map(|p| (p.report.acc_retain, p.report.acc_forget)).collect()
    }

    #[test]
    fn frontier_examples() {
        assert_eq!(coords(&pareto_frontier(&[pt(0.5, 0.3)])), vec![(0.5, 0.3)]);
        let f = pareto_frontier(&[pt(0.5, 0.3), pt(0.6, 0.3), pt(0.6, 0.4)]);
        assert_eq!(coords(&f), vec![(0.6, 0.3)]);
        let d = pareto_frontier(&[pt(0.5, 0.3), pt(0.5, 0.3)]);
        assert_eq!(d.len(), 1);
    }

    #[test]
    fn grid_cells_in_order() {
        let g = Grid::new().axis("a", vec![1.0, 2.0]).axis("b", vec![10.0, 20.0]);
        let cells = g.cells();
        assert_eq!(cells.len(), 4);
        assert_eq!(cells[1]["a"], 1.0);
        assert_eq!(cells[1]["b"], 20.0);
        assert!(Grid::new().axis("a", vec![]).validate().is_err());
    }

    #[test]
    fn failed_cells_recorded() {
        let g = Grid::new().axis("x", vec![0.0, 1.0, 2.0]);
        let out = run_sweep(&g, |c| {
            if c["x"] == 1.0 {
                Err(Error::Argument("bad cell".into()))
            } else {
                Ok(pt(0.5, c["x"] / 10.0).report)
            }
        })
        .unwrap();
        assert_eq!(out.points.len(), 2);
        assert_eq!(out.failed.len(), 1);
        assert_eq!(out.failed[0].hyperparameters["x"], 1.0);
    }
}
