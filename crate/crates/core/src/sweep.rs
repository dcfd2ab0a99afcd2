//! Multi-seed experiment sweeps over (policy, cluster) cells.
//!
//! Every trial draws one trace (seed = base seed + trial index) that all
//! cells replay. Trials run on a bounded rayon pool when the `parallel`
//! feature is on and sequentially otherwise. Results are keyed by
//! (cell, trial).

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::placement::{FeasibilityCache, PolicyKind};
use crate::simulator::{aggregate_stats, run_with_cache, RunStats, Summary};
use crate::svg::{BarChart, LineChart};
use crate::topology::ClusterSpec;
use crate::workload::{generate_trace, GenConfig, Trace};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub policy: PolicyKind,
    pub spec: ClusterSpec,
}

impl Cell {
    pub fn new(policy: PolicyKind, spec: ClusterSpec) -> Self {
        Self { policy, spec }
    }

    /// Cube column value: `16^3` for a cubic static torus, `4^3` for 4-cubes.
    pub fn cube(&self) -> String {
        match self.spec.static_extents {
            Some([a, b, c]) if a == b && b == c => format!("{a}^3"),
            Some([a, b, c]) => format!("{a}x{b}x{c}"),
            None => format!("{}^3", self.spec.cube_size),
        }
    }

    /// Display label such as `RFold(4^3)`.
    pub fn label(&self) -> String {
        format!("{}({})", self.policy.display_name(), self.cube())
    }

    /// File-name stem, unique per distinct cell.
    pub fn slug(&self) -> String {
        match self.spec.static_extents {
            Some([a, b, c]) => format!("{}_{a}x{b}x{c}", self.policy.as_str()),
            None => format!("{}_{}x{}", self.policy.as_str(), self.spec.cube_count, self.spec.cube_size),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub cells: Vec<Cell>,
    pub trials: usize,
    pub gen: GenConfig,
    pub base_seed: u64,
    pub output_dir: PathBuf,
    /// Worker threads; 0 uses every available core.
    pub parallelism: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            cells: default_cells(),
            trials: 100,
            gen: GenConfig::default(),
            base_seed: 1,
            output_dir: PathBuf::from("sweep-out"),
            parallelism: 0,
        }
    }
}

/// FirstFit and Folding on a static 16^3 torus, Reconfig and RFold on
/// 4096 XPUs built from 2^3, 4^3 and 8^3 cubes.
pub fn default_cells() -> Vec<Cell> {
    let mut cells = vec![
        Cell::new(PolicyKind::FirstFit, ClusterSpec::static_torus([16, 16, 16])),
        Cell::new(PolicyKind::Folding, ClusterSpec::static_torus([16, 16, 16])),
    ];
    for n in [2, 4, 8] {
        for p in [PolicyKind::Reconfig, PolicyKind::RFold] {
            cells.push(Cell::new(p, ClusterSpec::reconfigurable(4096 / (n * n * n), n)));
        }
    }
    cells
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cells.is_empty() {
            return Err(Error::Config("cells: at least one cell is required".into()));
        }
        if self.trials == 0 {
            return Err(Error::Config("trials: must be at least 1".into()));
        }
        let mut seen = HashSet::new();
        for cell in &self.cells {
            cell.spec.validate()?;
            cell.policy.check_compatible(&cell.spec)?;
            if !seen.insert(cell.slug()) {
                return Err(Error::Config(format!("cells: duplicate cell {}", cell.label())));
            }
        }
        self.gen.validate()
    }

    pub fn trial_seed(&self, trial: usize) -> u64 {
        self.base_seed.wrapping_add(trial as u64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub cell: Cell,
    /// Per-trial statistics in trial order; empty when the cell failed.
    pub trials: Vec<RunStats>,
    pub error: Option<String>,
}

impl CellResult {
    pub fn summary(&self) -> Option<Summary> {
        (self.error.is_none() && !self.trials.is_empty()).then(|| aggregate_stats(&self.trials))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub seeds: Vec<u64>,
    pub cells: Vec<CellResult>,
}

impl SweepResult {
    pub fn failed(&self) -> impl Iterator<Item = &CellResult> {
        self.cells.iter().filter(|c| c.error.is_some())
    }

    pub fn cell(&self, policy: PolicyKind, cube: &str) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.cell.policy == policy && c.cell.cube() == cube)
    }
}

/// Runs every cell on every trial. A failing run marks its cell as
/// failed without stopping the others.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepResult> {
    cfg.validate()?;
    let seeds: Vec<u64> = (0..cfg.trials).map(|t| cfg.trial_seed(t)).collect();
    let traces: Vec<Trace> =
        seeds.iter().map(|&seed| generate_trace(&GenConfig { seed, ..cfg.gen.clone() })).collect::<Result<_>>()?;
    let cache = Arc::new(FeasibilityCache::new());
    let work: Vec<(usize, usize)> = (0..cfg.cells.len()).flat_map(|c| (0..cfg.trials).map(move |t| (c, t))).collect();
    let run_one = |&(c, t): &(usize, usize)| {
        let cell = &cfg.cells[c];
        run_with_cache(&traces[t], cell.policy, &cell.spec, Arc::clone(&cache))
            .map(|r| RunStats::of(&r))
            .map_err(|e| format!("trial {t} (seed {}): {e}", seeds[t]))
    };
    let outcomes = execute(&work, cfg.parallelism, run_one)?;

    let mut cells: Vec<CellResult> =
        cfg.cells.iter().map(|cell| CellResult { cell: cell.clone(), trials: Vec::new(), error: None }).collect();
    for (&(c, _), outcome) in work.iter().zip(outcomes) {
        let cell = &mut cells[c];
        match outcome {
            Ok(stats) => cell.trials.push(stats),
            Err(e) => {
                cell.error.get_or_insert(e);
            }
        }
    }
    for cell in &mut cells {
        if cell.error.is_some() {
            cell.trials.clear();
        }
    }
    Ok(SweepResult { seeds, cells })
}

#[cfg(feature = "parallel")]
fn execute<T, R, F>(work: &[T], parallelism: usize, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    if parallelism == 1 {
        return Ok(work.iter().map(f).collect());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism)
        .build()
        .map_err(|e| Error::Config(format!("parallelism: {e}")))?;
    Ok(pool.install(|| work.par_iter().map(f).collect()))
}

#[cfg(not(feature = "parallel"))]
fn execute<T, R, F>(work: &[T], _parallelism: usize, f: F) -> Result<Vec<R>>
where
    F: Fn(&T) -> R,
{
    Ok(work.iter().map(f).collect())
}

const HEADER: [&str; 5] = ["cell", "policy", "cube", "metric", "value"];

fn fmt_value(v: Option<f64>) -> String {
    match v {
        Some(v) if v.is_finite() => v.to_string(),
        _ => "nan".into(),
    }
}

fn write_metric_csv(path: &Path, rows: &[(&Cell, String, Option<f64>)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(HEADER).map_err(csv_err)?;
    for (cell, metric, value) in rows {
        w.write_record([cell.label(), cell.policy.as_str().to_string(), cell.cube(), metric.clone(), fmt_value(*value)])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Writes the summary CSVs, per-cell utilization CDFs and SVG charts into
/// `dir`, returning the paths written. A failed cell keeps its rows with
/// `nan` values.
pub fn write_outputs(result: &SweepResult, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let summaries: Vec<Option<Summary>> = result.cells.iter().map(CellResult::summary).collect();
    let mut written = Vec::new();

    let jcr: Vec<_> =
        result.cells.iter().zip(&summaries).map(|(c, s)| (&c.cell, "mean_jcr".to_string(), s.as_ref().map(|s| s.mean_jcr))).collect();
    written.push(dir.join("jcr.csv"));
    write_metric_csv(&written[written.len() - 1], &jcr)?;

    let mut jct = Vec::new();
    for (c, s) in result.cells.iter().zip(&summaries) {
        jct.push((&c.cell, "p50_jct_s".to_string(), s.as_ref().and_then(|s| s.mean_p50)));
        jct.push((&c.cell, "p90_jct_s".to_string(), s.as_ref().and_then(|s| s.mean_p90)));
        jct.push((&c.cell, "p99_jct_s".to_string(), s.as_ref().and_then(|s| s.mean_p99)));
    }
    written.push(dir.join("jct.csv"));
    write_metric_csv(&written[written.len() - 1], &jct)?;

    let util: Vec<_> = result
        .cells
        .iter()
        .zip(&summaries)
        .map(|(c, s)| (&c.cell, "mean_utilization".to_string(), s.as_ref().map(|s| s.mean_utilization)))
        .collect();
    written.push(dir.join("utilization.csv"));
    write_metric_csv(&written[written.len() - 1], &util)?;

    for (c, s) in result.cells.iter().zip(&summaries) {
        let rows: Vec<_> = (0..=100)
            .map(|q| (&c.cell, format!("q{:.2}", q as f64 / 100.0), s.as_ref().map(|s| s.utilization_quantiles[q])))
            .collect();
        written.push(dir.join(format!("utilization_cdf_{}.csv", c.cell.slug())));
        write_metric_csv(&written[written.len() - 1], &rows)?;
    }

    written.push(dir.join("trials.csv"));
    write_trials_csv(result, &written[written.len() - 1])?;

    let categories: Vec<String> = result.cells.iter().map(|c| c.cell.label()).collect();
    let pick = |f: fn(&Summary) -> Option<f64>| -> Vec<f64> {
        summaries.iter().map(|s| s.as_ref().and_then(f).unwrap_or(f64::NAN)).collect()
    };
    let charts = [
        (
            "jct.svg",
            BarChart {
                title: "Job completion time percentiles".into(),
                x_label: "cell".into(),
                y_label: "JCT (s)".into(),
                categories: categories.clone(),
                series: vec![
                    ("p50".into(), pick(|s| s.mean_p50)),
                    ("p90".into(), pick(|s| s.mean_p90)),
                    ("p99".into(), pick(|s| s.mean_p99)),
                ],
            }
            .render(),
        ),
        (
            "jcr.svg",
            BarChart {
                title: "Job completion rate".into(),
                x_label: "cell".into(),
                y_label: "mean JCR".into(),
                categories,
                series: vec![("JCR".into(), pick(|s| Some(s.mean_jcr)))],
            }
            .render(),
        ),
        (
            "utilization_cdf.svg",
            LineChart {
                title: "Cluster utilization CDF".into(),
                x_label: "busy fraction".into(),
                y_label: "fraction of time".into(),
                x_max: 1.0,
                y_max: 1.0,
                series: result
                    .cells
                    .iter()
                    .zip(&summaries)
                    .filter_map(|(c, s)| {
                        let s = s.as_ref()?;
                        let pts = s.utilization_quantiles.iter().enumerate().map(|(q, &u)| (u, q as f64 / 100.0)).collect();
                        Some((c.cell.label(), pts))
                    })
                    .collect(),
            }
            .render(),
        ),
    ];
    for (name, svg) in charts {
        let path = dir.join(name);
        fs::write(&path, svg)?;
        written.push(path);
    }
    Ok(written)
}

fn write_trials_csv(result: &SweepResult, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["cell", "policy", "cube", "trial", "seed", "jcr", "p50_jct_s", "p90_jct_s", "p99_jct_s", "mean_utilization"])
        .map_err(csv_err)?;
    for c in &result.cells {
        for (t, s) in c.trials.iter().enumerate() {
            w.write_record([
                c.cell.label(),
                c.cell.policy.as_str().to_string(),
                c.cell.cube(),
                t.to_string(),
                result.seeds[t].to_string(),
                fmt_value(Some(s.jcr)),
                fmt_value(s.p50),
                fmt_value(s.p90),
                fmt_value(s.p99),
                fmt_value(Some(s.mean_utilization)),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_cells_cover_the_table() {
        let cells = default_cells();
        let labels: Vec<String> = cells.iter().map(Cell::label).collect();
        assert_eq!(
            labels,
            ["FirstFit(16^3)", "Folding(16^3)", "Reconfig(2^3)", "RFold(2^3)", "Reconfig(4^3)", "RFold(4^3)", "Reconfig(8^3)", "RFold(8^3)"]
        );
        assert!(cells.iter().all(|c| c.spec.total_xpus() == 4096));
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn validation_errors() {
        let mut cfg = ExperimentConfig { trials: 0, ..Default::default() };
        assert!(matches!(cfg.validate(), Err(Error::Config(m)) if m.contains("trials")));
        cfg.trials = 1;
        cfg.cells.push(cfg.cells[0].clone());
        assert!(matches!(cfg.validate(), Err(Error::Config(m)) if m.contains("duplicate")));
        cfg.cells = vec![Cell::new(PolicyKind::FirstFit, ClusterSpec::reconfigurable(64, 4))];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = ExperimentConfig { trials: 3, base_seed: 9, ..Default::default() };
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
        let partial = ExperimentConfig::from_toml("trials = 2\n[gen]\njob_count = 10\n").unwrap();
        assert_eq!((partial.trials, partial.gen.job_count, partial.cells.len()), (2, 10, 8));
        assert!(ExperimentConfig::from_toml("trails = 2").is_err());
    }
}
