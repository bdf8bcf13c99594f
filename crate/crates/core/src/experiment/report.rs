use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::protocols::RunMetrics;

/// Mean and sample standard deviation across seeds of one (method, stage,
/// task) cell; `task` is `mean` for the mean over seen tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub protocol: String,
    pub method: String,
    pub stage: usize,
    pub task: String,
    pub n_seeds: usize,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub free_capacity_mean: f64,
    pub config_hash: String,
}

#[derive(Debug, Clone)]
pub struct Summary {
    pub protocol: String,
    pub config_hash: String,
    pub rows: Vec<AggregateRow>,
    pub runs: Vec<RunMetrics>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl Summary {
    pub fn cell(&self, method: &str, stage: usize, task: &str) -> Option<&AggregateRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.stage == stage && r.task == task)
    }

    pub fn methods(&self) -> Vec<String> {
        let mut m: Vec<String> = self.rows.iter().map(|r| r.method.clone()).collect();
        m.dedup();
        m
    }

    pub fn last_stage(&self, method: &str) -> Option<usize> {
        self.rows.iter().filter(|r| r.method == method).map(|r| r.stage).max()
    }

    /// Mean over seeds of the final mean-over-tasks accuracy.
    pub fn final_mean(&self, method: &str) -> Option<&AggregateRow> {
        self.cell(method, self.last_stage(method)?, "mean")
    }

    pub fn runs_of<'a>(&'a self, method: &'a str) -> impl Iterator<Item = &'a RunMetrics> + 'a {
        self.runs.iter().filter(move |r| r.method == method)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let w = &mut s;
        writeln!(w, "protocol: {}", self.protocol).unwrap();
        writeln!(w, "config hash: {}", self.config_hash).unwrap();
        writeln!(w).unwrap();
        writeln!(w, "{:<10} {:>6} {:>22} {:>14}", "method", "seeds", "final mean accuracy", "free capacity").unwrap();
        for m in self.methods() {
            if let Some(r) = self.final_mean(&m) {
                writeln!(
                    w,
                    "{:<10} {:>6} {:>13.2} ± {:<6.2} {:>14.2}",
                    m, r.n_seeds, r.accuracy_mean, r.accuracy_std, r.free_capacity_mean
                )
                .unwrap();
            }
        }
        writeln!(w).unwrap();
        writeln!(w, "accuracy per task after the last stage (mean ± std):").unwrap();
        for m in self.methods() {
            let last = self.last_stage(&m).unwrap_or(0);
            let cells: Vec<String> = self
                .rows
                .iter()
                .filter(|r| r.method == m && r.stage == last && r.task != "mean")
                .map(|r| format!("t{} {:.2}±{:.2}", r.task, r.accuracy_mean, r.accuracy_std))
                .collect();
            writeln!(w, "  {m}: {}", cells.join("  ")).unwrap();
        }
        writeln!(w).unwrap();
        writeln!(w, "mean accuracy over seen tasks and free capacity per stage:").unwrap();
        for m in self.methods() {
            let cells: Vec<String> = self
                .rows
                .iter()
                .filter(|r| r.method == m && r.task == "mean")
                .map(|r| format!("s{} {:.2} ({:.1}%)", r.stage, r.accuracy_mean, r.free_capacity_mean))
                .collect();
            writeln!(w, "  {m}: {}", cells.join("  ")).unwrap();
        }
        s
    }
}

/// Aggregates runs of one protocol and config across seeds.
pub fn aggregate(runs: &[(RunMetrics, String)]) -> Result<Summary> {
    let (first, hash) = runs.first().ok_or_else(|| Error::Config("no runs to aggregate".into()))?;
    for (m, h) in runs {
        if m.protocol != first.protocol {
            return Err(Error::Validation(format!(
                "refusing to aggregate protocols `{}` and `{}`",
                first.protocol, m.protocol
            )));
        }
        if h != hash {
            return Err(Error::Validation(format!("refusing to aggregate config hashes {hash} and {h}")));
        }
    }
    let mut by_method: BTreeMap<&str, Vec<&RunMetrics>> = BTreeMap::new();
    for (m, _) in runs {
        let group = by_method.entry(&m.method).or_default();
        if group.iter().any(|g| g.seed == m.seed) {
            return Err(Error::Validation(format!("duplicate run {} seed {}", m.method, m.seed)));
        }
        group.push(m);
    }
    let mut rows = Vec::new();
    for (method, group) in &by_method {
        // (stage, task) -> (accuracies, free capacities); task None is the seen-task mean.
        let mut cells = BTreeMap::<(usize, Option<usize>), (Vec<f64>, Vec<f64>)>::new();
        for run in group {
            for stage in run.stages() {
                let cap = run.free_capacity(stage).unwrap_or(f64::NAN);
                for r in run.rows.iter().filter(|r| r.stage == stage) {
                    let c = cells.entry((stage, Some(r.task))).or_default();
                    c.0.push(r.accuracy);
                    c.1.push(cap);
                }
                let c = cells.entry((stage, None)).or_default();
                c.0.push(run.mean_seen(stage).expect("stage has rows"));
                c.1.push(cap);
            }
        }
        for ((stage, task), (acc, cap)) in cells {
            let (accuracy_mean, accuracy_std) = mean_std(&acc);
            rows.push(AggregateRow {
                protocol: first.protocol.clone(),
                method: method.to_string(),
                stage,
                task: task.map_or_else(|| "mean".into(), |t| t.to_string()),
                n_seeds: acc.len(),
                accuracy_mean,
                accuracy_std,
                free_capacity_mean: mean_std(&cap).0,
                config_hash: hash.clone(),
            });
        }
    }
    Ok(Summary {
        protocol: first.protocol.clone(),
        config_hash: hash.clone(),
        rows,
        runs: runs.iter().map(|(m, _)| m.clone()).collect(),
    })
}

pub fn write_aggregate(dir: &Path, summary: &Summary) -> Result<()> {
    let mut csv = csv::Writer::from_writer(Vec::new());
    for r in &summary.rows {
        csv.serialize(r)?;
    }
    let bytes = csv.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    fs::write(dir.join("aggregate.csv"), bytes)?;
    fs::write(dir.join("summary.txt"), summary.to_text())?;
    Ok(())
}

/// Reads every `*.csv` run file in `dir`, in file-name order.
pub fn read_runs(dir: &Path) -> Result<Vec<(RunMetrics, String)>> {
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Config(format!("no run CSVs in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| RunMetrics::read_csv(fs::File::open(p)?))
        .collect()
}

/// Re-aggregates the `runs/` directory of an experiment output directory.
pub fn report(run_dir: &Path) -> Result<Summary> {
    let runs_dir = run_dir.join("runs");
    let summary = aggregate(&read_runs(if runs_dir.is_dir() { &runs_dir } else { run_dir })?)?;
    write_aggregate(run_dir, &summary)?;
    Ok(summary)
}
