//! Choosing which units a task keeps.
//!
//! Units not yet frozen are zeroed in ascending relevance order, `r` at a
//! time, while accuracy on the task stays within `t` of the unpruned
//! baseline. The batch that first breaks the threshold is rolled back, and
//! every unit that was never zeroed is relevant to the task. The network is
//! restored bit-exactly before the plan is returned.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lrp::RelevanceReport;
use crate::net::{HeadId, Network, UndoRecord, UnitId};
use crate::optim::FreezeState;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Criterion {
    /// Keep zeroing while `accuracy >= baseline - threshold` (fractions in `[0, 1]`).
    AccuracyDrop { threshold: f64 },
    /// Keep zeroing until at least `min_free_percent` of all units would
    /// remain trainable after this task freezes its survivors.
    CapacityFloor { min_free_percent: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PruneRatio {
    /// A fixed number of units per iteration.
    Units(usize),
    /// A fraction of the candidates at plan start, at least one unit.
    Fraction(f64),
}

impl PruneRatio {
    pub fn resolve(self, candidates: usize) -> usize {
        match self {
            PruneRatio::Units(n) => n.max(1),
            PruneRatio::Fraction(f) => ((candidates as f64 * f).floor() as usize).max(1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub criterion: Criterion,
    pub ratio: PruneRatio,
    /// Divide each score by its layer's total before the global sort.
    pub per_layer_normalize: bool,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            criterion: Criterion::AccuracyDrop { threshold: 0.02 },
            ratio: PruneRatio::Fraction(0.01),
            per_layer_normalize: false,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        match self.criterion {
            Criterion::AccuracyDrop { threshold } if !(0.0..=1.0).contains(&threshold) => {
                return Err(Error::Config(format!("pruning threshold {threshold} outside [0, 1]")))
            }
            Criterion::CapacityFloor { min_free_percent } if !(0.0..=100.0).contains(&min_free_percent) => {
                return Err(Error::Config(format!(
                    "capacity floor {min_free_percent} outside [0, 100]"
                )))
            }
            _ => {}
        }
        match self.ratio {
            PruneRatio::Units(0) => Err(Error::Config("pruning ratio must be at least one unit".into())),
            PruneRatio::Fraction(f) if !(f > 0.0 && f <= 1.0) => {
                Err(Error::Config(format!("pruning fraction {f} outside (0, 1]")))
            }
            _ => Ok(()),
        }
    }
}

/// One evaluated pruning step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub iteration: usize,
    pub zeroed: usize,
    pub cumulative: usize,
    pub accuracy: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanResult {
    pub relevant: BTreeSet<UnitId>,
    pub irrelevant: BTreeSet<UnitId>,
    pub baseline_accuracy: f64,
    /// Accuracy with exactly `irrelevant` zeroed.
    pub final_accuracy: f64,
    pub iterations: usize,
    pub audit: Vec<AuditRow>,
}

impl PlanResult {
    pub fn write_audit_csv(&self, w: impl Write) -> Result<()> {
        let mut csv = csv::Writer::from_writer(w);
        for row in &self.audit {
            csv.serialize(row)?;
        }
        csv.flush()?;
        Ok(())
    }
}

/// Units eligible for zeroing: trainable and not claimed by an earlier task.
pub fn candidates(freeze: &FreezeState) -> Vec<UnitId> {
    freeze
        .iter()
        .filter(|(_, p)| p.frozen_by.is_none() && p.multiplier > 0.0)
        .map(|(u, _)| u)
        .collect()
}

fn ranked(report: &RelevanceReport, units: Vec<UnitId>, normalize: bool) -> Result<Vec<UnitId>> {
    let mut layer_total: BTreeMap<usize, f64> = BTreeMap::new();
    for (u, s) in &report.scores {
        *layer_total.entry(u.layer).or_default() += s;
    }
    let mut keyed = Vec::with_capacity(units.len());
    for u in units {
        let s = report
            .score(u)
            .ok_or_else(|| Error::ReportMismatch(format!("no score for unit {u}")))?;
        if !s.is_finite() {
            return Err(Error::ReportMismatch(format!("score of unit {u} is {s}")));
        }
        let total = layer_total[&u.layer];
        let s = if normalize && total != 0.0 { s / total } else { s };
        keyed.push((s, u));
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(keyed.into_iter().map(|(_, u)| u).collect())
}

/// Sweeps units of `head`'s task in ascending relevance, returning the split
/// into relevant and irrelevant units. `eval` returns accuracy in `[0, 1]`.
pub fn plan_freeze(
    net: &mut Network,
    head: &HeadId,
    report: &RelevanceReport,
    freeze: &FreezeState,
    cfg: &PruneConfig,
    mut eval: impl FnMut(&Network) -> Result<f64>,
) -> Result<PlanResult> {
    cfg.validate()?;
    net.head_index(head)?;
    freeze.check_covers(net)?;
    if let Some(u) = report.scores.keys().find(|u| freeze.get(**u).is_none()) {
        return Err(Error::ReportMismatch(format!("unit {u} is not part of the network")));
    }
    let order = ranked(report, candidates(freeze), cfg.per_layer_normalize)?;
    let r = cfg.ratio.resolve(order.len());
    let total = freeze.len();

    let baseline = eval(net)?;
    let mut undo = UndoRecord::new();
    let mut accepted = 0;
    let mut final_accuracy = baseline;
    let mut audit = Vec::new();
    let sweep = (|| -> Result<()> {
        while accepted < order.len() {
            if let Criterion::CapacityFloor { min_free_percent } = cfg.criterion {
                if 100.0 * accepted as f64 / total as f64 >= min_free_percent {
                    break;
                }
            }
            let batch = &order[accepted..(accepted + r).min(order.len())];
            for &u in batch {
                undo.merge(net.zero_unit_outgoing(u, head)?);
            }
            let acc = eval(net)?;
            let ok = match cfg.criterion {
                Criterion::AccuracyDrop { threshold } => acc >= baseline - threshold,
                Criterion::CapacityFloor { .. } => true,
            };
            audit.push(AuditRow {
                iteration: audit.len() + 1,
                zeroed: batch.len(),
                cumulative: accepted + batch.len(),
                accuracy: acc,
                accepted: ok,
            });
            if !ok {
                break;
            }
            accepted += batch.len();
            final_accuracy = acc;
        }
        Ok(())
    })();
    net.restore_units(&mut undo)?;
    sweep?;

    log::debug!(
        "plan for {head}: {accepted}/{} candidates irrelevant, accuracy {baseline:.4} -> {final_accuracy:.4}",
        order.len()
    );
    Ok(PlanResult {
        irrelevant: order[..accepted].iter().copied().collect(),
        relevant: order[accepted..].iter().copied().collect(),
        baseline_accuracy: baseline,
        final_accuracy,
        iterations: audit.len(),
        audit,
    })
}

/// Lowers the multipliers the plan calls for. Units outside the plan keep
/// their state.
pub fn apply_freeze(
    plan: &PlanResult,
    freeze: &FreezeState,
    lr_frozen: f64,
    lr_irrelevant: f64,
    task_index: usize,
) -> Result<FreezeState> {
    let mut next = freeze.clone();
    for &u in &plan.relevant {
        next.set(u, lr_frozen, Some(task_index))?;
    }
    for &u in &plan.irrelevant {
        next.set(u, lr_irrelevant, None)?;
    }
    Ok(next)
}

/// Accuracy on a fixed labelled batch, reusing activations below the first
/// unit layer. Zeroing only ever edits weights that consume unit outputs, so
/// everything up to and including the first weighted layer is constant during
/// a plan.
pub struct PlanEvaluator {
    start: usize,
    cached: Vec<Tensor>,
    labels: Vec<usize>,
    head: HeadId,
}

const EVAL_CHUNK: usize = 1024;

impl PlanEvaluator {
    pub fn new(net: &Network, x: &Tensor, labels: &[usize], head: &HeadId) -> Result<Self> {
        if x.rows() != labels.len() || labels.is_empty() {
            return Err(Error::Validation(format!(
                "{} evaluation inputs for {} labels",
                x.rows(),
                labels.len()
            )));
        }
        let first = net.specs().iter().position(|s| s.has_units());
        let start = first.map_or(0, |f| f + 1);
        let rows: Vec<usize> = (0..labels.len()).collect();
        let mut cached = Vec::new();
        for chunk in rows.chunks(EVAL_CHUNK) {
            let mut act = x.select_rows(chunk)?;
            if start > 0 {
                let (_, trace) = net.forward(&act, head)?;
                act = trace.inputs[start].clone();
            }
            cached.push(act);
        }
        Ok(Self {
            start,
            cached,
            labels: labels.to_vec(),
            head: head.clone(),
        })
    }

    pub fn accuracy(&self, net: &Network) -> Result<f64> {
        let mut correct = 0usize;
        let mut offset = 0;
        for act in &self.cached {
            let logits = net.forward_from(self.start, act.clone(), &self.head)?;
            for (i, row) in logits.data().chunks_exact(logits.row_len()).enumerate() {
                if crate::lrp::argmax(row) == self.labels[offset + i] {
                    correct += 1;
                }
            }
            offset += act.rows();
        }
        Ok(correct as f64 / self.labels.len() as f64)
    }
}
