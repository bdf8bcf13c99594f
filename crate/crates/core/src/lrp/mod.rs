//! Layer-wise relevance propagation.
//!
//! Relevance starts at one logit and is pushed back through the recorded
//! forward pass, one layer at a time:
//!
//! * ε-rule: `R_j = a_j * Σ_k w_jk * R_k / (z_k + ε·sign(z_k))`, where `z_k`
//!   is the full pre-activation including bias and `sign(0) = +1`.
//! * z⁺-rule: `R_j = a_j * Σ_k w⁺_jk * R_k / Σ_j a_j w⁺_jk`, biases ignored;
//!   outputs whose positive denominator is zero drop their relevance.
//! * ReLU and Flatten pass relevance through unchanged.
//!
//! Dense layers and task heads use the ε-rule by default, convolutions z⁺.

pub mod heatmap;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{ForwardTrace, HeadId, LayerSpec, Network, ParamKey, ParamName, UnitId};
use crate::tensor::{gemm, MatRef, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "kebab-case")]
pub enum Rule {
    Epsilon { epsilon: f64 },
    ZPlus,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrpRules {
    /// Dense layers and task heads.
    pub dense: Rule,
    pub conv: Rule,
}

pub const DEFAULT_EPSILON: f64 = 1e-6;

impl Default for LrpRules {
    fn default() -> Self {
        Self::with_epsilon(DEFAULT_EPSILON)
    }
}

impl LrpRules {
    pub fn with_epsilon(epsilon: f64) -> Self {
        Self {
            dense: Rule::Epsilon { epsilon },
            conv: Rule::ZPlus,
        }
    }
}

/// Per-layer relevance for a batch. `layers[l]` has the shape of layer `l`'s
/// output; `input` has the shape of the network input.
#[derive(Debug, Clone)]
pub struct RelevanceMap {
    pub layers: Vec<Tensor>,
    pub input: Tensor,
    /// Outputs whose z⁺ denominator was zero while carrying relevance.
    pub dropped: usize,
}

impl RelevanceMap {
    /// Total relevance at the output of each layer, followed by the input total.
    pub fn layer_sums(&self) -> Vec<f64> {
        self.layers
            .iter()
            .map(Tensor::sum)
            .chain(std::iter::once(self.input.sum()))
            .collect()
    }
}

/// Relevance tensor carrying `logits[i, targets[i]]` at the target and zero elsewhere.
pub fn init_relevance(logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
    let (rows, classes) = match logits.shape() {
        [n] => (1, *n),
        [b, n] => (*b, *n),
        s => {
            return Err(Error::Validation(format!(
                "logits must be 1-D or 2-D, got {s:?}"
            )))
        }
    };
    if targets.len() != rows {
        return Err(Error::Validation(format!(
            "{} targets for {rows} rows",
            targets.len()
        )));
    }
    let mut r = Tensor::zeros(logits.shape());
    for (i, &t) in targets.iter().enumerate() {
        if t >= classes {
            return Err(Error::Index {
                index: t,
                len: classes,
            });
        }
        r.data_mut()[i * classes + t] = logits.data()[i * classes + t];
    }
    Ok(r)
}

fn stabilize(z: f64, epsilon: f64) -> f64 {
    z + if z >= 0.0 { epsilon } else { -epsilon }
}

/// Weights of an affine layer as a `[in, out]` matrix (dense, head) or
/// `[out, patch]` matrix (conv).
fn layer_weight<'a>(net: &'a Network, trace: &ForwardTrace, l: usize) -> Result<&'a Tensor> {
    let key = match net.specs().get(l) {
        Some(LayerSpec::Dense { .. } | LayerSpec::Conv2d(_)) => ParamKey::weight(l),
        Some(LayerSpec::HeadGroup { .. }) => ParamKey {
            layer: l,
            name: ParamName::HeadWeight(trace.head),
        },
        _ => {
            return Err(Error::Validation(format!(
                "layer {l} has no weights to propagate through"
            )))
        }
    };
    Ok(net.param(&key).expect("affine layers have weights"))
}

fn check_upper(trace: &ForwardTrace, l: usize, r_upper: &Tensor) -> Result<()> {
    let want = trace.layer_output(l).shape();
    if r_upper.shape() != want {
        return Err(Error::Dimension {
            layer: l,
            expected: want.to_vec(),
            actual: r_upper.shape().to_vec(),
        });
    }
    Ok(())
}

/// ε-rule through a dense layer or the traced head. With `epsilon == 0` an
/// exactly-zero pre-activation is an error.
pub fn lrp_epsilon_dense(
    net: &Network,
    trace: &ForwardTrace,
    l: usize,
    r_upper: &Tensor,
    epsilon: f64,
) -> Result<Tensor> {
    if !matches!(
        net.specs().get(l),
        Some(LayerSpec::Dense { .. } | LayerSpec::HeadGroup { .. })
    ) {
        return Err(Error::Validation(format!("layer {l} is not dense")));
    }
    check_upper(trace, l, r_upper)?;
    let z = trace.layer_output(l);
    let mut s = Vec::with_capacity(z.len());
    let cols = z.row_len();
    for (i, (&zk, &rk)) in z.data().iter().zip(r_upper.data()).enumerate() {
        let d = stabilize(zk, epsilon);
        if d == 0.0 {
            return Err(Error::DegenerateDenominator {
                layer: l,
                sample: i / cols,
                index: i % cols,
            });
        }
        s.push(rk / d);
    }
    let w = layer_weight(net, trace, l)?;
    Ok(dense_redistribute(&trace.inputs[l], w, &s))
}

/// `R_j = a_j * Σ_k w_jk s_k` for a batch.
fn dense_redistribute(a: &Tensor, w: &Tensor, s: &[f64]) -> Tensor {
    let (batch, in_dim, out_dim) = (a.rows(), w.shape()[0], w.shape()[1]);
    let mut c = vec![0.0; batch * in_dim];
    gemm(
        MatRef::new(s, batch, out_dim),
        MatRef::new(w.data(), in_dim, out_dim).t(),
        0.0,
        &mut c,
    );
    c.iter_mut().zip(a.data()).for_each(|(c, &a)| *c *= a);
    Tensor::new(a.shape().to_vec(), c).expect("input shape")
}

fn positive_part(w: &Tensor) -> Tensor {
    w.map(|v| v.max(0.0))
}

/// z⁺-rule through a dense, head or conv layer. Returns the lower relevance
/// and the number of outputs whose relevance was dropped.
pub fn lrp_zplus(net: &Network, trace: &ForwardTrace, l: usize, r_upper: &Tensor) -> Result<(Tensor, usize)> {
    check_upper(trace, l, r_upper)?;
    let a = &trace.inputs[l];
    let wp = positive_part(layer_weight(net, trace, l)?);
    let mut dropped = 0;
    let mut ratio = |z: f64, r: f64| {
        if z == 0.0 {
            if r != 0.0 {
                dropped += 1;
            }
            0.0
        } else {
            r / z
        }
    };
    let out = match &net.specs()[l] {
        LayerSpec::Dense { .. } | LayerSpec::HeadGroup { .. } => {
            let (batch, in_dim, out_dim) = (a.rows(), wp.shape()[0], wp.shape()[1]);
            let mut z = vec![0.0; batch * out_dim];
            gemm(
                MatRef::new(a.data(), batch, in_dim),
                MatRef::new(wp.data(), in_dim, out_dim),
                0.0,
                &mut z,
            );
            let s: Vec<f64> = z.iter().zip(r_upper.data()).map(|(&z, &r)| ratio(z, r)).collect();
            dense_redistribute(a, &wp, &s)
        }
        LayerSpec::Conv2d(c) => conv_redistribute(net, l, c, a, &wp, r_upper, |z, r| Ok(ratio(z, r)), None)?,
        _ => return Err(Error::Validation(format!("layer {l} has no weights"))),
    };
    if dropped > 0 {
        log::debug!("z+ at layer {l}: dropped relevance at {dropped} outputs");
    }
    Ok((out, dropped))
}

/// Shared conv backward-redistribution: per sample, `z = W·cols` (optionally
/// plus bias via `z_override`), `s = f(z, R)`, `R_in = a ⊙ col2im(Wᵀ s)`.
#[allow(clippy::too_many_arguments)]
fn conv_redistribute(
    net: &Network,
    l: usize,
    c: &crate::net::Conv2dSpec,
    a: &Tensor,
    w: &Tensor,
    r_upper: &Tensor,
    mut f: impl FnMut(f64, f64) -> Result<f64>,
    z_override: Option<&Tensor>,
) -> Result<Tensor> {
    let g = net.conv_geom(l, c);
    let (pl, p, o) = (g.patch_len(), g.out_positions(), c.out_channels);
    let mut cols = vec![0.0; pl * p];
    let mut z = vec![0.0; o * p];
    let mut s = vec![0.0; o * p];
    let mut dcols = vec![0.0; pl * p];
    let mut out = vec![0.0; a.len()];
    let n = g.in_len();
    for b in 0..a.rows() {
        g.im2col(a.row(b), &mut cols);
        match z_override {
            Some(zt) => z.copy_from_slice(zt.row(b)),
            None => gemm(MatRef::new(w.data(), o, pl), MatRef::new(&cols, pl, p), 0.0, &mut z),
        }
        for ((s, &z), &r) in s.iter_mut().zip(&z).zip(r_upper.row(b)) {
            *s = f(z, r)?;
        }
        gemm(MatRef::new(w.data(), o, pl).t(), MatRef::new(&s, o, p), 0.0, &mut dcols);
        let dst = &mut out[b * n..(b + 1) * n];
        g.col2im(&dcols, dst);
        dst.iter_mut().zip(a.row(b)).for_each(|(r, &a)| *r *= a);
    }
    Ok(Tensor::new(a.shape().to_vec(), out).expect("input shape"))
}

/// ReLU: identity. Flatten: reshape back to the layer input.
pub fn lrp_passthrough(net: &Network, trace: &ForwardTrace, l: usize, r_upper: &Tensor) -> Result<Tensor> {
    check_upper(trace, l, r_upper)?;
    match net.specs().get(l) {
        Some(LayerSpec::Relu) => Ok(r_upper.clone()),
        Some(LayerSpec::Flatten) => r_upper.clone().reshape(trace.inputs[l].shape()),
        _ => Err(Error::Validation(format!("layer {l} is not a pass-through layer"))),
    }
}

/// Applies the configured rule for layer `l`.
pub fn propagate_layer(
    net: &Network,
    trace: &ForwardTrace,
    l: usize,
    r_upper: &Tensor,
    rules: &LrpRules,
) -> Result<(Tensor, usize)> {
    match &net.specs()[l] {
        LayerSpec::Relu | LayerSpec::Flatten => Ok((lrp_passthrough(net, trace, l, r_upper)?, 0)),
        LayerSpec::Dense { .. } | LayerSpec::HeadGroup { .. } => match rules.dense {
            Rule::Epsilon { epsilon } => Ok((lrp_epsilon_dense(net, trace, l, r_upper, epsilon)?, 0)),
            Rule::ZPlus => lrp_zplus(net, trace, l, r_upper),
        },
        LayerSpec::Conv2d(c) => match rules.conv {
            Rule::ZPlus => lrp_zplus(net, trace, l, r_upper),
            Rule::Epsilon { epsilon } => {
                check_upper(trace, l, r_upper)?;
                let z = trace.layer_output(l);
                let cols = z.row_len();
                let mut seen = 0usize;
                let w = layer_weight(net, trace, l)?;
                let out = conv_redistribute(
                    net,
                    l,
                    c,
                    &trace.inputs[l],
                    w,
                    r_upper,
                    |z, r| {
                        let i = seen;
                        seen += 1;
                        let d = stabilize(z, epsilon);
                        if d == 0.0 {
                            return Err(Error::DegenerateDenominator {
                                layer: l,
                                sample: i / cols,
                                index: i % cols,
                            });
                        }
                        Ok(r / d)
                    },
                    Some(z),
                )?;
                Ok((out, 0))
            }
        },
    }
}

/// Explains `targets[i]` for each sample of `x` through `head`.
pub fn attribute(net: &Network, x: &Tensor, head: &HeadId, targets: &[usize], rules: &LrpRules) -> Result<RelevanceMap> {
    let (logits, trace) = net.forward(x, head)?;
    attribute_trace(net, &trace, &init_relevance(&logits, targets)?, rules)
}

/// Propagates an initial head relevance down a recorded forward pass.
pub fn attribute_trace(net: &Network, trace: &ForwardTrace, r_head: &Tensor, rules: &LrpRules) -> Result<RelevanceMap> {
    let n = net.layer_count();
    let mut layers = vec![Tensor::zeros(&[1]); n];
    let mut r = r_head.clone();
    let mut dropped = 0;
    for l in (0..n).rev() {
        let (lower, d) = propagate_layer(net, trace, l, &r, rules)?;
        dropped += d;
        layers[l] = std::mem::replace(&mut r, lower);
    }
    Ok(RelevanceMap {
        layers,
        input: r,
        dropped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeedClass {
    /// Relevance starts at the logit of the sample's label.
    #[default]
    True,
    /// Relevance starts at the largest logit.
    Predicted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// Sum of `max(R, 0)`.
    #[default]
    Positive,
    /// Plain sum of `R`; scores may be negative.
    Signed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImportanceConfig {
    pub rules: LrpRules,
    pub seed: SeedClass,
    pub aggregation: Aggregation,
}

impl Default for ImportanceConfig {
    fn default() -> Self {
        Self {
            rules: LrpRules::default(),
            seed: SeedClass::True,
            aggregation: Aggregation::Positive,
        }
    }
}

/// Global importance of every unit for one task.
#[derive(Debug, Clone)]
pub struct RelevanceReport {
    pub scores: BTreeMap<UnitId, f64>,
    pub task_index: usize,
    pub reference_sample_count: usize,
    pub config: ImportanceConfig,
}

impl RelevanceReport {
    pub fn score(&self, unit: UnitId) -> Option<f64> {
        self.scores.get(&unit).copied()
    }
}

const IMPORTANCE_CHUNK: usize = 64;

/// Sums the relevance reaching each unit's output over a labelled reference set.
///
/// Scores are raw sums, comparable across layers; reduction runs in sample
/// order so the result is bit-deterministic.
pub fn unit_importance(
    net: &Network,
    inputs: &Tensor,
    labels: &[usize],
    head: &HeadId,
    config: &ImportanceConfig,
    task_index: usize,
) -> Result<RelevanceReport> {
    if labels.is_empty() || inputs.is_empty() {
        return Err(Error::EmptyReference);
    }
    if inputs.rows() != labels.len() {
        return Err(Error::Validation(format!(
            "{} reference inputs but {} labels",
            inputs.rows(),
            labels.len()
        )));
    }
    let mut scores: BTreeMap<UnitId, f64> = net.units().into_iter().map(|u| (u, 0.0)).collect();
    let rows: Vec<usize> = (0..labels.len()).collect();
    for chunk in rows.chunks(IMPORTANCE_CHUNK) {
        let x = inputs.select_rows(chunk)?;
        let (logits, trace) = net.forward(&x, head)?;
        let targets: Vec<usize> = match config.seed {
            SeedClass::True => chunk.iter().map(|&i| labels[i]).collect(),
            SeedClass::Predicted => logits
                .data()
                .chunks_exact(logits.row_len())
                .map(argmax)
                .collect(),
        };
        let map = attribute_trace(net, &trace, &init_relevance(&logits, &targets)?, &config.rules)?;
        for (l, spec) in net.specs().iter().enumerate() {
            if !spec.has_units() {
                continue;
            }
            let r = &map.layers[l];
            let units = spec.unit_count();
            let per_unit = r.row_len() / units;
            for b in 0..r.rows() {
                for (u, vals) in r.row(b).chunks_exact(per_unit).enumerate() {
                    let add: f64 = match config.aggregation {
                        Aggregation::Positive => vals.iter().map(|v| v.max(0.0)).sum(),
                        Aggregation::Signed => vals.iter().sum(),
                    };
                    *scores.get_mut(&UnitId::new(l, u)).expect("all units seeded") += add;
                }
            }
        }
    }
    Ok(RelevanceReport {
        scores,
        task_index,
        reference_sample_count: labels.len(),
        config: *config,
    })
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests;
