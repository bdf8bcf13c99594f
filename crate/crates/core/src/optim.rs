//! Adam with per-unit learning-rate multipliers.
//!
//! A unit owns the parameters that compute it: for a dense unit `k` that is
//! weight column `k` plus bias `k`, for a conv unit `c` the kernel slice
//! `[c, :, :, :]` plus bias `c`. Task heads are always fully plastic.
//! Elements whose owner has multiplier `0.0` are skipped outright, moments
//! included, so frozen parameters stay bit-identical.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{Gradients, LayerSpec, Network, ParamKey, ParamName, UnitId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitPlasticity {
    pub multiplier: f64,
    pub frozen_by: Option<usize>,
}

/// Learning-rate multiplier of every unit. Multipliers never rise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<FreezeEntry>", into = "Vec<FreezeEntry>")]
pub struct FreezeState {
    units: BTreeMap<UnitId, UnitPlasticity>,
}

#[derive(Serialize, Deserialize)]
struct FreezeEntry {
    layer: usize,
    unit: usize,
    multiplier: f64,
    frozen_by: Option<usize>,
}

impl From<Vec<FreezeEntry>> for FreezeState {
    fn from(v: Vec<FreezeEntry>) -> Self {
        Self {
            units: v
                .into_iter()
                .map(|e| {
                    (
                        UnitId::new(e.layer, e.unit),
                        UnitPlasticity {
                            multiplier: e.multiplier,
                            frozen_by: e.frozen_by,
                        },
                    )
                })
                .collect(),
        }
    }
}

impl From<FreezeState> for Vec<FreezeEntry> {
    fn from(s: FreezeState) -> Self {
        s.units
            .into_iter()
            .map(|(u, p)| FreezeEntry {
                layer: u.layer,
                unit: u.unit,
                multiplier: p.multiplier,
                frozen_by: p.frozen_by,
            })
            .collect()
    }
}

impl FreezeState {
    /// Every unit of `net` fully plastic.
    pub fn new(net: &Network) -> Self {
        Self {
            units: net
                .units()
                .into_iter()
                .map(|u| {
                    (
                        u,
                        UnitPlasticity {
                            multiplier: 1.0,
                            frozen_by: None,
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn get(&self, unit: UnitId) -> Option<UnitPlasticity> {
        self.units.get(&unit).copied()
    }

    pub fn multiplier(&self, unit: UnitId) -> Option<f64> {
        self.units.get(&unit).map(|p| p.multiplier)
    }

    /// Whether an earlier task claimed this unit.
    pub fn is_frozen(&self, unit: UnitId) -> bool {
        self.units.get(&unit).is_some_and(|p| p.frozen_by.is_some())
    }

    pub fn iter(&self) -> impl Iterator<Item = (UnitId, UnitPlasticity)> + '_ {
        self.units.iter().map(|(u, p)| (*u, *p))
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    /// Lowers `unit`'s multiplier; raising it is an error.
    pub fn set(&mut self, unit: UnitId, multiplier: f64, frozen_by: Option<usize>) -> Result<()> {
        let entry = self
            .units
            .get_mut(&unit)
            .ok_or(Error::IncompleteFreezeState(unit))?;
        if multiplier.is_nan() || multiplier < 0.0 || multiplier > entry.multiplier {
            return Err(Error::Monotonicity {
                unit,
                current: entry.multiplier,
                requested: multiplier,
            });
        }
        entry.multiplier = multiplier;
        if frozen_by.is_some() {
            entry.frozen_by = frozen_by;
        }
        Ok(())
    }

    /// Percentage of units with a non-zero multiplier.
    pub fn free_capacity(&self) -> f64 {
        if self.units.is_empty() {
            return 100.0;
        }
        let free = self.units.values().filter(|p| p.multiplier > 0.0).count();
        100.0 * free as f64 / self.units.len() as f64
    }

    /// Per-layer multipliers indexed by unit, erroring on any gap.
    fn layer_multipliers(&self, net: &Network) -> Result<Vec<Vec<f64>>> {
        net.specs()
            .iter()
            .enumerate()
            .map(|(l, s)| {
                (0..s.unit_count())
                    .map(|u| {
                        let id = UnitId::new(l, u);
                        self.multiplier(id).ok_or(Error::IncompleteFreezeState(id))
                    })
                    .collect()
            })
            .collect()
    }

    pub fn check_covers(&self, net: &Network) -> Result<()> {
        self.layer_multipliers(net).map(|_| ())
    }
}

/// Whose plasticity governs a parameter element.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Owner {
    Unit(UnitId),
    /// Task-head parameters: permanently multiplier 1.0.
    Head,
}

pub fn ownership(net: &Network, key: &ParamKey, index: usize) -> Result<Owner> {
    if key.is_head() {
        return Ok(Owner::Head);
    }
    let t = net
        .param(key)
        .ok_or_else(|| Error::Validation(format!("unknown parameter {key}")))?;
    if index >= t.len() {
        return Err(Error::Index {
            index,
            len: t.len(),
        });
    }
    let unit = match (&net.specs()[key.layer], key.name) {
        (_, ParamName::Bias) => index,
        (LayerSpec::Dense { out_dim, .. }, ParamName::Weight) => index % out_dim,
        (LayerSpec::Conv2d(c), ParamName::Weight) => index / c.fan_in(),
        _ => unreachable!("non-head parameters live on dense/conv layers"),
    };
    Ok(Owner::Unit(UnitId::new(key.layer, unit)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Coupled L2 penalty added to the gradient. Off by default.
    pub l2: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            l2: 0.0,
        }
    }
}

/// How flat element indices of a parameter map onto its layer's units.
#[derive(Clone, Copy)]
enum Layout {
    Head,
    Bias,
    Columns(usize),
    Slabs(usize),
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    moments: BTreeMap<ParamKey, Moments>,
    applies: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            moments: BTreeMap::new(),
            applies: 0,
        }
    }

    /// Number of completed [`step`](Self::step) calls.
    pub fn applies(&self) -> u64 {
        self.applies
    }

    /// First and second moments of one parameter, if it has been stepped.
    pub fn moments(&self, key: &ParamKey) -> Option<(&[f64], &[f64])> {
        self.moments.get(key).map(|m| (m.m.as_slice(), m.v.as_slice()))
    }

    pub fn step(&mut self, net: &mut Network, grads: &Gradients, freeze: &FreezeState) -> Result<()> {
        let mults = freeze.layer_multipliers(net)?;
        let cfg = self.config;
        for (key, grad) in grads.iter() {
            let param = net
                .param(key)
                .ok_or_else(|| Error::Validation(format!("gradient for unknown parameter {key}")))?;
            if param.shape() != grad.shape() {
                return Err(Error::Dimension {
                    layer: key.layer,
                    expected: param.shape().to_vec(),
                    actual: grad.shape().to_vec(),
                });
            }
            let layout = if key.is_head() {
                Layout::Head
            } else {
                match (&net.specs()[key.layer], key.name) {
                    (_, ParamName::Bias) => Layout::Bias,
                    (LayerSpec::Dense { out_dim, .. }, _) => Layout::Columns(*out_dim),
                    (LayerSpec::Conv2d(c), _) => Layout::Slabs(c.fan_in()),
                    _ => unreachable!("non-head parameters live on dense/conv layers"),
                }
            };
            let unit_mults = mults.get(key.layer).map(Vec::as_slice).unwrap_or(&[]);
            let owner_mult = |i: usize| match layout {
                Layout::Head => 1.0,
                Layout::Bias => unit_mults[i],
                Layout::Columns(out) => unit_mults[i % out],
                Layout::Slabs(fan) => unit_mults[i / fan],
            };
            if (0..grad.len()).all(|i| owner_mult(i) == 0.0) {
                continue;
            }
            let n = grad.len();
            let mom = self.moments.entry(*key).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
                step: 0,
            });
            mom.step += 1;
            let bc1 = 1.0 - cfg.beta1.powi(mom.step as i32);
            let bc2 = 1.0 - cfg.beta2.powi(mom.step as i32);
            let p = net.param_mut(key).expect("checked above").data_mut();
            for (i, &g) in grad.data().iter().enumerate() {
                let mult = owner_mult(i);
                if mult == 0.0 {
                    continue;
                }
                let g = g + cfg.l2 * p[i];
                mom.m[i] = cfg.beta1 * mom.m[i] + (1.0 - cfg.beta1) * g;
                mom.v[i] = cfg.beta2 * mom.v[i] + (1.0 - cfg.beta2) * g * g;
                let update = cfg.lr * (mom.m[i] / bc1) / ((mom.v[i] / bc2).sqrt() + cfg.eps);
                p[i] -= mult * update;
            }
        }
        self.applies += 1;
        Ok(())
    }
}
