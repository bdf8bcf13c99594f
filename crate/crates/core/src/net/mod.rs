//! Layer stack with recorded forward passes, reverse-mode gradients and
//! per-unit parameter addressing.
//!
//! Weights of dense layers (and of every task head) are stored `[in, out]`,
//! so `w[j][k]` connects input `j` to output `k`. Convolution kernels are
//! stored `[out_channels, in_channels, kernel_h, kernel_w]`.

pub mod checkpoint;
mod conv;

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use conv::Conv2dSpec;
pub(crate) use conv::ConvGeom;

use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HeadId(String);

impl HeadId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    /// Conventional head name for task `index`.
    pub fn for_task(index: usize) -> Self {
        Self(format!("task{index}"))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for HeadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// A neuron of a dense layer or an output channel of a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct UnitId {
    pub layer: usize,
    pub unit: usize,
}

impl UnitId {
    pub fn new(layer: usize, unit: usize) -> Self {
        Self { layer, unit }
    }
}

impl fmt::Display for UnitId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.layer, self.unit)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub id: HeadId,
    pub out_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        in_dim: usize,
        out_dim: usize,
    },
    Conv2d(Conv2dSpec),
    Relu,
    Flatten,
    HeadGroup {
        shared_in_dim: usize,
        heads: Vec<HeadSpec>,
    },
}

impl LayerSpec {
    pub fn dense(in_dim: usize, out_dim: usize) -> Self {
        Self::Dense { in_dim, out_dim }
    }

    pub fn heads(shared_in_dim: usize, heads: impl IntoIterator<Item = (HeadId, usize)>) -> Self {
        Self::HeadGroup {
            shared_in_dim,
            heads: heads
                .into_iter()
                .map(|(id, out_dim)| HeadSpec { id, out_dim })
                .collect(),
        }
    }

    /// Whether this layer carries freezable units.
    pub fn has_units(&self) -> bool {
        matches!(self, Self::Dense { .. } | Self::Conv2d(_))
    }

    pub fn unit_count(&self) -> usize {
        match self {
            Self::Dense { out_dim, .. } => *out_dim,
            Self::Conv2d(c) => c.out_channels,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamName {
    Weight,
    Bias,
    HeadWeight(usize),
    HeadBias(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamKey {
    pub layer: usize,
    pub name: ParamName,
}

impl ParamKey {
    pub fn weight(layer: usize) -> Self {
        Self {
            layer,
            name: ParamName::Weight,
        }
    }

    pub fn bias(layer: usize) -> Self {
        Self {
            layer,
            name: ParamName::Bias,
        }
    }

    pub fn is_head(&self) -> bool {
        matches!(self.name, ParamName::HeadWeight(_) | ParamName::HeadBias(_))
    }
}

impl fmt::Display for ParamKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.name {
            ParamName::Weight => write!(f, "{}.weight", self.layer),
            ParamName::Bias => write!(f, "{}.bias", self.layer),
            ParamName::HeadWeight(h) => write!(f, "{}.head{h}.weight", self.layer),
            ParamName::HeadBias(h) => write!(f, "{}.head{h}.bias", self.layer),
        }
    }
}

#[derive(Debug, Clone)]
enum Params {
    None,
    Affine { weight: Tensor, bias: Tensor },
    Heads(Vec<(Tensor, Tensor)>),
}

/// Activations recorded by [`Network::forward`].
///
/// `inputs[l]` is what layer `l` consumed; the output of a dense or conv
/// layer (its pre-activation) is therefore `inputs[l + 1]`, and the output of
/// the head layer is `output`.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub inputs: Vec<Tensor>,
    pub output: Tensor,
    pub head: usize,
    version: u64,
}

impl ForwardTrace {
    pub fn layer_count(&self) -> usize {
        self.inputs.len()
    }

    /// Output of layer `l` (pre-activation for dense/conv layers).
    pub fn layer_output(&self, l: usize) -> &Tensor {
        self.inputs.get(l + 1).unwrap_or(&self.output)
    }

    pub fn version(&self) -> u64 {
        self.version
    }
}

/// Gradients for every parameter reachable from the traced head.
///
/// Parameters of other heads have no entry: they receive no gradient.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: BTreeMap<ParamKey, Tensor>,
}

impl Gradients {
    pub fn get(&self, key: &ParamKey) -> Option<&Tensor> {
        self.grads.get(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamKey, &Tensor)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn insert(&mut self, key: ParamKey, grad: Tensor) {
        self.grads.insert(key, grad);
    }

    /// Elementwise `self += other`, inserting keys that are absent.
    pub fn accumulate(&mut self, other: Gradients) {
        for (k, g) in other.grads {
            match self.grads.get_mut(&k) {
                Some(acc) => acc
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(a, b)| *a += b),
                None => {
                    self.grads.insert(k, g);
                }
            }
        }
    }
}

/// Original values of weights overwritten by [`Network::zero_unit_outgoing`].
///
/// Each saved value is stamped with the network version at which it was
/// read. Merging keeps the earliest stamp per element, so a merged record
/// restores the state before the first zeroing regardless of merge order.
#[derive(Debug, Clone, Default)]
pub struct UndoRecord {
    saved: BTreeMap<(ParamKey, usize), (u64, f64)>,
    restored: bool,
}

impl UndoRecord {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn merge(&mut self, other: UndoRecord) {
        for (k, v) in other.saved {
            let slot = self.saved.entry(k).or_insert(v);
            if v.0 < slot.0 {
                *slot = v;
            }
        }
    }

    pub fn len(&self) -> usize {
        self.saved.len()
    }

    pub fn is_empty(&self) -> bool {
        self.saved.is_empty()
    }

    pub fn is_restored(&self) -> bool {
        self.restored
    }
}

#[derive(Debug, Clone)]
pub struct Network {
    input_shape: Vec<usize>,
    specs: Vec<LayerSpec>,
    /// Per-sample output shape of every layer except the head group.
    out_shapes: Vec<Vec<usize>>,
    params: Vec<Params>,
    version: u64,
}

impl Network {
    /// Builds a network with all parameters zero. `input_shape` excludes the batch dimension.
    pub fn new(input_shape: &[usize], specs: Vec<LayerSpec>) -> Result<Self> {
        let invalid = |msg: String| Err(Error::InvalidNetwork(msg));
        if specs.is_empty() {
            return invalid("no layers".into());
        }
        if input_shape.is_empty() || input_shape.contains(&0) {
            return invalid(format!("bad input shape {input_shape:?}"));
        }
        let head_layers = specs
            .iter()
            .filter(|s| matches!(s, LayerSpec::HeadGroup { .. }))
            .count();
        if head_layers != 1 || !matches!(specs.last(), Some(LayerSpec::HeadGroup { .. })) {
            return invalid("exactly one head group is required, as the final layer".into());
        }

        let mut shape = input_shape.to_vec();
        let mut out_shapes = Vec::with_capacity(specs.len());
        let mut params = Vec::with_capacity(specs.len());
        for (l, spec) in specs.iter().enumerate() {
            let mismatch = |expected: Vec<usize>, actual: &[usize]| Error::Dimension {
                layer: l,
                expected,
                actual: actual.to_vec(),
            };
            match spec {
                LayerSpec::Dense { in_dim, out_dim } => {
                    if shape != [*in_dim] {
                        return Err(mismatch(vec![*in_dim], &shape));
                    }
                    if *out_dim == 0 {
                        return invalid(format!("layer {l}: zero-width dense layer"));
                    }
                    shape = vec![*out_dim];
                    params.push(Params::Affine {
                        weight: Tensor::zeros(&[*in_dim, *out_dim]),
                        bias: Tensor::zeros(&[*out_dim]),
                    });
                }
                LayerSpec::Conv2d(c) => {
                    if shape.len() != 3 || shape[0] != c.in_channels {
                        return Err(mismatch(vec![c.in_channels, 0, 0], &shape));
                    }
                    if c.out_channels == 0 || c.kernel_h == 0 || c.kernel_w == 0 {
                        return invalid(format!("layer {l}: empty convolution"));
                    }
                    let g = c
                        .geometry(shape[1], shape[2])
                        .ok_or_else(|| Error::InvalidNetwork(format!("layer {l}: kernel larger than padded input")))?;
                    shape = vec![c.out_channels, g.oh, g.ow];
                    params.push(Params::Affine {
                        weight: Tensor::zeros(&[c.out_channels, c.in_channels, c.kernel_h, c.kernel_w]),
                        bias: Tensor::zeros(&[c.out_channels]),
                    });
                }
                LayerSpec::Relu => params.push(Params::None),
                LayerSpec::Flatten => {
                    shape = vec![shape.iter().product()];
                    params.push(Params::None);
                }
                LayerSpec::HeadGroup {
                    shared_in_dim,
                    heads,
                } => {
                    if shape != [*shared_in_dim] {
                        return Err(mismatch(vec![*shared_in_dim], &shape));
                    }
                    if heads.is_empty() {
                        return invalid("head group has no heads".into());
                    }
                    let mut seen = std::collections::BTreeSet::new();
                    for h in heads {
                        if !seen.insert(&h.id) {
                            return invalid(format!("duplicate head `{}`", h.id));
                        }
                        if h.out_dim == 0 {
                            return invalid(format!("head `{}` has no outputs", h.id));
                        }
                    }
                    params.push(Params::Heads(
                        heads
                            .iter()
                            .map(|h| {
                                (
                                    Tensor::zeros(&[*shared_in_dim, h.out_dim]),
                                    Tensor::zeros(&[h.out_dim]),
                                )
                            })
                            .collect(),
                    ));
                    shape = vec![];
                }
            }
            out_shapes.push(shape.clone());
        }
        Ok(Self {
            input_shape: input_shape.to_vec(),
            specs,
            out_shapes,
            params,
            version: 0,
        })
    }

    /// Multi-layer perceptron `input -> hidden... -> heads` with ReLU between dense layers.
    pub fn mlp(input_dim: usize, hidden: &[usize], heads: &[(HeadId, usize)]) -> Result<Self> {
        let mut specs = Vec::new();
        let mut dim = input_dim;
        for &h in hidden {
            specs.push(LayerSpec::dense(dim, h));
            specs.push(LayerSpec::Relu);
            dim = h;
        }
        specs.push(LayerSpec::heads(dim, heads.iter().cloned()));
        Self::new(&[input_dim], specs)
    }

    /// Uniform `±1/sqrt(fan_in)` initialisation of every weight and bias.
    pub fn init_uniform(&mut self, rng: &mut impl Rng) {
        for (spec, params) in self.specs.iter().zip(&mut self.params) {
            let fan_in = match spec {
                LayerSpec::Dense { in_dim, .. } => *in_dim,
                LayerSpec::Conv2d(c) => c.fan_in(),
                LayerSpec::HeadGroup { shared_in_dim, .. } => *shared_in_dim,
                _ => continue,
            };
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mut fill = |t: &mut Tensor| {
                t.data_mut()
                    .iter_mut()
                    .for_each(|v| *v = rng.random_range(-bound..bound))
            };
            match params {
                Params::Affine { weight, bias } => {
                    fill(weight);
                    fill(bias);
                }
                Params::Heads(hs) => hs.iter_mut().for_each(|(w, b)| {
                    fill(w);
                    fill(b);
                }),
                Params::None => {}
            }
        }
        self.version += 1;
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn layer_count(&self) -> usize {
        self.specs.len()
    }

    /// Per-sample output shape of layer `l`; `None` for the head group.
    pub fn output_shape(&self, l: usize) -> Option<&[usize]> {
        match self.specs.get(l)? {
            LayerSpec::HeadGroup { .. } => None,
            _ => Some(&self.out_shapes[l]),
        }
    }

    /// Monotone counter bumped by every parameter mutation.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn head_layer(&self) -> usize {
        self.specs.len() - 1
    }

    pub fn head_specs(&self) -> &[HeadSpec] {
        match self.specs.last() {
            Some(LayerSpec::HeadGroup { heads, .. }) => heads,
            _ => unreachable!("validated in constructor"),
        }
    }

    pub fn head_index(&self, head: &HeadId) -> Result<usize> {
        self.head_specs()
            .iter()
            .position(|h| &h.id == head)
            .ok_or_else(|| Error::HeadNotFound(head.clone()))
    }

    /// Every freezable unit, ordered by `(layer, unit)`.
    pub fn units(&self) -> Vec<UnitId> {
        self.specs
            .iter()
            .enumerate()
            .flat_map(|(l, s)| (0..s.unit_count()).map(move |u| UnitId::new(l, u)))
            .collect()
    }

    pub fn unit_count(&self) -> usize {
        self.specs.iter().map(LayerSpec::unit_count).sum()
    }

    pub fn param_keys(&self) -> Vec<ParamKey> {
        let mut keys = Vec::new();
        for (l, p) in self.params.iter().enumerate() {
            match p {
                Params::None => {}
                Params::Affine { .. } => {
                    keys.push(ParamKey::weight(l));
                    keys.push(ParamKey::bias(l));
                }
                Params::Heads(hs) => {
                    for h in 0..hs.len() {
                        keys.push(ParamKey {
                            layer: l,
                            name: ParamName::HeadWeight(h),
                        });
                        keys.push(ParamKey {
                            layer: l,
                            name: ParamName::HeadBias(h),
                        });
                    }
                }
            }
        }
        keys
    }

    pub fn param(&self, key: &ParamKey) -> Option<&Tensor> {
        match (self.params.get(key.layer)?, key.name) {
            (Params::Affine { weight, .. }, ParamName::Weight) => Some(weight),
            (Params::Affine { bias, .. }, ParamName::Bias) => Some(bias),
            (Params::Heads(hs), ParamName::HeadWeight(h)) => hs.get(h).map(|p| &p.0),
            (Params::Heads(hs), ParamName::HeadBias(h)) => hs.get(h).map(|p| &p.1),
            _ => None,
        }
    }

    /// Mutable access to one parameter. Invalidates outstanding traces.
    pub fn param_mut(&mut self, key: &ParamKey) -> Option<&mut Tensor> {
        self.version += 1;
        match (self.params.get_mut(key.layer)?, key.name) {
            (Params::Affine { weight, .. }, ParamName::Weight) => Some(weight),
            (Params::Affine { bias, .. }, ParamName::Bias) => Some(bias),
            (Params::Heads(hs), ParamName::HeadWeight(h)) => hs.get_mut(h).map(|p| &mut p.0),
            (Params::Heads(hs), ParamName::HeadBias(h)) => hs.get_mut(h).map(|p| &mut p.1),
            _ => None,
        }
    }

    /// Snapshot of all parameters, in [`param_keys`](Self::param_keys) order.
    pub fn snapshot(&self) -> Vec<(ParamKey, Tensor)> {
        self.param_keys()
            .into_iter()
            .map(|k| {
                let t = self.param(&k).expect("listed key").clone();
                (k, t)
            })
            .collect()
    }

    /// Bitwise comparison of all parameters against a [`snapshot`](Self::snapshot).
    pub fn params_bit_eq(&self, snapshot: &[(ParamKey, Tensor)]) -> bool {
        snapshot
            .iter()
            .all(|(k, t)| self.param(k).is_some_and(|p| p.bit_eq(t)))
            && snapshot.len() == self.param_keys().len()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != self.input_shape.len() + 1 || x.shape()[1..] != self.input_shape[..] {
            let mut expected = vec![x.shape().first().copied().unwrap_or(0)];
            expected.extend_from_slice(&self.input_shape);
            return Err(Error::Dimension {
                layer: 0,
                expected,
                actual: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn apply_layer(&self, l: usize, input: &Tensor, head: usize) -> Tensor {
        let batch = input.rows();
        match (&self.specs[l], &self.params[l]) {
            (LayerSpec::Dense { in_dim, out_dim }, Params::Affine { weight, bias }) => {
                affine(input.data(), batch, *in_dim, *out_dim, weight.data(), bias.data())
            }
            (LayerSpec::HeadGroup { shared_in_dim, heads }, Params::Heads(hs)) => {
                let (w, b) = &hs[head];
                affine(input.data(), batch, *shared_in_dim, heads[head].out_dim, w.data(), b.data())
            }
            (LayerSpec::Conv2d(c), Params::Affine { weight, bias }) => {
                let g = self.conv_geom(l, c);
                let p = g.out_positions();
                let mut out = Vec::with_capacity(batch * c.out_channels * p);
                let mut cols = vec![0.0; g.patch_len() * p];
                for s in 0..batch {
                    g.im2col(input.row(s), &mut cols);
                    let start = out.len();
                    for &b in bias.data() {
                        out.extend(std::iter::repeat_n(b, p));
                    }
                    gemm(
                        MatRef::new(weight.data(), c.out_channels, g.patch_len()),
                        MatRef::new(&cols, g.patch_len(), p),
                        1.0,
                        &mut out[start..],
                    );
                }
                Tensor::new(vec![batch, c.out_channels, g.oh, g.ow], out).expect("conv output shape")
            }
            (LayerSpec::Relu, _) => input.map(|v| v.max(0.0)),
            (LayerSpec::Flatten, _) => {
                let n = input.row_len();
                input.clone().reshape(&[batch, n]).expect("flatten")
            }
            _ => unreachable!("params always match their spec"),
        }
    }

    pub(crate) fn conv_geom(&self, l: usize, c: &Conv2dSpec) -> ConvGeom {
        let in_shape = if l == 0 {
            &self.input_shape
        } else {
            &self.out_shapes[l - 1]
        };
        c.geometry(in_shape[1], in_shape[2]).expect("validated geometry")
    }

    /// Runs the batch `x` through the shared trunk and `head`, recording every layer input.
    pub fn forward(&self, x: &Tensor, head: &HeadId) -> Result<(Tensor, ForwardTrace)> {
        let h = self.head_index(head)?;
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.specs.len());
        let mut act = x.clone();
        for l in 0..self.specs.len() {
            let next = self.apply_layer(l, &act, h);
            inputs.push(act);
            act = next;
        }
        let trace = ForwardTrace {
            inputs,
            output: act.clone(),
            head: h,
            version: self.version,
        };
        Ok((act, trace))
    }

    /// Logits without recording a trace.
    pub fn predict(&self, x: &Tensor, head: &HeadId) -> Result<Tensor> {
        self.check_input(x)?;
        self.forward_from(0, x.clone(), head)
    }

    /// Continues a forward pass from the input of layer `start`.
    pub fn forward_from(&self, start: usize, input: Tensor, head: &HeadId) -> Result<Tensor> {
        let h = self.head_index(head)?;
        if start > 0 {
            let expected = self.out_shapes.get(start - 1).ok_or(Error::Index {
                index: start,
                len: self.specs.len(),
            })?;
            if input.shape()[1..] != expected[..] {
                return Err(Error::Dimension {
                    layer: start,
                    expected: expected.clone(),
                    actual: input.shape()[1..].to_vec(),
                });
            }
        }
        let mut act = input;
        for l in start..self.specs.len() {
            act = self.apply_layer(l, &act, h);
        }
        Ok(act)
    }

    /// Reverse-mode gradients of a scalar loss whose gradient w.r.t. the logits is `loss_grad`.
    pub fn backward(&self, trace: &ForwardTrace, loss_grad: &Tensor) -> Result<Gradients> {
        if trace.version != self.version {
            return Err(Error::TraceInvalid {
                trace: trace.version,
                network: self.version,
            });
        }
        if loss_grad.shape() != trace.output.shape() {
            return Err(Error::Dimension {
                layer: self.head_layer(),
                expected: trace.output.shape().to_vec(),
                actual: loss_grad.shape().to_vec(),
            });
        }
        let mut grads = Gradients::default();
        let mut g = loss_grad.clone();
        for l in (0..self.specs.len()).rev() {
            let x = &trace.inputs[l];
            let batch = x.rows();
            let need_dx = l > 0;
            g = match (&self.specs[l], &self.params[l]) {
                (LayerSpec::Dense { in_dim, out_dim }, Params::Affine { weight, .. }) => {
                    let (dw, db, dx) = affine_backward(x, &g, *in_dim, *out_dim, weight.data(), need_dx);
                    grads.insert(ParamKey::weight(l), Tensor::new(vec![*in_dim, *out_dim], dw)?);
                    grads.insert(ParamKey::bias(l), Tensor::new(vec![*out_dim], db)?);
                    match dx {
                        Some(dx) => Tensor::new(vec![batch, *in_dim], dx)?,
                        None => break,
                    }
                }
                (LayerSpec::HeadGroup { shared_in_dim, heads }, Params::Heads(hs)) => {
                    let h = trace.head;
                    let out_dim = heads[h].out_dim;
                    let (dw, db, dx) = affine_backward(x, &g, *shared_in_dim, out_dim, hs[h].0.data(), need_dx);
                    grads.insert(
                        ParamKey { layer: l, name: ParamName::HeadWeight(h) },
                        Tensor::new(vec![*shared_in_dim, out_dim], dw)?,
                    );
                    grads.insert(
                        ParamKey { layer: l, name: ParamName::HeadBias(h) },
                        Tensor::new(vec![out_dim], db)?,
                    );
                    match dx {
                        Some(dx) => Tensor::new(vec![batch, *shared_in_dim], dx)?,
                        None => break,
                    }
                }
                (LayerSpec::Conv2d(c), Params::Affine { weight, .. }) => {
                    let geom = self.conv_geom(l, c);
                    let (pl, p) = (geom.patch_len(), geom.out_positions());
                    let mut dw = vec![0.0; c.out_channels * pl];
                    let mut db = vec![0.0; c.out_channels];
                    let mut dx = if need_dx { vec![0.0; x.len()] } else { Vec::new() };
                    let mut cols = vec![0.0; pl * p];
                    let mut dcols = vec![0.0; pl * p];
                    for s in 0..batch {
                        let gs = g.row(s);
                        geom.im2col(x.row(s), &mut cols);
                        gemm(
                            MatRef::new(gs, c.out_channels, p),
                            MatRef::new(&cols, pl, p).t(),
                            1.0,
                            &mut dw,
                        );
                        for (o, d) in db.iter_mut().enumerate() {
                            *d += gs[o * p..(o + 1) * p].iter().sum::<f64>();
                        }
                        if need_dx {
                            gemm(
                                MatRef::new(weight.data(), c.out_channels, pl).t(),
                                MatRef::new(gs, c.out_channels, p),
                                0.0,
                                &mut dcols,
                            );
                            let n = geom.in_len();
                            geom.col2im(&dcols, &mut dx[s * n..(s + 1) * n]);
                        }
                    }
                    grads.insert(ParamKey::weight(l), Tensor::new(weight.shape().to_vec(), dw)?);
                    grads.insert(ParamKey::bias(l), Tensor::new(vec![c.out_channels], db)?);
                    if !need_dx {
                        break;
                    }
                    Tensor::new(x.shape().to_vec(), dx)?
                }
                (LayerSpec::Relu, _) => {
                    let mut g = g;
                    g.data_mut()
                        .iter_mut()
                        .zip(x.data())
                        .for_each(|(d, &v)| if v <= 0.0 { *d = 0.0 });
                    g
                }
                (LayerSpec::Flatten, _) => g.reshape(x.shape())?,
                _ => unreachable!("params always match their spec"),
            };
        }
        Ok(grads)
    }

    fn check_unit(&self, unit: UnitId) -> Result<()> {
        match self.specs.get(unit.layer) {
            Some(s) if s.has_units() && unit.unit < s.unit_count() => Ok(()),
            _ => Err(Error::InvalidUnit(unit)),
        }
    }

    /// Zeroes every weight that reads the output of `unit`, in the next
    /// parameterised layer. When that layer is the head group only the rows
    /// of `head` are touched, leaving other heads intact.
    pub fn zero_unit_outgoing(&mut self, unit: UnitId, head: &HeadId) -> Result<UndoRecord> {
        self.check_unit(unit)?;
        let h = self.head_index(head)?;
        let l = unit.layer;
        let next = (l + 1..self.specs.len())
            .find(|&n| !matches!(self.specs[n], LayerSpec::Relu | LayerSpec::Flatten))
            .expect("head group is always last");
        // Positions of this unit's output in the flattened input of `next`.
        let spatial = match &self.specs[l] {
            LayerSpec::Conv2d(_) => self.out_shapes[l][1] * self.out_shapes[l][2],
            _ => 1,
        };
        let mut undo = UndoRecord::new();
        let stamp = self.version;
        let (key, weight) = match (&self.specs[next], &mut self.params[next]) {
            (LayerSpec::Conv2d(_), Params::Affine { weight, .. }) => (ParamKey::weight(next), weight),
            (LayerSpec::Dense { .. }, Params::Affine { weight, .. }) => (ParamKey::weight(next), weight),
            (LayerSpec::HeadGroup { .. }, Params::Heads(hs)) => (
                ParamKey {
                    layer: next,
                    name: ParamName::HeadWeight(h),
                },
                &mut hs[h].0,
            ),
            _ => unreachable!("next parameterised layer"),
        };
        let mut zero = |idx: usize, data: &mut [f64]| {
            undo.saved.entry((key, idx)).or_insert((stamp, data[idx]));
            data[idx] = 0.0;
        };
        if let LayerSpec::Conv2d(c) = &self.specs[next] {
            // Kernel slices `[:, unit, :, :]` of the next convolution.
            let k = c.kernel_h * c.kernel_w;
            let data = weight.data_mut();
            for o in 0..c.out_channels {
                let base = (o * c.in_channels + unit.unit) * k;
                for i in base..base + k {
                    zero(i, data);
                }
            }
        } else {
            let cols = weight.shape()[1];
            let data = weight.data_mut();
            for row in unit.unit * spatial..(unit.unit + 1) * spatial {
                for i in row * cols..(row + 1) * cols {
                    zero(i, data);
                }
            }
        }
        self.version += 1;
        Ok(undo)
    }

    /// Writes back every value saved in `undo`, bit-exactly.
    pub fn restore_units(&mut self, undo: &mut UndoRecord) -> Result<()> {
        if undo.restored {
            return Err(Error::AlreadyRestored);
        }
        for (&(key, idx), &(_, v)) in &undo.saved {
            let t = self
                .param_mut(&key)
                .ok_or_else(|| Error::Validation(format!("undo record names unknown parameter {key}")))?;
            t.data_mut()[idx] = v;
        }
        undo.restored = true;
        self.version += 1;
        Ok(())
    }
}

fn affine(x: &[f64], batch: usize, in_dim: usize, out_dim: usize, w: &[f64], b: &[f64]) -> Tensor {
    let mut out = Vec::with_capacity(batch * out_dim);
    for _ in 0..batch {
        out.extend_from_slice(b);
    }
    gemm(MatRef::new(x, batch, in_dim), MatRef::new(w, in_dim, out_dim), 1.0, &mut out);
    Tensor::new(vec![batch, out_dim], out).expect("affine output shape")
}

type AffineGrads = (Vec<f64>, Vec<f64>, Option<Vec<f64>>);

fn affine_backward(x: &Tensor, g: &Tensor, in_dim: usize, out_dim: usize, w: &[f64], need_dx: bool) -> AffineGrads {
    let batch = x.rows();
    let mut dw = vec![0.0; in_dim * out_dim];
    gemm(
        MatRef::new(x.data(), batch, in_dim).t(),
        MatRef::new(g.data(), batch, out_dim),
        0.0,
        &mut dw,
    );
    let mut db = vec![0.0; out_dim];
    for row in g.data().chunks_exact(out_dim) {
        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
    }
    let dx = need_dx.then(|| {
        let mut dx = vec![0.0; batch * in_dim];
        gemm(
            MatRef::new(g.data(), batch, out_dim),
            MatRef::new(w, in_dim, out_dim).t(),
            0.0,
            &mut dx,
        );
        dx
    });
    (dw, db, dx)
}
