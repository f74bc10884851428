//! The slice architecture: a frozen MLP backbone shared by `M` members, each
//! member with its own low-rank adapters on selected backbone layers, its own
//! linear concept heads and its own linear classifier over concept
//! probabilities. Baseline modes reuse the same layout with trainable
//! backbone copies instead of adapters.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{dump, Tape, Tensor, TensorError, Var};

const BACKBONE: u64 = 10;
const ADAPTER: u64 = 11;
const HEAD: u64 = 12;
const CLASSIFIER: u64 = 13;

pub const MODEL_FILE: &str = "model.json";
pub const WEIGHTS_STEM: &str = "weights";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Frozen backbone, per-member adapters.
    Rashomon,
    /// Independent trainable members trained one at a time, no diversity.
    RandomInit,
    /// Independent trainable backbones trained jointly with concept diversity.
    X2c,
    /// One trainable backbone and head set, per-member classifiers,
    /// diversity on class probabilities.
    C2y,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Rashomon => "rashomon",
            Mode::RandomInit => "random_init",
            Mode::X2c => "x2c",
            Mode::C2y => "c2y",
        }
    }

    fn backbone_instances(self, m: usize) -> usize {
        match self {
            Mode::Rashomon | Mode::C2y => 1,
            Mode::RandomInit | Mode::X2c => m,
        }
    }
}

/// Shape description of a slice; doubles as the checkpoint manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SliceSpec {
    pub mode: Mode,
    pub m: usize,
    pub input_dim: usize,
    /// Output width of each backbone layer.
    pub hidden: Vec<usize>,
    pub p: usize,
    pub k: usize,
    /// Backbone layers carrying adapters (rashomon mode only).
    pub attach: Vec<usize>,
    /// One flag per attach point: `true` means a single adapter is shared by
    /// every member at that layer.
    pub sharing_mask: Vec<bool>,
    pub rank: usize,
    pub scale: f64,
    pub dropout_rate: f64,
    /// Initialization seed per member for heads and classifiers
    /// (random_init only; other modes initialize members identically).
    #[serde(default)]
    pub member_seeds: Vec<u64>,
}

impl SliceSpec {
    pub fn layer_dims(&self, l: usize) -> (usize, usize) {
        let d_in = if l == 0 { self.input_dim } else { self.hidden[l - 1] };
        (d_in, self.hidden[l])
    }

    pub fn feature_dim(&self) -> usize {
        *self.hidden.last().expect("validated: at least one layer")
    }

    fn has_adapters(&self) -> bool {
        self.mode == Mode::Rashomon
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: String| Err(Error::config(format!("model.{field}"), reason));
        if self.m == 0 {
            return bad("m", "need at least one model".into());
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden", format!("{:?} must be non-empty positive widths", self.hidden));
        }
        if self.input_dim == 0 || self.p == 0 || self.k < 2 {
            return bad("dims", "input_dim and p must be positive and k at least 2".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("adapter_dropout", format!("{} outside [0, 1)", self.dropout_rate));
        }
        if !(self.scale.is_finite() && self.scale >= 0.0) {
            return bad("lora_alpha", format!("scale {} must be finite and non-negative", self.scale));
        }
        if self.sharing_mask.len() != self.attach.len() {
            return bad(
                "shared",
                format!("{} flags for {} attach points", self.sharing_mask.len(), self.attach.len()),
            );
        }
        let mut seen = vec![false; self.hidden.len()];
        for &l in &self.attach {
            if l >= self.hidden.len() {
                return bad("attach", format!("layer {l} does not exist"));
            }
            if std::mem::replace(&mut seen[l], true) {
                return bad("attach", format!("layer {l} listed twice"));
            }
            let (i, o) = self.layer_dims(l);
            if self.has_adapters() && (self.rank == 0 || self.rank > i.min(o)) {
                return bad(
                    "rank",
                    format!("rank {} must be in 1..={} at layer {l}", self.rank, i.min(o)),
                );
            }
        }
        if self.mode == Mode::RandomInit && !self.member_seeds.is_empty() && self.member_seeds.len() != self.m {
            return bad("member_seeds", format!("{} seeds for {} members", self.member_seeds.len(), self.m));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Backbone,
    Adapter,
    Head,
    Classifier,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub role: Role,
    pub trainable: bool,
    pub value: Tensor,
}

/// Parameter indices of one linear map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LinearIdx {
    pub w: usize,
    pub b: usize,
}

/// Parameter indices of one adapter: `u` is `d_out × r`, `v` is `r × d_in`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AdapterIdx {
    pub u: usize,
    pub v: usize,
}

/// Concept and class outputs of one member on the tape.
#[derive(Clone, Copy, Debug)]
pub struct ModelOutput {
    pub concept_logits: Var,
    pub concept_probs: Var,
    pub class_logits: Var,
}

/// Concept and class outputs of one member as plain tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// `n × p`
    pub concept_probs: Tensor,
    /// `n × K`
    pub class_logits: Tensor,
}

impl Prediction {
    pub fn classes(&self) -> Vec<usize> {
        let k = self.class_logits.cols();
        self.class_logits
            .values()
            .chunks(k)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                    .0
            })
            .collect()
    }
}

/// Adapter handles on a tape.
#[derive(Clone, Copy, Debug)]
pub struct AdapterVars {
    pub u: Var,
    pub v: Var,
}

/// `x·Wᵀ + b + scale·(dropout(x)·Vᵀ)·Uᵀ`. Dropout applies to the adapter
/// branch only and only when `dropout` is given with a positive rate.
pub fn adapted_linear(
    t: &mut Tape,
    x: Var,
    w: Var,
    b: Var,
    adapter: Option<AdapterVars>,
    scale: f64,
    dropout: Option<(f64, u64)>,
) -> Result<Var, TensorError> {
    let base = t.matmul_t(x, w)?;
    let base = t.add(base, b)?;
    let Some(a) = adapter else {
        return Ok(base);
    };
    let xin = match dropout {
        Some((rate, seed)) if rate > 0.0 => t.dropout(x, rate, seed)?,
        _ => x,
    };
    let z = t.matmul_t(xin, a.v)?;
    let z = t.matmul_t(z, a.u)?;
    let z = t.mul_scalar(z, scale)?;
    t.add(base, z)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RashomonSlice {
    spec: SliceSpec,
    params: Vec<Param>,
    backbone_of: Vec<usize>,
    /// `[instance][layer]`
    backbones: Vec<Vec<LinearIdx>>,
    /// `[model][layer]`
    adapters: Vec<Vec<Option<AdapterIdx>>>,
    heads: Vec<LinearIdx>,
    classifiers: Vec<LinearIdx>,
}

fn he_normal(seed: u64, tags: &[u64], rows: usize, cols: usize) -> Vec<f64> {
    let dist = Normal::new(0.0, (2.0 / cols as f64).sqrt()).expect("finite std");
    let mut r = rng::stream(seed, tags);
    (0..rows * cols).map(|_| dist.sample(&mut r)).collect()
}

fn uniform_fan_in(seed: u64, tags: &[u64], fan_in: usize, len: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let mut r = rng::stream(seed, tags);
    (0..len).map(|_| dist.sample(&mut r)).collect()
}

impl RashomonSlice {
    /// Builds a slice with every parameter initialized from `seed`.
    ///
    /// Adapters start with `U = 0` and `V ~ N(0, 1/d_in)`, so all members
    /// compute the same function until training moves them apart. Heads and
    /// classifiers are drawn once and copied to every member, except in
    /// random_init mode where each member draws from its own seed.
    pub fn new(spec: SliceSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut params = Vec::new();
        let push = |params: &mut Vec<Param>, name: String, role: Role, trainable: bool, t: Tensor| {
            params.push(Param {
                name,
                role,
                trainable,
                value: t.into_param(),
            });
            params.len() - 1
        };

        let layers = spec.hidden.len();
        let frozen = spec.mode == Mode::Rashomon;
        let mut backbones = Vec::new();
        for inst in 0..spec.mode.backbone_instances(spec.m) {
            let mut idx = Vec::with_capacity(layers);
            for l in 0..layers {
                let (i, o) = spec.layer_dims(l);
                let w = Tensor::new(&[o, i], he_normal(seed, &[BACKBONE, l as u64], o, i))?;
                let b = Tensor::zeros(&[o]);
                let w = push(&mut params, format!("backbone.{inst}.layer{l}.W"), Role::Backbone, !frozen, w);
                let b = push(&mut params, format!("backbone.{inst}.layer{l}.b"), Role::Backbone, !frozen, b);
                idx.push(LinearIdx { w, b });
            }
            backbones.push(idx);
        }
        let backbone_of = (0..spec.m)
            .map(|m| if backbones.len() == 1 { 0 } else { m })
            .collect();

        let mut adapters = vec![vec![None; layers]; spec.m];
        if spec.has_adapters() {
            for (a, (&l, &shared)) in spec.attach.iter().zip(&spec.sharing_mask).enumerate() {
                let (i, o) = spec.layer_dims(l);
                let instances = if shared { 1 } else { spec.m };
                for inst in 0..instances {
                    let std = (1.0 / i as f64).sqrt();
                    let dist = Normal::new(0.0, std).expect("finite std");
                    let mut r = rng::stream(seed, &[ADAPTER, a as u64, inst as u64]);
                    let v: Vec<f64> = (0..spec.rank * i).map(|_| dist.sample(&mut r)).collect();
                    let tag = if shared { "shared".to_string() } else { inst.to_string() };
                    let u = push(
                        &mut params,
                        format!("adapter.layer{l}.{tag}.U"),
                        Role::Adapter,
                        true,
                        Tensor::zeros(&[o, spec.rank]),
                    );
                    let v = push(
                        &mut params,
                        format!("adapter.layer{l}.{tag}.V"),
                        Role::Adapter,
                        true,
                        Tensor::new(&[spec.rank, i], v)?,
                    );
                    let ai = AdapterIdx { u, v };
                    if shared {
                        for row in adapters.iter_mut() {
                            row[l] = Some(ai);
                        }
                    } else {
                        adapters[inst][l] = Some(ai);
                    }
                }
            }
        }

        let member_seed = |m: usize| -> u64 {
            if spec.mode == Mode::RandomInit {
                spec.member_seeds
                    .get(m)
                    .copied()
                    .unwrap_or_else(|| rng::derive(seed, &[m as u64]))
            } else {
                seed
            }
        };
        let d = spec.feature_dim();
        let head_sets = if spec.mode == Mode::C2y { 1 } else { spec.m };
        let mut heads = Vec::with_capacity(spec.m);
        for h in 0..head_sets {
            let s = member_seed(h);
            let w = Tensor::new(&[spec.p, d], uniform_fan_in(s, &[HEAD, 0], d, spec.p * d))?;
            let b = Tensor::new(&[spec.p], uniform_fan_in(s, &[HEAD, 1], d, spec.p))?;
            let w = push(&mut params, format!("head.{h}.W"), Role::Head, true, w);
            let b = push(&mut params, format!("head.{h}.b"), Role::Head, true, b);
            heads.push(LinearIdx { w, b });
        }
        while heads.len() < spec.m {
            heads.push(heads[0]);
        }
        let mut classifiers = Vec::with_capacity(spec.m);
        for m in 0..spec.m {
            let s = member_seed(m);
            let (k, p) = (spec.k, spec.p);
            let w = Tensor::new(&[k, p], uniform_fan_in(s, &[CLASSIFIER, 0], p, k * p))?;
            let b = Tensor::new(&[k], uniform_fan_in(s, &[CLASSIFIER, 1], p, k))?;
            let w = push(&mut params, format!("classifier.{m}.W"), Role::Classifier, true, w);
            let b = push(&mut params, format!("classifier.{m}.b"), Role::Classifier, true, b);
            classifiers.push(LinearIdx { w, b });
        }

        Ok(RashomonSlice {
            spec,
            params,
            backbone_of,
            backbones,
            adapters,
            heads,
            classifiers,
        })
    }

    pub fn spec(&self) -> &SliceSpec {
        &self.spec
    }

    pub fn m(&self) -> usize {
        self.spec.m
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn param(&self, idx: usize) -> &Tensor {
        &self.params[idx].value
    }

    pub fn param_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.params[idx].value
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn head(&self, m: usize) -> LinearIdx {
        self.heads[m]
    }

    pub fn classifier(&self, m: usize) -> LinearIdx {
        self.classifiers[m]
    }

    pub fn adapter(&self, m: usize, layer: usize) -> Option<AdapterIdx> {
        self.adapters.get(m).and_then(|row| row.get(layer).copied().flatten())
    }

    pub fn backbone_layer(&self, m: usize, layer: usize) -> LinearIdx {
        self.backbones[self.backbone_of[m]][layer]
    }

    /// Trainable parameters in a fixed order, each flagged with whether it
    /// belongs to the concept-head set used for the α statistic.
    pub fn trainable_parameters(&self) -> Vec<(&str, &Tensor, bool)> {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| (p.name.as_str(), &p.value, p.role == Role::Head))
            .collect()
    }

    pub fn trainable_indices(&self) -> Vec<usize> {
        (0..self.params.len()).filter(|&i| self.params[i].trainable).collect()
    }

    /// Indices of the concept-head weights and biases.
    pub fn head_indices(&self) -> Vec<usize> {
        (0..self.params.len())
            .filter(|&i| self.params[i].role == Role::Head)
            .collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn adapter_tensor_count(&self) -> usize {
        self.params.iter().filter(|p| p.role == Role::Adapter).count()
    }

    /// Every parameter index read by member `m`, in forward order.
    pub fn model_param_indices(&self, m: usize) -> Vec<usize> {
        let mut out = Vec::new();
        for l in 0..self.spec.hidden.len() {
            let li = self.backbone_layer(m, l);
            out.extend([li.w, li.b]);
            if let Some(a) = self.adapter(m, l) {
                out.extend([a.u, a.v]);
            }
        }
        out.extend([self.heads[m].w, self.heads[m].b]);
        out.extend([self.classifiers[m].w, self.classifiers[m].b]);
        out
    }

    /// SHA-256 over the backbone tensors.
    pub fn backbone_digest(&self) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| p.role == Role::Backbone) {
            h.update(p.name.as_bytes());
            h.update(p.value.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// `W + scale·U·V` for member `m` at `layer`.
    pub fn effective_weight(&self, m: usize, layer: usize) -> Result<Tensor> {
        if m >= self.spec.m {
            return Err(Error::Argument {
                field: "model".into(),
                detail: format!("index {m} out of range for {} models", self.spec.m),
            });
        }
        let a = self.adapter(m, layer).ok_or_else(|| Error::Argument {
            field: "layer".into(),
            detail: format!("layer {layer} has no adapter"),
        })?;
        let w = self.param(self.backbone_layer(m, layer).w);
        let (u, v) = (self.param(a.u), self.param(a.v));
        let (o, i, r) = (w.rows(), w.cols(), self.spec.rank);
        let mut out = w.values().to_vec();
        for row in 0..o {
            for col in 0..i {
                let uv: f64 = (0..r).map(|q| u.at(row, q) * v.at(q, col)).sum();
                out[row * i + col] += self.spec.scale * uv;
            }
        }
        Ok(Tensor::new(&[o, i], out)?)
    }

    /// Puts every parameter on the tape; trainable ones require grad.
    pub fn bind(&self, t: &mut Tape) -> Result<Vec<Var>, TensorError> {
        self.params
            .iter()
            .map(|p| t.leaf(p.value.clone(), p.trainable))
            .collect()
    }

    /// Puts every parameter on the tape as a constant.
    pub fn bind_frozen(&self, t: &mut Tape) -> Result<Vec<Var>, TensorError> {
        self.params
            .iter()
            .map(|p| t.constant(p.value.clone()))
            .collect()
    }

    /// Forward pass of member `m`. `vars` maps parameter index to tape
    /// variable. Dropout inside adapters runs only when `train` is set, with
    /// masks derived from `seed` and the layer index.
    pub fn forward_with(
        &self,
        t: &mut Tape,
        x: Var,
        m: usize,
        vars: &dyn Fn(usize) -> Var,
        train: bool,
        seed: u64,
    ) -> Result<ModelOutput, TensorError> {
        let mut h = x;
        for l in 0..self.spec.hidden.len() {
            let li = self.backbone_layer(m, l);
            let adapter = self.adapter(m, l).map(|a| AdapterVars {
                u: vars(a.u),
                v: vars(a.v),
            });
            let dropout = train.then(|| (self.spec.dropout_rate, rng::derive(seed, &[l as u64])));
            h = adapted_linear(t, h, vars(li.w), vars(li.b), adapter, self.spec.scale, dropout)?;
            h = t.relu(h)?;
        }
        let head = self.heads[m];
        let z = t.matmul_t(h, vars(head.w))?;
        let concept_logits = t.add(z, vars(head.b))?;
        let concept_probs = t.sigmoid(concept_logits)?;
        let cls = self.classifiers[m];
        let y = t.matmul_t(concept_probs, vars(cls.w))?;
        let class_logits = t.add(y, vars(cls.b))?;
        Ok(ModelOutput {
            concept_logits,
            concept_probs,
            class_logits,
        })
    }

    /// Forward pass of member `m` from bound parameters, optionally inside a
    /// checkpoint region whose inputs are `x` and the member's parameters.
    pub fn slice_forward(
        &self,
        t: &mut Tape,
        bound: &[Var],
        x: Var,
        m: usize,
        train: bool,
        seed: u64,
        checkpoint: bool,
    ) -> Result<ModelOutput> {
        if m >= self.spec.m {
            return Err(Error::Argument {
                field: "model".into(),
                detail: format!("index {m} out of range for {} models", self.spec.m),
            });
        }
        if !checkpoint {
            return Ok(self.forward_with(t, x, m, &|i| bound[i], train, seed)?);
        }
        let idx = self.model_param_indices(m);
        let mut inputs = Vec::with_capacity(idx.len() + 1);
        inputs.push(x);
        inputs.extend(idx.iter().map(|&i| bound[i]));
        let outs = t.checkpoint(&inputs, seed, |t, ins, s| {
            let pos: HashMap<usize, Var> = idx.iter().copied().zip(ins[1..].iter().copied()).collect();
            let o = self.forward_with(t, ins[0], m, &|i| pos[&i], train, s)?;
            Ok::<_, TensorError>(vec![o.concept_logits, o.concept_probs, o.class_logits])
        })?;
        Ok(ModelOutput {
            concept_logits: outs[0],
            concept_probs: outs[1],
            class_logits: outs[2],
        })
    }

    /// Inference for every member (no dropout).
    pub fn predict(&self, x: &Tensor) -> Result<Vec<Prediction>> {
        (0..self.spec.m).map(|m| self.predict_one(x, m)).collect()
    }

    pub fn predict_one(&self, x: &Tensor, m: usize) -> Result<Prediction> {
        if x.shape().len() != 2 || x.cols() != self.spec.input_dim {
            return Err(Error::Argument {
                field: "input_dim".into(),
                detail: format!("model expects {} features, got shape {:?}", self.spec.input_dim, x.shape()),
            });
        }
        let mut t = Tape::new();
        let idx = self.model_param_indices(m);
        let mut vars = HashMap::with_capacity(idx.len());
        for i in idx {
            vars.insert(i, t.constant(self.params[i].value.clone())?);
        }
        let xv = t.constant(x.clone())?;
        let o = self.forward_with(&mut t, xv, m, &|i| vars[&i], false, 0)?;
        Ok(Prediction {
            concept_probs: t.value(o.concept_probs)?,
            class_logits: t.value(o.class_logits)?,
        })
    }

    /// Overwrites parameter values from `values`, which must follow
    /// [`Self::params`] order and shapes.
    pub fn set_values(&mut self, values: &[Tensor]) {
        for (p, v) in self.params.iter_mut().zip(values) {
            debug_assert_eq!(p.value.shape(), v.shape());
            p.value.values_mut().copy_from_slice(v.values());
        }
    }

    pub fn snapshot(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
        let named: Vec<(&str, &Tensor)> = self.params.iter().map(|p| (p.name.as_str(), &p.value)).collect();
        dump::write(dir, WEIGHTS_STEM, &named)?;
        let path = dir.join(MODEL_FILE);
        let json = serde_json::to_vec_pretty(&self.spec).expect("spec serializes");
        fs::write(&path, json).map_err(Error::io(&path))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MODEL_FILE);
        let raw = fs::read(&path).map_err(Error::io(&path))?;
        let spec: SliceSpec =
            serde_json::from_slice(&raw).map_err(|e| Error::format(&path, "model", e.to_string()))?;
        let mut slice = RashomonSlice::new(spec, 0).map_err(|e| match e {
            Error::Config { field, reason } => Error::format(&path, field, reason),
            other => other,
        })?;
        let tensors = dump::read(dir, WEIGHTS_STEM)?;
        let wpath = dump::manifest_path(dir, WEIGHTS_STEM);
        if tensors.len() != slice.params.len() {
            return Err(Error::format(
                &wpath,
                "tensors",
                format!("expected {} tensors, found {}", slice.params.len(), tensors.len()),
            ));
        }
        for (p, (name, t)) in slice.params.iter_mut().zip(tensors) {
            if p.name != name || p.value.shape() != t.shape() {
                return Err(Error::format(
                    &wpath,
                    &p.name,
                    format!("found `{name}` with shape {:?}, expected shape {:?}", t.shape(), p.value.shape()),
                ));
            }
            p.value = t.into_param();
        }
        Ok(slice)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn desk_spec(mode: Mode, m: usize) -> SliceSpec {
        SliceSpec {
            mode,
            m,
            input_dim: 16,
            hidden: vec![128, 128, 128],
            p: 12,
            k: 8,
            attach: vec![0, 1, 2],
            sharing_mask: vec![false; 3],
            rank: 2,
            scale: 2.0,
            dropout_rate: 0.1,
            member_seeds: Vec::new(),
        }
    }

    #[test]
    fn hand_adapted_linear() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap()).unwrap();
        let w = t.constant(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
        let b = t.constant(Tensor::zeros(&[2])).unwrap();
        let u = t.constant(Tensor::new(&[2, 1], vec![1.0, 0.0]).unwrap()).unwrap();
        let v = t.constant(Tensor::new(&[1, 2], vec![1.0, 1.0]).unwrap()).unwrap();
        let y = adapted_linear(&mut t, x, w, b, Some(AdapterVars { u, v }), 2.0, None).unwrap();
        assert_eq!(t.values(y).unwrap(), &[7.0, 2.0]);
    }

    #[test]
    fn desk_parameter_counts() {
        // adapters: layer 0 has U 128x2 + V 2x16 = 288, layers 1-2 have
        // 256 + 256 = 512 each; heads 12x128 + 12 = 1548; classifier 8x12 + 8 = 104
        let r = RashomonSlice::new(desk_spec(Mode::Rashomon, 4), 1).unwrap();
        assert_eq!(r.trainable_count(), 4 * (288 + 512 + 512 + 1548 + 104));
        assert_eq!(r.trainable_count(), 11856);
        // x2c adds per-member backbones: 16x128+128 + 2x(128x128+128) = 35200
        let x = RashomonSlice::new(desk_spec(Mode::X2c, 4), 1).unwrap();
        assert_eq!(x.trainable_count(), 4 * (35200 + 1548 + 104));
        assert_eq!(x.trainable_count(), 147408);
    }

    #[test]
    fn sharing_collapses_adapter_tensors() {
        let mut spec = desk_spec(Mode::Rashomon, 4);
        assert_eq!(RashomonSlice::new(spec.clone(), 1).unwrap().adapter_tensor_count(), 4 * 3 * 2);
        spec.sharing_mask = vec![true; 3];
        let s = RashomonSlice::new(spec, 1).unwrap();
        assert_eq!(s.adapter_tensor_count(), 3 * 2);
        assert_eq!(s.adapter(0, 1), s.adapter(3, 1));
    }

    #[test]
    fn fresh_slice_is_invariant_in_member() {
        let s = RashomonSlice::new(desk_spec(Mode::Rashomon, 3), 5).unwrap();
        let x = Tensor::new(&[2, 16], (0..32).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let p = s.predict(&x).unwrap();
        assert!(p[0].concept_probs.bit_eq(&p[2].concept_probs));
        assert!(p[0].class_logits.bit_eq(&p[1].class_logits));
    }

    #[test]
    fn rank_above_min_dim_rejected() {
        let mut spec = desk_spec(Mode::Rashomon, 2);
        spec.rank = 17;
        let err = RashomonSlice::new(spec, 0).unwrap_err();
        assert!(err.to_string().contains("model.rank"), "{err}");
    }
}
