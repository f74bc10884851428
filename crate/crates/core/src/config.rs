//! Run configuration, read from TOML. Every section has defaults, so an
//! empty file is a valid configuration.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::PlantedConfig;
use crate::error::{Error, Result};
use crate::model::{Mode, SliceSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub p: usize,
    pub groups: usize,
    pub group_size: usize,
    pub classes: usize,
    pub n: usize,
    pub input_dim: usize,
    pub noise_std: f64,
    pub flip_rate: f64,
    pub split: [f64; 3],
}

impl Default for DataSection {
    fn default() -> Self {
        let d = PlantedConfig::default();
        DataSection {
            p: d.p,
            groups: d.groups,
            group_size: d.group_size,
            classes: d.classes,
            n: d.n,
            input_dim: d.input_dim,
            noise_std: d.noise_std,
            flip_rate: d.flip_rate,
            split: d.split,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub m: usize,
    pub hidden: Vec<usize>,
    pub rank: usize,
    /// Adapter updates are scaled by `lora_alpha / rank`.
    pub lora_alpha: f64,
    pub adapter_dropout: f64,
    pub attach: Vec<usize>,
    /// Per attach point; empty means every attach point is independent.
    pub shared: Vec<bool>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            m: 4,
            hidden: vec![128, 128, 128],
            rank: 2,
            lora_alpha: 4.0,
            adapter_dropout: 0.1,
            attach: vec![0, 1, 2],
            shared: Vec::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaUpdate {
    /// Recomputed at the end of every epoch from the last batch's head
    /// gradients.
    PerEpoch,
    Fixed(f64),
}

/// How pairwise concept similarity is taken over a batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityMode {
    /// Cosine per sample, averaged over the batch.
    PerSample,
    /// Cosine of the batch-flattened vectors.
    Flattened,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda: f64,
    pub mode: Mode,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub checkpointing: bool,
    pub alpha: AlphaUpdate,
    pub similarity: SimilarityMode,
    /// Initialization seeds of random_init members; empty derives distinct
    /// seeds from the run seed.
    pub member_seeds: Vec<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 1.0,
            mode: Mode::Rashomon,
            learning_rate: 1e-4,
            batch_size: 64,
            max_epochs: 500,
            patience: 30,
            checkpointing: true,
            alpha: AlphaUpdate::PerEpoch,
            similarity: SimilarityMode::PerSample,
            member_seeds: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Size of each member's top-k concept set.
    pub top_k: usize,
    /// Number of leading right singular vectors compared per layer.
    pub eigvec_k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { top_k: 3, eigvec_k: 16 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    /// Attach layers freed one at a time; empty means all of them.
    pub layers: Vec<usize>,
    /// Also run the all-shared control configuration.
    pub control: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            layers: Vec::new(),
            control: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub m_values: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            m_values: vec![1, 2, 4, 8],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root seed; every random stream of a run derives from it.
    pub seed: u64,
    pub data: DataSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            data: DataSection::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            ablation: AblationConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

fn check(ok: bool, field: &str, reason: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::config(field, reason()))
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let span = e.span().map(|s| format!(" at byte {}", s.start)).unwrap_or_default();
            Error::config("config", format!("{}{span}", e.message()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form; recomputable from the file.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    pub fn planted(&self) -> PlantedConfig {
        let d = &self.data;
        PlantedConfig {
            p: d.p,
            groups: d.groups,
            group_size: d.group_size,
            classes: d.classes,
            n: d.n,
            input_dim: d.input_dim,
            noise_std: d.noise_std,
            flip_rate: d.flip_rate,
            split: d.split,
            seed: self.seed,
        }
    }

    /// The slice layout for this config and dataset dimensions.
    pub fn slice_spec(&self, input_dim: usize, p: usize, k: usize) -> SliceSpec {
        let mc = &self.model;
        let sharing_mask = if mc.shared.is_empty() {
            vec![false; mc.attach.len()]
        } else {
            mc.shared.clone()
        };
        SliceSpec {
            mode: self.train.mode,
            m: mc.m,
            input_dim,
            hidden: mc.hidden.clone(),
            p,
            k,
            attach: mc.attach.clone(),
            sharing_mask,
            rank: mc.rank,
            scale: mc.lora_alpha / mc.rank.max(1) as f64,
            dropout_rate: mc.adapter_dropout,
            member_seeds: self.train.member_seeds.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.planted().validate()?;
        let t = &self.train;
        check(t.batch_size > 0, "train.batch_size", || "must be positive".into())?;
        check(t.learning_rate.is_finite() && t.learning_rate >= 0.0, "train.learning_rate", || {
            format!("{} must be a finite non-negative real", t.learning_rate)
        })?;
        check(t.max_epochs > 0, "train.max_epochs", || "must be positive".into())?;
        check(t.patience > 0, "train.patience", || "must be positive".into())?;
        check(t.lambda.is_finite() && t.lambda >= 0.0, "train.lambda", || {
            format!("{} must be a finite non-negative real", t.lambda)
        })?;
        if let AlphaUpdate::Fixed(a) = t.alpha {
            check((0.0..1.0).contains(&a), "train.alpha", || format!("fixed value {a} outside [0, 1)"))?;
        }
        let m = &self.model;
        check(m.rank > 0, "model.rank", || "must be positive".into())?;
        check(m.shared.is_empty() || m.shared.len() == m.attach.len(), "model.shared", || {
            format!("{} flags for {} attach points", m.shared.len(), m.attach.len())
        })?;
        self.slice_spec(self.data.input_dim, self.data.p, self.data.classes)
            .validate()?;
        let e = &self.eval;
        check(e.top_k >= 1 && e.top_k <= self.data.p, "eval.top_k", || {
            format!("{} must be in 1..={}", e.top_k, self.data.p)
        })?;
        let min_dim = (0..m.hidden.len())
            .filter(|l| m.attach.contains(l))
            .map(|l| {
                let i = if l == 0 { self.data.input_dim } else { m.hidden[l - 1] };
                i.min(m.hidden[l])
            })
            .min()
            .unwrap_or(usize::MAX);
        check(e.eigvec_k >= 1 && e.eigvec_k <= min_dim, "eval.eigvec_k", || {
            format!("{} must be in 1..={min_dim}", e.eigvec_k)
        })?;
        for &l in &self.ablation.layers {
            check(m.attach.contains(&l), "ablation.layers", || format!("layer {l} carries no adapter"))?;
        }
        let sv = &self.sweep.m_values;
        check(!sv.is_empty() && sv[0] >= 1, "sweep.m_values", || "must be non-empty and positive".into())?;
        check(sv.windows(2).all(|w| w[0] < w[1]), "sweep.m_values", || {
            format!("{sv:?} must be strictly increasing")
        })?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = RunConfig::from_toml("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.train.learning_rate, 1e-4);
        assert_eq!(c.train.patience, 30);
    }

    #[test]
    fn zero_batch_size_names_field() {
        let err = RunConfig::from_toml("[train]\nbatch_size = 0\n").unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("batch_size"), "{err}");
    }

    #[test]
    fn toml_round_trip_and_digest() {
        let mut c = RunConfig::default();
        c.train.alpha = AlphaUpdate::Fixed(0.0);
        c.train.mode = Mode::C2y;
        let back = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.digest(), c.digest());
        assert_ne!(c.digest(), RunConfig::default().digest());
    }

    #[test]
    fn unknown_key_rejected() {
        let err = RunConfig::from_toml("[train]\nbatchsize = 3\n").unwrap_err();
        assert!(err.to_string().contains("batchsize"), "{err}");
    }
}
