//! Synthetic concept datasets with planted redundancy.
//!
//! `groups` latent bits are drawn per sample. Every concept of group `g`
//! copies bit `g` up to independent flips, distractor concepts are fair coin
//! flips, the class is the binary encoding of the latent bits, and inputs are
//! a fixed random linear embedding of the signed concept vector plus
//! Gaussian noise. Any one group member therefore carries the same label
//! information as the others.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{dump, Tensor};

const LATENT: u64 = 1;
const EMBED: u64 = 2;
const NOISE: u64 = 3;
const SPLIT: u64 = 4;

pub const META_FILE: &str = "meta.json";
pub const DATA_STEM: &str = "data";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedConfig {
    /// Total concepts: `groups * group_size` plus distractors.
    pub p: usize,
    pub groups: usize,
    pub group_size: usize,
    pub classes: usize,
    pub n: usize,
    pub input_dim: usize,
    pub noise_std: f64,
    pub flip_rate: f64,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
    pub seed: u64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        PlantedConfig {
            p: 12,
            groups: 3,
            group_size: 3,
            classes: 8,
            n: 3000,
            input_dim: 16,
            noise_std: 0.05,
            flip_rate: 0.02,
            split: [0.7, 0.15, 0.15],
            seed: 0,
        }
    }
}

impl PlantedConfig {
    pub fn distractors(&self) -> usize {
        self.p.saturating_sub(self.groups * self.group_size)
    }

    /// Concept indices belonging to group `g`.
    pub fn group_members(&self, g: usize) -> std::ops::Range<usize> {
        g * self.group_size..(g + 1) * self.group_size
    }

    pub fn validate(&self) -> Result<()> {
        let f = |name: &str, reason: String| Err(Error::config(format!("data.{name}"), reason));
        if self.groups == 0 {
            return f("groups", "must be positive".into());
        }
        if self.group_size == 0 {
            return f("group_size", "must be positive".into());
        }
        if self.p < self.groups * self.group_size {
            return f(
                "p",
                format!(
                    "{} is smaller than groups * group_size = {}",
                    self.p,
                    self.groups * self.group_size
                ),
            );
        }
        if self.classes < 2 {
            return f("classes", "need at least 2 classes".into());
        }
        if self.groups >= 63 || self.classes as u128 > 1u128 << self.groups {
            return f(
                "classes",
                format!("{} classes exceed 2^groups for {} groups", self.classes, self.groups),
            );
        }
        if self.input_dim == 0 {
            return f("input_dim", "must be positive".into());
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return f("noise_std", format!("{} is not a non-negative real", self.noise_std));
        }
        if !(0.0..0.5).contains(&self.flip_rate) {
            return f("flip_rate", format!("{} outside [0, 0.5)", self.flip_rate));
        }
        if self.split.iter().any(|s| !(*s > 0.0 && *s < 1.0))
            || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return f("split", format!("{:?} must be three positive fractions summing to 1", self.split));
        }
        let sizes = self.split_sizes();
        if sizes.contains(&0) {
            return f("n", format!("{} samples leave an empty split {:?}", self.n, sizes));
        }
        Ok(())
    }

    /// Train, validation and test sizes.
    pub fn split_sizes(&self) -> [usize; 3] {
        let train = (self.n as f64 * self.split[0]).round() as usize;
        let val = (self.n as f64 * self.split[1]).round() as usize;
        let train = train.min(self.n);
        let val = val.min(self.n - train);
        [train, val, self.n - train - val]
    }

    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Rows of one split, materialized.
#[derive(Debug)]
pub struct Batch {
    pub x: Tensor,
    pub c: Tensor,
    pub y: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConceptDataset {
    pub config: PlantedConfig,
    /// `n × input_dim`
    pub x: Tensor,
    /// `n × p`, entries 0 or 1
    pub c: Tensor,
    pub y: Vec<usize>,
    pub splits: Splits,
}

pub fn generate(cfg: &PlantedConfig) -> Result<ConceptDataset> {
    cfg.validate()?;
    let (n, p, d) = (cfg.n, cfg.p, cfg.input_dim);

    let mut r = rng::stream(cfg.seed, &[LATENT]);
    let mut c = vec![0.0; n * p];
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let mut code = 0usize;
        for g in 0..cfg.groups {
            let bit = r.random::<bool>();
            if bit {
                code |= 1 << g;
            }
            for j in cfg.group_members(g) {
                let flip = r.random::<f64>() < cfg.flip_rate;
                c[i * p + j] = if bit != flip { 1.0 } else { 0.0 };
            }
        }
        for j in cfg.groups * cfg.group_size..p {
            c[i * p + j] = if r.random::<bool>() { 1.0 } else { 0.0 };
        }
        y.push(code % cfg.classes);
    }

    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut er = rng::stream(cfg.seed, &[EMBED]);
    let scale = 1.0 / (p as f64).sqrt();
    let embed: Vec<f64> = (0..p * d).map(|_| scale * unit.sample(&mut er)).collect();

    let mut nr = rng::stream(cfg.seed, &[NOISE]);
    let mut x = vec![0.0; n * d];
    for i in 0..n {
        let row = &mut x[i * d..(i + 1) * d];
        for j in 0..p {
            let s = 2.0 * c[i * p + j] - 1.0;
            for (xv, e) in row.iter_mut().zip(&embed[j * d..(j + 1) * d]) {
                *xv += s * e;
            }
        }
        if cfg.noise_std > 0.0 {
            for xv in row.iter_mut() {
                *xv += cfg.noise_std * unit.sample(&mut nr);
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(cfg.seed, &[SPLIT]));
    let [a, b, _] = cfg.split_sizes();
    let mut train = order[..a].to_vec();
    let mut val = order[a..a + b].to_vec();
    let mut test = order[a + b..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();

    Ok(ConceptDataset {
        config: cfg.clone(),
        x: Tensor::new(&[n, d], x)?,
        c: Tensor::new(&[n, p], c)?,
        y,
        splits: Splits { train, val, test },
    })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    config: PlantedConfig,
    config_digest: String,
    splits: Splits,
    blob_sha256: String,
}

impl ConceptDataset {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.config.p
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    pub fn indices(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.splits.train,
            Split::Val => &self.splits.val,
            Split::Test => &self.splits.test,
        }
    }

    /// Gathers the given rows.
    pub fn rows(&self, idx: &[usize]) -> Batch {
        let (d, p) = (self.input_dim(), self.p());
        let mut x = Vec::with_capacity(idx.len() * d);
        let mut c = Vec::with_capacity(idx.len() * p);
        let mut y = Vec::with_capacity(idx.len());
        for &i in idx {
            x.extend_from_slice(self.x.row(i));
            c.extend_from_slice(self.c.row(i));
            y.push(self.y[i]);
        }
        Batch {
            x: Tensor::new(&[idx.len(), d], x).expect("row gather"),
            c: Tensor::new(&[idx.len(), p], c).expect("row gather"),
            y,
        }
    }

    pub fn split(&self, split: Split) -> Batch {
        self.rows(self.indices(split))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
        let y = Tensor::new(&[self.n()], self.y.iter().map(|&v| v as f64).collect())?;
        let manifest = dump::write(dir, DATA_STEM, &[("X", &self.x), ("C", &self.c), ("Y", &y)])?;
        let meta = Meta {
            config: self.config.clone(),
            config_digest: self.config.digest(),
            splits: self.splits.clone(),
            blob_sha256: manifest.sha256,
        };
        let path = dir.join(META_FILE);
        let json = serde_json::to_vec_pretty(&meta).expect("meta serializes");
        fs::write(&path, json).map_err(Error::io(&path))
    }

    /// Loads and validates a dataset directory. Any disagreement between the
    /// metadata and the stored tensors is reported with the offending field.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(META_FILE);
        let raw = fs::read(&path).map_err(Error::io(&path))?;
        let meta: Meta = serde_json::from_slice(&raw)
            .map_err(|e| Error::format(&path, "meta", e.to_string()))?;
        meta.config.validate().map_err(|e| match e {
            Error::Config { field, reason } => Error::format(&path, field, reason),
            other => other,
        })?;
        if meta.config.digest() != meta.config_digest {
            return Err(Error::format(&path, "config_digest", "does not match the stored config"));
        }
        let manifest = dump::read_manifest(dir, DATA_STEM)?;
        if manifest.sha256 != meta.blob_sha256 {
            return Err(Error::format(&path, "blob_sha256", "does not match the tensor manifest"));
        }
        let mut tensors = dump::read(dir, DATA_STEM)?;
        let cfg = &meta.config;
        let mut take = |name: &str| {
            tensors
                .iter()
                .position(|(n, _)| n == name)
                .map(|i| tensors.swap_remove(i).1)
                .ok_or_else(|| Error::format(dump::manifest_path(dir, DATA_STEM), name, "tensor missing"))
        };
        let x = take("X")?;
        let c = take("C")?;
        let yt = take("Y")?;

        let n = cfg.n;
        let check = |t: &Tensor, want: [usize; 2], name: &str| -> Result<()> {
            if t.shape().len() != 2 || t.shape()[0] != want[0] {
                return Err(Error::format(
                    &path,
                    "n",
                    format!("n = {} but tensor {name} has shape {:?}", want[0], t.shape()),
                ));
            }
            Ok(())
        };
        check(&x, [n, cfg.input_dim], "X")?;
        if x.shape()[1] != cfg.input_dim {
            return Err(Error::format(
                &path,
                "input_dim",
                format!("input_dim = {} but X has {} columns", cfg.input_dim, x.shape()[1]),
            ));
        }
        check(&c, [n, cfg.p], "C")?;
        if c.shape()[1] != cfg.p {
            return Err(Error::format(
                &path,
                "p",
                format!("p = {} but C has {} columns", cfg.p, c.shape()[1]),
            ));
        }
        if c.values().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::format(&path, "C", "concept labels must be 0 or 1"));
        }
        if yt.shape() != [n] {
            return Err(Error::format(&path, "n", format!("n = {n} but Y has shape {:?}", yt.shape())));
        }
        let mut y = Vec::with_capacity(n);
        for &v in yt.values() {
            if v.fract() != 0.0 || v < 0.0 || v as usize >= cfg.classes {
                return Err(Error::format(
                    &path,
                    "classes",
                    format!("label {v} is not a class index below {}", cfg.classes),
                ));
            }
            y.push(v as usize);
        }
        let mut seen = vec![false; n];
        for &i in meta.splits.train.iter().chain(&meta.splits.val).chain(&meta.splits.test) {
            if i >= n || seen[i] {
                return Err(Error::format(&path, "splits", format!("row {i} out of range or repeated")));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::format(&path, "splits", "splits do not cover every row"));
        }
        Ok(ConceptDataset {
            config: meta.config,
            x,
            c,
            y,
            splits: meta.splits,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> PlantedConfig {
        PlantedConfig {
            n: 10,
            seed,
            ..PlantedConfig::default()
        }
    }

    #[test]
    fn zero_flip_makes_group_columns_identical() {
        let cfg = PlantedConfig {
            n: 200,
            flip_rate: 0.0,
            ..PlantedConfig::default()
        };
        let d = generate(&cfg).unwrap();
        for g in 0..cfg.groups {
            let m: Vec<usize> = cfg.group_members(g).collect();
            for i in 0..cfg.n {
                let first = d.c.at(i, m[0]);
                assert!(m.iter().all(|&j| d.c.at(i, j) == first));
            }
        }
    }

    #[test]
    fn labels_are_binary_codes_of_group_bits() {
        let cfg = PlantedConfig {
            n: 100,
            flip_rate: 0.0,
            ..PlantedConfig::default()
        };
        let d = generate(&cfg).unwrap();
        for i in 0..cfg.n {
            let code: usize = (0..cfg.groups)
                .map(|g| (d.c.at(i, g * cfg.group_size) as usize) << g)
                .sum();
            assert_eq!(d.y[i], code);
        }
    }

    #[test]
    fn too_many_classes_rejected() {
        let cfg = PlantedConfig {
            classes: 9,
            ..PlantedConfig::default()
        };
        let err = generate(&cfg).unwrap_err();
        assert!(err.to_string().contains("data.classes"), "{err}");
    }

    #[test]
    fn splits_partition_rows() {
        let d = generate(&PlantedConfig::default()).unwrap();
        let mut all: Vec<usize> = d
            .splits
            .train
            .iter()
            .chain(&d.splits.val)
            .chain(&d.splits.test)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..3000).collect::<Vec<_>>());
        assert_eq!(d.splits.train.len(), 2100);
        assert_eq!(d.splits.val.len(), 450);
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = generate(&small(3)).unwrap();
        d.save(dir.path()).unwrap();
        assert_eq!(ConceptDataset::load(dir.path()).unwrap(), d);
    }
}
