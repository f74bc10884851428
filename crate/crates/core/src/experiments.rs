//! Experiment drivers: single runs with their result directories, the
//! layer-wise adapter ablation, the slice-size sweep with memory probes,
//! and heatmap data export.
//!
//! A run directory holds `config.toml`, `log.jsonl`, `report.json` and a
//! `checkpoint/` subdirectory; sweeps and ablations add a `<name>.csv` and
//! `<name>.json` table next to their run directories.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{ConceptDataset, Split};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricsReport};
use crate::model::RashomonSlice;
use crate::rng;
use crate::train::{self, TrainState};

const PROBE: u64 = 30;

/// Writes `bytes` to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::format(path, "path", "not a file path"))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    let mut f = fs::File::create(&tmp).map_err(Error::io(&tmp))?;
    f.write_all(bytes).map_err(Error::io(&tmp))?;
    f.sync_all().map_err(Error::io(&tmp))?;
    drop(f);
    fs::rename(&tmp, path).map_err(Error::io(path))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("report serializes");
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::format(path, "row", e.to_string()))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::format(path, "row", e.to_string()))?;
    write_atomic(path, &bytes)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io(dir))
}

/// Rejects a dataset whose dimensions disagree with the config's data
/// section.
pub fn check_compatible(cfg: &RunConfig, data: &ConceptDataset) -> Result<()> {
    let pairs = [
        ("data.input_dim", cfg.data.input_dim, data.input_dim()),
        ("data.p", cfg.data.p, data.p()),
        ("data.classes", cfg.data.classes, data.classes()),
    ];
    for (field, want, got) in pairs {
        if want != got {
            return Err(Error::config(field, format!("config says {want} but the dataset has {got}")));
        }
    }
    Ok(())
}

#[derive(Debug)]
pub struct RunOutcome {
    pub slice: RashomonSlice,
    pub states: Vec<TrainState>,
    pub report: MetricsReport,
    /// The training log as line-delimited JSON.
    pub log: Vec<u8>,
}

impl RunOutcome {
    pub fn peak_bytes(&self) -> u64 {
        self.states.iter().map(TrainState::peak_bytes).max().unwrap_or(0)
    }
}

/// Builds, trains and evaluates (on the test split) one slice.
pub fn train_run(cfg: &RunConfig, data: &ConceptDataset) -> Result<RunOutcome> {
    cfg.validate()?;
    check_compatible(cfg, data)?;
    let spec = cfg.slice_spec(data.input_dim(), data.p(), data.classes());
    let mut slice = RashomonSlice::new(spec, cfg.seed)?;
    let mut log = Vec::new();
    let states = train::train(&mut slice, data, &cfg.train, cfg.seed, Some(&mut log))?;
    let report = metrics::evaluate(&slice, data, Split::Test, &cfg.eval, &cfg.digest())?;
    Ok(RunOutcome {
        slice,
        states,
        report,
        log,
    })
}

/// Writes a run directory for `outcome`.
pub fn write_run(dir: &Path, cfg: &RunConfig, outcome: &RunOutcome) -> Result<()> {
    ensure_dir(dir)?;
    write_atomic(&dir.join("config.toml"), cfg.to_toml().as_bytes())?;
    write_atomic(&dir.join("log.jsonl"), &outcome.log)?;
    write_json(&dir.join("report.json"), &outcome.report)?;
    outcome.slice.save(&dir.join("checkpoint"))
}

/// Peak activation bytes of one training step's backward pass on a freshly
/// initialised slice of `m` members, on the first training batch.
pub fn peak_probe(cfg: &RunConfig, data: &ConceptDataset, m: usize, checkpoint: bool) -> Result<u64> {
    let mut c = cfg.clone();
    c.model.m = m;
    let slice = RashomonSlice::new(c.slice_spec(data.input_dim(), data.p(), data.classes()), c.seed)?;
    let train_idx = data.indices(Split::Train);
    let batch = data.rows(&train_idx[..c.train.batch_size.min(train_idx.len())]);
    let members: Vec<usize> = (0..m).collect();
    let sg = train::loss_and_grads(
        &slice,
        &batch,
        &members,
        &c.train,
        0.5,
        rng::derive(c.seed, &[PROBE]),
        checkpoint,
    )?;
    Ok(sg.backward_peak_bytes)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// The attach layer whose adapters are independent; `None` for the
    /// all-shared control.
    pub freed_layer: Option<usize>,
    pub config_digest: String,
    pub trainable_params: usize,
    pub task_accuracy: f64,
    pub concept_accuracy: f64,
    pub concept_cosine: Option<f64>,
    pub concept_cka: Option<f64>,
    pub shap_similarity: Option<f64>,
    pub union_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub config_digest: String,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, layer: Option<usize>) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.freed_layer == layer)
    }
}

/// The configurations of an ablation: one per freed layer, then the
/// control when enabled.
pub fn ablation_configs(base: &RunConfig) -> Result<Vec<(Option<usize>, RunConfig)>> {
    base.validate()?;
    let attach = &base.model.attach;
    let layers = if base.ablation.layers.is_empty() {
        attach.clone()
    } else {
        base.ablation.layers.clone()
    };
    let mut out = Vec::new();
    for l in layers {
        if !attach.contains(&l) {
            return Err(Error::config("ablation.layers", format!("layer {l} carries no adapter")));
        }
        let mut c = base.clone();
        c.model.shared = attach.iter().map(|&a| a != l).collect();
        out.push((Some(l), c));
    }
    if base.ablation.control {
        let mut c = base.clone();
        c.model.shared = vec![true; attach.len()];
        out.push((None, c));
    }
    Ok(out)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Retrains from scratch under each ablation configuration. With `out`
/// set, each run gets a directory plus an aggregated `ablation.csv`.
pub fn run_layer_ablation(base: &RunConfig, data: &ConceptDataset, out: Option<&Path>) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for (layer, cfg) in ablation_configs(base)? {
        let outcome = train_run(&cfg, data)?;
        if let Some(dir) = out {
            let name = layer.map_or("control".to_string(), |l| format!("layer_{l}"));
            write_run(&dir.join(name), &cfg, &outcome)?;
        }
        let r = &outcome.report;
        rows.push(AblationRow {
            freed_layer: layer,
            config_digest: cfg.digest(),
            trainable_params: outcome.slice.trainable_count(),
            task_accuracy: mean(&r.task_accuracy),
            concept_accuracy: mean(&r.concept_accuracy),
            concept_cosine: r.concept_cosine.off_mean,
            concept_cka: r.concept_cka.off_mean,
            shap_similarity: r.shap_similarity.off_mean,
            union_size: r.union_size,
        });
    }
    let table = AblationTable {
        config_digest: base.digest(),
        rows,
    };
    if let Some(dir) = out {
        ensure_dir(dir)?;
        write_csv(&dir.join("ablation.csv"), &table.rows)?;
        write_json(&dir.join("ablation.json"), &table)?;
    }
    Ok(table)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub m: usize,
    pub config_digest: String,
    pub mean_task_accuracy: f64,
    pub hamming: Option<f64>,
    pub concept_cka: Option<f64>,
    pub concept_cosine: Option<f64>,
    pub shap_similarity: Option<f64>,
    pub union_size: usize,
    /// Largest per-step backward peak seen while training.
    pub train_peak_bytes: u64,
    pub probe_peak_checkpointed: u64,
    pub probe_peak_plain: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub config_digest: String,
    pub rows: Vec<SweepRow>,
}

/// Bound on the checkpointed peak relative to a single member.
pub const FLAT_PEAK_RATIO: f64 = 1.25;

impl SweepTable {
    pub fn row(&self, m: usize) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.m == m)
    }

    /// Largest checkpointed probe peak over the single-member peak; the
    /// first row stands in when the sweep has no `M = 1` point.
    pub fn checkpointed_peak_ratio(&self) -> f64 {
        let base = self.row(1).unwrap_or(&self.rows[0]).probe_peak_checkpointed as f64;
        self.rows
            .iter()
            .map(|r| r.probe_peak_checkpointed as f64 / base)
            .fold(0.0, f64::max)
    }

    pub fn peak_is_flat(&self) -> bool {
        self.checkpointed_peak_ratio() <= FLAT_PEAK_RATIO
    }
}

/// Trains one slice per `M` in the sweep with everything else fixed.
pub fn run_m_sweep(base: &RunConfig, data: &ConceptDataset, out: Option<&Path>) -> Result<SweepTable> {
    base.validate()?;
    let mut rows = Vec::new();
    for &m in &base.sweep.m_values {
        let mut cfg = base.clone();
        cfg.model.m = m;
        let outcome = train_run(&cfg, data)?;
        if let Some(dir) = out {
            write_run(&dir.join(format!("m_{m}")), &cfg, &outcome)?;
        }
        let r = &outcome.report;
        rows.push(SweepRow {
            m,
            config_digest: cfg.digest(),
            mean_task_accuracy: r.mean_task_accuracy(),
            hamming: r.hamming.off_mean,
            concept_cka: r.concept_cka.off_mean,
            concept_cosine: r.concept_cosine.off_mean,
            shap_similarity: r.shap_similarity.off_mean,
            union_size: r.union_size,
            train_peak_bytes: outcome.peak_bytes(),
            probe_peak_checkpointed: peak_probe(&cfg, data, m, true)?,
            probe_peak_plain: peak_probe(&cfg, data, m, false)?,
        });
    }
    let table = SweepTable {
        config_digest: base.digest(),
        rows,
    };
    if let Some(dir) = out {
        ensure_dir(dir)?;
        write_csv(&dir.join("sweep.csv"), &table.rows)?;
        write_json(&dir.join("sweep.json"), &table)?;
    }
    Ok(table)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapModel {
    pub model: usize,
    pub predicted_class: Vec<usize>,
    /// `samples × concepts` SHAP values at the predicted class.
    pub shap: Vec<Vec<f64>>,
    /// `samples × concepts` concept probabilities.
    pub belief: Vec<Vec<f64>>,
    /// `samples × concepts` classifier weights of the predicted class.
    pub classifier_weight: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapData {
    pub samples: Vec<usize>,
    pub concepts: Vec<usize>,
    /// Background of the SHAP values: the test split.
    pub background: Split,
    pub models: Vec<HeatmapModel>,
}

/// Per-member SHAP, belief and classifier-weight panels for the chosen
/// dataset rows and concepts. An empty `concepts` selects all of them.
pub fn export_heatmap_data(
    slice: &RashomonSlice,
    data: &ConceptDataset,
    samples: &[usize],
    concepts: &[usize],
) -> Result<HeatmapData> {
    if samples.is_empty() {
        return Err(Error::Argument {
            field: "samples".into(),
            detail: "no sample ids given".into(),
        });
    }
    if let Some(&bad) = samples.iter().find(|&&s| s >= data.n()) {
        return Err(Error::Argument {
            field: "samples".into(),
            detail: format!("sample id {bad} out of range (dataset has {} rows)", data.n()),
        });
    }
    let concepts: Vec<usize> = if concepts.is_empty() {
        (0..data.p()).collect()
    } else {
        concepts.to_vec()
    };
    if let Some(&bad) = concepts.iter().find(|&&j| j >= data.p()) {
        return Err(Error::Argument {
            field: "concepts".into(),
            detail: format!("concept id {bad} out of range (p = {})", data.p()),
        });
    }
    let chosen = data.rows(samples);
    let background = data.split(Split::Test);
    let mut models = Vec::with_capacity(slice.m());
    for m in 0..slice.m() {
        let bg = slice.predict_one(&background.x, m)?.concept_probs;
        let mut mu = vec![0.0; data.p()];
        for i in 0..bg.rows() {
            for (acc, v) in mu.iter_mut().zip(bg.row(i)) {
                *acc += v;
            }
        }
        mu.iter_mut().for_each(|v| *v /= bg.rows() as f64);
        let pred = slice.predict_one(&chosen.x, m)?;
        let classes = pred.classes();
        let w = slice.param(slice.classifier(m).w);
        let mut shap = Vec::with_capacity(samples.len());
        let mut belief = Vec::with_capacity(samples.len());
        let mut weight = Vec::with_capacity(samples.len());
        for (i, &k) in classes.iter().enumerate() {
            let probs = pred.concept_probs.row(i);
            let phi = metrics::shap_linear(w, probs, &mu, k)?;
            shap.push(concepts.iter().map(|&j| phi[j]).collect());
            belief.push(concepts.iter().map(|&j| probs[j]).collect());
            weight.push(concepts.iter().map(|&j| w.at(k, j)).collect());
        }
        models.push(HeatmapModel {
            model: m,
            predicted_class: classes,
            shap,
            belief,
            classifier_weight: weight,
        });
    }
    Ok(HeatmapData {
        samples: samples.to_vec(),
        concepts,
        background: Split::Test,
        models,
    })
}
