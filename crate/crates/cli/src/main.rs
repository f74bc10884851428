//! `rashomon`: generate planted data, train Rashomon slices and run the
//! diversity analyses from the command line.
//!
//! Exit status: 0 on success, 2 for configuration or argument errors, 3 for
//! numeric failures, 4 for I/O and file-format errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use rashomon_core::config::EvalConfig;
use rashomon_core::experiments::{self, write_json};
use rashomon_core::metrics;
use rashomon_core::tensor::gradcheck;
use rashomon_core::{data, ConceptDataset, Error, RashomonSlice, Result, RunConfig, Split};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "rashomon", version, about = "Train and analyse Rashomon slices of concept-bottleneck models")]
struct Cli {
    /// Root seed; overrides the `seed` key of the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a planted-redundancy dataset.
    GenData {
        /// Run config (TOML); its [data] section and seed are used.
        #[arg(long)]
        config: PathBuf,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a slice in the configured mode and evaluate it on the test split.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory written by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Run directory (config copy, log, report, checkpoint).
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute the full metrics report of a trained slice.
    Eval {
        /// Run directory from train, or its checkpoint directory.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Report JSON file.
        #[arg(long)]
        out: PathBuf,
        /// Split to evaluate on.
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Retrain with one attach layer's adapters independent at a time.
    AblateLayers {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrain across slice sizes and probe peak activation memory.
    SweepM {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export SHAP, belief and classifier-weight panels for chosen samples.
    ExportHeatmaps {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated dataset row ids.
        #[arg(long, value_delimiter = ',', required = true)]
        samples: Vec<usize>,
        /// Comma-separated concept ids; all concepts when omitted.
        #[arg(long, value_delimiter = ',')]
        concepts: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check analytic gradients against finite differences and checkpointed
    /// replay on random graphs.
    Gradcheck {
        /// Number of random graphs.
        #[arg(long, default_value_t = 25)]
        graphs: usize,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

/// Written next to every output once the command has finished.
#[derive(Serialize)]
struct RunManifest {
    command: String,
    config_digest: Option<String>,
    seed: Option<u64>,
    tool_version: &'static str,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    wall_clock_secs: f64,
}

struct Ctx {
    seed: Option<u64>,
    started: Instant,
}

impl Ctx {
    fn config(&self, path: &Path) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(path).map_err(|e| match e {
            Error::Config { field, reason } => Error::Config {
                field,
                reason: format!("{reason} (in {})", path.display()),
            },
            other => other,
        })?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }

    fn manifest(
        &self,
        command: &str,
        cfg: Option<&RunConfig>,
        inputs: &[&Path],
        outputs: &[&Path],
        at: &Path,
    ) -> Result<()> {
        let m = RunManifest {
            command: command.into(),
            config_digest: cfg.map(RunConfig::digest),
            seed: cfg.map(|c| c.seed).or(self.seed),
            tool_version: env!("CARGO_PKG_VERSION"),
            inputs: inputs.iter().map(|p| p.to_path_buf()).collect(),
            outputs: outputs.iter().map(|p| p.to_path_buf()).collect(),
            wall_clock_secs: self.started.elapsed().as_secs_f64(),
        };
        write_json(at, &m)
    }
}

/// `<file>.manifest.json` next to a single-file output.
fn sidecar(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn ensure_parent(out: &Path) -> Result<()> {
    match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => std::fs::create_dir_all(p).map_err(Error::io(p)),
        _ => Ok(()),
    }
}

/// A run directory holds its checkpoint in a subdirectory; a bare
/// checkpoint directory is accepted too.
fn load_model(path: &Path) -> Result<(RashomonSlice, Option<RunConfig>)> {
    let ckpt = path.join("checkpoint");
    let dir = if ckpt.is_dir() { ckpt } else { path.to_path_buf() };
    let slice = RashomonSlice::load(&dir)?;
    let cfg_path = path.join("config.toml");
    let cfg = if cfg_path.is_file() {
        Some(RunConfig::load(&cfg_path)?)
    } else {
        None
    };
    Ok((slice, cfg))
}

fn load_data(path: &Path) -> Result<ConceptDataset> {
    ConceptDataset::load(path)
}

fn run(cli: Cli) -> Result<()> {
    let ctx = Ctx {
        seed: cli.seed,
        started: Instant::now(),
    };
    match cli.command {
        Command::GenData { config, out } => {
            let cfg = ctx.config(&config)?;
            let ds = data::generate(&cfg.planted())?;
            ds.save(&out)?;
            experiments::write_atomic(&out.join("config.toml"), cfg.to_toml().as_bytes())?;
            ctx.manifest("gen-data", Some(&cfg), &[&config], &[&out], &out.join("manifest.json"))?;
            println!("wrote {} rows to {}", ds.n(), out.display());
        }
        Command::Train { config, data, out } => {
            let cfg = ctx.config(&config)?;
            let ds = load_data(&data)?;
            let outcome = experiments::train_run(&cfg, &ds)?;
            experiments::write_run(&out, &cfg, &outcome)?;
            ctx.manifest("train", Some(&cfg), &[&config, &data], &[&out], &out.join("manifest.json"))?;
            let r = &outcome.report;
            println!(
                "mode {} M={} test task accuracy {:?}; report in {}",
                r.mode,
                outcome.slice.m(),
                r.task_accuracy,
                out.join("report.json").display()
            );
        }
        Command::Eval { model, data, out, split } => {
            let (slice, cfg) = load_model(&model)?;
            let ds = load_data(&data)?;
            let eval = cfg.as_ref().map(|c| c.eval.clone()).unwrap_or_else(EvalConfig::default);
            let digest = cfg.as_ref().map(RunConfig::digest).unwrap_or_default();
            let report = metrics::evaluate(&slice, &ds, split.into(), &eval, &digest)?;
            ensure_parent(&out)?;
            write_json(&out, &report)?;
            ctx.manifest("eval", cfg.as_ref(), &[&model, &data], &[&out], &sidecar(&out))?;
            println!("task accuracy {:?}", report.task_accuracy);
        }
        Command::AblateLayers { config, data, out } => {
            let cfg = ctx.config(&config)?;
            let ds = load_data(&data)?;
            let table = experiments::run_layer_ablation(&cfg, &ds, Some(&out))?;
            ctx.manifest("ablate-layers", Some(&cfg), &[&config, &data], &[&out], &out.join("manifest.json"))?;
            for r in &table.rows {
                println!(
                    "freed {:>7}: task {:.4} concept cka {:?} shap {:?}",
                    r.freed_layer.map_or("none".into(), |l| l.to_string()),
                    r.task_accuracy,
                    r.concept_cka,
                    r.shap_similarity
                );
            }
        }
        Command::SweepM { config, data, out } => {
            let cfg = ctx.config(&config)?;
            let ds = load_data(&data)?;
            let table = experiments::run_m_sweep(&cfg, &ds, Some(&out))?;
            ctx.manifest("sweep-m", Some(&cfg), &[&config, &data], &[&out], &out.join("manifest.json"))?;
            for r in &table.rows {
                println!(
                    "M={:>2}: task {:.4} peak checkpointed {} plain {}",
                    r.m, r.mean_task_accuracy, r.probe_peak_checkpointed, r.probe_peak_plain
                );
            }
            println!("checkpointed peak ratio {:.3}", table.checkpointed_peak_ratio());
        }
        Command::ExportHeatmaps {
            model,
            data,
            samples,
            concepts,
            out,
        } => {
            let (slice, cfg) = load_model(&model)?;
            let ds = load_data(&data)?;
            let heat = experiments::export_heatmap_data(&slice, &ds, &samples, &concepts)?;
            ensure_parent(&out)?;
            write_json(&out, &heat)?;
            ctx.manifest("export-heatmaps", cfg.as_ref(), &[&model, &data], &[&out], &sidecar(&out))?;
            println!("wrote panels for {} samples to {}", samples.len(), out.display());
        }
        Command::Gradcheck { graphs } => {
            let seed = ctx.seed.unwrap_or(0);
            let report = gradcheck::run_suite(seed, graphs)?;
            for g in &report.graphs {
                println!(
                    "graph {:#018x} params {:>5}: max rel {:.2e} ({} over tolerance, {} confirmed by reference, worst reference gap {:.1e}), small abs {:.2e}, checkpoint diff {:.1e}",
                    g.seed, g.params, g.max_rel_err, g.rel_violations, g.resolved, g.max_ref_rel_err, g.max_abs_err_small, g.checkpoint_max_diff
                );
            }
            let strict = report.graphs.iter().filter(|g| g.passed).count();
            println!(
                "{strict}/{} graphs within relative tolerance {:e}; analytic gradients agree with the fourth-order reference wherever the tolerance is missed: {}",
                report.graphs.len(),
                gradcheck::REL_TOL,
                report.passed_with_reference()
            );
            if !report.passed_with_reference() {
                return Err(Error::Numeric("gradient check failed".into()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
