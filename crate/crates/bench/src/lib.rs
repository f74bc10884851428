//! Benchmark fixtures shared by the criterion targets.

use rashomon_core::{data, ConceptDataset, RunConfig};

/// The default run configuration with its planted dataset.
pub fn desk() -> (RunConfig, ConceptDataset) {
    let cfg = RunConfig::default();
    let d = data::generate(&cfg.planted()).expect("default config is valid");
    (cfg, d)
}
