//! Reproducible experiment drivers: synthetic data generation with the
//! reference settings, chain execution with CSV/JSON artifacts, the
//! runtime-scaling benchmark and the Gaussian-scale-mixture stale-site
//! diagnostic.
//!
//! Everything is keyed by one root seed; per-purpose generators are derived
//! with a counter-based split so that concurrency can never reorder draws.

mod bench;
mod config;
mod generate;
mod gsm;
mod io;
mod rng;
mod run;

pub use bench::{run_bench, BenchResult, BenchRow, BenchSpec};
pub use config::{
    DatasetConfig, ExperimentConfig, GsmDatasetConfig, ModelKind, MvtDatasetConfig, SamplerKind,
    TimingMode, TsDatasetConfig,
};
pub use generate::{
    generate_gsm, generate_mvt, generate_ts, GsmDataset, MvtDataset, MvtTruth, TsDataset, TsTruth,
};
pub use gsm::{gsm_diagnostic, GsmDiagRow, GsmDiagSpec, GsmModel};
pub use io::{
    config_hash, read_labels_json, read_matrix_csv, write_matrix_csv, write_trace_csv,
};
pub use rng::{derive_rng, derive_seed, Purpose};
pub use run::{run_experiment, run_to_dir, RunArtifacts, RunSummary};
