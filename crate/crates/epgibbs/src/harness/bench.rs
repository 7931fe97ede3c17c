//! Runtime-scaling benchmark: per-iteration wall time of each sampler as
//! the number of series grows, with a warmup sweep excluded from the
//! statistics and a fitted log-log slope per sampler.

use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::gibbs::{gibbs_sweep, ClusterState, DirichletPrior, SweepOrder};
use crate::metrics::fit_loglog_slope;
use crate::ts::{CollapsedTsModel, EpTsModel, NaiveTsModel};

use super::config::{SamplerKind, TsDatasetConfig};
use super::generate::generate_ts;
use super::rng::{derive_rng, Purpose};

#[derive(Debug, Clone, Serialize)]
pub struct BenchSpec {
    pub t: usize,
    pub k: usize,
    pub n_values: Vec<usize>,
    pub samplers: Vec<SamplerKind>,
    pub warmup_sweeps: usize,
    pub measured_sweeps: usize,
    pub sigma_x2: f64,
    pub sigma_y2: f64,
    pub a: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub seed: u64,
    pub parallel: bool,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self {
            t: 100,
            k: 5,
            n_values: vec![40, 80, 160, 320],
            samplers: vec![SamplerKind::Naive, SamplerKind::Collapsed, SamplerKind::Ep],
            warmup_sweeps: 1,
            measured_sweeps: 2,
            sigma_x2: 0.01,
            sigma_y2: 1.0,
            a: 0.95,
            lambda: 1.0,
            alpha: 1.0,
            seed: 0,
            parallel: false,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub sampler: SamplerKind,
    pub n: usize,
    pub sweep: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchResult {
    pub rows: Vec<BenchRow>,
    /// (sampler, fitted log-log slope of mean per-iteration seconds vs N)
    pub slopes: Vec<(SamplerKind, f64)>,
}

impl BenchResult {
    pub fn slope(&self, sampler: SamplerKind) -> Option<f64> {
        self.slopes.iter().find(|(s, _)| *s == sampler).map(|(_, v)| *v)
    }
}

pub fn run_bench(spec: &BenchSpec) -> Result<BenchResult> {
    let mut rows = Vec::new();
    let mut slopes = Vec::new();
    for &sampler in &spec.samplers {
        let mut points = Vec::new();
        for &n in &spec.n_values {
            let ds_spec = TsDatasetConfig {
                n,
                t: spec.t,
                k: spec.k,
                sigma_x2: spec.sigma_x2,
                sigma_y2: spec.sigma_y2,
                a: spec.a,
                lambda: spec.lambda,
            };
            let ds = generate_ts(&ds_spec, spec.seed)?;
            let params = ds.true_params();
            let prior = DirichletPrior::new(spec.alpha, spec.k)?;
            let mut rng = derive_rng(spec.seed, Purpose::Chain, n as u64);
            let mut init_rng = derive_rng(spec.seed, Purpose::Init, n as u64);
            let z0: Vec<usize> = (0..n)
                .map(|_| rand::Rng::random_range(&mut init_rng, 0..spec.k))
                .collect();

            let mut sweep_times = Vec::with_capacity(spec.measured_sweeps);
            match sampler {
                SamplerKind::Ep => {
                    let mut model = EpTsModel::new(ds.data.clone(), params.clone(), spec.k)?;
                    model.parallel = spec.parallel;
                    let mut state = ClusterState::init(z0, &model)?;
                    for sweep in 0..(spec.warmup_sweeps + spec.measured_sweeps) {
                        let started = Instant::now();
                        gibbs_sweep(&model, &mut state, &prior, SweepOrder::Fixed, &mut rng)?;
                        if sweep >= spec.warmup_sweeps {
                            sweep_times.push(started.elapsed().as_secs_f64());
                        }
                    }
                }
                SamplerKind::Collapsed => {
                    let mut model =
                        CollapsedTsModel::new(ds.data.clone(), params.clone(), spec.k)?;
                    model.parallel = spec.parallel;
                    let mut state = ClusterState::init(z0, &model)?;
                    for sweep in 0..(spec.warmup_sweeps + spec.measured_sweeps) {
                        let started = Instant::now();
                        gibbs_sweep(&model, &mut state, &prior, SweepOrder::Fixed, &mut rng)?;
                        if sweep >= spec.warmup_sweeps {
                            sweep_times.push(started.elapsed().as_secs_f64());
                        }
                    }
                }
                SamplerKind::Naive => {
                    let mut model =
                        NaiveTsModel::new(ds.data.clone(), params.clone(), spec.k, &mut rng)?;
                    let mut state = ClusterState::init(z0, &model)?;
                    for sweep in 0..(spec.warmup_sweeps + spec.measured_sweeps) {
                        let started = Instant::now();
                        let z = state.assignments().to_vec();
                        model.refresh_latents(&z, &mut rng)?;
                        gibbs_sweep(&model, &mut state, &prior, SweepOrder::Fixed, &mut rng)?;
                        if sweep >= spec.warmup_sweeps {
                            sweep_times.push(started.elapsed().as_secs_f64());
                        }
                    }
                }
                SamplerKind::Blocked => {
                    return Err(Error::Config(
                        "the blocked sampler applies to the mvt model".into(),
                    ));
                }
            }
            for (i, &s) in sweep_times.iter().enumerate() {
                rows.push(BenchRow {
                    sampler,
                    n,
                    sweep: i + 1,
                    seconds: s,
                });
            }
            let mean = sweep_times.iter().sum::<f64>() / sweep_times.len() as f64;
            points.push((n as f64, mean));
        }
        slopes.push((sampler, fit_loglog_slope(&points)));
    }
    Ok(BenchResult { rows, slopes })
}
