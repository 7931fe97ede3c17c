//! Chain execution: wires a configured sampler to trace/summary artifacts.

use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::expfam::NiwParams;
use crate::gibbs::{
    full_refresh, gibbs_sweep, hash_assignments, ChainTrace, ClusterState, DirichletPrior,
    SweepModel, TraceRecord,
};
use crate::kalman::SeriesData;
use crate::metrics::{mse_row, nmi, MseRow, TsParamSnapshot};
use crate::mvt::{ep_point_loglik, AugmentedMvtSampler, EpMvtModel, MvtConfig};
use crate::ts::{
    refresh_latent_paths, sample_eta_given_paths, sample_ts_hyperparams, CollapsedTsModel,
    EpTsModel, HyperPriors, NaiveTsModel,
};

use super::config::{
    DatasetConfig, ExperimentConfig, ModelKind, SamplerKind, TimingMode,
};
use super::generate::{generate_gsm, generate_mvt, generate_ts};
use super::gsm::GsmModel;
use super::io::{config_hash, read_labels_json, read_matrix_csv, series_from_rows, write_trace_csv};
use super::rng::{derive_rng, Purpose};

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub model: ModelKind,
    pub sampler: SamplerKind,
    pub n: usize,
    pub sweeps: usize,
    pub seed: u64,
    pub final_nmi: Option<f64>,
    pub final_loglik: f64,
    pub mean_iter_seconds: f64,
    pub final_assignments: Vec<usize>,
    pub config: ExperimentConfig,
}

#[derive(Debug)]
pub struct RunArtifacts {
    pub trace: ChainTrace,
    pub summary: RunSummary,
}

struct Recorder {
    trace: ChainTrace,
    truth: Option<Vec<usize>>,
    timing: TimingMode,
}

impl Recorder {
    fn new(truth: Option<Vec<usize>>, timing: TimingMode) -> Self {
        Self {
            trace: ChainTrace::new(),
            truth,
            timing,
        }
    }

    fn push(
        &mut self,
        iteration: usize,
        loglik: f64,
        assignments: &[usize],
        wall_seconds: f64,
        mse: Option<MseRow>,
    ) -> Result<()> {
        let score = match &self.truth {
            Some(t) => Some(nmi(assignments, t)?),
            None => None,
        };
        let wall = match self.timing {
            TimingMode::Wall => wall_seconds,
            TimingMode::Off => 0.0,
        };
        self.trace.push(TraceRecord {
            iteration,
            loglik,
            nmi: score,
            wall_seconds: wall,
            mse,
            assignments_hash: hash_assignments(assignments),
        });
        Ok(())
    }
}

fn uniform_assignments(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut rng = derive_rng(seed, Purpose::Init, 0);
    (0..n).map(|_| rand::Rng::random_range(&mut rng, 0..k)).collect()
}

/// Executes the configured sampler and returns the in-memory artifacts.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunArtifacts> {
    config.validate()?;
    match config.model {
        ModelKind::Ts => run_ts(config),
        ModelKind::Mvt => run_mvt(config),
        ModelKind::Gsm => run_gsm(config),
    }
}

/// Executes and writes `trace.csv` plus `summary.json` under `out_dir`.
pub fn run_to_dir(config: &ExperimentConfig, out_dir: &Path) -> Result<RunArtifacts> {
    let artifacts = run_experiment(config)?;
    std::fs::create_dir_all(out_dir)?;
    let with_mse = artifacts.trace.records().iter().any(|r| r.mse.is_some());
    write_trace_csv(
        &out_dir.join("trace.csv"),
        &artifacts.trace,
        &artifacts.summary.config_hash,
        with_mse,
    )?;
    let json = serde_json::to_string_pretty(&artifacts.summary)?;
    std::fs::write(out_dir.join("summary.json"), json + "\n")?;
    Ok(artifacts)
}

fn finish(
    config: &ExperimentConfig,
    recorder: Recorder,
    n: usize,
    assignments: Vec<usize>,
) -> Result<RunArtifacts> {
    let summary = RunSummary {
        config_hash: config_hash(config)?,
        model: config.model,
        sampler: config.sampler,
        n,
        sweeps: config.sweeps,
        seed: config.seed,
        final_nmi: recorder.trace.last().and_then(|r| r.nmi),
        final_loglik: recorder.trace.last().map(|r| r.loglik).unwrap_or(f64::NAN),
        mean_iter_seconds: recorder.trace.mean_iter_seconds(),
        final_assignments: assignments,
        config: config.clone(),
    };
    Ok(RunArtifacts {
        trace: recorder.trace,
        summary,
    })
}

fn load_ts_data(config: &ExperimentConfig) -> Result<(Vec<SeriesData>, Option<Vec<usize>>)> {
    let path = config.data_path.as_ref().expect("caller checked");
    let rows = read_matrix_csv(path)?;
    let data = series_from_rows(&rows)?;
    let truth = match &config.truth_path {
        Some(p) => Some(read_labels_json(p)?),
        None => None,
    };
    Ok((data, truth))
}

fn run_ts(config: &ExperimentConfig) -> Result<RunArtifacts> {
    let DatasetConfig::Ts(spec) = &config.dataset else {
        return Err(Error::Config("expected a ts dataset".into()));
    };
    let (data, truth, params, truth_snapshot) = if config.data_path.is_some() {
        let (data, truth) = load_ts_data(config)?;
        let params = (0..data.len())
            .map(|_| crate::kalman::SsmParams::new(spec.a, spec.lambda, spec.sigma_x2, spec.sigma_y2))
            .collect::<Result<Vec<_>>>()?;
        (data, truth, params, None)
    } else {
        let ds = generate_ts(spec, config.seed)?;
        let params = ds.true_params();
        let snapshot = TsParamSnapshot {
            a: vec![ds.truth.a; ds.data.len()],
            lambda: vec![ds.truth.lambda; ds.data.len()],
            sigma_y2: vec![ds.truth.sigma_y2; ds.data.len()],
            x: ds.truth.x.clone(),
            assignments: ds.truth.z.clone(),
        };
        (ds.data, Some(ds.truth.z), params, Some(snapshot))
    };
    let n = data.len();
    let t_len = data[0].len();
    let k = spec.k;
    let prior = DirichletPrior::new(config.alpha, k)?;
    let mut rng = derive_rng(config.seed, Purpose::Chain, 0);
    let z0 = uniform_assignments(n, k, config.seed);
    let mut recorder = Recorder::new(truth.clone(), config.timing);
    let hyper_priors = HyperPriors::default();

    // auxiliary latents for hyperparameter sampling and MSE traces
    let mut eta_aux: Vec<Vec<f64>> = (0..k)
        .map(|_| {
            (0..t_len)
                .map(|_| rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng))
                .collect()
        })
        .collect();


    // The three samplers share the trace loop but differ in their model
    // plumbing; macro-free explicit loops keep the borrows simple.
    match config.sampler {
        SamplerKind::Ep => {
            let mut model = EpTsModel::new(data.clone(), params.clone(), k)?;
            model.damping = config.damping;
            model.parallel = config.parallel;
            let mut state = ClusterState::init(z0, &model)?;
            let joint = |params: &[crate::kalman::SsmParams], z: &[usize]| -> Result<f64> {
                if !config.trace_loglik {
                    return Ok(0.0);
                }
                CollapsedTsModel::new(data.clone(), params.to_vec(), k)?.joint_loglik(z)
            };
            recorder.push(0, joint(&model.params, state.assignments())?, state.assignments(), 0.0, None)?;
            for sweep in 1..=config.sweeps {
                let started = Instant::now();
                gibbs_sweep(&model, &mut state, &prior, config.sweep_order, &mut rng)?;
                if config.refresh_every > 0 && sweep % config.refresh_every == 0 {
                    full_refresh(&model, &mut state, 50, 1e-8)?;
                }
                let mse = if config.sample_hyperparams {
                    let x = refresh_latent_paths(&data, &model.params, state.assignments(), &eta_aux, &mut rng)?;
                    resample_eta(&data, &model.params, state.assignments(), &x, k, t_len, &mut eta_aux, &mut rng);
                    sample_ts_hyperparams(&data, state.assignments(), &x, &eta_aux, &mut model.params, &hyper_priors, &mut rng)?;
                    ts_mse(&truth_snapshot, &model.params, &x, state.assignments())
                } else {
                    None
                };
                let elapsed = started.elapsed().as_secs_f64();
                recorder.push(sweep, joint(&model.params, state.assignments())?, state.assignments(), elapsed, mse)?;
            }
            let z = state.assignments().to_vec();
            finish(config, recorder, n, z)
        }
        SamplerKind::Collapsed => {
            let mut model = CollapsedTsModel::new(data.clone(), params.clone(), k)?;
            model.parallel = config.parallel;
            let mut state = ClusterState::init(z0, &model)?;
            let joint = |m: &CollapsedTsModel, z: &[usize]| -> Result<f64> {
                if !config.trace_loglik {
                    return Ok(0.0);
                }
                m.joint_loglik(z)
            };
            recorder.push(0, joint(&model, state.assignments())?, state.assignments(), 0.0, None)?;
            for sweep in 1..=config.sweeps {
                let started = Instant::now();
                gibbs_sweep(&model, &mut state, &prior, config.sweep_order, &mut rng)?;
                let mse = if config.sample_hyperparams {
                    let x = refresh_latent_paths(&data, &model.params, state.assignments(), &eta_aux, &mut rng)?;
                    resample_eta(&data, &model.params, state.assignments(), &x, k, t_len, &mut eta_aux, &mut rng);
                    sample_ts_hyperparams(&data, state.assignments(), &x, &eta_aux, &mut model.params, &hyper_priors, &mut rng)?;
                    ts_mse(&truth_snapshot, &model.params, &x, state.assignments())
                } else {
                    None
                };
                let elapsed = started.elapsed().as_secs_f64();
                recorder.push(sweep, joint(&model, state.assignments())?, state.assignments(), elapsed, mse)?;
            }
            let z = state.assignments().to_vec();
            finish(config, recorder, n, z)
        }
        SamplerKind::Naive => {
            let mut model = NaiveTsModel::new(data.clone(), params.clone(), k, &mut rng)?;
            let mut state = ClusterState::init(z0, &model)?;
            let joint = |params: &[crate::kalman::SsmParams], z: &[usize]| -> Result<f64> {
                if !config.trace_loglik {
                    return Ok(0.0);
                }
                CollapsedTsModel::new(data.clone(), params.to_vec(), k)?.joint_loglik(z)
            };
            recorder.push(0, joint(&model.params, state.assignments())?, state.assignments(), 0.0, None)?;
            for sweep in 1..=config.sweeps {
                let started = Instant::now();
                let z = state.assignments().to_vec();
                model.refresh_latents(&z, &mut rng)?;
                gibbs_sweep(&model, &mut state, &prior, config.sweep_order, &mut rng)?;
                let mse = if config.sample_hyperparams {
                    let x = model.x.clone();
                    let eta = model.eta.clone();
                    sample_ts_hyperparams(&data, state.assignments(), &x, &eta, &mut model.params, &hyper_priors, &mut rng)?;
                    ts_mse(&truth_snapshot, &model.params, &x, state.assignments())
                } else {
                    ts_mse(&truth_snapshot, &model.params, &model.x, state.assignments())
                };
                let elapsed = started.elapsed().as_secs_f64();
                recorder.push(sweep, joint(&model.params, state.assignments())?, state.assignments(), elapsed, mse)?;
            }
            let z = state.assignments().to_vec();
            finish(config, recorder, n, z)
        }
        SamplerKind::Blocked => Err(Error::Config(
            "the blocked sampler applies to the mvt model".into(),
        )),
    }
}

fn resample_eta<R: rand::Rng + ?Sized>(
    data: &[SeriesData],
    params: &[crate::kalman::SsmParams],
    assignments: &[usize],
    x: &[Vec<f64>],
    k: usize,
    t_len: usize,
    eta: &mut Vec<Vec<f64>>,
    rng: &mut R,
) {
    let _ = data;
    for cluster in 0..k {
        let members: Vec<(&[f64], &crate::kalman::SsmParams)> = assignments
            .iter()
            .enumerate()
            .filter(|&(_, &z)| z == cluster)
            .map(|(i, _)| (x[i].as_slice(), &params[i]))
            .collect();
        eta[cluster] = sample_eta_given_paths(&members, t_len, rng);
    }
}

fn ts_mse(
    truth: &Option<TsParamSnapshot>,
    params: &[crate::kalman::SsmParams],
    x: &[Vec<f64>],
    assignments: &[usize],
) -> Option<MseRow> {
    let truth = truth.as_ref()?;
    let sample = TsParamSnapshot {
        a: params.iter().map(|p| p.a).collect(),
        lambda: params.iter().map(|p| p.lambda).collect(),
        sigma_y2: params.iter().map(|p| p.sigma_y2).collect(),
        x: x.to_vec(),
        assignments: assignments.to_vec(),
    };
    mse_row(&sample, truth).ok()
}

fn run_mvt(config: &ExperimentConfig) -> Result<RunArtifacts> {
    let DatasetConfig::Mvt(spec) = &config.dataset else {
        return Err(Error::Config("expected an mvt dataset".into()));
    };
    let ds = generate_mvt(spec, config.seed)?;
    let truth = Some(ds.truth.z.clone());
    let n = ds.data.len();
    // sampler prior matched to the generator location spread unless
    // overridden
    let kappa = config
        .prior_kappa
        .unwrap_or(1.0 / (spec.mean_scale * spec.mean_scale));
    let prior_niw = NiwParams::new(
        nalgebra::DVector::zeros(spec.d),
        kappa,
        spec.d as f64 + 2.0,
        nalgebra::DMatrix::identity(spec.d, spec.d),
    )?;
    let mvt_config = MvtConfig::new(spec.dof, prior_niw, config.quad_m)?.with_damping(config.damping)?;
    let prior = DirichletPrior::new(config.alpha, spec.k)?;
    let mut rng = derive_rng(config.seed, Purpose::Chain, 0);
    let mut recorder = Recorder::new(truth, config.timing);

    match config.sampler {
        SamplerKind::Ep => {
            let mut model = EpMvtModel::new(ds.data.clone(), mvt_config, spec.k)?;
            model.parallel = config.parallel;
            let z0 = uniform_assignments(n, spec.k, config.seed);
            let mut state = ClusterState::init(z0, &model)?;
            let loglik = |m: &EpMvtModel, s: &ClusterState<_>| -> Result<f64> {
                if !config.trace_loglik {
                    return Ok(0.0);
                }
                ep_point_loglik(m, s)
            };
            recorder.push(0, loglik(&model, &state)?, state.assignments(), 0.0, None)?;
            for sweep in 1..=config.sweeps {
                let started = Instant::now();
                gibbs_sweep(&model, &mut state, &prior, config.sweep_order, &mut rng)?;
                if config.refresh_every > 0 && sweep % config.refresh_every == 0 {
                    full_refresh(&model, &mut state, 50, 1e-8)?;
                }
                let elapsed = started.elapsed().as_secs_f64();
                recorder.push(sweep, loglik(&model, &state)?, state.assignments(), elapsed, None)?;
            }
            let z = state.assignments().to_vec();
            finish(config, recorder, n, z)
        }
        SamplerKind::Naive | SamplerKind::Blocked => {
            let mut sampler = if config.sampler == SamplerKind::Naive {
                AugmentedMvtSampler::naive(ds.data.clone(), mvt_config, prior, &mut rng)?
            } else {
                AugmentedMvtSampler::blocked(ds.data.clone(), mvt_config, prior, &mut rng)?
            };
            let loglik = |s: &AugmentedMvtSampler| -> Result<f64> {
                if !config.trace_loglik {
                    return Ok(0.0);
                }
                s.point_loglik()
            };
            recorder.push(0, loglik(&sampler)?, sampler.assignments(), 0.0, None)?;
            for sweep in 1..=config.sweeps {
                let started = Instant::now();
                sampler.sweep(&mut rng)?;
                let elapsed = started.elapsed().as_secs_f64();
                recorder.push(sweep, loglik(&sampler)?, sampler.assignments(), elapsed, None)?;
            }
            let z = sampler.assignments().to_vec();
            finish(config, recorder, n, z)
        }
        SamplerKind::Collapsed => Err(Error::Config(
            "the exact collapsed sampler is unavailable for the mvt model".into(),
        )),
    }
}

fn run_gsm(config: &ExperimentConfig) -> Result<RunArtifacts> {
    let DatasetConfig::Gsm(spec) = &config.dataset else {
        return Err(Error::Config("expected a gsm dataset".into()));
    };
    if config.sampler != SamplerKind::Ep {
        return Err(Error::Config("the gsm model runs the ep sampler".into()));
    }
    let ds = generate_gsm(spec, config.seed);
    let n = ds.y.len();
    let model = GsmModel {
        y: ds.y.clone(),
        k: 2,
        r: spec.r,
        c: spec.c,
        sigma2: spec.sigma2,
        prior_var: 25.0,
    };
    let prior = DirichletPrior::new(config.alpha, 2)?;
    let mut rng = derive_rng(config.seed, Purpose::Chain, 0);
    let z0 = uniform_assignments(n, 2, config.seed);
    let mut state = ClusterState::init(z0, &model)?;
    let mut recorder = Recorder::new(Some(ds.z.clone()), config.timing);
    let loglik = |m: &GsmModel, s: &ClusterState<_>| -> Result<f64> {
        if !config.trace_loglik {
            return Ok(0.0);
        }
        let mut total = 0.0;
        for i in 0..m.y.len() {
            total += m.candidate_log_likes(s, i)?[s.assignment(i)];
        }
        Ok(total)
    };
    recorder.push(0, loglik(&model, &state)?, state.assignments(), 0.0, None)?;
    for sweep in 1..=config.sweeps {
        let started = Instant::now();
        gibbs_sweep(&model, &mut state, &prior, config.sweep_order, &mut rng)?;
        if config.refresh_every > 0 && sweep % config.refresh_every == 0 {
            full_refresh(&model, &mut state, 200, 1e-9)?;
        }
        let elapsed = started.elapsed().as_secs_f64();
        recorder.push(sweep, loglik(&model, &state)?, state.assignments(), elapsed, None)?;
    }
    let z = state.assignments().to_vec();
    finish(config, recorder, n, z)
}
