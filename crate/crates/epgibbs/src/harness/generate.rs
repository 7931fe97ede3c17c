//! Synthetic data generators with ground truth sidecars.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::expfam::NiwParams;
use crate::kalman::{stationary_init_var, SeriesData, SsmParams};
use crate::mvt::{sample_mvt, sample_niw};

use super::config::{GsmDatasetConfig, MvtDatasetConfig, TsDatasetConfig};
use super::rng::{derive_rng, Purpose};

/// Ground truth of a generated time-series dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TsTruth {
    pub z: Vec<usize>,
    /// K x T factor tracks.
    pub eta: Vec<Vec<f64>>,
    /// N x T latent paths.
    pub x: Vec<Vec<f64>>,
    pub a: f64,
    pub lambda: f64,
    pub sigma_x2: f64,
    pub sigma_y2: f64,
    pub init_var: f64,
}

#[derive(Debug, Clone)]
pub struct TsDataset {
    pub data: Vec<SeriesData>,
    pub truth: TsTruth,
}

impl TsDataset {
    /// The generator parameters as per-series state-space parameters.
    pub fn true_params(&self) -> Vec<SsmParams> {
        (0..self.data.len())
            .map(|_| SsmParams {
                a: self.truth.a,
                lambda: self.truth.lambda,
                sigma_x2: self.truth.sigma_x2,
                sigma_y2: self.truth.sigma_y2,
                init_var: self.truth.init_var,
            })
            .collect()
    }
}

/// Draws assignments uniformly, factor tracks from N(0,1), latent paths and
/// observations from the state-space recursions. The first latent step uses
/// the stationary AR variance.
pub fn generate_ts(spec: &TsDatasetConfig, seed: u64) -> Result<TsDataset> {
    let mut rng = derive_rng(seed, Purpose::DataGen, 0);
    let init_var = stationary_init_var(spec.a, spec.sigma_x2);
    let z: Vec<usize> = (0..spec.n).map(|_| rng.random_range(0..spec.k)).collect();
    let eta: Vec<Vec<f64>> = (0..spec.k)
        .map(|_| (0..spec.t).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    let mut x = Vec::with_capacity(spec.n);
    let mut data = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let track = &eta[z[i]];
        let mut path = vec![0.0; spec.t];
        for t in 0..spec.t {
            let sd = if t == 0 {
                init_var.sqrt()
            } else {
                spec.sigma_x2.sqrt()
            };
            let prev = if t == 0 { 0.0 } else { spec.a * path[t - 1] };
            let noise: f64 = StandardNormal.sample(&mut rng);
            path[t] = prev + spec.lambda * track[t] + sd * noise;
        }
        let y: Vec<f64> = path
            .iter()
            .map(|&v| {
                let noise: f64 = StandardNormal.sample(&mut rng);
                v + spec.sigma_y2.sqrt() * noise
            })
            .collect();
        data.push(SeriesData::fully_observed(y)?);
        x.push(path);
    }
    Ok(TsDataset {
        data,
        truth: TsTruth {
            z,
            eta,
            x,
            a: spec.a,
            lambda: spec.lambda,
            sigma_x2: spec.sigma_x2,
            sigma_y2: spec.sigma_y2,
            init_var,
        },
    })
}

/// Ground truth of a generated Student-t mixture dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MvtTruth {
    pub z: Vec<usize>,
    /// Row-major cluster means.
    pub mu: Vec<Vec<f64>>,
    /// Row-major cluster covariance matrices.
    pub sigma: Vec<Vec<Vec<f64>>>,
    pub dof: f64,
    pub mean_scale: f64,
}

#[derive(Debug, Clone)]
pub struct MvtDataset {
    pub data: Vec<DVector<f64>>,
    pub truth: MvtTruth,
}

/// The NIW the cluster parameters are drawn from: the location spread of the
/// default prior widened by `mean_scale` (equivalently `kappa = 1/scale^2`).
pub fn generator_prior(d: usize, mean_scale: f64) -> Result<NiwParams> {
    NiwParams::new(
        DVector::zeros(d),
        1.0 / (mean_scale * mean_scale),
        d as f64 + 2.0,
        DMatrix::identity(d, d),
    )
}

/// Draws `(mu_k, Sigma_k)` from the scaled NIW and observations from the
/// Student-t scale mixture.
pub fn generate_mvt(spec: &MvtDatasetConfig, seed: u64) -> Result<MvtDataset> {
    let mut rng = derive_rng(seed, Purpose::DataGen, 0);
    let prior = generator_prior(spec.d, spec.mean_scale)?;
    let params: Vec<_> = (0..spec.k)
        .map(|_| sample_niw(&prior, &mut rng))
        .collect::<Result<_>>()?;
    let z: Vec<usize> = (0..spec.n).map(|_| rng.random_range(0..spec.k)).collect();
    let data: Vec<DVector<f64>> = z
        .iter()
        .map(|&k| sample_mvt(&params[k].mu, &params[k].sigma, spec.dof, &mut rng))
        .collect::<Result<_>>()?;
    Ok(MvtDataset {
        data,
        truth: MvtTruth {
            z,
            mu: params
                .iter()
                .map(|p| p.mu.iter().cloned().collect())
                .collect(),
            sigma: params
                .iter()
                .map(|p| {
                    (0..spec.d)
                        .map(|i| (0..spec.d).map(|j| p.sigma[(i, j)]).collect())
                        .collect()
                })
                .collect(),
            dof: spec.dof,
            mean_scale: spec.mean_scale,
        },
    })
}

/// Ground truth of a generated Gaussian-scale-mixture dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GsmDataset {
    pub y: Vec<f64>,
    pub z: Vec<usize>,
    /// The two component locations implied by the delta setting.
    pub phi: [f64; 2],
}

/// Two GSM components with locations separated by `delta` times the
/// emission variance `(1 - r) sigma2 + r C sigma2`.
pub fn generate_gsm(spec: &GsmDatasetConfig, seed: u64) -> GsmDataset {
    let mut rng = derive_rng(seed, Purpose::DataGen, 0);
    let emission_var = (1.0 - spec.r) * spec.sigma2 + spec.r * spec.c * spec.sigma2;
    let half = 0.5 * spec.delta * emission_var;
    let phi = [-half, half];
    let mut y = Vec::with_capacity(spec.n);
    let mut z = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let k = rng.random_range(0..2usize);
        let wide = rng.random_range(0.0..1.0) < spec.r;
        let var = if wide { spec.c * spec.sigma2 } else { spec.sigma2 };
        let noise: f64 = StandardNormal.sample(&mut rng);
        y.push(phi[k] + var.sqrt() * noise);
        z.push(k);
    }
    GsmDataset { y, z, phi }
}
