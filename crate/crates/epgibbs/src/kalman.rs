//! State-space kernels for the time-series clustering model.
//!
//! Per-series dynamics: `x_t = a x_{t-1} + lambda eta_t + e_t` with
//! `e_t ~ N(0, sigma_x2)` and observations `y_t = x_t + w_t`,
//! `w_t ~ N(0, sigma_y2)`. The latent factor `eta_t` enters three ways:
//!
//! * as a point value (naive Gibbs conditions on it),
//! * marginalized per index against a diagonal Gaussian belief (the EP
//!   collapsed likelihood): the predict step gains a mean shift
//!   `lambda * mean_t` and inflated variance `lambda^2 * var_t`,
//! * exactly collapsed across a whole cluster (the coupled filter), where
//!   integrating the shared factor adds `lambda lambda'` to every predict
//!   covariance and couples the member series.
//!
//! All entry points run in O(T) per series except the coupled filter,
//! which pays O(T N_k^3) for a cluster of size N_k.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Per-series state-space parameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SsmParams {
    /// AR coefficient.
    pub a: f64,
    /// Factor loading.
    pub lambda: f64,
    /// Innovation variance.
    pub sigma_x2: f64,
    /// Observation noise variance.
    pub sigma_y2: f64,
    /// Variance of `x_1` around `lambda * eta_1`.
    pub init_var: f64,
}

impl SsmParams {
    pub fn new(a: f64, lambda: f64, sigma_x2: f64, sigma_y2: f64) -> Result<Self> {
        Self::with_init_var(a, lambda, sigma_x2, sigma_y2, stationary_init_var(a, sigma_x2))
    }

    pub fn with_init_var(
        a: f64,
        lambda: f64,
        sigma_x2: f64,
        sigma_y2: f64,
        init_var: f64,
    ) -> Result<Self> {
        if !(sigma_x2 > 0.0) || !(sigma_y2 > 0.0) || !(init_var > 0.0) {
            return Err(Error::InvalidParam(format!(
                "variances must be positive: sigma_x2={sigma_x2}, sigma_y2={sigma_y2}, init_var={init_var}"
            )));
        }
        Ok(Self {
            a,
            lambda,
            sigma_x2,
            sigma_y2,
            init_var,
        })
    }
}

/// Stationary AR(1) marginal variance, clamped to `[sigma_x2, 1e6]`; the
/// upper clamp also covers `|a| >= 1` where no stationary value exists.
pub fn stationary_init_var(a: f64, sigma_x2: f64) -> f64 {
    let denom = 1.0 - a * a;
    if denom <= 0.0 {
        1e6
    } else {
        (sigma_x2 / denom).clamp(sigma_x2, 1e6)
    }
}

/// One observed series with per-index missingness.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesData {
    values: Vec<f64>,
    observed: Vec<bool>,
}

impl SeriesData {
    pub fn fully_observed(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidParam("series must be nonempty".into()));
        }
        let observed = vec![true; values.len()];
        Ok(Self { values, observed })
    }

    pub fn with_missing(values: Vec<Option<f64>>) -> Result<Self> {
        if !values.iter().any(Option::is_some) {
            return Err(Error::InvalidParam(
                "series must have at least one observed index".into(),
            ));
        }
        let observed = values.iter().map(Option::is_some).collect();
        let values = values.into_iter().map(|v| v.unwrap_or(0.0)).collect();
        Ok(Self { values, observed })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, t: usize) -> f64 {
        self.values[t]
    }

    pub fn is_observed(&self, t: usize) -> bool {
        self.observed[t]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Belief over the latent factor track. `var = 0` encodes a point estimate
/// (naive Gibbs conditioning); a positive `var` comes from an EP cavity or
/// the N(0,1) prior.
#[derive(Debug, Clone, PartialEq)]
pub struct EtaBelief {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl EtaBelief {
    pub fn point(mean: Vec<f64>) -> Self {
        let var = vec![0.0; mean.len()];
        Self { mean, var }
    }

    pub fn standard_prior(len: usize) -> Self {
        Self {
            mean: vec![0.0; len],
            var: vec![1.0; len],
        }
    }

    pub fn from_track(track: &crate::expfam::DiagGaussianTrack) -> Self {
        Self {
            mean: track.means(),
            var: track.vars(),
        }
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }
}

pub(crate) struct FilterPass {
    pub loglik: f64,
    pub pred_mean: Vec<f64>,
    pub pred_var: Vec<f64>,
    pub filt_mean: Vec<f64>,
    pub filt_var: Vec<f64>,
}

/// Univariate filter with the factor belief folded into the predict step:
/// mean `a m_{t-1|t-1} + lambda mean_t`, variance
/// `a^2 s_{t-1|t-1} + sigma_x2 + lambda^2 var_t`. The first step uses
/// `init_var` in place of the AR-propagated variance.
pub(crate) fn uni_filter(y: &SeriesData, p: &SsmParams, eta: &EtaBelief) -> FilterPass {
    let t_len = y.len();
    let mut pass = FilterPass {
        loglik: 0.0,
        pred_mean: Vec::with_capacity(t_len),
        pred_var: Vec::with_capacity(t_len),
        filt_mean: Vec::with_capacity(t_len),
        filt_var: Vec::with_capacity(t_len),
    };
    let mut fm = 0.0;
    let mut fv = 0.0;
    for t in 0..t_len {
        let (pm, pv) = if t == 0 {
            (
                p.lambda * eta.mean[0],
                p.init_var + p.lambda * p.lambda * eta.var[0],
            )
        } else {
            (
                p.a * fm + p.lambda * eta.mean[t],
                p.a * p.a * fv + p.sigma_x2 + p.lambda * p.lambda * eta.var[t],
            )
        };
        if y.is_observed(t) {
            let s = pv + p.sigma_y2;
            let resid = y.value(t) - pm;
            pass.loglik += -0.5 * (resid * resid / s + (2.0 * std::f64::consts::PI * s).ln());
            let gain = pv / s;
            fm = pm + gain * resid;
            fv = pv * p.sigma_y2 / s;
        } else {
            fm = pm;
            fv = pv;
        }
        pass.pred_mean.push(pm);
        pass.pred_var.push(pv);
        pass.filt_mean.push(fm);
        pass.filt_var.push(fv);
    }
    pass
}

/// Log-density of one series with the latent path integrated out and the
/// factor track integrated against `eta`. With `eta.var = 0` this is the
/// naive (conditioned) likelihood; with a cavity belief it is the EP
/// collapsed likelihood. Missing indices skip the update step. O(T).
pub fn uni_loglik(y: &SeriesData, p: &SsmParams, eta: &EtaBelief) -> Result<f64> {
    if eta.len() != y.len() {
        return Err(Error::LengthMismatch(format!(
            "series length {} vs belief length {}",
            y.len(),
            eta.len()
        )));
    }
    Ok(uni_filter(y, p, eta).loglik)
}

/// Draws a latent path from `Pr(x | y, eta)` by forward filtering and
/// backward sampling; the factor track is a point value here.
pub fn uni_ffbs_sample<R: Rng + ?Sized>(
    y: &SeriesData,
    p: &SsmParams,
    eta_point: &[f64],
    rng: &mut R,
) -> Result<Vec<f64>> {
    if eta_point.len() != y.len() {
        return Err(Error::LengthMismatch(format!(
            "series length {} vs eta length {}",
            y.len(),
            eta_point.len()
        )));
    }
    let eta = EtaBelief::point(eta_point.to_vec());
    let pass = uni_filter(y, p, &eta);
    let t_len = y.len();
    let mut x = vec![0.0; t_len];
    let z: f64 = StandardNormal.sample(rng);
    x[t_len - 1] = pass.filt_mean[t_len - 1] + pass.filt_var[t_len - 1].sqrt() * z;
    for t in (0..t_len - 1).rev() {
        // x_{t+1} = a x_t + lambda eta_{t+1} + e; condition the filtered
        // state on the sampled successor.
        let pv_next = pass.pred_var[t + 1];
        let gain = p.a * pass.filt_var[t] / pv_next;
        let mean = pass.filt_mean[t] + gain * (x[t + 1] - pass.pred_mean[t + 1]);
        let var = (pass.filt_var[t] - gain * gain * pv_next).max(0.0);
        let z: f64 = StandardNormal.sample(rng);
        x[t] = mean + var.sqrt() * z;
    }
    Ok(x)
}

/// Exact collapsed log-likelihood of every series in a cluster with the
/// shared factor integrated out. The predict covariance gains
/// `lambda lambda'`, coupling the members; missing entries drop the
/// corresponding observation rows. O(T N_k^3).
pub fn multi_cluster_loglik(cluster: &[(&SeriesData, &SsmParams)]) -> Result<f64> {
    if cluster.is_empty() {
        return Err(Error::InvalidParam("cluster must be nonempty".into()));
    }
    let n = cluster.len();
    let t_len = cluster[0].0.len();
    for (y, _) in cluster {
        if y.len() != t_len {
            return Err(Error::LengthMismatch(
                "cluster members must share a common length".into(),
            ));
        }
    }
    let a = DVector::from_iterator(n, cluster.iter().map(|(_, p)| p.a));
    let lambda = DVector::from_iterator(n, cluster.iter().map(|(_, p)| p.lambda));
    let lam_outer = &lambda * lambda.transpose();

    let mut mean = DVector::<f64>::zeros(n);
    let mut cov = DMatrix::<f64>::zeros(n, n);
    let mut loglik = 0.0;
    for t in 0..t_len {
        // predict
        if t == 0 {
            cov.copy_from(&lam_outer);
            for i in 0..n {
                cov[(i, i)] += cluster[i].1.init_var;
            }
        } else {
            for i in 0..n {
                mean[i] *= a[i];
            }
            for i in 0..n {
                for j in 0..n {
                    cov[(i, j)] = a[i] * a[j] * cov[(i, j)] + lam_outer[(i, j)];
                }
            }
            for i in 0..n {
                cov[(i, i)] += cluster[i].1.sigma_x2;
            }
        }

        let obs: Vec<usize> = (0..n).filter(|&i| cluster[i].0.is_observed(t)).collect();
        if obs.is_empty() {
            continue;
        }
        let m = obs.len();
        let mut innov_cov = DMatrix::<f64>::zeros(m, m);
        for (ri, &i) in obs.iter().enumerate() {
            for (rj, &j) in obs.iter().enumerate() {
                innov_cov[(ri, rj)] = cov[(i, j)];
            }
            innov_cov[(ri, ri)] += cluster[i].1.sigma_y2;
        }
        let chol = match Cholesky::new(innov_cov.clone()) {
            Some(c) => c,
            None => {
                let jitter = 1e-10 * innov_cov.trace() / m as f64;
                for i in 0..m {
                    innov_cov[(i, i)] += jitter;
                }
                Cholesky::new(innov_cov).ok_or(Error::SingularInnovation { t })?
            }
        };
        let resid = DVector::from_iterator(
            m,
            obs.iter().map(|&i| cluster[i].0.value(t) - mean[i]),
        );
        let solved = chol.solve(&resid);
        let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>();
        loglik +=
            -0.5 * (resid.dot(&solved) + logdet + m as f64 * (2.0 * std::f64::consts::PI).ln());

        // update: gain = cov[:, obs] S^-1
        let mut cov_xo = DMatrix::<f64>::zeros(n, m);
        for (rj, &j) in obs.iter().enumerate() {
            for i in 0..n {
                cov_xo[(i, rj)] = cov[(i, j)];
            }
        }
        let gain = chol.solve(&cov_xo.transpose()).transpose();
        mean += &gain * &resid;
        cov -= &gain * cov_xo.transpose();
        for i in 0..n {
            for j in (i + 1)..n {
                let v = 0.5 * (cov[(i, j)] + cov[(j, i)]);
                cov[(i, j)] = v;
                cov[(j, i)] = v;
            }
        }
    }
    Ok(loglik)
}

/// Tilted factor moments for one series against a cavity belief.
#[derive(Debug, Clone)]
pub struct TiltedEta {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Log-normalizer of the tilted distribution (the EP collapsed
    /// log-likelihood of the series under the cavity).
    pub log_norm: f64,
}

/// Marginal mean and variance of `eta_t` under the tilted distribution
/// `Pr(y | eta) q(eta | cavity)` for every t, from one forward and one
/// backward pass. O(T).
///
/// The backward message `beta(x_t)`, the likelihood of future observations,
/// is carried in natural form `exp(g x - r x^2/2)`; the local joint of
/// `(x_{t-1}, eta_t, x_t)` then yields the tilted marginal by conditioning
/// the pair `(eta_t, x_t)` on the pseudo-observation formed by the time-t
/// emission and the backward message.
pub fn eta_tilted_moments(y: &SeriesData, p: &SsmParams, cavity: &EtaBelief) -> Result<TiltedEta> {
    let t_len = y.len();
    if cavity.len() != t_len {
        return Err(Error::LengthMismatch(format!(
            "series length {t_len} vs cavity length {}",
            cavity.len()
        )));
    }
    if cavity.var.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::InvalidParam("cavity variances must be positive".into()));
    }
    let pass = uni_filter(y, p, cavity);

    // backward natural-form messages over x_t
    let mut g = vec![0.0; t_len];
    let mut r = vec![0.0; t_len];
    for t in (0..t_len.saturating_sub(1)).rev() {
        let tn = t + 1;
        let (mut rp, mut gp) = (r[tn], g[tn]);
        if y.is_observed(tn) {
            rp += 1.0 / p.sigma_y2;
            gp += y.value(tn) / p.sigma_y2;
        }
        let trans_var = p.sigma_x2 + p.lambda * p.lambda * cavity.var[tn];
        let shift = p.lambda * cavity.mean[tn];
        let denom = 1.0 + trans_var * rp;
        r[t] = p.a * p.a * rp / denom;
        g[t] = p.a * (gp - shift * rp) / denom;
    }

    let mut mean = Vec::with_capacity(t_len);
    let mut var = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let mut rho = r[t];
        let mut h = g[t];
        if y.is_observed(t) {
            rho += 1.0 / p.sigma_y2;
            h += y.value(t) / p.sigma_y2;
        }
        let (m_c, v_c) = (cavity.mean[t], cavity.var[t]);
        if rho <= 0.0 {
            mean.push(m_c);
            var.push(v_c);
            continue;
        }
        // joint of (eta_t, x_t) before the time-t data and the future
        let (x_mean, x_var) = if t == 0 {
            (p.lambda * m_c, p.init_var + p.lambda * p.lambda * v_c)
        } else {
            (
                p.a * pass.filt_mean[t - 1] + p.lambda * m_c,
                p.a * p.a * pass.filt_var[t - 1] + p.sigma_x2 + p.lambda * p.lambda * v_c,
            )
        };
        let cov_eta_x = p.lambda * v_c;
        let total = x_var + 1.0 / rho;
        let pseudo = h / rho;
        mean.push(m_c + cov_eta_x * (pseudo - x_mean) / total);
        var.push(v_c - cov_eta_x * cov_eta_x / total);
    }
    Ok(TiltedEta {
        mean,
        var,
        log_norm: pass.loglik,
    })
}
