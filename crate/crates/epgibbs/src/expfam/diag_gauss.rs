//! Diagonal Gaussian over a length-T latent track in natural parameters.
//!
//! The global approximation `q(eta_k) = prod_t N(eta_{k,t} | mu_t, s2_t)` and
//! the per-observation site approximations both live in this representation:
//! `h_t = mu_t / s2_t` (precision-adjusted mean) and `rho_t = 1 / s2_t`
//! (precision). Sites are likelihood approximations, not densities, so their
//! precisions may be negative; only the global and cavity distributions must
//! be normalizable. Each track carries a log-scale constant for diagnostics;
//! it never enters categorical sampling weights.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussianTrack {
    h: Vec<f64>,
    rho: Vec<f64>,
    log_scale: f64,
}

impl DiagGaussianTrack {
    /// Zero site: contributes nothing when added to a global approximation.
    pub fn zero(len: usize) -> Self {
        Self {
            h: vec![0.0; len],
            rho: vec![0.0; len],
            log_scale: 0.0,
        }
    }

    /// Independent N(0,1) prior at every index.
    pub fn standard_prior(len: usize) -> Self {
        Self {
            h: vec![0.0; len],
            rho: vec![1.0; len],
            log_scale: 0.0,
        }
    }

    pub fn from_natural(h: Vec<f64>, rho: Vec<f64>) -> Result<Self> {
        if h.len() != rho.len() {
            return Err(Error::LengthMismatch(format!(
                "h has {} entries, rho has {}",
                h.len(),
                rho.len()
            )));
        }
        Ok(Self {
            h,
            rho,
            log_scale: 0.0,
        })
    }

    /// Build a normalizable track from mean/variance views.
    pub fn from_moments(mean: &[f64], var: &[f64]) -> Result<Self> {
        if mean.len() != var.len() {
            return Err(Error::LengthMismatch(format!(
                "mean has {} entries, var has {}",
                mean.len(),
                var.len()
            )));
        }
        let mut h = Vec::with_capacity(mean.len());
        let mut rho = Vec::with_capacity(var.len());
        for (&m, &v) in mean.iter().zip(var) {
            if !(v > 0.0) || !m.is_finite() || !v.is_finite() {
                return Err(Error::NonFiniteMoment);
            }
            rho.push(1.0 / v);
            h.push(m / v);
        }
        Ok(Self {
            h,
            rho,
            log_scale: 0.0,
        })
    }

    pub fn len(&self) -> usize {
        self.h.len()
    }

    pub fn is_empty(&self) -> bool {
        self.h.is_empty()
    }

    pub fn h(&self) -> &[f64] {
        &self.h
    }

    pub fn rho(&self) -> &[f64] {
        &self.rho
    }

    pub fn log_scale(&self) -> f64 {
        self.log_scale
    }

    pub fn set_log_scale(&mut self, c: f64) {
        self.log_scale = c;
    }

    /// All precisions strictly positive.
    pub fn is_normalizable(&self) -> bool {
        self.rho.iter().all(|&r| r > 0.0)
    }

    pub fn mean_at(&self, t: usize) -> f64 {
        self.h[t] / self.rho[t]
    }

    pub fn var_at(&self, t: usize) -> f64 {
        1.0 / self.rho[t]
    }

    pub fn means(&self) -> Vec<f64> {
        self.h.iter().zip(&self.rho).map(|(&h, &r)| h / r).collect()
    }

    pub fn vars(&self) -> Vec<f64> {
        self.rho.iter().map(|&r| 1.0 / r).collect()
    }

    /// Natural-parameter addition (include a site).
    pub fn include(&self, site: &DiagGaussianTrack) -> DiagGaussianTrack {
        debug_assert_eq!(self.len(), site.len());
        DiagGaussianTrack {
            h: self.h.iter().zip(&site.h).map(|(a, b)| a + b).collect(),
            rho: self
                .rho
                .iter()
                .zip(&site.rho)
                .map(|(a, b)| a + b)
                .collect(),
            log_scale: self.log_scale + site.log_scale,
        }
    }

    /// Natural-parameter subtraction (cavity construction). Fails if any
    /// resulting precision is non-positive.
    pub fn remove(&self, site: &DiagGaussianTrack) -> Result<DiagGaussianTrack> {
        debug_assert_eq!(self.len(), site.len());
        let mut h = Vec::with_capacity(self.len());
        let mut rho = Vec::with_capacity(self.len());
        for t in 0..self.len() {
            let r = self.rho[t] - site.rho[t];
            if !(r > 0.0) {
                return Err(Error::NonPositiveCavityPrecision { index: t });
            }
            rho.push(r);
            h.push(self.h[t] - site.h[t]);
        }
        Ok(DiagGaussianTrack {
            h,
            rho,
            log_scale: self.log_scale - site.log_scale,
        })
    }

    /// Damped blend in natural parameters: `(1-gamma)*old + gamma*new`.
    pub fn damped(old: &DiagGaussianTrack, new: &DiagGaussianTrack, gamma: f64) -> DiagGaussianTrack {
        if gamma == 1.0 {
            return new.clone();
        }
        let b = 1.0 - gamma;
        DiagGaussianTrack {
            h: old
                .h
                .iter()
                .zip(&new.h)
                .map(|(o, n)| b * o + gamma * n)
                .collect(),
            rho: old
                .rho
                .iter()
                .zip(&new.rho)
                .map(|(o, n)| b * o + gamma * n)
                .collect(),
            log_scale: b * old.log_scale + gamma * new.log_scale,
        }
    }

    /// Largest absolute natural-parameter difference against another track.
    pub fn max_natural_delta(&self, other: &DiagGaussianTrack) -> f64 {
        self.h
            .iter()
            .zip(&other.h)
            .chain(self.rho.iter().zip(&other.rho))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Moment-matched site update: the returned site, added to `cavity` in
/// natural parameters, yields a Gaussian with exactly the supplied tilted
/// moments per index. `tilted_log_norm` is the log normalizer of the tilted
/// distribution; it fixes the site scale constant so that the site
/// integrates the tilted mass against the cavity (diagnostic only).
pub fn site_from_tilted(
    tilted_mean: &[f64],
    tilted_var: &[f64],
    cavity: &DiagGaussianTrack,
    tilted_log_norm: f64,
) -> Result<DiagGaussianTrack> {
    if tilted_mean.len() != cavity.len() || tilted_var.len() != cavity.len() {
        return Err(Error::LengthMismatch(format!(
            "tilted moments ({}, {}) vs cavity length {}",
            tilted_mean.len(),
            tilted_var.len(),
            cavity.len()
        )));
    }
    let mut h = Vec::with_capacity(cavity.len());
    let mut rho = Vec::with_capacity(cavity.len());
    // log int exp(h_s x - rho_s x^2/2) N(x | cavity_t) dx, accumulated over t
    let mut log_conv = 0.0;
    for t in 0..cavity.len() {
        let (m, v) = (tilted_mean[t], tilted_var[t]);
        if !m.is_finite() || !v.is_finite() || !(v > 0.0) {
            return Err(Error::NonFiniteMoment);
        }
        let rho_new = 1.0 / v;
        let h_new = m / v;
        rho.push(rho_new - cavity.rho[t]);
        h.push(h_new - cavity.h[t]);
        let rho_c = cavity.rho[t];
        let h_c = cavity.h[t];
        log_conv += 0.5 * (rho_c / rho_new).ln() + h_new * h_new / (2.0 * rho_new)
            - h_c * h_c / (2.0 * rho_c);
    }
    Ok(DiagGaussianTrack {
        h,
        rho,
        log_scale: tilted_log_norm - log_conv,
    })
}
