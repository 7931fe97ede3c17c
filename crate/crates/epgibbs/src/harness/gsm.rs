//! Stale-site diagnostic on Gaussian-scale-mixture components.
//!
//! Components are `p(y | phi_k) = (1-r) N(y | phi_k, s2) + r N(y | phi_k, C s2)`
//! with a Gaussian approximating family over each `phi_k`. The sparse-update
//! sampler refreshes only the visited site; the diagnostic measures, at
//! every full pass, how far the running approximation `q` sits from the
//! fully converged EP approximation `q*` at the same assignments: summed KL
//! plus percent errors of the mean and variance. At `r = 0` the likelihood
//! factor is itself Gaussian, sites are exact and every error is
//! identically zero.

use serde::Serialize;

use crate::error::Result;
use crate::expfam::{site_from_tilted, DiagGaussianTrack};
use crate::gibbs::{
    full_refresh, gibbs_sweep, ClusterState, DirichletPrior, SweepModel, SweepOrder,
};
use crate::metrics::kl_diag_gaussians;

use super::config::GsmDatasetConfig;
use super::generate::generate_gsm;
use super::rng::{derive_rng, Purpose};

const LN_2PI: f64 = 1.8378770664093453;

fn gauss_logpdf(y: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((y - mean) * (y - mean) / var + var.ln() + LN_2PI)
}

/// Scalar-location EP model over GSM components.
pub struct GsmModel {
    pub y: Vec<f64>,
    pub k: usize,
    pub r: f64,
    pub c: f64,
    pub sigma2: f64,
    /// Prior variance of each component location.
    pub prior_var: f64,
}

impl GsmModel {
    /// Tilted moments of one site against a scalar cavity `(m, v)`: the
    /// posterior is a two-component Gaussian mixture. Returns
    /// `(mean, var, log_norm)`.
    fn tilted(&self, y: f64, m: f64, v: f64) -> (f64, f64, f64) {
        let narrow_var = self.sigma2 + v;
        let wide_var = self.c * self.sigma2 + v;
        let lw0 = (1.0 - self.r).ln() + gauss_logpdf(y, m, narrow_var);
        let lw1 = if self.r > 0.0 {
            self.r.ln() + gauss_logpdf(y, m, wide_var)
        } else {
            f64::NEG_INFINITY
        };
        let log_norm = if lw1 == f64::NEG_INFINITY {
            lw0
        } else {
            let hi = lw0.max(lw1);
            hi + ((lw0 - hi).exp() + (lw1 - hi).exp()).ln()
        };
        let w0 = (lw0 - log_norm).exp();
        let w1 = 1.0 - w0;
        let post = |s2: f64| {
            let pv = 1.0 / (1.0 / v + 1.0 / s2);
            let pm = pv * (m / v + y / s2);
            (pm, pv)
        };
        let (m0, v0) = post(self.sigma2);
        let (m1, v1) = post(self.c * self.sigma2);
        let mean = w0 * m0 + w1 * m1;
        let var = w0 * (v0 + m0 * m0) + w1 * (v1 + m1 * m1) - mean * mean;
        (mean, var, log_norm)
    }
}

impl SweepModel for GsmModel {
    type Approx = DiagGaussianTrack;

    fn num_items(&self) -> usize {
        self.y.len()
    }

    fn num_clusters(&self) -> usize {
        self.k
    }

    fn zero_site(&self) -> DiagGaussianTrack {
        DiagGaussianTrack::zero(1)
    }

    fn prior_global(&self) -> DiagGaussianTrack {
        DiagGaussianTrack::from_moments(&[0.0], &[self.prior_var]).expect("valid prior")
    }

    fn detach(&self, state: &mut ClusterState<DiagGaussianTrack>, i: usize) -> Result<()> {
        let k = state.assignment(i);
        let cavity = state.globals[k].remove(&state.sites[i])?;
        state.globals[k] = cavity;
        state.sites[i] = self.zero_site();
        Ok(())
    }

    fn candidate_log_likes(
        &self,
        state: &ClusterState<DiagGaussianTrack>,
        i: usize,
    ) -> Result<Vec<f64>> {
        Ok((0..self.k)
            .map(|k| {
                let (m, v) = (state.globals[k].mean_at(0), state.globals[k].var_at(0));
                self.tilted(self.y[i], m, v).2
            })
            .collect())
    }

    fn matched_site(
        &self,
        state: &ClusterState<DiagGaussianTrack>,
        i: usize,
        k: usize,
    ) -> Result<DiagGaussianTrack> {
        let cavity = &state.globals[k];
        if self.r == 0.0 {
            // conjugate case: the likelihood factor is exactly Gaussian, so
            // the site is the factor itself in natural parameters,
            // independent of the cavity
            let mut site = DiagGaussianTrack::from_natural(
                vec![self.y[i] / self.sigma2],
                vec![1.0 / self.sigma2],
            )?;
            site.set_log_scale(-0.5 * (self.y[i] * self.y[i] / self.sigma2 + self.sigma2.ln() + LN_2PI));
            return Ok(site);
        }
        let (m, v) = (cavity.mean_at(0), cavity.var_at(0));
        let (tm, tv, log_norm) = self.tilted(self.y[i], m, v);
        let mut site = site_from_tilted(&[tm], &[tv], cavity, log_norm)?;
        // a mixture posterior can be wider than the cavity; cap the site so
        // every global it enters stays normalizable
        if cavity.rho()[0] + site.rho()[0] < 1e-10 {
            let capped = 1e-10 - cavity.rho()[0];
            site = DiagGaussianTrack::from_natural(vec![site.h()[0]], vec![capped])?;
        }
        Ok(site)
    }

    fn include_site(
        &self,
        state: &mut ClusterState<DiagGaussianTrack>,
        k: usize,
        site: &DiagGaussianTrack,
    ) {
        state.globals[k] = state.globals[k].include(site);
    }

    fn damp(&self, _old: &DiagGaussianTrack, matched: DiagGaussianTrack) -> DiagGaussianTrack {
        matched
    }

    fn approx_delta(&self, a: &DiagGaussianTrack, b: &DiagGaussianTrack) -> f64 {
        a.max_natural_delta(b)
    }

    fn rebuild_global(
        &self,
        state: &ClusterState<DiagGaussianTrack>,
        k: usize,
        skip: Option<usize>,
    ) -> DiagGaussianTrack {
        let mut g = self.prior_global();
        for i in state.members(k, skip) {
            g = g.include(&state.sites[i]);
        }
        g
    }

    fn global_is_valid(&self, global: &DiagGaussianTrack) -> bool {
        global.is_normalizable()
    }
}

/// One output row per `(C, r, delta, pass)` cell, aggregated over trials.
#[derive(Debug, Clone, Serialize)]
pub struct GsmDiagRow {
    pub c: f64,
    pub r: f64,
    pub delta: f64,
    pub pass: usize,
    /// Mean over trials of the summed per-cluster KL(q || q*).
    pub kl: f64,
    /// Median percent error of the component means (1 = 1%).
    pub mean_pe: f64,
    pub mean_ape: f64,
    pub var_pe: f64,
    pub var_ape: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GsmDiagSpec {
    pub n: usize,
    pub c_values: Vec<f64>,
    pub r_values: Vec<f64>,
    pub delta_values: Vec<f64>,
    pub sigma2: f64,
    pub prior_var: f64,
    pub passes: usize,
    pub trials: usize,
    pub seed: u64,
    /// Start the sites from converged full EP instead of flat.
    pub warm_start: bool,
}

impl Default for GsmDiagSpec {
    fn default() -> Self {
        Self {
            n: 100,
            c_values: vec![2.0, 5.0, 10.0],
            r_values: vec![0.0, 0.2, 0.5],
            delta_values: vec![0.0, 0.5],
            sigma2: 1.0,
            prior_var: 25.0,
            passes: 5,
            trials: 10,
            seed: 0,
            warm_start: false,
        }
    }
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = values.len() / 2;
    if values.len() % 2 == 1 {
        values[mid]
    } else {
        0.5 * (values[mid - 1] + values[mid])
    }
}

fn percent_error(got: f64, want: f64) -> f64 {
    let diff = got - want;
    if diff == 0.0 {
        return 0.0;
    }
    100.0 * diff / want.abs().max(1e-12)
}

/// Runs the sparse-update sampler over the setting grid and compares the
/// running approximation against converged EP at every full pass.
pub fn gsm_diagnostic(spec: &GsmDiagSpec) -> Result<Vec<GsmDiagRow>> {
    let mut rows = Vec::new();
    for &c in &spec.c_values {
        for &r in &spec.r_values {
            for &delta in &spec.delta_values {
                // per pass: KLs across trials, PEs across trials x clusters
                let mut kls = vec![Vec::new(); spec.passes];
                let mut mean_pes = vec![Vec::new(); spec.passes];
                let mut var_pes = vec![Vec::new(); spec.passes];
                for trial in 0..spec.trials {
                    let cell_seed = super::rng::derive_seed(
                        spec.seed,
                        Purpose::Diagnostic,
                        (trial as u64) << 32
                            | (c.to_bits() ^ r.to_bits().rotate_left(17)
                                ^ delta.to_bits().rotate_left(34))
                                & 0xffff_ffff,
                    );
                    let data = generate_gsm(
                        &GsmDatasetConfig {
                            n: spec.n,
                            c,
                            r,
                            delta,
                            sigma2: spec.sigma2,
                        },
                        cell_seed,
                    );
                    let model = GsmModel {
                        y: data.y.clone(),
                        k: 2,
                        r,
                        c,
                        sigma2: spec.sigma2,
                        prior_var: spec.prior_var,
                    };
                    let mut rng = derive_rng(cell_seed, Purpose::Chain, 0);
                    let mut init_rng = derive_rng(cell_seed, Purpose::Init, 0);
                    let z0: Vec<usize> = (0..spec.n)
                        .map(|_| rand::Rng::random_range(&mut init_rng, 0..2usize))
                        .collect();
                    let mut state = ClusterState::init(z0, &model)?;
                    if spec.warm_start {
                        full_refresh(&model, &mut state, 500, 1e-10)?;
                    }
                    let prior = DirichletPrior::new(1.0, 2)?;
                    for pass in 0..spec.passes {
                        gibbs_sweep(&model, &mut state, &prior, SweepOrder::Fixed, &mut rng)?;
                        // converged EP at the same assignments
                        let mut star = state.clone();
                        full_refresh(&model, &mut star, 500, 1e-10)?;
                        let mut kl = 0.0;
                        for k in 0..2 {
                            kl += kl_diag_gaussians(&state.globals[k], &star.globals[k])?;
                            mean_pes[pass].push(percent_error(
                                state.globals[k].mean_at(0),
                                star.globals[k].mean_at(0),
                            ));
                            var_pes[pass].push(percent_error(
                                state.globals[k].var_at(0),
                                star.globals[k].var_at(0),
                            ));
                        }
                        kls[pass].push(kl);
                    }
                }
                for pass in 0..spec.passes {
                    let kl = kls[pass].iter().sum::<f64>() / kls[pass].len() as f64;
                    let mut apes: Vec<f64> =
                        mean_pes[pass].iter().map(|p| p.abs()).collect();
                    let mut vapes: Vec<f64> =
                        var_pes[pass].iter().map(|p| p.abs()).collect();
                    rows.push(GsmDiagRow {
                        c,
                        r,
                        delta,
                        pass: pass + 1,
                        kl,
                        mean_pe: median(&mut mean_pes[pass]),
                        mean_ape: median(&mut apes),
                        var_pe: median(&mut var_pes[pass]),
                        var_ape: median(&mut vapes),
                    });
                }
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conjugate_cells_are_exactly_zero() {
        let spec = GsmDiagSpec {
            c_values: vec![2.0],
            r_values: vec![0.0],
            delta_values: vec![0.0, 0.5],
            trials: 2,
            passes: 3,
            n: 40,
            ..GsmDiagSpec::default()
        };
        let rows = gsm_diagnostic(&spec).unwrap();
        assert_eq!(rows.len(), 2 * 3);
        for row in rows {
            assert_eq!(row.kl, 0.0, "cell {row:?}");
            assert_eq!(row.mean_pe, 0.0);
            assert_eq!(row.mean_ape, 0.0);
            assert_eq!(row.var_pe, 0.0);
            assert_eq!(row.var_ape, 0.0);
        }
    }

    #[test]
    fn stale_site_error_levels_off() {
        let spec = GsmDiagSpec {
            c_values: vec![5.0],
            r_values: vec![0.2],
            delta_values: vec![0.5],
            trials: 6,
            passes: 5,
            n: 60,
            seed: 3,
            ..GsmDiagSpec::default()
        };
        let rows = gsm_diagnostic(&spec).unwrap();
        let kl_at = |pass: usize| rows.iter().find(|r| r.pass == pass).unwrap().kl;
        assert!(kl_at(5) <= 2.0 * kl_at(2).max(1e-12), "{} vs {}", kl_at(5), kl_at(2));
    }

    #[test]
    fn warm_start_plateaus_at_flat_start_level() {
        let mk = |warm: bool| GsmDiagSpec {
            c_values: vec![2.0],
            r_values: vec![0.2],
            delta_values: vec![0.5],
            trials: 20,
            passes: 5,
            n: 60,
            seed: 5,
            warm_start: warm,
            ..GsmDiagSpec::default()
        };
        let flat = gsm_diagnostic(&mk(false)).unwrap();
        let warm = gsm_diagnostic(&mk(true)).unwrap();
        let flat_kl = flat.iter().find(|r| r.pass == 5).unwrap().kl;
        let warm_kl = warm.iter().find(|r| r.pass == 5).unwrap().kl;
        // warm start grows from zero toward the flat-start plateau
        let warm_kl1 = warm.iter().find(|r| r.pass == 1).unwrap().kl;
        assert!(warm_kl1 <= warm_kl + 1e-12);
        let ratio = warm_kl / flat_kl;
        assert!((0.5..=2.0).contains(&ratio), "plateau ratio {ratio}");
    }
}
