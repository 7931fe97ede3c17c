//! Correlated time-series clustering: naive, exact collapsed and EP
//! approximate collapsed samplers, plus conjugate hyperparameter draws.
//!
//! Within a cluster the series share a latent factor process
//! `eta_{k,t} ~ N(0,1)` through loadings `lambda_i`. The naive sampler
//! conditions on point values of `eta`; the collapsed sampler integrates
//! `eta` exactly with the coupled filter (cubic in cluster size); the EP
//! sampler keeps one diagonal Gaussian track per cluster and scores
//! candidates with the O(T) modified filter.

use rand::Rng;
use rand_distr::{Distribution, Gamma as GammaDist, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::expfam::{site_from_tilted, DiagGaussianTrack};
use crate::gibbs::{ClusterState, SweepModel};
use crate::kalman::{
    eta_tilted_moments, multi_cluster_loglik, stationary_init_var, uni_ffbs_sample, uni_loglik,
    EtaBelief, SeriesData, SsmParams,
};

/// Conjugate priors for the per-series state-space hyperparameters.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct HyperPriors {
    pub a_mean: f64,
    pub a_var: f64,
    pub lambda_mean: f64,
    pub lambda_var: f64,
    /// Inverse-Gamma (shape, rate) on the pooled innovation variance.
    pub sigma_x2_shape: f64,
    pub sigma_x2_rate: f64,
    /// Inverse-Gamma (shape, rate) on each observation variance.
    pub sigma_y2_shape: f64,
    pub sigma_y2_rate: f64,
}

impl Default for HyperPriors {
    fn default() -> Self {
        Self {
            a_mean: 0.9,
            a_var: 0.25,
            lambda_mean: 0.0,
            lambda_var: 1.0,
            sigma_x2_shape: 2.0,
            sigma_x2_rate: 0.02,
            sigma_y2_shape: 2.0,
            sigma_y2_rate: 1.0,
        }
    }
}

/// Naive assignment weight: one series against a candidate cluster's point
/// factor track, with the latent path integrated out. O(T).
pub fn naive_z_loglike(
    i: usize,
    k: usize,
    eta_points: &[Vec<f64>],
    params: &[SsmParams],
    data: &[SeriesData],
) -> Result<f64> {
    uni_loglik(&data[i], &params[i], &EtaBelief::point(eta_points[k].clone()))
}

/// Exact collapsed assignment weight:
/// `log p(y_i | members(k), z_i = k) = L(members + i) - L(members)` via the
/// coupled-cluster filter; an empty candidate reduces to the singleton
/// likelihood. `i` must currently be detached from every cluster.
pub fn collapsed_z_loglike(
    i: usize,
    members: &[usize],
    params: &[SsmParams],
    data: &[SeriesData],
) -> Result<f64> {
    let mut with: Vec<(&SeriesData, &SsmParams)> =
        members.iter().map(|&j| (&data[j], &params[j])).collect();
    with.push((&data[i], &params[i]));
    let joint = multi_cluster_loglik(&with)?;
    if members.is_empty() {
        return Ok(joint);
    }
    let base: Vec<(&SeriesData, &SsmParams)> =
        members.iter().map(|&j| (&data[j], &params[j])).collect();
    Ok(joint - multi_cluster_loglik(&base)?)
}

/// EP assignment weight: the O(T) filter against the cavity moments of the
/// candidate cluster's factor track (for clusters not holding `i` the
/// cavity is the full approximation).
pub fn ep_z_loglike(
    i: usize,
    cavity: &DiagGaussianTrack,
    params: &[SsmParams],
    data: &[SeriesData],
) -> Result<f64> {
    uni_loglik(&data[i], &params[i], &EtaBelief::from_track(cavity))
}

/// Conjugate draw of a cluster's factor track given its members' latent
/// paths: `eta_t ~ N(m_t, v_t)` with `v_t = (1 + sum lambda^2/s_t)^-1`,
/// `m_t = v_t sum lambda (x_t - a x_{t-1}) / s_t`, where `s_t` is the
/// innovation variance (`init_var` at the first step). Empty clusters draw
/// from the N(0,1) prior.
pub fn sample_eta_given_paths<R: Rng + ?Sized>(
    members: &[(&[f64], &SsmParams)],
    t_len: usize,
    rng: &mut R,
) -> Vec<f64> {
    let mut eta = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let mut prec = 1.0;
        let mut lean = 0.0;
        for (x, p) in members {
            let s_t = if t == 0 { p.init_var } else { p.sigma_x2 };
            let resid = if t == 0 { x[0] } else { x[t] - p.a * x[t - 1] };
            prec += p.lambda * p.lambda / s_t;
            lean += p.lambda * resid / s_t;
        }
        let var = 1.0 / prec;
        let z: f64 = StandardNormal.sample(rng);
        eta.push(var * lean + var.sqrt() * z);
    }
    eta
}

/// Conjugate hyperparameter draws given instantiated latents, naive-style:
/// per-series `a_i` and `lambda_i` from Normal regression posteriors, the
/// pooled innovation variance and per-series observation variances from
/// Inverse-Gamma posteriors. `init_var` is re-derived from the stationary
/// rule afterwards.
pub fn sample_ts_hyperparams<R: Rng + ?Sized>(
    data: &[SeriesData],
    assignments: &[usize],
    x: &[Vec<f64>],
    eta: &[Vec<f64>],
    params: &mut [SsmParams],
    priors: &HyperPriors,
    rng: &mut R,
) -> Result<()> {
    let n = data.len();
    if assignments.len() != n || x.len() != n || params.len() != n {
        return Err(Error::ShapeMismatch("hyperparameter inputs disagree".into()));
    }

    // a_i | lambda_i, sigma_x2
    for i in 0..n {
        let p = &mut params[i];
        let track = &eta[assignments[i]];
        let mut prec = 1.0 / priors.a_var;
        let mut lean = priors.a_mean / priors.a_var;
        for t in 1..x[i].len() {
            let target = x[i][t] - p.lambda * track[t];
            prec += x[i][t - 1] * x[i][t - 1] / p.sigma_x2;
            lean += x[i][t - 1] * target / p.sigma_x2;
        }
        let var = 1.0 / prec;
        let z: f64 = StandardNormal.sample(rng);
        p.a = var * lean + var.sqrt() * z;
    }

    // lambda_i | a_i, sigma_x2 (first step uses init_var)
    for i in 0..n {
        let p = &mut params[i];
        let track = &eta[assignments[i]];
        let mut prec = 1.0 / priors.lambda_var;
        let mut lean = priors.lambda_mean / priors.lambda_var;
        for t in 0..x[i].len() {
            let (s_t, resid) = if t == 0 {
                (p.init_var, x[i][0])
            } else {
                (p.sigma_x2, x[i][t] - p.a * x[i][t - 1])
            };
            prec += track[t] * track[t] / s_t;
            lean += track[t] * resid / s_t;
        }
        let var = 1.0 / prec;
        let z: f64 = StandardNormal.sample(rng);
        p.lambda = var * lean + var.sqrt() * z;
    }

    // pooled sigma_x2 | a, lambda
    let mut count = 0usize;
    let mut ssq = 0.0;
    for i in 0..n {
        let p = &params[i];
        let track = &eta[assignments[i]];
        for t in 1..x[i].len() {
            let e = x[i][t] - p.a * x[i][t - 1] - p.lambda * track[t];
            ssq += e * e;
            count += 1;
        }
    }
    let shape = priors.sigma_x2_shape + 0.5 * count as f64;
    let rate = priors.sigma_x2_rate + 0.5 * ssq;
    let gamma = GammaDist::new(shape, 1.0 / rate)
        .map_err(|_| Error::InvalidParam("bad sigma_x2 posterior".into()))?;
    let sigma_x2 = 1.0 / gamma.sample(rng).max(1e-300);
    for p in params.iter_mut() {
        p.sigma_x2 = sigma_x2;
    }

    // per-series sigma_y2 (only indices with an instantiated latent)
    for i in 0..n {
        let mut count = 0usize;
        let mut ssq = 0.0;
        for t in 0..data[i].len().min(x[i].len()) {
            if data[i].is_observed(t) {
                let e = data[i].value(t) - x[i][t];
                ssq += e * e;
                count += 1;
            }
        }
        let shape = priors.sigma_y2_shape + 0.5 * count as f64;
        let rate = priors.sigma_y2_rate + 0.5 * ssq;
        let gamma = GammaDist::new(shape, 1.0 / rate)
            .map_err(|_| Error::InvalidParam("bad sigma_y2 posterior".into()))?;
        params[i].sigma_y2 = 1.0 / gamma.sample(rng).max(1e-300);
    }

    for p in params.iter_mut() {
        p.init_var = stationary_init_var(p.a, p.sigma_x2);
    }
    Ok(())
}

/// Draw every series' latent path by FFBS against its cluster's current
/// point factor track.
pub fn refresh_latent_paths<R: Rng + ?Sized>(
    data: &[SeriesData],
    params: &[SsmParams],
    assignments: &[usize],
    eta: &[Vec<f64>],
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    data.iter()
        .enumerate()
        .map(|(i, y)| uni_ffbs_sample(y, &params[i], &eta[assignments[i]], rng))
        .collect()
}

/// Naive Gibbs: conditions the assignment weights on point factor tracks,
/// refreshed each iteration from instantiated latent paths.
pub struct NaiveTsModel {
    pub data: Vec<SeriesData>,
    pub params: Vec<SsmParams>,
    pub k: usize,
    pub eta: Vec<Vec<f64>>,
    pub x: Vec<Vec<f64>>,
}

impl NaiveTsModel {
    pub fn new<R: Rng + ?Sized>(
        data: Vec<SeriesData>,
        params: Vec<SsmParams>,
        k: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if data.len() != params.len() || data.is_empty() || k == 0 {
            return Err(Error::InvalidParam("need matching data/params and K >= 1".into()));
        }
        let t_len = data[0].len();
        let eta = (0..k)
            .map(|_| (0..t_len).map(|_| StandardNormal.sample(rng)).collect())
            .collect();
        let x = vec![vec![0.0; t_len]; data.len()];
        Ok(Self {
            data,
            params,
            k,
            eta,
            x,
        })
    }

    /// Steps (a) and (b) of one naive iteration: FFBS every latent path
    /// given the current tracks, then redraw each cluster's track given the
    /// member paths.
    pub fn refresh_latents<R: Rng + ?Sized>(
        &mut self,
        assignments: &[usize],
        rng: &mut R,
    ) -> Result<()> {
        self.x = refresh_latent_paths(&self.data, &self.params, assignments, &self.eta, rng)?;
        let t_len = self.data[0].len();
        for k in 0..self.k {
            let members: Vec<(&[f64], &SsmParams)> = assignments
                .iter()
                .enumerate()
                .filter(|&(_, &z)| z == k)
                .map(|(i, _)| (self.x[i].as_slice(), &self.params[i]))
                .collect();
            self.eta[k] = sample_eta_given_paths(&members, t_len, rng);
        }
        Ok(())
    }
}

impl SweepModel for NaiveTsModel {
    type Approx = ();

    fn num_items(&self) -> usize {
        self.data.len()
    }

    fn num_clusters(&self) -> usize {
        self.k
    }

    fn zero_site(&self) {}

    fn prior_global(&self) {}

    fn detach(&self, _state: &mut ClusterState<()>, _i: usize) -> Result<()> {
        Ok(())
    }

    fn candidate_log_likes(&self, _state: &ClusterState<()>, i: usize) -> Result<Vec<f64>> {
        (0..self.k)
            .map(|k| naive_z_loglike(i, k, &self.eta, &self.params, &self.data))
            .collect()
    }

    fn matched_site(&self, _state: &ClusterState<()>, _i: usize, _k: usize) -> Result<()> {
        Ok(())
    }

    fn include_site(&self, _state: &mut ClusterState<()>, _k: usize, _site: &()) {}

    fn damp(&self, _old: &(), _matched: ()) {}

    fn approx_delta(&self, _a: &(), _b: &()) -> f64 {
        0.0
    }

    fn rebuild_global(&self, _state: &ClusterState<()>, _k: usize, _skip: Option<usize>) {}
}

/// Exact collapsed Gibbs: every candidate weight runs the coupled filter
/// over the cluster with and without the visited series. The without-`i`
/// term is computed once per candidate cluster per visit.
pub struct CollapsedTsModel {
    pub data: Vec<SeriesData>,
    pub params: Vec<SsmParams>,
    pub k: usize,
    /// Evaluate candidate clusters concurrently.
    pub parallel: bool,
}

impl CollapsedTsModel {
    pub fn new(data: Vec<SeriesData>, params: Vec<SsmParams>, k: usize) -> Result<Self> {
        if data.len() != params.len() || data.is_empty() || k == 0 {
            return Err(Error::InvalidParam("need matching data/params and K >= 1".into()));
        }
        Ok(Self {
            data,
            params,
            k,
            parallel: false,
        })
    }

    /// Exact collapsed joint data log-likelihood at fixed assignments
    /// (trace diagnostic, shared by all three samplers).
    pub fn joint_loglik(&self, assignments: &[usize]) -> Result<f64> {
        let mut total = 0.0;
        for k in 0..self.k {
            let members: Vec<(&SeriesData, &SsmParams)> = assignments
                .iter()
                .enumerate()
                .filter(|&(_, &z)| z == k)
                .map(|(i, _)| (&self.data[i], &self.params[i]))
                .collect();
            if !members.is_empty() {
                total += multi_cluster_loglik(&members)?;
            }
        }
        Ok(total)
    }
}

impl SweepModel for CollapsedTsModel {
    type Approx = ();

    fn num_items(&self) -> usize {
        self.data.len()
    }

    fn num_clusters(&self) -> usize {
        self.k
    }

    fn zero_site(&self) {}

    fn prior_global(&self) {}

    fn detach(&self, _state: &mut ClusterState<()>, _i: usize) -> Result<()> {
        Ok(())
    }

    fn candidate_log_likes(&self, state: &ClusterState<()>, i: usize) -> Result<Vec<f64>> {
        let eval = |k: usize| -> Result<f64> {
            let members = state.members(k, Some(i));
            collapsed_z_loglike(i, &members, &self.params, &self.data)
        };
        if self.parallel {
            (0..self.k).into_par_iter().map(eval).collect()
        } else {
            (0..self.k).map(eval).collect()
        }
    }

    fn matched_site(&self, _state: &ClusterState<()>, _i: usize, _k: usize) -> Result<()> {
        Ok(())
    }

    fn include_site(&self, _state: &mut ClusterState<()>, _k: usize, _site: &()) {}

    fn damp(&self, _old: &(), _matched: ()) {}

    fn approx_delta(&self, _a: &(), _b: &()) -> f64 {
        0.0
    }

    fn rebuild_global(&self, _state: &ClusterState<()>, _k: usize, _skip: Option<usize>) {}
}

/// EP approximate collapsed Gibbs: one diagonal Gaussian track per cluster
/// over its factor process, one site per series living in its current
/// cluster.
pub struct EpTsModel {
    pub data: Vec<SeriesData>,
    pub params: Vec<SsmParams>,
    pub k: usize,
    t_len: usize,
    /// Site-update damping in (0, 1]; 1 is undamped.
    pub damping: f64,
    /// Evaluate candidate clusters concurrently.
    pub parallel: bool,
}

impl EpTsModel {
    pub fn new(data: Vec<SeriesData>, params: Vec<SsmParams>, k: usize) -> Result<Self> {
        if data.len() != params.len() || data.is_empty() || k == 0 {
            return Err(Error::InvalidParam("need matching data/params and K >= 1".into()));
        }
        let t_len = data[0].len();
        if data.iter().any(|y| y.len() != t_len) {
            return Err(Error::LengthMismatch("series must share a common length".into()));
        }
        Ok(Self {
            data,
            params,
            k,
            t_len,
            damping: 1.0,
            parallel: false,
        })
    }
}

impl SweepModel for EpTsModel {
    type Approx = DiagGaussianTrack;

    fn num_items(&self) -> usize {
        self.data.len()
    }

    fn num_clusters(&self) -> usize {
        self.k
    }

    fn zero_site(&self) -> DiagGaussianTrack {
        DiagGaussianTrack::zero(self.t_len)
    }

    fn prior_global(&self) -> DiagGaussianTrack {
        DiagGaussianTrack::standard_prior(self.t_len)
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
        let eval = |k: usize| ep_z_loglike(i, &state.globals[k], &self.params, &self.data);
        if self.parallel {
            (0..self.k).into_par_iter().map(eval).collect()
        } else {
            (0..self.k).map(eval).collect()
        }
    }

    fn matched_site(
        &self,
        state: &ClusterState<DiagGaussianTrack>,
        i: usize,
        k: usize,
    ) -> Result<DiagGaussianTrack> {
        let cavity = &state.globals[k];
        let tilted = eta_tilted_moments(
            &self.data[i],
            &self.params[i],
            &EtaBelief::from_track(cavity),
        )?;
        site_from_tilted(&tilted.mean, &tilted.var, cavity, tilted.log_norm)
    }

    fn include_site(
        &self,
        state: &mut ClusterState<DiagGaussianTrack>,
        k: usize,
        site: &DiagGaussianTrack,
    ) {
        state.globals[k] = state.globals[k].include(site);
    }

    fn damp(&self, old: &DiagGaussianTrack, matched: DiagGaussianTrack) -> DiagGaussianTrack {
        DiagGaussianTrack::damped(old, &matched, self.damping)
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gibbs::{full_refresh, gibbs_sweep, DirichletPrior, SweepOrder};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_params(rng: &mut ChaCha8Rng) -> SsmParams {
        SsmParams::with_init_var(
            rng.random_range(-0.8..0.95),
            rng.random_range(-1.2..1.2),
            rng.random_range(0.05..0.8),
            rng.random_range(0.2..1.5),
            rng.random_range(0.2..1.5),
        )
        .unwrap()
    }

    fn random_dataset(
        rng: &mut ChaCha8Rng,
        n: usize,
        t_len: usize,
    ) -> (Vec<SeriesData>, Vec<SsmParams>) {
        let data = (0..n)
            .map(|_| {
                SeriesData::fully_observed((0..t_len).map(|_| rng.random_range(-2.0..2.0)).collect())
                    .unwrap()
            })
            .collect();
        let params = (0..n).map(|_| random_params(rng)).collect();
        (data, params)
    }

    /// Paper-style generator: shared factor tracks, AR dynamics, Gaussian
    /// observation noise.
    fn generate_clustered(
        rng: &mut ChaCha8Rng,
        n: usize,
        t_len: usize,
        k: usize,
        sigma_x2: f64,
        sigma_y2: f64,
        a: f64,
        lambda: f64,
    ) -> (Vec<SeriesData>, Vec<SsmParams>, Vec<usize>) {
        let eta: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..t_len).map(|_| StandardNormal.sample(rng)).collect())
            .collect();
        let truth: Vec<usize> = (0..n).map(|i| i % k).collect();
        let init_var = stationary_init_var(a, sigma_x2);
        let mut data = Vec::with_capacity(n);
        let mut params = Vec::with_capacity(n);
        for i in 0..n {
            let track = &eta[truth[i]];
            let mut x = vec![0.0; t_len];
            for t in 0..t_len {
                let innov_sd = if t == 0 { init_var.sqrt() } else { sigma_x2.sqrt() };
                let prev = if t == 0 { 0.0 } else { a * x[t - 1] };
                let z: f64 = StandardNormal.sample(rng);
                x[t] = prev + lambda * track[t] + innov_sd * z;
            }
            let y: Vec<f64> = x
                .iter()
                .map(|&v| {
                    let z: f64 = StandardNormal.sample(rng);
                    v + sigma_y2.sqrt() * z
                })
                .collect();
            data.push(SeriesData::fully_observed(y).unwrap());
            params.push(
                SsmParams::with_init_var(a, lambda, sigma_x2, sigma_y2, init_var).unwrap(),
            );
        }
        (data, params, truth)
    }

    #[test]
    fn naive_weight_ignores_cluster_when_unloaded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (data, mut params) = random_dataset(&mut rng, 2, 6);
        params[0].lambda = 0.0;
        let eta: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let w: Vec<f64> = (0..3)
            .map(|k| naive_z_loglike(0, k, &eta, &params, &data).unwrap())
            .collect();
        assert_abs_diff_eq!(w[0], w[1], epsilon = 1e-12);
        assert_abs_diff_eq!(w[1], w[2], epsilon = 1e-12);

        // zero track equals the unshifted likelihood
        let zero = vec![vec![0.0; 6]];
        let w0 = naive_z_loglike(1, 0, &zero, &params, &data).unwrap();
        let direct = uni_loglik(&data[1], &params[1], &EtaBelief::point(vec![0.0; 6])).unwrap();
        assert_eq!(w0, direct);
    }

    #[test]
    fn collapsed_weight_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (data, mut params) = random_dataset(&mut rng, 3, 4);

        // empty candidate equals the singleton path through the other code
        let empty = collapsed_z_loglike(0, &[], &params, &data).unwrap();
        let single =
            uni_loglik(&data[0], &params[0], &EtaBelief::standard_prior(4)).unwrap();
        assert_abs_diff_eq!(empty, single, epsilon = 1e-10);

        // an unloaded member carries no factor information
        params[1].lambda = 0.0;
        let with_unloaded = collapsed_z_loglike(0, &[1], &params, &data).unwrap();
        assert_abs_diff_eq!(with_unloaded, empty, epsilon = 1e-10);

        // dense conditional oracle for a two-member cluster
        let joint = crate::kalman::multi_cluster_loglik(&[
            (&data[0], &params[0]),
            (&data[2], &params[2]),
        ])
        .unwrap();
        let base = crate::kalman::multi_cluster_loglik(&[(&data[2], &params[2])]).unwrap();
        let fast = collapsed_z_loglike(0, &[2], &params, &data).unwrap();
        assert_abs_diff_eq!(fast, joint - base, epsilon = 1e-12);
    }

    #[test]
    fn collapsed_weight_ignores_other_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (data, params) = random_dataset(&mut rng, 6, 5);
        let model = CollapsedTsModel::new(data, params, 3).unwrap();
        let s1 = ClusterState::init(vec![0, 1, 1, 2, 2, 0], &model).unwrap();
        let s2 = ClusterState::init(vec![0, 2, 2, 1, 1, 0], &model).unwrap(); // swap clusters 1/2
        let w1 = model.candidate_log_likes(&s1, 0).unwrap();
        let w2 = model.candidate_log_likes(&s2, 0).unwrap();
        assert_abs_diff_eq!(w1[1], w2[2], epsilon = 1e-12);
        assert_abs_diff_eq!(w1[2], w2[1], epsilon = 1e-12);
    }

    #[test]
    fn ep_weight_singleton_exactness_and_unloaded_agreement() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let t_len = rng.random_range(1..7);
            let (data, params) = random_dataset(&mut rng, 1, t_len);
            let prior = DiagGaussianTrack::standard_prior(t_len);
            let ep = ep_z_loglike(0, &prior, &params, &data).unwrap();
            let collapsed = collapsed_z_loglike(0, &[], &params, &data).unwrap();
            assert_abs_diff_eq!(ep, collapsed, epsilon = 1e-10);
        }

        // lambda = 0: all three weights coincide
        let (data, mut params) = random_dataset(&mut rng, 1, 5);
        params[0].lambda = 0.0;
        let prior = DiagGaussianTrack::standard_prior(5);
        let ep = ep_z_loglike(0, &prior, &params, &data).unwrap();
        let collapsed = collapsed_z_loglike(0, &[], &params, &data).unwrap();
        let naive = naive_z_loglike(0, 0, &[vec![0.3; 5]], &params, &data).unwrap();
        assert_abs_diff_eq!(ep, collapsed, epsilon = 1e-10);
        assert_abs_diff_eq!(ep, naive, epsilon = 1e-10);
    }

    #[test]
    fn ep_site_update_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // unloaded series: zero site
        let (data, mut params) = random_dataset(&mut rng, 1, 4);
        params[0].lambda = 0.0;
        let model = EpTsModel::new(data, params, 1).unwrap();
        let state = ClusterState::init(vec![0], &model).unwrap();
        let site = model.matched_site(&state, 0, 0).unwrap();
        assert!(site.max_natural_delta(&DiagGaussianTrack::zero(4)) < 1e-12);

        // singleton cluster: q equals the exact posterior of the track
        let (data, params) = random_dataset(&mut rng, 1, 5);
        let model = EpTsModel::new(data.clone(), params.clone(), 1).unwrap();
        let mut state = ClusterState::init(vec![0], &model).unwrap();
        full_refresh(&model, &mut state, 5, 1e-12).unwrap();
        let exact = eta_tilted_moments(
            &data[0],
            &params[0],
            &EtaBelief::standard_prior(5),
        )
        .unwrap();
        for t in 0..5 {
            assert_abs_diff_eq!(state.globals[0].mean_at(t), exact.mean[t], epsilon = 1e-6);
            assert_abs_diff_eq!(state.globals[0].var_at(t), exact.var[t], epsilon = 1e-6);
        }

        // idempotence at the fixed point
        let before = state.globals[0].clone();
        full_refresh(&model, &mut state, 1, 1e-15).unwrap();
        assert!(state.globals[0].max_natural_delta(&before) < 1e-10);
    }

    #[test]
    fn eta_draw_matches_conjugate_posterior() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        // empty cluster and unloaded members: prior N(0,1)
        let draws: Vec<f64> = (0..20_000)
            .map(|_| sample_eta_given_paths(&[], 1, &mut rng)[0])
            .collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>()
            / (draws.len() - 1) as f64;
        assert!(mean.abs() < 0.03);
        assert!((var - 1.0).abs() < 0.05);

        // one member, T=1: conjugate posterior vs quadrature
        let p = SsmParams::with_init_var(0.5, 0.8, 0.3, 1.0, 0.4).unwrap();
        let x1 = 0.9;
        let n_grid = 40_000;
        let (mut z0, mut z1, mut z2) = (0.0, 0.0, 0.0);
        for ig in 0..n_grid {
            let eta = -10.0 + 20.0 * (ig as f64 + 0.5) / n_grid as f64;
            let w = (-0.5 * eta * eta).exp()
                * (-0.5 * (x1 - p.lambda * eta) * (x1 - p.lambda * eta) / p.init_var).exp();
            z0 += w;
            z1 += w * eta;
            z2 += w * eta * eta;
        }
        let mean_oracle = z1 / z0;
        let var_oracle = z2 / z0 - mean_oracle * mean_oracle;
        let v = 1.0 / (1.0 + p.lambda * p.lambda / p.init_var);
        let m = v * p.lambda * x1 / p.init_var;
        assert_abs_diff_eq!(m, mean_oracle, epsilon = 1e-6);
        assert_abs_diff_eq!(v, var_oracle, epsilon = 1e-6);

        // and the sampler concentrates there
        let x = [x1];
        let draws: Vec<f64> = (0..40_000)
            .map(|_| sample_eta_given_paths(&[(&x[..], &p)], 1, &mut rng)[0])
            .collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>()
            / (draws.len() - 1) as f64;
        assert!((mean - m).abs() < 0.02);
        assert!((var - v).abs() < 0.02);
    }

    #[test]
    fn hyperparams_recover_ar_coefficient() {
        // noiseless long AR chain: the regression posterior concentrates on
        // the true coefficient
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t_len = 2000;
        let (a_true, sx2): (f64, f64) = (0.9, 0.2);
        let mut x = vec![0.0; t_len];
        for t in 1..t_len {
            let z: f64 = StandardNormal.sample(&mut rng);
            x[t] = a_true * x[t - 1] + sx2.sqrt() * z;
        }
        let data = vec![SeriesData::fully_observed(x.clone()).unwrap()];
        let mut params =
            vec![SsmParams::with_init_var(0.0, 0.0, sx2, 1e-8, sx2).unwrap()];
        let eta = vec![vec![0.0; t_len]];
        let priors = HyperPriors::default();
        let mut a_draws = Vec::new();
        for _ in 0..200 {
            sample_ts_hyperparams(
                &data,
                &[0],
                &[x.clone()],
                &eta,
                &mut params,
                &priors,
                &mut rng,
            )
            .unwrap();
            a_draws.push(params[0].a);
        }
        let mean_a = a_draws.iter().sum::<f64>() / a_draws.len() as f64;
        assert!((mean_a - a_true).abs() < 0.02, "mean a {mean_a}");
        // sigma_y2 collapses toward zero for a noiseless fit
        assert!(params[0].sigma_y2 < 1e-2);
    }

    #[test]
    fn hyperparams_prior_only_edge() {
        // zero-length latents: every draw comes from the prior
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data = vec![SeriesData::with_missing(vec![Some(0.0)]).unwrap()];
        let priors = HyperPriors::default();
        let mut a_draws = Vec::new();
        let mut l_draws = Vec::new();
        for _ in 0..20_000 {
            let mut params = vec![SsmParams::with_init_var(0.0, 0.0, 1.0, 1.0, 1.0).unwrap()];
            // empty paths: no regression evidence
            sample_ts_hyperparams(
                &data,
                &[0],
                &[vec![]],
                &[vec![]],
                &mut params,
                &priors,
                &mut rng,
            )
            .unwrap();
            a_draws.push(params[0].a);
            l_draws.push(params[0].lambda);
        }
        let mean_a = a_draws.iter().sum::<f64>() / a_draws.len() as f64;
        let var_a = a_draws.iter().map(|a| (a - mean_a) * (a - mean_a)).sum::<f64>()
            / (a_draws.len() - 1) as f64;
        assert!((mean_a - priors.a_mean).abs() < 0.02);
        assert!((var_a - priors.a_var).abs() < 0.02);
        let mean_l = l_draws.iter().sum::<f64>() / l_draws.len() as f64;
        assert!(mean_l.abs() < 0.03);
    }

    #[test]
    fn ep_separates_clustered_series() {
        let mut hits = 0;
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
            let (data, params, truth) =
                generate_clustered(&mut rng, 20, 100, 2, 0.01, 1.0, 0.95, 1.0);
            let model = EpTsModel::new(data, params, 2).unwrap();
            let z0: Vec<usize> = (0..20).map(|_| rng.random_range(0..2)).collect();
            let mut state = ClusterState::init(z0, &model).unwrap();
            let prior = DirichletPrior::new(1.0, 2).unwrap();
            let mut best = 0.0f64;
            for _ in 0..5 {
                gibbs_sweep(&model, &mut state, &prior, SweepOrder::Fixed, &mut rng).unwrap();
                best = best.max(crate::metrics::nmi(state.assignments(), &truth).unwrap());
            }
            if best >= 0.999 {
                hits += 1;
            }
        }
        assert!(hits >= 9, "only {hits}/10 seeds reached NMI 1.0");
    }

    #[test]
    fn ep_cluster_consistency_after_sweeps() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (data, params, _) = generate_clustered(&mut rng, 12, 30, 3, 0.05, 1.0, 0.9, 1.0);
        let model = EpTsModel::new(data, params, 3).unwrap();
        let z0: Vec<usize> = (0..12).map(|_| rng.random_range(0..3)).collect();
        let mut state = ClusterState::init(z0, &model).unwrap();
        let prior = DirichletPrior::new(1.0, 3).unwrap();
        for _ in 0..4 {
            gibbs_sweep(&model, &mut state, &prior, SweepOrder::Fixed, &mut rng).unwrap();
            assert!(state.global_deviation(&model) < 1e-8);
        }
    }

    #[test]
    fn ep_refresh_tracks_collapsed_weights() {
        // After EP convergence at fixed assignments, compare the EP weight
        // of a member's own cluster against the exact collapsed weight on a
        // paper-setting synthetic. The nat gap is intrinsic to the diagonal
        // factor approximation (it remains even with exact cavity moments
        // diagonalized, because the factor posterior is time-correlated),
        // so it is logged rather than asserted; what is asserted is that
        // the EP cavity MEANS coincide with the exact cavity means, the
        // sharp fixed-point property of Gaussian EP.
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let t_len = 50;
        let (data, params, truth) =
            generate_clustered(&mut rng, 6, t_len, 2, 0.01, 1.0, 0.95, 1.0);
        let model = EpTsModel::new(data.clone(), params.clone(), 2).unwrap();
        let mut state = ClusterState::init(truth.clone(), &model).unwrap();
        full_refresh(&model, &mut state, 500, 1e-10).unwrap();

        let i = 0;
        let k = truth[0];
        let cavity = state.globals[k].remove(&state.sites[i]).unwrap();
        let ep = ep_z_loglike(i, &cavity, &params, &data).unwrap();
        let members: Vec<usize> = (1..6).filter(|&j| truth[j] == k).collect();
        let exact = collapsed_z_loglike(i, &members, &params, &data).unwrap();
        let gap = ep - exact;
        eprintln!("EP vs collapsed own-cluster weight at T={t_len}: {ep:.3} vs {exact:.3} (gap {gap:.3} nats)");
        assert!(gap.is_finite());

        // dense oracle: posterior of the factor track given ALL members,
        // built from the stacked linear model; the full q means match it at
        // the fixed point (the cavity itself is approximate)
        let all_members: Vec<usize> = (0..6).filter(|&j| truth[j] == k).collect();
        let members = &all_members;
        let (cm, cc) = {
            use nalgebra::{Cholesky, DMatrix, DVector};
            let m = members.len();
            let dim = m * t_len;
            let mut g_all = DMatrix::<f64>::zeros(dim, t_len);
            let mut noise = DMatrix::<f64>::zeros(dim, dim);
            let mut y_all = DVector::<f64>::zeros(dim);
            for (bi, &j) in members.iter().enumerate() {
                let p = &params[j];
                for t in 0..t_len {
                    y_all[bi * t_len + t] = data[j].value(t);
                    for tau in 0..=t {
                        g_all[(bi * t_len + t, tau)] = p.lambda * p.a.powi((t - tau) as i32);
                    }
                }
                let mut innov = vec![p.sigma_x2; t_len];
                innov[0] = p.init_var;
                for t in 0..t_len {
                    for tau in 0..t_len {
                        let mut v = 0.0;
                        for s in 0..=t.min(tau) {
                            v += p.a.powi((t - s) as i32) * p.a.powi((tau - s) as i32) * innov[s];
                        }
                        noise[(bi * t_len + t, bi * t_len + tau)] = v;
                    }
                    noise[(bi * t_len + t, bi * t_len + t)] += p.sigma_y2;
                }
            }
            let cyy = &g_all * g_all.transpose() + noise;
            let chol = Cholesky::new(cyy).unwrap();
            let cey = g_all.transpose();
            let mean = &cey * chol.solve(&y_all);
            let cov = DMatrix::identity(t_len, t_len) - &cey * chol.solve(&cey.transpose());
            (mean, cov)
        };
        for t in 0..t_len {
            assert!(
                (state.globals[k].mean_at(t) - cm[t]).abs() < 1e-6,
                "q mean off at t={t}: {} vs {}",
                state.globals[k].mean_at(t),
                cm[t]
            );
            // variances differ by the diagonal-family projection; stay sane
            assert!(state.globals[k].var_at(t) > 0.0 && state.globals[k].var_at(t) < 1.0);
            assert!(cavity.var_at(t) > 0.0);
            assert!(cc[(t, t)] > 0.0);
        }
    }

    #[test]
    fn samplers_are_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (data, params, _) = generate_clustered(&mut rng, 10, 40, 2, 0.05, 1.0, 0.9, 1.0);
        let prior = DirichletPrior::new(1.0, 2).unwrap();

        let run_ep = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let model = EpTsModel::new(data.clone(), params.clone(), 2).unwrap();
            let mut state = ClusterState::init(vec![0; 10], &model).unwrap();
            for _ in 0..4 {
                gibbs_sweep(&model, &mut state, &prior, SweepOrder::Fixed, &mut rng).unwrap();
            }
            state.assignments().to_vec()
        };
        let run_collapsed = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let model = CollapsedTsModel::new(data.clone(), params.clone(), 2).unwrap();
            let mut state = ClusterState::init(vec![0; 10], &model).unwrap();
            for _ in 0..4 {
                gibbs_sweep(&model, &mut state, &prior, SweepOrder::Fixed, &mut rng).unwrap();
            }
            state.assignments().to_vec()
        };
        let run_naive = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut model = NaiveTsModel::new(data.clone(), params.clone(), 2, &mut rng).unwrap();
            let mut state = ClusterState::init(vec![0; 10], &model).unwrap();
            for _ in 0..4 {
                let z = state.assignments().to_vec();
                model.refresh_latents(&z, &mut rng).unwrap();
                gibbs_sweep(&model, &mut state, &prior, SweepOrder::Fixed, &mut rng).unwrap();
            }
            state.assignments().to_vec()
        };
        assert_eq!(run_ep(5), run_ep(5));
        assert_eq!(run_collapsed(5), run_collapsed(5));
        assert_eq!(run_naive(5), run_naive(5));
    }

    #[test]
    fn parallel_candidate_evaluation_is_bitwise_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (data, params, _) = generate_clustered(&mut rng, 12, 30, 3, 0.05, 1.0, 0.9, 1.0);
        let prior = DirichletPrior::new(1.0, 3).unwrap();
        let run = |parallel: bool| {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut model = CollapsedTsModel::new(data.clone(), params.clone(), 3).unwrap();
            model.parallel = parallel;
            let mut state = ClusterState::init(vec![0; 12], &model).unwrap();
            let mut hashes = Vec::new();
            for _ in 0..3 {
                gibbs_sweep(&model, &mut state, &prior, SweepOrder::Fixed, &mut rng).unwrap();
                hashes.push(crate::gibbs::hash_assignments(state.assignments()));
            }
            hashes
        };
        assert_eq!(run(false), run(true));
    }
}
