//! Model-agnostic sweep engine: schedule, Dirichlet-marginalized prior
//! weights, categorical draws from log-weights, sparse site updates and
//! periodic full-EP refresh.
//!
//! A case study plugs in through [`SweepModel`]: the engine owns the
//! assignment/count bookkeeping and the visit order; the model evaluates
//! candidate log-likelihoods and computes moment-matched sites. One visit
//! follows the sparse-update scheme: remove the item's site (cavity),
//! score all candidate clusters, draw the assignment, refresh only that
//! item's site against the chosen cluster's cavity, include it.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::metrics::MseRow;

/// Symmetric Dirichlet over mixture weights with fixed K; marginalized in
/// the assignment conditional.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DirichletPrior {
    pub alpha: f64,
    pub k: usize,
}

impl DirichletPrior {
    pub fn new(alpha: f64, k: usize) -> Result<Self> {
        if !(alpha > 0.0) || k == 0 {
            return Err(Error::InvalidParam(format!(
                "need alpha > 0 and k >= 1, got alpha={alpha}, k={k}"
            )));
        }
        Ok(Self { alpha, k })
    }
}

/// Marginalized assignment prior: `w_k = (n_k + alpha/K) / (N - 1 + alpha)`
/// where `n_k` are the counts with the visited item removed.
pub fn prior_weights(counts_minus_i: &[usize], prior: &DirichletPrior) -> Vec<f64> {
    let pseudo = prior.alpha / prior.k as f64;
    let total: f64 = counts_minus_i.iter().sum::<usize>() as f64 + prior.alpha;
    counts_minus_i
        .iter()
        .map(|&c| (c as f64 + pseudo) / total)
        .collect()
}

/// Draws a cluster id with probability proportional to
/// `exp(log_prior + log_like)`, max-subtracted for stability. Entries of
/// `-inf` forbid a cluster.
pub fn sample_assignment<R: Rng + ?Sized>(
    log_prior: &[f64],
    log_like: &[f64],
    rng: &mut R,
) -> Result<usize> {
    debug_assert_eq!(log_prior.len(), log_like.len());
    let weights: Vec<f64> = log_prior
        .iter()
        .zip(log_like)
        .map(|(p, l)| p + l)
        .collect();
    let max = weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || max.is_nan() {
        return Err(Error::AllForbidden);
    }
    let probs: Vec<f64> = weights.iter().map(|w| (w - max).exp()).collect();
    let total: f64 = probs.iter().sum();
    let draw: f64 = rng.random::<f64>() * total;
    let mut cum = 0.0;
    for (k, p) in probs.iter().enumerate() {
        cum += p;
        if draw < cum {
            return Ok(k);
        }
    }
    Ok(probs.len() - 1)
}

/// Assignments, counts and the two approximation layers: one global
/// approximation per cluster and one site per item, both in the model's
/// natural-parameter type. A cluster's global equals its prior plus the sum
/// of member sites; [`ClusterState::global_deviation`] re-checks this on
/// demand.
#[derive(Debug, Clone)]
pub struct ClusterState<A> {
    assignments: Vec<usize>,
    counts: Vec<usize>,
    pub globals: Vec<A>,
    pub sites: Vec<A>,
}

impl<A: Clone + PartialEq> ClusterState<A> {
    /// Fresh state: all sites zero, every global at the prior.
    pub fn init<M>(assignments: Vec<usize>, model: &M) -> Result<Self>
    where
        M: SweepModel<Approx = A> + ?Sized,
    {
        let k = model.num_clusters();
        let mut counts = vec![0usize; k];
        for &z in &assignments {
            if z >= k {
                return Err(Error::InvalidParam(format!(
                    "assignment {z} out of range for K={k}"
                )));
            }
            counts[z] += 1;
        }
        let globals = (0..k).map(|_| model.prior_global()).collect();
        let sites = (0..assignments.len()).map(|_| model.zero_site()).collect();
        Ok(Self {
            assignments,
            counts,
            globals,
            sites,
        })
    }

    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    pub fn num_clusters(&self) -> usize {
        self.counts.len()
    }

    pub fn assignments(&self) -> &[usize] {
        &self.assignments
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn assignment(&self, i: usize) -> usize {
        self.assignments[i]
    }

    /// Member indices of cluster `k`, optionally excluding one item.
    pub fn members(&self, k: usize, exclude: Option<usize>) -> Vec<usize> {
        self.assignments
            .iter()
            .enumerate()
            .filter(|&(i, &z)| z == k && Some(i) != exclude)
            .map(|(i, _)| i)
            .collect()
    }

    /// Largest natural-parameter deviation between each stored global and
    /// its rebuild from prior plus member sites.
    pub fn global_deviation<M>(&self, model: &M) -> f64
    where
        M: SweepModel<Approx = A> + ?Sized,
    {
        (0..self.num_clusters())
            .map(|k| {
                let rebuilt = model.rebuild_global(self, k, None);
                model.approx_delta(&self.globals[k], &rebuilt)
            })
            .fold(0.0, f64::max)
    }
}

/// Case-study hooks consumed by the engine. `Approx` is the
/// natural-parameter representation shared by globals and sites; exact
/// samplers that keep no approximation use `()`.
pub trait SweepModel {
    type Approx: Clone + PartialEq;

    fn num_items(&self) -> usize;
    fn num_clusters(&self) -> usize;

    /// Zero site (identity element of natural-parameter addition).
    fn zero_site(&self) -> Self::Approx;

    /// Global approximation of an empty cluster.
    fn prior_global(&self) -> Self::Approx;

    /// Remove item `i`'s site from its cluster's global, leaving the cavity
    /// in place. Counts are engine-owned; the model touches only
    /// `state.globals` / `state.sites`.
    fn detach(&self, state: &mut ClusterState<Self::Approx>, i: usize) -> Result<()>;

    /// Candidate log-likelihood of detached item `i` for every cluster.
    fn candidate_log_likes(&self, state: &ClusterState<Self::Approx>, i: usize)
        -> Result<Vec<f64>>;

    /// Moment-matched site for item `i` against cluster `k`'s current
    /// (cavity) global.
    fn matched_site(
        &self,
        state: &ClusterState<Self::Approx>,
        i: usize,
        k: usize,
    ) -> Result<Self::Approx>;

    /// Add `site` into cluster `k`'s global.
    fn include_site(&self, state: &mut ClusterState<Self::Approx>, k: usize, site: &Self::Approx);

    /// Damped blend of the previous and freshly matched site.
    fn damp(&self, old: &Self::Approx, matched: Self::Approx) -> Self::Approx;

    /// Natural-parameter distance (refresh convergence metric).
    fn approx_delta(&self, a: &Self::Approx, b: &Self::Approx) -> f64;

    /// Prior plus member sites, optionally skipping one item; used for
    /// consistency checks and cavity-failure recovery.
    fn rebuild_global(
        &self,
        state: &ClusterState<Self::Approx>,
        k: usize,
        skip: Option<usize>,
    ) -> Self::Approx;

    /// Whether a global approximation is normalizable. Exact samplers keep
    /// no approximation and always return true.
    fn global_is_valid(&self, _global: &Self::Approx) -> bool {
        true
    }
}

/// Visit order within a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepOrder {
    /// Items 0..N-1 in index order.
    #[default]
    Fixed,
    /// A fresh uniform permutation each sweep (consumes rng draws).
    Shuffled,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub reassigned: usize,
    pub item_seconds: Vec<f64>,
}

fn recover_cavity_failure<M: SweepModel + ?Sized>(
    model: &M,
    state: &mut ClusterState<M::Approx>,
    i: usize,
    k: usize,
    err: &Error,
) {
    log::warn!("site {i} in cluster {k} produced an invalid cavity ({err}); resetting site");
    state.sites[i] = model.zero_site();
    let rebuilt = model.rebuild_global(state, k, Some(i));
    if model.global_is_valid(&rebuilt) {
        state.globals[k] = rebuilt;
        return;
    }
    // the remaining sites are jointly corrupted; drop them all and let the
    // members re-learn their sites on subsequent visits
    log::warn!("cluster {k} rebuild is not normalizable; zeroing all member sites");
    for j in state.members(k, None) {
        state.sites[j] = model.zero_site();
    }
    state.globals[k] = model.prior_global();
}

/// One full Gibbs sweep under the sparse-update scheme.
pub fn gibbs_sweep<M, R>(
    model: &M,
    state: &mut ClusterState<M::Approx>,
    prior: &DirichletPrior,
    order: SweepOrder,
    rng: &mut R,
) -> Result<SweepOutcome>
where
    M: SweepModel + ?Sized,
    R: Rng + ?Sized,
{
    let n = state.len();
    let mut schedule: Vec<usize> = (0..n).collect();
    if order == SweepOrder::Shuffled {
        schedule.shuffle(rng);
    }
    let mut outcome = SweepOutcome {
        reassigned: 0,
        item_seconds: Vec::with_capacity(n),
    };
    for &i in &schedule {
        let started = Instant::now();
        let k_old = state.assignments[i];
        let old_site = state.sites[i].clone();
        let global_before = state.globals[k_old].clone();

        state.counts[k_old] -= 1;
        if let Err(err) = model.detach(state, i) {
            if err.is_cavity_failure() {
                recover_cavity_failure(model, state, i, k_old, &err);
            } else {
                return Err(err);
            }
        }

        let log_like = model.candidate_log_likes(state, i)?;
        let log_prior: Vec<f64> = prior_weights(&state.counts, prior)
            .iter()
            .map(|w| w.ln())
            .collect();
        let k_new = sample_assignment(&log_prior, &log_like, rng)?;

        let matched = model.matched_site(state, i, k_new)?;
        let site = if k_new == k_old {
            model.damp(&old_site, matched)
        } else {
            model.damp(&model.zero_site(), matched)
        };
        if k_new == k_old && site == old_site {
            // nothing changed; restore the pre-removal global verbatim so
            // repeated visits cannot accumulate rounding drift
            state.globals[k_new] = global_before;
        } else {
            model.include_site(state, k_new, &site);
        }
        state.sites[i] = site;
        state.counts[k_new] += 1;
        state.assignments[i] = k_new;
        if k_new != k_old {
            outcome.reassigned += 1;
        }
        outcome.item_seconds.push(started.elapsed().as_secs_f64());
    }
    Ok(outcome)
}

#[derive(Debug, Clone, Copy)]
pub struct RefreshOutcome {
    pub passes: usize,
    pub converged: bool,
    pub max_delta: f64,
}

/// Standard EP at fixed assignments: re-runs every site update (no
/// resampling) until the largest natural-parameter change drops below
/// `tol` or `max_passes` is reached. An infinite `tol` returns immediately.
pub fn full_refresh<M>(
    model: &M,
    state: &mut ClusterState<M::Approx>,
    max_passes: usize,
    tol: f64,
) -> Result<RefreshOutcome>
where
    M: SweepModel + ?Sized,
{
    if !tol.is_finite() {
        return Ok(RefreshOutcome {
            passes: 0,
            converged: true,
            max_delta: 0.0,
        });
    }
    let mut max_delta = f64::INFINITY;
    for pass in 1..=max_passes {
        max_delta = 0.0;
        for i in 0..state.len() {
            let k = state.assignments[i];
            let old_site = state.sites[i].clone();
            let global_before = state.globals[k].clone();
            if let Err(err) = model.detach(state, i) {
                if err.is_cavity_failure() {
                    recover_cavity_failure(model, state, i, k, &err);
                } else {
                    return Err(err);
                }
            }
            let matched = model.matched_site(state, i, k)?;
            let site = model.damp(&old_site, matched);
            max_delta = max_delta.max(model.approx_delta(&site, &old_site));
            if site == old_site {
                state.globals[k] = global_before;
            } else {
                model.include_site(state, k, &site);
            }
            state.sites[i] = site;
        }
        if max_delta < tol {
            return Ok(RefreshOutcome {
                passes: pass,
                converged: true,
                max_delta,
            });
        }
    }
    Ok(RefreshOutcome {
        passes: max_passes,
        converged: max_delta < tol,
        max_delta,
    })
}

/// Per-iteration chain records.
#[derive(Debug, Clone, serde::Serialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub loglik: f64,
    pub nmi: Option<f64>,
    pub wall_seconds: f64,
    pub mse: Option<MseRow>,
    /// FNV-1a hash of the assignment vector.
    pub assignments_hash: u64,
}

#[derive(Debug, Clone, Default)]
pub struct ChainTrace {
    records: Vec<TraceRecord>,
}

impl ChainTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: TraceRecord) {
        if let Some(last) = self.records.last() {
            assert!(
                record.iteration > last.iteration,
                "iteration index must be monotone"
            );
        }
        assert!(record.wall_seconds >= 0.0, "wall time must be nonnegative");
        self.records.push(record);
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&TraceRecord> {
        self.records.last()
    }

    /// Mean per-iteration wall time, excluding the initialization row
    /// (iteration 0).
    pub fn mean_iter_seconds(&self) -> f64 {
        let rows: Vec<&TraceRecord> =
            self.records.iter().filter(|r| r.iteration > 0).collect();
        if rows.is_empty() {
            return 0.0;
        }
        rows.iter().map(|r| r.wall_seconds).sum::<f64>() / rows.len() as f64
    }
}

/// FNV-1a over the assignment vector, for compact trace snapshots.
pub fn hash_assignments(z: &[usize]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &v in z {
        for b in (v as u64).to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    h
}
