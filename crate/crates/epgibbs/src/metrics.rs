//! Evaluation and diagnostics: normalized mutual information, KL between
//! diagonal Gaussians (the stale-site diagnostic), parameter-MSE traces and
//! runtime aggregation.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::expfam::DiagGaussianTrack;
use crate::gibbs::ChainTrace;

/// Normalizer choices for NMI. The arithmetic mean of the two entropies is
/// the default; the others exist for robustness checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NmiNormalizer {
    #[default]
    Arithmetic,
    Geometric,
    Min,
    Max,
}

fn entropy_and_counts(labels: &[usize]) -> (f64, HashMap<usize, usize>) {
    let mut counts = HashMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    let n = labels.len() as f64;
    let h = counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum();
    (h, counts)
}

/// Normalized mutual information with the arithmetic-mean normalizer.
/// 1 for labelings equal up to a permutation, 0 for independent ones. When
/// either labeling is constant the mutual information is 0; two constant
/// labelings describe the same one-block partition and score 1.
pub fn nmi(a: &[usize], b: &[usize]) -> Result<f64> {
    nmi_with(a, b, NmiNormalizer::Arithmetic)
}

pub fn nmi_with(a: &[usize], b: &[usize], normalizer: NmiNormalizer) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(format!(
            "label vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::InvalidParam("label vectors must be nonempty".into()));
    }
    let n = a.len() as f64;
    let (ha, ca) = entropy_and_counts(a);
    let (hb, cb) = entropy_and_counts(b);
    if ha == 0.0 && hb == 0.0 {
        return Ok(1.0);
    }
    if ha == 0.0 || hb == 0.0 {
        return Ok(0.0);
    }
    let mut joint = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_insert(0usize) += 1;
    }
    let mut mi = 0.0;
    for (&(x, y), &c) in &joint {
        let pxy = c as f64 / n;
        let px = ca[&x] as f64 / n;
        let py = cb[&y] as f64 / n;
        mi += pxy * (pxy / (px * py)).ln();
    }
    let norm = match normalizer {
        NmiNormalizer::Arithmetic => 0.5 * (ha + hb),
        NmiNormalizer::Geometric => (ha * hb).sqrt(),
        NmiNormalizer::Min => ha.min(hb),
        NmiNormalizer::Max => ha.max(hb),
    };
    Ok((mi / norm).clamp(0.0, 1.0))
}

/// Summed per-index KL divergence `sum_t KL(N(mu_p, s2_p) || N(mu_q, s2_q))`
/// between two normalizable diagonal Gaussian tracks.
pub fn kl_diag_gaussians(p: &DiagGaussianTrack, q: &DiagGaussianTrack) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::LengthMismatch(format!(
            "tracks of length {} and {}",
            p.len(),
            q.len()
        )));
    }
    if !p.is_normalizable() || !q.is_normalizable() {
        return Err(Error::InvalidParam("both tracks must be normalizable".into()));
    }
    let mut total = 0.0;
    for t in 0..p.len() {
        let (mp, vp) = (p.mean_at(t), p.var_at(t));
        let (mq, vq) = (q.mean_at(t), q.var_at(t));
        total += 0.5 * (vp / vq + (mq - mp) * (mq - mp) / vq - 1.0 + (vq / vp).ln());
    }
    Ok(total.max(0.0))
}

/// Per-iteration mean squared errors of the time-series parameter groups.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct MseRow {
    pub a: f64,
    pub lambda: f64,
    pub sigma_y2: f64,
    pub x: f64,
}

/// One sampled parameter snapshot of the time-series model. The assignments
/// group series for the loading-sign convention: within a sampled cluster
/// `(lambda, eta)` and `(-lambda, -eta)` are indistinguishable, so the
/// lambda error is minimized over a per-cluster sign flip.
#[derive(Debug, Clone)]
pub struct TsParamSnapshot {
    pub a: Vec<f64>,
    pub lambda: Vec<f64>,
    pub sigma_y2: Vec<f64>,
    pub x: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
}

pub fn mse_row(sample: &TsParamSnapshot, truth: &TsParamSnapshot) -> Result<MseRow> {
    let n = truth.a.len();
    if sample.a.len() != n
        || sample.lambda.len() != n
        || sample.sigma_y2.len() != n
        || sample.x.len() != n
        || sample.assignments.len() != n
    {
        return Err(Error::ShapeMismatch("snapshot does not match truth".into()));
    }
    let mean_sq = |s: &[f64], t: &[f64]| -> f64 {
        s.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / s.len() as f64
    };

    // lambda: per sampled cluster, min over a joint sign flip
    let mut by_cluster: HashMap<usize, Vec<usize>> = HashMap::new();
    for (i, &k) in sample.assignments.iter().enumerate() {
        by_cluster.entry(k).or_default().push(i);
    }
    let mut lambda_sq = 0.0;
    for members in by_cluster.values() {
        let plus: f64 = members
            .iter()
            .map(|&i| (sample.lambda[i] - truth.lambda[i]).powi(2))
            .sum();
        let minus: f64 = members
            .iter()
            .map(|&i| (-sample.lambda[i] - truth.lambda[i]).powi(2))
            .sum();
        lambda_sq += plus.min(minus);
    }

    let mut x_sq = 0.0;
    let mut x_count = 0usize;
    for (xs, xt) in sample.x.iter().zip(&truth.x) {
        if xs.len() != xt.len() {
            return Err(Error::ShapeMismatch("latent path lengths differ".into()));
        }
        for (a, b) in xs.iter().zip(xt) {
            x_sq += (a - b) * (a - b);
            x_count += 1;
        }
    }

    Ok(MseRow {
        a: mean_sq(&sample.a, &truth.a),
        lambda: lambda_sq / n as f64,
        sigma_y2: mean_sq(&sample.sigma_y2, &truth.sigma_y2),
        x: if x_count == 0 { 0.0 } else { x_sq / x_count as f64 },
    })
}

/// One row per sampled snapshot.
pub fn mse_trace(samples: &[TsParamSnapshot], truth: &TsParamSnapshot) -> Result<Vec<MseRow>> {
    samples.iter().map(|s| mse_row(s, truth)).collect()
}

/// Mean/stddev of per-iteration wall time per group, where each trace
/// contributes its own mean and the spread is across traces.
#[derive(Debug, Clone, serde::Serialize)]
pub struct RuntimeRow {
    pub key: String,
    /// Grouping scale (e.g. the number of series N).
    pub scale: f64,
    pub mean_iter_seconds: f64,
    pub std_iter_seconds: f64,
    pub traces: usize,
}

pub fn runtime_summary(traces: &[(&str, f64, &ChainTrace)]) -> Vec<RuntimeRow> {
    let mut grouped: Vec<((String, u64), Vec<f64>)> = Vec::new();
    for (key, scale, trace) in traces {
        let mean = trace.mean_iter_seconds();
        let id = (key.to_string(), scale.to_bits());
        match grouped.iter_mut().find(|(g, _)| *g == id) {
            Some((_, v)) => v.push(mean),
            None => grouped.push((id, vec![mean])),
        }
    }
    grouped
        .into_iter()
        .map(|((key, scale_bits), means)| {
            let n = means.len() as f64;
            let mean = means.iter().sum::<f64>() / n;
            let var = if means.len() < 2 {
                0.0
            } else {
                means.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / (n - 1.0)
            };
            RuntimeRow {
                key,
                scale: f64::from_bits(scale_bits),
                mean_iter_seconds: mean,
                std_iter_seconds: var.sqrt(),
                traces: means.len(),
            }
        })
        .collect()
}

/// Least-squares slope of `ln y` against `ln x`, for runtime-scaling plots.
pub fn fit_loglog_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for &(x, y) in points {
        let (lx, ly) = (x.ln(), y.ln());
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}

/// Two-sample Kolmogorov-Smirnov statistic.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(|x, y| x.partial_cmp(y).unwrap());
    b.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let (n, m) = (a.len(), b.len());
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < n && j < m {
        let xa = a[i];
        let xb = b[j];
        if xa <= xb {
            i += 1;
        }
        if xb <= xa {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    d
}

/// Rejection threshold for the two-sample KS test at significance `alpha`.
pub fn ks_critical(alpha: f64, n: usize, m: usize) -> f64 {
    let c = (-0.5 * (alpha / 2.0).ln()).sqrt();
    c * ((n + m) as f64 / (n as f64 * m as f64)).sqrt()
}
