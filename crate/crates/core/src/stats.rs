//! Distinguishing statistics for random subsets of the lattice, plus the
//! small numerical toolkit (moments, batch means, rank and chi-square tests)
//! shared by the estimators.

use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, ChiSquared, ContinuousCDF, DiscreteCDF, Normal};

use crate::error::{Error, Result};
use crate::lattice::{LatticeConfig, PointSet};

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample mean and its standard error.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let m = mean(xs);
    if n == 1 {
        return (m, f64::INFINITY);
    }
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    (m, (var / n as f64).sqrt())
}

/// Batch-means estimate of a time-average and its standard error.
pub fn batch_means(xs: &[f64], batches: usize) -> (f64, f64) {
    let batches = batches.max(2).min(xs.len().max(1));
    let size = xs.len() / batches;
    if size == 0 {
        return mean_se(xs);
    }
    let means: Vec<f64> = xs
        .chunks_exact(size)
        .take(batches)
        .map(mean)
        .collect();
    let (_, se) = mean_se(&means);
    (mean(&xs[..size * batches]), se)
}

pub fn normal_cdf(x: f64) -> f64 {
    Normal::new(0.0, 1.0).unwrap().cdf(x)
}

/// Upper tail `P(N > x)` of a standard normal, accurate far into the tail.
pub fn normal_sf(x: f64) -> f64 {
    Normal::new(0.0, 1.0).unwrap().sf(x)
}

pub fn normal_quantile(p: f64) -> f64 {
    Normal::new(0.0, 1.0).unwrap().inverse_cdf(p)
}

/// Pearson goodness-of-fit p-value with `k - 1` degrees of freedom.
/// Exact two-sided binomial p-value (doubled smaller tail, capped at 1).
pub fn binomial_two_sided_p(k: u64, n: u64, p: f64) -> f64 {
    let b = match Binomial::new(p.clamp(0.0, 1.0), n) {
        Ok(b) => b,
        Err(_) => return f64::NAN,
    };
    let lower = b.cdf(k);
    let upper = if k == 0 { 1.0 } else { b.sf(k - 1) };
    (2.0 * lower.min(upper)).min(1.0)
}

pub fn chi_square_pvalue(observed: &[u64], expected: &[f64]) -> f64 {
    let stat: f64 = observed
        .iter()
        .zip(expected)
        .filter(|(_, &e)| e > 0.0)
        .map(|(&o, &e)| (o as f64 - e).powi(2) / e)
        .sum();
    let df = (observed.len().max(2) - 1) as f64;
    ChiSquared::new(df).unwrap().sf(stat)
}

/// Chi-square test that `K` binomial groups share one success probability.
/// Groups without trials are dropped.
pub fn homogeneity_pvalue(successes: &[u64], trials: &[u64]) -> f64 {
    let groups: Vec<(f64, f64)> = successes
        .iter()
        .zip(trials)
        .filter(|(_, &t)| t > 0)
        .map(|(&s, &t)| (s as f64, t as f64))
        .collect();
    if groups.len() < 2 {
        return 1.0;
    }
    let total_s: f64 = groups.iter().map(|g| g.0).sum();
    let total_t: f64 = groups.iter().map(|g| g.1).sum();
    let p = total_s / total_t;
    if p <= 0.0 || p >= 1.0 {
        return 1.0;
    }
    let stat: f64 = groups
        .iter()
        .map(|&(s, t)| {
            let e1 = t * p;
            let e0 = t * (1.0 - p);
            (s - e1).powi(2) / e1 + ((t - s) - e0).powi(2) / e0
        })
        .sum();
    ChiSquared::new((groups.len() - 1) as f64).unwrap().sf(stat)
}

/// Mann–Whitney rank-sum test with tie correction (normal approximation).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RankTest {
    pub u: f64,
    pub z: f64,
    pub p_value: f64,
    /// `P(a > b) + P(a = b)/2`; 0.5 means no separation.
    pub auc: f64,
}

pub fn mann_whitney(a: &[f64], b: &[f64]) -> RankTest {
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let mut all: Vec<(f64, bool)> = a
        .iter()
        .map(|&x| (x, true))
        .chain(b.iter().map(|&x| (x, false)))
        .collect();
    all.sort_by(|x, y| x.0.total_cmp(&y.0));
    let n = all.len();
    let mut rank_sum_a = 0.0;
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        for item in &all[i..=j] {
            if item.1 {
                rank_sum_a += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_a - na * (na + 1.0) / 2.0;
    let mu = na * nb / 2.0;
    let nn = na + nb;
    let var = na * nb / 12.0 * ((nn + 1.0) - tie_term / (nn * (nn - 1.0)));
    let (z, p) = if var > 0.0 {
        let z = (u - mu) / var.sqrt();
        (z, (2.0 * normal_sf(z.abs())).min(1.0))
    } else {
        (0.0, 1.0)
    };
    RankTest {
        u,
        z,
        p_value: p,
        auc: u / (na * nb),
    }
}

/// Two-sample Kolmogorov distance between empirical distributions.
pub fn ks_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut xs: Vec<f64> = a.iter().chain(b).copied().collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    let cdf = |s: &[f64], x: f64| s.iter().filter(|&&v| v <= x).count() as f64 / s.len() as f64;
    xs.iter()
        .map(|&x| (cdf(a, x) - cdf(b, x)).abs())
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Uncovered,
    Surrogate,
    GffHigh,
    Bernoulli,
}

/// One realised random subset of the lattice.
#[derive(Debug, Clone)]
pub struct SetSample {
    pub points: PointSet,
    pub provenance: Provenance,
    pub replica: u64,
    pub seed: u64,
}

/// Unordered nearest-neighbour pairs inside the set.
pub fn adjacent_pairs(s: &PointSet, cfg: &LatticeConfig) -> u64 {
    let d = cfg.d();
    let side = cfg.side() as i64;
    let torus = cfg.is_torus();
    let mut count = 0u64;
    for x in s.iter() {
        let p = cfg.point(x);
        for axis in 0..d {
            let c = p.coords()[axis] + 1;
            let c = if c == side {
                if torus {
                    0
                } else {
                    continue;
                }
            } else {
                c
            };
            let mut q = p.coords().to_vec();
            q[axis] = c;
            if s.contains(cfg.index(&crate::lattice::Point::new(q))) {
                count += 1;
            }
        }
    }
    count
}

/// Built-in statistic panel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Statistic {
    AdjacentPairs,
    Size,
}

impl Statistic {
    pub fn eval(&self, s: &PointSet, cfg: &LatticeConfig) -> f64 {
        match self {
            Self::AdjacentPairs => adjacent_pairs(s, cfg) as f64,
            Self::Size => s.len() as f64,
        }
    }
}

pub const TV_PROXY_NOTE: &str = "TV between the set laws is not computed; the reported value is a \
lower bound on it obtained from the distinguishing power of one statistic";

/// Two-sample comparison of a statistic across two set streams.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DiscriminationReport {
    pub statistic: Statistic,
    pub n_a: usize,
    pub n_b: usize,
    pub mean_a: f64,
    pub mean_b: f64,
    pub rank_test: RankTest,
    /// Empirical Kolmogorov distance between the statistic's laws.
    pub ks_distance: f64,
    /// `max(0, ks − margin)` with a two-sample DKW margin at 95% confidence.
    pub tv_lower_bound: f64,
    pub note: String,
}

pub fn discriminate_values(statistic: Statistic, a: &[f64], b: &[f64]) -> Result<DiscriminationReport> {
    if a.len() < 30 || b.len() < 30 {
        return Err(Error::Input(format!(
            "need at least 30 replicas per stream, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let ks = ks_distance(a, b);
    let margin = ((2.0f64 / 0.05).ln() / 2.0 * (1.0 / a.len() as f64 + 1.0 / b.len() as f64)).sqrt();
    Ok(DiscriminationReport {
        statistic,
        n_a: a.len(),
        n_b: b.len(),
        mean_a: mean(a),
        mean_b: mean(b),
        rank_test: mann_whitney(a, b),
        ks_distance: ks,
        tv_lower_bound: (ks - margin).max(0.0),
        note: TV_PROXY_NOTE.to_string(),
    })
}

pub fn discriminate(
    a: &[SetSample],
    b: &[SetSample],
    statistic: Statistic,
    cfg: &LatticeConfig,
) -> Result<DiscriminationReport> {
    let va: Vec<f64> = a.iter().map(|s| statistic.eval(&s.points, cfg)).collect();
    let vb: Vec<f64> = b.iter().map(|s| statistic.eval(&s.points, cfg)).collect();
    discriminate_values(statistic, &va, &vb)
}

/// Empirical exceedance curve of a nonnegative deviation statistic and a
/// least-squares fit of `log P(dev ≥ η) ≈ log C − c·η²·scale`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TailShapeReport {
    pub scale: f64,
    pub rows: Vec<TailRow>,
    pub fitted_log_c: f64,
    pub fitted_rate: f64,
    pub note: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TailRow {
    pub eta: f64,
    pub eta2_scale: f64,
    pub exceedance: f64,
}

pub fn tail_shape_report(samples: &[f64], etas: &[f64], scale: f64) -> Result<TailShapeReport> {
    if samples.len() < 100 {
        return Err(Error::Input(format!(
            "tail report needs >= 100 samples, got {}",
            samples.len()
        )));
    }
    let rows: Vec<TailRow> = etas
        .iter()
        .map(|&eta| TailRow {
            eta,
            eta2_scale: eta * eta * scale,
            exceedance: samples.iter().filter(|&&s| s >= eta).count() as f64 / samples.len() as f64,
        })
        .collect();
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.exceedance > 0.0 && r.exceedance < 1.0)
        .map(|r| (r.eta2_scale, r.exceedance.ln()))
        .collect();
    let (log_c, rate) = if pts.len() >= 2 {
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / pts.len() as f64;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / pts.len() as f64;
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
        (my - slope * mx, -slope)
    } else {
        (f64::NAN, f64::NAN)
    };
    Ok(TailShapeReport {
        scale,
        rows,
        fitted_log_c: log_c,
        fitted_rate: rate,
        note: "diagnostic only: envelope C·exp(−c·η²·A) with C, c unknown".into(),
    })
}
