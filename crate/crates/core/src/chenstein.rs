//! Chen–Stein bound for a dependent Bernoulli process `(X_t)_{t∈I}` against
//! the independent process with the same marginals:
//! `TV ≤ 8(b1 + b2 + b3)` with
//! `b1 = Σ_t Σ_{s∈B_t} p_t p_s`, `b2 = Σ_t Σ_{s∈B_t, s≠t} p_ts`,
//! `b3 = Σ_t E|E[X_t − p_t | X_s, s ∉ B_t]|`.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, StreamRng};
use crate::stats;
use crate::uncovered::BernoulliFieldSpec;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairMoment {
    pub s: usize,
    pub t: usize,
    pub value: f64,
}

/// Index set `0..k` with neighbourhoods, marginals, pair moments and `b3`
/// terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChenSteinInput {
    pub neighborhoods: Vec<Vec<usize>>,
    pub marginals: Vec<f64>,
    pub pair_moments: Vec<PairMoment>,
    #[serde(default)]
    pub b3_terms: Vec<f64>,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
}

fn default_tolerance() -> f64 {
    1e-9
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChenSteinBounds {
    pub b1: f64,
    pub b2: f64,
    pub b3: f64,
    pub tv_bound: f64,
}

impl ChenSteinInput {
    pub fn validate(&self) -> Result<HashMap<(usize, usize), f64>> {
        let k = self.marginals.len();
        if self.neighborhoods.len() != k {
            return Err(Error::Input("one neighbourhood per index required".into()));
        }
        if !self.b3_terms.is_empty() && self.b3_terms.len() != k {
            return Err(Error::Input("b3 terms must be empty or one per index".into()));
        }
        for (t, &p) in self.marginals.iter().enumerate() {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Input(format!("p_{t} = {p} outside [0,1]")));
            }
            if !self.neighborhoods[t].contains(&t) {
                return Err(Error::Input(format!("index {t} missing from its own neighbourhood")));
            }
            if self.neighborhoods[t].iter().any(|&s| s >= k) {
                return Err(Error::Input(format!("neighbourhood of {t} leaves the index set")));
            }
        }
        let mut raw: HashMap<(usize, usize), Vec<f64>> = HashMap::new();
        for pm in &self.pair_moments {
            if pm.s >= k || pm.t >= k || pm.s == pm.t {
                return Err(Error::Input(format!("bad pair ({}, {})", pm.s, pm.t)));
            }
            let key = (pm.s.min(pm.t), pm.s.max(pm.t));
            raw.entry(key).or_default().push(pm.value);
        }
        // Averaging both orientations symmetrises noisy estimates.
        let sym: HashMap<(usize, usize), f64> = raw
            .into_iter()
            .map(|(key, v)| (key, v.iter().sum::<f64>() / v.len() as f64))
            .collect();
        for (&(s, t), &v) in &sym {
            let cap = self.marginals[s].min(self.marginals[t]) + self.tolerance;
            if !(v >= -self.tolerance && v <= cap) {
                return Err(Error::Input(format!("p_({s},{t}) = {v} exceeds min(p_s, p_t)")));
            }
        }
        Ok(sym)
    }
}

pub fn bounds(input: &ChenSteinInput) -> Result<ChenSteinBounds> {
    let pairs = input.validate()?;
    let p = &input.marginals;
    let (mut b1, mut b2) = (0.0, 0.0);
    for (t, nb) in input.neighborhoods.iter().enumerate() {
        for &s in nb {
            b1 += p[t] * p[s];
            if s != t {
                b2 += *pairs
                    .get(&(s.min(t), s.max(t)))
                    .ok_or_else(|| Error::Input(format!("missing pair moment ({t}, {s})")))?;
            }
        }
    }
    let b3: f64 = input.b3_terms.iter().sum();
    Ok(ChenSteinBounds {
        b1,
        b2,
        b3,
        tv_bound: 8.0 * (b1 + b2 + b3),
    })
}

/// Explicit joint law on `{0,1}^k`, bit `t` of the outcome index is `X_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TinyProcessSpec {
    pub k: usize,
    pub weights: Vec<f64>,
}

pub const MAX_TINY: usize = 20;

impl TinyProcessSpec {
    pub fn new(k: usize, weights: Vec<f64>) -> Result<Self> {
        if k > MAX_TINY {
            return Err(Error::Size(format!("{k} indices exceed {MAX_TINY}")));
        }
        if weights.len() != 1 << k || weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::Input("need 2^k nonnegative weights".into()));
        }
        let s: f64 = weights.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::Input(format!("weights sum to {s}")));
        }
        Ok(Self { k, weights })
    }

    pub fn marginal(&self, t: usize) -> f64 {
        self.weights
            .iter()
            .enumerate()
            .filter(|(w, _)| w >> t & 1 == 1)
            .map(|(_, &p)| p)
            .sum()
    }

    pub fn pair(&self, s: usize, t: usize) -> f64 {
        self.weights
            .iter()
            .enumerate()
            .filter(|(w, _)| w >> s & 1 == 1 && w >> t & 1 == 1)
            .map(|(_, &p)| p)
            .sum()
    }

    /// Exact `E|E[X_t − p_t | X_s, s ∉ B]|` for the neighbourhood `B`.
    pub fn b3_term(&self, t: usize, nbhd: &[usize]) -> f64 {
        let outside_mask: usize = (0..self.k)
            .filter(|s| !nbhd.contains(s))
            .fold(0, |m, s| m | 1 << s);
        let p = self.marginal(t);
        let mut groups: BTreeMap<usize, (f64, f64)> = BTreeMap::new();
        for (w, &pw) in self.weights.iter().enumerate() {
            let g = groups.entry(w & outside_mask).or_default();
            g.0 += pw;
            if w >> t & 1 == 1 {
                g.1 += pw;
            }
        }
        groups
            .values()
            .filter(|g| g.0 > 0.0)
            .map(|&(z, x)| z * (x / z - p).abs())
            .sum()
    }

    /// Chen–Stein input with exact moments and exact `b3` terms.
    pub fn exact_input(&self, neighborhoods: Vec<Vec<usize>>) -> ChenSteinInput {
        let marginals = (0..self.k).map(|t| self.marginal(t)).collect();
        let mut pair_moments = Vec::new();
        for (t, nb) in neighborhoods.iter().enumerate() {
            for &s in nb {
                if s != t {
                    pair_moments.push(PairMoment { s, t, value: self.pair(s, t) });
                }
            }
        }
        let b3_terms = (0..self.k).map(|t| self.b3_term(t, &neighborhoods[t])).collect();
        ChenSteinInput {
            neighborhoods,
            marginals,
            pair_moments,
            b3_terms,
            tolerance: default_tolerance(),
        }
    }
}

/// `½ Σ_ω |μ(ω) − ν(ω)|` against the independent field.
pub fn exact_tv(spec: &TinyProcessSpec, bernoulli: &BernoulliFieldSpec) -> Result<f64> {
    if bernoulli.universe != spec.k {
        return Err(Error::Input("Bernoulli field over a different index set".into()));
    }
    let mut tv = 0.0;
    for (w, &mu) in spec.weights.iter().enumerate() {
        let nu: f64 = (0..spec.k)
            .map(|t| {
                let p = bernoulli.prob(t);
                if w >> t & 1 == 1 {
                    p
                } else {
                    1.0 - p
                }
            })
            .product();
        tv += (mu - nu).abs();
    }
    Ok(0.5 * tv)
}

/// A process that can be sampled and resampled inside a neighbourhood with
/// the outside held fixed.
pub trait ConditionalSampler {
    fn len(&self) -> usize;
    fn sample(&self, rng: &mut StreamRng) -> Vec<bool>;
    /// A draw from the law of `X` given `X_s = x_s` for all `s ∉ inside`,
    /// or `None` when the draw could not be produced.
    fn resample(&self, rng: &mut StreamRng, x: &[bool], inside: &[usize]) -> Option<Vec<bool>>;
}

/// Rejection sampler for a tiny table process.
pub struct TableSampler<'a> {
    pub spec: &'a TinyProcessSpec,
    pub max_tries: usize,
}

impl TableSampler<'_> {
    fn draw(&self, rng: &mut StreamRng) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (w, &p) in self.spec.weights.iter().enumerate() {
            acc += p;
            if u < acc {
                return w;
            }
        }
        self.spec.weights.len() - 1
    }
}

fn bits(w: usize, k: usize) -> Vec<bool> {
    (0..k).map(|t| w >> t & 1 == 1).collect()
}

impl ConditionalSampler for TableSampler<'_> {
    fn len(&self) -> usize {
        self.spec.k
    }

    fn sample(&self, rng: &mut StreamRng) -> Vec<bool> {
        bits(self.draw(rng), self.spec.k)
    }

    fn resample(&self, rng: &mut StreamRng, x: &[bool], inside: &[usize]) -> Option<Vec<bool>> {
        for _ in 0..self.max_tries {
            let y = bits(self.draw(rng), self.spec.k);
            if (0..self.spec.k).all(|s| inside.contains(&s) || y[s] == x[s]) {
                return Some(y);
            }
        }
        None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct B3Estimate {
    pub t: usize,
    /// Raw nested estimate (biased upward).
    pub raw: f64,
    pub raw_se: f64,
    /// Jackknife bias-corrected estimate.
    pub corrected: f64,
    pub corrected_se: f64,
    /// Mean inner-stage standard error of `E[X_t − p_t | outside]`.
    pub inner_se: f64,
    pub biased_upward: bool,
}

/// Nested Monte Carlo estimate of `E|E[X_t − p_t | X_s, s ∉ B_t]|` for
/// every index (200 × 200 by default).
pub fn b3_estimator<S: ConditionalSampler>(
    sampler: &S,
    marginals: &[f64],
    neighborhoods: &[Vec<usize>],
    outer: usize,
    inner: usize,
    seed: u64,
) -> Result<Vec<B3Estimate>> {
    if inner < 2 || outer < 2 {
        return Err(Error::Input("need at least 2 outer and 2 inner draws".into()));
    }
    let k = sampler.len();
    let mut out = Vec::with_capacity(k);
    for t in 0..k {
        let mut rng = rng::substream(seed, t as u64, 0xb3);
        let p = marginals[t];
        let (mut raws, mut jacks, mut inner_ses) = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..outer {
            let x = sampler.sample(&mut rng);
            let mut vals = Vec::with_capacity(inner);
            for _ in 0..inner {
                let y = sampler
                    .resample(&mut rng, &x, &neighborhoods[t])
                    .ok_or_else(|| Error::Budget(format!("rejection starvation at index {t}")))?;
                vals.push(y[t] as u8 as f64 - p);
            }
            let m = inner as f64;
            let sum: f64 = vals.iter().sum();
            let full = (sum / m).abs();
            let loo: f64 = vals.iter().map(|v| ((sum - v) / (m - 1.0)).abs()).sum::<f64>() / m;
            raws.push(full);
            jacks.push(m * full - (m - 1.0) * loo);
            inner_ses.push(stats::mean_se(&vals).1);
        }
        let (raw, raw_se) = stats::mean_se(&raws);
        let (corrected, corrected_se) = stats::mean_se(&jacks);
        out.push(B3Estimate {
            t,
            raw,
            raw_se,
            corrected,
            corrected_se,
            inner_se: stats::mean(&inner_ses),
            biased_upward: true,
        });
    }
    Ok(out)
}

/// Random positively correlated tiny process: a mixture of product laws
/// whose success probabilities move together with a latent level.
pub fn random_positive_process(k: usize, rng: &mut StreamRng) -> Result<TinyProcessSpec> {
    let levels = rng.gen_range(2..=4);
    let base: Vec<f64> = (0..k).map(|_| rng.gen_range(0.01..0.3)).collect();
    let mut mix: Vec<f64> = (0..levels).map(|_| rng.gen::<f64>() + 0.1).collect();
    let total: f64 = mix.iter().sum();
    mix.iter_mut().for_each(|w| *w /= total);
    let mut scales: Vec<f64> = (0..levels).map(|_| rng.gen_range(0.2..3.0)).collect();
    scales.sort_by(|a, b| a.total_cmp(b));
    let mut weights = vec![0.0; 1 << k];
    for (l, &w) in mix.iter().enumerate() {
        let q: Vec<f64> = base.iter().map(|&b| (b * scales[l]).min(0.95)).collect();
        for (o, wt) in weights.iter_mut().enumerate() {
            let pr: f64 = (0..k)
                .map(|t| if o >> t & 1 == 1 { q[t] } else { 1.0 - q[t] })
                .product();
            *wt += w * pr;
        }
    }
    let s: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= s);
    TinyProcessSpec::new(k, weights)
}

/// Random neighbourhoods containing their own index.
pub fn random_neighborhoods(k: usize, rng: &mut StreamRng) -> Vec<Vec<usize>> {
    let width = rng.gen_range(0..=k / 2);
    (0..k)
        .map(|t| {
            let mut nb: Vec<usize> = (0..k)
                .filter(|&s| s == t || (s as i64 - t as i64).unsigned_abs() as usize <= width)
                .collect();
            nb.sort_unstable();
            nb
        })
        .collect()
}
