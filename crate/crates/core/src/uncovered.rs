//! The excursion surrogate for the uncovered set.
//!
//! Each site `x` gets an excursion budget `A`. `σ_x` is the end of its `A`-th
//! completed excursion across `B(x,R) \ B(x,r)`, `τ̃_x` the first visit to
//! `x` after the walk first reaches `∂B(x,R)`, and `Q_x = 1(τ̃_x > σ_x)`.
//! The surrogate set is `{x : Q_x = 1}`. Budgets come from the per-excursion
//! miss probabilities `f(a,b)` and their log-mean `m` under the pair law.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::excursion::{
    check_radii, for_each_stationary_excursion, AnnulusGeometry, Excursion, SiteAutomata,
};
use crate::hitting::GreenConstants;
use crate::lattice::{LatticeConfig, PointSet};
use crate::rng;
use crate::stats;
use crate::walk::WalkState;

/// Per-excursion miss probabilities on pair orbits of `∂B(0,R) × ∂B(0,R)`.
#[derive(Debug, Clone)]
pub struct FTable {
    geom: Arc<AnnulusGeometry>,
    pair_orbit: Vec<u32>,
    shell: usize,
    /// Per orbit: excursions observed and excursions that hit the centre.
    pub counts: Vec<u64>,
    pub hits: Vec<u64>,
    log_f: Vec<f64>,
}

impl FTable {
    fn new(geom: Arc<AnnulusGeometry>) -> Self {
        let (pair_orbit, k) = geom.pair_orbits();
        let shell = geom.exit_shell().len();
        Self {
            geom,
            pair_orbit,
            shell,
            counts: vec![0; k],
            hits: vec![0; k],
            log_f: vec![0.0; k],
        }
    }

    fn finish(&mut self) {
        for o in 0..self.counts.len() {
            self.log_f[o] = if self.counts[o] == 0 || self.hits[o] == 0 {
                0.0
            } else {
                (1.0 - self.hits[o] as f64 / self.counts[o] as f64).max(f64::MIN_POSITIVE).ln()
            };
        }
    }

    pub fn geometry(&self) -> &Arc<AnnulusGeometry> {
        &self.geom
    }

    pub fn n_orbits(&self) -> usize {
        self.counts.len()
    }

    #[inline]
    pub fn orbit(&self, from: u32, to: u32) -> usize {
        self.pair_orbit[from as usize * self.shell + to as usize] as usize
    }

    /// `f̂(a,b)`; orbits without a single hit give 1.
    pub fn f(&self, from: u32, to: u32) -> f64 {
        self.log_f(from, to).exp()
    }

    #[inline]
    pub fn log_f(&self, from: u32, to: u32) -> f64 {
        self.log_f[self.orbit(from, to)]
    }

    /// Orbits observed at least once but never hit.
    pub fn zero_hit_orbits(&self) -> usize {
        self.counts
            .iter()
            .zip(&self.hits)
            .filter(|(&c, &h)| c > 0 && h == 0)
            .count()
    }
}

/// Estimates of `f`, `m` and `T` from the stationary excursion stream.
#[derive(Debug, Clone)]
pub struct FmEstimate {
    pub table: FTable,
    pub m_hat: f64,
    pub m_se: f64,
    pub t_hat: f64,
    pub t_se: f64,
    pub excursions: u64,
    pub hit_fraction: f64,
    pub replicas: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FmSummary {
    pub r: f64,
    #[serde(rename = "R")]
    pub big_r: f64,
    pub m_hat: f64,
    pub m_se: f64,
    pub t_hat: f64,
    pub t_se: f64,
    pub excursions: u64,
    pub hit_fraction: f64,
    pub pair_orbits: usize,
    pub zero_hit_orbits: usize,
}

impl FmEstimate {
    pub fn summary(&self) -> FmSummary {
        let g = self.table.geometry();
        FmSummary {
            r: g.r(),
            big_r: g.big_r(),
            m_hat: self.m_hat,
            m_se: self.m_se,
            t_hat: self.t_hat,
            t_se: self.t_se,
            excursions: self.excursions,
            hit_fraction: self.hit_fraction,
            pair_orbits: self.table.n_orbits(),
            zero_hit_orbits: self.table.zero_hit_orbits(),
        }
    }
}

/// `m̂ = −Σ_o (c_o/N) log f̂_o` from per-orbit counts and hits.
fn plug_in_m(counts: &[u64], hits: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    let mut m = 0.0;
    for (&c, &h) in counts.iter().zip(hits) {
        if c > 0 && h > 0 {
            let f = 1.0 - h as f64 / c as f64;
            m -= c as f64 / total as f64 * f.max(f64::MIN_POSITIVE).ln();
        }
    }
    m
}

fn jackknife(full: &[f64]) -> f64 {
    let k = full.len() as f64;
    let mean = full.iter().sum::<f64>() / k;
    ((k - 1.0) / k * full.iter().map(|v| (v - mean).powi(2)).sum::<f64>()).sqrt()
}

/// Pools the excursions of every centre of the torus along `replicas`
/// independent stationary walks (after a warm-up in which every centre
/// completes 50 excursions) until `n_excursions` are collected. Standard errors are
/// leave-one-replica-out jackknife estimates, which account for the
/// correlation between centres sharing a trajectory.
pub fn estimate_f_and_m(
    cfg: &LatticeConfig,
    r: f64,
    big_r: f64,
    n_excursions: u64,
    seed: u64,
    replicas: usize,
) -> Result<FmEstimate> {
    check_radii(cfg, r, big_r)?;
    if replicas < 2 {
        return Err(Error::Input("need at least two replicas for error bars".into()));
    }
    let geom = Arc::new(AnnulusGeometry::new(cfg.d(), r, big_r));
    let mut table = FTable::new(Arc::clone(&geom));
    let k = table.n_orbits();
    let per = n_excursions.div_ceil(replicas as u64);
    let burn_in = 50u32;
    let mut rep_counts = Vec::with_capacity(replicas);
    let mut rep_hits = Vec::with_capacity(replicas);
    let mut rep_len = Vec::with_capacity(replicas);
    for rep in 0..replicas {
        let (mut counts, mut hits) = (vec![0u64; k], vec![0u64; k]);
        let (mut n, mut len_sum) = (0u64, 0.0f64);
        for_each_stationary_excursion(cfg, &geom, per, burn_in, seed, rep as u64, |ev| {
            let o = table.orbit(ev.from, ev.to);
            counts[o] += 1;
            hits[o] += ev.hit_center as u64;
            len_sum += (ev.end - ev.start) as f64;
            n += 1;
        })?;
        rep_counts.push(counts);
        rep_hits.push(hits);
        rep_len.push((len_sum, n));
    }
    for rep in 0..replicas {
        for o in 0..k {
            table.counts[o] += rep_counts[rep][o];
            table.hits[o] += rep_hits[rep][o];
        }
    }
    table.finish();
    let m_hat = plug_in_m(&table.counts, &table.hits);
    let (len_total, n_total) = rep_len
        .iter()
        .fold((0.0, 0u64), |acc, &(l, n)| (acc.0 + l, acc.1 + n));
    let t_hat = len_total / n_total as f64;

    let mut m_loo = Vec::with_capacity(replicas);
    let mut t_loo = Vec::with_capacity(replicas);
    for rep in 0..replicas {
        let c: Vec<u64> = (0..k).map(|o| table.counts[o] - rep_counts[rep][o]).collect();
        let h: Vec<u64> = (0..k).map(|o| table.hits[o] - rep_hits[rep][o]).collect();
        m_loo.push(plug_in_m(&c, &h));
        t_loo.push((len_total - rep_len[rep].0) / (n_total - rep_len[rep].1) as f64);
    }
    let total_hits: u64 = table.hits.iter().sum();
    Ok(FmEstimate {
        m_hat,
        m_se: jackknife(&m_loo),
        t_hat,
        t_se: jackknife(&t_loo),
        excursions: n_total,
        hit_fraction: total_hits as f64 / n_total as f64,
        replicas,
        table,
    })
}

/// Level and tuning inputs for [`compute_params`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurrogateInputs {
    pub alpha: f64,
    pub epsilon: f64,
    pub psi: f64,
    /// Explicit `(r, R)` replacing `(n^{γ(1−ε)}, n^γ)`.
    #[serde(default)]
    pub radii: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateParams {
    pub d: usize,
    pub n: usize,
    pub alpha: f64,
    pub epsilon: f64,
    pub psi: f64,
    pub gamma: f64,
    pub r: f64,
    #[serde(rename = "R")]
    pub big_r: f64,
    pub radii_overridden: bool,
    pub delta: f64,
    pub m: f64,
    #[serde(rename = "T")]
    pub t: f64,
    pub t_star: f64,
    /// Excursion budget `A = ⌊α t*/((1+δ)T)⌋`.
    pub budget: u32,
    /// `α t*/((1−δ)T)` when `δ < 1`.
    pub upper_count: Option<f64>,
    /// `(α/C_d) r^{d−2} log(n^d)`.
    pub leading_order_budget: f64,
    /// `α ≤ (1 + p_d)/2`.
    pub below_threshold: bool,
    /// `r < 3` or `R < 10r`.
    pub unvalidated: bool,
    pub warnings: Vec<String>,
}

impl SurrogateParams {
    /// The horizon `α t*` as an integer time.
    pub fn horizon(&self) -> u64 {
        (self.alpha * self.t_star).floor() as u64
    }

    /// Default radii `(n^{γ(1−ε)}, n^γ)` for a level.
    pub fn default_radii(n: usize, alpha: f64, epsilon: f64) -> (f64, f64) {
        let gamma = 2.0 * alpha - 1.0 - epsilon;
        let nf = n as f64;
        (nf.powf(gamma * (1.0 - epsilon)), nf.powf(gamma))
    }
}

pub fn compute_params(
    cfg: &LatticeConfig,
    inputs: &SurrogateInputs,
    constants: &GreenConstants,
    t_hat: f64,
    m_hat: f64,
) -> Result<SurrogateParams> {
    let SurrogateInputs { alpha, epsilon, psi, radii } = *inputs;
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Parameter(format!("alpha must lie in (0,1), got {alpha}")));
    }
    if !(epsilon > 0.0 && psi > 0.0) {
        return Err(Error::Parameter("epsilon and psi must be positive".into()));
    }
    if !(t_hat > 0.0 && m_hat > 0.0) {
        return Err(Error::Parameter(format!("need T > 0 and m > 0, got T={t_hat}, m={m_hat}")));
    }
    let (d, n) = (cfg.d(), cfg.n());
    let gamma = 2.0 * alpha - 1.0 - epsilon;
    let (r, big_r) = radii.unwrap_or_else(|| SurrogateParams::default_radii(n, alpha, epsilon));
    check_radii(cfg, r, big_r)?;
    let nf = n as f64;
    let delta = r.powf((2.0 - d as f64) / 2.0) * nf.powf(psi);
    let log_vol = d as f64 * nf.ln();
    let t_star = log_vol * t_hat / m_hat;
    let a_real = alpha * t_star / ((1.0 + delta) * t_hat);
    let budget = a_real.floor();
    if budget < 1.0 {
        return Err(Error::Parameter(format!(
            "budget A = {a_real:.3} < 1: instance too small for alpha = {alpha}"
        )));
    }
    let below_threshold = alpha <= (1.0 + constants.p_d) / 2.0;
    let unvalidated = r < 3.0 || big_r < 10.0 * r;
    let mut warnings = Vec::new();
    if below_threshold {
        warnings.push(format!(
            "alpha = {alpha} is at or below (1 + p_d)/2 = {:.4}",
            (1.0 + constants.p_d) / 2.0
        ));
    }
    if unvalidated {
        warnings.push(format!("unvalidated mode: r = {r}, R = {big_r} (needs r >= 3 and R >= 10r)"));
    }
    if gamma <= 0.0 {
        warnings.push(format!("gamma = {gamma} is not positive"));
    }
    Ok(SurrogateParams {
        d,
        n,
        alpha,
        epsilon,
        psi,
        gamma,
        r,
        big_r,
        radii_overridden: radii.is_some(),
        delta,
        m: m_hat,
        t: t_hat,
        t_star,
        budget: budget as u32,
        upper_count: (delta < 1.0).then(|| alpha * t_star / ((1.0 - delta) * t_hat)),
        leading_order_budget: alpha / constants.big_c * r.powi(d as i32 - 2) * log_vol,
        below_threshold,
        unvalidated,
        warnings,
    })
}

/// Options for one surrogate run.
#[derive(Debug, Clone, Copy)]
pub struct RunOptions<'a> {
    /// Stop with a partial flag after this many steps.
    pub step_cap: u64,
    /// Also record coverage and excursion counts at this time.
    pub snapshot_at: Option<u64>,
    /// Accumulate `Σ log f̂` over each site's first `A` excursions.
    pub ftable: Option<&'a FTable>,
}

impl Default for RunOptions<'_> {
    fn default() -> Self {
        Self {
            step_cap: u64::MAX,
            snapshot_at: None,
            ftable: None,
        }
    }
}

/// State of every requested site at a fixed time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub time: u64,
    pub uncovered: Vec<bool>,
    pub counts: Vec<u32>,
}

/// Outcome of [`build_surrogate`] for the requested sites (in input order,
/// duplicates removed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateSet {
    pub sites: Vec<usize>,
    /// `Q_x`; `None` if `σ_x` was not reached before the step cap.
    pub q: Vec<Option<bool>>,
    pub sigma: Vec<Option<u64>>,
    pub tau_tilde: Vec<Option<u64>>,
    pub snapshot: Option<Snapshot>,
    /// `Σ_{i ≤ A} log f̂(Y_{i−1}, Y_i)` per site, when an f-table was given.
    pub log_product: Option<Vec<f64>>,
    pub partial: bool,
    pub steps: u64,
    pub seed: u64,
    pub replica: u64,
}

impl SurrogateSet {
    /// Realised surrogate set `{x : Q_x = 1}`; undetermined sites excluded.
    pub fn realized(&self, cfg: &LatticeConfig) -> PointSet {
        let mut s = PointSet::empty_dense(cfg.volume());
        for (&x, q) in self.sites.iter().zip(&self.q) {
            if *q == Some(true) {
                s.insert(x);
            }
        }
        s
    }

    pub fn mean_q(&self) -> f64 {
        let det: Vec<f64> = self.q.iter().flatten().map(|&b| b as u8 as f64).collect();
        stats::mean(&det)
    }
}

/// One stationary walk; every requested site is tracked against its own
/// annulus until its `σ_x` is known.
pub fn build_surrogate(
    cfg: &LatticeConfig,
    params: &SurrogateParams,
    sites: &[usize],
    seed: u64,
    replica: u64,
    opts: RunOptions<'_>,
) -> Result<SurrogateSet> {
    check_radii(cfg, params.r, params.big_r)?;
    let geom = match opts.ftable {
        Some(t) => {
            let g = t.geometry();
            if g.r() != params.r || g.big_r() != params.big_r {
                return Err(Error::Input("f-table radii differ from the parameters".into()));
            }
            Arc::clone(g)
        }
        None => Arc::new(AnnulusGeometry::new(cfg.d(), params.r, params.big_r)),
    };
    let mut auto = SiteAutomata::new(cfg, geom, sites, Some(params.budget), false)?;
    let n_slots = auto.sites().len();
    let mut walk = WalkState::start_stationary(cfg, seed, replica)?;
    let budget = params.budget;
    let mut log_prod = opts.ftable.map(|_| vec![0.0f64; n_slots]);
    let mut sink = |ev: &Excursion| {
        if let (Some(t), Some(lp)) = (opts.ftable, log_prod.as_mut()) {
            if ev.index <= budget {
                lp[ev.slot as usize] += t.log_f(ev.from, ev.to);
            }
        }
    };
    let mut snapshot = None;
    if let Some(ts) = opts.snapshot_at {
        auto.advance(&mut walk, ts.min(opts.step_cap), &mut sink);
        snapshot = Some(Snapshot {
            time: ts,
            uncovered: (0..n_slots)
                .map(|s| auto.status(s).first_visit.is_none_or(|t| t > ts))
                .collect(),
            counts: (0..n_slots).map(|s| auto.completed(s)).collect(),
        });
    }
    let chunk = 20_000u64;
    while !auto.all_sigma_determined() && walk.time() < opts.step_cap {
        let until = (walk.time() + chunk).min(opts.step_cap);
        auto.advance(&mut walk, until, &mut sink);
    }
    let statuses: Vec<_> = (0..n_slots).map(|s| auto.status(s)).collect();
    let q = statuses
        .iter()
        .map(|st| st.sigma.map(|sig| st.tau_tilde.is_none_or(|tt| tt > sig)))
        .collect::<Vec<_>>();
    Ok(SurrogateSet {
        sites: auto.sites().to_vec(),
        partial: q.iter().any(|v| v.is_none()),
        q,
        sigma: statuses.iter().map(|s| s.sigma).collect(),
        tau_tilde: statuses.iter().map(|s| s.tau_tilde).collect(),
        snapshot,
        log_product: log_prod,
        steps: walk.time(),
        seed,
        replica,
    })
}

/// Coupling outcome for one replica.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingRow {
    pub replica: u64,
    pub equal: bool,
    pub uncovered: usize,
    pub surrogate: usize,
    pub symmetric_difference: usize,
    /// `|U(αt*) \ Ū|`.
    pub inclusion_failures: usize,
    /// `|Ū \ U(αt*)|`.
    pub surrogate_only: usize,
    /// Sites with `N_x(r,R,αt*) < A`.
    pub shortfall_sites: usize,
    /// Every site of `U \ Ū` has a count shortfall.
    pub failures_explained: bool,
    pub partial: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingReport {
    pub horizon: u64,
    pub rows: Vec<CouplingRow>,
    pub equality_frequency: f64,
    /// `(|U Δ Ū|, replicas)` pairs.
    pub histogram: Vec<(usize, usize)>,
    pub consistency_holds: bool,
}

pub fn coupling_replica(cfg: &LatticeConfig, params: &SurrogateParams, seed: u64, replica: u64, step_cap: u64) -> Result<CouplingRow> {
    let sites: Vec<usize> = (0..cfg.volume()).collect();
    let horizon = params.horizon();
    let set = build_surrogate(
        cfg,
        params,
        &sites,
        seed,
        replica,
        RunOptions {
            step_cap,
            snapshot_at: Some(horizon),
            ftable: None,
        },
    )?;
    let snap = set.snapshot.as_ref().expect("snapshot requested");
    let (mut u, mut ubar, mut fail, mut only, mut short) = (0, 0, 0, 0, 0);
    let mut explained = true;
    for (k, q) in set.q.iter().enumerate() {
        let in_u = snap.uncovered[k];
        let in_ubar = *q == Some(true);
        let shortfall = snap.counts[k] < params.budget;
        u += in_u as usize;
        ubar += in_ubar as usize;
        short += shortfall as usize;
        if in_u && !in_ubar {
            fail += 1;
            explained &= shortfall;
        }
        if in_ubar && !in_u {
            only += 1;
        }
    }
    Ok(CouplingRow {
        replica,
        equal: fail == 0 && only == 0,
        uncovered: u,
        surrogate: ubar,
        symmetric_difference: fail + only,
        inclusion_failures: fail,
        surrogate_only: only,
        shortfall_sites: short,
        failures_explained: explained,
        partial: set.partial,
    })
}

/// `U(αt*)` and `Ū` from the same trajectory, full lattice, per replica.
pub fn coupling_check(cfg: &LatticeConfig, params: &SurrogateParams, replicas: u64, seed: u64) -> Result<CouplingReport> {
    let cap = 20 * params.horizon().max(1);
    let rows = (0..replicas)
        .map(|rep| coupling_replica(cfg, params, seed, rep, cap))
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize_coupling(params.horizon(), rows))
}

pub fn summarize_coupling(horizon: u64, rows: Vec<CouplingRow>) -> CouplingReport {
    let mut hist: std::collections::BTreeMap<usize, usize> = Default::default();
    for r in &rows {
        *hist.entry(r.symmetric_difference).or_default() += 1;
    }
    let eq = rows.iter().filter(|r| r.equal).count();
    CouplingReport {
        horizon,
        equality_frequency: eq as f64 / rows.len().max(1) as f64,
        histogram: hist.into_iter().collect(),
        consistency_holds: rows.iter().all(|r| r.failures_explained),
        rows,
    }
}

/// Moments of `Q` over full-lattice replicas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentsReport {
    pub replicas: u64,
    pub mean_q: f64,
    pub mean_q_se: f64,
    /// `exp(−m̂ A)`.
    pub predicted: f64,
    /// Delta-method error of the prediction from `se(m̂)`.
    pub predicted_se: f64,
    pub z: f64,
    pub eta: f64,
    /// Fraction of replicas whose origin has `∏ f̂` outside
    /// `(exp(−m̂(1+η)A), exp(−m̂(1−η)A))`.
    pub window_violation_origin: f64,
    /// Same over all sites and replicas.
    pub window_violation_all: f64,
    pub per_replica_mean: Vec<f64>,
    pub origin_log_product: Vec<f64>,
}

/// One full-lattice surrogate replica reduced to what the moment report needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentsReplica {
    pub replica: u64,
    pub mean_q: f64,
    pub origin_log_product: f64,
    pub window_violations: u64,
    pub sites: u64,
}

/// `(lower, upper)` of the window `exp(−m(1±η)A)` on the log scale.
fn log_window(fm: &FmEstimate, params: &SurrogateParams, eta: f64) -> (f64, f64) {
    let a = params.budget as f64;
    (-fm.m_hat * (1.0 + eta) * a, -fm.m_hat * (1.0 - eta) * a)
}

pub fn moments_replica(
    cfg: &LatticeConfig,
    params: &SurrogateParams,
    fm: &FmEstimate,
    seed: u64,
    replica: u64,
    eta: f64,
) -> Result<MomentsReplica> {
    let sites: Vec<usize> = (0..cfg.volume()).collect();
    let (lo, hi) = log_window(fm, params, eta);
    let set = build_surrogate(
        cfg,
        params,
        &sites,
        seed,
        replica,
        RunOptions {
            step_cap: 20 * params.horizon().max(1),
            snapshot_at: None,
            ftable: Some(&fm.table),
        },
    )?;
    let lp = set.log_product.as_ref().expect("f-table given");
    Ok(MomentsReplica {
        replica,
        mean_q: set.mean_q(),
        origin_log_product: lp[0],
        window_violations: lp.iter().filter(|&&v| v <= lo || v >= hi).count() as u64,
        sites: lp.len() as u64,
    })
}

pub fn surrogate_moments(
    cfg: &LatticeConfig,
    params: &SurrogateParams,
    fm: &FmEstimate,
    replicas: u64,
    seed: u64,
    eta: f64,
) -> Result<MomentsReport> {
    let rows = (0..replicas)
        .map(|rep| moments_replica(cfg, params, fm, seed, rep, eta))
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize_moments(params, fm, eta, &rows))
}

pub fn summarize_moments(params: &SurrogateParams, fm: &FmEstimate, eta: f64, rows: &[MomentsReplica]) -> MomentsReport {
    let a = params.budget as f64;
    let (lo, hi) = log_window(fm, params, eta);
    let replicas = rows.len() as u64;
    let per: Vec<f64> = rows.iter().map(|r| r.mean_q).collect();
    let origin: Vec<f64> = rows.iter().map(|r| r.origin_log_product).collect();
    let viol_all: u64 = rows.iter().map(|r| r.window_violations).sum();
    let total_all: u64 = rows.iter().map(|r| r.sites).sum();
    let (mean_q, mean_q_se) = stats::mean_se(&per);
    let predicted = (-fm.m_hat * a).exp();
    let predicted_se = a * fm.m_se * predicted;
    let comb = (mean_q_se.powi(2) + predicted_se.powi(2)).sqrt();
    let viol_origin = origin.iter().filter(|&&v| v <= lo || v >= hi).count();
    MomentsReport {
        replicas,
        mean_q,
        mean_q_se,
        predicted,
        predicted_se,
        z: if comb > 0.0 { (mean_q - predicted) / comb } else { 0.0 },
        eta,
        window_violation_origin: viol_origin as f64 / replicas.max(1) as f64,
        window_violation_all: viol_all as f64 / total_all.max(1) as f64,
        per_replica_mean: per,
        origin_log_product: origin,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMomentReport {
    pub offset: Vec<i64>,
    pub distance: f64,
    pub replicas: u64,
    pub joint: f64,
    pub joint_se: f64,
    pub marginal: f64,
    pub marginal_se: f64,
    /// `joint − marginal²` and its standard error across replicas.
    pub covariance: f64,
    pub covariance_se: f64,
    /// `n^{−2αd/(1+p_d)}` and `n^{−2αd}`.
    pub close_envelope: f64,
    pub far_envelope: f64,
}

/// `E[Q_x Q_y]` estimated by averaging `Q_z Q_{z+(y−x)}` over all `z` of the
/// torus (translation invariance), with replica-level error bars.
pub fn pair_moment(
    cfg: &LatticeConfig,
    params: &SurrogateParams,
    x: usize,
    y: usize,
    replicas: u64,
    seed: u64,
    p_d: f64,
) -> Result<PairMomentReport> {
    if x == y {
        return Err(Error::Input("pair moment needs x != y".into()));
    }
    let offset = cfg.displacement(&cfg.point(x), &cfg.point(y));
    let sites: Vec<usize> = (0..cfg.volume()).collect();
    let (mut joints, mut margs, mut covs) = (Vec::new(), Vec::new(), Vec::new());
    for rep in 0..replicas {
        let set = build_surrogate(
            cfg,
            params,
            &sites,
            seed,
            rep,
            RunOptions {
                step_cap: 20 * params.horizon().max(1),
                ..Default::default()
            },
        )?;
        let q: Vec<f64> = set.q.iter().map(|v| v.unwrap_or(false) as u8 as f64).collect();
        let mut j = 0.0;
        for z in 0..cfg.volume() {
            let w = cfg.index(&cfg.translate(&cfg.point(z), &offset).expect("torus"));
            j += q[z] * q[w];
        }
        let j = j / cfg.volume() as f64;
        let m = stats::mean(&q);
        joints.push(j);
        margs.push(m);
        covs.push(j - m * m);
    }
    let (joint, joint_se) = stats::mean_se(&joints);
    let (marginal, marginal_se) = stats::mean_se(&margs);
    let (covariance, covariance_se) = stats::mean_se(&covs);
    let nf = cfg.n() as f64;
    let ad = params.alpha * cfg.d() as f64;
    Ok(PairMomentReport {
        distance: (offset.iter().map(|c| c * c).sum::<i64>() as f64).sqrt(),
        offset,
        replicas,
        joint,
        joint_se,
        marginal,
        marginal_se,
        covariance,
        covariance_se,
        close_envelope: nf.powf(-2.0 * ad / (1.0 + p_d)),
        far_envelope: nf.powf(-2.0 * ad),
    })
}

/// Independent Bernoulli field over the sites of a lattice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BernoulliFieldSpec {
    pub universe: usize,
    pub p: BernoulliProb,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BernoulliProb {
    Constant(f64),
    PerSite(Vec<f64>),
}

impl BernoulliFieldSpec {
    pub fn new(universe: usize, p: BernoulliProb) -> Result<Self> {
        let ok = |v: f64| (0.0..=1.0).contains(&v);
        match &p {
            BernoulliProb::Constant(v) if !ok(*v) => {
                return Err(Error::Input(format!("p = {v} outside [0,1]")))
            }
            BernoulliProb::PerSite(v) if v.len() != universe || !v.iter().all(|&x| ok(x)) => {
                return Err(Error::Input("per-site probabilities invalid".into()))
            }
            _ => {}
        }
        Ok(Self { universe, p })
    }

    pub fn prob(&self, site: usize) -> f64 {
        match &self.p {
            BernoulliProb::Constant(v) => *v,
            BernoulliProb::PerSite(v) => v[site],
        }
    }

    pub fn sample(&self, seed: u64, replica: u64) -> PointSet {
        let mut rng = rng::substream(seed, replica, 0xbe);
        let mut s = PointSet::empty_dense(self.universe);
        for x in 0..self.universe {
            if rng.gen::<f64>() < self.prob(x) {
                s.insert(x);
            }
        }
        s
    }
}
