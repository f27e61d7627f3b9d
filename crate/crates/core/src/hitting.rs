//! Hitting probabilities, Green's functions and the lattice constants
//! `G(0)`, `p_d`, `c_d`, `C_d`.
//!
//! Exact solves treat the walk as an absorbing chain: for free (non-absorbing)
//! states the system `(I − P_ff) h = b` is symmetric positive definite, so it
//! is solved by conjugate gradients, or by dense LU below
//! [`DENSE_LIMIT`] unknowns.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{ball_boundary_offsets, norm2, LatticeConfig, Point, PointSet};
use crate::rng;
use crate::stats;

pub const DENSE_LIMIT: usize = 3000;
pub const TOLERANCE: f64 = 1e-10;

pub trait LinearOperator {
    fn dim(&self) -> usize;
    fn apply(&self, x: &[f64], y: &mut [f64]);
}

/// Conjugate gradients for a symmetric positive definite operator. Returns
/// the solution and the iteration count; the final true residual must be
/// below `tol` in max norm.
pub fn conjugate_gradient<A: LinearOperator>(a: &A, b: &[f64], tol: f64, max_iter: usize) -> Result<(Vec<f64>, usize)> {
    let n = a.dim();
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut ap = vec![0.0; n];
    let mut rr: f64 = r.iter().map(|v| v * v).sum();
    let stop = (tol * 1e-2).powi(2);
    let mut it = 0;
    while it < max_iter {
        if rr <= stop {
            break;
        }
        a.apply(&p, &mut ap);
        let pap: f64 = p.iter().zip(&ap).map(|(u, v)| u * v).sum();
        if pap <= 0.0 {
            return Err(Error::Numerical("operator not positive definite".into()));
        }
        let alpha = rr / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr_new: f64 = r.iter().map(|v| v * v).sum();
        let beta = rr_new / rr;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
        rr = rr_new;
        it += 1;
    }
    a.apply(&x, &mut ap);
    let res = ap
        .iter()
        .zip(b)
        .map(|(u, v)| (u - v).abs())
        .fold(0.0, f64::max);
    if res > tol {
        return Err(Error::Numerical(format!("CG residual {res:e} after {it} iterations")));
    }
    Ok((x, it))
}

/// `I − P` restricted to the free states of a lattice walk.
#[derive(Debug, Clone)]
struct Restricted {
    offsets: Vec<u32>,
    nbrs: Vec<u32>,
    q: f64,
}

impl LinearOperator for Restricted {
    fn dim(&self) -> usize {
        self.offsets.len() - 1
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        for i in 0..self.dim() {
            let (lo, hi) = (self.offsets[i] as usize, self.offsets[i + 1] as usize);
            let s: f64 = self.nbrs[lo..hi].iter().map(|&j| x[j as usize]).sum();
            y[i] = x[i] - self.q * s;
        }
    }
}

/// Absorbing-chain solver for SRW on a torus or a box. Box boundary vertices
/// are always absorbing (the walk is killed there).
#[derive(Debug, Clone)]
pub struct ExactChainSolver {
    cfg: LatticeConfig,
    free: Vec<usize>,
    pos: Vec<u32>,
    op: Restricted,
}

impl ExactChainSolver {
    pub const MAX_STATES: usize = 2_500_000;

    pub fn new(cfg: &LatticeConfig, absorbing: &PointSet) -> Result<Self> {
        let vol = cfg.volume();
        if absorbing.universe() != vol {
            return Err(Error::Input("absorbing set over a different lattice".into()));
        }
        let is_free = |s: usize| {
            !absorbing.contains(s) && (cfg.is_torus() || !cfg.on_box_boundary(&cfg.point(s)))
        };
        let free: Vec<usize> = (0..vol).filter(|&s| is_free(s)).collect();
        if free.len() > Self::MAX_STATES {
            return Err(Error::Size(format!("{} free states exceed {}", free.len(), Self::MAX_STATES)));
        }
        if free.len() == vol {
            return Err(Error::Input("no absorbing states: system is singular".into()));
        }
        let mut pos = vec![u32::MAX; vol];
        for (i, &s) in free.iter().enumerate() {
            pos[s] = i as u32;
        }
        let mut offsets = vec![0u32];
        let mut nbrs = Vec::with_capacity(free.len() * 2 * cfg.d());
        for &s in &free {
            for v in cfg.neighbors(s) {
                if pos[v] != u32::MAX {
                    nbrs.push(pos[v]);
                }
            }
            offsets.push(nbrs.len() as u32);
        }
        Ok(Self {
            cfg: *cfg,
            free,
            pos,
            op: Restricted {
                offsets,
                nbrs,
                q: 1.0 / (2 * cfg.d()) as f64,
            },
        })
    }

    pub fn n_free(&self) -> usize {
        self.free.len()
    }

    fn solve_free(&self, b: &[f64]) -> Result<Vec<f64>> {
        let k = self.free.len();
        if k < DENSE_LIMIT {
            let mut m = DMatrix::<f64>::identity(k, k);
            for i in 0..k {
                let (lo, hi) = (self.op.offsets[i] as usize, self.op.offsets[i + 1] as usize);
                for &j in &self.op.nbrs[lo..hi] {
                    m[(i, j as usize)] -= self.op.q;
                }
            }
            let x = m
                .lu()
                .solve(&DVector::from_column_slice(b))
                .ok_or_else(|| Error::Numerical("singular dense system".into()))?;
            let x: Vec<f64> = x.iter().copied().collect();
            let mut y = vec![0.0; k];
            self.op.apply(&x, &mut y);
            let res = y.iter().zip(b).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
            if res > TOLERANCE {
                return Err(Error::Numerical(format!("dense residual {res:e}")));
            }
            Ok(x)
        } else {
            Ok(conjugate_gradient(&self.op, b, TOLERANCE, 20 * k + 1000)?.0)
        }
    }

    /// Solves for `h` with `h = boundary` on absorbing states and
    /// `h(v) = mean of h over neighbours` on free states.
    pub fn harmonic(&self, boundary: &[f64]) -> Result<Vec<f64>> {
        let q = self.op.q;
        let b: Vec<f64> = self
            .free
            .iter()
            .map(|&s| {
                q * self
                    .cfg
                    .neighbors(s)
                    .into_iter()
                    .filter(|&v| self.pos[v] == u32::MAX)
                    .map(|v| boundary[v])
                    .sum::<f64>()
            })
            .collect();
        let x = self.solve_free(&b)?;
        let mut h = boundary.to_vec();
        for (i, &s) in self.free.iter().enumerate() {
            h[s] = x[i];
        }
        Ok(h)
    }

    /// Expected number of steps to absorption from every state.
    pub fn expected_absorption_time(&self) -> Result<Vec<f64>> {
        let x = self.solve_free(&vec![1.0; self.free.len()])?;
        let mut e = vec![0.0; self.cfg.volume()];
        for (i, &s) in self.free.iter().enumerate() {
            e[s] = x[i];
        }
        Ok(e)
    }

    /// Expected visits to `y` before absorption, from every state (one
    /// Green's function column).
    pub fn green_column(&self, y: usize) -> Result<Vec<f64>> {
        let j = self.pos[y];
        if j == u32::MAX {
            return Err(Error::Domain("source must be a free state".into()));
        }
        let mut b = vec![0.0; self.free.len()];
        b[j as usize] = 1.0;
        let x = self.solve_free(&b)?;
        let mut g = vec![0.0; self.cfg.volume()];
        for (i, &s) in self.free.iter().enumerate() {
            g[s] = x[i];
        }
        Ok(g)
    }
}

fn check_disjoint(target: &PointSet, avoid: &PointSet) -> Result<()> {
    if target.is_empty() {
        return Err(Error::Input("empty target".into()));
    }
    if target.iter().any(|s| avoid.contains(s)) {
        return Err(Error::Input("target and avoid sets intersect".into()));
    }
    Ok(())
}

/// `P_v(hit target before avoid)` for every site `v`.
pub fn hit_prob_field(cfg: &LatticeConfig, target: &PointSet, avoid: &PointSet) -> Result<Vec<f64>> {
    check_disjoint(target, avoid)?;
    let mut absorbing = PointSet::empty_dense(cfg.volume());
    let mut boundary = vec![0.0; cfg.volume()];
    for s in target.iter() {
        absorbing.insert(s);
        boundary[s] = 1.0;
    }
    for s in avoid.iter() {
        absorbing.insert(s);
    }
    ExactChainSolver::new(cfg, &absorbing)?.harmonic(&boundary)
}

pub fn exact_hit_prob(cfg: &LatticeConfig, start: &Point, target: &PointSet, avoid: &PointSet) -> Result<f64> {
    cfg.validate(start)?;
    check_disjoint(target, avoid)?;
    let s = cfg.index(start);
    if target.contains(s) {
        return Ok(1.0);
    }
    if avoid.contains(s) {
        return Ok(0.0);
    }
    Ok(hit_prob_field(cfg, target, avoid)?[s])
}

/// Expected hitting time of `target` from `start` (torus).
pub fn expected_hit_time(cfg: &LatticeConfig, start: &Point, target: &PointSet) -> Result<f64> {
    cfg.validate(start)?;
    if target.is_empty() {
        return Err(Error::Input("empty target".into()));
    }
    Ok(ExactChainSolver::new(cfg, target)?.expected_absorption_time()?[cfg.index(start)])
}

/// `I − P` on the interior of `[0, L]^d` with zero boundary, stored on the
/// padded grid so that neighbours are plain index offsets.
struct BoxStencil {
    d: usize,
    side: usize,
    strides: Vec<usize>,
    interior: Vec<usize>,
}

impl BoxStencil {
    fn new(d: usize, l: usize) -> Self {
        let side = l + 1;
        let strides: Vec<usize> = (0..d).map(|a| side.pow((d - 1 - a) as u32)).collect();
        let interior = (0..side.pow(d as u32))
            .filter(|&k| {
                let mut k = k;
                (0..d).all(|_| {
                    let c = k % side;
                    k /= side;
                    c > 0 && c < l
                })
            })
            .collect();
        Self { d, side, strides, interior }
    }

    fn grid_len(&self) -> usize {
        self.side.pow(self.d as u32)
    }
}

impl LinearOperator for BoxStencil {
    fn dim(&self) -> usize {
        self.grid_len()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let q = 1.0 / (2 * self.d) as f64;
        y.iter_mut().for_each(|v| *v = 0.0);
        for &k in &self.interior {
            let mut s = 0.0;
            for &st in &self.strides {
                s += x[k - st] + x[k + st];
            }
            y[k] = x[k] - q * s;
        }
    }
}

/// Killed Green's function `G_L(c, ·)` from the centre `c` of `[0, L]^d`
/// (`L` even), returned along the first axis: entry `k` is `G_L(c, c + k e_1)`
/// for `k = 0..L/2`.
pub fn box_green_axis(d: usize, l: usize) -> Result<Vec<f64>> {
    if !l.is_multiple_of(2) || l < 4 {
        return Err(Error::Input("box side must be even and ≥ 4".into()));
    }
    let st = BoxStencil::new(d, l);
    let c: usize = st.strides.iter().map(|s| s * (l / 2)).sum();
    let mut b = vec![0.0; st.grid_len()];
    b[c] = 1.0;
    let (g, _) = conjugate_gradient(&st, &b, TOLERANCE, 100_000)?;
    Ok((0..=l / 2).map(|k| g[c + k * st.strides[0]]).collect())
}

/// Lattice constants of SRW on `Z^d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GreenConstants {
    pub d: usize,
    #[serde(rename = "G0")]
    pub g0: f64,
    pub p_d: f64,
    pub c_d: f64,
    #[serde(rename = "C_d")]
    pub big_c: f64,
    pub meta: ConstantsMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstantsMeta {
    pub method: String,
    pub box_sides: Vec<usize>,
    pub center_values: Vec<f64>,
    /// Spread of `G0` between the full fit and the fit without the smallest box.
    pub g0_extrapolation_error: f64,
    pub fit_range: (usize, usize),
    pub log_log_slope: f64,
    pub c_d_fit_residual: f64,
    /// Return-frequency Monte Carlo in the box of side `mc_box`.
    pub mc_box: usize,
    pub mc_walks: u64,
    pub mc_return_prob: f64,
    pub mc_return_se: f64,
    /// `G_L(0)` of the MC box, for the identity `G_L(0)(1 − p̂_L) = 1`.
    pub mc_box_g0: f64,
}

impl GreenConstants {
    /// `G_L(0)·(1 − p̂_L)` and its standard error.
    pub fn identity_check(&self) -> (f64, f64) {
        let m = &self.meta;
        (m.mc_box_g0 * (1.0 - m.mc_return_prob), m.mc_box_g0 * m.mc_return_se)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, serde_json::to_vec_pretty(self)?)?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        if !(c.p_d > 0.0 && c.p_d < 1.0) || (c.g0 * (1.0 - c.p_d) - 1.0).abs() > 1e-9 {
            return Err(Error::Input(format!("constants cache {} is inconsistent", path.display())));
        }
        Ok(c)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConstantsParams {
    pub box_sides: Vec<usize>,
    pub fit_lo: usize,
    pub mc_box: usize,
    pub mc_walks: u64,
    pub seed: u64,
}

impl Default for ConstantsParams {
    fn default() -> Self {
        Self {
            box_sides: vec![32, 64, 96, 128],
            fit_lo: 5,
            mc_box: 32,
            mc_walks: 2_000_000,
            seed: 0x5eed,
        }
    }
}

/// Least squares `y ≈ X β` via normal equations.
fn lstsq(rows: &[Vec<f64>], y: &[f64]) -> Result<Vec<f64>> {
    let k = rows[0].len();
    let x = DMatrix::from_fn(rows.len(), k, |i, j| rows[i][j]);
    let yv = DVector::from_column_slice(y);
    let beta = (x.transpose() * &x)
        .lu()
        .solve(&(x.transpose() * yv))
        .ok_or_else(|| Error::Diagnostics("degenerate fit".into()))?;
    Ok(beta.iter().copied().collect())
}

/// Fits `value(L) = v∞ + a/L + b/L²` and returns `v∞`.
fn extrapolate(sides: &[usize], values: &[f64]) -> Result<f64> {
    let rows: Vec<Vec<f64>> = sides
        .iter()
        .map(|&l| {
            let u = 1.0 / l as f64;
            vec![1.0, u, u * u]
        })
        .collect();
    Ok(lstsq(&rows, values)?[0])
}

/// Fraction of walks from the centre of `[0, L]^d` returning to it before
/// hitting the box boundary.
pub fn return_frequency(d: usize, l: usize, walks: u64, seed: u64) -> (f64, f64) {
    let half = (l / 2) as i64;
    let mut rng = rng::stream(seed, 0);
    let mut returns = 0u64;
    let mut x = vec![0i64; d];
    for _ in 0..walks {
        x.iter_mut().for_each(|c| *c = 0);
        loop {
            let dir = rng.gen_range(0..2 * d);
            let c = &mut x[dir >> 1];
            *c += if dir & 1 == 1 { 1 } else { -1 };
            if c.abs() == half {
                break;
            }
            if x.iter().all(|&v| v == 0) {
                returns += 1;
                break;
            }
        }
    }
    let p = returns as f64 / walks.max(1) as f64;
    (p, (p * (1.0 - p) / walks.max(1) as f64).sqrt())
}

/// `G(0)` by Richardson extrapolation of exact killed Green's functions,
/// `p_d = 1 − 1/G(0)`, and `c_d` from a fit of `G(0,x)·|x|^{d−2}` on the
/// extrapolated axis profile.
pub fn estimate_constants(d: usize, params: &ConstantsParams) -> Result<GreenConstants> {
    if d < 3 {
        return Err(Error::Input("d ≥ 3 required".into()));
    }
    let mut sides = params.box_sides.clone();
    sides.sort_unstable();
    if sides.len() < 4 {
        return Err(Error::Input("need at least four box sides".into()));
    }
    let profiles: Vec<Vec<f64>> = sides
        .iter()
        .map(|&l| box_green_axis(d, l))
        .collect::<Result<_>>()?;
    let centers: Vec<f64> = profiles.iter().map(|p| p[0]).collect();
    let g0 = extrapolate(&sides, &centers)?;
    let g0_alt = extrapolate(&sides[1..], &centers[1..])?;
    let spread = (g0 - g0_alt).abs();
    if !(g0 > 1.0) || spread > 1e-3 {
        return Err(Error::Diagnostics(format!(
            "G0 extrapolation not converged: {g0} vs {g0_alt}"
        )));
    }

    // Axis profile extrapolated from the three largest boxes.
    let top = &sides[sides.len() - 3..];
    let top_profiles = &profiles[profiles.len() - 3..];
    let hi = top[0] / 4;
    let lo = params.fit_lo.min(hi - 2);
    let mut ks = Vec::new();
    let mut gx = Vec::new();
    for k in lo..=hi {
        let vals: Vec<f64> = top_profiles.iter().map(|p| p[k]).collect();
        ks.push(k as f64);
        gx.push(extrapolate(top, &vals)?);
    }
    let pow = (d - 2) as i32;
    let rows: Vec<Vec<f64>> = ks.iter().map(|&k| vec![1.0, k.powi(-2)]).collect();
    let scaled: Vec<f64> = ks.iter().zip(&gx).map(|(k, g)| g * k.powi(pow)).collect();
    let beta = lstsq(&rows, &scaled)?;
    let c_d = beta[0];
    let resid = rows
        .iter()
        .zip(&scaled)
        .map(|(r, y)| (r[0] * beta[0] + r[1] * beta[1] - y).abs())
        .fold(0.0, f64::max);
    let slope_rows: Vec<Vec<f64>> = ks.iter().map(|&k| vec![1.0, k.ln()]).collect();
    let logs: Vec<f64> = gx.iter().map(|g| g.ln()).collect();
    let slope = lstsq(&slope_rows, &logs)?[1];

    let mc_idx = sides.iter().position(|&l| l == params.mc_box);
    let mc_box_g0 = match mc_idx {
        Some(i) => centers[i],
        None => box_green_axis(d, params.mc_box)?[0],
    };
    let (p_mc, p_se) = return_frequency(d, params.mc_box, params.mc_walks, params.seed);

    let p_d = 1.0 - 1.0 / g0;
    Ok(GreenConstants {
        d,
        g0,
        p_d,
        c_d,
        big_c: c_d / g0,
        meta: ConstantsMeta {
            method: "CG killed Green's function on centred boxes, Richardson in 1/L".into(),
            box_sides: sides,
            center_values: centers,
            g0_extrapolation_error: spread,
            fit_range: (lo, hi),
            log_log_slope: slope,
            c_d_fit_residual: resid,
            mc_box: params.mc_box,
            mc_walks: params.mc_walks,
            mc_return_prob: p_mc,
            mc_return_se: p_se,
            mc_box_g0,
        },
    })
}

/// Walk on `Z^d` from `start` until leaving `B(0,R)`; reports whether any
/// of `targets` was visited and the exit offset.
fn excursion_in_ball<R: Rng>(rng: &mut R, start: &[i64], targets: &[Vec<i64>], big_r: f64, hit: &mut [bool]) -> Vec<i64> {
    let d = start.len();
    let mut x = start.to_vec();
    let mut n2 = norm2(&x);
    let lim = big_r * big_r + 1e-9;
    hit.iter_mut().for_each(|h| *h = false);
    let single_origin = targets.len() == 1 && targets[0].iter().all(|&c| c == 0);
    loop {
        if single_origin {
            if n2 == 0 {
                hit[0] = true;
            }
        } else {
            for (h, t) in hit.iter_mut().zip(targets) {
                if !*h && x[..] == t[..] {
                    *h = true;
                }
            }
        }
        let dir = rng.gen_range(0..2 * d);
        let c = &mut x[dir >> 1];
        if dir & 1 == 1 {
            n2 += 2 * *c + 1;
            *c += 1;
        } else {
            n2 += -2 * *c + 1;
            *c -= 1;
        }
        if n2 as f64 > lim {
            return x;
        }
    }
}

fn cosine(a: &[i64], b: &[i64]) -> f64 {
    let dot: i64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot as f64 / ((norm2(a) as f64) * (norm2(b) as f64)).sqrt()
}

/// One stratum of the conditional hitting estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HitStratum {
    pub label: String,
    pub trials: u64,
    pub hits: u64,
    pub estimate: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalHitReport {
    pub d: usize,
    pub r: f64,
    #[serde(rename = "R")]
    pub big_r: f64,
    pub samples: u64,
    pub aggregate: f64,
    pub aggregate_se: f64,
    /// Strata by the cosine between entry and exit point.
    pub strata: Vec<HitStratum>,
    pub homogeneity_p: f64,
    pub max_min_ratio: f64,
    /// `C_d / r^{d−2}` when constants are supplied.
    pub prediction: Option<f64>,
    /// `r < 5`: far from the `r, R → ∞` regime.
    pub small_r: bool,
}

pub const COSINE_BINS: [f64; 5] = [-1.0, -0.5, 0.0, 0.5, 1.0];

fn cos_bin(c: f64) -> usize {
    COSINE_BINS[1..4].iter().filter(|&&b| c >= b).count()
}

/// Probability that an excursion started uniformly on `∂B(0,r)` in `Z^d`
/// visits the origin before leaving `B(0,R)`, overall and stratified by the
/// relative angle of its entry and exit points.
pub fn conditional_hit_prob(
    d: usize,
    r: f64,
    big_r: f64,
    samples: u64,
    seed: u64,
    constants: Option<&GreenConstants>,
) -> Result<ConditionalHitReport> {
    if !(r > 0.0 && big_r >= 2.0 * r) {
        return Err(Error::Input(format!("need R ≥ 2r, got r={r}, R={big_r}")));
    }
    let entries = ball_boundary_offsets(d, r);
    let mut rng = rng::stream(seed, 0);
    let mut trials = [0u64; 4];
    let mut hits = [0u64; 4];
    let targets = vec![vec![0i64; d]];
    let mut hit = [false];
    for _ in 0..samples {
        let a = &entries[rng.gen_range(0..entries.len())];
        let b = excursion_in_ball(&mut rng, a, &targets, big_r, &mut hit);
        let k = cos_bin(cosine(a, &b));
        trials[k] += 1;
        hits[k] += hit[0] as u64;
    }
    let total_hits: u64 = hits.iter().sum();
    let agg = total_hits as f64 / samples.max(1) as f64;
    let strata: Vec<HitStratum> = (0..4)
        .map(|k| {
            let p = hits[k] as f64 / trials[k].max(1) as f64;
            HitStratum {
                label: format!("cos(entry,exit) in [{}, {})", COSINE_BINS[k], COSINE_BINS[k + 1]),
                trials: trials[k],
                hits: hits[k],
                estimate: p,
                stderr: (p * (1.0 - p) / trials[k].max(1) as f64).sqrt(),
            }
        })
        .collect();
    let used: Vec<&HitStratum> = strata.iter().filter(|s| s.trials > 0).collect();
    let hi = used.iter().map(|s| s.estimate).fold(0.0, f64::max);
    let lo = used.iter().map(|s| s.estimate).fold(f64::INFINITY, f64::min);
    let homogeneity_p = stats::homogeneity_pvalue(
        &used.iter().map(|s| s.hits).collect::<Vec<_>>(),
        &used.iter().map(|s| s.trials).collect::<Vec<_>>(),
    );
    Ok(ConditionalHitReport {
        d,
        r,
        big_r,
        samples,
        aggregate: agg,
        aggregate_se: (agg * (1.0 - agg) / samples.max(1) as f64).sqrt(),
        strata,
        homogeneity_p,
        max_min_ratio: if lo > 0.0 { hi / lo } else { f64::INFINITY },
        prediction: constants.map(|c| c.big_c / r.powi(d as i32 - 2)),
        small_r: r < 5.0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoPointReport {
    pub estimate: f64,
    pub stderr: f64,
    /// Same runs, origin only.
    pub single: f64,
    pub single_se: f64,
    /// `2 C_d / ((1 + p_d) r^{d−2})` when constants are supplied.
    pub lower_bound: Option<f64>,
    /// `‖x − y‖ / r`.
    pub separation_ratio: f64,
}

/// Probability that an excursion from a uniform point of `∂B(0,r)` visits
/// the origin or `y` before leaving `B(0,R)`.
pub fn two_point_hit_prob(
    y: &[i64],
    r: f64,
    big_r: f64,
    samples: u64,
    seed: u64,
    constants: Option<&GreenConstants>,
) -> Result<TwoPointReport> {
    let d = y.len();
    if !(r > 0.0 && big_r >= 2.0 * r) {
        return Err(Error::Input(format!("need R ≥ 2r, got r={r}, R={big_r}")));
    }
    let entries = ball_boundary_offsets(d, r);
    let mut rng = rng::stream(seed, 0);
    let targets = vec![vec![0i64; d], y.to_vec()];
    let mut hit = [false, false];
    let (mut either, mut origin) = (0u64, 0u64);
    for _ in 0..samples {
        let a = &entries[rng.gen_range(0..entries.len())];
        excursion_in_ball(&mut rng, a, &targets, big_r, &mut hit);
        either += (hit[0] || hit[1]) as u64;
        origin += hit[0] as u64;
    }
    let n = samples.max(1) as f64;
    let (pe, po) = (either as f64 / n, origin as f64 / n);
    Ok(TwoPointReport {
        estimate: pe,
        stderr: (pe * (1.0 - pe) / n).sqrt(),
        single: po,
        single_se: (po * (1.0 - po) / n).sqrt(),
        lower_bound: constants.map(|c| 2.0 * c.big_c / ((1.0 + c.p_d) * r.powi(d as i32 - 2))),
        separation_ratio: (norm2(y) as f64).sqrt() / r,
    })
}
