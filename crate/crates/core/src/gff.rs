//! Discrete Gaussian free field on `[0,n]^d` with zero boundary values.
//!
//! The field lives on the interior `{1,..,n-1}^d`. Its covariance is the
//! Green's function of the walk killed on the box boundary, the inverse of
//! the precision matrix `I - P` (with `P` the walk kernel restricted to the
//! interior). Samples are drawn from a banded Cholesky factor of that
//! precision matrix; covariance columns come from the same factor, or from
//! an iterative Dirichlet solve when the box is too large to factor.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::{Arc, Mutex, OnceLock};

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::chenstein::{ChenSteinInput, PairMoment};
use crate::error::{Error, Result};
use crate::hitting::{ExactChainSolver, GreenConstants};
use crate::lattice::{ball_offsets, norm2, LatticeConfig, Point, PointSet};
use crate::rng;
use crate::stats;
use crate::uncovered::{BernoulliFieldSpec, BernoulliProb};

/// Largest interior that is factored; beyond it covariances use CG solves
/// and sampling is unavailable.
pub const MAX_FACTOR_INTERIOR: usize = 16_000;

const JITTER: f64 = 1e-10;

/// Right-hand sides solved together when sampling.
pub const LANES: usize = 8;

/// Lower-triangular band factor `L` with `L Lᵀ = A`, stored row by row:
/// row `i` holds columns `i-b ..= i`.
#[derive(Debug, Clone)]
pub struct BandCholesky {
    size: usize,
    band: usize,
    rows: Vec<f64>,
}

impl BandCholesky {
    /// Factors the symmetric band matrix given by `entry(i, j)` for
    /// `i - band <= j <= i`.
    pub fn factor<F: Fn(usize, usize) -> f64>(size: usize, band: usize, entry: F) -> Result<Self> {
        match Self::try_factor(size, band, &entry, 0.0) {
            Ok(f) => Ok(f),
            Err(_) => Self::try_factor(size, band, &entry, JITTER),
        }
    }

    fn try_factor<F: Fn(usize, usize) -> f64>(size: usize, band: usize, entry: &F, jitter: f64) -> Result<Self> {
        let w = band + 1;
        let mut rows = vec![0.0; size * w];
        for i in 0..size {
            let lo = i.saturating_sub(band);
            for j in lo..=i {
                let klo = lo.max(j.saturating_sub(band));
                let ri = i * w + band - i;
                let rj = j * w + band - j;
                let mut s = entry(i, j);
                for k in klo..j {
                    s -= rows[ri + k] * rows[rj + k];
                }
                if i == j {
                    let s = s + jitter;
                    if !(s > 0.0) {
                        return Err(Error::Numerical(format!("non-positive pivot {s:e} at row {i}")));
                    }
                    rows[ri + i] = s.sqrt();
                } else {
                    rows[ri + j] = s / rows[rj + j];
                }
            }
        }
        Ok(Self { size, band, rows })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn band(&self) -> usize {
        self.band
    }

    #[inline]
    fn row(&self, i: usize) -> (&[f64], usize) {
        let w = self.band + 1;
        let lo = i.saturating_sub(self.band);
        let start = i * w + self.band - i + lo;
        (&self.rows[start..start + (i - lo)], lo)
    }

    #[inline]
    fn diag(&self, i: usize) -> f64 {
        self.rows[i * (self.band + 1) + self.band]
    }

    /// Solves `L y = b` in place.
    pub fn forward(&self, b: &mut [f64]) {
        for i in 0..self.size {
            let (r, lo) = self.row(i);
            let s: f64 = r.iter().zip(&b[lo..i]).map(|(a, x)| a * x).sum();
            b[i] = (b[i] - s) / self.diag(i);
        }
    }

    /// Solves `Lᵀ x = y` in place.
    pub fn backward(&self, y: &mut [f64]) {
        for i in (0..self.size).rev() {
            let xi = y[i] / self.diag(i);
            y[i] = xi;
            let (r, lo) = self.row(i);
            for (a, t) in r.iter().zip(&mut y[lo..i]) {
                *t -= a * xi;
            }
        }
    }

    /// Solves `Lᵀ X = Y` for [`LANES`] interleaved right-hand sides
    /// (`y[i][s]` is entry `i` of system `s`).
    pub fn backward_lanes(&self, y: &mut [[f64; LANES]]) {
        for i in (0..self.size).rev() {
            let d = self.diag(i);
            let mut xi = y[i];
            for v in &mut xi {
                *v /= d;
            }
            y[i] = xi;
            let (r, lo) = self.row(i);
            for (a, t) in r.iter().zip(&mut y[lo..i]) {
                for s in 0..LANES {
                    t[s] -= a * xi[s];
                }
            }
        }
    }

    /// `Lᵀ x`.
    pub fn mul_transpose(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.size];
        for i in 0..self.size {
            let (r, lo) = self.row(i);
            for (off, a) in r.iter().enumerate() {
                out[lo + off] += a * x[i];
            }
            out[i] += self.diag(i) * x[i];
        }
        out
    }
}

/// Zero-boundary field on the box `[0,n]^d`.
#[derive(Debug)]
pub struct GffSpec {
    cfg: LatticeConfig,
    interior: Vec<usize>,
    pos: Vec<u32>,
    factor: OnceLock<Arc<BandCholesky>>,
    solver: OnceLock<ExactChainSolver>,
    columns: Mutex<HashMap<usize, Arc<Vec<f64>>>>,
}

impl GffSpec {
    pub fn new(d: usize, n: usize) -> Result<Self> {
        let cfg = LatticeConfig::boxed(d, n)?;
        let interior: Vec<usize> = (0..cfg.volume())
            .filter(|&s| !cfg.on_box_boundary(&cfg.point(s)))
            .collect();
        let mut pos = vec![u32::MAX; cfg.volume()];
        for (i, &s) in interior.iter().enumerate() {
            pos[s] = i as u32;
        }
        Ok(Self {
            cfg,
            interior,
            pos,
            factor: OnceLock::new(),
            solver: OnceLock::new(),
            columns: Mutex::new(HashMap::new()),
        })
    }

    pub fn config(&self) -> &LatticeConfig {
        &self.cfg
    }

    pub fn d(&self) -> usize {
        self.cfg.d()
    }

    pub fn n(&self) -> usize {
        self.cfg.n()
    }

    /// Interior sites as lattice indices, in increasing order.
    pub fn interior(&self) -> &[usize] {
        &self.interior
    }

    pub fn interior_len(&self) -> usize {
        self.interior.len()
    }

    /// Position of lattice site `site` in the interior ordering.
    pub fn interior_index(&self, site: usize) -> Option<usize> {
        match self.pos.get(site) {
            Some(&p) if p != u32::MAX => Some(p as usize),
            _ => None,
        }
    }

    fn interior_of(&self, p: &Point) -> Result<usize> {
        self.cfg.validate(p)?;
        self.interior_index(self.cfg.index(p))
            .ok_or_else(|| Error::Domain(format!("{:?} lies on the box boundary", p.coords())))
    }

    /// Half-bandwidth of the precision matrix in the interior ordering.
    pub fn band(&self) -> usize {
        (self.n() - 1).pow(self.d() as u32 - 1)
    }

    /// Precision matrix entry between interior positions `i` and `j`.
    pub fn precision(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return 1.0;
        }
        let (a, b) = (self.cfg.point(self.interior[i]), self.cfg.point(self.interior[j]));
        let dist: i64 = a.coords().iter().zip(b.coords()).map(|(x, y)| (x - y).abs()).sum();
        if dist == 1 {
            -1.0 / (2 * self.d()) as f64
        } else {
            0.0
        }
    }

    /// Band Cholesky factor of the precision matrix, computed once.
    pub fn factorization(&self) -> Result<Arc<BandCholesky>> {
        if let Some(f) = self.factor.get() {
            return Ok(Arc::clone(f));
        }
        let k = self.interior.len();
        if k > MAX_FACTOR_INTERIOR {
            return Err(Error::Size(format!(
                "interior of {k} sites exceeds the factorization limit {MAX_FACTOR_INTERIOR}"
            )));
        }
        let f = Arc::new(BandCholesky::factor(k, self.band(), |i, j| self.precision(i, j))?);
        Ok(Arc::clone(self.factor.get_or_init(|| f)))
    }

    fn can_factor(&self) -> bool {
        self.interior.len() <= MAX_FACTOR_INTERIOR
    }

    /// Covariance column of interior position `j`, over interior positions.
    pub fn column(&self, j: usize) -> Result<Arc<Vec<f64>>> {
        if let Some(c) = self.columns.lock().unwrap().get(&j) {
            return Ok(Arc::clone(c));
        }
        let col = if self.can_factor() {
            let f = self.factorization()?;
            let mut b = vec![0.0; self.interior.len()];
            b[j] = 1.0;
            f.forward(&mut b);
            f.backward(&mut b);
            b
        } else {
            if self.solver.get().is_none() {
                let s = ExactChainSolver::new(&self.cfg, &PointSet::empty_dense(self.cfg.volume()))?;
                let _ = self.solver.set(s);
            }
            let g = self.solver.get().unwrap().green_column(self.interior[j])?;
            self.interior.iter().map(|&s| g[s]).collect()
        };
        let col = Arc::new(col);
        self.columns.lock().unwrap().insert(j, Arc::clone(&col));
        Ok(col)
    }

    /// `Cov(φ_x, φ_y)`: expected visits to `y` by the walk from `x` killed
    /// on the box boundary. Boundary arguments are a domain error.
    pub fn covariance(&self, x: &Point, y: &Point) -> Result<f64> {
        let (i, j) = (self.interior_of(x)?, self.interior_of(y)?);
        Ok(self.column(j)?[i])
    }

    pub fn variance(&self, x: &Point) -> Result<f64> {
        self.covariance(x, x)
    }

    /// Covariance restricted to interior positions `idx`, as a dense row-major matrix.
    pub fn covariance_block(&self, idx: &[usize]) -> Result<Vec<f64>> {
        let k = idx.len();
        let mut out = vec![0.0; k * k];
        for (b, &j) in idx.iter().enumerate() {
            let col = self.column(j)?;
            for (a, &i) in idx.iter().enumerate() {
                out[a * k + b] = col[i];
            }
        }
        Ok(out)
    }

    /// Centre of the box.
    pub fn center(&self) -> Point {
        Point::new(vec![(self.n() / 2) as i64; self.d()])
    }
}

/// One field realisation over the interior ordering.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSample {
    pub values: Vec<f64>,
}

impl FieldSample {
    /// Value at lattice site `site` (zero on the boundary).
    pub fn at(&self, spec: &GffSpec, site: usize) -> f64 {
        spec.interior_index(site).map_or(0.0, |i| self.values[i])
    }
}

/// Draws `n_samples` i.i.d. fields. Sample `k` depends only on `(seed, k)`.
pub fn sample_field(spec: &GffSpec, seed: u64, n_samples: usize) -> Result<Vec<FieldSample>> {
    let mut out = Vec::with_capacity(n_samples);
    sample_each(spec, seed, 0, n_samples, |s| out.push(s))?;
    Ok(out)
}

/// Streams samples `first .. first + count` to `sink` without keeping them.
pub fn sample_each<F: FnMut(FieldSample)>(
    spec: &GffSpec,
    seed: u64,
    first: usize,
    count: usize,
    mut sink: F,
) -> Result<()> {
    let f = spec.factorization()?;
    let k = spec.interior_len();
    let mut buf = vec![[0.0; LANES]; k];
    let mut done = 0;
    while done < count {
        let m = LANES.min(count - done);
        for s in 0..m {
            let mut rng = rng::substream(seed, (first + done + s) as u64, 0x6ff);
            for row in buf.iter_mut() {
                row[s] = StandardNormal.sample(&mut rng);
            }
        }
        f.backward_lanes(&mut buf);
        for s in 0..m {
            sink(FieldSample {
                values: buf.iter().map(|row| row[s]).collect(),
            });
        }
        done += m;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HighPointSpec {
    pub alpha: f64,
    /// Sites kept are those in `[margin·n, (1-margin)·n]^d`.
    pub interior_margin: f64,
    pub threshold: f64,
}

impl HighPointSpec {
    /// Threshold `sqrt(2 α d G(0) log n)` with `G(0)` from the constants cache.
    pub fn new(alpha: f64, interior_margin: f64, n: usize, constants: &GreenConstants) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::Parameter(format!("alpha = {alpha} outside (0,1)")));
        }
        if !(interior_margin > 0.0 && interior_margin < 0.5) {
            return Err(Error::Parameter(format!("margin = {interior_margin} outside (0,1/2)")));
        }
        let threshold = (2.0 * alpha * constants.d as f64 * constants.g0 * (n as f64).ln()).sqrt();
        if !(threshold > 0.0) {
            return Err(Error::Parameter("threshold must be positive".into()));
        }
        Ok(Self {
            alpha,
            interior_margin,
            threshold,
        })
    }

    /// Interior positions of the sites inside the margin sub-box.
    pub fn sites(&self, spec: &GffSpec) -> Vec<usize> {
        let n = spec.n() as f64;
        let (lo, hi) = (self.interior_margin * n, (1.0 - self.interior_margin) * n);
        spec.interior()
            .iter()
            .enumerate()
            .filter(|(_, &s)| {
                spec.config()
                    .point(s)
                    .coords()
                    .iter()
                    .all(|&c| c as f64 >= lo && c as f64 <= hi)
            })
            .map(|(i, _)| i)
            .collect()
    }
}

/// Margin sites where the field reaches the threshold, as lattice sites.
pub fn high_points(spec: &GffSpec, field: &FieldSample, hps: &HighPointSpec) -> PointSet {
    high_points_in(spec, field, hps, &hps.sites(spec))
}

fn high_points_in(spec: &GffSpec, field: &FieldSample, hps: &HighPointSpec, sites: &[usize]) -> PointSet {
    let idx: Vec<usize> = sites
        .iter()
        .filter(|&&i| field.values[i] >= hps.threshold)
        .map(|&i| spec.interior()[i])
        .collect();
    PointSet::sparse(spec.config().volume(), idx)
}

/// Independent reference field with `P(site high) = Φ̄(t/σ_x)` on margin
/// sites and zero elsewhere.
pub fn reference_bernoulli(spec: &GffSpec, hps: &HighPointSpec) -> Result<BernoulliFieldSpec> {
    let mut p = vec![0.0; spec.config().volume()];
    for i in hps.sites(spec) {
        let var = spec.column(i)?[i];
        p[spec.interior()[i]] = stats::normal_sf(hps.threshold / var.sqrt());
    }
    BernoulliFieldSpec::new(spec.config().volume(), BernoulliProb::PerSite(p))
}

/// `φ_x = h_x + ξ_x` for a ball `B` around `x`: `ξ_x` is the harmonic
/// extension of the values on `∂B`, `h_x` the zero-boundary field of `B`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkovDecomposition {
    pub center: Point,
    pub radius: f64,
    /// Interior positions of `∂B` (sites outside `B` adjacent to it).
    pub boundary: Vec<usize>,
    /// Harmonic measure from the centre on `boundary`.
    pub harmonic: Vec<f64>,
    pub v_phi2: f64,
    pub v_h2: f64,
    pub v_xi2: f64,
    /// `|v_φ² - v_h² - v_ξ²|`.
    pub identity_residual: f64,
    /// `|v_h² - v_φ²|`.
    pub delta2: f64,
}

impl MarkovDecomposition {
    /// `ξ_x` of one field sample.
    pub fn harmonic_part(&self, field: &FieldSample) -> f64 {
        self.boundary
            .iter()
            .zip(&self.harmonic)
            .map(|(&i, &p)| p * field.values[i])
            .sum()
    }

    /// `P(φ_x ≥ t | outside field) = Φ̄((t - ξ)/v_h)`.
    pub fn conditional_tail(&self, t: f64, xi: f64) -> f64 {
        stats::normal_sf((t - xi) / self.v_h2.sqrt())
    }

    /// `E|P(φ_x ≥ t | outside) - P(φ_x ≥ t)|`, by quadrature over `ξ_x`.
    pub fn mean_tail_deviation(&self, t: f64) -> f64 {
        conditional_tail_deviation(t, self.v_h2, self.v_xi2)
    }
}

/// `E|Φ̄((t - ξ)/v_h) - Φ̄(t/v_φ)|` with `ξ ~ N(0, v_ξ²)`, `v_φ² = v_h² + v_ξ²`.
pub fn conditional_tail_deviation(t: f64, v_h2: f64, v_xi2: f64) -> f64 {
    if v_xi2 <= 0.0 {
        return 0.0;
    }
    let (vh, vx) = (v_h2.sqrt(), v_xi2.sqrt());
    let p = stats::normal_sf(t / (v_h2 + v_xi2).sqrt());
    let steps = 4000;
    let (lo, hi) = (-12.0, 12.0);
    let dz = (hi - lo) / steps as f64;
    let mut acc = 0.0;
    for k in 0..=steps {
        let z = lo + k as f64 * dz;
        let w = if k == 0 || k == steps { 0.5 } else { 1.0 };
        let dens = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
        acc += w * dens * (stats::normal_sf((t - vx * z) / vh) - p).abs();
    }
    acc * dz
}

/// Decomposes the field at `x` for the ball of radius `radius` (typically
/// `n^γ`). The ball and its outer boundary must lie inside the box interior.
pub fn markov_decompose(spec: &GffSpec, x: &Point, radius: f64) -> Result<MarkovDecomposition> {
    let cfg = spec.config();
    let xi = spec.interior_of(x)?;
    let mut inside = HashSet::new();
    for o in ball_offsets(spec.d(), radius) {
        let site = cfg
            .translate(x, &o)
            .filter(|p| !cfg.on_box_boundary(p))
            .ok_or_else(|| Error::Geometry(format!("ball of radius {radius} touches the box boundary")))?;
        inside.insert(cfg.index(&site));
    }
    let mut boundary_sites: Vec<usize> = inside
        .iter()
        .flat_map(|&s| cfg.neighbors(s))
        .filter(|s| !inside.contains(s))
        .collect::<HashSet<_>>()
        .into_iter()
        .collect();
    boundary_sites.sort_unstable();
    if boundary_sites.iter().any(|&s| cfg.on_box_boundary(&cfg.point(s))) {
        return Err(Error::Geometry(format!("ball of radius {radius} touches the box boundary")));
    }

    let mut absorbing = PointSet::empty_dense(cfg.volume());
    for s in 0..cfg.volume() {
        if !inside.contains(&s) {
            absorbing.insert(s);
        }
    }
    let solver = ExactChainSolver::new(cfg, &absorbing)?;
    // G_B is symmetric, so the column at x gives G_B(x, ·).
    let g_b = solver.green_column(cfg.index(x))?;
    let q = 1.0 / (2 * spec.d()) as f64;
    let harmonic: Vec<f64> = boundary_sites
        .iter()
        .map(|&y| {
            cfg.neighbors(y)
                .into_iter()
                .filter(|z| inside.contains(z))
                .map(|z| q * g_b[z])
                .sum()
        })
        .collect();
    let boundary: Vec<usize> = boundary_sites
        .iter()
        .map(|&s| spec.interior_index(s).unwrap())
        .collect();

    let v_phi2 = spec.column(xi)?[xi];
    let v_h2 = g_b[cfg.index(x)];
    let mut v_xi2 = 0.0;
    for (&j, &pj) in boundary.iter().zip(&harmonic) {
        let col = spec.column(j)?;
        for (&i, &pi) in boundary.iter().zip(&harmonic) {
            v_xi2 += pi * pj * col[i];
        }
    }
    Ok(MarkovDecomposition {
        center: x.clone(),
        radius,
        boundary,
        harmonic,
        v_phi2,
        v_h2,
        v_xi2,
        identity_residual: (v_phi2 - v_h2 - v_xi2).abs(),
        delta2: (v_h2 - v_phi2).abs(),
    })
}

/// Sample correlations of `h_x = φ_x - ξ_x` with each boundary value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualCorrelation {
    pub samples: usize,
    pub correlations: Vec<f64>,
    /// Largest `|r|·sqrt(samples)`.
    pub max_z: f64,
    /// Least-squares coefficients of `φ_x` on the boundary values.
    pub regression: Vec<f64>,
    /// Largest deviation of the regression coefficients from the harmonic measure.
    pub max_coefficient_error: f64,
}

pub fn residual_correlation(
    dec: &MarkovDecomposition,
    spec: &GffSpec,
    fields: &[FieldSample],
) -> Result<ResidualCorrelation> {
    let xi = spec.interior_of(&dec.center)?;
    let n = fields.len();
    let k = dec.boundary.len();
    if n <= k + 1 {
        return Err(Error::Input(format!("{n} samples too few for {k} boundary sites")));
    }
    let h: Vec<f64> = fields
        .iter()
        .map(|f| f.values[xi] - dec.harmonic_part(f))
        .collect();
    let hm = stats::mean(&h);
    let hs = (h.iter().map(|v| (v - hm).powi(2)).sum::<f64>() / n as f64).sqrt();
    let mut correlations = Vec::with_capacity(k);
    for &b in &dec.boundary {
        let y: Vec<f64> = fields.iter().map(|f| f.values[b]).collect();
        let ym = stats::mean(&y);
        let ys = (y.iter().map(|v| (v - ym).powi(2)).sum::<f64>() / n as f64).sqrt();
        let c = h.iter().zip(&y).map(|(a, b)| (a - hm) * (b - ym)).sum::<f64>() / n as f64;
        correlations.push(c / (hs * ys));
    }
    let max_z = correlations
        .iter()
        .map(|r| r.abs() * (n as f64).sqrt())
        .fold(0.0, f64::max);

    let x = nalgebra::DMatrix::<f64>::from_fn(n, k, |r, c| fields[r].values[dec.boundary[c]]);
    let yv = nalgebra::DVector::<f64>::from_iterator(n, fields.iter().map(|f| f.values[xi]));
    let xtx = x.transpose() * &x;
    let xty = x.transpose() * yv;
    let beta = xtx
        .cholesky()
        .ok_or_else(|| Error::Numerical("singular boundary regression".into()))?
        .solve(&xty);
    let regression: Vec<f64> = beta.iter().copied().collect();
    let max_coefficient_error = regression
        .iter()
        .zip(&dec.harmonic)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(ResidualCorrelation {
        samples: n,
        correlations,
        max_z,
        regression,
        max_coefficient_error,
    })
}

/// Chen–Stein inputs for the high-point process, indexed by the margin
/// sites (in the order of [`HighPointSpec::sites`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GffComparison {
    pub sites: Vec<Point>,
    pub radius: f64,
    pub samples: usize,
    pub exact_marginals: Vec<f64>,
    pub input: ChenSteinInput,
}

/// Streaming high-point counts over margin sites: per-site exceedances and
/// joint exceedances of pairs within `radius` of each other.
#[derive(Debug, Clone)]
pub struct HighPointAccumulator {
    threshold: f64,
    radius: f64,
    sites: Vec<usize>,
    points: Vec<Point>,
    neighborhoods: Vec<Vec<usize>>,
    hits: Vec<u64>,
    pair_hits: HashMap<(usize, usize), u64>,
    samples: u64,
}

impl HighPointAccumulator {
    pub fn new(spec: &GffSpec, hps: &HighPointSpec, radius: f64) -> Self {
        let cfg = spec.config();
        let sites = hps.sites(spec);
        let slot: HashMap<usize, usize> = sites.iter().enumerate().map(|(a, &i)| (i, a)).collect();
        let points: Vec<Point> = sites.iter().map(|&i| cfg.point(spec.interior()[i])).collect();
        let offsets = ball_offsets(spec.d(), radius);
        let neighborhoods = points
            .iter()
            .map(|p| {
                let mut nb: Vec<usize> = offsets
                    .iter()
                    .filter_map(|o| cfg.translate(p, o))
                    .filter_map(|q| spec.interior_index(cfg.index(&q)))
                    .filter_map(|i| slot.get(&i).copied())
                    .collect();
                nb.sort_unstable();
                nb
            })
            .collect();
        Self {
            threshold: hps.threshold,
            radius,
            hits: vec![0; sites.len()],
            sites,
            points,
            neighborhoods,
            pair_hits: HashMap::new(),
            samples: 0,
        }
    }

    pub fn add(&mut self, field: &FieldSample) {
        self.samples += 1;
        let high: Vec<usize> = (0..self.sites.len())
            .filter(|&a| field.values[self.sites[a]] >= self.threshold)
            .collect();
        let r2 = self.radius * self.radius + 1e-9;
        for (u, &a) in high.iter().enumerate() {
            self.hits[a] += 1;
            for &b in &high[u + 1..] {
                let diff: Vec<i64> = self.points[a]
                    .coords()
                    .iter()
                    .zip(self.points[b].coords())
                    .map(|(x, y)| x - y)
                    .collect();
                if (norm2(&diff) as f64) <= r2 {
                    *self.pair_hits.entry((a, b)).or_default() += 1;
                }
            }
        }
    }

    pub fn samples(&self) -> u64 {
        self.samples
    }

    /// Joint exceedance counts, sorted by pair.
    pub fn pair_counts(&self) -> Vec<(usize, usize, u64)> {
        let mut v: Vec<(usize, usize, u64)> = self.pair_hits.iter().map(|(&(a, b), &c)| (a, b, c)).collect();
        v.sort_unstable();
        v
    }

    /// Adds counts gathered by another accumulator over the same sites.
    pub fn absorb(&mut self, hits: &[u64], pairs: &[(usize, usize, u64)], samples: u64) -> Result<()> {
        if hits.len() != self.hits.len() {
            return Err(Error::Input("exceedance counts over a different site set".into()));
        }
        for (h, &o) in self.hits.iter_mut().zip(hits) {
            *h += o;
        }
        for &(a, b, c) in pairs {
            *self.pair_hits.entry((a, b)).or_default() += c;
        }
        self.samples += samples;
        Ok(())
    }

    /// Exceedance counts per margin site, in [`HighPointSpec::sites`] order.
    pub fn hits(&self) -> &[u64] {
        &self.hits
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    /// Chen–Stein inputs: empirical marginals and pair moments, and `b3`
    /// terms from the conditional Gaussian tail given the field outside
    /// the ball. Where the ball reaches the box boundary the largest
    /// admissible radius is used.
    pub fn finish(&self, spec: &GffSpec) -> Result<GffComparison> {
        if self.samples == 0 {
            return Err(Error::Input("empty ensemble".into()));
        }
        let m = self.samples as f64;
        let marginals: Vec<f64> = self.hits.iter().map(|&h| h as f64 / m).collect();
        let mut pair_moments = Vec::new();
        for (a, nb) in self.neighborhoods.iter().enumerate() {
            for &b in nb.iter().filter(|&&b| b > a) {
                let v = self.pair_hits.get(&(a, b)).copied().unwrap_or(0) as f64 / m;
                pair_moments.push(PairMoment { s: a, t: b, value: v });
            }
        }
        let mut exact_marginals = Vec::with_capacity(self.sites.len());
        let mut b3_terms = Vec::with_capacity(self.sites.len());
        for (a, p) in self.points.iter().enumerate() {
            let var = spec.column(self.sites[a])?[self.sites[a]];
            let q = stats::normal_sf(self.threshold / var.sqrt());
            exact_marginals.push(q);
            let mut rad = self.radius;
            let dec = loop {
                match markov_decompose(spec, p, rad) {
                    Ok(d) => break Some(d),
                    Err(Error::Geometry(_)) if rad > 1.0 => rad -= 1.0,
                    Err(Error::Geometry(_)) => break None,
                    Err(e) => return Err(e),
                }
            };
            // Without an admissible ball: E|1(φ ≥ t) - p| = 2p(1-p).
            b3_terms.push(match dec {
                Some(d) => d.mean_tail_deviation(self.threshold),
                None => 2.0 * q * (1.0 - q),
            });
        }
        let input = ChenSteinInput {
            neighborhoods: self.neighborhoods.clone(),
            marginals,
            pair_moments,
            b3_terms,
            tolerance: 1e-9,
        };
        input.validate()?;
        Ok(GffComparison {
            sites: self.points.clone(),
            radius: self.radius,
            samples: self.samples as usize,
            exact_marginals,
            input,
        })
    }
}

/// [`HighPointAccumulator`] over a stored ensemble.
pub fn bernoulli_comparison(
    spec: &GffSpec,
    hps: &HighPointSpec,
    radius: f64,
    fields: &[FieldSample],
) -> Result<GffComparison> {
    let mut acc = HighPointAccumulator::new(spec, hps, radius);
    for f in fields {
        acc.add(f);
    }
    acc.finish(spec)
}

/// Per-site comparison of exceedance counts with `Φ̄(t/σ_x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalCheck {
    pub samples: u64,
    pub sites: usize,
    pub level: f64,
    /// Fraction of sites whose exact binomial test rejects at `level`.
    pub rejected_fraction: f64,
    pub observed_total: u64,
    pub expected_total: f64,
    pub min_p_value: f64,
}

pub fn marginal_check(hits: &[u64], exact: &[f64], samples: u64, level: f64) -> MarginalCheck {
    let pv: Vec<f64> = hits
        .iter()
        .zip(exact)
        .map(|(&k, &p)| stats::binomial_two_sided_p(k, samples, p))
        .collect();
    MarginalCheck {
        samples,
        sites: hits.len(),
        level,
        rejected_fraction: pv.iter().filter(|&&p| p < level).count() as f64 / hits.len().max(1) as f64,
        observed_total: hits.iter().sum(),
        expected_total: exact.iter().sum::<f64>() * samples as f64,
        min_p_value: pv.iter().copied().fold(1.0, f64::min),
    }
}

/// Sidecar describing a flat binary field snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnapshotMeta {
    pub d: usize,
    pub n: usize,
    pub interior_sites: usize,
    pub samples: usize,
    pub dtype: String,
    pub ordering: String,
    pub seed: u64,
    pub generator: String,
}

/// Writes samples as little-endian `f64`, sample-major, to `path` and the
/// sidecar to `path` with extension `.json`.
pub fn write_snapshot(path: &Path, spec: &GffSpec, fields: &[FieldSample], seed: u64) -> Result<SnapshotMeta> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for f in fields {
        for v in &f.values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    let meta = SnapshotMeta {
        d: spec.d(),
        n: spec.n(),
        interior_sites: spec.interior_len(),
        samples: fields.len(),
        dtype: "f64-le".into(),
        ordering: "interior sites {1..n-1}^d, lexicographic, first coordinate slowest".into(),
        seed,
        generator: rng::GENERATOR.into(),
    };
    fs::write(path.with_extension("json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(meta)
}

pub fn read_snapshot(path: &Path) -> Result<(SnapshotMeta, Vec<FieldSample>)> {
    let meta: SnapshotMeta = serde_json::from_str(&fs::read_to_string(path.with_extension("json"))?)?;
    let bytes = fs::read(path)?;
    let k = meta.interior_sites;
    if bytes.len() != meta.samples * k * 8 {
        return Err(Error::Input(format!(
            "snapshot holds {} bytes, sidecar expects {}",
            bytes.len(),
            meta.samples * k * 8
        )));
    }
    let fields = bytes
        .chunks_exact(k * 8)
        .map(|c| FieldSample {
            values: c
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect(),
        })
        .collect();
    Ok((meta, fields))
}

/// High-point coordinates as CSV, one row per site, with a `sample` column.
pub fn write_high_points_csv(path: &Path, cfg: &LatticeConfig, sets: &[PointSet]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    let header: Vec<String> = (0..cfg.d()).map(|a| format!("x{a}")).collect();
    writeln!(w, "sample,{}", header.join(","))?;
    for (k, s) in sets.iter().enumerate() {
        for site in s.iter() {
            let c: Vec<String> = cfg.point(site).coords().iter().map(|v| v.to_string()).collect();
            writeln!(w, "{k},{}", c.join(","))?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{dense_solve, OracleBudget};

    fn dense_inverse(spec: &GffSpec) -> Vec<f64> {
        let k = spec.interior_len();
        let mut a = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..k {
                a[i * k + j] = spec.precision(i, j);
            }
        }
        let mut eye = vec![0.0; k * k];
        for i in 0..k {
            eye[i * k + i] = 1.0;
        }
        dense_solve(k, a, eye, &OracleBudget::default()).unwrap()
    }

    #[test]
    fn covariance_matches_dense_inverse() {
        for n in [4, 6] {
            let spec = GffSpec::new(3, n).unwrap();
            let k = spec.interior_len();
            let inv = dense_inverse(&spec);
            for j in 0..k {
                let col = spec.column(j).unwrap();
                for i in 0..k {
                    assert!((col[i] - inv[j * k + i]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn covariance_symmetric_and_rejects_boundary() {
        let spec = GffSpec::new(3, 8).unwrap();
        let x = Point::new(vec![2, 3, 4]);
        let y = Point::new(vec![5, 1, 6]);
        let a = spec.covariance(&x, &y).unwrap();
        let b = spec.covariance(&y, &x).unwrap();
        assert!((a - b).abs() < 1e-9);
        assert!(matches!(
            spec.covariance(&x, &Point::new(vec![0, 3, 3])),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn cg_columns_agree_with_factor() {
        let spec = GffSpec::new(3, 10).unwrap();
        let j = spec.interior_len() / 2;
        let from_factor = spec.column(j).unwrap();
        let solver = ExactChainSolver::new(spec.config(), &PointSet::empty_dense(spec.config().volume())).unwrap();
        let g = solver.green_column(spec.interior()[j]).unwrap();
        for (i, &s) in spec.interior().iter().enumerate() {
            assert!((from_factor[i] - g[s]).abs() < 1e-8);
        }
    }

    #[test]
    fn harmonic_measure_is_a_probability_and_identity_holds() {
        let spec = GffSpec::new(3, 12).unwrap();
        for (x, r) in [(vec![6, 6, 6], 3.0), (vec![5, 6, 7], 2.5), (vec![4, 4, 4], 2.0)] {
            let dec = markov_decompose(&spec, &Point::new(x), r).unwrap();
            let s: f64 = dec.harmonic.iter().sum();
            assert!((s - 1.0).abs() < 1e-10, "sum {s}");
            assert!(dec.harmonic.iter().all(|&p| p >= -1e-14));
            assert!(dec.identity_residual < 1e-8, "residual {}", dec.identity_residual);
        }
        assert!(matches!(
            markov_decompose(&spec, &Point::new(vec![2, 6, 6]), 2.0),
            Err(Error::Geometry(_))
        ));
    }

    #[test]
    fn sampling_is_deterministic_per_index() {
        let spec = GffSpec::new(3, 5).unwrap();
        let a = sample_field(&spec, 3, 10).unwrap();
        let mut b = Vec::new();
        sample_each(&spec, 3, 7, 3, |f| b.push(f)).unwrap();
        assert_eq!(&a[7..], &b[..]);
    }

    #[test]
    fn whitened_samples_have_normal_moments() {
        let spec = GffSpec::new(3, 4).unwrap();
        let f = spec.factorization().unwrap();
        let k = spec.interior_len() as f64;
        let fields = sample_field(&spec, 11, 4000).unwrap();
        let (mut s2, mut s4) = (0.0, 0.0);
        for fs in &fields {
            let w = f.mul_transpose(&fs.values);
            let q: f64 = w.iter().map(|v| v * v).sum();
            s2 += q;
            s4 += q * q;
        }
        let m = fields.len() as f64;
        // |w|² ~ χ²_k: mean k, Mardia kurtosis k(k+2).
        assert!((s2 / m - k).abs() < 4.0 * (2.0 * k / m).sqrt());
        let kurt = s4 / m;
        let sd = (8.0 * k * (k + 2.0) / m).sqrt();
        assert!((kurt - k * (k + 2.0)).abs() < 4.0 * sd, "kurtosis {kurt}");
    }

    #[test]
    fn tail_deviation_vanishes_without_boundary_variance() {
        assert_eq!(conditional_tail_deviation(2.0, 1.0, 0.0), 0.0);
        let a = conditional_tail_deviation(3.0, 1.0, 0.01);
        let b = conditional_tail_deviation(3.0, 1.0, 0.04);
        assert!(a > 0.0 && b > a);
    }

    #[test]
    fn snapshot_round_trip() {
        let spec = GffSpec::new(3, 4).unwrap();
        let fields = sample_field(&spec, 1, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("field.bin");
        write_snapshot(&path, &spec, &fields, 1).unwrap();
        let (meta, back) = read_snapshot(&path).unwrap();
        assert_eq!(meta.samples, 3);
        assert_eq!(back, fields);
    }
}
