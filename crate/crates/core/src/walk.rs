//! Simple random walk on the torus: stationary start, stepping, hitting
//! times and uncovered-set tracking.

use rand::Rng;

use crate::error::{Error, Result};
use crate::lattice::{LatticeConfig, Point, PointSet};
use crate::rng::{self, StreamRng};

/// Position, step counter and private random stream of one walk.
#[derive(Debug, Clone)]
pub struct WalkState {
    cfg: LatticeConfig,
    coords: Vec<i64>,
    strides: Vec<usize>,
    pos: usize,
    time: u64,
    lazy: bool,
    rng: StreamRng,
}

/// Outcome of [`WalkState::run_until_hit`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HitOutcome {
    Hit(u64),
    CapExceeded,
}

impl WalkState {
    /// Uniform start, the stationary law of SRW on the torus.
    pub fn start_stationary(cfg: &LatticeConfig, seed: u64, replica: u64) -> Result<Self> {
        let mut rng = rng::stream(seed, replica);
        let site = rng.gen_range(0..cfg.volume());
        Self::from_parts(cfg, site, rng)
    }

    pub fn start_at(cfg: &LatticeConfig, start: &Point, seed: u64, replica: u64) -> Result<Self> {
        cfg.validate(start)?;
        Self::from_parts(cfg, cfg.index(start), rng::stream(seed, replica))
    }

    pub fn from_parts(cfg: &LatticeConfig, site: usize, rng: StreamRng) -> Result<Self> {
        if !cfg.is_torus() {
            return Err(Error::Config("walk engine runs on the torus only".into()));
        }
        let d = cfg.d();
        let n = cfg.n();
        let strides = (0..d).map(|a| n.pow((d - 1 - a) as u32)).collect();
        Ok(Self {
            cfg: *cfg,
            coords: cfg.point(site).coords().to_vec(),
            strides,
            pos: site,
            time: 0,
            lazy: false,
            rng,
        })
    }

    /// Hold with probability 1/2 at every step. Diagnostics only.
    pub fn set_lazy(&mut self, lazy: bool) {
        self.lazy = lazy;
    }

    pub fn config(&self) -> &LatticeConfig {
        &self.cfg
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn coords(&self) -> &[i64] {
        &self.coords
    }

    pub fn point(&self) -> Point {
        Point::new(self.coords.clone())
    }

    pub fn time(&self) -> u64 {
        self.time
    }

    pub fn rng_mut(&mut self) -> &mut StreamRng {
        &mut self.rng
    }

    /// One step; returns the direction taken (`2*axis + (sign > 0)`), or
    /// `None` for a lazy hold.
    #[inline]
    pub fn step(&mut self) -> Option<usize> {
        self.time += 1;
        if self.lazy && self.rng.gen::<bool>() {
            return None;
        }
        let dir = self.rng.gen_range(0..2 * self.coords.len());
        self.apply(dir);
        Some(dir)
    }

    #[inline]
    fn apply(&mut self, dir: usize) {
        let axis = dir >> 1;
        let n = self.cfg.n() as i64;
        let stride = self.strides[axis];
        let c = &mut self.coords[axis];
        if dir & 1 == 1 {
            if *c == n - 1 {
                *c = 0;
                self.pos -= (n as usize - 1) * stride;
            } else {
                *c += 1;
                self.pos += stride;
            }
        } else if *c == 0 {
            *c = n - 1;
            self.pos += (n as usize - 1) * stride;
        } else {
            *c -= 1;
            self.pos -= stride;
        }
    }

    /// First `t ≥ now` with `X(t) ∈ target`, or cap-exceeded after `cap` steps.
    pub fn run_until_hit(&mut self, target: &PointSet, cap: u64) -> Result<HitOutcome> {
        if target.is_empty() {
            return Err(Error::Input("empty hitting target".into()));
        }
        if cap == 0 {
            return Err(Error::Input("hitting cap must be positive".into()));
        }
        if target.contains(self.pos) {
            return Ok(HitOutcome::Hit(self.time));
        }
        for _ in 0..cap {
            self.step();
            if target.contains(self.pos) {
                return Ok(HitOutcome::Hit(self.time));
            }
        }
        Ok(HitOutcome::CapExceeded)
    }

    /// Walks until absolute time `horizon`, recording every visited site.
    pub fn run_and_track(&mut self, horizon: u64, record_times: bool) -> CoverTracker {
        let mut tracker = CoverTracker::new(&self.cfg, record_times);
        tracker.visit(self.pos, self.time);
        tracker.extend(self, horizon);
        tracker
    }
}

/// Visited sites of a trajectory; the uncovered set is the complement.
#[derive(Debug, Clone)]
pub struct CoverTracker {
    visited: PointSet,
    uncovered_count: usize,
    first_visit: Option<Vec<u64>>,
    horizon: u64,
}

impl CoverTracker {
    pub fn new(cfg: &LatticeConfig, record_times: bool) -> Self {
        let volume = cfg.volume();
        Self {
            visited: PointSet::empty_dense(volume),
            uncovered_count: volume,
            first_visit: record_times.then(|| vec![u64::MAX; volume]),
            horizon: 0,
        }
    }

    #[inline]
    pub fn visit(&mut self, site: usize, time: u64) {
        if self.visited.insert(site) {
            self.uncovered_count -= 1;
            if let Some(fv) = self.first_visit.as_mut() {
                fv[site] = time;
            }
        }
        self.horizon = self.horizon.max(time);
    }

    /// Continues the walk up to absolute time `horizon`.
    pub fn extend(&mut self, walk: &mut WalkState, horizon: u64) {
        self.visit(walk.position(), walk.time());
        while walk.time() < horizon {
            walk.step();
            self.visit(walk.position(), walk.time());
        }
    }

    pub fn uncovered_count(&self) -> usize {
        self.uncovered_count
    }

    pub fn horizon(&self) -> u64 {
        self.horizon
    }

    pub fn is_covered(&self, site: usize) -> bool {
        self.visited.contains(site)
    }

    pub fn first_visit(&self, site: usize) -> Option<u64> {
        self.first_visit
            .as_ref()
            .and_then(|fv| (fv[site] != u64::MAX).then_some(fv[site]))
    }

    /// `U(horizon)` as a dense set.
    pub fn uncovered(&self) -> PointSet {
        let mut out = PointSet::empty_dense(self.visited.universe());
        for i in 0..self.visited.universe() {
            if !self.visited.contains(i) {
                out.insert(i);
            }
        }
        out
    }
}

/// Mean time to visit every site from a uniform start, with its standard error.
/// Empirical stand-in for the cover time; there is no exact evaluation.
pub fn estimate_cover_time(cfg: &LatticeConfig, replicas: u64, seed: u64, cap: u64) -> Result<(f64, f64, usize)> {
    let mut times = Vec::new();
    let mut capped = 0;
    for rep in 0..replicas {
        let mut walk = WalkState::start_stationary(cfg, seed, rep)?;
        let mut tracker = CoverTracker::new(cfg, false);
        tracker.visit(walk.position(), 0);
        while tracker.uncovered_count() > 0 && walk.time() < cap {
            walk.step();
            tracker.visit(walk.position(), walk.time());
        }
        if tracker.uncovered_count() == 0 {
            times.push(walk.time() as f64);
        } else {
            capped += 1;
        }
    }
    let (m, se) = crate::stats::mean_se(&times);
    Ok((m, se, capped))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::chi_square_pvalue;

    fn cfg(n: usize) -> LatticeConfig {
        LatticeConfig::torus(3, n).unwrap()
    }

    #[test]
    fn stationary_start_deterministic() {
        let c = cfg(8);
        let a = WalkState::start_stationary(&c, 99, 3).unwrap();
        let b = WalkState::start_stationary(&c, 99, 3).unwrap();
        assert_eq!(a.position(), b.position());
        assert_eq!(a.time(), 0);
    }

    #[test]
    fn stationary_start_uniform_chi_square() {
        let c = cfg(4);
        let mut counts = vec![0u64; c.volume()];
        for rep in 0..100_000 {
            counts[WalkState::start_stationary(&c, 5, rep).unwrap().position()] += 1;
        }
        let expected = vec![100_000.0 / 64.0; 64];
        assert!(chi_square_pvalue(&counts, &expected) > 1e-3);
    }

    #[test]
    fn replica_streams_separate() {
        let c = cfg(32);
        let mut a = WalkState::start_stationary(&c, 1, 0).unwrap();
        let mut b = WalkState::start_stationary(&c, 1, 1).unwrap();
        let mut same = 0;
        for _ in 0..1000 {
            a.step();
            b.step();
            same += usize::from(a.position() == b.position());
        }
        assert!(same < 20);
    }

    #[test]
    fn one_step_moves_l1_one() {
        let c = cfg(8);
        let mut w = WalkState::start_stationary(&c, 2, 0).unwrap();
        for _ in 0..1000 {
            let before = w.point();
            w.step();
            let disp = c.displacement(&before, &w.point());
            assert_eq!(disp.iter().map(|x| x.abs()).sum::<i64>(), 1);
            assert_eq!(c.index(&w.point()), w.position());
        }
        assert_eq!(w.time(), 1000);
    }

    #[test]
    fn one_step_frequencies() {
        let c = cfg(8);
        let start = Point::new(vec![3, 3, 3]);
        let nbrs = c.neighbors(c.index(&start));
        let mut counts = vec![0u64; 6];
        let trials = 100_000;
        let mut rng = rng::stream(11, 0);
        for _ in 0..trials {
            let mut w = WalkState::from_parts(&c, c.index(&start), rng.clone()).unwrap();
            w.step();
            rng = w.rng_mut().clone();
            let k = nbrs.iter().position(|&s| s == w.position()).unwrap();
            counts[k] += 1;
        }
        for &k in &counts {
            let f = k as f64 / trials as f64;
            let se = (1.0 / 6.0 * 5.0 / 6.0 / trials as f64).sqrt();
            assert!((f - 1.0 / 6.0).abs() < 4.0 * se, "freq {f}");
        }
    }

    #[test]
    fn two_step_return_probability() {
        // Exact enumeration: of the (2d)^2 two-step paths, 2d return.
        let d = 3usize;
        let exact = (2 * d) as f64 / ((2 * d) * (2 * d)) as f64;
        assert!((exact - 1.0 / 6.0).abs() < 1e-15);
        let c = cfg(8);
        let trials = 60_000u64;
        let mut returns = 0u64;
        let mut w = WalkState::start_stationary(&c, 3, 0).unwrap();
        for _ in 0..trials {
            let s = w.position();
            w.step();
            w.step();
            returns += u64::from(w.position() == s);
        }
        let f = returns as f64 / trials as f64;
        let se = (exact * (1.0 - exact) / trials as f64).sqrt();
        assert!((f - exact).abs() < 4.0 * se);
    }

    #[test]
    fn hit_at_start_and_cap() {
        let c = cfg(8);
        let mut w = WalkState::start_at(&c, &Point::new(vec![0, 0, 0]), 1, 0).unwrap();
        let target = PointSet::sparse(c.volume(), vec![0]);
        assert_eq!(w.run_until_hit(&target, 10).unwrap(), HitOutcome::Hit(0));
        let far = PointSet::sparse(c.volume(), vec![c.index(&Point::new(vec![4, 4, 4]))]);
        assert_eq!(w.run_until_hit(&far, 1).unwrap(), HitOutcome::CapExceeded);
        assert!(w.run_until_hit(&far, 0).is_err());
    }

    #[test]
    fn tracking_horizon_zero_and_monotone() {
        let c = cfg(4);
        let mut w = WalkState::start_stationary(&c, 4, 0).unwrap();
        let mut t = w.run_and_track(0, true);
        assert_eq!(t.uncovered_count(), 63);
        let mut prev = t.uncovered_count();
        for h in (10..400).step_by(10) {
            t.extend(&mut w, h);
            assert!(t.uncovered_count() <= prev);
            prev = t.uncovered_count();
        }
        let u = t.uncovered();
        for s in 0..c.volume() {
            assert_eq!(t.first_visit(s).is_some(), !u.contains(s));
            if let Some(tv) = t.first_visit(s) {
                assert!(tv <= t.horizon());
            }
        }
    }

    #[test]
    fn stationarity_preserved_by_a_step() {
        let c = cfg(4);
        let mut counts = vec![0u64; 64];
        for rep in 0..64_000 {
            let mut w = WalkState::start_stationary(&c, 8, rep).unwrap();
            w.step();
            counts[w.position()] += 1;
        }
        assert!(chi_square_pvalue(&counts, &vec![1000.0; 64]) > 1e-3);
    }

    #[test]
    fn lazy_walk_holds() {
        let c = cfg(8);
        let mut w = WalkState::start_stationary(&c, 8, 0).unwrap();
        w.set_lazy(true);
        let holds = (0..10_000).filter(|_| w.step().is_none()).count();
        assert!((4_500..5_500).contains(&holds));
    }

    #[test]
    fn box_geometry_rejected() {
        let c = LatticeConfig::boxed(3, 8).unwrap();
        assert!(WalkState::start_stationary(&c, 0, 0).is_err());
    }
}
