//! Brute-force reference computations for tests and tiny instances.
//!
//! Everything here is deliberately naive and shares nothing with the code it
//! checks beyond lattice primitives: its own Gaussian elimination, replay of
//! stored trajectories by direct distance tests, and full enumeration of
//! `{0,1}^I` outcome tables.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{LatticeConfig, Point};
use crate::walk::WalkState;

/// Size limits; oracles refuse larger inputs.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OracleBudget {
    pub max_states: usize,
    pub max_enumeration: usize,
    pub tolerance: f64,
}

impl Default for OracleBudget {
    fn default() -> Self {
        Self {
            max_states: 10_000,
            max_enumeration: 1 << 20,
            tolerance: 1e-10,
        }
    }
}

/// Solves `A X = B` for a dense row-major `k × k` matrix and `m` right-hand
/// sides stored column-major (`b[j*k + i]`), by Gaussian elimination with
/// partial pivoting.
pub fn dense_solve(k: usize, mut a: Vec<f64>, mut b: Vec<f64>, budget: &OracleBudget) -> Result<Vec<f64>> {
    if k > budget.max_states {
        return Err(Error::Size(format!("{k} unknowns exceed oracle budget {}", budget.max_states)));
    }
    if a.len() != k * k || !b.len().is_multiple_of(k.max(1)) {
        return Err(Error::Input("dense_solve: shape mismatch".into()));
    }
    let a0 = a.clone();
    let b0 = b.clone();
    let m = if k == 0 { 0 } else { b.len() / k };
    for col in 0..k {
        let piv = (col..k)
            .max_by(|&i, &j| a[i * k + col].abs().total_cmp(&a[j * k + col].abs()))
            .unwrap();
        if a[piv * k + col].abs() < 1e-300 {
            return Err(Error::Numerical("singular system".into()));
        }
        if piv != col {
            for c in 0..k {
                a.swap(piv * k + c, col * k + c);
            }
            for j in 0..m {
                b.swap(j * k + piv, j * k + col);
            }
        }
        let d = a[col * k + col];
        for row in col + 1..k {
            let factor = a[row * k + col] / d;
            if factor == 0.0 {
                continue;
            }
            for c in col..k {
                a[row * k + c] -= factor * a[col * k + c];
            }
            for j in 0..m {
                b[j * k + row] -= factor * b[j * k + col];
            }
        }
    }
    for j in 0..m {
        for row in (0..k).rev() {
            let mut s = b[j * k + row];
            for c in row + 1..k {
                s -= a[row * k + c] * b[j * k + c];
            }
            b[j * k + row] = s / a[row * k + row];
        }
    }
    for j in 0..m {
        for row in 0..k {
            let mut s = -b0[j * k + row];
            for c in 0..k {
                s += a0[row * k + c] * b[j * k + c];
            }
            if s.abs() > budget.tolerance.max(1e-9) {
                return Err(Error::Numerical(format!("residual {s:e} above tolerance")));
            }
        }
    }
    Ok(b)
}

/// Raw positions of one walk, for replay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub cfg: LatticeConfig,
    pub positions: Vec<usize>,
}

/// Steps `walk` to absolute time `horizon`, storing every position.
pub fn record_trajectory(walk: &mut WalkState, horizon: u64) -> Trajectory {
    let mut positions = vec![walk.position()];
    while walk.time() < horizon {
        walk.step();
        positions.push(walk.position());
    }
    Trajectory {
        cfg: *walk.config(),
        positions,
    }
}

fn dist2_to(cfg: &LatticeConfig, site: usize, center: &Point) -> i64 {
    cfg.dist2(&cfg.point(site), center)
}

fn in_ball(cfg: &LatticeConfig, site: usize, center: &Point, radius: f64) -> bool {
    (dist2_to(cfg, site, center) as f64) <= radius * radius + 1e-9
}

/// `∂B(center, radius)`: outside the ball with a neighbour inside it.
fn on_shell(cfg: &LatticeConfig, site: usize, center: &Point, radius: f64) -> bool {
    !in_ball(cfg, site, center, radius)
        && cfg
            .neighbors(site)
            .into_iter()
            .any(|v| in_ball(cfg, v, center, radius))
}

/// Stopping times `(ρ, ρ̃)` recomputed directly from the stored positions.
pub fn replay_stopping_times(traj: &Trajectory, center: &Point, r: f64, big_r: f64) -> (Vec<u64>, Vec<u64>) {
    let (mut rho, mut rho_tilde) = (Vec::new(), Vec::new());
    let mut inside = false;
    for (t, &p) in traj.positions.iter().enumerate() {
        if !inside {
            if on_shell(&traj.cfg, p, center, r) {
                rho.push(t as u64);
                inside = true;
            }
        } else if !in_ball(&traj.cfg, p, center, big_r) {
            rho_tilde.push(t as u64);
            inside = false;
        }
    }
    (rho, rho_tilde)
}

/// Completed excursions `i ≥ 1` by time `t`.
pub fn replay_count(traj: &Trajectory, center: &Point, r: f64, big_r: f64, t: u64) -> u64 {
    let (_, rt) = replay_stopping_times(traj, center, r, big_r);
    rt.iter().skip(1).filter(|&&s| s <= t).count() as u64
}

pub fn replay_first_visit(traj: &Trajectory, site: usize) -> Option<u64> {
    traj.positions.iter().position(|&p| p == site).map(|t| t as u64)
}

/// Number of sites not visited in `[0, t]`.
pub fn replay_uncovered(traj: &Trajectory, t: u64) -> usize {
    let mut seen = vec![false; traj.cfg.volume()];
    for &p in traj.positions.iter().take(t as usize + 1) {
        seen[p] = true;
    }
    seen.iter().filter(|&&s| !s).count()
}

/// `Q_x = 1(τ̃_x > σ_x)` with `σ_x = ρ̃_A`; `None` when `σ_x` lies beyond
/// the stored trajectory.
pub fn replay_q(traj: &Trajectory, center: &Point, r: f64, big_r: f64, budget: u32) -> Option<bool> {
    let (_, rt) = replay_stopping_times(traj, center, r, big_r);
    let sigma = *rt.get(budget as usize)?;
    let cfg = &traj.cfg;
    let x = cfg.index(center);
    let boundary = traj
        .positions
        .iter()
        .position(|&p| on_shell(cfg, p, center, big_r));
    let tau_tilde = boundary.and_then(|b| {
        traj.positions[b..]
            .iter()
            .position(|&p| p == x)
            .map(|k| (b + k) as u64)
    });
    Some(tau_tilde.is_none_or(|tt| tt > sigma))
}

/// Explicit joint law on `{0,1}^k`; outcome `ω` has bit `t` equal to `X_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointTable {
    pub k: usize,
    pub weights: Vec<f64>,
}

impl JointTable {
    pub fn new(k: usize, weights: Vec<f64>, budget: &OracleBudget) -> Result<Self> {
        if k >= usize::BITS as usize || (1usize << k) > budget.max_enumeration {
            return Err(Error::Size(format!("2^{k} outcomes exceed enumeration budget")));
        }
        if weights.len() != 1 << k {
            return Err(Error::Input(format!("expected {} weights", 1usize << k)));
        }
        if weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::Input("negative weight".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Input(format!("weights sum to {total}")));
        }
        Ok(Self { k, weights })
    }

    /// Product law with the given marginals.
    pub fn independent(p: &[f64]) -> Self {
        let k = p.len();
        let weights = (0..1usize << k)
            .map(|w| {
                (0..k)
                    .map(|t| if w >> t & 1 == 1 { p[t] } else { 1.0 - p[t] })
                    .product()
            })
            .collect();
        Self { k, weights }
    }

    pub fn marginals(&self) -> Vec<f64> {
        (0..self.k)
            .map(|t| self.event(|w| w >> t & 1 == 1))
            .collect()
    }

    pub fn event<F: Fn(usize) -> bool>(&self, pred: F) -> f64 {
        self.weights
            .iter()
            .enumerate()
            .filter(|(w, _)| pred(*w))
            .map(|(_, &p)| p)
            .sum()
    }

    pub fn pair_moment(&self, s: usize, t: usize) -> f64 {
        self.event(|w| w >> s & 1 == 1 && w >> t & 1 == 1)
    }

    /// `E[X_t | X_j = v_j for (j, v_j) in given]`.
    pub fn conditional_expectation(&self, t: usize, given: &[(usize, bool)]) -> Result<f64> {
        let matches = |w: usize| given.iter().all(|&(j, v)| (w >> j & 1 == 1) == v);
        let z = self.event(matches);
        if z <= 0.0 {
            return Err(Error::Domain("conditioning event has probability 0".into()));
        }
        Ok(self.event(|w| matches(w) && w >> t & 1 == 1) / z)
    }

    /// `E|E[X_t − p_t | X_s, s ∈ outside]|`.
    pub fn conditional_deviation(&self, t: usize, outside: &[usize]) -> f64 {
        let p = self.marginals()[t];
        let mut total = 0.0;
        for pattern in 0..1usize << outside.len() {
            let given: Vec<(usize, bool)> = outside
                .iter()
                .enumerate()
                .map(|(i, &j)| (j, pattern >> i & 1 == 1))
                .collect();
            let matches = |w: usize| given.iter().all(|&(j, v)| (w >> j & 1 == 1) == v);
            let z = self.event(matches);
            if z > 0.0 {
                let c = self.event(|w| matches(w) && w >> t & 1 == 1) / z;
                total += z * (c - p).abs();
            }
        }
        total
    }

    pub fn tv(&self, other: &JointTable) -> f64 {
        0.5 * self
            .weights
            .iter()
            .zip(&other.weights)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
    }
}

/// Exact quantities of the annulus chain around the origin of a tiny torus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TinyAnnulus {
    pub cfg: LatticeConfig,
    pub r: f64,
    pub big_r: f64,
    /// Offsets of `∂B(0,r)`.
    pub entry: Vec<Vec<i64>>,
    /// Offsets of `∂B(0,R)`.
    pub exit: Vec<Vec<i64>>,
    /// `P(a, b)` exit-to-exit transition matrix, row-major.
    pub transition: Vec<f64>,
    /// `P_a(τ_0 > ρ̃, X(ρ̃) = b)`, row-major.
    pub miss_joint: Vec<f64>,
    /// From entry `e`: `P_e(X(exit) = b)` and the same event avoiding 0.
    pub from_entry: Vec<f64>,
    pub from_entry_miss: Vec<f64>,
    /// First entry law from each exit point, row-major `exit × entry`.
    pub entry_law: Vec<f64>,
    pub pi_tilde: Vec<f64>,
    /// Expected excursion length from each exit point.
    pub length: Vec<f64>,
}

impl TinyAnnulus {
    pub fn new(cfg: &LatticeConfig, r: f64, big_r: f64, budget: &OracleBudget) -> Result<Self> {
        let vol = cfg.volume();
        let origin = Point::origin(cfg.d());
        let d2: Vec<i64> = (0..vol).map(|s| dist2_to(cfg, s, &origin)).collect();
        let inside_r = |s: usize| (d2[s] as f64) <= r * r + 1e-9;
        let inside_big = |s: usize| (d2[s] as f64) <= big_r * big_r + 1e-9;
        let entry_sites: Vec<usize> = (0..vol).filter(|&s| on_shell(cfg, s, &origin, r)).collect();
        let exit_sites: Vec<usize> = (0..vol).filter(|&s| on_shell(cfg, s, &origin, big_r)).collect();
        let q = 1.0 / (2 * cfg.d()) as f64;

        // Phase 1: from outside, first hit of ∂B(0,r).
        let free1: Vec<usize> = (0..vol)
            .filter(|&s| !inside_r(s) && !entry_sites.contains(&s))
            .collect();
        let (k1, ne) = (free1.len(), entry_sites.len());
        let mut pos1 = vec![usize::MAX; vol];
        for (i, &s) in free1.iter().enumerate() {
            pos1[s] = i;
        }
        let mut a1 = vec![0.0; k1 * k1];
        let mut b1 = vec![0.0; k1 * (ne + 1)];
        for (i, &s) in free1.iter().enumerate() {
            a1[i * k1 + i] = 1.0;
            for v in cfg.neighbors(s) {
                if pos1[v] != usize::MAX {
                    a1[i * k1 + pos1[v]] -= q;
                } else if let Some(e) = entry_sites.iter().position(|&x| x == v) {
                    b1[e * k1 + i] += q;
                }
            }
            b1[ne * k1 + i] = 1.0;
        }
        let h1 = dense_solve(k1, a1, b1, budget)?;

        // Phase 2: inside B(0,R), until the first step outside.
        let free2: Vec<usize> = (0..vol).filter(|&s| inside_big(s)).collect();
        let (k2, nx) = (free2.len(), exit_sites.len());
        let mut pos2 = vec![usize::MAX; vol];
        for (i, &s) in free2.iter().enumerate() {
            pos2[s] = i;
        }
        let origin_idx = cfg.index(&origin);
        let build = |kill_origin: bool| -> Result<Vec<f64>> {
            let mut a = vec![0.0; k2 * k2];
            let mut b = vec![0.0; k2 * (nx + 1)];
            for (i, &s) in free2.iter().enumerate() {
                a[i * k2 + i] = 1.0;
                if kill_origin && s == origin_idx {
                    continue;
                }
                for v in cfg.neighbors(s) {
                    if pos2[v] != usize::MAX {
                        a[i * k2 + pos2[v]] -= q;
                    } else {
                        let e = exit_sites.iter().position(|&x| x == v).expect("exit on shell");
                        b[e * k2 + i] += q;
                    }
                }
                b[nx * k2 + i] = 1.0;
            }
            dense_solve(k2, a, b, budget)
        };
        let h2 = build(false)?;
        let h2m = build(true)?;

        let mut from_entry = vec![0.0; ne * nx];
        let mut from_entry_miss = vec![0.0; ne * nx];
        for (e, &s) in entry_sites.iter().enumerate() {
            let i = pos2[s];
            for b in 0..nx {
                from_entry[e * nx + b] = h2[b * k2 + i];
                from_entry_miss[e * nx + b] = h2m[b * k2 + i];
            }
        }
        let mut entry_law = vec![0.0; nx * ne];
        let mut transition = vec![0.0; nx * nx];
        let mut miss_joint = vec![0.0; nx * nx];
        let mut length = vec![0.0; nx];
        for (a, &s) in exit_sites.iter().enumerate() {
            let i = pos1[s];
            let mut len = h1[ne * k1 + i];
            for e in 0..ne {
                let w = h1[e * k1 + i];
                entry_law[a * ne + e] = w;
                len += w * h2[nx * k2 + pos2[entry_sites[e]]];
                for b in 0..nx {
                    transition[a * nx + b] += w * from_entry[e * nx + b];
                    miss_joint[a * nx + b] += w * from_entry_miss[e * nx + b];
                }
            }
            length[a] = len;
        }

        // Stationary law of the exit chain: π̃ (I − P) = 0, Σ π̃ = 1.
        let mut a = vec![0.0; nx * nx];
        for i in 0..nx {
            for j in 0..nx {
                a[i * nx + j] = if i == j { 1.0 } else { 0.0 } - transition[j * nx + i];
            }
        }
        for j in 0..nx {
            a[(nx - 1) * nx + j] = 1.0;
        }
        let mut rhs = vec![0.0; nx];
        rhs[nx - 1] = 1.0;
        let pi_tilde = dense_solve(nx, a, rhs, budget)?;

        let offset = |s: usize| cfg.displacement(&origin, &cfg.point(s));
        Ok(Self {
            cfg: *cfg,
            r,
            big_r,
            entry: entry_sites.iter().map(|&s| offset(s)).collect(),
            exit: exit_sites.iter().map(|&s| offset(s)).collect(),
            transition,
            miss_joint,
            from_entry,
            from_entry_miss,
            entry_law,
            pi_tilde,
            length,
        })
    }

    pub fn exit_index(&self, offset: &[i64]) -> Option<usize> {
        self.exit.iter().position(|o| o[..] == *offset)
    }

    pub fn entry_index(&self, offset: &[i64]) -> Option<usize> {
        self.entry.iter().position(|o| o[..] == *offset)
    }

    /// `f(a,b) = P_a(τ_0 > ρ̃ | X(ρ̃) = b)`.
    pub fn f(&self, a: usize, b: usize) -> f64 {
        let nx = self.exit.len();
        let p = self.transition[a * nx + b];
        if p > 0.0 {
            self.miss_joint[a * nx + b] / p
        } else {
            1.0
        }
    }

    /// `m = −E_ν log f`.
    pub fn m(&self) -> f64 {
        let nx = self.exit.len();
        let mut s = 0.0;
        for a in 0..nx {
            for b in 0..nx {
                let nu = self.pi_tilde[a] * self.transition[a * nx + b];
                if nu > 0.0 {
                    s -= nu * self.f(a, b).ln();
                }
            }
        }
        s
    }

    /// `T = E_π̃[ρ̃_1 − ρ̃_0]`.
    pub fn mean_length(&self) -> f64 {
        self.pi_tilde.iter().zip(&self.length).map(|(p, l)| p * l).sum()
    }

    /// Probability of hitting 0 before exiting, given entry `e` and exit `b`.
    pub fn conditional_hit(&self, e: usize, b: usize) -> f64 {
        let nx = self.exit.len();
        let p = self.from_entry[e * nx + b];
        if p > 0.0 {
            1.0 - self.from_entry_miss[e * nx + b] / p
        } else {
            f64::NAN
        }
    }

    /// Probability of hitting 0 before exiting from entry `e`.
    pub fn hit_from_entry(&self, e: usize) -> f64 {
        let nx = self.exit.len();
        1.0 - (0..nx).map(|b| self.from_entry_miss[e * nx + b]).sum::<f64>()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_solve_small() {
        let a = vec![2.0, 1.0, 1.0, 3.0];
        let x = dense_solve(2, a, vec![3.0, 5.0], &OracleBudget::default()).unwrap();
        assert!((x[0] - 0.8).abs() < 1e-12 && (x[1] - 1.4).abs() < 1e-12);
    }

    #[test]
    fn dense_solve_budget() {
        let b = OracleBudget {
            max_states: 2,
            ..OracleBudget::default()
        };
        assert!(dense_solve(3, vec![0.0; 9], vec![0.0; 3], &b).is_err());
    }

    #[test]
    fn two_site_independent_pair_moment() {
        let t = JointTable::independent(&[0.3, 0.3]);
        assert!((t.pair_moment(0, 1) - 0.09).abs() < 1e-15);
    }

    #[test]
    fn three_site_chain_conditional() {
        // X0 ~ Bern(1/2); X1 = X0 w.p. 3/4; X2 = X1 w.p. 3/4.
        let mut w = vec![0.0; 8];
        for (o, wt) in w.iter_mut().enumerate() {
            let (x0, x1, x2) = (o & 1, o >> 1 & 1, o >> 2 & 1);
            let s1 = if x1 == x0 { 0.75 } else { 0.25 };
            let s2 = if x2 == x1 { 0.75 } else { 0.25 };
            *wt = 0.5 * s1 * s2;
        }
        let t = JointTable::new(3, w, &OracleBudget::default()).unwrap();
        // P(X2=1 | X0=1) = 3/4·3/4 + 1/4·1/4 = 5/8
        assert!((t.conditional_expectation(2, &[(0, true)]).unwrap() - 0.625).abs() < 1e-12);
    }

    #[test]
    fn point_mass_tv() {
        let a = JointTable::new(2, vec![0.0, 0.0, 0.0, 1.0], &OracleBudget::default()).unwrap();
        let b = JointTable::independent(&[0.5, 0.5]);
        assert!((a.tv(&b) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn replay_detects_corruption() {
        let cfg = LatticeConfig::torus(3, 8).unwrap();
        let mut w = WalkState::start_stationary(&cfg, 1, 0).unwrap();
        let traj = record_trajectory(&mut w, 2000);
        let u = replay_uncovered(&traj, 2000);
        let mut bad = traj.clone();
        let site = (0..cfg.volume()).find(|s| !bad.positions.contains(s)).unwrap();
        bad.positions[1000] = site;
        assert_ne!(replay_uncovered(&bad, 2000), u);
    }

    #[test]
    fn tiny_annulus_is_consistent() {
        let cfg = LatticeConfig::torus(3, 12).unwrap();
        let t = TinyAnnulus::new(&cfg, 1.0, 2.5, &OracleBudget::default()).unwrap();
        let nx = t.exit.len();
        for a in 0..nx {
            let row: f64 = t.transition[a * nx..(a + 1) * nx].iter().sum();
            assert!((row - 1.0).abs() < 1e-9);
            for b in 0..nx {
                let f = t.f(a, b);
                assert!(f > 0.0 && f <= 1.0 + 1e-12);
            }
        }
        assert!((t.pi_tilde.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(t.m() > 0.0 && t.mean_length() > 0.0);
    }
}
