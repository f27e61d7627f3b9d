//! Excursions across an annulus `B(x,R) \ B(x,r)`.
//!
//! Stopping times: `ρ_0` is the first visit to `∂B(x,r)`, `ρ̃_k` the first
//! time after `ρ_k` outside `B(x,R)`, and `ρ_{k+1}` the first visit to
//! `∂B(x,r)` after `ρ̃_k`. The exit points `Y_k = X(ρ̃_k)` form a Markov
//! chain on `∂B(0,R)`; excursion `i ≥ 1` is the path from `ρ̃_{i-1}` to `ρ̃_i`.
//!
//! Two trackers share one per-site state machine. [`CenterTracker`] follows a
//! single centre and classifies every position directly. [`SiteAutomata`]
//! follows many centres at once on one trajectory: after a step in direction
//! `e` it only visits the centres for which the new position has just entered
//! `∂B(x,r)`, left `B(x,R)`, or entered `∂B(x,R)`, using precomputed
//! directional offset tables.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{
    ball_boundary_offsets, check_torus_radius, norm2, within_radius, LatticeConfig, Point,
};
use crate::rng;
use crate::stats;
use crate::walk::WalkState;

const NONE: u64 = u64::MAX;

/// Centre and radii of an annulus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnulusSpec {
    pub center: Point,
    pub r: f64,
    #[serde(rename = "R")]
    pub big_r: f64,
}

impl AnnulusSpec {
    /// Requires `0 < r < R`, `2R < n/2` on the torus, and `∂B(x,r) ⊆ B(x,R)`
    /// so that every excursion enters the annulus before leaving it.
    pub fn new(cfg: &LatticeConfig, center: Point, r: f64, big_r: f64) -> Result<Self> {
        cfg.validate(&center)?;
        check_radii(cfg, r, big_r)?;
        Ok(Self { center, r, big_r })
    }
}

pub fn check_radii(cfg: &LatticeConfig, r: f64, big_r: f64) -> Result<()> {
    if !(r > 0.0 && r < big_r) {
        return Err(Error::Geometry(format!("need 0 < r < R, got r={r}, R={big_r}")));
    }
    check_torus_radius(cfg, big_r)?;
    let max_inner = ball_boundary_offsets(cfg.d(), r)
        .iter()
        .map(|o| norm2(o))
        .max()
        .unwrap_or(0);
    if !within_radius(max_inner, big_r) {
        return Err(Error::Geometry(format!(
            "∂B(0,{r}) reaches distance {:.3} > R={big_r}",
            (max_inner as f64).sqrt()
        )));
    }
    Ok(())
}

/// Hyperoctahedral symmetries of `Z^d` (coordinate permutations with sign
/// flips), as maps on integer offsets.
#[derive(Debug, Clone)]
pub struct Symmetries {
    maps: Vec<(Vec<usize>, Vec<i64>)>,
}

impl Symmetries {
    pub fn new(d: usize) -> Self {
        let mut perms = vec![vec![]];
        for k in 0..d {
            let mut next = Vec::new();
            for p in &perms {
                for pos in 0..=p.len() {
                    let mut q: Vec<usize> = p.clone();
                    q.insert(pos, k);
                    next.push(q);
                }
            }
            perms = next;
        }
        let mut maps = Vec::new();
        for p in perms {
            for mask in 0..(1u32 << d) {
                let signs = (0..d).map(|i| if mask >> i & 1 == 1 { -1 } else { 1 }).collect();
                maps.push((p.clone(), signs));
            }
        }
        Self { maps }
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn apply(&self, g: usize, v: &[i64]) -> Vec<i64> {
        let (perm, signs) = &self.maps[g];
        perm.iter().zip(signs).map(|(&i, &s)| s * v[i]).collect()
    }

    /// Canonical representative of a single offset's orbit.
    pub fn canonical(v: &[i64]) -> Vec<i64> {
        let mut a: Vec<i64> = v.iter().map(|x| x.abs()).collect();
        a.sort_unstable();
        a
    }
}

/// Offset tables for annuli of radii `(r, R)` in `Z^d`, shared by every centre.
#[derive(Debug)]
pub struct AnnulusGeometry {
    d: usize,
    r: f64,
    big_r: f64,
    inner_shell: Vec<Vec<i64>>,
    exit_shell: Vec<Vec<i64>>,
    exit_lookup: HashMap<Vec<i64>, u32>,
    /// Per direction: flat offsets `o ∈ ∂B(0,r)` with `o - e ∉ ∂B(0,r)`.
    enter_inner: Vec<Vec<i32>>,
    /// Per direction: `(offset, exit index)` with `o ∉ B(0,R)`, `o - e ∈ B(0,R)`.
    leave_ball: Vec<(Vec<i32>, Vec<u32>)>,
    /// Per direction: offsets `o ∈ ∂B(0,R)` with `o - e ∉ ∂B(0,R)`.
    enter_outer: Vec<Vec<i32>>,
    cube_half: i64,
    cube: Vec<u8>,
    cube_exit: Vec<u32>,
    exit_orbit: Vec<u32>,
    n_exit_orbits: usize,
}

const IN_BALL: u8 = 1;
const INNER: u8 = 2;
const OUTER: u8 = 4;
const CENTER: u8 = 8;

impl AnnulusGeometry {
    pub fn new(d: usize, r: f64, big_r: f64) -> Self {
        let inner_shell = ball_boundary_offsets(d, r);
        let exit_shell = ball_boundary_offsets(d, big_r);
        let exit_lookup: HashMap<Vec<i64>, u32> = exit_shell
            .iter()
            .enumerate()
            .map(|(i, o)| (o.clone(), i as u32))
            .collect();
        let inner_set: std::collections::HashSet<Vec<i64>> = inner_shell.iter().cloned().collect();
        let in_ball = |o: &[i64]| within_radius(norm2(o), big_r);
        let mut enter_inner = Vec::new();
        let mut leave_ball = Vec::new();
        let mut enter_outer = Vec::new();
        for dir in 0..2 * d {
            let (axis, sign) = (dir >> 1, if dir & 1 == 1 { 1 } else { -1 });
            let back = |o: &[i64]| {
                let mut q = o.to_vec();
                q[axis] -= sign;
                q
            };
            let mut ei = Vec::new();
            for o in &inner_shell {
                if !inner_set.contains(&back(o)) {
                    ei.extend(o.iter().map(|&c| c as i32));
                }
            }
            let (mut lb, mut lbi) = (Vec::new(), Vec::new());
            let mut eo = Vec::new();
            for (i, o) in exit_shell.iter().enumerate() {
                let prev = back(o);
                if in_ball(&prev) {
                    lb.extend(o.iter().map(|&c| c as i32));
                    lbi.push(i as u32);
                }
                if !exit_lookup.contains_key(&prev) {
                    eo.extend(o.iter().map(|&c| c as i32));
                }
            }
            enter_inner.push(ei);
            leave_ball.push((lb, lbi));
            enter_outer.push(eo);
        }

        let cube_half = big_r.floor() as i64 + 1;
        let side = (2 * cube_half + 1) as usize;
        let mut cube = vec![0u8; side.pow(d as u32)];
        let mut cube_exit = vec![u32::MAX; cube.len()];
        for (k, cell) in cube.iter_mut().enumerate() {
            let o = cube_offset(k, d, cube_half);
            let n2 = norm2(&o);
            let mut f = 0;
            if in_ball(&o) {
                f |= IN_BALL;
            }
            if inner_set.contains(&o) {
                f |= INNER;
            }
            if let Some(&i) = exit_lookup.get(&o) {
                f |= OUTER;
                cube_exit[k] = i;
            }
            if n2 == 0 {
                f |= CENTER;
            }
            *cell = f;
        }

        let mut orbit_ids: HashMap<Vec<i64>, u32> = HashMap::new();
        let exit_orbit = exit_shell
            .iter()
            .map(|o| {
                let next = orbit_ids.len() as u32;
                *orbit_ids.entry(Symmetries::canonical(o)).or_insert(next)
            })
            .collect();
        Self {
            d,
            r,
            big_r,
            inner_shell,
            exit_shell,
            exit_lookup,
            enter_inner,
            leave_ball,
            enter_outer,
            cube_half,
            cube,
            cube_exit,
            exit_orbit,
            n_exit_orbits: orbit_ids.len(),
        }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn r(&self) -> f64 {
        self.r
    }

    pub fn big_r(&self) -> f64 {
        self.big_r
    }

    /// Offsets of `∂B(0,r)`.
    pub fn inner_shell(&self) -> &[Vec<i64>] {
        &self.inner_shell
    }

    /// Offsets of `∂B(0,R)`, the support of the exit chain.
    pub fn exit_shell(&self) -> &[Vec<i64>] {
        &self.exit_shell
    }

    pub fn exit_index(&self, o: &[i64]) -> Option<u32> {
        self.exit_lookup.get(o).copied()
    }

    /// Symmetry orbit of each exit point.
    pub fn exit_orbit(&self, i: u32) -> u32 {
        self.exit_orbit[i as usize]
    }

    pub fn n_exit_orbits(&self) -> usize {
        self.n_exit_orbits
    }

    #[inline]
    fn classify(&self, disp: &[i64]) -> (u8, u32) {
        let h = self.cube_half;
        let side = 2 * h + 1;
        let mut k = 0i64;
        for &c in disp {
            if c.abs() > h {
                return (0, u32::MAX);
            }
            k = k * side + c + h;
        }
        (self.cube[k as usize], self.cube_exit[k as usize])
    }

    /// Symmetry-orbit ids for ordered pairs of exit points, indexed by
    /// `from * S + to`.
    pub fn pair_orbits(&self) -> (Vec<u32>, usize) {
        let s = self.exit_shell.len();
        let sym = Symmetries::new(self.d);
        let perms: Vec<Vec<u32>> = (0..sym.len())
            .map(|g| {
                self.exit_shell
                    .iter()
                    .map(|o| self.exit_lookup[&sym.apply(g, o)])
                    .collect()
            })
            .collect();
        let mut ids: HashMap<(u32, u32), u32> = HashMap::new();
        let mut out = vec![0u32; s * s];
        for a in 0..s {
            for b in 0..s {
                let canon = perms
                    .iter()
                    .map(|p| (p[a], p[b]))
                    .min()
                    .unwrap();
                let next = ids.len() as u32;
                out[a * s + b] = *ids.entry(canon).or_insert(next);
            }
        }
        (out, ids.len())
    }
}

fn cube_offset(mut k: usize, d: usize, h: i64) -> Vec<i64> {
    let side = (2 * h + 1) as usize;
    let mut o = vec![0i64; d];
    for c in o.iter_mut().rev() {
        *c = (k % side) as i64 - h;
        k /= side;
    }
    o
}

/// One completed excursion `ρ̃_{i-1} → ρ̃_i` at some centre.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Excursion {
    pub slot: u32,
    pub index: u32,
    pub from: u32,
    pub to: u32,
    pub hit_center: bool,
    pub start: u64,
    pub end: u64,
}

#[derive(Debug, Clone, Default)]
struct LogBuf {
    rho: Vec<u64>,
    rho_tilde: Vec<u64>,
    entries: Vec<u32>,
    exits: Vec<u32>,
    hits: Vec<bool>,
}

/// Per-centre automaton state.
#[derive(Debug, Clone)]
struct Slot {
    waiting_exit: bool,
    boundary_time: u64,
    exits: u32,
    last_exit_time: u64,
    last_exit: u32,
    hit_since_exit: bool,
    tau_tilde: u64,
    first_visit: u64,
    sigma: u64,
}

impl Default for Slot {
    fn default() -> Self {
        Self {
            waiting_exit: false,
            boundary_time: NONE,
            exits: 0,
            last_exit_time: NONE,
            last_exit: u32::MAX,
            hit_since_exit: false,
            tau_tilde: NONE,
            first_visit: NONE,
            sigma: NONE,
        }
    }
}

impl Slot {
    #[inline]
    fn visit(&mut self, t: u64) {
        if self.first_visit == NONE {
            self.first_visit = t;
        }
        if self.boundary_time != NONE && self.tau_tilde == NONE {
            self.tau_tilde = t;
        }
        self.hit_since_exit = true;
    }

    #[inline]
    fn enter_inner(&mut self, t: u64, entry: u32, log: Option<&mut LogBuf>) {
        if !self.waiting_exit {
            self.waiting_exit = true;
            if let Some(l) = log {
                l.rho.push(t);
                l.entries.push(entry);
            }
        }
    }

    #[inline]
    fn leave_ball(&mut self, slot: u32, t: u64, exit: u32, budget: u32, log: Option<&mut LogBuf>) -> Option<Excursion> {
        if !self.waiting_exit {
            return None;
        }
        self.waiting_exit = false;
        self.exits += 1;
        let ev = (self.exits >= 2).then(|| Excursion {
            slot,
            index: self.exits - 1,
            from: self.last_exit,
            to: exit,
            hit_center: self.hit_since_exit,
            start: self.last_exit_time,
            end: t,
        });
        if self.exits - 1 == budget && self.sigma == NONE {
            self.sigma = t;
        }
        if let Some(l) = log {
            l.rho_tilde.push(t);
            l.exits.push(exit);
            if self.exits >= 2 {
                l.hits.push(self.hit_since_exit);
            }
        }
        self.last_exit = exit;
        self.last_exit_time = t;
        self.hit_since_exit = false;
        ev
    }

    #[inline]
    fn reach_boundary(&mut self, t: u64) -> bool {
        if self.boundary_time == NONE {
            self.boundary_time = t;
            true
        } else {
            false
        }
    }
}

/// Read-only view of one centre's automaton.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteStatus {
    /// Completed excursions `i ≥ 1`.
    pub completed: u32,
    /// First visit time `τ_x`.
    pub first_visit: Option<u64>,
    /// First hit of `∂B(x,R)`.
    pub boundary_time: Option<u64>,
    /// First visit to `x` at or after `boundary_time`.
    pub tau_tilde: Option<u64>,
    /// Time `ρ̃_A` at which the budget `A` was completed.
    pub sigma: Option<u64>,
}

fn opt(t: u64) -> Option<u64> {
    (t != NONE).then_some(t)
}

impl Slot {
    fn status(&self) -> SiteStatus {
        SiteStatus {
            completed: self.exits.saturating_sub(1),
            first_visit: opt(self.first_visit),
            boundary_time: opt(self.boundary_time),
            tau_tilde: opt(self.tau_tilde),
            sigma: opt(self.sigma),
        }
    }
}

/// Single-centre tracker that classifies every walk position directly.
#[derive(Debug, Clone)]
pub struct CenterTracker {
    geom: Arc<AnnulusGeometry>,
    cfg: LatticeConfig,
    center: Vec<i64>,
    slot: Slot,
    budget: u32,
    log: Option<LogBuf>,
    disp: Vec<i64>,
}

impl CenterTracker {
    pub fn new(cfg: &LatticeConfig, geom: Arc<AnnulusGeometry>, center: &Point, budget: Option<u32>, record: bool) -> Self {
        Self {
            geom,
            cfg: *cfg,
            center: center.coords().to_vec(),
            slot: Slot::default(),
            budget: budget.unwrap_or(u32::MAX),
            log: record.then(LogBuf::default),
            disp: vec![0; cfg.d()],
        }
    }

    /// Pretend an exit at `exit` happened at the walk's current time, so the
    /// next completed excursion starts from it.
    pub fn seed_exit(&mut self, exit: u32, t: u64) {
        self.slot.exits = 1;
        self.slot.last_exit = exit;
        self.slot.last_exit_time = t;
        self.slot.boundary_time = t;
        self.slot.waiting_exit = false;
    }

    #[inline]
    pub fn observe<F: FnMut(&Excursion)>(&mut self, coords: &[i64], t: u64, sink: &mut F) {
        let n = self.cfg.n() as i64;
        for (dst, (&p, &c)) in self.disp.iter_mut().zip(coords.iter().zip(&self.center)) {
            let mut v = p - c;
            if v > n / 2 {
                v -= n;
            } else if v < -(n / 2) {
                v += n;
            }
            *dst = v;
        }
        let (flags, exit) = self.geom.classify(&self.disp);
        if flags & CENTER != 0 {
            self.slot.visit(t);
        }
        if flags & INNER != 0 && !self.slot.waiting_exit {
            let entry = if self.log.is_some() { self.entry_code() } else { 0 };
            self.slot.enter_inner(t, entry, self.log.as_mut());
        }
        if flags & IN_BALL == 0 {
            if let Some(ev) = self.slot.leave_ball(0, t, exit, self.budget, self.log.as_mut()) {
                sink(&ev);
            }
        }
        if flags & OUTER != 0 {
            self.slot.reach_boundary(t);
        }
    }

    fn entry_code(&self) -> u32 {
        self.geom
            .inner_shell
            .iter()
            .position(|o| o[..] == self.disp[..])
            .map(|i| i as u32)
            .unwrap_or(u32::MAX)
    }

    pub fn status(&self) -> SiteStatus {
        self.slot.status()
    }

    pub fn completed(&self) -> u32 {
        self.slot.exits.saturating_sub(1)
    }

    fn take_log(&mut self) -> LogBuf {
        self.log.take().unwrap_or_default()
    }
}

/// Many centres tracked on one trajectory.
#[derive(Debug, Clone)]
pub struct SiteAutomata {
    geom: Arc<AnnulusGeometry>,
    cfg: LatticeConfig,
    slot_of: Vec<u32>,
    sites: Vec<usize>,
    slots: Vec<Slot>,
    logs: Option<Vec<LogBuf>>,
    budget: u32,
    unreached: usize,
    wrap: Vec<Vec<usize>>,
    started: bool,
}

impl SiteAutomata {
    pub fn new(
        cfg: &LatticeConfig,
        geom: Arc<AnnulusGeometry>,
        sites: &[usize],
        budget: Option<u32>,
        record_logs: bool,
    ) -> Result<Self> {
        if !cfg.is_torus() {
            return Err(Error::Config("site automata run on the torus".into()));
        }
        let volume = cfg.volume();
        let mut slot_of = vec![u32::MAX; volume];
        let mut uniq = Vec::with_capacity(sites.len());
        for &s in sites {
            if s >= volume {
                return Err(Error::Input(format!("site {s} outside lattice")));
            }
            if slot_of[s] == u32::MAX {
                slot_of[s] = uniq.len() as u32;
                uniq.push(s);
            }
        }
        let n = cfg.n();
        let d = cfg.d();
        let wrap = (0..d)
            .map(|a| {
                let stride = n.pow((d - 1 - a) as u32);
                (0..3 * n).map(|v| (v % n) * stride).collect()
            })
            .collect();
        let count = uniq.len();
        Ok(Self {
            geom,
            cfg: *cfg,
            slot_of,
            sites: uniq,
            slots: vec![Slot::default(); count],
            logs: record_logs.then(|| vec![LogBuf::default(); count]),
            budget: budget.unwrap_or(u32::MAX),
            unreached: count,
            wrap,
            started: false,
        })
    }

    /// Tracks every site of the torus.
    pub fn full(cfg: &LatticeConfig, geom: Arc<AnnulusGeometry>, budget: Option<u32>) -> Result<Self> {
        let sites: Vec<usize> = (0..cfg.volume()).collect();
        Self::new(cfg, geom, &sites, budget, false)
    }

    pub fn sites(&self) -> &[usize] {
        &self.sites
    }

    pub fn geometry(&self) -> &Arc<AnnulusGeometry> {
        &self.geom
    }

    pub fn slot(&self, site: usize) -> Option<usize> {
        let s = self.slot_of[site];
        (s != u32::MAX).then_some(s as usize)
    }

    pub fn status(&self, slot: usize) -> SiteStatus {
        self.slots[slot].status()
    }

    pub fn completed(&self, slot: usize) -> u32 {
        self.slots[slot].exits.saturating_sub(1)
    }

    pub fn all_sigma_determined(&self) -> bool {
        self.slots.iter().all(|s| s.sigma != NONE)
    }

    pub fn min_completed(&self) -> u32 {
        self.slots
            .iter()
            .map(|s| s.exits.saturating_sub(1))
            .min()
            .unwrap_or(0)
    }

    #[inline]
    fn site_minus(&self, p: &[i64], off: &[i32]) -> usize {
        let n = self.cfg.n() as i64;
        let mut idx = 0;
        for (a, (&pc, &oc)) in p.iter().zip(off).enumerate() {
            idx += self.wrap[a][(pc - oc as i64 + n) as usize];
        }
        idx
    }

    fn start(&mut self, walk: &WalkState) {
        let t = walk.time();
        let p = walk.coords().to_vec();
        let d = self.cfg.d();
        let mut off = vec![0i32; d];
        if let Some(s) = self.slot(walk.position()) {
            self.slots[s].visit(t);
        }
        for (k, o) in self.geom.inner_shell.iter().enumerate() {
            for (dst, &c) in off.iter_mut().zip(o) {
                *dst = c as i32;
            }
            if let Some(s) = self.slot(self.site_minus(&p, &off)) {
                let log = self.logs.as_mut().map(|l| &mut l[s]);
                self.slots[s].enter_inner(t, k as u32, log);
            }
        }
        for o in self.geom.exit_shell.iter() {
            for (dst, &c) in off.iter_mut().zip(o) {
                *dst = c as i32;
            }
            if let Some(s) = self.slot(self.site_minus(&p, &off)) {
                if self.slots[s].reach_boundary(t) {
                    self.unreached -= 1;
                }
            }
        }
        self.started = true;
    }

    /// Runs the walk until absolute time `until`, feeding completed
    /// excursions to `sink`.
    pub fn advance<F: FnMut(&Excursion)>(&mut self, walk: &mut WalkState, until: u64, sink: &mut F) {
        if !self.started {
            self.start(walk);
        }
        let d = self.cfg.d();
        let geom = Arc::clone(&self.geom);
        while walk.time() < until {
            let Some(dir) = walk.step() else { continue };
            let t = walk.time();
            let p = walk.coords();
            if let Some(s) = self.slot(walk.position()) {
                self.slots[s].visit(t);
            }
            let table = &geom.enter_inner[dir];
            for off in table.chunks_exact(d) {
                let x = self.site_minus(p, off);
                let s = self.slot_of[x];
                if s != u32::MAX {
                    let slot = &mut self.slots[s as usize];
                    if !slot.waiting_exit {
                        let entry = self.logs.as_ref().map_or(0, |_| inner_index(&geom, off));
                        let log = self.logs.as_mut().map(|l| &mut l[s as usize]);
                        slot.enter_inner(t, entry, log);
                    }
                }
            }
            let (offs, exits) = &geom.leave_ball[dir];
            for (off, &e) in offs.chunks_exact(d).zip(exits) {
                let x = self.site_minus(p, off);
                let s = self.slot_of[x];
                if s != u32::MAX {
                    let log = self.logs.as_mut().map(|l| &mut l[s as usize]);
                    if let Some(ev) = self.slots[s as usize].leave_ball(s, t, e, self.budget, log) {
                        sink(&ev);
                    }
                }
            }
            if self.unreached > 0 {
                for off in geom.enter_outer[dir].chunks_exact(d) {
                    let x = self.site_minus(p, off);
                    let s = self.slot_of[x];
                    if s != u32::MAX && self.slots[s as usize].reach_boundary(t) {
                        self.unreached -= 1;
                    }
                }
            }
        }
    }

    /// Excursion log of one tracked centre (requires `record_logs`).
    pub fn log(&self, slot: usize, horizon: u64, cfg: &LatticeConfig) -> Option<ExcursionLog> {
        let buf = self.logs.as_ref()?.get(slot)?;
        let center = cfg.point(self.sites[slot]);
        Some(build_log(&self.geom, cfg, &center, buf, &self.slots[slot], horizon))
    }
}

fn inner_index(geom: &AnnulusGeometry, off: &[i32]) -> u32 {
    geom.inner_shell
        .iter()
        .position(|o| o.iter().zip(off).all(|(&a, &b)| a == b as i64))
        .map(|i| i as u32)
        .unwrap_or(u32::MAX)
}

/// Stopping times and hitting points of the excursions at one centre.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcursionLog {
    pub annulus: AnnulusSpec,
    pub rho: Vec<u64>,
    pub rho_tilde: Vec<u64>,
    pub entry_points: Vec<Point>,
    pub exit_points: Vec<Point>,
    /// Whether the centre was visited during excursion `i ≥ 1`.
    pub center_hit: Vec<bool>,
    pub boundary_time: Option<u64>,
    pub tau_tilde: Option<u64>,
    pub horizon: u64,
    /// An excursion was in progress at the horizon.
    pub truncated: bool,
}

fn build_log(geom: &AnnulusGeometry, cfg: &LatticeConfig, center: &Point, buf: &LogBuf, slot: &Slot, horizon: u64) -> ExcursionLog {
    let to_point = |o: &[i64]| cfg.translate(center, o).expect("torus translate");
    ExcursionLog {
        annulus: AnnulusSpec {
            center: center.clone(),
            r: geom.r,
            big_r: geom.big_r,
        },
        rho: buf.rho.clone(),
        rho_tilde: buf.rho_tilde.clone(),
        entry_points: buf
            .entries
            .iter()
            .map(|&k| to_point(&geom.inner_shell[k as usize]))
            .collect(),
        exit_points: buf
            .exits
            .iter()
            .map(|&k| to_point(&geom.exit_shell[k as usize]))
            .collect(),
        center_hit: buf.hits.clone(),
        boundary_time: opt(slot.boundary_time),
        tau_tilde: opt(slot.tau_tilde),
        horizon,
        truncated: slot.waiting_exit || buf.rho.len() > buf.rho_tilde.len(),
    }
}

/// Logs every stopping time at `a.center` from the walk's current state up
/// to absolute time `horizon`.
pub fn record_excursions(walk: &mut WalkState, a: &AnnulusSpec, horizon: u64) -> Result<ExcursionLog> {
    let cfg = *walk.config();
    check_radii(&cfg, a.r, a.big_r)?;
    let geom = Arc::new(AnnulusGeometry::new(cfg.d(), a.r, a.big_r));
    let mut tr = CenterTracker::new(&cfg, Arc::clone(&geom), &a.center, None, true);
    let mut sink = |_: &Excursion| {};
    tr.observe(walk.coords(), walk.time(), &mut sink);
    while walk.time() < horizon {
        if walk.step().is_some() {
            let t = walk.time();
            tr.observe(walk.coords(), t, &mut sink);
        }
    }
    let buf = tr.take_log();
    Ok(build_log(&geom, &cfg, &a.center, &buf, &tr.slot, horizon))
}

/// Excursion count at time `t`, or undetermined when `t` exceeds the log.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExcursionCount {
    Determined(u64),
    Undetermined,
}

/// `N_x(r,R,t)`: completed excursions `i ≥ 1` with `ρ̃_i ≤ t`, i.e. the
/// largest `k` with `Σ_{i=1}^{k} (ρ̃_i − ρ̃_{i−1}) ≤ t − ρ̃_0`.
pub fn count_excursions(log: &ExcursionLog, t: u64) -> ExcursionCount {
    if t > log.horizon {
        return ExcursionCount::Undetermined;
    }
    let completed = log.rho_tilde.iter().skip(1).take_while(|&&s| s <= t).count();
    ExcursionCount::Determined(completed as u64)
}

/// Empirical exit-chain law on `∂B(0,R)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExitChainEstimate {
    pub support: Vec<Vec<i64>>,
    /// Stationary weights per exit point, symmetrised over orbits.
    pub pi_tilde: Vec<f64>,
    /// Raw exit counts per exit point.
    pub exit_counts: Vec<u64>,
    /// Sparse pair law `ν(a, b)` (only observed pairs), raw frequencies.
    pub pair_law: HashMap<(u32, u32), f64>,
    /// `max over starts` of TV(law(Y_k), π̃) aggregated over orbits, k = 1..
    pub mixing_profile: Vec<f64>,
    pub samples: u64,
    pub burn_in: u32,
    /// Fewer than ten samples per support point.
    pub wide_ci: bool,
}

/// Options for [`exit_chain`].
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ExitChainOptions {
    pub profile_steps: usize,
    pub profile_starts: usize,
    pub profile_runs: usize,
}

impl Default for ExitChainOptions {
    fn default() -> Self {
        Self {
            profile_steps: 6,
            profile_starts: 3,
            profile_runs: 1500,
        }
    }
}

/// Runs `auto` along `walk` until every tracked centre has completed at least
/// `burn_in` excursions. Events produced meanwhile are discarded.
pub fn warm_up(auto: &mut SiteAutomata, walk: &mut WalkState, burn_in: u32) {
    while auto.min_completed() < burn_in {
        let until = walk.time() + 10_000;
        auto.advance(walk, until, &mut |_: &Excursion| {});
    }
}

/// Feeds `sink` every excursion, over all centres of the torus, that ends in
/// the time window following a warm-up in which each centre completes
/// `burn_in` excursions. Collection stops once `quota` events have been seen.
///
/// Taking all events in a common time window (rather than each centre's
/// events past its own burn-in) keeps the pooled stream unbiased: centres
/// the walk happens to be near do not get over-represented.
pub fn for_each_stationary_excursion<F: FnMut(&Excursion)>(
    cfg: &LatticeConfig,
    geom: &Arc<AnnulusGeometry>,
    quota: u64,
    burn_in: u32,
    seed: u64,
    replica: u64,
    mut sink: F,
) -> Result<()> {
    let mut walk = WalkState::start_stationary(cfg, seed, replica)?;
    let mut auto = SiteAutomata::full(cfg, Arc::clone(geom), None)?;
    warm_up(&mut auto, &mut walk, burn_in);
    let mut seen = 0u64;
    while seen < quota {
        let until = walk.time() + 5_000;
        auto.advance(&mut walk, until, &mut |ev: &Excursion| {
            if seen < quota {
                sink(ev);
                seen += 1;
            }
        });
    }
    Ok(())
}

/// Excursions collected from every centre of the torus along one stationary
/// trajectory; see [`for_each_stationary_excursion`].
pub fn stationary_excursions(
    cfg: &LatticeConfig,
    geom: &Arc<AnnulusGeometry>,
    n_excursions: u64,
    burn_in: u32,
    seed: u64,
    replica: u64,
) -> Result<Vec<Excursion>> {
    let mut out = Vec::with_capacity(n_excursions as usize);
    for_each_stationary_excursion(cfg, geom, n_excursions, burn_in, seed, replica, |ev| {
        out.push(*ev)
    })?;
    Ok(out)
}

/// Walks started at centre + `start` (outside `B(0,R)`), recording the
/// orbit of the exit point of each of the next `steps` excursions.
fn exit_orbit_paths(
    cfg: &LatticeConfig,
    geom: &Arc<AnnulusGeometry>,
    start: u32,
    steps: usize,
    runs: usize,
    seed: u64,
) -> Result<Vec<Vec<u64>>> {
    let center = Point::origin(cfg.d());
    let start_point = cfg
        .translate(&center, &geom.exit_shell[start as usize])
        .expect("torus");
    let mut counts = vec![vec![0u64; geom.n_exit_orbits()]; steps];
    for run in 0..runs {
        let mut walk = WalkState::start_at(cfg, &start_point, seed, run as u64)?;
        let mut tr = CenterTracker::new(cfg, Arc::clone(geom), &center, None, false);
        tr.seed_exit(start, 0);
        let mut k = 0usize;
        while k < steps {
            walk.step();
            let mut done = None;
            tr.observe(walk.coords(), walk.time(), &mut |ev: &Excursion| done = Some(ev.to));
            if let Some(to) = done {
                counts[k][geom.exit_orbit(to) as usize] += 1;
                k += 1;
            }
        }
    }
    Ok(counts)
}

/// Empirical `π̃`, pair law `ν` and mixing profile of the exit chain.
pub fn exit_chain(
    cfg: &LatticeConfig,
    a: &AnnulusSpec,
    n_excursions: u64,
    seed: u64,
    opts: ExitChainOptions,
) -> Result<ExitChainEstimate> {
    check_radii(cfg, a.r, a.big_r)?;
    let geom = Arc::new(AnnulusGeometry::new(cfg.d(), a.r, a.big_r));
    let s = geom.exit_shell.len();
    let norb = geom.n_exit_orbits();
    let orbit_size: Vec<f64> = {
        let mut v = vec![0.0; norb];
        for i in 0..s {
            v[geom.exit_orbit(i as u32) as usize] += 1.0;
        }
        v
    };

    // Mixing profile first, from orbit representatives spread over the shell.
    let mut reps: Vec<u32> = Vec::new();
    let mut seen = vec![false; norb];
    for i in 0..s as u32 {
        let o = geom.exit_orbit(i) as usize;
        if !seen[o] {
            seen[o] = true;
            reps.push(i);
        }
    }
    let step = (reps.len() / opts.profile_starts.max(1)).max(1);
    let starts: Vec<u32> = reps.iter().step_by(step).take(opts.profile_starts).copied().collect();
    let mut paths = Vec::new();
    for (k, &st) in starts.iter().enumerate() {
        paths.push(exit_orbit_paths(
            cfg,
            &geom,
            st,
            opts.profile_steps,
            opts.profile_runs,
            rng::stream_seed(seed, 1000 + k as u64),
        )?);
    }
    let mixing_steps_guess = 1u32;
    let burn_in = 50u32.max(10 * mixing_steps_guess);

    let events = stationary_excursions(cfg, &geom, n_excursions, burn_in, seed, 0)?;
    let mut exit_counts = vec![0u64; s];
    let mut pair_counts: HashMap<(u32, u32), u64> = HashMap::new();
    for ev in &events {
        exit_counts[ev.to as usize] += 1;
        *pair_counts.entry((ev.from, ev.to)).or_default() += 1;
    }
    let total = events.len().max(1) as f64;
    let mut orbit_mass = vec![0.0; norb];
    for (i, &c) in exit_counts.iter().enumerate() {
        orbit_mass[geom.exit_orbit(i as u32) as usize] += c as f64 / total;
    }
    let pi_tilde: Vec<f64> = (0..s)
        .map(|i| {
            let o = geom.exit_orbit(i as u32) as usize;
            orbit_mass[o] / orbit_size[o]
        })
        .collect();
    let pair_law = pair_counts
        .into_iter()
        .map(|(k, c)| (k, c as f64 / total))
        .collect();

    let mixing_profile = (0..opts.profile_steps)
        .map(|k| {
            paths
                .iter()
                .map(|p| {
                    let runs: u64 = p[k].iter().sum();
                    0.5 * p[k]
                        .iter()
                        .zip(&orbit_mass)
                        .map(|(&c, &m)| (c as f64 / runs as f64 - m).abs())
                        .sum::<f64>()
                })
                .fold(0.0, f64::max)
        })
        .collect();

    Ok(ExitChainEstimate {
        support: geom.exit_shell.clone(),
        pi_tilde,
        exit_counts,
        pair_law,
        mixing_profile,
        samples: events.len() as u64,
        burn_in,
        wide_ci: (events.len() as f64) < 10.0 * s as f64,
    })
}

/// Batch-means estimate of `T_{r,R} = E_π̃[ρ̃_1 − ρ̃_0]`.
pub fn estimate_t(cfg: &LatticeConfig, a: &AnnulusSpec, n_excursions: u64, seed: u64) -> Result<(f64, f64)> {
    check_radii(cfg, a.r, a.big_r)?;
    let geom = Arc::new(AnnulusGeometry::new(cfg.d(), a.r, a.big_r));
    let events = stationary_excursions(cfg, &geom, n_excursions, 50, seed, 0)?;
    Ok(mean_length(&events))
}

pub fn mean_length(events: &[Excursion]) -> (f64, f64) {
    let mut by_time: Vec<&Excursion> = events.iter().collect();
    by_time.sort_by_key(|e| e.end);
    let lens: Vec<f64> = by_time.iter().map(|e| (e.end - e.start) as f64).collect();
    stats::batch_means(&lens, 30)
}

/// Tail report of `P(N_x(r,R,t) ∉ [A, A'])` across replicas.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConcentrationReport {
    pub t: u64,
    pub t_hat: f64,
    pub replicas: u64,
    pub counts: Vec<u64>,
    pub rows: Vec<ConcentrationRow>,
    /// Gaussian-tail envelope with unknown constants.
    pub bound_shape: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConcentrationRow {
    pub delta: f64,
    pub lower: f64,
    pub upper: f64,
    pub violation_frequency: f64,
}

pub fn concentration_check(
    cfg: &LatticeConfig,
    a: &AnnulusSpec,
    t: u64,
    deltas: &[f64],
    t_hat: f64,
    replicas: u64,
    seed: u64,
) -> Result<ConcentrationReport> {
    check_radii(cfg, a.r, a.big_r)?;
    let geom = Arc::new(AnnulusGeometry::new(cfg.d(), a.r, a.big_r));
    let mut counts = Vec::with_capacity(replicas as usize);
    for rep in 0..replicas {
        let mut walk = WalkState::start_stationary(cfg, seed, rep)?;
        let mut tr = CenterTracker::new(cfg, Arc::clone(&geom), &a.center, None, false);
        let mut sink = |_: &Excursion| {};
        tr.observe(walk.coords(), 0, &mut sink);
        while walk.time() < t {
            walk.step();
            tr.observe(walk.coords(), walk.time(), &mut sink);
        }
        counts.push(tr.completed() as u64);
    }
    let rows = deltas
        .iter()
        .map(|&delta| {
            let lower = t as f64 / ((1.0 + delta) * t_hat);
            let upper = if delta < 1.0 {
                t as f64 / ((1.0 - delta) * t_hat)
            } else {
                f64::INFINITY
            };
            let viol = counts
                .iter()
                .filter(|&&c| (c as f64) < lower || (c as f64) > upper)
                .count();
            ConcentrationRow {
                delta,
                lower,
                upper,
                violation_frequency: viol as f64 / replicas.max(1) as f64,
            }
        })
        .collect();
    Ok(ConcentrationReport {
        t,
        t_hat,
        replicas,
        counts,
        rows,
        bound_shape: format!(
            "n^psi * exp(-c * delta^2 * r^(d-2) / n^psi) + exp(-c * n^psi) with r = {}, d = {}, c unknown",
            a.r,
            cfg.d()
        ),
    })
}
