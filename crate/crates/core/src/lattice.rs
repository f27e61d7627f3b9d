//! Geometry of the torus `Z_n^d` and of the box `[0,n]^d ∩ Z^d`.
//!
//! Sites are addressed by a row-major linear index (last coordinate fastest).
//! Point sets store indices; balls are Euclidean and enumerated by scanning
//! the bounding cube.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Geometry {
    Torus,
    BoxWithBoundary,
}

/// Dimension, side length and geometry of a lattice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatticeConfig {
    d: usize,
    n: usize,
    geometry: Geometry,
}

impl LatticeConfig {
    pub fn new(d: usize, n: usize, geometry: Geometry) -> Result<Self> {
        if d < 3 {
            return Err(Error::Config(format!("dimension must be >= 3, got {d}")));
        }
        if n < 4 {
            return Err(Error::Config(format!("side length must be >= 4, got {n}")));
        }
        let side = match geometry {
            Geometry::Torus => n,
            Geometry::BoxWithBoundary => n + 1,
        };
        if (side as f64).powi(d as i32) > (u32::MAX as f64) {
            return Err(Error::Config(format!("lattice {side}^{d} too large to index")));
        }
        Ok(Self { d, n, geometry })
    }

    pub fn torus(d: usize, n: usize) -> Result<Self> {
        Self::new(d, n, Geometry::Torus)
    }

    pub fn boxed(d: usize, n: usize) -> Result<Self> {
        Self::new(d, n, Geometry::BoxWithBoundary)
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    pub fn is_torus(&self) -> bool {
        self.geometry == Geometry::Torus
    }

    /// Number of coordinate values per axis: `n` on the torus, `n + 1` in the box.
    pub fn side(&self) -> usize {
        match self.geometry {
            Geometry::Torus => self.n,
            Geometry::BoxWithBoundary => self.n + 1,
        }
    }

    pub fn volume(&self) -> usize {
        self.side().pow(self.d as u32)
    }

    pub fn validate(&self, p: &Point) -> Result<()> {
        if p.dim() != self.d {
            return Err(Error::Config(format!(
                "point has dimension {}, lattice has {}",
                p.dim(),
                self.d
            )));
        }
        let side = self.side() as i64;
        if p.coords().iter().any(|&c| c < 0 || c >= side) {
            return Err(Error::Config(format!("point {:?} outside lattice", p.coords())));
        }
        Ok(())
    }

    pub fn index(&self, p: &Point) -> usize {
        let side = self.side();
        p.coords()
            .iter()
            .fold(0usize, |acc, &c| acc * side + c as usize)
    }

    pub fn point(&self, mut idx: usize) -> Point {
        let side = self.side();
        let mut coords = vec![0i64; self.d];
        for c in coords.iter_mut().rev() {
            *c = (idx % side) as i64;
            idx /= side;
        }
        Point::new(coords)
    }

    /// Reduces arbitrary integer coordinates onto the torus.
    pub fn wrap(&self, coords: &[i64]) -> Point {
        let n = self.n as i64;
        Point::new(coords.iter().map(|&c| c.rem_euclid(n)).collect())
    }

    /// Translate `p` by `v`, wrapping on the torus. In the box the result is
    /// `None` when it leaves `[0,n]^d`.
    pub fn translate(&self, p: &Point, v: &[i64]) -> Option<Point> {
        let raw: Vec<i64> = p.coords().iter().zip(v).map(|(a, b)| a + b).collect();
        match self.geometry {
            Geometry::Torus => Some(self.wrap(&raw)),
            Geometry::BoxWithBoundary => {
                let side = self.side() as i64;
                raw.iter()
                    .all(|&c| (0..side).contains(&c))
                    .then(|| Point::new(raw))
            }
        }
    }

    /// Minimal-image displacement `b - a` (plain difference in the box).
    pub fn displacement(&self, a: &Point, b: &Point) -> Vec<i64> {
        let n = self.n as i64;
        a.coords()
            .iter()
            .zip(b.coords())
            .map(|(&x, &y)| {
                let diff = y - x;
                match self.geometry {
                    Geometry::Torus => {
                        let m = diff.rem_euclid(n);
                        if m > n / 2 {
                            m - n
                        } else {
                            m
                        }
                    }
                    Geometry::BoxWithBoundary => diff,
                }
            })
            .collect()
    }

    /// Squared wrapped distance as an exact integer.
    pub fn dist2(&self, a: &Point, b: &Point) -> i64 {
        let n = self.n as i64;
        a.coords()
            .iter()
            .zip(b.coords())
            .map(|(&x, &y)| {
                let diff = (x - y).abs();
                let diff = match self.geometry {
                    Geometry::Torus => diff.min(n - diff),
                    Geometry::BoxWithBoundary => diff,
                };
                diff * diff
            })
            .sum()
    }

    /// Nearest-neighbour sites of `idx`.
    pub fn neighbors(&self, idx: usize) -> Vec<usize> {
        let p = self.point(idx);
        let mut out = Vec::with_capacity(2 * self.d);
        let mut v = vec![0i64; self.d];
        for axis in 0..self.d {
            for sign in [-1i64, 1] {
                v[axis] = sign;
                if let Some(q) = self.translate(&p, &v) {
                    out.push(self.index(&q));
                }
                v[axis] = 0;
            }
        }
        out
    }

    /// True for sites on `∂[0,n]^d` (always false on the torus).
    pub fn on_box_boundary(&self, p: &Point) -> bool {
        match self.geometry {
            Geometry::Torus => false,
            Geometry::BoxWithBoundary => {
                let n = self.n as i64;
                p.coords().iter().any(|&c| c == 0 || c == n)
            }
        }
    }
}

/// A lattice point. On the torus coordinates lie in `[0,n)`, in the box in `[0,n]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Point(Vec<i64>);

pub type TorusPoint = Point;

impl Point {
    pub fn new(coords: Vec<i64>) -> Self {
        Self(coords)
    }

    pub fn origin(d: usize) -> Self {
        Self(vec![0; d])
    }

    pub fn coords(&self) -> &[i64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Wrapped Euclidean distance.
pub fn torus_dist(a: &Point, b: &Point, cfg: &LatticeConfig) -> Result<f64> {
    cfg.validate(a)?;
    cfg.validate(b)?;
    Ok((cfg.dist2(a, b) as f64).sqrt())
}

/// Squared-radius membership test shared by every ball construction.
#[inline]
pub fn within_radius(norm2: i64, radius: f64) -> bool {
    (norm2 as f64) <= radius * radius + 1e-9
}

/// Offsets `o ∈ Z^d` with `|o| ≤ radius`, in lexicographic order.
pub fn ball_offsets(d: usize, radius: f64) -> Vec<Vec<i64>> {
    let k = radius.max(0.0).floor() as i64;
    let mut out = Vec::new();
    for_each_in_cube(d, k, |o| {
        if within_radius(norm2(o), radius) {
            out.push(o.to_vec());
        }
    });
    out
}

/// Offsets on the outer boundary of the Euclidean ball of `Z^d`.
pub fn ball_boundary_offsets(d: usize, radius: f64) -> Vec<Vec<i64>> {
    let k = radius.max(0.0).floor() as i64 + 1;
    let mut out = Vec::new();
    for_each_in_cube(d, k, |o| {
        if within_radius(norm2(o), radius) {
            return;
        }
        let mut q = o.to_vec();
        let touches = (0..d).any(|axis| {
            [-1i64, 1].iter().any(|&s| {
                q[axis] += s;
                let inside = within_radius(norm2(&q), radius);
                q[axis] -= s;
                inside
            })
        });
        if touches {
            out.push(o.to_vec());
        }
    });
    out
}

pub fn norm2(v: &[i64]) -> i64 {
    v.iter().map(|c| c * c).sum()
}

fn for_each_in_cube(d: usize, k: i64, mut f: impl FnMut(&[i64])) {
    let mut o = vec![-k; d];
    loop {
        f(&o);
        let mut axis = d;
        loop {
            if axis == 0 {
                return;
            }
            axis -= 1;
            if o[axis] < k {
                o[axis] += 1;
                break;
            }
            o[axis] = -k;
        }
    }
}

/// Largest radius a torus ball may have: `2R < n/2`.
pub fn check_torus_radius(cfg: &LatticeConfig, radius: f64) -> Result<()> {
    if cfg.is_torus() && 2.0 * radius >= cfg.n() as f64 / 2.0 {
        return Err(Error::Geometry(format!(
            "radius {radius} too large for unambiguous embedding in Z_{}^{} (need 2R < n/2)",
            cfg.n(),
            cfg.d()
        )));
    }
    Ok(())
}

/// Closed Euclidean ball `{y : dist(center, y) ≤ radius}`.
pub fn ball(center: &Point, radius: f64, cfg: &LatticeConfig) -> Result<PointSet> {
    cfg.validate(center)?;
    if !(radius >= 0.0) {
        return Err(Error::Geometry(format!("negative radius {radius}")));
    }
    check_torus_radius(cfg, radius)?;
    let idx: Vec<usize> = ball_offsets(cfg.d(), radius)
        .iter()
        .filter_map(|o| cfg.translate(center, o))
        .map(|p| cfg.index(&p))
        .collect();
    Ok(PointSet::sparse(cfg.volume(), idx))
}

/// `∂A = {y ∉ A : y adjacent to some x ∈ A}`; empty when `A` is the whole lattice.
pub fn outer_boundary(a: &PointSet, cfg: &LatticeConfig) -> PointSet {
    let mut out = Vec::new();
    for x in a.iter() {
        for y in cfg.neighbors(x) {
            if !a.contains(y) {
                out.push(y);
            }
        }
    }
    PointSet::sparse(cfg.volume(), out)
}

/// A set of lattice sites with O(1) membership.
#[derive(Debug, Clone)]
pub enum PointSet {
    /// Bitset over the whole lattice.
    Dense {
        bits: Vec<u64>,
        len: usize,
        universe: usize,
    },
    /// Sorted indices plus a hash index.
    Sparse {
        sorted: Vec<usize>,
        lookup: HashSet<usize>,
        universe: usize,
    },
}

impl PointSet {
    pub fn empty_dense(universe: usize) -> Self {
        Self::Dense {
            bits: vec![0; universe.div_ceil(64)],
            len: 0,
            universe,
        }
    }

    pub fn full(universe: usize) -> Self {
        let mut s = Self::empty_dense(universe);
        for i in 0..universe {
            s.insert(i);
        }
        s
    }

    pub fn sparse(universe: usize, mut idx: Vec<usize>) -> Self {
        idx.sort_unstable();
        idx.dedup();
        let lookup = idx.iter().copied().collect();
        Self::Sparse {
            sorted: idx,
            lookup,
            universe,
        }
    }

    pub fn universe(&self) -> usize {
        match self {
            Self::Dense { universe, .. } | Self::Sparse { universe, .. } => *universe,
        }
    }

    pub fn contains(&self, i: usize) -> bool {
        match self {
            Self::Dense { bits, universe, .. } => {
                i < *universe && bits[i / 64] >> (i % 64) & 1 == 1
            }
            Self::Sparse { lookup, .. } => lookup.contains(&i),
        }
    }

    /// Inserts into a dense set; sparse sets are rebuilt.
    pub fn insert(&mut self, i: usize) -> bool {
        match self {
            Self::Dense { bits, len, .. } => {
                let word = &mut bits[i / 64];
                let mask = 1u64 << (i % 64);
                if *word & mask == 0 {
                    *word |= mask;
                    *len += 1;
                    true
                } else {
                    false
                }
            }
            Self::Sparse {
                sorted, lookup, ..
            } => {
                if lookup.insert(i) {
                    let pos = sorted.partition_point(|&x| x < i);
                    sorted.insert(pos, i);
                    true
                } else {
                    false
                }
            }
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Self::Dense { len, .. } => *len,
            Self::Sparse { sorted, .. } => sorted.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Indices in increasing order.
    pub fn iter(&self) -> Box<dyn Iterator<Item = usize> + '_> {
        match self {
            Self::Dense { bits, universe, .. } => {
                let universe = *universe;
                Box::new(
                    bits.iter()
                        .enumerate()
                        .flat_map(|(w, &word)| {
                            let mut word = word;
                            std::iter::from_fn(move || {
                                if word == 0 {
                                    return None;
                                }
                                let tz = word.trailing_zeros() as usize;
                                word &= word - 1;
                                Some(w * 64 + tz)
                            })
                        })
                        .take_while(move |&i| i < universe),
                )
            }
            Self::Sparse { sorted, .. } => Box::new(sorted.iter().copied()),
        }
    }

    pub fn to_vec(&self) -> Vec<usize> {
        self.iter().collect()
    }

    pub fn is_subset(&self, other: &PointSet) -> bool {
        self.iter().all(|i| other.contains(i))
    }

    pub fn symmetric_difference_len(&self, other: &PointSet) -> usize {
        self.iter().filter(|&i| !other.contains(i)).count()
            + other.iter().filter(|&i| !self.contains(i)).count()
    }
}

impl PartialEq for PointSet {
    fn eq(&self, other: &Self) -> bool {
        self.len() == other.len() && self.is_subset(other)
    }
}
