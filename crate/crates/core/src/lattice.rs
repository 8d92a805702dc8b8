//! Finite boxes in `Z^d`, nearest-neighbour edges, and points of the metric
//! (cable) graph in which every edge is an interval of length 1/2.
//!
//! Conventions frozen here and relied on everywhere else:
//!
//! * boxes are half-open products `[lo_i, hi_i)` with signed coordinates;
//! * vertex indices are row-major with the last axis fastest;
//! * an edge is stored at its lexicographically smaller endpoint together
//!   with its axis, so each undirected edge has exactly one representation;
//! * the cable distance between lattice neighbours is 1/2.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Minimum dimension. Walks on `Z^d` must be transient for everything in
/// this crate to make sense, so `d >= 3` is a hard requirement.
pub const MIN_DIM: usize = 3;

/// Half-open box `[lo_0, hi_0) x ... x [lo_{d-1}, hi_{d-1})` in `Z^d`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatticeBox {
    lo: Vec<i64>,
    hi: Vec<i64>,
}

/// Row-major vertex index within a box.
pub type VertexId = usize;

impl LatticeBox {
    /// Box `[0, sides_i)` at the origin.
    pub fn at_origin(d: usize, sides: &[i64]) -> Result<Self> {
        let lo = vec![0i64; d];
        let hi = sides.to_vec();
        if sides.len() != d {
            return Err(Error::geometry(format!(
                "expected {d} side lengths, got {}",
                sides.len()
            )));
        }
        Self::new(lo, hi)
    }

    pub fn new(lo: Vec<i64>, hi: Vec<i64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::geometry("lo/hi dimension mismatch"));
        }
        let d = lo.len();
        if d < MIN_DIM {
            return Err(Error::geometry(format!(
                "dimension {d} < {MIN_DIM}: simple random walk on Z^{d} is not transient enough; \
                 use d >= {MIN_DIM}"
            )));
        }
        for i in 0..d {
            if hi[i] <= lo[i] {
                return Err(Error::geometry(format!(
                    "axis {i}: empty extent [{}, {})",
                    lo[i], hi[i]
                )));
            }
        }
        let mut count: i128 = 1;
        for i in 0..d {
            count *= (hi[i] - lo[i]) as i128;
            if count > usize::MAX as i128 {
                return Err(Error::geometry("box too large to index"));
            }
        }
        Ok(LatticeBox { lo, hi })
    }

    /// Cube `[base, base + side)^d`.
    pub fn cube(d: usize, base: i64, side: i64) -> Result<Self> {
        Self::new(vec![base; d], vec![base + side; d])
    }

    /// Slab with two long axes and thickness `thick` in the remaining ones.
    pub fn slab(d: usize, long: i64, thick: i64) -> Result<Self> {
        if d < MIN_DIM {
            return Err(Error::geometry(format!("dimension {d} < {MIN_DIM}")));
        }
        let mut sides = vec![thick; d];
        sides[0] = long;
        sides[1] = long;
        Self::at_origin(d, &sides)
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn lo(&self) -> &[i64] {
        &self.lo
    }

    pub fn hi(&self) -> &[i64] {
        &self.hi
    }

    pub fn side(&self, axis: usize) -> i64 {
        self.hi[axis] - self.lo[axis]
    }

    pub fn vertex_count(&self) -> usize {
        (0..self.dim()).map(|i| self.side(i) as usize).product()
    }

    /// Number of nearest-neighbour edges with both endpoints inside.
    pub fn edge_count(&self) -> usize {
        let d = self.dim();
        (0..d)
            .map(|i| {
                (self.side(i) as usize - 1)
                    * (0..d)
                        .filter(|&j| j != i)
                        .map(|j| self.side(j) as usize)
                        .product::<usize>()
            })
            .sum()
    }

    pub fn contains(&self, x: &[i64]) -> bool {
        x.len() == self.dim() && (0..self.dim()).all(|i| self.lo[i] <= x[i] && x[i] < self.hi[i])
    }

    /// Row-major index (last axis fastest). Panics if `x` is outside.
    pub fn index_of(&self, x: &[i64]) -> VertexId {
        debug_assert!(self.contains(x), "{x:?} outside {self:?}");
        let mut idx = 0usize;
        for i in 0..self.dim() {
            idx = idx * self.side(i) as usize + (x[i] - self.lo[i]) as usize;
        }
        idx
    }

    pub fn coords_of(&self, mut idx: VertexId) -> Vec<i64> {
        let d = self.dim();
        let mut x = vec![0i64; d];
        for i in (0..d).rev() {
            let s = self.side(i) as usize;
            x[i] = self.lo[i] + (idx % s) as i64;
            idx /= s;
        }
        x
    }

    /// Iterate vertices in index order.
    pub fn vertices(&self) -> impl Iterator<Item = Vec<i64>> + '_ {
        (0..self.vertex_count()).map(move |i| self.coords_of(i))
    }

    /// All canonical edges with both endpoints inside, base index order.
    pub fn edges(&self) -> Vec<Edge> {
        let d = self.dim();
        let mut out = Vec::with_capacity(self.edge_count());
        for idx in 0..self.vertex_count() {
            let x = self.coords_of(idx);
            for axis in 0..d {
                if x[axis] + 1 < self.hi[axis] {
                    out.push(Edge {
                        base: x.clone(),
                        axis,
                    });
                }
            }
        }
        out
    }

    /// Neighbours of `x` that stay inside the box.
    pub fn neighbors(&self, x: &[i64]) -> Vec<Vec<i64>> {
        let mut out = Vec::with_capacity(2 * self.dim());
        for axis in 0..self.dim() {
            for step in [-1i64, 1] {
                let mut y = x.to_vec();
                y[axis] += step;
                if self.contains(&y) {
                    out.push(y);
                }
            }
        }
        out
    }

    /// Box grown by `r` in every direction.
    pub fn dilate(&self, r: i64) -> Result<Self> {
        Self::new(
            self.lo.iter().map(|&v| v - r).collect(),
            self.hi.iter().map(|&v| v + r).collect(),
        )
    }

    /// Centered inner box obtained by trimming `buffer` from every face.
    pub fn shrink(&self, buffer: i64) -> Result<Self> {
        Self::new(
            self.lo.iter().map(|&v| v + buffer).collect(),
            self.hi.iter().map(|&v| v - buffer).collect(),
        )
    }
}

/// Undirected nearest-neighbour edge, stored at its lexicographically
/// smaller endpoint. The other endpoint is `base + e_axis`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub base: Vec<i64>,
    pub axis: usize,
}

impl Edge {
    pub fn other(&self) -> Vec<i64> {
        let mut y = self.base.clone();
        y[self.axis] += 1;
        y
    }

    /// Canonical edge between two neighbouring vertices.
    pub fn between(x: &[i64], y: &[i64]) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::geometry("edge endpoints of different dimension"));
        }
        let mut axis = None;
        for i in 0..x.len() {
            match (y[i] - x[i]).abs() {
                0 => {}
                1 if axis.is_none() => axis = Some(i),
                _ => return Err(Error::geometry("endpoints are not lattice neighbours")),
            }
        }
        let axis = axis.ok_or_else(|| Error::geometry("endpoints coincide"))?;
        let base = if x[axis] < y[axis] {
            x.to_vec()
        } else {
            y.to_vec()
        };
        Ok(Edge { base, axis })
    }
}

/// A point of the cable graph: offset `t` (in cable length units, so
/// `0 <= t <= 1/2`) from `edge.base` towards `edge.other()`.
#[derive(Clone, Debug, PartialEq)]
pub struct CablePoint {
    pub edge: Edge,
    pub t: f64,
}

impl CablePoint {
    pub fn new(edge: Edge, t: f64) -> Result<Self> {
        if !(0.0..=0.5).contains(&t) {
            return Err(Error::geometry(format!(
                "cable offset {t} outside [0, 0.5]"
            )));
        }
        Ok(CablePoint { edge, t })
    }

    pub fn at_vertex(x: &[i64]) -> Result<Self> {
        // Represent a vertex as offset 0 on its +axis-0 edge.
        let edge = Edge {
            base: x.to_vec(),
            axis: 0,
        };
        CablePoint::new(edge, 0.0)
    }
}

/// Half the `l^1` distance: the cable distance between lattice vertices.
pub fn vertex_cable_distance(x: &[i64], y: &[i64]) -> f64 {
    let l1: i64 = x.iter().zip(y).map(|(a, b)| (a - b).abs()).sum();
    l1 as f64 / 2.0
}

/// Geodesic distance in the cable graph of `Z^d`.
pub fn cable_distance(p: &CablePoint, q: &CablePoint) -> Result<f64> {
    if p.edge.base.len() != q.edge.base.len() {
        return Err(Error::geometry("cable points of different dimension"));
    }
    let mut best = f64::INFINITY;
    if p.edge == q.edge {
        best = (p.t - q.t).abs();
    }
    let p_ends = [(p.edge.base.clone(), p.t), (p.edge.other(), 0.5 - p.t)];
    let q_ends = [(q.edge.base.clone(), q.t), (q.edge.other(), 0.5 - q.t)];
    for (pv, pd) in &p_ends {
        for (qv, qd) in &q_ends {
            let via = pd + vertex_cable_distance(pv, qv) + qd;
            if via < best {
                best = via;
            }
        }
    }
    Ok(best)
}
