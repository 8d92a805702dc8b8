//! Level-set percolation on the lattice and on the cable system.
//!
//! A field sample on a box induces an open/closed configuration: a vertex is
//! open when its value clears a level, and an edge is open when both endpoints
//! are. On the cable system the edge additionally has to survive an exact
//! Bernoulli draw for the event that the Brownian bridge interpolating the
//! endpoint values stays above the level on the whole edge, so cable
//! configurations are strictly sparser than lattice ones at the same level.
//!
//! "Percolates" is replaced by the standard finite-size surrogate: a cluster
//! that connects opposite faces of an inner window, kept a quarter box length
//! away from the Dirichlet boundary so the zero boundary condition does not
//! contaminate the crossing statistics. Crossing curves over several box
//! sizes intersect near the critical level; `estimate_hstar` locates the
//! intersection and `estimate_pc` converts it to a critical vertex density.
//!
//! The flip machinery at the bottom compares, conditionally on the field
//! values at the 2d half-edge points around a center vertex, the probability
//! that the center connects to its surroundings above level `-h` against the
//! probability that the center value simply exceeds `+h`. Both sides reduce
//! to closed forms (a Gaussian tail and a tilted Gaussian tail), which the
//! Monte Carlo estimates are checked against.

use crate::cable::BridgeSpec;
use crate::error::{Error, Result};
use crate::greens::{green_zd, sigma0_sq, GreenTable, TOL_FLOOR};
use crate::interlace::UnionFind;
use crate::lattice::{CablePoint, Edge, LatticeBox};
use crate::rng::{tags, Stream};
use crate::stats::{normal_upper_tail, wilson_interval, Accumulator};
use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};

/// Component id assigned to closed vertices.
pub const NO_COMPONENT: u32 = u32::MAX;

/// Thickness of the short axes in slab mode.
pub const SLAB_THICKNESS: i64 = 4;

// ---------------------------------------------------------------------------
// Open/closed configurations
// ---------------------------------------------------------------------------

/// A site-and-bond configuration on a box, together with the provenance
/// needed to reproduce it: the level, the field replica key, and whether the
/// edges went through the cable bridge draw.
///
/// Edge slots are indexed `vertex * d + axis` for the edge leaving `vertex`
/// in the positive `axis` direction; slots whose head would leave the box
/// stay false.
#[derive(Clone, Debug)]
pub struct OpenConfig {
    pub bbox: LatticeBox,
    pub open_vertex: Vec<bool>,
    pub open_edge: Vec<bool>,
    /// Level the configuration was thresholded at.
    pub level: f64,
    /// Key of the RNG stream that produced the field sample.
    pub field_id: u64,
    /// True when edges carry the cable bridge factor.
    pub cable: bool,
}

impl OpenConfig {
    fn empty(bbox: &LatticeBox, level: f64, field_id: u64, cable: bool) -> Self {
        let nv = bbox.vertex_count();
        OpenConfig {
            bbox: bbox.clone(),
            open_vertex: vec![false; nv],
            open_edge: vec![false; nv * bbox.dim()],
            level,
            field_id,
            cable,
        }
    }

    pub fn edge_slot(&self, vertex: usize, axis: usize) -> usize {
        vertex * self.bbox.dim() + axis
    }

    pub fn open_vertex_count(&self) -> usize {
        self.open_vertex.iter().filter(|&&b| b).count()
    }

    pub fn open_edge_count(&self) -> usize {
        self.open_edge.iter().filter(|&&b| b).count()
    }

    /// Every open edge has both endpoints open. Violations mean the
    /// constructor was bypassed.
    pub fn check_consistent(&self) -> Result<()> {
        let d = self.bbox.dim();
        for i in 0..self.bbox.vertex_count() {
            for axis in 0..d {
                if !self.open_edge[i * d + axis] {
                    continue;
                }
                let x = self.bbox.coords_of(i);
                let mut y = x.clone();
                y[axis] += 1;
                if !self.open_vertex[i]
                    || !self.bbox.contains(&y)
                    || !self.open_vertex[self.bbox.index_of(&y)]
                {
                    return Err(Error::geometry(format!(
                        "open edge at vertex {i} axis {axis} without open endpoints"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Is the configuration a subset of `other` (vertexwise and edgewise)?
    pub fn subset_of(&self, other: &OpenConfig) -> bool {
        self.open_vertex.len() == other.open_vertex.len()
            && self
                .open_vertex
                .iter()
                .zip(&other.open_vertex)
                .all(|(a, b)| !a || *b)
            && self
                .open_edge
                .iter()
                .zip(&other.open_edge)
                .all(|(a, b)| !a || *b)
    }
}

fn check_field_len(bbox: &LatticeBox, field: &[f64]) -> Result<()> {
    if field.len() != bbox.vertex_count() {
        return Err(Error::geometry(format!(
            "field has {} values, box has {} vertices",
            field.len(),
            bbox.vertex_count()
        )));
    }
    Ok(())
}

/// Lattice level set: vertex open iff its value is at least `h`, edge open
/// iff both endpoints are.
pub fn vertex_level_set(
    bbox: &LatticeBox,
    field: &[f64],
    h: f64,
    field_id: u64,
) -> Result<OpenConfig> {
    check_field_len(bbox, field)?;
    let d = bbox.dim();
    let mut cfg = OpenConfig::empty(bbox, h, field_id, false);
    for (i, &v) in field.iter().enumerate() {
        cfg.open_vertex[i] = v >= h;
    }
    for edge in bbox.edges() {
        let i = bbox.index_of(&edge.base);
        let j = bbox.index_of(&edge.other());
        cfg.open_edge[i * d + edge.axis] = cfg.open_vertex[i] && cfg.open_vertex[j];
    }
    Ok(cfg)
}

/// Cable level set at level `-h`: vertex open iff its value is at least
/// `-h`, edge open iff both endpoints are and the interpolating bridge stays
/// above `-h` as well, an event of probability
/// `1 - exp(-2 (phi_x + h)(phi_y + h))`.
///
/// The bridge draws come from `rng` in edge-slot order; use
/// [`cable_level_set_with`] to share the same uniforms across several levels,
/// which couples the configurations monotonically.
pub fn cable_level_set<R: Rng>(
    bbox: &LatticeBox,
    field: &[f64],
    h: f64,
    field_id: u64,
    rng: &mut R,
) -> Result<OpenConfig> {
    let uniforms = draw_edge_uniforms(bbox, rng);
    cable_level_set_with(bbox, field, h, field_id, &uniforms)
}

/// Deterministic core of [`cable_level_set`]: `uniforms` supplies one value
/// per edge slot (`vertex_count * d` entries).
pub fn cable_level_set_with(
    bbox: &LatticeBox,
    field: &[f64],
    h: f64,
    field_id: u64,
    uniforms: &[f64],
) -> Result<OpenConfig> {
    check_field_len(bbox, field)?;
    check_uniform_len(bbox, uniforms)?;
    let d = bbox.dim();
    let mut cfg = OpenConfig::empty(bbox, -h, field_id, true);
    for (i, &v) in field.iter().enumerate() {
        cfg.open_vertex[i] = v >= -h;
    }
    for edge in bbox.edges() {
        let i = bbox.index_of(&edge.base);
        let j = bbox.index_of(&edge.other());
        if !(cfg.open_vertex[i] && cfg.open_vertex[j]) {
            continue;
        }
        // P(bridge from phi_i to phi_j stays above -h) with tau = 1 per edge.
        let p_open = -(-2.0 * (field[i] + h) * (field[j] + h)).exp_m1();
        cfg.open_edge[i * d + edge.axis] = uniforms[i * d + edge.axis] < p_open;
    }
    Ok(cfg)
}

/// Two-sided cable set `{-h <= phi <= cap}`: vertices must land in the band
/// and edges must keep the whole bridge inside it. The band probability is
/// the symmetric-band bridge series after recentering, so the draw stays
/// exact rather than discretized.
pub fn cable_band_level_set_with(
    bbox: &LatticeBox,
    field: &[f64],
    h: f64,
    cap: f64,
    field_id: u64,
    uniforms: &[f64],
) -> Result<OpenConfig> {
    check_field_len(bbox, field)?;
    check_uniform_len(bbox, uniforms)?;
    if !(cap + h > 0.0) {
        return Err(Error::stats(format!(
            "band [{}, {cap}] is empty",
            -h
        )));
    }
    let d = bbox.dim();
    let mut cfg = OpenConfig::empty(bbox, -h, field_id, true);
    for (i, &v) in field.iter().enumerate() {
        cfg.open_vertex[i] = (-h..=cap).contains(&v);
    }
    let center = 0.5 * (cap - h);
    let half_width = 0.5 * (cap + h);
    for edge in bbox.edges() {
        let i = bbox.index_of(&edge.base);
        let j = bbox.index_of(&edge.other());
        if !(cfg.open_vertex[i] && cfg.open_vertex[j]) {
            continue;
        }
        let bridge = BridgeSpec::edge(field[i] - center, field[j] - center)?;
        let p_open = bridge.stays_in_band(half_width);
        cfg.open_edge[i * d + edge.axis] = uniforms[i * d + edge.axis] < p_open;
    }
    Ok(cfg)
}

pub fn draw_edge_uniforms<R: Rng>(bbox: &LatticeBox, rng: &mut R) -> Vec<f64> {
    (0..bbox.vertex_count() * bbox.dim())
        .map(|_| rng.gen::<f64>())
        .collect()
}

fn check_uniform_len(bbox: &LatticeBox, uniforms: &[f64]) -> Result<()> {
    let want = bbox.vertex_count() * bbox.dim();
    if uniforms.len() != want {
        return Err(Error::stats(format!(
            "need {want} edge uniforms, got {}",
            uniforms.len()
        )));
    }
    Ok(())
}

/// Restriction of a configuration to a sub-box: vertices and edges keep
/// their open/closed state, edges with the head outside the window close.
pub fn restrict(cfg: &OpenConfig, window: &LatticeBox) -> Result<OpenConfig> {
    let d = cfg.bbox.dim();
    if window.dim() != d {
        return Err(Error::geometry("window dimension mismatch"));
    }
    for axis in 0..d {
        if window.lo()[axis] < cfg.bbox.lo()[axis] || window.hi()[axis] > cfg.bbox.hi()[axis] {
            return Err(Error::geometry("window exceeds the configuration box"));
        }
    }
    let mut out = OpenConfig::empty(window, cfg.level, cfg.field_id, cfg.cable);
    for (iw, x) in window.vertices().enumerate() {
        let i = cfg.bbox.index_of(&x);
        out.open_vertex[iw] = cfg.open_vertex[i];
        for axis in 0..d {
            let mut y = x.clone();
            y[axis] += 1;
            if window.contains(&y) {
                out.open_edge[iw * d + axis] = cfg.open_edge[i * d + axis];
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Cluster labeling
// ---------------------------------------------------------------------------

/// Connected components of the open subgraph. Component ids are assigned in
/// first-encounter order over the vertex indexing, so two correct labelings
/// agree exactly, not just up to relabeling.
#[derive(Clone, Debug)]
pub struct ClusterLabeling {
    /// Component id per vertex, `NO_COMPONENT` for closed vertices.
    pub component: Vec<u32>,
    /// Vertex count per component id.
    pub sizes: Vec<usize>,
    /// Per axis: some single component touches both opposite faces.
    pub crossing: Vec<bool>,
}

pub fn label_clusters(cfg: &OpenConfig) -> ClusterLabeling {
    let d = cfg.bbox.dim();
    let nv = cfg.bbox.vertex_count();
    let mut uf = UnionFind::new(nv);
    for i in 0..nv {
        for axis in 0..d {
            if cfg.open_edge[i * d + axis] {
                let x = cfg.bbox.coords_of(i);
                let mut y = x;
                y[axis] += 1;
                uf.union(i, cfg.bbox.index_of(&y));
            }
        }
    }
    let mut component = vec![NO_COMPONENT; nv];
    let mut sizes = Vec::new();
    let mut root_to_id: std::collections::HashMap<usize, u32> = std::collections::HashMap::new();
    for i in 0..nv {
        if !cfg.open_vertex[i] {
            continue;
        }
        let root = uf.find(i);
        let id = *root_to_id.entry(root).or_insert_with(|| {
            sizes.push(0);
            (sizes.len() - 1) as u32
        });
        component[i] = id;
        sizes[id as usize] += 1;
    }
    let crossing = crossing_flags(&cfg.bbox, &component, sizes.len());
    ClusterLabeling {
        component,
        sizes,
        crossing,
    }
}

/// A component crosses axis `a` when it owns a vertex on each of the two
/// opposite faces of the box.
fn crossing_flags(bbox: &LatticeBox, component: &[u32], ncomp: usize) -> Vec<bool> {
    let d = bbox.dim();
    let mut crossing = vec![false; d];
    for axis in 0..d {
        let mut lo_face = vec![false; ncomp];
        let mut hi_face = vec![false; ncomp];
        for (i, &c) in component.iter().enumerate() {
            if c == NO_COMPONENT {
                continue;
            }
            let x = bbox.coords_of(i);
            if x[axis] == bbox.lo()[axis] {
                lo_face[c as usize] = true;
            }
            if x[axis] == bbox.hi()[axis] - 1 {
                hi_face[c as usize] = true;
            }
        }
        crossing[axis] = (0..ncomp).any(|c| lo_face[c] && hi_face[c]);
    }
    crossing
}

// ---------------------------------------------------------------------------
// Crossing curves
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
pub enum CrossingMode {
    /// Level set of the vertex field at level `h`.
    Lattice,
    /// Cable level set at level `h` (vertices and bridges at or above `h`).
    Cable,
    /// Two-sided cable set `{-h <= phi <= K(h)}` with the truncation cap
    /// from the default schedule. Trend diagnostics only.
    CableBand,
    /// Lattice level set on a slab `[0,L)^2 x [0,4)^{d-2}`, crossing along
    /// the first long axis.
    Slab,
}

impl std::fmt::Display for CrossingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            CrossingMode::Lattice => "lattice",
            CrossingMode::Cable => "cable",
            CrossingMode::CableBand => "cable_band",
            CrossingMode::Slab => "slab",
        };
        f.write_str(s)
    }
}

/// One point of an empirical crossing curve.
#[derive(Clone, Debug, serde::Serialize)]
pub struct CrossingPoint {
    pub l: i64,
    pub h: f64,
    pub mode: CrossingMode,
    pub crossings: u64,
    pub replicas: u64,
    pub theta: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

impl CrossingPoint {
    pub fn csv_header() -> &'static str {
        "L,h,mode,crossings,replicas,ci_lo,ci_hi"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.l, self.h, self.mode, self.crossings, self.replicas, self.ci_lo, self.ci_hi
        )
    }
}

/// Fraction of field replicas whose level-set configuration connects the two
/// opposite faces of the inner window, for every `(L, h)` on the grids.
///
/// One field sample (and, for cable modes, one vector of edge uniforms) is
/// shared across the whole `h` grid, so within a replica the crossing
/// indicator is monotone in `h` by the nesting of the level sets; the curve
/// estimates are comparable across `h` without extra variance.
///
/// The inner window keeps a buffer of `L/4` from the Dirichlet boundary; in
/// slab mode only the two long axes are buffered and the thickness stays 4.
pub fn crossing_curve(
    d: usize,
    l_list: &[i64],
    h_grid: &[f64],
    replicas: usize,
    mode: CrossingMode,
    stream: &Stream,
) -> Result<Vec<CrossingPoint>> {
    if l_list.is_empty() || h_grid.is_empty() {
        return Err(Error::stats("crossing curve needs nonempty L and h grids"));
    }
    if replicas == 0 {
        return Err(Error::stats("crossing curve needs at least one replica"));
    }
    if mode == CrossingMode::CableBand {
        for &h in h_grid {
            if h <= 0.0 {
                return Err(Error::stats(
                    "banded cable mode needs positive levels for the truncation cap",
                ));
            }
        }
    }
    let mut out = Vec::with_capacity(l_list.len() * h_grid.len());
    for (li, &l) in l_list.iter().enumerate() {
        if l < 4 {
            return Err(Error::geometry(format!(
                "box side {l} leaves no inner window after the L/4 buffer"
            )));
        }
        let bbox = match mode {
            CrossingMode::Slab => LatticeBox::slab(d, l, SLAB_THICKNESS)?,
            _ => LatticeBox::cube(d, 0, l)?,
        };
        let window = inner_window(&bbox, mode, l)?;
        let sampler = crate::gff::DirichletSampler::new(&bbox)?;
        let mut counts = vec![0u64; h_grid.len()];
        for r in 0..replicas {
            let rep = stream.child(li as u64).child(r as u64);
            let field_stream = rep.child(tags::FIELD);
            let field = sampler.sample(&mut field_stream.rng());
            let uniforms = match mode {
                CrossingMode::Cable | CrossingMode::CableBand => {
                    draw_edge_uniforms(&bbox, &mut rep.child(tags::EDGE_MARKS).rng())
                }
                _ => Vec::new(),
            };
            for (hi, &h) in h_grid.iter().enumerate() {
                let cfg = match mode {
                    CrossingMode::Lattice | CrossingMode::Slab => {
                        vertex_level_set(&bbox, &field, h, field_stream.key())?
                    }
                    // Grid level h means the cable set {phi >= h}, which is
                    // the -h parametrization of cable_level_set.
                    CrossingMode::Cable => {
                        cable_level_set_with(&bbox, &field, -h, field_stream.key(), &uniforms)?
                    }
                    CrossingMode::CableBand => {
                        let levels =
                            crate::cable::truncation_levels(h, 0.5 * h * h, &Default::default())?;
                        cable_band_level_set_with(
                            &bbox,
                            &field,
                            h,
                            levels.k,
                            field_stream.key(),
                            &uniforms,
                        )?
                    }
                };
                let labeling = label_clusters(&restrict(&cfg, &window)?);
                if labeling.crossing[0] {
                    counts[hi] += 1;
                }
            }
        }
        for (hi, &h) in h_grid.iter().enumerate() {
            let (ci_lo, ci_hi) = wilson_interval(counts[hi], replicas as u64, 0.05)?;
            out.push(CrossingPoint {
                l,
                h,
                mode,
                crossings: counts[hi],
                replicas: replicas as u64,
                theta: counts[hi] as f64 / replicas as f64,
                ci_lo,
                ci_hi,
            });
        }
    }
    Ok(out)
}

fn inner_window(bbox: &LatticeBox, mode: CrossingMode, l: i64) -> Result<LatticeBox> {
    let buffer = l / 4;
    match mode {
        CrossingMode::Slab => {
            let mut lo = bbox.lo().to_vec();
            let mut hi = bbox.hi().to_vec();
            for axis in 0..2 {
                lo[axis] += buffer;
                hi[axis] -= buffer;
            }
            LatticeBox::new(lo, hi)
        }
        _ => bbox.shrink(buffer),
    }
}

// ---------------------------------------------------------------------------
// Critical-level estimation
// ---------------------------------------------------------------------------

/// Crossing point of two curves that bracket the critical level.
#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct PairCross {
    pub l_low: i64,
    pub l_high: i64,
    pub h: f64,
}

#[derive(Clone, Debug, serde::Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum HStar {
    Estimate {
        value: f64,
        ci_lo: f64,
        ci_hi: f64,
        pairs: Vec<PairCross>,
        bootstrap_replicas: usize,
        /// Bootstrap resamples whose resampled curves never crossed; they are
        /// excluded from the percentile interval but reported here.
        indeterminate_resamples: usize,
    },
    /// No pair of curves crossed. Not an error: the grid simply does not
    /// bracket the critical level at these sizes.
    Indeterminate { pairs_checked: usize },
}

/// Critical level from the pairwise intersections of crossing curves.
///
/// For each pair `L_i < L_j` the difference `theta_j - theta_i` is scanned
/// along the shared `h` grid; the first strict sign change is resolved by
/// linear interpolation between the two nonzero differences. The point
/// estimate averages the pairwise crossings; the interval is a percentile
/// bootstrap that resamples every curve point binomially.
pub fn estimate_hstar(
    curves: &[CrossingPoint],
    bootstrap: usize,
    stream: &Stream,
) -> Result<HStar> {
    let grouped = group_curves(curves)?;
    if grouped.len() < 2 {
        return Err(Error::stats("critical-level estimate needs at least two box sizes"));
    }
    let h_grid = &grouped[0].2;
    let pairs_checked = grouped.len() * (grouped.len() - 1) / 2;

    let point = |thetas: &[Vec<f64>]| -> (Vec<PairCross>, Option<f64>) {
        let mut pairs = Vec::new();
        for i in 0..grouped.len() {
            for j in (i + 1)..grouped.len() {
                if let Some(h) = curve_intersection(h_grid, &thetas[j], &thetas[i]) {
                    pairs.push(PairCross {
                        l_low: grouped[i].0,
                        l_high: grouped[j].0,
                        h,
                    });
                }
            }
        }
        if pairs.is_empty() {
            (pairs, None)
        } else {
            let mean = pairs.iter().map(|p| p.h).sum::<f64>() / pairs.len() as f64;
            (pairs, Some(mean))
        }
    };

    let base_thetas: Vec<Vec<f64>> = grouped.iter().map(|g| g.1.clone()).collect();
    let (pairs, value) = point(&base_thetas);
    let Some(value) = value else {
        return Ok(HStar::Indeterminate { pairs_checked });
    };

    if bootstrap < 2 {
        return Err(Error::stats("bootstrap needs at least two resamples"));
    }
    let mut resamples = Vec::with_capacity(bootstrap);
    let mut indeterminate = 0usize;
    for b in 0..bootstrap {
        let mut rng = stream.child(tags::BOOTSTRAP).child(b as u64).rng();
        let mut thetas = Vec::with_capacity(grouped.len());
        for (_, theta, _, replicas) in &grouped {
            let mut row = Vec::with_capacity(theta.len());
            for &t in theta {
                let n = *replicas;
                let draw = if t <= 0.0 || t >= 1.0 {
                    // Binomial(n, 0 or 1) is deterministic; skip the sampler,
                    // which rejects degenerate probabilities in debug builds.
                    (t * n as f64).round() as u64
                } else {
                    Binomial::new(n, t)
                        .map_err(|e| Error::stats(format!("bootstrap binomial: {e}")))?
                        .sample(&mut rng)
                };
                row.push(draw as f64 / n as f64);
            }
            thetas.push(row);
        }
        match point(&thetas).1 {
            Some(v) => resamples.push(v),
            None => indeterminate += 1,
        }
    }
    if resamples.len() < 2 {
        return Ok(HStar::Indeterminate { pairs_checked });
    }
    let (ci_lo, ci_hi) = crate::stats::percentile_ci(&mut resamples, 0.05)?;
    Ok(HStar::Estimate {
        value,
        ci_lo,
        ci_hi,
        pairs,
        bootstrap_replicas: bootstrap,
        indeterminate_resamples: indeterminate,
    })
}

/// Group curve points by box size, checking that all sizes share the same
/// `h` grid and replica count. Returns `(L, thetas, h_grid, replicas)`
/// sorted by `L`.
#[allow(clippy::type_complexity)]
fn group_curves(curves: &[CrossingPoint]) -> Result<Vec<(i64, Vec<f64>, Vec<f64>, u64)>> {
    let mut by_l: std::collections::BTreeMap<i64, Vec<&CrossingPoint>> = Default::default();
    for p in curves {
        by_l.entry(p.l).or_default().push(p);
    }
    let mut grouped = Vec::new();
    let mut reference: Option<Vec<f64>> = None;
    for (l, pts) in by_l {
        let hs: Vec<f64> = pts.iter().map(|p| p.h).collect();
        match &reference {
            None => reference = Some(hs.clone()),
            Some(r) => {
                if *r != hs {
                    return Err(Error::stats("curves must share one h grid across box sizes"));
                }
            }
        }
        let replicas = pts[0].replicas;
        if pts.iter().any(|p| p.replicas != replicas) {
            return Err(Error::stats("replica count varies within one curve"));
        }
        grouped.push((l, pts.iter().map(|p| p.theta).collect(), hs, replicas));
    }
    Ok(grouped)
}

/// First strict sign change of `big - small` along the grid, interpolated
/// linearly between the last nonzero difference and the next one. Plateaus
/// where both curves saturate at the same value carry no sign information
/// and are skipped.
fn curve_intersection(h_grid: &[f64], big: &[f64], small: &[f64]) -> Option<f64> {
    let mut last: Option<(f64, f64)> = None; // (h, nonzero diff)
    for (i, &h) in h_grid.iter().enumerate() {
        let diff = big[i] - small[i];
        if diff == 0.0 {
            continue;
        }
        if let Some((h0, d0)) = last {
            if d0.signum() != diff.signum() {
                return Some(h0 + d0 / (d0 - diff) * (h - h0));
            }
        }
        last = Some((h, diff));
    }
    None
}

/// Critical vertex density implied by a critical level: the upper tail of
/// the field marginal at the origin, `P(phi >= h*)` with variance `g(0)`.
pub fn estimate_pc(h_star: f64, d: usize) -> Result<f64> {
    let g0 = green_zd(&vec![0; d], d, TOL_FLOOR)?;
    Ok(normal_upper_tail(h_star / g0.sqrt()))
}

// ---------------------------------------------------------------------------
// Two-sign clusters
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, serde::Serialize)]
pub struct SignClusterPoint {
    pub l: i64,
    pub h: f64,
    pub replicas: u64,
    /// Crossings of `{phi >= h}`.
    pub pos_crossings: u64,
    /// Crossings of `{phi < h}`.
    pub neg_crossings: u64,
    /// Replicas where both sets cross simultaneously.
    pub both_crossings: u64,
    pub pos_theta: f64,
    pub neg_theta: f64,
    pub both_theta: f64,
    pub both_ci_lo: f64,
    pub both_ci_hi: f64,
}

/// Spanning frequencies of the upper level set `{phi >= h}` and the strict
/// lower set `{phi < h}` on the inner window, plus the frequency with which
/// both span at once. Around `h = 0` the field symmetry makes the first two
/// agree in law; the both-span frequency is the finite-size shadow of the
/// coexistence of the two sign clusters.
pub fn sign_cluster_experiment(
    d: usize,
    l: i64,
    replicas: usize,
    h_grid: &[f64],
    stream: &Stream,
) -> Result<Vec<SignClusterPoint>> {
    if h_grid.is_empty() || replicas == 0 {
        return Err(Error::stats("sign-cluster experiment needs a grid and replicas"));
    }
    let bbox = LatticeBox::cube(d, 0, l)?;
    let window = bbox.shrink(l / 4)?;
    let sampler = crate::gff::DirichletSampler::new(&bbox)?;
    let mut pos = vec![0u64; h_grid.len()];
    let mut neg = vec![0u64; h_grid.len()];
    let mut both = vec![0u64; h_grid.len()];
    for r in 0..replicas {
        let field_stream = stream.child(r as u64).child(tags::FIELD);
        let field = sampler.sample(&mut field_stream.rng());
        let negated: Vec<f64> = field.iter().map(|v| -v).collect();
        for (hi, &h) in h_grid.iter().enumerate() {
            let cfg_pos = vertex_level_set(&bbox, &field, h, field_stream.key())?;
            // {phi < h} = {-phi > -h}, and the boundary {phi = h} is null.
            let cfg_neg = vertex_level_set(&bbox, &negated, -h, field_stream.key())?;
            let p = label_clusters(&restrict(&cfg_pos, &window)?).crossing[0];
            let n = label_clusters(&restrict(&cfg_neg, &window)?).crossing[0];
            if p {
                pos[hi] += 1;
            }
            if n {
                neg[hi] += 1;
            }
            if p && n {
                both[hi] += 1;
            }
        }
    }
    let n = replicas as u64;
    h_grid
        .iter()
        .enumerate()
        .map(|(hi, &h)| {
            let (both_ci_lo, both_ci_hi) = wilson_interval(both[hi], n, 0.05)?;
            Ok(SignClusterPoint {
                l,
                h,
                replicas: n,
                pos_crossings: pos[hi],
                neg_crossings: neg[hi],
                both_crossings: both[hi],
                pos_theta: pos[hi] as f64 / n as f64,
                neg_theta: neg[hi] as f64 / n as f64,
                both_theta: both[hi] as f64 / n as f64,
                both_ci_lo,
                both_ci_hi,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Flip events around a star
// ---------------------------------------------------------------------------

/// The 2d half-edge points around `center`, in axis order with the positive
/// direction first: index `2a` is the midpoint of the edge toward `+e_a`,
/// index `2a + 1` the one toward `-e_a`. Each sits at cable coordinate 1/4
/// along its half-length edge, so the segment from the center to any of them
/// carries bridge scale `tau = 1/2`.
pub fn quarter_points(center: &[i64]) -> Result<Vec<CablePoint>> {
    let d = center.len();
    if d == 0 {
        return Err(Error::geometry("center has dimension zero"));
    }
    let mut pts = Vec::with_capacity(2 * d);
    for axis in 0..d {
        for sign in [1i64, -1] {
            let mut other = center.to_vec();
            other[axis] += sign;
            pts.push(CablePoint::new(Edge::between(center, &other)?, 0.25)?);
        }
    }
    Ok(pts)
}

/// One realized draw of the comparison events around a center vertex, given
/// the field values at the 2d surrounding half-edge points.
///
/// Directions use the [`quarter_points`] indexing. `e_dir[v]` is the event
/// that the half-edge value toward `v` clears `-h` while every surrounding
/// value stays within `[-k_level, k_level]`; `f_dir[v]` is the event that
/// the whole segment from the center to that point (center included) stays
/// above `-h`. `g_event` asks for some direction to satisfy both, which in
/// particular forces `e_event`.
#[derive(Clone, Debug, serde::Serialize)]
pub struct FlipEvents {
    pub center: Vec<i64>,
    pub boundary: Vec<f64>,
    /// Realized field value at the center vertex.
    pub center_value: f64,
    pub e_dir: Vec<bool>,
    pub f_dir: Vec<bool>,
    pub e_event: bool,
    pub g_event: bool,
    pub h: f64,
    pub k_level: f64,
}

/// Draw the center value from its conditional law and resolve every event.
pub fn flip_realize<R: Rng>(
    center: &[i64],
    h: f64,
    k_level: f64,
    boundary: &[f64],
    rng: &mut R,
) -> Result<FlipEvents> {
    let d = center.len();
    check_flip_args(d, h, k_level, boundary)?;
    let sigma0 = sigma0_sq(d)?.sqrt();
    let beta = boundary.iter().sum::<f64>() / (2 * d) as f64;
    let y = beta + sigma0 * rng.sample::<f64, _>(StandardNormal);
    let boundary_ok = boundary.iter().all(|v| v.abs() <= k_level);
    let mut e_dir = vec![false; 2 * d];
    let mut f_dir = vec![false; 2 * d];
    for v in 0..2 * d {
        e_dir[v] = boundary_ok && boundary[v] >= -h;
        if y >= -h && boundary[v] >= -h {
            let p = quarter_bridge_above(y, boundary[v], h)?;
            f_dir[v] = rng.gen::<f64>() < p;
        }
    }
    let e_event = e_dir.iter().any(|&b| b);
    let g_event = (0..2 * d).any(|v| e_dir[v] && f_dir[v]);
    debug_assert!(!g_event || e_event);
    Ok(FlipEvents {
        center: center.to_vec(),
        boundary: boundary.to_vec(),
        center_value: y,
        e_dir,
        f_dir,
        e_event,
        g_event,
        h,
        k_level,
    })
}

/// P(segment from `a` at the center to `b` at the half-edge point stays
/// above `-h`), both endpoints already at or above `-h`. Exact bridge tail
/// at tau = 1/2: `1 - exp(-4 (a + h)(b + h))`.
fn quarter_bridge_above(a: f64, b: f64, h: f64) -> Result<f64> {
    Ok(BridgeSpec::new(a, b, 0.25, 2.0)?.stays_above(-h))
}

fn check_flip_args(d: usize, h: f64, k_level: f64, boundary: &[f64]) -> Result<()> {
    if !(h > 0.0 && h <= 1.0) {
        return Err(Error::stats(format!("flip level {h} outside (0, 1]")));
    }
    if !(k_level > 0.0) {
        return Err(Error::stats("flip cap must be positive"));
    }
    if boundary.len() != 2 * d {
        return Err(Error::stats(format!(
            "need {} boundary values, got {}",
            2 * d,
            boundary.len()
        )));
    }
    Ok(())
}

/// Closed-form conditional probabilities of the two comparison events given
/// the boundary values.
#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct FlipSides {
    /// Conditional mean of the center value (plain average of the boundary).
    pub beta: f64,
    /// Sum of `h + value` over the directions whose half-edge point clears
    /// `-h` (zero when the cap is violated): total bridge exponent mass.
    pub a_s: f64,
    /// P(some direction connects to the center above `-h`).
    pub p_g: f64,
    /// P(E holds and the center value is at least `+h`).
    pub p_e: f64,
}

/// Both sides in closed form. With `Y` the center value, `Y ~ N(beta,
/// sigma0^2)` given the boundary, the E side is a plain Gaussian tail. For
/// the G side, conditional independence of the segment bridges given `Y`
/// collapses the union over directions to
///
///   P(G) = P(Y >= -h) - E[ exp(-4 A (h + Y)) ; Y >= -h ],
///
/// with `A` the bridge mass `a_s`; the tilted expectation is again a
/// Gaussian tail after completing the square. The subtracted term is
/// evaluated in log space because the tilt factor and the shifted tail can
/// separately overflow and underflow long before their product does.
pub fn flip_exact_sides(d: usize, h: f64, k_level: f64, boundary: &[f64]) -> Result<FlipSides> {
    check_flip_args(d, h, k_level, boundary)?;
    let sigma0 = sigma0_sq(d)?.sqrt();
    let beta = boundary.iter().sum::<f64>() / (2 * d) as f64;
    let boundary_ok = boundary.iter().all(|v| v.abs() <= k_level);
    let a_s = if boundary_ok {
        boundary
            .iter()
            .filter(|&&v| v >= -h)
            .map(|&v| h + v)
            .sum::<f64>()
    } else {
        0.0
    };
    let p_e = if boundary_ok && boundary.iter().any(|&v| v >= -h) {
        normal_upper_tail((h - beta) / sigma0)
    } else {
        0.0
    };
    let p_g = if a_s > 0.0 {
        let a = (-h - beta) / sigma0;
        let tail = normal_upper_tail(a + 4.0 * a_s * sigma0);
        let term = if tail > 0.0 {
            (-4.0 * a_s * (h + beta) + 8.0 * a_s * a_s * sigma0 * sigma0 + tail.ln()).exp()
        } else {
            0.0
        };
        (normal_upper_tail(a) - term).clamp(0.0, 1.0)
    } else {
        0.0
    };
    Ok(FlipSides {
        beta,
        a_s,
        p_g,
        p_e,
    })
}

/// Monte Carlo and closed-form comparison for one boundary configuration.
#[derive(Clone, Debug, serde::Serialize)]
pub struct FlipBoundaryRecord {
    pub boundary: Vec<f64>,
    pub beta: f64,
    pub a_s: f64,
    pub p_g_exact: f64,
    pub p_e_exact: f64,
    pub mc_g: f64,
    pub mc_e: f64,
    /// Mean and standard error of the paired per-draw difference
    /// `1_G - 1_{E and Y >= h}`.
    pub diff_mean: f64,
    pub diff_se: f64,
    /// Monte Carlo inequality indicator: the G frequency does not exceed the
    /// E frequency by more than three paired standard errors.
    pub holds: bool,
    /// Closed-form inequality indicator.
    pub exact_holds: bool,
    /// Normalized closed-form vs Monte Carlo discrepancies.
    pub z_g: f64,
    pub z_e: f64,
    pub replicas: u64,
}

/// Conditional simulation for one boundary: draw the center value, resolve
/// bridges, and compare both event frequencies against the closed forms.
pub fn flip_conditional(
    center: &[i64],
    h: f64,
    k_level: f64,
    boundary: &[f64],
    inner_replicas: usize,
    stream: &Stream,
) -> Result<FlipBoundaryRecord> {
    if inner_replicas < 2 {
        return Err(Error::stats("conditional flip needs at least two draws"));
    }
    let sides = flip_exact_sides(center.len(), h, k_level, boundary)?;
    let mut rng = stream.rng();
    let mut acc_g = Accumulator::new();
    let mut acc_e = Accumulator::new();
    let mut acc_diff = Accumulator::new();
    for _ in 0..inner_replicas {
        let ev = flip_realize(center, h, k_level, boundary, &mut rng)?;
        let g = ev.g_event as u8 as f64;
        let e = (ev.e_event && ev.center_value >= h) as u8 as f64;
        acc_g.push(g);
        acc_e.push(e);
        acc_diff.push(g - e);
    }
    // Normalize by the binomial error the exact probability implies, not the
    // empirical one: a rare event that never fires in n draws has empirical
    // se zero yet is perfectly consistent with a small exact p. Flooring the
    // error at one count keeps the diagnostic sane when the expected count
    // drops below a single draw.
    let z = |mc: &Accumulator, exact: f64| -> f64 {
        let n = mc.count() as f64;
        let se = (exact * (1.0 - exact) / n).sqrt().max(1.0 / n);
        (mc.mean() - exact) / se
    };
    Ok(FlipBoundaryRecord {
        boundary: boundary.to_vec(),
        beta: sides.beta,
        a_s: sides.a_s,
        p_g_exact: sides.p_g,
        p_e_exact: sides.p_e,
        mc_g: acc_g.mean(),
        mc_e: acc_e.mean(),
        diff_mean: acc_diff.mean(),
        diff_se: acc_diff.std_err(),
        holds: acc_diff.mean() <= 3.0 * acc_diff.std_err(),
        exact_holds: sides.p_g <= sides.p_e + 1e-12,
        z_g: z(&acc_g, sides.p_g),
        z_e: z(&acc_e, sides.p_e),
        replicas: inner_replicas as u64,
    })
}

/// Joint law of the 2d half-edge values around a vertex, for sampling
/// boundary configurations that look like the field instead of adversarial
/// ones. Each half-edge value splits into the average of its two lattice
/// endpoints plus an independent centered bridge fluctuation of variance
/// 1/4, which fixes every covariance entry in terms of the lattice Green
/// function at displacements 0, e1, 2 e1 and e1 + e2.
///
/// Construction cross-checks the Markov identities: regressing the center
/// value on the 2d half-edge values must give the flat weights `1/(2d)` and
/// residual variance `1/(4d)`, which ties all three distinct covariance
/// entries together. Failure to reproduce them is a build error.
#[derive(Clone, Debug)]
pub struct BoundaryLaw {
    d: usize,
    covariance: DMatrix<f64>,
    chol: Cholesky<f64, nalgebra::Dyn>,
}

impl BoundaryLaw {
    pub fn new(table: &GreenTable) -> Result<Self> {
        let d = table.dim();
        let g0 = table.lookup(&vec![0; d])?;
        let mut e1 = vec![0i64; d];
        e1[0] = 1;
        let g1 = table.lookup(&e1)?;
        let mut e2 = vec![0i64; d];
        e2[0] = 2;
        let g2 = table.lookup(&e2)?;
        let mut e11 = vec![0i64; d];
        e11[0] = 1;
        e11[1] = 1;
        let g11 = table.lookup(&e11)?;

        let n = 2 * d;
        let mut cov = DMatrix::zeros(n, n);
        for v in 0..n {
            for w in 0..n {
                cov[(v, w)] = if v == w {
                    0.5 * (g0 + g1) + 0.25
                } else if v / 2 == w / 2 {
                    // Opposite points on the same axis: displacement 2 e_a.
                    0.25 * (g0 + 2.0 * g1 + g2)
                } else {
                    // Different axes: displacement e_a +/- e_b.
                    0.25 * (g0 + 2.0 * g1 + g11)
                };
            }
        }

        // Markov cross-check: Cov(center, each half-edge point) is constant,
        // so the regression weights must come out flat at 1/(2d) and leave
        // residual variance 1/(4d).
        let c = DVector::from_element(n, 0.5 * (g0 + g1));
        let weights = cov
            .clone()
            .lu()
            .solve(&c)
            .ok_or_else(|| Error::stats("half-edge covariance is singular"))?;
        let flat = 1.0 / n as f64;
        let max_dev = weights.iter().map(|w| (w - flat).abs()).fold(0.0, f64::max);
        let residual = g0 - c.dot(&weights);
        let sigma0 = sigma0_sq(d)?;
        if max_dev > 1e-8 || (residual - sigma0).abs() > 1e-9 {
            return Err(Error::stats(format!(
                "half-edge covariance fails the Markov identities: weight dev {max_dev:.2e}, residual {residual} vs {sigma0}"
            )));
        }

        let chol = Cholesky::new(cov.clone())
            .ok_or_else(|| Error::stats("half-edge covariance not positive definite"))?;
        Ok(BoundaryLaw {
            d,
            covariance: cov,
            chol,
        })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let z = DVector::from_iterator(
            2 * self.d,
            (0..2 * self.d).map(|_| rng.sample::<f64, _>(StandardNormal)),
        );
        (self.chol.l() * z).iter().copied().collect()
    }
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct FlipReport {
    pub d: usize,
    pub h: f64,
    pub k_level: f64,
    pub boundary_samples: usize,
    pub inner_replicas: usize,
    pub records: Vec<FlipBoundaryRecord>,
    /// Boundaries whose Monte Carlo indicator holds.
    pub holds: usize,
    pub all_hold: bool,
    /// Boundaries whose closed-form indicator holds.
    pub exact_holds: usize,
    /// Largest |z| between closed forms and Monte Carlo over all records
    /// and both sides.
    pub max_agreement_z: f64,
}

/// Sample boundary configurations from the field law and run the conditional
/// comparison for each. The cap comes from the truncation schedule at level
/// `h` (with the matching intensity `h^2/2`).
pub fn flip_experiment(
    d: usize,
    h: f64,
    boundary_samples: usize,
    inner_replicas: usize,
    table: &GreenTable,
    stream: &Stream,
) -> Result<FlipReport> {
    if boundary_samples == 0 {
        return Err(Error::stats("flip experiment needs boundary samples"));
    }
    let levels = crate::cable::truncation_levels(h, 0.5 * h * h, &Default::default())?;
    let law = BoundaryLaw::new(table)?;
    let center = vec![0i64; d];
    let mut records = Vec::with_capacity(boundary_samples);
    let mut holds = 0usize;
    let mut exact_holds = 0usize;
    let mut max_z = 0.0f64;
    for b in 0..boundary_samples {
        let boundary = law.sample(&mut stream.child(tags::FIELD).child(b as u64).rng());
        let rec = flip_conditional(
            &center,
            h,
            levels.k,
            &boundary,
            inner_replicas,
            &stream.child(tags::REPLICA).child(b as u64),
        )?;
        holds += rec.holds as usize;
        exact_holds += rec.exact_holds as usize;
        max_z = max_z.max(rec.z_g.abs()).max(rec.z_e.abs());
        records.push(rec);
    }
    Ok(FlipReport {
        d,
        h,
        k_level: levels.k,
        boundary_samples,
        inner_replicas,
        all_hold: holds == records.len(),
        holds,
        exact_holds,
        records,
        max_agreement_z: max_z,
    })
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct FlipScanRow {
    pub h: f64,
    pub k_level: f64,
    pub holds: usize,
    pub boundary_samples: usize,
    pub all_hold: bool,
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct FlipScan {
    pub rows: Vec<FlipScanRow>,
    /// Largest grid level at which every sampled boundary satisfied the
    /// inequality. None when even the smallest level fails.
    pub h1: Option<f64>,
}

/// Default scan grid for locating the comparison threshold.
pub fn default_h1_grid() -> Vec<f64> {
    (1..=25).map(|i| 0.02 * i as f64).collect()
}

/// Run the flip comparison over a level grid and report the largest level at
/// which the inequality held for every sampled boundary.
pub fn flip_h1_scan(
    d: usize,
    grid: &[f64],
    boundary_samples: usize,
    inner_replicas: usize,
    table: &GreenTable,
    stream: &Stream,
) -> Result<FlipScan> {
    if grid.is_empty() {
        return Err(Error::stats("flip scan needs a level grid"));
    }
    let mut rows = Vec::with_capacity(grid.len());
    let mut h1 = None;
    for (i, &h) in grid.iter().enumerate() {
        let report = flip_experiment(
            d,
            h,
            boundary_samples,
            inner_replicas,
            table,
            &stream.child(i as u64),
        )?;
        if report.all_hold {
            h1 = Some(match h1 {
                None => h,
                Some(prev) => f64::max(prev, h),
            });
        }
        rows.push(FlipScanRow {
            h,
            k_level: report.k_level,
            holds: report.holds,
            boundary_samples,
            all_hold: report.all_hold,
        });
    }
    Ok(FlipScan { rows, h1 })
}

/// The textbook monotone coupling of two Bernoulli draws from one uniform:
/// when `p_f <= p_g`, the first indicator never exceeds the second.
pub fn coupled_bernoulli_pair(y: f64, p_f: f64, p_g: f64) -> (bool, bool) {
    (y <= p_f, y <= p_g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;
    use rand::Rng;
    use std::sync::OnceLock;

    fn table3() -> &'static GreenTable {
        static T: OnceLock<GreenTable> = OnceLock::new();
        T.get_or_init(|| GreenTable::build(3, 4, 1e-10).unwrap())
    }

    fn random_field<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
        (0..n)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect()
    }

    // -- level sets ---------------------------------------------------------

    #[test]
    fn level_set_extremes_open_everything_or_nothing() {
        let bbox = LatticeBox::cube(3, 0, 4).unwrap();
        let mut rng = Stream::root(11).rng();
        let field = random_field(bbox.vertex_count(), &mut rng);

        let all = vertex_level_set(&bbox, &field, -1e9, 0).unwrap();
        assert_eq!(all.open_vertex_count(), bbox.vertex_count());
        assert_eq!(all.open_edge_count(), bbox.edge_count());
        all.check_consistent().unwrap();

        let none = vertex_level_set(&bbox, &field, 1e9, 0).unwrap();
        assert_eq!(none.open_vertex_count(), 0);
        assert_eq!(none.open_edge_count(), 0);

        // Exactly one vertex above the level: a singleton component.
        let mut single = vec![-1.0; bbox.vertex_count()];
        single[13] = 2.0;
        let cfg = vertex_level_set(&bbox, &single, 0.0, 0).unwrap();
        assert_eq!(cfg.open_vertex_count(), 1);
        assert_eq!(cfg.open_edge_count(), 0);
        let lab = label_clusters(&cfg);
        assert_eq!(lab.sizes, vec![1]);
    }

    #[test]
    fn cable_edges_need_both_endpoints_and_the_bridge() {
        let bbox = LatticeBox::cube(3, 0, 4).unwrap();
        let stream = Stream::root(12);
        let mut rng = stream.rng();
        let field = random_field(bbox.vertex_count(), &mut rng);
        let uniforms = draw_edge_uniforms(&bbox, &mut rng);

        // Enormous h: every bridge probability is 1, so the cable set
        // coincides with full adjacency.
        let cfg = cable_level_set_with(&bbox, &field, 1e3, 7, &uniforms).unwrap();
        assert_eq!(cfg.open_vertex_count(), bbox.vertex_count());
        assert_eq!(cfg.open_edge_count(), bbox.edge_count());

        // An endpoint below -h closes the vertex and all its edges.
        let mut low = field.clone();
        low[0] = -5.0;
        let cfg = cable_level_set_with(&bbox, &low, 0.5, 7, &uniforms).unwrap();
        assert!(!cfg.open_vertex[0]);
        assert!(!cfg.open_edge[0] && !cfg.open_edge[1] && !cfg.open_edge[2]);
        cfg.check_consistent().unwrap();

        // Cable at level -h is a subset of the lattice set at level -h, and
        // strictly sparser with positive probability.
        let mut sparser = 0;
        for rep in 0..20 {
            let mut rng = stream.child(rep).rng();
            let field = random_field(bbox.vertex_count(), &mut rng);
            let uniforms = draw_edge_uniforms(&bbox, &mut rng);
            let cable = cable_level_set_with(&bbox, &field, 0.3, rep, &uniforms).unwrap();
            let lattice = vertex_level_set(&bbox, &field, -0.3, rep).unwrap();
            assert!(cable.subset_of(&lattice));
            if cable.open_edge_count() < lattice.open_edge_count() {
                sparser += 1;
            }
        }
        assert!(sparser > 0, "bridge thinning never removed an edge");
    }

    #[test]
    fn nested_level_sets_under_shared_randomness() {
        let bbox = LatticeBox::cube(3, 0, 4).unwrap();
        let stream = Stream::root(13);
        for rep in 0..10 {
            let mut rng = stream.child(rep).rng();
            let field = random_field(bbox.vertex_count(), &mut rng);
            let uniforms = draw_edge_uniforms(&bbox, &mut rng);
            let levels = [-0.8, -0.2, 0.0, 0.3, 0.9];
            for pair in levels.windows(2) {
                let (h, h2) = (pair[0], pair[1]);
                // Lattice: raising the level shrinks the configuration.
                let lo = vertex_level_set(&bbox, &field, h, rep).unwrap();
                let hi = vertex_level_set(&bbox, &field, h2, rep).unwrap();
                assert!(hi.subset_of(&lo));
                // Cable with shared uniforms: raising h (lowering the level
                // -h) grows it.
                let small = cable_level_set_with(&bbox, &field, h.abs(), rep, &uniforms).unwrap();
                let large = cable_level_set_with(&bbox, &field, h2.abs() + 1.0, rep, &uniforms)
                    .unwrap();
                assert!(small.subset_of(&large));
                // Band set is a subset of the one-sided cable set at the
                // same h: the band bridge probability is smaller, so a
                // shared uniform opens fewer edges.
                let band =
                    cable_band_level_set_with(&bbox, &field, 0.4, 2.0, rep, &uniforms).unwrap();
                let one_sided = cable_level_set_with(&bbox, &field, 0.4, rep, &uniforms).unwrap();
                assert!(band.subset_of(&one_sided));
            }
        }
    }

    // -- labeling vs brute force ---------------------------------------------

    /// Plain BFS labeling with ids in first-encounter order; crossing flags
    /// by reachability between opposite faces.
    fn bfs_labeling(cfg: &OpenConfig) -> ClusterLabeling {
        let bbox = &cfg.bbox;
        let d = bbox.dim();
        let nv = bbox.vertex_count();
        let mut component = vec![NO_COMPONENT; nv];
        let mut sizes = Vec::new();
        for start in 0..nv {
            if !cfg.open_vertex[start] || component[start] != NO_COMPONENT {
                continue;
            }
            let id = sizes.len() as u32;
            sizes.push(0);
            let mut queue = std::collections::VecDeque::from([start]);
            component[start] = id;
            while let Some(i) = queue.pop_front() {
                sizes[id as usize] += 1;
                let x = bbox.coords_of(i);
                for axis in 0..d {
                    for dir in [-1i64, 1] {
                        let mut y = x.clone();
                        y[axis] += dir;
                        if !bbox.contains(&y) {
                            continue;
                        }
                        let j = bbox.index_of(&y);
                        let slot = if dir == 1 { i * d + axis } else { j * d + axis };
                        if cfg.open_edge[slot] && component[j] == NO_COMPONENT {
                            component[j] = id;
                            queue.push_back(j);
                        }
                    }
                }
            }
        }
        let crossing = (0..d)
            .map(|axis| {
                // Reachability check independent of the component ids.
                let mut reach: Vec<bool> = (0..nv)
                    .map(|i| {
                        cfg.open_vertex[i] && bbox.coords_of(i)[axis] == bbox.lo()[axis]
                    })
                    .collect();
                let mut changed = true;
                while changed {
                    changed = false;
                    for i in 0..nv {
                        if !reach[i] {
                            continue;
                        }
                        let x = bbox.coords_of(i);
                        for ax in 0..d {
                            for dir in [-1i64, 1] {
                                let mut y = x.clone();
                                y[ax] += dir;
                                if !bbox.contains(&y) {
                                    continue;
                                }
                                let j = bbox.index_of(&y);
                                let slot =
                                    if dir == 1 { i * d + ax } else { j * d + ax };
                                if cfg.open_edge[slot] && !reach[j] {
                                    reach[j] = true;
                                    changed = true;
                                }
                            }
                        }
                    }
                }
                (0..nv).any(|i| reach[i] && bbox.coords_of(i)[axis] == bbox.hi()[axis] - 1)
            })
            .collect();
        ClusterLabeling {
            component,
            sizes,
            crossing,
        }
    }

    fn random_config<R: Rng>(bbox: &LatticeBox, rng: &mut R) -> OpenConfig {
        let d = bbox.dim();
        let mut cfg = OpenConfig::empty(bbox, 0.0, 0, false);
        for v in cfg.open_vertex.iter_mut() {
            *v = rng.gen::<f64>() < 0.55;
        }
        for edge in bbox.edges() {
            let i = bbox.index_of(&edge.base);
            let j = bbox.index_of(&edge.other());
            cfg.open_edge[i * d + edge.axis] =
                cfg.open_vertex[i] && cfg.open_vertex[j] && rng.gen::<f64>() < 0.8;
        }
        cfg
    }

    #[test]
    fn label_clusters_matches_bfs_on_random_small_boxes() {
        let mut rng = Stream::root(14).rng();
        for case in 0..200 {
            let side = if case % 2 == 0 { 3 } else { 4 };
            let bbox = LatticeBox::cube(3, 0, side).unwrap();
            let cfg = random_config(&bbox, &mut rng);
            cfg.check_consistent().unwrap();
            let fast = label_clusters(&cfg);
            let slow = bfs_labeling(&cfg);
            assert_eq!(fast.component, slow.component, "case {case}");
            assert_eq!(fast.sizes, slow.sizes, "case {case}");
            assert_eq!(fast.crossing, slow.crossing, "case {case}");
        }
    }

    #[test]
    fn full_and_disconnected_boxes_label_as_expected() {
        let bbox = LatticeBox::cube(3, 0, 4).unwrap();
        let field = vec![1.0; bbox.vertex_count()];
        let lab = label_clusters(&vertex_level_set(&bbox, &field, 0.0, 0).unwrap());
        assert_eq!(lab.sizes, vec![64]);
        assert!(lab.crossing.iter().all(|&c| c));

        // Checkerboard: all vertices open, no edges (parity blocks them
        // only if we close edges by hand, so build the config directly).
        let mut cfg = OpenConfig::empty(&bbox, 0.0, 0, false);
        for i in 0..bbox.vertex_count() {
            cfg.open_vertex[i] = bbox.coords_of(i).iter().sum::<i64>() % 2 == 0;
        }
        let lab = label_clusters(&cfg);
        assert_eq!(lab.sizes.len(), cfg.open_vertex_count());
        assert!(lab.sizes.iter().all(|&s| s == 1));
        assert!(!lab.crossing.iter().any(|&c| c));
    }

    #[test]
    fn restriction_keeps_interior_state() {
        let bbox = LatticeBox::cube(3, 0, 6).unwrap();
        let window = bbox.shrink(1).unwrap();
        let mut rng = Stream::root(15).rng();
        let cfg = random_config(&bbox, &mut rng);
        let res = restrict(&cfg, &window).unwrap();
        res.check_consistent().unwrap();
        for (iw, x) in window.vertices().enumerate() {
            let i = bbox.index_of(&x);
            assert_eq!(res.open_vertex[iw], cfg.open_vertex[i]);
            for axis in 0..3 {
                let mut y = x.clone();
                y[axis] += 1;
                if window.contains(&y) {
                    assert_eq!(res.open_edge[iw * 3 + axis], cfg.open_edge[i * 3 + axis]);
                } else {
                    assert!(!res.open_edge[iw * 3 + axis]);
                }
            }
        }
        assert!(restrict(&cfg, &LatticeBox::cube(3, -1, 4).unwrap()).is_err());
    }

    // -- crossing curves ------------------------------------------------------

    #[test]
    fn crossing_curves_are_monotone_and_deterministic() {
        let stream = Stream::root(16).child(tags::REPLICA);
        let grid = [-0.5, 0.0, 0.5, 1.0];
        let curve = crossing_curve(3, &[8], &grid, 30, CrossingMode::Lattice, &stream).unwrap();
        assert_eq!(curve.len(), grid.len());
        for w in curve.windows(2) {
            assert!(
                w[1].crossings <= w[0].crossings,
                "shared-field coupling must make counts non-increasing in h"
            );
        }
        // Same stream, same counts, bit for bit.
        let again = crossing_curve(3, &[8], &grid, 30, CrossingMode::Lattice, &stream).unwrap();
        for (a, b) in curve.iter().zip(&again) {
            assert_eq!(a.crossings, b.crossings);
            assert_eq!(a.theta.to_bits(), b.theta.to_bits());
        }

        let cable_grid = [0.0, 0.4, 0.8];
        let cable = crossing_curve(3, &[8], &cable_grid, 30, CrossingMode::Cable, &stream).unwrap();
        for w in cable.windows(2) {
            assert!(w[1].crossings <= w[0].crossings);
        }

        // Slab geometry runs and reports the right box side.
        let slab = crossing_curve(3, &[8], &[0.0], 10, CrossingMode::Slab, &stream).unwrap();
        assert_eq!(slab[0].l, 8);
        assert!(slab[0].replicas == 10);

        let band = crossing_curve(3, &[8], &[0.1, 0.3], 10, CrossingMode::CableBand, &stream)
            .unwrap();
        assert_eq!(band.len(), 2);
        assert!(crossing_curve(3, &[8], &[0.0], 10, CrossingMode::CableBand, &stream).is_err());
        assert!(crossing_curve(3, &[2], &[0.0], 10, CrossingMode::Lattice, &stream).is_err());
    }

    #[test]
    fn csv_rows_match_the_declared_header() {
        let p = CrossingPoint {
            l: 16,
            h: 0.25,
            mode: CrossingMode::Lattice,
            crossings: 7,
            replicas: 10,
            theta: 0.7,
            ci_lo: 0.4,
            ci_hi: 0.9,
        };
        assert_eq!(
            CrossingPoint::csv_header().split(',').count(),
            p.csv_row().split(',').count()
        );
        assert!(p.csv_row().starts_with("16,0.25,lattice,7,10,"));
    }

    // -- critical level -------------------------------------------------------

    fn toy_point(l: i64, h: f64, theta: f64, replicas: u64) -> CrossingPoint {
        let crossings = (theta * replicas as f64).round() as u64;
        CrossingPoint {
            l,
            h,
            mode: CrossingMode::Lattice,
            crossings,
            replicas,
            theta: crossings as f64 / replicas as f64,
            ci_lo: 0.0,
            ci_hi: 1.0,
        }
    }

    #[test]
    fn hstar_fixture_crosses_at_the_constructed_point() {
        // theta_small = 0.8 - h and theta_big = 1.1 - 2h intersect at 0.3.
        let grid = [0.1, 0.2, 0.3, 0.4, 0.5];
        let mut curves = Vec::new();
        for &h in &grid {
            curves.push(toy_point(16, h, 0.8 - h, 1000));
            curves.push(toy_point(32, h, 1.1 - 2.0 * h, 1000));
        }
        let est = estimate_hstar(&curves, 64, &Stream::root(17)).unwrap();
        match est {
            HStar::Estimate {
                value,
                ci_lo,
                ci_hi,
                ref pairs,
                ..
            } => {
                assert!((value - 0.3).abs() < 1e-12, "point estimate {value}");
                assert_eq!(pairs.len(), 1);
                assert!(ci_lo <= value && value <= ci_hi);
                assert!(ci_hi - ci_lo < 0.2, "bootstrap interval implausibly wide");
            }
            HStar::Indeterminate { .. } => panic!("fixture must cross"),
        }
    }

    #[test]
    fn hstar_without_a_crossing_is_indeterminate() {
        let grid = [0.1, 0.2, 0.3];
        let mut curves = Vec::new();
        for &h in &grid {
            curves.push(toy_point(16, h, 0.9 - h, 500));
            curves.push(toy_point(32, h, 0.8 - h, 500)); // parallel, below
        }
        match estimate_hstar(&curves, 16, &Stream::root(18)).unwrap() {
            HStar::Indeterminate { pairs_checked } => assert_eq!(pairs_checked, 1),
            HStar::Estimate { value, .. } => panic!("no crossing, got {value}"),
        }
        // Mismatched grids are rejected.
        let bad = vec![toy_point(16, 0.1, 0.5, 10), toy_point(32, 0.2, 0.5, 10)];
        assert!(estimate_hstar(&bad, 16, &Stream::root(18)).is_err());
    }

    #[test]
    fn saturated_plateaus_are_not_crossings() {
        // Both curves pinned at 1 for small h; the only sign change happens
        // between 0.3 and 0.5, straddling an exact zero at 0.4.
        let grid = [0.1, 0.2, 0.3, 0.4, 0.5];
        let small = [1.0, 1.0, 0.6, 0.5, 0.4];
        let big = [1.0, 1.0, 0.7, 0.5, 0.3];
        let cross = curve_intersection(&grid, &big, &small).unwrap();
        assert!((cross - 0.4).abs() < 1e-12, "crossing at {cross}");
    }

    #[test]
    fn critical_density_is_the_gaussian_tail_of_the_level() {
        assert!((estimate_pc(0.0, 3).unwrap() - 0.5).abs() < 1e-12);
        let p1 = estimate_pc(0.2, 3).unwrap();
        let p2 = estimate_pc(0.6, 3).unwrap();
        assert!(p1 < 0.5 && p2 < p1, "tail must fall as the level rises");
        // Variance enters through g(0): higher dimension, smaller g(0),
        // thinner tail at the same level.
        assert!(estimate_pc(0.5, 4).unwrap() < estimate_pc(0.5, 3).unwrap());
    }

    // -- sign clusters ----------------------------------------------------------

    #[test]
    fn sign_clusters_are_symmetric_at_level_zero() {
        let stream = Stream::root(19);
        let pts =
            sign_cluster_experiment(3, 10, 300, &[0.0, 3.5], &stream).unwrap();
        let at0 = &pts[0];
        // Symmetric in law; allow 3 binomial standard errors on the
        // difference of dependent frequencies (conservative).
        let n = at0.replicas as f64;
        let se = |t: f64| (t * (1.0 - t) / n).sqrt();
        let tol = 3.0 * (se(at0.pos_theta) + se(at0.neg_theta)).max(1e-3);
        assert!(
            (at0.pos_theta - at0.neg_theta).abs() <= tol,
            "pos {} vs neg {}",
            at0.pos_theta,
            at0.neg_theta
        );
        assert!(at0.both_theta <= at0.pos_theta.min(at0.neg_theta) + 1e-12);

        // Level 3.5 is ~7 marginal standard deviations: nothing spans.
        assert_eq!(pts[1].pos_crossings, 0);
        assert_eq!(pts[1].neg_crossings, n as u64, "lower set is everything");
    }

    // -- flip machinery -----------------------------------------------------------

    #[test]
    fn half_edge_geometry_has_2d_points_on_quarter_offsets() {
        let pts = quarter_points(&[0, 0, 0]).unwrap();
        assert_eq!(pts.len(), 6);
        for p in &pts {
            assert!((p.t - 0.25).abs() < 1e-15);
        }
        // Positive direction first on each axis, edges canonical.
        assert_eq!(pts[0].edge.base, vec![0, 0, 0]);
        assert_eq!(pts[0].edge.axis, 0);
        assert_eq!(pts[1].edge.base, vec![-1, 0, 0]);
        assert_eq!(pts[1].edge.axis, 0);
    }

    #[test]
    fn boundary_law_reproduces_the_markov_regression() {
        let law = BoundaryLaw::new(table3()).unwrap();
        assert_eq!(law.dim(), 3);
        let cov = law.covariance();
        // All three distinct entries present and positive definite.
        assert!(cov[(0, 0)] > cov[(0, 1)] && cov[(0, 1)] > 0.0);
        assert!((cov[(0, 1)] - cov[(1, 0)]).abs() < 1e-15);
        assert!(cov[(0, 2)] != cov[(0, 1)], "opposite vs orthogonal must differ");

        // Sampled covariance agrees with the law on the diagonal.
        let mut rng = Stream::root(20).rng();
        let mut acc = Accumulator::new();
        for _ in 0..20_000 {
            let b = law.sample(&mut rng);
            acc.push(b[0] * b[0]);
        }
        assert!(
            (acc.mean() - cov[(0, 0)]).abs() < 4.0 * acc.std_err(),
            "sampled variance {} vs {}",
            acc.mean(),
            cov[(0, 0)]
        );
    }

    #[test]
    fn exact_flip_sides_match_monte_carlo() {
        let h = 0.1;
        let k = crate::cable::truncation_levels(h, 0.5 * h * h, &Default::default())
            .unwrap()
            .k;
        let center = [0i64, 0, 0];

        // The fully pinned boundary at +K: E is certain, G needs a bridge.
        let all_k = vec![k; 6];
        let rec = flip_conditional(&center, h, k, &all_k, 40_000, &Stream::root(21)).unwrap();
        assert!(
            rec.z_g.abs() < 4.0 && rec.z_e.abs() < 4.0,
            "closed form disagrees with simulation: z_g {} z_e {}",
            rec.z_g,
            rec.z_e
        );
        assert!(rec.p_e_exact > 0.999, "pinned boundary must make E near-certain");

        // A mixed random boundary.
        let law = BoundaryLaw::new(table3()).unwrap();
        let b = law.sample(&mut Stream::root(22).rng());
        let rec = flip_conditional(&center, h, k, &b, 40_000, &Stream::root(23)).unwrap();
        assert!(rec.z_g.abs() < 4.0 && rec.z_e.abs() < 4.0);

        // Cap violation: both events die.
        let mut hot = b.clone();
        hot[2] = k + 1.0;
        let sides = flip_exact_sides(3, h, k, &hot).unwrap();
        assert_eq!(sides.p_e, 0.0);
        assert_eq!(sides.p_g, 0.0);
        let ev = flip_realize(&center, h, k, &hot, &mut Stream::root(24).rng()).unwrap();
        assert!(!ev.e_event && !ev.g_event);
    }

    #[test]
    fn realized_events_keep_g_inside_e() {
        let law = BoundaryLaw::new(table3()).unwrap();
        let mut rng = Stream::root(25).rng();
        let center = [0i64, 0, 0];
        for _ in 0..500 {
            let b = law.sample(&mut rng);
            let ev = flip_realize(&center, 0.3, 3.0, &b, &mut rng).unwrap();
            assert_eq!(ev.boundary.len(), 6);
            if ev.g_event {
                assert!(ev.e_event, "G occurred without E");
            }
            for v in 0..6 {
                if ev.f_dir[v] {
                    assert!(ev.center_value >= -0.3 && ev.boundary[v] >= -0.3);
                }
            }
        }
        assert!(flip_realize(&center, 0.0, 3.0, &[0.0; 6], &mut rng).is_err());
        assert!(flip_realize(&center, 1.5, 3.0, &[0.0; 6], &mut rng).is_err());
    }

    #[test]
    fn comparison_holds_for_sampled_boundaries_at_a_small_level() {
        let report =
            flip_experiment(3, 0.02, 30, 2_000, table3(), &Stream::root(26)).unwrap();
        assert!(
            report.all_hold,
            "inequality failed for {} of {} boundaries",
            report.boundary_samples - report.holds,
            report.boundary_samples
        );
        assert!(report.k_level > 3.0, "cap at h = 0.02 should be deep");
        assert!(report.max_agreement_z < 5.0);
    }

    #[test]
    fn scan_reports_the_largest_passing_level() {
        let scan = flip_h1_scan(
            3,
            &[0.02, 0.3, 0.5],
            25,
            1_500,
            table3(),
            &Stream::root(27),
        )
        .unwrap();
        assert_eq!(scan.rows.len(), 3);
        let h1 = scan.h1.expect("smallest level must pass");
        assert!(h1 >= 0.02);
        // The reported level is the largest grid value that fully held.
        let max_hold = scan
            .rows
            .iter()
            .filter(|r| r.all_hold)
            .map(|r| r.h)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(h1, max_hold);
        assert_eq!(default_h1_grid().len(), 25);
        assert!((default_h1_grid()[24] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn shared_uniform_coupling_is_monotone() {
        let mut rng = Stream::root(28).rng();
        for _ in 0..1000 {
            let y = rng.gen::<f64>();
            let a = rng.gen::<f64>();
            let b = rng.gen::<f64>();
            let (p_f, p_g) = if a <= b { (a, b) } else { (b, a) };
            let (first, second) = coupled_bernoulli_pair(y, p_f, p_g);
            assert!(!first || second, "indicator order violated");
        }
    }
}
