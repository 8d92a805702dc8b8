//! Multiscale certification machinery.
//!
//! Events are tracked on a geometric ladder of scales. At the bottom sit
//! five kinds of seed events measured in a small halo around each coarse
//! vertex (field cap, field floor, edge marks, trace spanning, trace mass).
//! A coarse box at level `n` is flagged when two well-separated sub-boxes
//! are flagged at level `n - 1`; iterating this down to the seeds turns one
//! long-range observation into many nearly independent local ones, which is
//! what drives the doubly exponential decay targets in [`doubling_target`].
//!
//! The module provides
//!   * [`ScaleSystem`]: the ladder `L_n = ratio^n * seed_side` plus the
//!     separation rule, with the canonical constants or surrogate ones for
//!     cheap exact oracles,
//!   * [`classify_seeds`]: evaluate the five seed families on sampled layers,
//!   * [`eval_recursive`] / [`lift_true_set`]: sparse evaluation of the
//!     two-children recursion with verifiable witnesses,
//!   * [`find_bad_star_path`] / [`bad_star_circuit`]: planar duality between
//!     star-connected bad paths and circuits of coarse vertices,
//!   * [`cascade_certificate`]: extract, from a bad path crossing an annulus,
//!     a certified same-family separated pair one level up,
//!   * [`decoupling_test_interlacement`] / [`decoupling_test_gff`]: empirical
//!     two-box decoupling checks with sprinkling,
//!   * [`renorm_decay_experiment`]: measure how fast the flagged-box density
//!     collapses along the ladder for iid or field-driven seeds.

use std::collections::{HashMap, HashSet};
use std::fmt;

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::gff::DirichletSampler;
use crate::interlace::{InterlacementEngine, LocalTimeField, UnionFind};
use crate::lattice::LatticeBox;
use crate::rng::{tags, Stream};
use crate::stats::{wilson_interval, Accumulator, PointEstimate};

/// Fraction by which intensities are sprinkled between coupled levels.
pub const SPRINKLE_DELTA: f64 = 1.0 / 6.0;

/// Number of concentric shells consumed by one cascade step.
pub fn cascade_shells(d: usize) -> i64 {
    5 * 4i64.pow(d as u32) + 1
}

/// Divisor in the pair-separation rule: a pair at level `n` must be at
/// least `L_n / separation_divisor(d)` apart in sup norm.
pub fn separation_divisor(d: usize) -> i64 {
    4 * cascade_shells(d)
}

/// Canonical ratio between consecutive scales. Sixteen times the shell
/// count, so that one cascade step fits all its shells inside twice the
/// next scale with room to spare.
pub fn scale_ratio(d: usize) -> i64 {
    16 * cascade_shells(d)
}

/// Decay target at ladder level `n`: probabilities should square at every
/// level once they start below the fixed point, giving `2^(-2^n)`.
pub fn doubling_target(n: usize) -> f64 {
    if n >= 11 {
        // 2^(-2048) and beyond underflow f64; the target is exactly zero
        // at double precision.
        return 0.0;
    }
    2f64.powi(-(1i64 << n) as i32)
}

/// Field cap used by the bottom-scale seed events: `c3 * sqrt(ln L0)`.
pub fn field_cap_schedule(c3: f64, seed_side: i64) -> Result<f64> {
    if c3 <= 0.0 || !c3.is_finite() {
        return Err(Error::parameter("field cap coefficient must be positive"));
    }
    if seed_side < 2 {
        return Err(Error::parameter(
            "field cap schedule needs seed_side >= 2 for a positive logarithm",
        ));
    }
    Ok(c3 * (seed_side as f64).ln().sqrt())
}

/// Lower bound on the edge-mark retention probability: `exp(-c4 / L0^d)`.
pub fn edge_mark_schedule(c4: f64, seed_side: i64, d: usize) -> Result<f64> {
    if c4 <= 0.0 || !c4.is_finite() {
        return Err(Error::parameter("edge mark coefficient must be positive"));
    }
    if seed_side < 1 || d == 0 {
        return Err(Error::parameter("edge mark schedule needs seed_side >= 1, d >= 1"));
    }
    Ok((-c4 / (seed_side as f64).powi(d as i32)).exp())
}

/// Smallest admissible seed scale for intensity `u`: `ceil(c5 * u^-7)`.
pub fn seed_scale_schedule(c5: f64, u: f64) -> Result<i64> {
    if c5 <= 0.0 || !c5.is_finite() {
        return Err(Error::parameter("seed scale coefficient must be positive"));
    }
    if u <= 0.0 || !u.is_finite() {
        return Err(Error::parameter("seed scale schedule needs u > 0"));
    }
    let raw = c5 * u.powi(-7);
    if raw >= i64::MAX as f64 / 2.0 {
        return Err(Error::numerics("seed scale overflows i64"));
    }
    Ok(raw.ceil() as i64)
}

/// Union bound for a field cap breach over `box_count` Gaussians of the
/// given variance. Crude but an honest upper bound, used to sanity-check
/// calibrations.
pub fn field_cap_union_bound(k: f64, box_count: usize, var: f64) -> f64 {
    (box_count as f64 * crate::stats::normal_upper_tail(k / var.sqrt())).min(1.0)
}

/// Geometric ladder of scales with the pair-separation rule.
#[derive(Debug, Clone, Serialize)]
pub struct ScaleSystem {
    pub d: usize,
    /// Bottom scale `L_0`; seed vertices live on `seed_side * Z^d`.
    pub seed_side: i64,
    /// `L_n = ratio^n * seed_side`.
    pub ratio: i64,
    /// Pairs at level `n` count when `sup |x1 - x2| >= L_n / sep_div`.
    pub sep_div: i64,
    /// Shells available per cascade step; only canonical ladders carry one.
    pub shells: Option<i64>,
    pub levels: Vec<i64>,
    pub surrogate: bool,
}

/// Build the scale ladder up to level `n_max`. With `surrogate = None` the
/// canonical constants for dimension `d` are used; a surrogate
/// `(ratio, sep_div)` gives small ladders whose recursion admits exact
/// combinatorial oracles.
pub fn build_scales(
    d: usize,
    seed_side: i64,
    n_max: usize,
    surrogate: Option<(i64, i64)>,
) -> Result<ScaleSystem> {
    if d < 2 {
        return Err(Error::geometry("scale ladders need d >= 2"));
    }
    if seed_side < 1 {
        return Err(Error::parameter("seed_side must be at least 1"));
    }
    let (ratio, sep_div, shells, surrogate_flag) = match surrogate {
        None => (scale_ratio(d), separation_divisor(d), Some(cascade_shells(d)), false),
        Some((r, s)) => {
            if r < 2 || s < 1 || s > r {
                return Err(Error::parameter(
                    "surrogate ladder needs ratio >= 2 and 1 <= sep_div <= ratio",
                ));
            }
            (r, s, None, true)
        }
    };
    let mut levels = Vec::with_capacity(n_max + 1);
    let mut cur = seed_side;
    levels.push(cur);
    for _ in 0..n_max {
        cur = cur
            .checked_mul(ratio)
            .ok_or_else(|| Error::numerics("scale ladder overflows i64"))?;
        levels.push(cur);
    }
    Ok(ScaleSystem { d, seed_side, ratio, sep_div, shells, levels, surrogate: surrogate_flag })
}

impl ScaleSystem {
    pub fn n_max(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn level(&self, n: usize) -> Result<i64> {
        self.levels
            .get(n)
            .copied()
            .ok_or_else(|| Error::parameter(format!("level {n} beyond ladder top {}", self.n_max())))
    }

    /// Whether every coordinate of `x` is a multiple of `L_n`.
    pub fn aligned(&self, x: &[i64], n: usize) -> Result<bool> {
        let l = self.level(n)?;
        self.check_dim(x)?;
        Ok(x.iter().all(|&c| c.rem_euclid(l) == 0))
    }

    /// Origin of the level-`n` cell containing `z` (componentwise floor).
    pub fn cell_origin(&self, z: &[i64], n: usize) -> Result<Vec<i64>> {
        let l = self.level(n)?;
        self.check_dim(z)?;
        Ok(z.iter().map(|&c| c.div_euclid(l) * l).collect())
    }

    /// Separation rule at level `n`, evaluated in exact integer arithmetic:
    /// `sup |a - b| * sep_div >= L_n`.
    pub fn separated(&self, a: &[i64], b: &[i64], n: usize) -> Result<bool> {
        let l = self.level(n)?;
        self.check_dim(a)?;
        self.check_dim(b)?;
        let gap = linf(a, b);
        Ok((gap as i128) * (self.sep_div as i128) >= l as i128)
    }

    fn check_dim(&self, x: &[i64]) -> Result<()> {
        if x.len() != self.d {
            return Err(Error::geometry(format!(
                "vertex dimension {} does not match ladder dimension {}",
                x.len(),
                self.d
            )));
        }
        Ok(())
    }
}

fn linf(a: &[i64], b: &[i64]) -> i64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).max().unwrap_or(0)
}

/// The five seed event families measured around every bottom-scale vertex.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum SeedFamily {
    /// Field stays below the cap `k` on the halo box.
    FieldBelowCap,
    /// Field stays above `-k` on the halo box.
    FieldAboveFloor,
    /// Every edge mark inside the halo box is retained.
    MarksAllOn,
    /// Each corner of the double box carries a heavy trace component and
    /// those components hook up inside the double box.
    TraceSpans,
    /// No corner of the double box carries excessive trace mass.
    TraceMassBounded,
}

impl SeedFamily {
    pub const ALL: [SeedFamily; 5] = [
        SeedFamily::FieldBelowCap,
        SeedFamily::FieldAboveFloor,
        SeedFamily::MarksAllOn,
        SeedFamily::TraceSpans,
        SeedFamily::TraceMassBounded,
    ];

    pub fn index(self) -> usize {
        match self {
            SeedFamily::FieldBelowCap => 0,
            SeedFamily::FieldAboveFloor => 1,
            SeedFamily::MarksAllOn => 2,
            SeedFamily::TraceSpans => 3,
            SeedFamily::TraceMassBounded => 4,
        }
    }
}

impl fmt::Display for SeedFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SeedFamily::FieldBelowCap => "field_below_cap",
            SeedFamily::FieldAboveFloor => "field_above_floor",
            SeedFamily::MarksAllOn => "marks_all_on",
            SeedFamily::TraceSpans => "trace_spans",
            SeedFamily::TraceMassBounded => "trace_mass_bounded",
        };
        f.write_str(s)
    }
}

/// Thresholds entering the seed classification.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SeedParams {
    /// Intensity scale for trace mass thresholds.
    pub u: f64,
    /// Field cap and floor level.
    pub k: f64,
    /// Edge-mark retention probability (recorded for provenance; the marks
    /// themselves arrive already sampled).
    pub p: f64,
}

/// Sampled layers the seeds are read from. Edge slots follow the lattice
/// convention `vertex_index * d + axis`, defined whenever both endpoints
/// lie in the window.
pub struct SeedLayers<'a> {
    pub window: &'a LatticeBox,
    pub local_times: &'a [f64],
    pub trace_edge: &'a [bool],
    pub field: &'a [f64],
    pub edge_marks: &'a [bool],
}

/// Outcome of the five families at one bottom-scale vertex.
#[derive(Debug, Clone, Serialize)]
pub struct SeedOutcome {
    pub x: Vec<i64>,
    pub field_below_cap: bool,
    pub field_above_floor: bool,
    pub marks_all_on: bool,
    pub trace_spans: bool,
    pub trace_mass_bounded: bool,
    pub params: SeedParams,
}

impl SeedOutcome {
    pub fn flags(&self) -> [bool; 5] {
        [
            self.field_below_cap,
            self.field_above_floor,
            self.marks_all_on,
            self.trace_spans,
            self.trace_mass_bounded,
        ]
    }

    pub fn good(&self) -> bool {
        self.flags().iter().all(|&b| b)
    }

    pub fn bad_families(&self) -> Vec<SeedFamily> {
        SeedFamily::ALL
            .iter()
            .copied()
            .filter(|f| !self.flags()[f.index()])
            .collect()
    }
}

/// Convert the set of traversed edges reported by an interlacement sample
/// into the dense slot layout used by [`SeedLayers`].
pub fn edge_slots_from_crossings(
    window: &LatticeBox,
    crossed: &HashSet<(u32, u8)>,
) -> Vec<bool> {
    let d = window.dim();
    let mut slots = vec![false; window.vertex_count() * d];
    for &(v, axis) in crossed {
        slots[v as usize * d + axis as usize] = true;
    }
    slots
}

/// Sample iid edge marks over the window with retention probability `p`.
pub fn bernoulli_marks<R: Rng>(window: &LatticeBox, p: f64, rng: &mut R) -> Result<Vec<bool>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::parameter("mark probability must lie in [0, 1]"));
    }
    let d = window.dim();
    let n = window.vertex_count();
    let mut slots = vec![false; n * d];
    for i in 0..n {
        let c = window.coords_of(i);
        for axis in 0..d {
            let mut nb = c.clone();
            nb[axis] += 1;
            if window.contains(&nb) {
                slots[i * d + axis] = rng.gen::<f64>() < p;
            }
        }
    }
    Ok(slots)
}

/// All bottom-scale vertices whose halo box `x + [-1, 2 L0 + 1)^d` fits in
/// the window.
fn seed_candidates(window: &LatticeBox, l0: i64) -> Vec<Vec<i64>> {
    let d = window.dim();
    let mut axes: Vec<Vec<i64>> = Vec::with_capacity(d);
    for axis in 0..d {
        let lo = window.lo()[axis];
        let hi = window.hi()[axis];
        let mut vals = Vec::new();
        // need x - 1 >= lo and x + 2*l0 <= hi - 1
        let first = (lo + 1).div_euclid(l0) * l0 + if (lo + 1).rem_euclid(l0) == 0 { 0 } else { l0 };
        let mut x = first;
        while x + 2 * l0 <= hi - 1 {
            vals.push(x);
            x += l0;
        }
        axes.push(vals);
    }
    let mut out = Vec::new();
    let mut idx = vec![0usize; d];
    if axes.iter().any(|a| a.is_empty()) {
        return out;
    }
    loop {
        out.push((0..d).map(|i| axes[i][idx[i]]).collect());
        let mut axis = d;
        loop {
            if axis == 0 {
                return out;
            }
            axis -= 1;
            idx[axis] += 1;
            if idx[axis] < axes[axis].len() {
                break;
            }
            idx[axis] = 0;
        }
    }
}

/// Evaluate the five seed families at every admissible bottom-scale vertex.
///
/// The field cap, floor, and mark events read the halo box
/// `x + [-1, 2 L0 + 1)^d`; the trace events read the double box
/// `x + [0, 2 L0)^d`, whose `2^d` corner boxes of side `L0` each must carry
/// a trace component of mass above `3/4 * u * L0^d` hooking up inside the
/// double box, while no corner may exceed total mass `5/4 * u * L0^d`.
pub fn classify_seeds(
    layers: &SeedLayers<'_>,
    params: &SeedParams,
    scales: &ScaleSystem,
) -> Result<Vec<SeedOutcome>> {
    let window = layers.window;
    let d = window.dim();
    if d != scales.d {
        return Err(Error::geometry("window dimension does not match scale ladder"));
    }
    if params.u <= 0.0 || params.k <= 0.0 {
        return Err(Error::parameter("seed classification needs u > 0 and k > 0"));
    }
    let n = window.vertex_count();
    if layers.local_times.len() != n || layers.field.len() != n {
        return Err(Error::geometry("vertex layer length does not match window"));
    }
    if layers.trace_edge.len() != n * d || layers.edge_marks.len() != n * d {
        return Err(Error::geometry("edge layer length does not match window"));
    }
    let l0 = scales.seed_side;
    let candidates = seed_candidates(window, l0);
    if candidates.is_empty() {
        return Err(Error::geometry(
            "window too small: no halo box fits; grow the window or shrink the seed scale",
        ));
    }
    let cell = (l0 as f64).powi(d as i32);
    let heavy = 0.75 * params.u * cell;
    let excess = 1.25 * params.u * cell;
    let full_mask: u64 = (1u64 << (1 << d)) - 1;

    let mut out = Vec::with_capacity(candidates.len());
    for x in candidates {
        let halo_lo: Vec<i64> = x.iter().map(|&c| c - 1).collect();
        let halo_hi: Vec<i64> = x.iter().map(|&c| c + 2 * l0 + 1).collect();
        let halo = LatticeBox::new(halo_lo, halo_hi)?;

        let mut below_cap = true;
        let mut above_floor = true;
        let mut marks_on = true;
        for v in halo.vertices() {
            let vi = window.index_of(&v);
            let phi = layers.field[vi];
            if phi > params.k {
                below_cap = false;
            }
            if phi < -params.k {
                above_floor = false;
            }
            for axis in 0..d {
                let mut nb = v.clone();
                nb[axis] += 1;
                if halo.contains(&nb) && !layers.edge_marks[vi * d + axis] {
                    marks_on = false;
                }
            }
        }

        // Trace events on the double box. Two union-finds over window
        // indices: one restricted to edges inside a single corner, one over
        // all edges of the double box.
        let dbl_lo = x.clone();
        let dbl_hi: Vec<i64> = x.iter().map(|&c| c + 2 * l0).collect();
        let dbl = LatticeBox::new(dbl_lo, dbl_hi)?;
        let mut uf_corner = UnionFind::new(n);
        let mut uf_big = UnionFind::new(n);
        for v in dbl.vertices() {
            let vi = window.index_of(&v);
            for axis in 0..d {
                let mut nb = v.clone();
                nb[axis] += 1;
                if dbl.contains(&nb) && layers.trace_edge[vi * d + axis] {
                    let ni = window.index_of(&nb);
                    uf_big.union(vi, ni);
                    // crossing a corner boundary exactly when the offset
                    // along this axis steps from l0 - 1 to l0 (mod l0 grid
                    // of side 2 l0 splits at l0)
                    if (v[axis] - x[axis] + 1).rem_euclid(2 * l0) != l0 {
                        uf_corner.union(vi, ni);
                    }
                }
            }
        }
        let mut corner_totals = vec![0.0f64; 1 << d];
        let mut comp_mass: HashMap<usize, f64> = HashMap::new();
        let mut comp_corner: HashMap<usize, usize> = HashMap::new();
        for v in dbl.vertices() {
            let vi = window.index_of(&v);
            let mass = layers.local_times[vi];
            let mut corner = 0usize;
            for axis in 0..d {
                if v[axis] - x[axis] >= l0 {
                    corner |= 1 << axis;
                }
            }
            corner_totals[corner] += mass;
            let root = uf_corner.find(vi);
            *comp_mass.entry(root).or_insert(0.0) += mass;
            comp_corner.entry(root).or_insert(corner);
        }
        let mut big_masks: HashMap<usize, u64> = HashMap::new();
        for (root, mass) in &comp_mass {
            if *mass > heavy {
                let big_root = uf_big.find(*root);
                *big_masks.entry(big_root).or_insert(0) |= 1u64 << comp_corner[root];
            }
        }
        let spans = big_masks.values().any(|&m| m == full_mask);
        let bounded = corner_totals.iter().all(|&t| t < excess);

        out.push(SeedOutcome {
            x,
            field_below_cap: below_cap,
            field_above_floor: above_floor,
            marks_all_on: marks_on,
            trace_spans: spans,
            trace_mass_bounded: bounded,
            params: *params,
        });
    }
    Ok(out)
}

/// One evaluation of the two-children recursion.
#[derive(Debug, Clone, Serialize)]
pub struct RecursiveEventEval {
    pub n: usize,
    pub x: Vec<i64>,
    pub family: SeedFamily,
    pub outcome: bool,
    /// Separated flagged pair at level `n - 1` when the event holds, `None`
    /// at the bottom level.
    pub witness: Option<(Vec<i64>, Vec<i64>)>,
}

impl RecursiveEventEval {
    /// Re-check the reported outcome against the truth set it was computed
    /// from: membership at the bottom, alignment plus membership plus
    /// separation of the witness pair above.
    pub fn verify(&self, true_children: &HashSet<Vec<i64>>, scales: &ScaleSystem) -> Result<bool> {
        if self.n == 0 {
            return Ok(self.outcome == true_children.contains(&self.x));
        }
        match (&self.witness, self.outcome) {
            (None, false) => Ok(true),
            (None, true) => Ok(false),
            (Some(_), false) => Ok(false),
            (Some((a, b)), true) => {
                let l = scales.level(self.n)?;
                let in_cell = |z: &[i64]| {
                    z.iter().zip(&self.x).all(|(&c, &o)| c >= o && c < o + l)
                };
                Ok(true_children.contains(a)
                    && true_children.contains(b)
                    && scales.aligned(a, self.n - 1)?
                    && scales.aligned(b, self.n - 1)?
                    && in_cell(a)
                    && in_cell(b)
                    && scales.separated(a, b, self.n)?)
            }
        }
    }
}

/// Evaluate the recursion at level `n` and cell origin `x` from the set of
/// level-`n-1` vertices where the event holds (for `n = 0`, from the seed
/// truth set itself). Sparse: only the truth set is scanned, so enormous
/// cells cost nothing when few children are flagged.
pub fn eval_recursive(
    true_children: &HashSet<Vec<i64>>,
    scales: &ScaleSystem,
    family: SeedFamily,
    n: usize,
    x: &[i64],
) -> Result<RecursiveEventEval> {
    if !scales.aligned(x, n)? {
        return Err(Error::geometry(format!("cell origin {x:?} not aligned at level {n}")));
    }
    if n == 0 {
        return Ok(RecursiveEventEval {
            n,
            x: x.to_vec(),
            family,
            outcome: true_children.contains(x),
            witness: None,
        });
    }
    let l = scales.level(n)?;
    let mut inside: Vec<&Vec<i64>> = true_children
        .iter()
        .filter(|z| z.iter().zip(x).all(|(&c, &o)| c >= o && c < o + l))
        .collect();
    for z in &inside {
        if !scales.aligned(z, n - 1)? {
            return Err(Error::geometry(format!(
                "truth set entry {z:?} not aligned at level {}",
                n - 1
            )));
        }
    }
    // hash order is nondeterministic; sort so the reported witness is stable
    inside.sort();
    for i in 0..inside.len() {
        for j in (i + 1)..inside.len() {
            if scales.separated(inside[i], inside[j], n)? {
                return Ok(RecursiveEventEval {
                    n,
                    x: x.to_vec(),
                    family,
                    outcome: true,
                    witness: Some((inside[i].clone(), inside[j].clone())),
                });
            }
        }
    }
    Ok(RecursiveEventEval { n, x: x.to_vec(), family, outcome: false, witness: None })
}

/// Lift a truth set one level: returns the origins of the level-`n` cells
/// containing a separated flagged pair of level-`n-1` vertices.
pub fn lift_true_set(
    true_lower: &HashSet<Vec<i64>>,
    scales: &ScaleSystem,
    n: usize,
) -> Result<HashSet<Vec<i64>>> {
    if n == 0 {
        return Err(Error::parameter("lift starts at level 1"));
    }
    let mut cells: HashMap<Vec<i64>, Vec<&Vec<i64>>> = HashMap::new();
    for z in true_lower {
        if !scales.aligned(z, n - 1)? {
            return Err(Error::geometry(format!(
                "truth set entry {z:?} not aligned at level {}",
                n - 1
            )));
        }
        cells.entry(scales.cell_origin(z, n)?).or_default().push(z);
    }
    let mut out = HashSet::new();
    for (origin, mut members) in cells {
        if members.len() < 2 {
            continue;
        }
        members.sort();
        'scan: for i in 0..members.len() {
            for j in (i + 1)..members.len() {
                if scales.separated(members[i], members[j], n)? {
                    out.insert(origin);
                    break 'scan;
                }
            }
        }
    }
    Ok(out)
}

/// Evaluate the recursion at level `n` directly from the seed truth set by
/// lifting `n` times.
pub fn eval_recursive_from_seeds(
    seed_true: &HashSet<Vec<i64>>,
    scales: &ScaleSystem,
    family: SeedFamily,
    n: usize,
    x: &[i64],
) -> Result<RecursiveEventEval> {
    if n == 0 {
        return eval_recursive(seed_true, scales, family, 0, x);
    }
    let mut cur = seed_true.clone();
    for k in 1..n {
        cur = lift_true_set(&cur, scales, k)?;
    }
    eval_recursive(&cur, scales, family, n, x)
}

/// Index range for the planar coarse lattice the duality argument runs on.
/// The ambient model lives in `d >= 3`, but the star-path step projects the
/// coarse goodness bitmap onto the plane spanned by the two long axes, so
/// this little grid is deliberately two dimensional and kept separate from
/// the `d >= 3` lattice boxes. Coordinates are in coarse units (one step
/// per seed cell).
#[derive(Debug, Clone, Serialize)]
pub struct PlaneGrid {
    pub lo: [i64; 2],
    /// Exclusive upper corner.
    pub hi: [i64; 2],
}

impl PlaneGrid {
    pub fn new(lo: [i64; 2], hi: [i64; 2]) -> Result<Self> {
        if hi[0] <= lo[0] || hi[1] <= lo[1] {
            return Err(Error::geometry("plane grid needs hi > lo on both axes"));
        }
        let cells = (hi[0] - lo[0]).checked_mul(hi[1] - lo[1]);
        match cells {
            Some(c) if c <= (usize::MAX / 2) as i64 => Ok(PlaneGrid { lo, hi }),
            _ => Err(Error::geometry("plane grid too large to index")),
        }
    }

    pub fn vertex_count(&self) -> usize {
        ((self.hi[0] - self.lo[0]) * (self.hi[1] - self.lo[1])) as usize
    }

    pub fn contains(&self, y: [i64; 2]) -> bool {
        (0..2).all(|a| y[a] >= self.lo[a] && y[a] < self.hi[a])
    }

    pub fn index_of(&self, y: [i64; 2]) -> usize {
        let w = (self.hi[1] - self.lo[1]) as usize;
        (y[0] - self.lo[0]) as usize * w + (y[1] - self.lo[1]) as usize
    }

    pub fn coords_of(&self, i: usize) -> [i64; 2] {
        let w = (self.hi[1] - self.lo[1]) as usize;
        [self.lo[0] + (i / w) as i64, self.lo[1] + (i % w) as i64]
    }
}

fn plane_linf(a: [i64; 2], b: [i64; 2]) -> i64 {
    (a[0] - b[0]).abs().max((a[1] - b[1]).abs())
}

/// Breadth-first search for a star-connected (all eight neighbours) path
/// of bad vertices from the box `sup |y - center| <= m` out to the shell
/// `sup |y - center| >= n_radius`, on the planar coarse grid. Returns the
/// path inner to outer, or `None`.
pub fn find_bad_star_path(
    grid: &PlaneGrid,
    bad: &[bool],
    center: [i64; 2],
    m: i64,
    n_radius: i64,
) -> Result<Option<Vec<[i64; 2]>>> {
    star_path_validate(grid, bad, center, m, n_radius)?;
    let count = grid.vertex_count();
    let mut parent: Vec<usize> = vec![usize::MAX; count];
    let mut seen = vec![false; count];
    let mut queue = std::collections::VecDeque::new();
    for i in 0..count {
        if bad[i] && plane_linf(grid.coords_of(i), center) <= m {
            seen[i] = true;
            parent[i] = i;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let c = grid.coords_of(i);
        if plane_linf(c, center) >= n_radius {
            let mut path = vec![i];
            let mut cur = i;
            while parent[cur] != cur {
                cur = parent[cur];
                path.push(cur);
            }
            path.reverse();
            return Ok(Some(path.into_iter().map(|j| grid.coords_of(j)).collect()));
        }
        for dx in -1..=1i64 {
            for dy in -1..=1i64 {
                if dx == 0 && dy == 0 {
                    continue;
                }
                let nb = [c[0] + dx, c[1] + dy];
                if !grid.contains(nb) {
                    continue;
                }
                let j = grid.index_of(nb);
                if bad[j] && !seen[j] {
                    seen[j] = true;
                    parent[j] = i;
                    queue.push_back(j);
                }
            }
        }
    }
    Ok(None)
}

/// Planar dual of [`find_bad_star_path`]: a star-circuit of bad vertices
/// separates the inner box from the outer shell exactly when no axis
/// connected path of good vertices escapes. Returns whether such a circuit
/// exists.
pub fn bad_star_circuit(
    grid: &PlaneGrid,
    bad: &[bool],
    center: [i64; 2],
    m: i64,
    n_radius: i64,
) -> Result<bool> {
    star_path_validate(grid, bad, center, m, n_radius)?;
    let count = grid.vertex_count();
    let mut seen = vec![false; count];
    let mut queue = std::collections::VecDeque::new();
    for i in 0..count {
        if !bad[i] && plane_linf(grid.coords_of(i), center) <= m {
            seen[i] = true;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let c = grid.coords_of(i);
        if plane_linf(c, center) >= n_radius {
            return Ok(false);
        }
        for (dx, dy) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
            let nb = [c[0] + dx, c[1] + dy];
            if !grid.contains(nb) {
                continue;
            }
            let j = grid.index_of(nb);
            if !bad[j] && !seen[j] {
                seen[j] = true;
                queue.push_back(j);
            }
        }
    }
    Ok(true)
}

fn star_path_validate(
    grid: &PlaneGrid,
    bad: &[bool],
    center: [i64; 2],
    m: i64,
    n_radius: i64,
) -> Result<()> {
    if bad.len() != grid.vertex_count() {
        return Err(Error::geometry("bad-vertex layer length does not match grid"));
    }
    if m < 0 || m >= n_radius {
        return Err(Error::parameter("need 0 <= m < n_radius"));
    }
    for axis in 0..2 {
        if center[axis] - n_radius < grid.lo[axis] || center[axis] + n_radius > grid.hi[axis] - 1 {
            return Err(Error::geometry("outer shell does not fit inside the coarse grid"));
        }
    }
    Ok(())
}

/// One shell pick made by the cascade.
#[derive(Debug, Clone, Serialize)]
pub struct ShellPick {
    pub radius: i64,
    /// First path vertex at or beyond the radius.
    pub path_vertex: Vec<i64>,
    /// Certified vertex the recursion returned for that pick, one level
    /// down.
    pub cell: Vec<i64>,
    pub family: SeedFamily,
}

/// Certificate extracted from a bad path: a level-`n` cell holding two
/// separated same-family flagged vertices one level down.
#[derive(Debug, Clone, Serialize)]
pub struct CascadeWitness {
    pub n: usize,
    pub vertex: Vec<i64>,
    pub family: SeedFamily,
    pub pair: Option<(Vec<i64>, Vec<i64>)>,
    pub shells: Vec<ShellPick>,
}

/// Result of a cascade run on a structurally valid input. `Counterexample`
/// means the geometry went through but the pigeonhole failed, which would
/// contradict the shell arithmetic; it is reported rather than asserted so
/// experiments can surface it honestly.
#[derive(Debug, Clone, Serialize)]
pub enum CascadeOutcome {
    Certified(CascadeWitness),
    Counterexample { stage: String, detail: String },
}

/// Walk a bad star path crossing the annulus `[L_n, 2 L_n)` around
/// `center`, pick one path vertex per shell, certify each pick one level
/// down, and pigeonhole the certified vertices into level-`n` cells until
/// two of the same family sit separated in one cell.
///
/// `path` is a star-connected sequence of bottom-scale vertices, every one
/// bad according to `seed_family` (which returns a failing family for bad
/// seeds and `None` for good ones). Structural violations are errors;
/// see [`CascadeOutcome`] for the non-error failure mode.
pub fn cascade_certificate(
    path: &[Vec<i64>],
    seed_family: &dyn Fn(&[i64]) -> Option<SeedFamily>,
    scales: &ScaleSystem,
    n: usize,
    center: &[i64],
) -> Result<CascadeOutcome> {
    if path.is_empty() {
        return Err(Error::parameter("cascade needs a non-empty path"));
    }
    let l0 = scales.seed_side;
    for z in path {
        if !scales.aligned(z, 0)? {
            return Err(Error::geometry(format!("path vertex {z:?} not on the seed grid")));
        }
        if seed_family(z).is_none() {
            return Err(Error::parameter(format!("path vertex {z:?} is not bad")));
        }
    }
    for w in path.windows(2) {
        let step = linf(&w[0], &w[1]);
        if step == 0 || step > l0 {
            return Err(Error::geometry("path steps must move by one seed cell in sup norm"));
        }
    }
    if !scales.aligned(center, n)? {
        return Err(Error::geometry("cascade center must be aligned at the target level"));
    }
    let ln = scales.level(n)?;
    if linf(&path[0], center) >= ln {
        return Err(Error::geometry("path must start inside the inner shell"));
    }
    if path.iter().all(|z| linf(z, center) < 2 * ln) {
        return Err(Error::geometry("path does not cross the annulus"));
    }
    cascade_inner(path, seed_family, scales, n, center)
}

fn cascade_inner(
    path: &[Vec<i64>],
    seed_family: &dyn Fn(&[i64]) -> Option<SeedFamily>,
    scales: &ScaleSystem,
    n: usize,
    center: &[i64],
) -> Result<CascadeOutcome> {
    if n == 0 {
        // the path starts inside the cell; its first vertex is bad by
        // precondition and is its own certificate
        let z = &path[0];
        let family = match seed_family(z) {
            Some(f) => f,
            None => {
                return Ok(CascadeOutcome::Counterexample {
                    stage: "seed".into(),
                    detail: format!("picked vertex {z:?} is not bad"),
                })
            }
        };
        return Ok(CascadeOutcome::Certified(CascadeWitness {
            n: 0,
            vertex: z.clone(),
            family,
            pair: None,
            shells: Vec::new(),
        }));
    }
    let m = scales
        .shells
        .ok_or_else(|| Error::parameter("cascade needs a canonical ladder with shell counts"))?;
    let ln = scales.level(n)?;
    let lprev = scales.level(n - 1)?;
    let mut picks: Vec<ShellPick> = Vec::with_capacity(m as usize);
    for i in 0..m {
        let radius = match ln.checked_add(16i64.checked_mul(i).and_then(|v| v.checked_mul(lprev)).ok_or_else(
            || Error::numerics("shell radius overflows i64"),
        )?) {
            Some(r) => r,
            None => return Err(Error::numerics("shell radius overflows i64")),
        };
        let hit = path.iter().position(|z| linf(z, center) >= radius);
        let start = match hit {
            Some(idx) => idx,
            None => {
                return Ok(CascadeOutcome::Counterexample {
                    stage: format!("shell {i}"),
                    detail: format!("path never reaches radius {radius}"),
                })
            }
        };
        let z = &path[start];
        let cell_origin = scales.cell_origin(z, n - 1)?;
        // trim the subpath where it first leaves the double cell around the
        // pick; the recursion one level down only needs that local crossing
        let end = path[start..]
            .iter()
            .position(|w| linf(w, &cell_origin) >= 2 * lprev)
            .map(|off| start + off);
        let sub = match end {
            Some(e) => &path[start..=e],
            None => {
                return Ok(CascadeOutcome::Counterexample {
                    stage: format!("shell {i}"),
                    detail: "subpath never leaves the pick cell".into(),
                })
            }
        };
        let inner = cascade_inner(sub, seed_family, scales, n - 1, &cell_origin)?;
        let witness = match inner {
            CascadeOutcome::Certified(w) => w,
            CascadeOutcome::Counterexample { stage, detail } => {
                return Ok(CascadeOutcome::Counterexample {
                    stage: format!("level {} / {stage}", n - 1),
                    detail,
                })
            }
        };
        picks.push(ShellPick {
            radius,
            path_vertex: z.clone(),
            cell: witness.vertex.clone(),
            family: witness.family,
        });
    }
    // pigeonhole the certified vertices into level-n cells and families
    let mut buckets: HashMap<(Vec<i64>, usize), Vec<usize>> = HashMap::new();
    for (idx, pick) in picks.iter().enumerate() {
        let key = (scales.cell_origin(&pick.cell, n)?, pick.family.index());
        buckets.entry(key).or_default().push(idx);
    }
    let mut keys: Vec<&(Vec<i64>, usize)> = buckets.keys().collect();
    keys.sort();
    for key in keys {
        let members = &buckets[key];
        for a in 0..members.len() {
            for b in (a + 1)..members.len() {
                let va = &picks[members[a]].cell;
                let vb = &picks[members[b]].cell;
                if scales.separated(va, vb, n)? {
                    return Ok(CascadeOutcome::Certified(CascadeWitness {
                        n,
                        vertex: key.0.clone(),
                        family: SeedFamily::ALL[key.1],
                        pair: Some((va.clone(), vb.clone())),
                        shells: picks,
                    }));
                }
            }
        }
    }
    Ok(CascadeOutcome::Counterexample {
        stage: format!("pigeonhole at level {n}"),
        detail: format!(
            "no cell received a separated same-family pair among {} picks",
            picks.len()
        ),
    })
}

/// Empirical two-box decoupling report.
#[derive(Debug, Clone, Serialize)]
pub struct DecouplingReport {
    pub kind: String,
    pub increasing: bool,
    pub epsilon: f64,
    pub u: Option<f64>,
    /// Sup-norm gap between the two boxes.
    pub separation: i64,
    pub lhs: PointEstimate,
    pub rhs_first: PointEstimate,
    pub rhs_second: PointEstimate,
    pub rhs_product: f64,
    pub rhs_product_se: f64,
    /// Model error term `(r + s)^d exp(-eps^2 [u] s^(d-2))` with both
    /// prefactor constants set to one; reported alongside, never tuned.
    pub slack: f64,
    pub holds_within_3se: bool,
    pub holds_with_slack: bool,
}

/// Sup-norm gap between two disjoint boxes; errors when they touch.
/// Per axis the gap between nearest vertices is
/// `max(lo_b - hi_a + 1, lo_a - hi_b + 1, 0)`, and the sup-norm distance
/// between the boxes is the maximum over axes.
pub fn box_separation(a: &LatticeBox, b: &LatticeBox) -> Result<i64> {
    if a.dim() != b.dim() {
        return Err(Error::geometry("boxes must share a dimension"));
    }
    let mut s = 0i64;
    for axis in 0..a.dim() {
        let g = (b.lo()[axis] - a.hi()[axis] + 1)
            .max(a.lo()[axis] - b.hi()[axis] + 1)
            .max(0);
        s = s.max(g);
    }
    if s < 1 {
        return Err(Error::geometry("boxes must be separated by at least one vertex"));
    }
    Ok(s)
}

fn max_side(a: &LatticeBox, b: &LatticeBox) -> i64 {
    let mut r = 0;
    for axis in 0..a.dim() {
        r = r.max(a.side(axis)).max(b.side(axis));
    }
    r
}

fn decoupling_slack(d: usize, r: i64, s: i64, eps: f64, u: Option<f64>) -> f64 {
    let rate = eps * eps * u.unwrap_or(1.0) * (s as f64).powi(d as i32 - 2);
    ((r + s) as f64).powi(d as i32) * (-rate).exp()
}

fn finish_decoupling(
    kind: &str,
    increasing: bool,
    epsilon: f64,
    u: Option<f64>,
    separation: i64,
    slack: f64,
    lhs_acc: &Accumulator,
    first_acc: &Accumulator,
    second_acc: &Accumulator,
    stream: &Stream,
) -> DecouplingReport {
    let lhs = lhs_acc.estimate(stream.child(tags::REPLICA).child(0).key());
    let rhs_first = first_acc.estimate(stream.child(tags::REPLICA).child(1).key());
    let rhs_second = second_acc.estimate(stream.child(tags::REPLICA).child(2).key());
    let p1 = first_acc.mean();
    let p2 = second_acc.mean();
    let se1 = first_acc.std_err();
    let se2 = second_acc.std_err();
    let product = p1 * p2;
    let product_se = ((p1 * se2).powi(2) + (p2 * se1).powi(2)).sqrt();
    let gap = lhs_acc.mean() - product;
    let combined = (lhs_acc.std_err().powi(2) + product_se.powi(2)).sqrt();
    let holds_within_3se = gap <= 3.0 * combined;
    let holds_with_slack = gap <= 3.0 * combined + slack;
    DecouplingReport {
        kind: kind.into(),
        increasing,
        epsilon,
        u,
        separation,
        lhs,
        rhs_first,
        rhs_second,
        rhs_product: product,
        rhs_product_se: product_se,
        slack,
        holds_within_3se,
        holds_with_slack,
    }
}

const MONOTONE_PROBES: usize = 12;

/// Check `P[f1 and f2 at u] <= P[f1 at u'] P[f2 at u'] + slack` with
/// `u' = u (1 + eps)` for increasing events and `u (1 - eps)` for
/// decreasing ones. Monotonicity of both events is probed on coupled
/// thinned pairs first and rejected with an error when violated.
#[allow(clippy::too_many_arguments)]
pub fn decoupling_test_interlacement(
    engine: &InterlacementEngine<'_>,
    box1: &LatticeBox,
    box2: &LatticeBox,
    u: f64,
    epsilon: f64,
    increasing: bool,
    replicas: usize,
    f1: &dyn Fn(&LocalTimeField) -> bool,
    f2: &dyn Fn(&LocalTimeField) -> bool,
    stream: &Stream,
) -> Result<DecouplingReport> {
    if u <= 0.0 || epsilon <= 0.0 || epsilon >= 1.0 {
        return Err(Error::parameter("need u > 0 and 0 < epsilon < 1"));
    }
    if replicas < 2 {
        return Err(Error::parameter("need at least two replicas"));
    }
    let window = engine.window();
    for (name, b) in [("first", box1), ("second", box2)] {
        for v in [b.lo().to_vec(), b.hi().iter().map(|&c| c - 1).collect()] {
            if !window.contains(&v) {
                return Err(Error::geometry(format!("{name} box leaves the engine window")));
            }
        }
    }
    let separation = box_separation(box1, box2)?;
    let d = window.dim();

    // monotonicity probe: thinning couples the field at u below u(1+eps)
    let probe = stream.child(tags::HOLDING);
    for i in 0..MONOTONE_PROBES {
        let hi = engine.sample(u * (1.0 + epsilon), &probe.child(i as u64), true)?;
        let lo = hi.thinned(u)?;
        for (name, f) in [("first", f1), ("second", f2)] {
            let (flo, fhi) = (f(&lo), f(&hi));
            let ok = if increasing { !(flo && !fhi) } else { !(fhi && !flo) };
            if !ok {
                return Err(Error::parameter(format!(
                    "{name} event is not {} in the occupation field",
                    if increasing { "increasing" } else { "decreasing" }
                )));
            }
        }
    }

    let u_rhs = if increasing { u * (1.0 + epsilon) } else { u * (1.0 - epsilon) };
    let mut lhs_acc = Accumulator::new();
    let lhs_stream = stream.child(tags::REPLICA).child(0);
    for r in 0..replicas {
        let field = engine.sample(u, &lhs_stream.child(r as u64), false)?;
        lhs_acc.push(if f1(&field) && f2(&field) { 1.0 } else { 0.0 });
    }
    let mut first_acc = Accumulator::new();
    let s1 = stream.child(tags::REPLICA).child(1);
    for r in 0..replicas {
        let field = engine.sample(u_rhs, &s1.child(r as u64), false)?;
        first_acc.push(if f1(&field) { 1.0 } else { 0.0 });
    }
    let mut second_acc = Accumulator::new();
    let s2 = stream.child(tags::REPLICA).child(2);
    for r in 0..replicas {
        let field = engine.sample(u_rhs, &s2.child(r as u64), false)?;
        second_acc.push(if f2(&field) { 1.0 } else { 0.0 });
    }
    let slack = decoupling_slack(d, max_side(box1, box2), separation, epsilon, Some(u));
    Ok(finish_decoupling(
        "interlacement",
        increasing,
        epsilon,
        Some(u),
        separation,
        slack,
        &lhs_acc,
        &first_acc,
        &second_acc,
        stream,
    ))
}

/// Field analogue of [`decoupling_test_interlacement`]: the sprinkled side
/// evaluates the events on `phi + eps` (increasing) or `phi - eps`
/// (decreasing). Monotonicity is probed on coupled shifted pairs.
#[allow(clippy::too_many_arguments)]
pub fn decoupling_test_gff(
    window: &LatticeBox,
    box1: &LatticeBox,
    box2: &LatticeBox,
    epsilon: f64,
    increasing: bool,
    replicas: usize,
    f1: &dyn Fn(&[f64]) -> bool,
    f2: &dyn Fn(&[f64]) -> bool,
    stream: &Stream,
) -> Result<DecouplingReport> {
    if epsilon <= 0.0 {
        return Err(Error::parameter("need epsilon > 0"));
    }
    if replicas < 2 {
        return Err(Error::parameter("need at least two replicas"));
    }
    for (name, b) in [("first", box1), ("second", box2)] {
        for v in [b.lo().to_vec(), b.hi().iter().map(|&c| c - 1).collect()] {
            if !window.contains(&v) {
                return Err(Error::geometry(format!("{name} box leaves the window")));
            }
        }
    }
    let separation = box_separation(box1, box2)?;
    let sampler = DirichletSampler::new(window)?;
    let d = window.dim();
    let shift = if increasing { epsilon } else { -epsilon };

    let probe = stream.child(tags::HOLDING);
    for i in 0..MONOTONE_PROBES {
        let mut rng = probe.child(i as u64).rng();
        let lo = sampler.sample(&mut rng);
        let hi: Vec<f64> = lo.iter().map(|v| v + epsilon).collect();
        for (name, f) in [("first", f1), ("second", f2)] {
            let (flo, fhi) = (f(&lo), f(&hi));
            let ok = if increasing { !(flo && !fhi) } else { !(fhi && !flo) };
            if !ok {
                return Err(Error::parameter(format!(
                    "{name} event is not {} in the field",
                    if increasing { "increasing" } else { "decreasing" }
                )));
            }
        }
    }

    let mut lhs_acc = Accumulator::new();
    let lhs_stream = stream.child(tags::REPLICA).child(0);
    for r in 0..replicas {
        let mut rng = lhs_stream.child(r as u64).rng();
        let field = sampler.sample(&mut rng);
        lhs_acc.push(if f1(&field) && f2(&field) { 1.0 } else { 0.0 });
    }
    let mut first_acc = Accumulator::new();
    let s1 = stream.child(tags::REPLICA).child(1);
    for r in 0..replicas {
        let mut rng = s1.child(r as u64).rng();
        let mut field = sampler.sample(&mut rng);
        for v in field.iter_mut() {
            *v += shift;
        }
        first_acc.push(if f1(&field) { 1.0 } else { 0.0 });
    }
    let mut second_acc = Accumulator::new();
    let s2 = stream.child(tags::REPLICA).child(2);
    for r in 0..replicas {
        let mut rng = s2.child(r as u64).rng();
        let mut field = sampler.sample(&mut rng);
        for v in field.iter_mut() {
            *v += shift;
        }
        second_acc.push(if f2(&field) { 1.0 } else { 0.0 });
    }
    let slack = decoupling_slack(d, max_side(box1, box2), separation, epsilon, None);
    Ok(finish_decoupling(
        "gff",
        increasing,
        epsilon,
        None,
        separation,
        slack,
        &lhs_acc,
        &first_acc,
        &second_acc,
        stream,
    ))
}

/// Increasing event: mean local time over `sub` exceeds `threshold`.
pub fn mean_local_time_event(
    window: &LatticeBox,
    sub: &LatticeBox,
    threshold: f64,
) -> impl Fn(&LocalTimeField) -> bool {
    let indices: Vec<usize> = sub.vertices().map(|v| window.index_of(&v)).collect();
    move |field: &LocalTimeField| {
        let total: f64 = indices.iter().map(|&i| field.local_times[i]).sum();
        total / indices.len() as f64 > threshold
    }
}

/// Decreasing event: total local time over `sub` stays at or below `cap`.
pub fn local_time_cap_event(
    window: &LatticeBox,
    sub: &LatticeBox,
    cap: f64,
) -> impl Fn(&LocalTimeField) -> bool {
    let indices: Vec<usize> = sub.vertices().map(|v| window.index_of(&v)).collect();
    move |field: &LocalTimeField| {
        let total: f64 = indices.iter().map(|&i| field.local_times[i]).sum();
        total <= cap
    }
}

/// Increasing event: mean field value over `sub` exceeds `threshold`.
pub fn field_mean_event(
    window: &LatticeBox,
    sub: &LatticeBox,
    threshold: f64,
) -> impl Fn(&[f64]) -> bool {
    let indices: Vec<usize> = sub.vertices().map(|v| window.index_of(&v)).collect();
    move |field: &[f64]| {
        let total: f64 = indices.iter().map(|&i| field[i]).sum();
        total / indices.len() as f64 > threshold
    }
}

/// Decreasing event: field maximum over `sub` stays at or below `cap`.
pub fn field_cap_event(
    window: &LatticeBox,
    sub: &LatticeBox,
    cap: f64,
) -> impl Fn(&[f64]) -> bool {
    let indices: Vec<usize> = sub.vertices().map(|v| window.index_of(&v)).collect();
    move |field: &[f64]| indices.iter().all(|&i| field[i] <= cap)
}

/// Seed distribution for the decay experiment.
#[derive(Debug, Clone, Serialize)]
pub enum SeedModel {
    /// Each bottom-scale vertex is flagged independently with probability
    /// `q`. Admits exact oracles on surrogate ladders.
    Iid { q: f64 },
    /// A vertex is flagged when the zero boundary field exceeds `k`
    /// somewhere on its halo box. Neighbouring halos overlap, so seeds are
    /// positively correlated, which is the regime the recursion is built
    /// for.
    FieldCapBreach { k: f64 },
}

/// Flagged-density estimate at one ladder level. By translation invariance
/// every cell of a level estimates the same probability, so the count
/// aggregates all `cells` level-`n` cells of the sampled grid across all
/// replicas.
#[derive(Debug, Clone, Serialize)]
pub struct DecayRow {
    pub n: usize,
    pub bad: u64,
    /// Level-`n` cells per replica.
    pub cells: u64,
    pub replicas: u64,
    /// `replicas * cells`; the Wilson interval below treats these as
    /// independent, which is exact for iid seeds and slightly optimistic
    /// for field-driven ones (cells within one replica are correlated).
    pub trials: u64,
    pub prob: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    /// Reference value `2^(-2^n)`; reported, not asserted, since the
    /// doubling regime only kicks in below the fixed point.
    pub doubling_target: f64,
}

/// Decay of the flagged-cell density along the ladder.
#[derive(Debug, Clone, Serialize)]
pub struct DecayReport {
    pub rows: Vec<DecayRow>,
    /// Probabilities strictly decrease level over level (two consecutive
    /// zero counts are allowed once the sequence has died out).
    pub strictly_decreasing: bool,
    /// `log2(p_{n+1}) / log2(p_n)` per step where defined; the doubling
    /// regime predicts values near two.
    pub doubling_slopes: Vec<Option<f64>>,
    pub seed_side: i64,
    pub ratio: i64,
    pub sep_div: i64,
    pub surrogate: bool,
    pub model: SeedModel,
}

/// Estimate, over `replicas` independent seed layers on `[0, L_nmax)^d`,
/// the per-cell probability of the recursive flagged event at each ladder
/// level.
pub fn renorm_decay_experiment(
    model: &SeedModel,
    scales: &ScaleSystem,
    n_max: usize,
    replicas: usize,
    stream: &Stream,
) -> Result<DecayReport> {
    if n_max > scales.n_max() {
        return Err(Error::parameter("n_max beyond the built ladder"));
    }
    if replicas == 0 {
        return Err(Error::parameter("need at least one replica"));
    }
    let d = scales.d;
    let l0 = scales.seed_side;
    let top = scales.level(n_max)?;

    // seed coordinates in deterministic lex order
    let mut seeds: Vec<Vec<i64>> = Vec::new();
    {
        let steps = (top / l0) as usize;
        let mut idx = vec![0usize; d];
        loop {
            seeds.push(idx.iter().map(|&i| i as i64 * l0).collect());
            let mut axis = d;
            loop {
                if axis == 0 {
                    break;
                }
                axis -= 1;
                idx[axis] += 1;
                if idx[axis] < steps {
                    break;
                }
                idx[axis] = 0;
            }
            if idx.iter().all(|&i| i == 0) {
                break;
            }
        }
    }

    // For field seeds, pad the sampler window so the zero boundary does not
    // depress the variance of halos near the seed grid faces, and flatten
    // each halo to an index list once.
    const FIELD_PAD: i64 = 4;
    let field_ctx = match model {
        SeedModel::Iid { q } => {
            if !(0.0..=1.0).contains(q) {
                return Err(Error::parameter("iid seed probability must lie in [0, 1]"));
            }
            None
        }
        SeedModel::FieldCapBreach { k } => {
            if *k <= 0.0 {
                return Err(Error::parameter("field cap must be positive"));
            }
            let lo = vec![-1 - FIELD_PAD; d];
            let hi = vec![top + l0 + 1 + FIELD_PAD; d];
            let window = LatticeBox::new(lo, hi)?;
            let sampler = DirichletSampler::new(&window)?;
            let mut halo_indices: Vec<Vec<usize>> = Vec::with_capacity(seeds.len());
            for s in &seeds {
                let halo_lo: Vec<i64> = s.iter().map(|&c| c - 1).collect();
                let halo_hi: Vec<i64> = s.iter().map(|&c| c + 2 * l0 + 1).collect();
                let halo = LatticeBox::new(halo_lo, halo_hi)?;
                halo_indices.push(halo.vertices().map(|v| window.index_of(&v)).collect());
            }
            Some((sampler, halo_indices))
        }
    };

    // Level-n cell counts of the sampled grid; the top level is one cell.
    let mut cells = vec![0u64; n_max + 1];
    for n in 0..=n_max {
        let per_axis = (top / scales.level(n)?) as u64;
        cells[n] = per_axis.pow(d as u32);
    }

    let mut bad_counts = vec![0u64; n_max + 1];
    let rep_stream = stream.child(tags::REPLICA);
    for r in 0..replicas {
        let mut rng = rep_stream.child(r as u64).rng();
        let mut truth: HashSet<Vec<i64>> = HashSet::new();
        match model {
            SeedModel::Iid { q } => {
                for s in &seeds {
                    if rng.gen::<f64>() < *q {
                        truth.insert(s.clone());
                    }
                }
            }
            SeedModel::FieldCapBreach { k } => {
                let (sampler, halo_indices) = field_ctx.as_ref().unwrap();
                let field = sampler.sample(&mut rng);
                for (s, halo) in seeds.iter().zip(halo_indices) {
                    if halo.iter().any(|&i| field[i] > *k) {
                        truth.insert(s.clone());
                    }
                }
            }
        }
        bad_counts[0] += truth.len() as u64;
        let mut cur = truth;
        for k in 1..=n_max {
            cur = lift_true_set(&cur, scales, k)?;
            bad_counts[k] += cur.len() as u64;
            if cur.is_empty() {
                break;
            }
        }
    }

    let mut rows = Vec::with_capacity(n_max + 1);
    for (n, &bad) in bad_counts.iter().enumerate() {
        let trials = replicas as u64 * cells[n];
        let (ci_lo, ci_hi) = wilson_interval(bad, trials, 0.05)?;
        rows.push(DecayRow {
            n,
            bad,
            cells: cells[n],
            replicas: replicas as u64,
            trials,
            prob: bad as f64 / trials as f64,
            ci_lo,
            ci_hi,
            doubling_target: doubling_target(n),
        });
    }
    let strictly_decreasing = rows
        .windows(2)
        .all(|w| w[1].prob < w[0].prob || (w[0].bad == 0 && w[1].bad == 0));
    let doubling_slopes = rows
        .windows(2)
        .map(|w| {
            if w[0].prob > 0.0 && w[0].prob < 1.0 && w[1].prob > 0.0 {
                Some(w[1].prob.log2() / w[0].prob.log2())
            } else {
                None
            }
        })
        .collect();
    Ok(DecayReport {
        rows,
        strictly_decreasing,
        doubling_slopes,
        seed_side: scales.seed_side,
        ratio: scales.ratio,
        sep_div: scales.sep_div,
        surrogate: scales.surrogate,
        model: model.clone(),
    })
}

/// Exact one-level flagged probability for iid seeds on a surrogate ladder:
/// enumerate which child subsets contain a separated pair. Feasible for
/// `ratio^d <= 20` or so; used as the oracle in tests.
pub fn iid_lift_probability(scales: &ScaleSystem, n: usize, q: f64) -> Result<f64> {
    if n == 0 || n > scales.n_max() {
        return Err(Error::parameter("need 1 <= n <= n_max"));
    }
    let d = scales.d;
    let per_axis = scales.ratio;
    let child_count = (per_axis as u64).pow(d as u32);
    if child_count > 20 {
        return Err(Error::parameter("exact enumeration needs at most 20 children per cell"));
    }
    let lprev = scales.level(n - 1)?;
    // child offsets in lex order
    let mut offsets: Vec<Vec<i64>> = Vec::with_capacity(child_count as usize);
    let mut idx = vec![0i64; d];
    loop {
        offsets.push(idx.iter().map(|&i| i * lprev).collect());
        let mut axis = d;
        loop {
            if axis == 0 {
                break;
            }
            axis -= 1;
            idx[axis] += 1;
            if idx[axis] < per_axis {
                break;
            }
            idx[axis] = 0;
        }
        if idx.iter().all(|&i| i == 0) {
            break;
        }
    }
    let k = offsets.len();
    let mut pair_separated = vec![false; k * k];
    for i in 0..k {
        for j in 0..k {
            pair_separated[i * k + j] = scales.separated(&offsets[i], &offsets[j], n)?;
        }
    }
    let mut prob = 0.0;
    for mask in 0u64..(1u64 << k) {
        let members: Vec<usize> = (0..k).filter(|&i| mask >> i & 1 == 1).collect();
        let mut hit = false;
        'outer: for a in 0..members.len() {
            for b in (a + 1)..members.len() {
                if pair_separated[members[a] * k + members[b]] {
                    hit = true;
                    break 'outer;
                }
            }
        }
        if hit {
            let m = members.len() as i32;
            prob += q.powi(m) * (1.0 - q).powi(k as i32 - m);
        }
    }
    Ok(prob)
}
