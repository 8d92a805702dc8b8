//! Green function of simple random walk on `Z^d`, `d >= 3`, in the
//! normalization `g = (2d I - A)^{-1}`: `g(x, y)` is `1/(2d)` times the
//! expected number of visits to `y` of a discrete-time walk from `x`.
//!
//! Two independent deterministic evaluators are provided.
//!
//! The workhorse integrates the time representation
//! `G(x) = int_0^infty prod_i e^{-t/d} I_{x_i}(t/d) dt` (obtained from the
//! Fourier representation by Fubini), with the scaled Bessel factors
//! evaluated by spectrally accurate trapezoid quadrature and the tail by an
//! asymptotic expansion with a controlled remainder. This evaluates whole
//! displacement ranges at once, which is what equilibrium-measure assembly
//! needs.
//!
//! [`fourier_quadrature`] integrates the `k`-space representation directly
//! with dyadic refinement towards the `k = 0` singularity. It is slow and
//! exists as an independent cross-check.

use crate::error::{Error, Result};
use crate::lattice::LatticeBox;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::DMatrix;
use std::io::{Read, Write};
use std::path::Path;

/// Dense factorizations beyond this size are refused rather than attempted.
pub const DENSE_LIMIT: usize = 4096;

/// Validated accuracy floor of the evaluators.
pub const TOL_FLOOR: f64 = 1e-12;

/// Leading constant of `G(x) ~ C_d |x|^{2-d}`.
pub fn visits_asymptotic_constant(d: usize) -> f64 {
    // C_d = (d/2) Gamma(d/2 - 1) / pi^{d/2}
    let df = d as f64;
    0.5 * df * statrs::function::gamma::gamma(0.5 * df - 1.0) / std::f64::consts::PI.powf(0.5 * df)
}

/// Far-field approximation of `g(x)`; relative error `O(|x|^{-2})`.
pub fn green_asymptotic(x: &[i64], d: usize) -> f64 {
    let r2: f64 = x.iter().map(|&v| (v * v) as f64).sum();
    let r = r2.sqrt().max(1e-9);
    visits_asymptotic_constant(d) * r.powi(2 - d as i32) / (2.0 * d as f64)
}

// ---------------------------------------------------------------------------
// Gauss-Legendre rule

/// Nodes and weights on [-1, 1], computed by Newton iteration on P_n.
fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = (n + 1) / 2;
    for i in 0..m {
        // Chebyshev-based initial guess.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p0 = 1.0;
            let mut p1 = x;
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            // Derivative of P_n at x.
            pp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / pp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * pp * pp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

// ---------------------------------------------------------------------------
// Time-representation evaluator

/// Scaled Bessel vector `e^{-z} I_n(z)` for `n = 0..=n_max`, by trapezoid
/// quadrature of `(1/pi) int_0^pi e^{z(cos t - 1)} cos(n t) dt`. The
/// integrand extends to an even periodic analytic function, so the
/// trapezoid rule converges spectrally once aliasing is resolved.
fn scaled_bessel_vec(z: f64, n_max: usize, m_mult: usize, out: &mut [f64]) {
    let m = (64 + 2 * n_max + (9.0 * z.sqrt()).ceil() as usize) * m_mult;
    out[..=n_max].iter_mut().for_each(|v| *v = 0.0);
    let h = std::f64::consts::PI / m as f64;
    for k in 0..=m {
        let theta = k as f64 * h;
        let c = theta.cos();
        let e = (z * (c - 1.0)).exp();
        let w = if k == 0 || k == m { 0.5 } else { 1.0 };
        // cos(n theta) via Chebyshev recurrence.
        let (mut cm1, mut c0) = (c, 1.0);
        out[0] += w * e;
        if n_max >= 1 {
            out[1] += w * e * c;
        }
        for n in 2..=n_max {
            let cn = 2.0 * c * cm1 - c0;
            out[n] += w * e * cn;
            c0 = cm1;
            cm1 = cn;
        }
    }
    for v in out[..=n_max].iter_mut() {
        *v /= m as f64;
    }
}

/// Asymptotic tail coefficients for `prod_i e^{-z} I_{x_i}(z)` as a series
/// `(2 pi z)^{-d/2} (1 + C1/z + C2/z^2 + C3/z^3 + ...)`.
fn tail_coefficients(xs: &[i64]) -> (f64, f64, f64) {
    let mut a = Vec::with_capacity(xs.len());
    let mut b = Vec::with_capacity(xs.len());
    let mut c = Vec::with_capacity(xs.len());
    for &x in xs {
        let mu = 4.0 * (x * x) as f64;
        a.push(-(mu - 1.0) / 8.0);
        b.push((mu - 1.0) * (mu - 9.0) / 128.0);
        c.push(-(mu - 1.0) * (mu - 9.0) * (mu - 25.0) / 3072.0);
    }
    let c1: f64 = a.iter().sum();
    let mut c2: f64 = b.iter().sum();
    for i in 0..xs.len() {
        for j in (i + 1)..xs.len() {
            c2 += a[i] * a[j];
        }
    }
    let mut c3: f64 = c.iter().sum();
    for i in 0..xs.len() {
        for j in 0..xs.len() {
            if i != j {
                c3 += a[i] * b[j];
            }
        }
    }
    for i in 0..xs.len() {
        for j in (i + 1)..xs.len() {
            for k in (j + 1)..xs.len() {
                c3 += a[i] * a[j] * a[k];
            }
        }
    }
    (c1, c2, c3)
}

/// Closed-form tail `int_{z0}^infty (2 pi z)^{-d/2} (1 + C1/z + C2/z^2 + C3/z^3) d dz`
/// in visit units (the `d` factor converts `t = d z` back to walk time).
fn tail_integral(d: usize, z0: f64, coeffs: (f64, f64, f64)) -> f64 {
    let df = d as f64;
    let pref = df * (2.0 * std::f64::consts::PI).powf(-0.5 * df);
    let (c1, c2, c3) = coeffs;
    let mut total = 0.0;
    for (k, ck) in [1.0, c1, c2, c3].iter().enumerate() {
        let expo = 1.0 - 0.5 * df - k as f64;
        // Integral of z^{expo - 1 + ...}; exponent after integration:
        total += ck * z0.powf(expo) / (0.5 * df + k as f64 - 1.0);
    }
    pref * total
}

/// Magnitude of the C3 tail term alone; used to bound the truncation error.
fn tail_c3_term(d: usize, z0: f64, c3: f64) -> f64 {
    let df = d as f64;
    let pref = df * (2.0 * std::f64::consts::PI).powf(-0.5 * df);
    (pref * c3 * z0.powf(1.0 - 0.5 * df - 3.0) / (0.5 * df + 2.0)).abs()
}

/// Precomputed quadrature grid: `t`-nodes with weights, the scaled Bessel
/// vector per node, and the tail cutoff `z0 = T/d`.
struct BesselGrid {
    d: usize,
    n_max: usize,
    z0: f64,
    /// (weight, bessel values for n = 0..=n_max) per t-node.
    nodes: Vec<(f64, Vec<f64>)>,
}

impl BesselGrid {
    /// `refine = 0` is the base rule; each refinement level doubles the GL
    /// order and the trapezoid resolution and quadruples the tail cutoff.
    fn build(d: usize, n_max: usize, tol: f64, refine: usize) -> Result<Self> {
        if d < 3 {
            return Err(Error::geometry("green function requires d >= 3"));
        }
        if tol < TOL_FLOOR {
            return Err(Error::numerics(format!(
                "requested tolerance {tol:e} below validated floor {TOL_FLOOR:e}"
            )));
        }
        let mu_max = 4.0 * (n_max * n_max) as f64;
        // Worst-case C3 over the range is at the all-max tuple.
        let worst: Vec<i64> = vec![n_max as i64; d];
        let (_, _, c3) = tail_coefficients(&worst);
        let mut z0 = (4.0 * mu_max).max(64.0);
        while tail_c3_term(d, z0, c3) > tol / 8.0 {
            z0 *= 2.0;
            if z0 > 1e12 {
                return Err(Error::numerics(
                    "tail cutoff diverged; displacement range too large for tolerance",
                ));
            }
        }
        z0 *= (1 << (2 * refine)) as f64;

        let t_end = z0 * d as f64;
        let gl_order = 24 << refine;
        let (xi, wi) = gauss_legendre(gl_order);
        let mut panels = Vec::new();
        let mut a = 0.0f64;
        let mut b = 1.0f64;
        while a < t_end {
            panels.push((a, b.min(t_end)));
            a = b;
            b *= 2.0;
        }
        let mut nodes = Vec::with_capacity(panels.len() * gl_order);
        let m_mult = 1 << refine;
        for (a, b) in panels {
            for i in 0..gl_order {
                let t = 0.5 * (a + b) + 0.5 * (b - a) * xi[i];
                let w = 0.5 * (b - a) * wi[i];
                let z = t / d as f64;
                let mut vals = vec![0.0; n_max + 1];
                scaled_bessel_vec(z, n_max, m_mult, &mut vals);
                nodes.push((w, vals));
            }
        }
        Ok(BesselGrid { d, n_max, z0, nodes })
    }

    /// Expected visits `G(x)` for `|x_i| <= n_max`.
    fn visits(&self, xs: &[i64]) -> Result<f64> {
        if xs.len() != self.d {
            return Err(Error::geometry("displacement dimension mismatch"));
        }
        let mut abs: Vec<usize> = Vec::with_capacity(xs.len());
        for &x in xs {
            let a = x.unsigned_abs() as usize;
            if a > self.n_max {
                return Err(Error::geometry(format!(
                    "displacement component {x} exceeds grid range {}",
                    self.n_max
                )));
            }
            abs.push(a);
        }
        let mut finite = 0.0;
        for (w, vals) in &self.nodes {
            let mut prod = *w;
            for &a in &abs {
                prod *= vals[a];
            }
            finite += prod;
        }
        Ok(finite + tail_integral(self.d, self.z0, tail_coefficients(xs)))
    }
}

/// `g(x, 0)` on `Z^d` with absolute error at most `tol`, verified by
/// internal refinement. Fails explicitly if the tolerance cannot be met.
pub fn green_zd(x: &[i64], d: usize, tol: f64) -> Result<f64> {
    if x.len() != d {
        return Err(Error::geometry("displacement dimension mismatch"));
    }
    let n_max = x.iter().map(|v| v.unsigned_abs() as usize).max().unwrap_or(0);
    let base = BesselGrid::build(d, n_max, tol, 0)?.visits(x)?;
    let refined = BesselGrid::build(d, n_max, tol, 1)?.visits(x)?;
    if (base - refined).abs() > 0.5 * tol * (2.0 * d as f64) {
        return Err(Error::numerics(format!(
            "green_zd failed to converge to tol {tol:e}: base {base}, refined {refined}"
        )));
    }
    Ok(refined / (2.0 * d as f64))
}

// ---------------------------------------------------------------------------
// Displacement table

/// Dense table of `g` over all displacements with `|x_i| <= range`,
/// spot-verified against a refined rule at build time.
pub struct GreenTable {
    d: usize,
    range: usize,
    tol: f64,
    stride: Vec<usize>,
    values: Vec<f64>,
}

impl GreenTable {
    pub fn build(d: usize, range: usize, tol: f64) -> Result<Self> {
        let grid = BesselGrid::build(d, range, tol, 0)?;
        let n = range + 1;
        let mut stride = vec![1usize; d];
        for i in (0..d.saturating_sub(1)).rev() {
            stride[i] = stride[i + 1] * n;
        }
        let mut values = vec![f64::NAN; n.pow(d as u32)];
        let norm = 1.0 / (2.0 * d as f64);

        // Fill sorted tuples once, then scatter over permutations.
        let mut tuple = vec![0usize; d];
        fill_sorted(&grid, &mut tuple, 0, 0, range, &stride, &mut values, norm)?;

        let table = GreenTable {
            d,
            range,
            tol,
            stride,
            values,
        };
        // Spot verification on the extreme tuples.
        let probes: Vec<Vec<i64>> = vec![
            vec![0; d],
            {
                let mut v = vec![0i64; d];
                v[0] = range as i64;
                v
            },
            vec![range as i64; d],
        ];
        let refined = BesselGrid::build(d, range, tol, 1)?;
        for p in probes {
            let want = refined.visits(&p)? * norm;
            let got = table.lookup(&p)?;
            if (want - got).abs() > tol {
                return Err(Error::numerics(format!(
                    "green table probe {p:?} off by {:e} (tol {tol:e})",
                    (want - got).abs()
                )));
            }
        }
        Ok(table)
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn range(&self) -> usize {
        self.range
    }

    pub fn tol(&self) -> f64 {
        self.tol
    }

    /// Exact table lookup; errors outside the range.
    pub fn lookup(&self, dx: &[i64]) -> Result<f64> {
        if dx.len() != self.d {
            return Err(Error::geometry("displacement dimension mismatch"));
        }
        let mut idx = 0usize;
        for (i, &v) in dx.iter().enumerate() {
            let a = v.unsigned_abs() as usize;
            if a > self.range {
                return Err(Error::geometry(format!(
                    "displacement {dx:?} outside table range {}",
                    self.range
                )));
            }
            idx += a * self.stride[i];
        }
        Ok(self.values[idx])
    }

    /// Table value inside the range, far-field asymptotic outside. The
    /// asymptotic relative error is `O(|x|^{-2})`, negligible beyond any
    /// sensible table range.
    pub fn lookup_or_asymptotic(&self, dx: &[i64]) -> f64 {
        match self.lookup(dx) {
            Ok(v) => v,
            Err(_) => green_asymptotic(dx, self.d),
        }
    }

    /// Green matrix `g(x_i, x_j)` of a finite vertex set.
    pub fn matrix(&self, pts: &[Vec<i64>]) -> Result<DMatrix<f64>> {
        let n = pts.len();
        let mut m = DMatrix::zeros(n, n);
        let mut dx = vec![0i64; self.d];
        for i in 0..n {
            for j in i..n {
                for k in 0..self.d {
                    dx[k] = pts[i][k] - pts[j][k];
                }
                let v = self.lookup(&dx)?;
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        Ok(m)
    }

    /// Green matrix with the far-field asymptotic standing in for pairs
    /// outside the table range. The `O(|x|^{-2})` relative error of those
    /// entries carries into anything solved against the matrix, so
    /// consumers must budget for it (cf. the equilibrium weight guard).
    pub fn matrix_far(&self, pts: &[Vec<i64>]) -> Result<DMatrix<f64>> {
        let n = pts.len();
        let mut m = DMatrix::zeros(n, n);
        let mut dx = vec![0i64; self.d];
        for i in 0..n {
            if pts[i].len() != self.d {
                return Err(Error::geometry("displacement dimension mismatch"));
            }
            for j in i..n {
                for k in 0..self.d {
                    dx[k] = pts[i][k] - pts[j][k];
                }
                let v = self.lookup_or_asymptotic(&dx);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        Ok(m)
    }

    /// Serialize to the GRN1 cache format plus a JSON sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(b"GRN1")?;
        f.write_u32::<LittleEndian>(1)?;
        f.write_u8(self.d as u8)?;
        f.write_u64::<LittleEndian>(self.range as u64)?;
        f.write_f64::<LittleEndian>(self.tol)?;
        f.write_u64::<LittleEndian>(self.values.len() as u64)?;
        for &v in &self.values {
            f.write_f64::<LittleEndian>(v)?;
        }
        let sidecar = serde_json::json!({
            "format": "GRN1",
            "version": 1,
            "d": self.d,
            "range": self.range,
            "tolerance": self.tol,
            "count": self.values.len(),
        });
        std::fs::write(
            path.with_extension("json"),
            serde_json::to_string_pretty(&sidecar).expect("static json"),
        )?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path)?;
        let mut magic = [0u8; 4];
        f.read_exact(&mut magic)?;
        if &magic != b"GRN1" {
            return Err(Error::format(format!(
                "bad magic {magic:?}; expected GRN1"
            )));
        }
        let version = f.read_u32::<LittleEndian>()?;
        if version != 1 {
            return Err(Error::format(format!("unsupported GRN1 version {version}")));
        }
        let d = f.read_u8()? as usize;
        let range = f.read_u64::<LittleEndian>()? as usize;
        let tol = f.read_f64::<LittleEndian>()?;
        let count = f.read_u64::<LittleEndian>()? as usize;
        let expected = (range + 1).pow(d as u32);
        if count != expected {
            return Err(Error::format(format!(
                "GRN1 count {count} does not match (range+1)^d = {expected}"
            )));
        }
        let mut values = Vec::with_capacity(count);
        for _ in 0..count {
            let v = f.read_f64::<LittleEndian>()?;
            if !v.is_finite() {
                return Err(Error::format("non-finite value in GRN1 payload"));
            }
            values.push(v);
        }
        let n = range + 1;
        let mut stride = vec![1usize; d];
        for i in (0..d.saturating_sub(1)).rev() {
            stride[i] = stride[i + 1] * n;
        }
        Ok(GreenTable {
            d,
            range,
            tol,
            stride,
            values,
        })
    }
}

/// Recursive enumeration of non-decreasing tuples; each evaluated once and
/// scattered over all sign/permutation images (g is symmetric in both).
#[allow(clippy::too_many_arguments)]
fn fill_sorted(
    grid: &BesselGrid,
    tuple: &mut Vec<usize>,
    pos: usize,
    min: usize,
    range: usize,
    stride: &[usize],
    values: &mut [f64],
    norm: f64,
) -> Result<()> {
    let d = tuple.len();
    if pos == d {
        let xs: Vec<i64> = tuple.iter().map(|&a| a as i64).collect();
        let g = grid.visits(&xs)? * norm;
        scatter_permutations(tuple, stride, values, g);
        return Ok(());
    }
    for a in min..=range {
        tuple[pos] = a;
        fill_sorted(grid, tuple, pos + 1, a, range, stride, values, norm)?;
    }
    Ok(())
}

fn scatter_permutations(tuple: &[usize], stride: &[usize], values: &mut [f64], g: f64) {
    let d = tuple.len();
    let mut perm: Vec<usize> = (0..d).collect();
    // Heap's algorithm over positions; duplicates just rewrite the same slot.
    let mut c = vec![0usize; d];
    let write = |perm: &[usize], values: &mut [f64]| {
        let idx: usize = (0..d).map(|i| tuple[perm[i]] * stride[i]).sum();
        values[idx] = g;
    };
    write(&perm, values);
    let mut i = 0;
    while i < d {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            write(&perm, values);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
}

// ---------------------------------------------------------------------------
// Independent k-space oracle

/// Direct quadrature of
/// `(1/pi^d) int_{[0,pi]^d} prod_i cos(k_i x_i) / (1 - (1/d) sum_i cos k_i) dk`
/// (the expected-visits function), with dyadic refinement towards the
/// integrable singularity at `k = 0`. Returns visit units. Slow; intended
/// as an independent oracle for small displacements.
pub fn fourier_quadrature(x: &[i64], d: usize, depth: usize, gl_order: usize) -> Result<f64> {
    if x.len() != d || d < 3 {
        return Err(Error::geometry("fourier_quadrature requires d >= 3 and matching x"));
    }
    let (xi, wi) = gauss_legendre(gl_order);
    let mut total = 0.0;
    let mut h = std::f64::consts::PI;
    for _ in 0..depth {
        // Integrate the 2^d - 1 subcells of [0,h]^d minus [0,h/2]^d.
        for pattern in 1..(1usize << d) {
            total += integrate_cell(x, d, h, pattern, &xi, &wi);
        }
        h *= 0.5;
    }
    // Remaining cube [0,h]^d: |integrand| <= 2d/|k|^2, so the contribution
    // is bounded by 2d h int_{[0,1]^d} |u|^{-2} du < 2d h * 3.
    let center_bound = 6.0 * d as f64 * h / std::f64::consts::PI.powi(d as i32);
    if center_bound > 1e-9 {
        return Err(Error::numerics(format!(
            "refinement depth {depth} leaves center bound {center_bound:e}"
        )));
    }
    Ok(total / std::f64::consts::PI.powi(d as i32))
}

fn integrate_cell(
    x: &[i64],
    d: usize,
    h: f64,
    pattern: usize,
    xi: &[f64],
    wi: &[f64],
) -> f64 {
    // Axis ranges: bit set -> [h/2, h], else [0, h/2]. Oscillation-aware
    // panel split so cos(k x) is resolved.
    let mut axes: Vec<Vec<(f64, f64)>> = Vec::with_capacity(d);
    for i in 0..d {
        let (a, b) = if pattern >> i & 1 == 1 {
            (0.5 * h, h)
        } else {
            (0.0, 0.5 * h)
        };
        let freq = x[i].unsigned_abs() as f64;
        let panels = ((freq * (b - a) / std::f64::consts::PI).ceil() as usize).max(1);
        let mut cuts = Vec::with_capacity(panels);
        for p in 0..panels {
            let lo = a + (b - a) * p as f64 / panels as f64;
            let hi = a + (b - a) * (p + 1) as f64 / panels as f64;
            cuts.push((lo, hi));
        }
        axes.push(cuts);
    }
    // Tensor iteration over panels and nodes per axis.
    let mut sum = 0.0;
    let mut panel_idx = vec![0usize; d];
    loop {
        // Precompute per-axis node values for the current panel combo.
        let mut node_vals: Vec<Vec<(f64, f64, f64)>> = Vec::with_capacity(d);
        for i in 0..d {
            let (a, b) = axes[i][panel_idx[i]];
            let vals = (0..xi.len())
                .map(|q| {
                    let k = 0.5 * (a + b) + 0.5 * (b - a) * xi[q];
                    let w = 0.5 * (b - a) * wi[q];
                    // 1 - cos k, in a form that survives k -> 0 underflow.
                    let omc = 2.0 * (0.5 * k).sin().powi(2);
                    (w, omc, (k * x[i] as f64).cos())
                })
                .collect();
            node_vals.push(vals);
        }
        sum += tensor_sum(d, &node_vals);
        // Advance the panel multi-index.
        let mut i = 0;
        loop {
            if i == d {
                return sum;
            }
            panel_idx[i] += 1;
            if panel_idx[i] < axes[i].len() {
                break;
            }
            panel_idx[i] = 0;
            i += 1;
        }
    }
}

fn tensor_sum(d: usize, node_vals: &[Vec<(f64, f64, f64)>]) -> f64 {
    let order = node_vals[0].len();
    let mut idx = vec![0usize; d];
    let mut sum = 0.0;
    'outer: loop {
        let mut w = 1.0;
        let mut omc_sum = 0.0;
        let mut num = 1.0;
        for i in 0..d {
            let (wq, omc, cx) = node_vals[i][idx[i]];
            w *= wq;
            omc_sum += omc;
            num *= cx;
        }
        sum += w * num * d as f64 / omc_sum;
        let mut i = 0;
        loop {
            if i == d {
                break 'outer;
            }
            idx[i] += 1;
            if idx[i] < order {
                break;
            }
            idx[i] = 0;
            i += 1;
        }
    }
    sum
}

// ---------------------------------------------------------------------------
// Killed Green function

/// Green function of the walk killed outside a finite vertex set `U`:
/// the inverse of `(2d I - A)` restricted to `U`, held as a Cholesky factor.
pub struct KilledGreen {
    pts: Vec<Vec<i64>>,
    index: std::collections::HashMap<Vec<i64>, usize>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    d: usize,
}

impl KilledGreen {
    pub fn new(pts: &[Vec<i64>], d: usize) -> Result<Self> {
        if pts.is_empty() {
            return Err(Error::geometry("killed green of empty set"));
        }
        if pts.len() > DENSE_LIMIT {
            return Err(Error::geometry(format!(
                "killed green: {} vertices exceeds dense limit {DENSE_LIMIT}",
                pts.len()
            )));
        }
        let mut index = std::collections::HashMap::new();
        for (i, p) in pts.iter().enumerate() {
            if p.len() != d {
                return Err(Error::geometry("vertex dimension mismatch"));
            }
            if index.insert(p.clone(), i).is_some() {
                return Err(Error::geometry(format!("duplicate vertex {p:?}")));
            }
        }
        let n = pts.len();
        let mut l = DMatrix::zeros(n, n);
        for i in 0..n {
            l[(i, i)] = 2.0 * d as f64;
            for axis in 0..d {
                for step in [-1i64, 1] {
                    let mut q = pts[i].clone();
                    q[axis] += step;
                    if let Some(&j) = index.get(&q) {
                        l[(i, j)] = -1.0;
                    }
                }
            }
        }
        let chol = l
            .cholesky()
            .ok_or_else(|| Error::numerics("Dirichlet operator not positive definite"))?;
        Ok(KilledGreen {
            pts: pts.to_vec(),
            index,
            chol,
            d,
        })
    }

    pub fn len(&self) -> usize {
        self.pts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pts.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn index_of(&self, x: &[i64]) -> Option<usize> {
        self.index.get(x).copied()
    }

    /// `g_U(x, y)`; errors if either point is outside `U`.
    pub fn entry(&self, x: &[i64], y: &[i64]) -> Result<f64> {
        let i = self
            .index_of(x)
            .ok_or_else(|| Error::geometry(format!("{x:?} not in killed set")))?;
        let j = self
            .index_of(y)
            .ok_or_else(|| Error::geometry(format!("{y:?} not in killed set")))?;
        let mut e = nalgebra::DVector::zeros(self.pts.len());
        e[j] = 1.0;
        let col = self.chol.solve(&e);
        Ok(col[i])
    }

    /// Full inverse as a matrix (column solves).
    pub fn full_matrix(&self) -> DMatrix<f64> {
        let n = self.pts.len();
        self.chol.solve(&DMatrix::identity(n, n))
    }

    /// Lower-triangular factor mapping iid standard normals to a sample of
    /// the centered field with covariance `g_U`: from `L_prec L_prec^T =
    /// (2dI - A)`, solving `L_prec^T phi = z` gives covariance `g_U`.
    pub fn sample_transform(&self, z: &nalgebra::DVector<f64>) -> nalgebra::DVector<f64> {
        let lt = self.chol.l().transpose();
        lt.solve_upper_triangular(z)
            .expect("triangular factor is nonsingular")
    }
}

// ---------------------------------------------------------------------------
// Equilibrium measure and capacity

/// Equilibrium measure of a finite set: the unique weights with
/// `sum_x e(x) g(x, y) = 1` for every `y` in the set. `capacity` is their sum.
pub struct Equilibrium {
    pub pts: Vec<Vec<i64>>,
    pub weights: Vec<f64>,
    pub capacity: f64,
}

pub fn equilibrium(pts: &[Vec<i64>], table: &GreenTable) -> Result<Equilibrium> {
    equilibrium_solve(pts, table, false)
}

/// Equilibrium measure tolerating displacements beyond the table range via
/// the far-field asymptotic; intended for sprawling trace sets whose rare
/// distant pairs would otherwise force an enormous table.
pub fn equilibrium_far(pts: &[Vec<i64>], table: &GreenTable) -> Result<Equilibrium> {
    equilibrium_solve(pts, table, true)
}

fn equilibrium_solve(pts: &[Vec<i64>], table: &GreenTable, far: bool) -> Result<Equilibrium> {
    if pts.is_empty() {
        return Err(Error::geometry("equilibrium measure of empty set"));
    }
    if pts.len() > DENSE_LIMIT {
        return Err(Error::geometry(format!(
            "equilibrium: {} vertices exceeds dense limit {DENSE_LIMIT}",
            pts.len()
        )));
    }
    let g = if far {
        table.matrix_far(pts)?
    } else {
        table.matrix(pts)?
    };
    let n = pts.len();
    let chol = g
        .clone()
        .cholesky()
        .ok_or_else(|| Error::numerics("green matrix not positive definite"))?;
    let ones = nalgebra::DVector::from_element(n, 1.0);
    let w = chol.solve(&ones);
    // Hitting identity as a residual check.
    let resid = (&g * &w - &ones).amax();
    if resid > 1e-8 {
        return Err(Error::numerics(format!(
            "equilibrium solve residual {resid:e} exceeds 1e-8"
        )));
    }
    // Weights of points shielded by the rest of the set are exactly zero;
    // noise pushes them slightly negative. With an exact in-range matrix the
    // noise is pure roundoff; with far-field entries it inherits their
    // O(|x|^-2) relative error, so the guard is correspondingly looser.
    let guard = if far { 1e-4 } else { 1e-9 };
    let mut weights = Vec::with_capacity(n);
    for i in 0..n {
        let v = w[i];
        if v < -guard {
            return Err(Error::numerics(format!(
                "equilibrium weight {v:e} negative beyond solver tolerance"
            )));
        }
        weights.push(v.max(0.0));
    }
    let capacity = weights.iter().sum();
    Ok(Equilibrium {
        pts: pts.to_vec(),
        weights,
        capacity,
    })
}

/// Capacity of a box, via the dense equilibrium solve.
pub fn box_capacity(b: &LatticeBox, table: &GreenTable) -> Result<f64> {
    let pts: Vec<Vec<i64>> = b.vertices().collect();
    Ok(equilibrium(&pts, table)?.capacity)
}

/// Conditional variance of the field at a vertex given the cable field at
/// the 2d surrounding edge midpoints: `1/(4d)`.
///
/// Each of the `2d` star branches has cable length 1/4, so the effective
/// resistance center-to-boundary is `(1/4)/(2d)` and the variance is twice
/// that (the variance rate of the edge fields is 2).
pub fn sigma0_sq(d: usize) -> Result<f64> {
    if d < 3 {
        return Err(Error::geometry("sigma0_sq requires d >= 3"));
    }
    Ok(1.0 / (4.0 * d as f64))
}
