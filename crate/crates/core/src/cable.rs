//! Brownian bridge computations on cable edges.
//!
//! On the metric graph each lattice edge carries an interval of length 1/2,
//! and conditionally on the vertex values the field along the interval is an
//! independent Brownian bridge with variance rate 2 (so the effective bridge
//! time of a full edge is `tau = 2 * 1/2 = 1`). Everything here is exact:
//! hitting and confinement probabilities come from reflection series, and
//! the two-sided band probability is cross-checked against an independent
//! eigenfunction expansion of the absorbed heat kernel.

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;

/// Variance rate of the field along cable edges.
pub const CABLE_VAR_RATE: f64 = 2.0;

/// Length of the cable interval attached to one lattice edge.
pub const EDGE_LENGTH: f64 = 0.5;

/// A Brownian bridge from `x` to `y` over length `len` with variance rate
/// `var_rate`; `tau = len * var_rate` is the effective bridge time.
#[derive(Clone, Copy, Debug)]
pub struct BridgeSpec {
    pub x: f64,
    pub y: f64,
    pub len: f64,
    pub var_rate: f64,
}

impl BridgeSpec {
    pub fn new(x: f64, y: f64, len: f64, var_rate: f64) -> Result<Self> {
        if !(len > 0.0) || !(var_rate > 0.0) || !x.is_finite() || !y.is_finite() {
            return Err(Error::parameter(
                "bridge needs positive length and rate and finite endpoints",
            ));
        }
        Ok(BridgeSpec { x, y, len, var_rate })
    }

    /// Full cable edge between vertex values `x` and `y`.
    pub fn edge(x: f64, y: f64) -> Result<Self> {
        BridgeSpec::new(x, y, EDGE_LENGTH, CABLE_VAR_RATE)
    }

    pub fn tau(&self) -> f64 {
        self.len * self.var_rate
    }

    pub fn mean_at(&self, s: f64) -> f64 {
        self.x + (self.y - self.x) * s / self.len
    }

    pub fn variance_at(&self, s: f64) -> f64 {
        self.var_rate * s * (self.len - s) / self.len
    }

    /// `P(sup of the bridge >= m)`; equals 1 below the endpoint maximum.
    pub fn sup_tail(&self, m: f64) -> f64 {
        if m <= self.x.max(self.y) {
            return 1.0;
        }
        (-2.0 * (m - self.x) * (m - self.y) / self.tau()).exp()
    }

    /// `P(inf of the bridge > lvl)`; zero unless both endpoints exceed `lvl`.
    pub fn stays_above(&self, lvl: f64) -> f64 {
        if lvl >= self.x.min(self.y) {
            return 0.0;
        }
        1.0 - (-2.0 * (self.x - lvl) * (self.y - lvl) / self.tau()).exp()
    }

    /// `P(the whole bridge stays inside (-a, a))`, by the reflection series
    /// for the absorbed transition density. Truncated once terms drop below
    /// 1e-16; the k-th term decays like `exp(-8 a^2 k^2 / tau)`.
    pub fn stays_in_band(&self, a: f64) -> f64 {
        if !(a > 0.0) {
            return 0.0;
        }
        if self.x.abs() >= a || self.y.abs() >= a {
            return 0.0;
        }
        let tau = self.tau();
        let delta = self.y - self.x;
        let s = self.x + self.y + 2.0 * a;
        let d2 = delta * delta;
        let mut total = 0.0;
        // k range where either exponential can still exceed 1e-16.
        let reach = (2.0 * tau * 40.0).sqrt() + delta.abs() + s.abs();
        let k_max = (reach / (4.0 * a)).ceil() as i64 + 2;
        for k in -k_max..=k_max {
            let kf = 4.0 * a * k as f64;
            let t1 = (-((delta + kf).powi(2) - d2) / (2.0 * tau)).exp();
            let t2 = (-((s + kf).powi(2) - d2) / (2.0 * tau)).exp();
            total += t1 - t2;
        }
        total.clamp(0.0, 1.0)
    }

    /// Same probability via the eigenfunction expansion of the heat kernel
    /// absorbed at `±a`, divided by the free kernel. Slower to converge for
    /// small `tau`; used to cross-check the reflection series.
    pub fn stays_in_band_spectral(&self, a: f64) -> f64 {
        if !(a > 0.0) || self.x.abs() >= a || self.y.abs() >= a {
            return 0.0;
        }
        let tau = self.tau();
        let w = 2.0 * a;
        let mut num = 0.0;
        let m_max = ((w * (2.0f64 * 40.0 / tau).sqrt()) / std::f64::consts::PI).ceil() as usize + 8;
        for m in 1..=m_max {
            let km = m as f64 * std::f64::consts::PI / w;
            let term = (2.0 / w)
                * (km * (self.x + a)).sin()
                * (km * (self.y + a)).sin()
                * (-km * km * tau / 2.0).exp();
            num += term;
        }
        let free = (-(self.y - self.x).powi(2) / (2.0 * tau)).exp()
            / (2.0 * std::f64::consts::PI * tau).sqrt();
        (num / free).clamp(0.0, 1.0)
    }

    /// Sample the bridge at `n` equal subintervals (returns `n + 1` values
    /// including both endpoints), by sequential conditioning.
    pub fn discretize<R: Rng>(&self, n: usize, rng: &mut R) -> Vec<f64> {
        let ds = self.len / n as f64;
        let mut out = Vec::with_capacity(n + 1);
        out.push(self.x);
        let mut b = self.x;
        for i in 1..n {
            let remaining = self.len - (i - 1) as f64 * ds;
            let mean = b + (self.y - b) * ds / remaining;
            let var = self.var_rate * ds * (remaining - ds) / remaining;
            let z: f64 = rng.sample(StandardNormal);
            b = mean + var.sqrt() * z;
            out.push(b);
        }
        out.push(self.y);
        out
    }

    /// Midpoint value conditionally on the endpoints.
    pub fn sample_midpoint<R: Rng>(&self, rng: &mut R) -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        self.mean_at(self.len / 2.0) + self.variance_at(self.len / 2.0).sqrt() * z
    }
}

/// The level at which an edge bridge stops staying above, as a function of
/// one uniform: with `U = u`, the bridge from `x` to `y` stays above `h`
/// exactly for `h` below the returned value. Monotone in `h` by
/// construction, so one uniform per edge drives a whole level sweep.
pub fn critical_stay_level(x: f64, y: f64, u: f64, len: f64, var_rate: f64) -> Result<f64> {
    if !(u > 0.0 && u <= 1.0) {
        return Err(Error::parameter("exit uniform must lie in (0, 1]"));
    }
    let tau = len * var_rate;
    if !(tau > 0.0) {
        return Err(Error::parameter("bridge time must be positive"));
    }
    // Solve exp(-2 (x-h)(y-h) / tau) = u, i.e. the bridge minimum equals h.
    let c = -tau * (u).ln() / 2.0;
    Ok(0.5 * ((x + y) - ((x - y).powi(2) + 4.0 * c).sqrt()))
}

// ---------------------------------------------------------------------------
// Edge marks

/// Mark triple carried by one edge of the cable graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EdgeMarks {
    /// Bridge stays above the excursion level (open for sign clusters).
    pub stays_above: bool,
    /// Whole bridge stays inside `(-k, k)`.
    pub within_band: bool,
    /// The centred bridge (bridge minus its endpoint interpolation) stays
    /// inside `(-(k - k_tilde), k - k_tilde)`. Independent of the endpoint
    /// values; when both endpoints lie in `[-k_tilde, k_tilde]`, `theta`
    /// implies `within_band` pathwise, and the shared-uniform coupling below
    /// preserves that implication while keeping both marginals exact.
    pub theta: bool,
}

/// Sample the marks of one cable edge with endpoint values `x`, `y`.
/// `lvl` is the excursion level, `k >= k_tilde` the confinement levels.
/// `theta` and `within_band` share one uniform (monotone coupling); the
/// one-sided mark uses an independent uniform, so the joint law across the
/// two-sided and one-sided marks is a product coupling with exact marginals.
pub fn sample_edge_marks<R: Rng>(
    x: f64,
    y: f64,
    lvl: f64,
    k: f64,
    k_tilde: f64,
    rng: &mut R,
) -> Result<EdgeMarks> {
    if !(k >= k_tilde) || !(k_tilde >= 0.0) {
        return Err(Error::parameter("need k >= k_tilde >= 0"));
    }
    let bridge = BridgeSpec::edge(x, y)?;
    let centred = BridgeSpec::edge(0.0, 0.0)?;
    let q_theta = centred.stays_in_band(k - k_tilde);
    let q_band = bridge.stays_in_band(k);
    let u_shared: f64 = rng.gen();
    let u_side: f64 = rng.gen();
    Ok(EdgeMarks {
        stays_above: u_side < bridge.stays_above(lvl),
        within_band: u_shared < q_band,
        theta: u_shared < q_theta,
    })
}

// ---------------------------------------------------------------------------
// Truncation levels

/// Coefficients of the truncation-level schedules. `k_of_h` uses
/// `sqrt(log(c0 / h^e0))`, `k_tilde_of_u` uses `sqrt(log(c1 / u^e1))`, and
/// the target confinement probability is `1 - cp * u^ep`.
#[derive(Clone, Copy, Debug)]
pub struct TruncationParams {
    pub c0: f64,
    pub e0: f64,
    pub c1: f64,
    pub e1: f64,
    pub cp: f64,
    pub ep: f64,
}

impl Default for TruncationParams {
    fn default() -> Self {
        TruncationParams {
            c0: 100.0,
            e0: 2.0,
            c1: 100.0,
            e1: 1.0,
            cp: 0.5,
            ep: 1.0,
        }
    }
}

/// Resolved truncation levels for a level pair `(h, u)`.
#[derive(Clone, Copy, Debug)]
pub struct TruncationLevels {
    pub h: f64,
    pub u: f64,
    /// Field confinement height `K(h)`.
    pub k: f64,
    /// Occupation confinement height `K~(u)`.
    pub k_tilde: f64,
    /// Required probability that the centred bridge stays within the gap.
    pub p: f64,
    /// Actual probability of that event at gap `k - k_tilde`.
    pub theta_prob: f64,
    /// Whether the schedule is self-consistent: `k >= k_tilde` and the
    /// centred bridge meets the required confinement probability.
    pub compatible: bool,
}

pub fn truncation_levels(h: f64, u: f64, params: &TruncationParams) -> Result<TruncationLevels> {
    if !(h > 0.0) || !(u > 0.0) {
        return Err(Error::parameter("levels must be positive"));
    }
    let arg_k = params.c0 / h.powf(params.e0);
    let arg_kt = params.c1 / u.powf(params.e1);
    if arg_k <= 1.0 || arg_kt <= 1.0 {
        return Err(Error::parameter(
            "levels too large for the schedule: log argument must exceed 1",
        ));
    }
    let k = arg_k.ln().sqrt();
    let k_tilde = arg_kt.ln().sqrt();
    let p = 1.0 - params.cp * u.powf(params.ep);
    if !(0.0..1.0).contains(&p) {
        return Err(Error::parameter("confinement probability left (0, 1)"));
    }
    let (theta_prob, compatible) = if k >= k_tilde {
        let centred = BridgeSpec::edge(0.0, 0.0)?;
        let q = centred.stays_in_band(k - k_tilde);
        (q, q >= p)
    } else {
        (0.0, false)
    };
    Ok(TruncationLevels {
        h,
        u,
        k,
        k_tilde,
        p,
        theta_prob,
        compatible,
    })
}
