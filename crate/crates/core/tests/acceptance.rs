//! Acceptance gate: one test per shipping criterion, each printing a single
//! PASS/FAIL line with the measured numbers. Every tolerance is pinned here,
//! next to the check it guards. Run with `--nocapture` to see the lines for
//! passing criteria; a failing criterion also panics with the same message.

use std::collections::HashSet;
use std::sync::OnceLock;

use rand::Rng;
use rand_distr::StandardNormal;

use cablefield::cable::BridgeSpec;
use cablefield::gff::DirichletSampler;
use cablefield::greens::{fourier_quadrature, green_zd, GreenTable, KilledGreen};
use cablefield::interlace::{laplace_transform, psi_growth, InterlacementEngine};
use cablefield::iso::{sign_rule_killed_experiment, verify_iso_moments};
use cablefield::lattice::LatticeBox;
use cablefield::perc::{
    crossing_curve, estimate_hstar, estimate_pc, flip_experiment, CrossingMode, HStar,
};
use cablefield::renorm::{
    build_scales, cascade_certificate, decoupling_test_gff, decoupling_test_interlacement,
    eval_recursive_from_seeds, field_cap_event, field_mean_event, find_bad_star_path,
    iid_lift_probability, local_time_cap_event, mean_local_time_event, renorm_decay_experiment,
    CascadeOutcome, PlaneGrid, SeedFamily, SeedModel,
};
use cablefield::rng::Stream;
use cablefield::stats::{ks_test, median, Accumulator};

/// Shared lattice Green table; range 20 covers the largest window + halo
/// used below (16-side decoupling window with halo 3).
fn table() -> &'static GreenTable {
    static T: OnceLock<GreenTable> = OnceLock::new();
    T.get_or_init(|| GreenTable::build(3, 20, 1e-10).expect("green table"))
}

fn gate(n: usize, name: &str, body: impl FnOnce() -> Result<String, String>) {
    match body() {
        Ok(detail) => println!("criterion {n:02} {name}: PASS ({detail})"),
        Err(msg) => {
            println!("criterion {n:02} {name}: FAIL ({msg})");
            panic!("criterion {n:02} {name} failed: {msg}");
        }
    }
}

macro_rules! ensure {
    ($cond:expr, $($t:tt)*) => {
        if !($cond) {
            return Err(format!($($t)*));
        }
    };
}

// ---------------------------------------------------------------------------
// 1. Green oracle

#[test]
fn criterion_01_green_oracle() {
    gate(1, "green oracle", || {
        let g0 = green_zd(&[0, 0, 0], 3, 1e-12).map_err(|e| e.to_string())?;
        let fourier =
            fourier_quadrature(&[0, 0, 0], 3, 40, 16).map_err(|e| e.to_string())? / 6.0;
        ensure!(
            (g0 - fourier).abs() < 1e-6,
            "quadrature mismatch: {g0} vs {fourier}"
        );
        // Expected visits to the origin, Watson's integral.
        let visits = 6.0 * g0;
        ensure!(
            (visits - 1.5163860591).abs() < 1e-8,
            "visit count {visits} off the reference value"
        );

        // 10^8 walk steps split into 10^4 independent walks of 10^4 steps;
        // each walk contributes its origin-visit count (the start included).
        let walks = 10_000usize;
        let steps = 10_000usize;
        let mut acc = Accumulator::new();
        let stream = Stream::root(0xacc1);
        for w in 0..walks {
            let mut rng = stream.child(w as u64).rng();
            let mut pos = [0i64; 3];
            let mut count = 1u64;
            for _ in 0..steps {
                let dir = rng.gen_range(0..6usize);
                pos[dir >> 1] += if dir & 1 == 0 { 1 } else { -1 };
                if pos == [0, 0, 0] {
                    count += 1;
                }
            }
            acc.push(count as f64);
        }
        // Visits after step 10^4 are lost to truncation; the integrated
        // return-probability tail bounds them by 2 (3/2pi)^{3/2} / sqrt(T).
        let tail = 0.008;
        let diff = (acc.mean() - visits).abs();
        let lim = 3.0 * acc.std_err() + tail;
        ensure!(
            diff <= lim,
            "walk estimate {} +- {} vs {visits} (allowance {lim})",
            acc.mean(),
            acc.std_err()
        );
        Ok(format!(
            "g(0)={g0:.10}, quadrature gap {:.2e}, walk visits {:.4} +- {:.4}",
            (g0 - fourier).abs(),
            acc.mean(),
            acc.std_err()
        ))
    });
}

// ---------------------------------------------------------------------------
// 2. GFF law on a box

#[test]
fn criterion_02_gff_law() {
    gate(2, "gff law", || {
        let bbox = LatticeBox::at_origin(3, &[6, 6, 6]).map_err(|e| e.to_string())?;
        let pts: Vec<Vec<i64>> = bbox.vertices().collect();
        let kg = KilledGreen::new(&pts, 3).map_err(|e| e.to_string())?;
        let exact = kg.full_matrix();
        let sampler = DirichletSampler::new(&bbox).map_err(|e| e.to_string())?;
        let n = pts.len();
        let reps = 100_000usize;

        let center = bbox.index_of(&[2, 2, 2]);
        let mut spectral_center = Vec::with_capacity(reps);
        let mut cov = vec![0.0f64; n * n];
        let stream = Stream::root(0xacc2);
        for r in 0..reps {
            let f = sampler.sample(&mut stream.child(r as u64).rng());
            spectral_center.push(f[center]);
            for i in 0..n {
                let fi = f[i];
                for j in i..n {
                    cov[i * n + j] += fi * f[j];
                }
            }
        }

        // Entrywise comparison of 23k covariance estimates. Each has its own
        // Gaussian error bar; with this many simultaneous z-scores a strict
        // 3 se cut trips on pure chance, so the per-entry 3 se check caps the
        // exceedance fraction at its binomial ceiling and the largest |z| at
        // the matching extreme-value envelope.
        let mut worst_z = 0.0f64;
        let mut beyond = 0usize;
        let mut entries = 0usize;
        for i in 0..n {
            for j in i..n {
                let emp = cov[i * n + j] / reps as f64;
                let se =
                    ((exact[(i, i)] * exact[(j, j)] + exact[(i, j)] * exact[(i, j)])
                        / reps as f64)
                        .sqrt();
                let z = (emp - exact[(i, j)]) / se;
                worst_z = worst_z.max(z.abs());
                beyond += (z.abs() > 3.0) as usize;
                entries += 1;
            }
        }
        let frac = beyond as f64 / entries as f64;
        ensure!(
            frac <= 0.006,
            "{beyond}/{entries} covariance entries beyond 3 se"
        );
        ensure!(worst_z <= 5.0, "worst covariance z {worst_z}");

        // Same law from the dense factorization of the Dirichlet operator.
        let mut dense_center = Vec::with_capacity(reps);
        let dense_stream = Stream::root(0xacc2 + 1);
        for r in 0..reps {
            let mut rng = dense_stream.child(r as u64).rng();
            let z = nalgebra::DVector::from_fn(n, |_, _| rng.sample(StandardNormal));
            dense_center.push(kg.sample_transform(&z)[center]);
        }
        let ks = ks_test(&spectral_center, &dense_center, 0.01).map_err(|e| e.to_string())?;
        ensure!(
            !ks.rejected,
            "KS spectral vs dense rejected: D={} crit={}",
            ks.statistic,
            ks.critical
        );
        Ok(format!(
            "cov entries beyond 3se {beyond}/{entries}, worst |z| {worst_z:.2}, KS D={:.4} (crit {:.4})",
            ks.statistic, ks.critical
        ))
    });
}

// ---------------------------------------------------------------------------
// 3. Bridge formulas

#[test]
fn criterion_03_bridge_formulas() {
    gate(3, "bridge formulas", || {
        let b = BridgeSpec::new(0.0, 0.0, 0.5, 2.0).map_err(|e| e.to_string())?;
        let exact = b.sup_tail(1.0);
        ensure!(
            (exact - (-2.0f64).exp()).abs() < 1e-15,
            "closed form {exact} is not exp(-2)"
        );

        // Discretized bridges undercount the continuous supremum; the bias
        // allowance 2/steps matches the expected overshoot between grid
        // points at this tau.
        let steps = 2048usize;
        let reps = 100_000usize;
        let stream = Stream::root(0xacc3);
        let mut hits = 0u64;
        for r in 0..reps {
            let mut rng = stream.child(r as u64).rng();
            let path = b.discretize(steps, &mut rng);
            if path.iter().any(|&v| v >= 1.0) {
                hits += 1;
            }
        }
        let p = hits as f64 / reps as f64;
        let se = (exact * (1.0 - exact) / reps as f64).sqrt();
        let allowance = 3.0 * se + 2.0 / steps as f64;
        ensure!(
            (p - exact).abs() <= allowance,
            "sup tail MC {p} vs {exact} (allowance {allowance})"
        );

        // Band-confinement series on a 12-case grid, cross-checked against
        // the independent spectral expansion and against Monte Carlo.
        let cases = [
            (0.0, 0.0, 0.8),
            (0.0, 0.0, 1.2),
            (-0.3, 0.2, 0.8),
            (-0.3, 0.2, 1.2),
            (0.4, 0.4, 0.8),
            (0.4, 0.4, 1.2),
            (-0.5, -0.1, 0.9),
            (0.1, -0.4, 0.9),
            (0.6, -0.2, 1.0),
            (-0.7, 0.3, 1.1),
            (0.2, 0.5, 1.3),
            (0.0, -0.6, 1.0),
        ];
        let band_steps = 512usize;
        let band_reps = 20_000usize;
        let mut worst_gap = 0.0f64;
        for (ci, &(x, y, a)) in cases.iter().enumerate() {
            let spec = BridgeSpec::new(x, y, 0.5, 2.0).map_err(|e| e.to_string())?;
            let series = spec.stays_in_band(a);
            let spectral = spec.stays_in_band_spectral(a);
            ensure!(
                (series - spectral).abs() < 1e-9,
                "band series {series} vs spectral {spectral} at case {ci}"
            );
            let bstream = Stream::root(0xacc3 + 10 + ci as u64);
            let mut stay = 0u64;
            for r in 0..band_reps {
                let mut rng = bstream.child(r as u64).rng();
                let path = spec.discretize(band_steps, &mut rng);
                if path.iter().all(|&v| v.abs() < a) {
                    stay += 1;
                }
            }
            let p_band = stay as f64 / band_reps as f64;
            let se_band = (series * (1.0 - series) / band_reps as f64).sqrt();
            let lim = 3.0 * se_band + 2.0 / band_steps as f64;
            worst_gap = worst_gap.max((p_band - series).abs() - lim);
            ensure!(
                (p_band - series).abs() <= lim,
                "band case {ci} ({x},{y},{a}): MC {p_band} vs series {series} (allowance {lim})"
            );
        }
        Ok(format!(
            "sup tail MC {p:.5} vs e^-2 {exact:.5}, 12 band cases within allowance (worst slack {:.4})",
            -worst_gap
        ))
    });
}

// ---------------------------------------------------------------------------
// 4. Interlacement normalization

#[test]
fn criterion_04_interlacement_normalization() {
    gate(4, "interlacement normalization", || {
        let window = LatticeBox::at_origin(3, &[12, 12, 12]).map_err(|e| e.to_string())?;
        let engine = InterlacementEngine::new(&window, 5, table()).map_err(|e| e.to_string())?;
        let probes = [
            window.index_of(&[6, 6, 6]),
            window.index_of(&[3, 3, 3]),
        ];
        let mut details = Vec::new();
        for (ui, u) in [0.25f64, 1.0].into_iter().enumerate() {
            let stream = Stream::root(0xacc4).child(ui as u64);
            let mut accs = [Accumulator::new(), Accumulator::new()];
            for r in 0..1000u64 {
                let f = engine
                    .sample(u, &stream.child(r), false)
                    .map_err(|e| e.to_string())?;
                for (acc, &p) in accs.iter_mut().zip(&probes) {
                    acc.push(f.local_times[p]);
                }
            }
            for (acc, label) in accs.iter().zip(["center", "quarter"]) {
                ensure!(
                    (acc.mean() - u).abs() <= 3.0 * acc.std_err(),
                    "mean local time at {label}: {} +- {} vs u={u}",
                    acc.mean(),
                    acc.std_err()
                );
            }
            details.push(format!("u={u}: {:.4}/{:.4}", accs[0].mean(), accs[1].mean()));
        }

        // Laplace functionals for five small potentials, against the exact
        // resolvent formula. Positive coefficients stay below half the
        // divergence threshold so the exponential moments have finite
        // variance (the guard at 2 lambda is checked explicitly).
        let lwin = LatticeBox::at_origin(3, &[3, 3, 3]).map_err(|e| e.to_string())?;
        let lengine = InterlacementEngine::new(&lwin, 8, table()).map_err(|e| e.to_string())?;
        let u = 0.6;
        let potentials: [(&[[i64; 3]], &[f64]); 5] = [
            (&[[1, 1, 1]], &[0.5]),
            (&[[1, 1, 1]], &[-0.8]),
            (&[[1, 1, 1], [2, 1, 1]], &[0.4, 0.3]),
            (&[[1, 1, 1], [0, 1, 1], [1, 2, 1]], &[0.25, -0.3, 0.2]),
            (&[[0, 0, 0], [2, 2, 2]], &[-0.5, 0.45]),
        ];
        for (pi, (support, lambda)) in potentials.iter().enumerate() {
            let pts: Vec<Vec<i64>> = support.iter().map(|p| p.to_vec()).collect();
            let exact = laplace_transform(&pts, lambda, u, table()).map_err(|e| e.to_string())?;
            let doubled: Vec<f64> = lambda.iter().map(|&l| 2.0 * l).collect();
            laplace_transform(&pts, &doubled, u, table())
                .map_err(|e| format!("potential {pi} has heavy tails: {e}"))?;
            let idx: Vec<usize> = pts.iter().map(|p| lwin.index_of(p)).collect();
            let stream = Stream::root(0xacc4 + 100 + pi as u64);
            let mut acc = Accumulator::new();
            for r in 0..25_000u64 {
                let f = lengine
                    .sample(u, &stream.child(r), false)
                    .map_err(|e| e.to_string())?;
                let e: f64 = idx
                    .iter()
                    .zip(lambda.iter())
                    .map(|(&i, &l)| l * f.local_times[i])
                    .sum();
                acc.push(e.exp());
            }
            ensure!(
                (acc.mean() - exact).abs() <= 3.0 * acc.std_err(),
                "potential {pi}: MC {} +- {} vs exact {exact}",
                acc.mean(),
                acc.std_err()
            );
        }
        Ok(format!(
            "local-time means {} ; 5 Laplace checks within 3 se",
            details.join(", ")
        ))
    });
}

// ---------------------------------------------------------------------------
// 5. Isomorphism

#[test]
fn criterion_05_isomorphism() {
    gate(5, "isomorphism", || {
        // Moments and the distributional comparison at the window center.
        let window = LatticeBox::at_origin(3, &[5, 5, 5]).map_err(|e| e.to_string())?;
        let report = verify_iso_moments(
            &window,
            1.0,
            100_000,
            14,
            table(),
            &Stream::root(0xacc5),
            0.01,
        )
        .map_err(|e| e.to_string())?;
        ensure!(
            (report.expected_mean - 1.126366).abs() < 5e-7,
            "expected mean {} is not u + g(0)/2",
            report.expected_mean
        );
        ensure!(
            report.pass,
            "iso moments/KS failed: mean z {:.2}/{:.2}, var z {:.2}/{:.2}, KS D={:.4} crit={:.4}",
            report.square_mean_z,
            report.occupation_mean_z,
            report.square_var_z,
            report.occupation_var_z,
            report.ks.statistic,
            report.ks.critical
        );

        // Sign rule on the killed network: floor constraint exact, vertex
        // marginal against a fresh field.
        let swin = LatticeBox::at_origin(3, &[5, 5, 5]).map_err(|e| e.to_string())?;
        let sign = sign_rule_killed_experiment(&swin, 1.0, 20_000, &Stream::root(0xacc5 + 1), 0.01)
            .map_err(|e| e.to_string())?;
        ensure!(
            sign.occupied_floor_violations == 0,
            "{} occupied vertices below -sqrt(2u)",
            sign.occupied_floor_violations
        );
        ensure!(
            sign.max_identity_residual < 1e-12,
            "identity residual {}",
            sign.max_identity_residual
        );
        ensure!(
            sign.pass,
            "sign-rule marginal failed its KS/moment checks"
        );
        Ok(format!(
            "mean z {:+.2}/{:+.2}, var z {:+.2}/{:+.2}, KS D={:.4} (crit {:.4}), sign-rule exact",
            report.square_mean_z,
            report.occupation_mean_z,
            report.square_var_z,
            report.occupation_var_z,
            report.ks.statistic,
            report.ks.critical
        ))
    });
}

// ---------------------------------------------------------------------------
// 6. Lattice vs cable contrast at h = 0

#[test]
fn criterion_06_lattice_cable_contrast() {
    gate(6, "lattice/cable contrast", || {
        // At h = 0 the lattice level set is supercritical, so its spanning
        // frequency is near one already at L = 16 and the sequence saturates;
        // the cable frequency sits near a small plateau and drifts down
        // slowly. Each trend is therefore asserted as the full span
        // theta(64) - theta(16) at three standard errors, with no
        // significant reversal allowed between consecutive sizes. The span
        // needs 2000 replicas per size for the cable side to resolve.
        let sizes = [16i64, 32, 64];
        let reps = 2000usize;
        let lattice = crossing_curve(
            3,
            &sizes,
            &[0.0],
            reps,
            CrossingMode::Lattice,
            &Stream::root(0xacc6),
        )
        .map_err(|e| e.to_string())?;
        let cable = crossing_curve(
            3,
            &sizes,
            &[0.0],
            reps,
            CrossingMode::Cable,
            &Stream::root(0xacc6 + 1),
        )
        .map_err(|e| e.to_string())?;
        let se = |theta: f64| (theta * (1.0 - theta) / reps as f64).sqrt().max(1.0 / reps as f64);
        let sd = |a: f64, b: f64| (se(a).powi(2) + se(b).powi(2)).sqrt();
        let check = |pts: &[cablefield::perc::CrossingPoint], rising: bool, name: &str| {
            let sign = if rising { 1.0 } else { -1.0 };
            for w in pts.windows(2) {
                let step = sign * (w[1].theta - w[0].theta);
                if step < -3.0 * sd(w[0].theta, w[1].theta) {
                    return Err(format!(
                        "{name} trend reverses significantly at L={}->{}: {:.4} -> {:.4}",
                        w[0].l, w[1].l, w[0].theta, w[1].theta
                    ));
                }
            }
            let first = pts.first().expect("curve has points");
            let last = pts.last().expect("curve has points");
            let span = sign * (last.theta - first.theta);
            let z = span / sd(first.theta, last.theta);
            if z < 3.0 {
                return Err(format!(
                    "{name} span L={}->{} not significant: {:.4} -> {:.4} (z = {:.2})",
                    first.l, last.l, first.theta, last.theta, z
                ));
            }
            Ok(z)
        };
        let z_lat = check(&lattice, true, "lattice")?;
        let z_cab = check(&cable, false, "cable")?;
        let fmt = |pts: &[cablefield::perc::CrossingPoint]| {
            pts.iter()
                .map(|p| format!("{:.4}", p.theta))
                .collect::<Vec<_>>()
                .join("/")
        };
        Ok(format!(
            "lattice theta {} rising (z {:.1}), cable theta {} falling (z {:.1}), L=16/32/64",
            fmt(&lattice),
            z_lat,
            fmt(&cable),
            z_cab
        ))
    });
}

// ---------------------------------------------------------------------------
// 7. Critical level positive at desk scale

#[test]
fn criterion_07_hstar_positive() {
    gate(7, "critical level", || {
        let grid: Vec<f64> = (1..=25).map(|i| 0.02 * i as f64).collect();
        let curves = crossing_curve(
            3,
            &[16, 32, 64],
            &grid,
            400,
            CrossingMode::Lattice,
            &Stream::root(0xacc7),
        )
        .map_err(|e| e.to_string())?;
        let est = estimate_hstar(&curves, 1000, &Stream::root(0xacc7 + 1))
            .map_err(|e| e.to_string())?;
        match est {
            HStar::Indeterminate { pairs_checked } => Err(format!(
                "no curve crossings among {pairs_checked} size pairs"
            )),
            HStar::Estimate {
                value,
                ci_lo,
                ci_hi,
                ref pairs,
                ..
            } => {
                ensure!(value > 0.0, "estimate {value} not positive");
                ensure!(
                    ci_lo > 0.0,
                    "bootstrap interval [{ci_lo}, {ci_hi}] does not exclude zero"
                );
                let pc = estimate_pc(value, 3).map_err(|e| e.to_string())?;
                ensure!(pc < 0.5, "p_c estimate {pc} not below 1/2");
                Ok(format!(
                    "h* = {value:.4} [{ci_lo:.4}, {ci_hi:.4}] from {} crossings, p_c = {pc:.4}",
                    pairs.len()
                ))
            }
        }
    });
}

// ---------------------------------------------------------------------------
// 8. Flip inequality

#[test]
fn criterion_08_flip_inequality() {
    gate(8, "flip inequality", || {
        let report = flip_experiment(3, 0.02, 200, 4000, table(), &Stream::root(0xacc8))
            .map_err(|e| e.to_string())?;
        ensure!(
            report.all_hold,
            "{}/{} boundaries violated the 3 se comparison",
            report.boundary_samples - report.holds,
            report.boundary_samples
        );
        ensure!(
            report.exact_holds == report.boundary_samples,
            "closed-form composition failed on {} boundaries",
            report.boundary_samples - report.exact_holds
        );
        Ok(format!(
            "200 boundaries hold at h=0.02 (cap K={:.3}), closed form exact, worst MC-vs-exact z {:.2}",
            report.k_level, report.max_agreement_z
        ))
    });
}

// ---------------------------------------------------------------------------
// 9. Renormalization machinery

#[test]
fn criterion_09_renorm_machinery() {
    gate(9, "renormalization", || {
        // (a) Monte Carlo recursion against the exact independent-seed
        // oracles, on the two surrogate ladders whose one-level maps have
        // closed forms.
        let scales3 = build_scales(3, 1, 2, Some((2, 2))).map_err(|e| e.to_string())?;
        let q = 0.1;
        let f = |p: f64| 1.0 - (1.0 - p).powi(8) - 8.0 * p * (1.0 - p).powi(7);
        let exact3 = [q, f(q), f(f(q))];
        let rep3 = renorm_decay_experiment(
            &SeedModel::Iid { q },
            &scales3,
            2,
            1500,
            &Stream::root(0xacc9),
        )
        .map_err(|e| e.to_string())?;
        for (row, target) in rep3.rows.iter().zip(exact3) {
            let se = (target * (1.0 - target) / row.trials as f64)
                .sqrt()
                .max(1.0 / row.trials as f64);
            ensure!(
                (row.prob - target).abs() <= 3.0 * se,
                "d=3 ratio-2 ladder level {}: {} vs exact {target}",
                row.n,
                row.prob
            );
        }
        let scales2 = build_scales(2, 1, 2, Some((4, 2))).map_err(|e| e.to_string())?;
        let q2 = 0.12;
        let f1 = iid_lift_probability(&scales2, 1, q2).map_err(|e| e.to_string())?;
        let f2 = iid_lift_probability(&scales2, 2, f1).map_err(|e| e.to_string())?;
        let rep2 = renorm_decay_experiment(
            &SeedModel::Iid { q: q2 },
            &scales2,
            2,
            1200,
            &Stream::root(0xacc9 + 1),
        )
        .map_err(|e| e.to_string())?;
        for (row, target) in rep2.rows.iter().zip([q2, f1, f2]) {
            let se = (target * (1.0 - target) / row.trials as f64)
                .sqrt()
                .max(1.0 / row.trials as f64);
            ensure!(
                (row.prob - target).abs() <= 3.0 * se,
                "d=2 ratio-4 ladder level {}: {} vs exact {target}",
                row.n,
                row.prob
            );
        }

        // (b) Cascade certificates against the recursion on every feasible
        // canonical instance: the d=2 ladder with jittered radial paths and
        // the d=3 ladder with an axis ray. Surrogate ladders are refused.
        let canon2 = build_scales(2, 1, 1, None).map_err(|e| e.to_string())?;
        let l1 = canon2.level(1).map_err(|e| e.to_string())?;
        let oracle = |_: &[i64]| Some(SeedFamily::TraceSpans);
        let mut rng = Stream::root(0xacc9 + 2).rng();
        let mut agreed = 0usize;
        for _ in 0..25 {
            let mut path = vec![vec![0i64, 0]];
            let (mut x, mut y) = (0i64, 0i64);
            while x < 2 * l1 + 2 {
                x += 1;
                y += rng.gen_range(-1i64..=1);
                path.push(vec![x, y]);
            }
            let out = cascade_certificate(&path, &oracle, &canon2, 1, &[0, 0])
                .map_err(|e| e.to_string())?;
            let w = match out {
                CascadeOutcome::Certified(w) => w,
                CascadeOutcome::Counterexample { stage, detail } => {
                    return Err(format!("d=2 cascade failed at {stage}: {detail}"))
                }
            };
            let seed_true: HashSet<Vec<i64>> = path.iter().cloned().collect();
            let eval = eval_recursive_from_seeds(
                &seed_true,
                &canon2,
                SeedFamily::TraceSpans,
                1,
                &w.vertex,
            )
            .map_err(|e| e.to_string())?;
            ensure!(
                eval.outcome && eval.verify(&seed_true, &canon2).unwrap_or(false),
                "recursion disagrees with certificate at {:?}",
                w.vertex
            );
            agreed += 1;
        }
        let canon3 = build_scales(3, 1, 1, None).map_err(|e| e.to_string())?;
        let l13 = canon3.level(1).map_err(|e| e.to_string())?;
        let ray: Vec<Vec<i64>> = (0..=2 * l13).map(|i| vec![i, 0, 0]).collect();
        let oracle3 = |_: &[i64]| Some(SeedFamily::FieldBelowCap);
        let out3 = cascade_certificate(&ray, &oracle3, &canon3, 1, &[0, 0, 0])
            .map_err(|e| e.to_string())?;
        let w3 = match out3 {
            CascadeOutcome::Certified(w) => w,
            CascadeOutcome::Counterexample { stage, detail } => {
                return Err(format!("d=3 cascade failed at {stage}: {detail}"))
            }
        };
        let ray_true: HashSet<Vec<i64>> = ray.iter().cloned().collect();
        let eval3 = eval_recursive_from_seeds(
            &ray_true,
            &canon3,
            SeedFamily::FieldBelowCap,
            1,
            &w3.vertex,
        )
        .map_err(|e| e.to_string())?;
        ensure!(eval3.outcome, "d=3 recursion disagrees with certificate");
        agreed += 1;
        let surr = build_scales(2, 1, 1, Some((8, 2))).map_err(|e| e.to_string())?;
        let p8: Vec<Vec<i64>> = (0..=16).map(|i| vec![i, 0]).collect();
        ensure!(
            cascade_certificate(&p8, &oracle, &surr, 1, &[0, 0]).is_err(),
            "surrogate ladder was not refused"
        );

        // (c) Star-path feasibility against exhaustive search on a 14x14
        // coarse grid.
        let grid = PlaneGrid::new([-7, -7], [7, 7]).map_err(|e| e.to_string())?;
        let mut rng2 = Stream::root(0xacc9 + 3).rng();
        let mut checked = 0usize;
        for trial in 0..200 {
            let p = if trial % 2 == 0 { 0.35 } else { 0.5 };
            let bad: Vec<bool> = (0..grid.vertex_count()).map(|_| rng2.gen::<f64>() < p).collect();
            let (m, n_radius) = if trial % 3 == 0 { (0, 5) } else { (1, 6) };
            let got = find_bad_star_path(&grid, &bad, [0, 0], m, n_radius)
                .map_err(|e| e.to_string())?;
            let want = star_reachable(&grid, &bad, m, n_radius);
            ensure!(
                got.is_some() == want,
                "star path disagreement at trial {trial}: got {:?}, oracle {want}",
                got.map(|p| p.len())
            );
            checked += 1;
        }
        Ok(format!(
            "oracle probs within 3 se on both ladders, {agreed}/26 cascades certified and cross-checked, {checked} star maps agree with exhaustive search"
        ))
    });
}

/// Independent exhaustive reachability: breadth-first over bad vertices with
/// 8-neighbor adjacency, from the inner shell to the outer radius.
fn star_reachable(grid: &PlaneGrid, bad: &[bool], m: i64, n_radius: i64) -> bool {
    let mut seen = vec![false; grid.vertex_count()];
    let mut queue = std::collections::VecDeque::new();
    for i in 0..grid.vertex_count() {
        let c = grid.coords_of(i);
        if bad[i] && c[0].abs().max(c[1].abs()) <= m {
            seen[i] = true;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let c = grid.coords_of(i);
        if c[0].abs().max(c[1].abs()) >= n_radius {
            return true;
        }
        for dx in -1i64..=1 {
            for dy in -1i64..=1 {
                if dx == 0 && dy == 0 {
                    continue;
                }
                let n = [c[0] + dx, c[1] + dy];
                if grid.contains(n) {
                    let j = grid.index_of(n);
                    if bad[j] && !seen[j] {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
    }
    false
}

// ---------------------------------------------------------------------------
// 10. Decoupling inequalities

#[test]
fn criterion_10_decoupling() {
    gate(10, "decoupling", || {
        // Two boxes of side 4 separated by exactly 8 in a 16-side window.
        let window = LatticeBox::at_origin(3, &[16, 16, 16]).map_err(|e| e.to_string())?;
        let b1 = LatticeBox::new(vec![0, 6, 6], vec![4, 10, 10]).map_err(|e| e.to_string())?;
        let b2 = LatticeBox::new(vec![11, 6, 6], vec![15, 10, 10]).map_err(|e| e.to_string())?;
        ensure!(
            cablefield::renorm::box_separation(&b1, &b2).map_err(|e| e.to_string())? == 8,
            "box separation is not 8"
        );
        let eps = 0.25;
        let reps = 500;

        let mut lines = Vec::new();
        // Field kind: two increasing pairs (box means) and two decreasing
        // pairs (box maxima under a cap).
        let gff_pairs: [(f64, f64, bool); 4] = [
            (0.0, 0.05, true),
            (0.1, 0.0, true),
            (0.9, 1.1, false),
            (1.3, 1.0, false),
        ];
        for (pi, &(t1, t2, increasing)) in gff_pairs.iter().enumerate() {
            let stream = Stream::root(0xacc10).child(pi as u64);
            let report = if increasing {
                let f1 = field_mean_event(&window, &b1, t1);
                let f2 = field_mean_event(&window, &b2, t2);
                decoupling_test_gff(&window, &b1, &b2, eps, true, reps, &f1, &f2, &stream)
            } else {
                let f1 = field_cap_event(&window, &b1, t1);
                let f2 = field_cap_event(&window, &b2, t2);
                decoupling_test_gff(&window, &b1, &b2, eps, false, reps, &f1, &f2, &stream)
            }
            .map_err(|e| e.to_string())?;
            ensure!(
                report.holds_within_3se,
                "field pair {pi}: lhs {:.4} vs rhs {:.4} +- {:.4}",
                report.lhs.value,
                report.rhs_product,
                report.rhs_product_se
            );
            lines.push(format!("f{pi}:{:.3}<={:.3}", report.lhs.value, report.rhs_product));
        }

        // Occupation kind: engine over the same window, halo 3.
        let engine = InterlacementEngine::new(&window, 3, table()).map_err(|e| e.to_string())?;
        let u = 0.5;
        let occ_pairs: [(f64, f64, bool); 4] = [
            (0.45, 0.5, true),
            (0.6, 0.4, true),
            (45.0, 50.0, false),
            (40.0, 36.0, false),
        ];
        for (pi, &(t1, t2, increasing)) in occ_pairs.iter().enumerate() {
            let stream = Stream::root(0xacc10 + 1).child(pi as u64);
            let report = if increasing {
                let f1 = mean_local_time_event(&window, &b1, t1);
                let f2 = mean_local_time_event(&window, &b2, t2);
                decoupling_test_interlacement(
                    &engine, &b1, &b2, u, eps, true, reps, &f1, &f2, &stream,
                )
            } else {
                let f1 = local_time_cap_event(&window, &b1, t1);
                let f2 = local_time_cap_event(&window, &b2, t2);
                decoupling_test_interlacement(
                    &engine, &b1, &b2, u, eps, false, reps, &f1, &f2, &stream,
                )
            }
            .map_err(|e| e.to_string())?;
            ensure!(
                report.holds_within_3se,
                "occupation pair {pi}: lhs {:.4} vs rhs {:.4} +- {:.4}",
                report.lhs.value,
                report.rhs_product,
                report.rhs_product_se
            );
            lines.push(format!("o{pi}:{:.3}<={:.3}", report.lhs.value, report.rhs_product));
        }
        Ok(format!("s=8, eps=0.25: {}", lines.join(" ")))
    });
}

// ---------------------------------------------------------------------------
// 11. Trace growth

#[test]
fn criterion_11_appendix_growth() {
    gate(11, "trace growth", || {
        let seed = vec![vec![0i64, 0, 0]];
        let mut medians = Vec::new();
        for (ti, steps) in [64usize, 256, 1024].into_iter().enumerate() {
            let mut caps: Vec<f64> = (0..41u64)
                .map(|r| {
                    let s = Stream::root(0xacc11).child(ti as u64).child(r);
                    psi_growth(&seed, 1.0, steps, 1, table(), &s).map(|st| st[1].capacity)
                })
                .collect::<Result<_, _>>()
                .map_err(|e| e.to_string())?;
            let med = median(&mut caps).map_err(|e| e.to_string())?;
            medians.push(med);
        }
        ensure!(
            medians[0] < medians[1] && medians[1] < medians[2],
            "median capacities {medians:?} not strictly increasing"
        );

        // Confinement: spread at most T^{(1+eps)/2} with eps = 1/3, so 40
        // sites at T = 256, in at least 99% of replicas.
        let bound = 40i64;
        let reps = 300u64;
        let mut within = 0u64;
        for r in 0..reps {
            let s = Stream::root(0xacc11 + 1).child(r);
            let st = psi_growth(&seed, 1.0, 256, 1, table(), &s).map_err(|e| e.to_string())?;
            if st[1].extent <= bound {
                within += 1;
            }
        }
        ensure!(
            within as f64 >= 0.99 * reps as f64,
            "only {within}/{reps} replicas confined within {bound}"
        );
        Ok(format!(
            "median cap {:.2} -> {:.2} -> {:.2} over T=64/256/1024, {within}/{reps} confined",
            medians[0], medians[1], medians[2]
        ))
    });
}

