//! One function per subcommand. Each builds its inputs from the config,
//! farms replicas over the worker pool in a layout fixed by the config
//! alone, writes CSV tables and a field dump where one is natural, and
//! returns whether the experiment's asserted invariants held.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde_json::{json, Value};

use cablefield::gff::DirichletSampler;
use cablefield::greens::GreenTable;
use cablefield::interlace::{
    connectivity_experiment, laplace_transform, psi_growth, InterlacementEngine,
};
use cablefield::iso::{sign_rule_killed_experiment, verify_iso_moments};
use cablefield::lattice::LatticeBox;
use cablefield::perc::{
    crossing_curve, estimate_hstar, estimate_pc, flip_experiment, CrossingMode, CrossingPoint,
    FlipReport, HStar,
};
use cablefield::renorm::{
    box_separation, build_scales, cascade_certificate, decoupling_test_gff,
    decoupling_test_interlacement, eval_recursive_from_seeds, field_cap_event, field_mean_event,
    local_time_cap_event, mean_local_time_event, renorm_decay_experiment, CascadeOutcome,
    DecayRow, SeedFamily, SeedModel,
};
use cablefield::rng::Stream;
use cablefield::stats::{median, percentile_ci, wilson_interval};

use crate::config::{ExperimentConfig, Kind};
use crate::pool::{replica_chunks, run_jobs};
use crate::report::{fmt_f64, ReportWriter};

/// Cap on replica chunks; the chunk layout depends on the replica count
/// only, so the same config reduces identically at any thread count.
const MAX_CHUNKS: usize = 64;

pub fn run(cfg: &ExperimentConfig) -> Result<bool> {
    let mut writer = ReportWriter::new(&cfg.outdir)?;
    let outcome = dispatch(cfg, &mut writer);
    match outcome {
        Ok((pass, results)) => {
            writer.summary(cfg, pass, results)?;
            Ok(pass)
        }
        Err(e) => {
            // Flag the directory as incomplete before surfacing the error.
            let _ = writer.incomplete(cfg, &format!("{e:#}"));
            Err(e)
        }
    }
}

fn dispatch(cfg: &ExperimentConfig, w: &mut ReportWriter) -> Result<(bool, Value)> {
    match cfg.kind {
        Kind::VerifyIso => run_verify_iso(cfg, w),
        Kind::EstimateHstar => run_estimate_hstar(cfg, w),
        Kind::CableContrast => run_cable_contrast(cfg, w),
        Kind::Flip => run_flip(cfg, w),
        Kind::RenormCert => run_renorm_cert(cfg, w),
        Kind::Decouple => run_decouple(cfg, w),
        Kind::Connectivity => run_connectivity(cfg, w),
        Kind::PsiGrowth => run_psi_growth(cfg, w),
        Kind::LaplaceCheck => run_laplace_check(cfg, w),
    }
}

// ---------------------------------------------------------------------------
// shared plumbing

fn halo_for(cfg: &ExperimentConfig, side: i64) -> i64 {
    ((cfg.constants.halo_factor * side as f64).ceil() as i64).max(1)
}

/// The engines look up walk kernels for displacements up to the padded
/// window diameter, beyond which the table falls back to the asymptotic
/// form; covering the diameter exactly keeps everything in the table.
fn green_table(cfg: &ExperimentConfig, max_side: i64, halo: i64) -> Result<GreenTable> {
    let range = (max_side + 2 * halo + 2).max(20) as usize;
    GreenTable::build(cfg.d, range, 1e-10).map_err(|e| anyhow!("green table: {e}"))
}

fn cube(cfg: &ExperimentConfig, side: i64) -> Result<LatticeBox> {
    let sides = vec![side; cfg.d];
    LatticeBox::at_origin(cfg.d, &sides).map_err(|e| anyhow!("window: {e}"))
}

fn seq<T, E: std::fmt::Display>(v: Vec<std::result::Result<T, E>>) -> Result<Vec<T>> {
    v.into_iter().map(|r| r.map_err(|e| anyhow!("{e}"))).collect()
}

fn dump_gff_field(cfg: &ExperimentConfig, w: &mut ReportWriter, side: i64) -> Result<()> {
    let bbox = cube(cfg, side)?;
    let sampler = DirichletSampler::new(&bbox).map_err(|e| anyhow!("{e}"))?;
    let mut rng = Stream::root(cfg.seed).child(0xd0).rng();
    let field = sampler.sample(&mut rng);
    let path = w.path("field.gff1");
    cablefield::gff::save_field(&bbox, &field, &path).map_err(|e| anyhow!("{e}"))?;
    w.note_artifact("field_dump", "field.gff1");
    Ok(())
}

fn dump_occupation_field(
    engine: &InterlacementEngine<'_>,
    u: f64,
    seed: u64,
    w: &mut ReportWriter,
) -> Result<()> {
    let field = engine
        .sample(u, &Stream::root(seed).child(0xd0), false)
        .map_err(|e| anyhow!("{e}"))?;
    let path = w.path("occupation.gff1");
    cablefield::interlace::save_field(&field, &path).map_err(|e| anyhow!("{e}"))?;
    w.note_artifact("field_dump", "occupation.gff1");
    Ok(())
}

// ---------------------------------------------------------------------------
// verify-iso

fn run_verify_iso(cfg: &ExperimentConfig, w: &mut ReportWriter) -> Result<(bool, Value)> {
    let max_side = *cfg.sizes.iter().max().expect("validated non-empty");
    let halo = halo_for(cfg, max_side);
    let table = green_table(cfg, max_side, halo)?;

    struct Cell {
        side: i64,
        u: f64,
    }
    let cells: Vec<Cell> = cfg
        .sizes
        .iter()
        .flat_map(|&side| cfg.u_grid.iter().map(move |&u| Cell { side, u }))
        .collect();

    let results = run_jobs(cells.len(), cfg.threads, |i| -> Result<Value> {
        let cell = &cells[i];
        let window = cube(cfg, cell.side)?;
        let stream = Stream::root(cfg.seed).child(i as u64);
        let halo = halo_for(cfg, cell.side);
        let moments = verify_iso_moments(
            &window,
            cell.u,
            cfg.replicas as u64,
            halo,
            &table,
            &stream.child(0),
            0.01,
        )
        .map_err(|e| anyhow!("{e}"))?;
        let signs =
            sign_rule_killed_experiment(&window, cell.u, cfg.replicas as u64, &stream.child(1), 0.01)
                .map_err(|e| anyhow!("{e}"))?;
        Ok(json!({
            "side": cell.side,
            "u": cell.u,
            "halo": halo,
            "moments": moments,
            "sign_rule": signs,
            "pass": moments.pass && signs.pass,
        }))
    });
    let results = seq(results)?;

    let rows: Vec<Vec<String>> = results
        .iter()
        .map(|r| {
            let m = &r["moments"];
            vec![
                r["side"].to_string(),
                fmt_f64(r["u"].as_f64().unwrap_or(f64::NAN)),
                m["replicas"].to_string(),
                m["square_mean_z"].to_string(),
                m["occupation_mean_z"].to_string(),
                m["square_var_z"].to_string(),
                m["occupation_var_z"].to_string(),
                m["cross_mean_z"].to_string(),
                m["ks"]["statistic"].to_string(),
                m["ks"]["critical"].to_string(),
                r["sign_rule"]["occupied_floor_violations"].to_string(),
                r["sign_rule"]["max_identity_residual"].to_string(),
                r["pass"].to_string(),
                cfg.seed.to_string(),
            ]
        })
        .collect();
    w.csv(
        "iso.csv",
        &[
            "side",
            "u",
            "replicas",
            "square_mean_z",
            "occupation_mean_z",
            "square_var_z",
            "occupation_var_z",
            "cross_mean_z",
            "ks_statistic",
            "ks_critical",
            "floor_violations",
            "max_identity_residual",
            "pass",
            "seed",
        ],
        &rows,
    )?;

    let engine_window = cube(cfg, max_side)?;
    let engine = InterlacementEngine::new(&engine_window, halo, &table).map_err(|e| anyhow!("{e}"))?;
    dump_occupation_field(&engine, cfg.u_grid[0], cfg.seed, w)?;

    let pass = results.iter().all(|r| r["pass"].as_bool() == Some(true));
    Ok((pass, json!({ "cells": results })))
}

// ---------------------------------------------------------------------------
// crossing curves (estimate-hstar, cable-contrast)

/// Sum chunked crossing counts pointwise and refresh the intervals. The
/// chunk layout is a function of the replica count alone.
fn merged_crossing_curve(
    cfg: &ExperimentConfig,
    h_grid: &[f64],
    mode: CrossingMode,
    tag: u64,
) -> Result<Vec<CrossingPoint>> {
    let chunks = replica_chunks(cfg.replicas, MAX_CHUNKS);
    let parts = run_jobs(chunks.len(), cfg.threads, |ci| -> Result<Vec<CrossingPoint>> {
        let (_, len) = chunks[ci];
        crossing_curve(
            cfg.d,
            &cfg.sizes,
            h_grid,
            len,
            mode,
            &Stream::root(cfg.seed).child(tag).child(ci as u64),
        )
        .map_err(|e| anyhow!("{e}"))
    });
    let parts = seq(parts)?;
    let mut merged = parts[0].clone();
    for m in &mut merged {
        m.crossings = 0;
        m.replicas = 0;
    }
    for part in &parts {
        if part.len() != merged.len() {
            bail!("chunked crossing curves disagree on grid layout");
        }
        for (m, p) in merged.iter_mut().zip(part) {
            if m.l != p.l || m.h != p.h {
                bail!("chunked crossing curves disagree on grid layout");
            }
            m.crossings += p.crossings;
            m.replicas += p.replicas;
        }
    }
    for m in &mut merged {
        m.theta = m.crossings as f64 / m.replicas as f64;
        let (lo, hi) =
            wilson_interval(m.crossings, m.replicas, 0.05).map_err(|e| anyhow!("{e}"))?;
        m.ci_lo = lo;
        m.ci_hi = hi;
    }
    Ok(merged)
}

fn crossing_csv(w: &mut ReportWriter, name: &str, curves: &[CrossingPoint], seed: u64) -> Result<()> {
    let rows: Vec<Vec<String>> = curves
        .iter()
        .map(|p| {
            vec![
                format!("{:?}", p.mode).to_lowercase(),
                p.l.to_string(),
                fmt_f64(p.h),
                p.crossings.to_string(),
                p.replicas.to_string(),
                fmt_f64(p.theta),
                fmt_f64(p.ci_lo),
                fmt_f64(p.ci_hi),
                seed.to_string(),
            ]
        })
        .collect();
    w.csv(
        name,
        &["mode", "l", "h", "crossings", "replicas", "theta", "ci_lo", "ci_hi", "seed"],
        &rows,
    )
}

fn run_estimate_hstar(cfg: &ExperimentConfig, w: &mut ReportWriter) -> Result<(bool, Value)> {
    let curves = merged_crossing_curve(cfg, &cfg.h_grid, CrossingMode::Lattice, 1)?;
    crossing_csv(w, "curves.csv", &curves, cfg.seed)?;

    let est = estimate_hstar(&curves, 1000, &Stream::root(cfg.seed).child(2))
        .map_err(|e| anyhow!("{e}"))?;
    let (pass, results) = match &est {
        HStar::Estimate { value, ci_lo, ci_hi, pairs, bootstrap_replicas, indeterminate_resamples } => {
            let pc = estimate_pc(*value, cfg.d).map_err(|e| anyhow!("{e}"))?;
            let pass = *value > 0.0 && *ci_lo > 0.0 && pc < 0.5;
            (
                pass,
                json!({
                    "hstar": {
                        "point": value,
                        "ci_lo": ci_lo,
                        "ci_hi": ci_hi,
                        "replicas": bootstrap_replicas,
                        "seed": cfg.seed,
                    },
                    "p_c_upper": pc,
                    "pairs": pairs,
                    "indeterminate_resamples": indeterminate_resamples,
                }),
            )
        }
        HStar::Indeterminate { pairs_checked } => (
            false,
            json!({
                "hstar": null,
                "indeterminate": true,
                "pairs_checked": pairs_checked,
                "note": "no curve pair crossed inside the h grid",
            }),
        ),
    };
    dump_gff_field(cfg, w, *cfg.sizes.iter().max().expect("validated non-empty"))?;
    Ok((pass, results))
}

fn run_cable_contrast(cfg: &ExperimentConfig, w: &mut ReportWriter) -> Result<(bool, Value)> {
    let lattice = merged_crossing_curve(cfg, &cfg.h_grid, CrossingMode::Lattice, 1)?;
    let cable = merged_crossing_curve(cfg, &cfg.h_grid, CrossingMode::Cable, 2)?;
    let mut all = lattice.clone();
    all.extend(cable.iter().cloned());
    crossing_csv(w, "curves.csv", &all, cfg.seed)?;

    // A cable crossing forces the lattice crossing on the same vertices, so
    // cable frequencies can never sit significantly above lattice ones.
    let mut violations = Vec::new();
    for (lp, cp) in lattice.iter().zip(&cable) {
        let n = lp.replicas as f64;
        let se = |t: f64| (t * (1.0 - t) / n).sqrt().max(1.0 / n);
        let sd = (se(lp.theta).powi(2) + se(cp.theta).powi(2)).sqrt();
        if cp.theta > lp.theta + 3.0 * sd {
            violations.push(json!({
                "l": lp.l,
                "h": lp.h,
                "lattice": lp.theta,
                "cable": cp.theta,
            }));
        }
    }
    dump_gff_field(cfg, w, *cfg.sizes.iter().max().expect("validated non-empty"))?;
    let pass = violations.is_empty();
    Ok((
        pass,
        json!({
            "lattice": lattice,
            "cable": cable,
            "dominance_violations": violations,
        }),
    ))
}

// ---------------------------------------------------------------------------
// flip

/// Inner conditional Monte Carlo size per boundary sample; the outer
/// boundary count is the configured replica number.
const FLIP_INNER_REPLICAS: usize = 4000;

fn run_flip(cfg: &ExperimentConfig, w: &mut ReportWriter) -> Result<(bool, Value)> {
    let h = cfg.h_grid[0];
    let table = green_table(cfg, 4, 4)?;
    let chunks = replica_chunks(cfg.replicas, 32);
    let parts = run_jobs(chunks.len(), cfg.threads, |ci| -> Result<FlipReport> {
        let (_, len) = chunks[ci];
        flip_experiment(
            cfg.d,
            h,
            len,
            FLIP_INNER_REPLICAS,
            &table,
            &Stream::root(cfg.seed).child(ci as u64),
        )
        .map_err(|e| anyhow!("{e}"))
    });
    let parts = seq(parts)?;
    let boundaries: u64 = parts.iter().map(|p| p.boundary_samples as u64).sum();
    let holds: u64 = parts.iter().map(|p| p.holds as u64).sum();
    let exact: u64 = parts.iter().map(|p| p.exact_holds as u64).sum();
    let max_z = parts.iter().map(|p| p.max_agreement_z).fold(0.0f64, f64::max);
    let k_level = parts[0].k_level;
    let pass = holds == boundaries && exact == boundaries;

    w.csv(
        "flip.csv",
        &["h", "k_level", "boundaries", "inner_replicas", "holds", "exact_holds", "max_agreement_z", "seed"],
        &[vec![
            fmt_f64(h),
            fmt_f64(k_level),
            boundaries.to_string(),
            FLIP_INNER_REPLICAS.to_string(),
            holds.to_string(),
            exact.to_string(),
            fmt_f64(max_z),
            cfg.seed.to_string(),
        ]],
    )?;
    Ok((
        pass,
        json!({
            "h": h,
            "k_level": k_level,
            "boundaries": boundaries,
            "inner_replicas": FLIP_INNER_REPLICAS,
            "holds": holds,
            "exact_holds": exact,
            "max_agreement_z": max_z,
        }),
    ))
}

// ---------------------------------------------------------------------------
// renorm-cert

/// Field threshold for the surrogate decay ladder. Calibrated once so the
/// bottom level is visibly occupied while the recursion still dies by the
/// second lift; not a tuning knob.
const DECAY_FIELD_CAP: f64 = 2.2;

fn run_renorm_cert(cfg: &ExperimentConfig, w: &mut ReportWriter) -> Result<(bool, Value)> {
    // Disjoint-halo surrogate ladder: ratio 5 with separation divisor 2
    // forces counted pairs at least one full halo width apart.
    let scales = build_scales(3, 2, 2, Some((5, 2))).map_err(|e| anyhow!("{e}"))?;
    let model = SeedModel::FieldCapBreach { k: DECAY_FIELD_CAP };
    let chunks = replica_chunks(cfg.replicas, MAX_CHUNKS);
    let parts = run_jobs(chunks.len(), cfg.threads, |ci| {
        let (_, len) = chunks[ci];
        renorm_decay_experiment(
            &model,
            &scales,
            2,
            len,
            &Stream::root(cfg.seed).child(ci as u64),
        )
        .map_err(|e| anyhow!("{e}"))
    });
    let parts = seq(parts)?;

    let mut rows: Vec<DecayRow> = parts[0].rows.clone();
    for r in &mut rows {
        r.bad = 0;
        r.replicas = 0;
        r.trials = 0;
    }
    for part in &parts {
        for (m, p) in rows.iter_mut().zip(&part.rows) {
            m.bad += p.bad;
            m.replicas += p.replicas;
            m.trials += p.trials;
        }
    }
    for r in &mut rows {
        r.prob = r.bad as f64 / r.trials as f64;
        let (lo, hi) = wilson_interval(r.bad, r.trials, 0.05).map_err(|e| anyhow!("{e}"))?;
        r.ci_lo = lo;
        r.ci_hi = hi;
    }
    let strictly_decreasing = rows
        .windows(2)
        .all(|p| p[1].prob < p[0].prob || (p[0].bad == 0 && p[1].bad == 0));

    let c = &cfg.constants;
    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let level = scales.levels[r.n] as f64;
            let env_upper = c.big_c1 * (-c.small_c1 * level.sqrt()).exp();
            let env_lower = c.small_c1_prime
                * (-c.big_c1_prime * level.powi(cfg.d as i32 - 2) * (1.0 + level).ln()).exp();
            vec![
                r.n.to_string(),
                scales.levels[r.n].to_string(),
                r.bad.to_string(),
                r.cells.to_string(),
                r.replicas.to_string(),
                r.trials.to_string(),
                fmt_f64(r.prob),
                fmt_f64(r.ci_lo),
                fmt_f64(r.ci_hi),
                fmt_f64(r.doubling_target),
                fmt_f64(env_upper),
                fmt_f64(env_lower),
                cfg.seed.to_string(),
            ]
        })
        .collect();
    w.csv(
        "decay.csv",
        &[
            "level",
            "box_side",
            "bad",
            "cells",
            "replicas",
            "trials",
            "prob",
            "ci_lo",
            "ci_hi",
            "doubling_target",
            "env_upper",
            "env_lower",
            "seed",
        ],
        &csv_rows,
    )?;

    // Certificate on the canonical d = 3 ladder: an axis ray of bad seeds
    // crossing the first annulus must cascade to a certified level-1 vertex
    // that the recursive evaluation independently confirms.
    let canon = build_scales(3, 1, 1, None).map_err(|e| anyhow!("{e}"))?;
    let l1 = canon.levels[1];
    let ray: Vec<Vec<i64>> = (0..=2 * l1).map(|i| vec![i, 0, 0]).collect();
    let ray_set: std::collections::HashSet<Vec<i64>> = ray.iter().cloned().collect();
    let oracle = |z: &[i64]| {
        if ray_set.contains(z) {
            Some(SeedFamily::FieldBelowCap)
        } else {
            None
        }
    };
    let outcome = cascade_certificate(&ray, &oracle, &canon, 1, &[0, 0, 0])
        .map_err(|e| anyhow!("{e}"))?;
    let (certified, witness_json) = match &outcome {
        CascadeOutcome::Certified(wit) => {
            let eval = eval_recursive_from_seeds(
                &ray_set,
                &canon,
                SeedFamily::FieldBelowCap,
                1,
                &wit.vertex,
            )
            .map_err(|e| anyhow!("{e}"))?;
            if !eval.outcome {
                bail!("cascade produced a witness the recursive evaluation rejects");
            }
            (true, serde_json::to_value(wit)?)
        }
        CascadeOutcome::Counterexample { stage, detail } => {
            (false, json!({ "stage": stage, "detail": detail }))
        }
    };

    let pass = strictly_decreasing && rows[0].bad > 0 && certified;
    Ok((
        pass,
        json!({
            "ladder": {
                "seed_side": scales.seed_side,
                "ratio": scales.ratio,
                "sep_div": scales.sep_div,
                "levels": scales.levels,
                "field_cap": DECAY_FIELD_CAP,
            },
            "rows": rows,
            "strictly_decreasing": strictly_decreasing,
            "certificate": {
                "canonical_level_1": l1,
                "certified": certified,
                "witness": witness_json,
            },
        }),
    ))
}

// ---------------------------------------------------------------------------
// decouple

fn run_decouple(cfg: &ExperimentConfig, w: &mut ReportWriter) -> Result<(bool, Value)> {
    // Two congruent boxes on the first axis, separated by `buffer` box
    // sides, centered transversally, inside the tightest window.
    let s = cfg.sizes.first().copied().unwrap_or(4);
    let gap = (cfg.constants.buffer * s as f64).ceil() as i64;
    let win_side = 2 * s + gap;
    let c = (win_side - s) / 2;
    let window = cube(cfg, win_side)?;
    let mut lo1 = vec![c; cfg.d];
    let mut hi1 = vec![c + s; cfg.d];
    lo1[0] = 0;
    hi1[0] = s;
    let b1 = LatticeBox::new(lo1, hi1).map_err(|e| anyhow!("{e}"))?;
    let mut lo2 = vec![c; cfg.d];
    let mut hi2 = vec![c + s; cfg.d];
    lo2[0] = s + gap - 1;
    hi2[0] = 2 * s + gap - 1;
    let b2 = LatticeBox::new(lo2, hi2).map_err(|e| anyhow!("{e}"))?;
    let sep = box_separation(&b1, &b2).map_err(|e| anyhow!("{e}"))?;
    let eps = cfg.constants.delta;

    // Built-in monotone event suite. Field events use absolute levels (the
    // zero-boundary field is centered); occupation events scale with u.
    let gff_pairs: [(f64, f64, bool); 4] =
        [(0.0, 0.05, true), (0.1, 0.0, true), (0.9, 1.1, false), (1.3, 1.0, false)];
    let occ_pairs: [(f64, f64, bool); 4] =
        [(0.9, 1.0, true), (1.2, 0.8, true), (0.72, 0.8, false), (0.64, 0.576, false)];

    #[derive(Clone, Copy)]
    enum Job {
        Gff { t1: f64, t2: f64, increasing: bool },
        Occ { t1: f64, t2: f64, increasing: bool },
    }
    let mut jobs: Vec<Job> = gff_pairs
        .iter()
        .map(|&(t1, t2, increasing)| Job::Gff { t1, t2, increasing })
        .collect();
    let u_level = cfg.u_grid.first().copied();
    let halo = halo_for(cfg, win_side);
    let engine_table = match u_level {
        Some(u) => {
            let volume = (s + 1).pow(cfg.d as u32) as f64;
            for &(f1, f2, increasing) in &occ_pairs {
                let (t1, t2) = if increasing {
                    (f1 * u, f2 * u)
                } else {
                    (f1 * u * volume, f2 * u * volume)
                };
                jobs.push(Job::Occ { t1, t2, increasing });
            }
            Some(green_table(cfg, win_side, halo)?)
        }
        None => None,
    };

    // The occupation engine caches internally, so every job builds its own;
    // construction is deterministic and consumes no randomness.
    let reports = run_jobs(jobs.len(), cfg.threads, |i| {
        let stream = Stream::root(cfg.seed).child(i as u64);
        match jobs[i] {
            Job::Gff { t1, t2, increasing } => {
                if increasing {
                    let f1 = field_mean_event(&window, &b1, t1);
                    let f2 = field_mean_event(&window, &b2, t2);
                    decoupling_test_gff(&window, &b1, &b2, eps, true, cfg.replicas, &f1, &f2, &stream)
                } else {
                    let f1 = field_cap_event(&window, &b1, t1);
                    let f2 = field_cap_event(&window, &b2, t2);
                    decoupling_test_gff(&window, &b1, &b2, eps, false, cfg.replicas, &f1, &f2, &stream)
                }
                .map_err(|e| anyhow!("{e}"))
            }
            Job::Occ { t1, t2, increasing } => {
                let table = engine_table.as_ref().expect("occupation jobs exist only with u");
                let u = u_level.expect("occupation jobs exist only with u");
                let engine =
                    InterlacementEngine::new(&window, halo, table).map_err(|e| anyhow!("{e}"))?;
                if increasing {
                    let f1 = mean_local_time_event(&window, &b1, t1);
                    let f2 = mean_local_time_event(&window, &b2, t2);
                    decoupling_test_interlacement(
                        &engine, &b1, &b2, u, eps, true, cfg.replicas, &f1, &f2, &stream,
                    )
                } else {
                    let f1 = local_time_cap_event(&window, &b1, t1);
                    let f2 = local_time_cap_event(&window, &b2, t2);
                    decoupling_test_interlacement(
                        &engine, &b1, &b2, u, eps, false, cfg.replicas, &f1, &f2, &stream,
                    )
                }
                .map_err(|e| anyhow!("{e}"))
            }
        }
    });
    let reports = seq(reports)?;

    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            vec![
                r.kind.clone(),
                r.increasing.to_string(),
                fmt_f64(r.epsilon),
                r.u.map(fmt_f64).unwrap_or_default(),
                r.separation.to_string(),
                fmt_f64(r.lhs.value),
                fmt_f64(r.lhs.ci_lo),
                fmt_f64(r.lhs.ci_hi),
                fmt_f64(r.rhs_product),
                fmt_f64(r.rhs_product_se),
                fmt_f64(r.slack),
                r.holds_within_3se.to_string(),
                r.holds_with_slack.to_string(),
                r.lhs.replicas.to_string(),
                cfg.seed.to_string(),
            ]
        })
        .collect();
    w.csv(
        "decouple.csv",
        &[
            "kind",
            "increasing",
            "epsilon",
            "u",
            "separation",
            "lhs",
            "lhs_ci_lo",
            "lhs_ci_hi",
            "rhs_product",
            "rhs_product_se",
            "slack",
            "holds_within_3se",
            "holds_with_slack",
            "replicas",
            "seed",
        ],
        &rows,
    )?;
    dump_gff_field(cfg, w, win_side)?;

    let pass = reports.iter().all(|r| r.holds_within_3se);
    Ok((
        pass,
        json!({
            "box_side": s,
            "separation": sep,
            "epsilon": eps,
            "pairs": reports,
        }),
    ))
}

// ---------------------------------------------------------------------------
// connectivity

fn run_connectivity(cfg: &ExperimentConfig, w: &mut ReportWriter) -> Result<(bool, Value)> {
    let max_side = *cfg.sizes.iter().max().expect("validated non-empty");
    let halo = halo_for(cfg, max_side);
    let table = green_table(cfg, max_side, halo)?;

    let cells: Vec<(i64, f64)> = cfg
        .sizes
        .iter()
        .flat_map(|&side| cfg.u_grid.iter().map(move |&u| (side, u)))
        .collect();
    let results = run_jobs(cells.len(), cfg.threads, |i| -> Result<Value> {
        let (side, u) = cells[i];
        let window = cube(cfg, side)?;
        let halo = halo_for(cfg, side);
        let engine = InterlacementEngine::new(&window, halo, &table).map_err(|e| anyhow!("{e}"))?;
        let report =
            connectivity_experiment(&engine, u, cfg.replicas, &Stream::root(cfg.seed).child(i as u64))
                .map_err(|e| anyhow!("{e}"))?;
        let capacity = cablefield::interlace::killed_capacity(&window);
        Ok(json!({
            "side": side,
            "u": u,
            "halo": halo,
            "capacity": capacity,
            "report": report,
        }))
    });
    let results = seq(results)?;

    let c = &cfg.constants;
    let rows: Vec<Vec<String>> = results
        .iter()
        .map(|r| {
            let side = r["side"].as_i64().unwrap_or(0);
            let env_lo = c.small_c0 * (side as f64).powi(cfg.d as i32 - 2);
            let env_hi = c.big_c0 * ((side + 1) as f64).powi(cfg.d as i32 - 2);
            let rep = &r["report"];
            vec![
                side.to_string(),
                r["u"].to_string(),
                rep["replicas"].to_string(),
                rep["nonempty"].to_string(),
                rep["connected"]["value"].to_string(),
                rep["connected"]["ci_lo"].to_string(),
                rep["connected"]["ci_hi"].to_string(),
                rep["pair_intersection"]["value"].to_string(),
                rep["mean_components"].to_string(),
                r["capacity"].to_string(),
                fmt_f64(env_lo),
                fmt_f64(env_hi),
                cfg.seed.to_string(),
            ]
        })
        .collect();
    w.csv(
        "connectivity.csv",
        &[
            "side",
            "u",
            "replicas",
            "nonempty",
            "connected",
            "connected_ci_lo",
            "connected_ci_hi",
            "pair_intersection",
            "mean_components",
            "killed_capacity",
            "cap_env_lo",
            "cap_env_hi",
            "seed",
        ],
        &rows,
    )?;

    let first = &cells[0];
    let window = cube(cfg, first.0)?;
    let engine =
        InterlacementEngine::new(&window, halo_for(cfg, first.0), &table).map_err(|e| anyhow!("{e}"))?;
    dump_occupation_field(&engine, first.1, cfg.seed, w)?;

    let pass = results
        .iter()
        .all(|r| r["report"]["nonempty"].as_u64().map(|n| n > 0).unwrap_or(false));
    Ok((pass, json!({ "cells": results })))
}

// ---------------------------------------------------------------------------
// psi-growth

fn run_psi_growth(cfg: &ExperimentConfig, w: &mut ReportWriter) -> Result<(bool, Value)> {
    let u = cfg.u_grid[0];
    let table = green_table(cfg, 4, 8)?;
    let seed_set = vec![vec![0i64; cfg.d]];
    let iterations = (cfg.d - 2).max(1).min(2);

    struct JobSpec {
        t_idx: usize,
        rep: usize,
    }
    let jobs: Vec<JobSpec> = (0..cfg.sizes.len())
        .flat_map(|t_idx| (0..cfg.replicas).map(move |rep| JobSpec { t_idx, rep }))
        .collect();
    let stages = run_jobs(jobs.len(), cfg.threads, |i| {
        let spec = &jobs[i];
        psi_growth(
            &seed_set,
            u,
            cfg.sizes[spec.t_idx] as usize,
            iterations,
            &table,
            &Stream::root(cfg.seed).child(spec.t_idx as u64).child(spec.rep as u64),
        )
        .map_err(|e| anyhow!("{e}"))
    });
    let stages = seq(stages)?;

    let mut rows = Vec::new();
    let mut per_t = Vec::new();
    let mut final_medians = Vec::new();
    let c = &cfg.constants;
    for (t_idx, &steps) in cfg.sizes.iter().enumerate() {
        let replicates: Vec<&Vec<cablefield::interlace::PsiStage>> = jobs
            .iter()
            .zip(&stages)
            .filter(|(j, _)| j.t_idx == t_idx)
            .map(|(_, s)| s)
            .collect();
        let stage_count = replicates.iter().map(|s| s.len()).min().unwrap_or(0);
        let mut t_stages = Vec::new();
        for si in 0..stage_count {
            let mut caps: Vec<f64> = replicates.iter().map(|s| s[si].capacity).collect();
            let mut exts: Vec<f64> = replicates.iter().map(|s| s[si].extent as f64).collect();
            let cap_med = median(&mut caps).map_err(|e| anyhow!("{e}"))?;
            let ext_med = median(&mut exts).map_err(|e| anyhow!("{e}"))?;
            let (cap_lo, cap_hi) = percentile_ci(&mut caps, 0.05).map_err(|e| anyhow!("{e}"))?;
            let (ext_lo, ext_hi) = percentile_ci(&mut exts, 0.05).map_err(|e| anyhow!("{e}"))?;
            let env_lo = c.small_c0 * ext_med.max(1.0).powi(cfg.d as i32 - 2);
            let env_hi = c.big_c0 * (ext_med + 1.0).powi(cfg.d as i32 - 2);
            if si + 1 == stage_count {
                final_medians.push(cap_med);
            }
            rows.push(vec![
                steps.to_string(),
                si.to_string(),
                fmt_f64(cap_med),
                fmt_f64(cap_lo),
                fmt_f64(cap_hi),
                fmt_f64(ext_med),
                fmt_f64(ext_lo),
                fmt_f64(ext_hi),
                fmt_f64(env_lo),
                fmt_f64(env_hi),
                cfg.replicas.to_string(),
                cfg.seed.to_string(),
            ]);
            t_stages.push(json!({
                "iteration": si,
                "capacity": {
                    "point": cap_med,
                    "ci_lo": cap_lo,
                    "ci_hi": cap_hi,
                    "replicas": cfg.replicas,
                    "seed": cfg.seed,
                },
                "extent": {
                    "point": ext_med,
                    "ci_lo": ext_lo,
                    "ci_hi": ext_hi,
                    "replicas": cfg.replicas,
                    "seed": cfg.seed,
                },
            }));
        }
        per_t.push(json!({ "steps": steps, "stages": t_stages }));
    }
    w.csv(
        "psi.csv",
        &[
            "steps",
            "iteration",
            "capacity_median",
            "capacity_ci_lo",
            "capacity_ci_hi",
            "extent_median",
            "extent_ci_lo",
            "extent_ci_hi",
            "cap_env_lo",
            "cap_env_hi",
            "replicas",
            "seed",
        ],
        &rows,
    )?;

    // The asserted invariant: the median capacity of the final grown set
    // strictly increases along the provided truncation schedule.
    let pass = final_medians.windows(2).all(|w| w[1] > w[0]);
    Ok((
        pass,
        json!({
            "u": u,
            "iterations": iterations,
            "truncations": per_t,
            "final_capacity_medians": final_medians,
            "strictly_increasing": pass,
        }),
    ))
}

// ---------------------------------------------------------------------------
// laplace-check

fn run_laplace_check(cfg: &ExperimentConfig, w: &mut ReportWriter) -> Result<(bool, Value)> {
    if cfg.d != 3 {
        bail!("laplace-check's built-in potential suite is pinned to d = 3; got d = {}", cfg.d);
    }
    let side = cfg.sizes.first().copied().unwrap_or(3).max(3);
    let u = cfg.u_grid[0];
    let halo = halo_for(cfg, side);
    let table = green_table(cfg, side, halo)?;
    let window = cube(cfg, side)?;

    // Positive coefficients stay below half the divergence threshold so the
    // exponential moments keep finite variance; the sixth potential crosses
    // the threshold on purpose and must be refused by the exact transform.
    let potentials: [(&[[i64; 3]], &[f64]); 5] = [
        (&[[1, 1, 1]], &[0.5]),
        (&[[1, 1, 1]], &[-0.8]),
        (&[[1, 1, 1], [2, 1, 1]], &[0.4, 0.3]),
        (&[[1, 1, 1], [0, 1, 1], [1, 2, 1]], &[0.25, -0.3, 0.2]),
        (&[[0, 0, 0], [2, 2, 2]], &[-0.5, 0.45]),
    ];
    let divergent_pt = vec![vec![1i64, 1, 1]];
    let refused = laplace_transform(&divergent_pt, &[3.0], u, &table).is_err();

    let chunks = replica_chunks(cfg.replicas, MAX_CHUNKS);
    // Per-chunk partial sums per potential, merged in chunk order. Each
    // chunk owns an engine (the engine caches internally and is not
    // shareable across workers); replica streams are keyed by absolute
    // replica index, so the chunk layout never shows in the numbers.
    let parts = run_jobs(chunks.len(), cfg.threads, |ci| -> Result<Vec<(f64, f64, u64)>> {
        let (start, len) = chunks[ci];
        let engine = InterlacementEngine::new(&window, halo, &table).map_err(|e| anyhow!("{e}"))?;
        let mut sums = vec![(0.0f64, 0.0f64, 0u64); potentials.len()];
        for rep in start..start + len {
            let field = engine
                .sample(u, &Stream::root(cfg.seed).child(rep as u64), false)
                .map_err(|e| anyhow!("{e}"))?;
            for (pi, (support, lambda)) in potentials.iter().enumerate() {
                let e: f64 = support
                    .iter()
                    .zip(lambda.iter())
                    .map(|(p, &l)| l * field.local_times[window.index_of(&p.to_vec())])
                    .sum();
                let x = e.exp();
                sums[pi].0 += x;
                sums[pi].1 += x * x;
                sums[pi].2 += 1;
            }
        }
        Ok(sums)
    });
    let parts = seq(parts)?;

    let mut rows = Vec::new();
    let mut checks = Vec::new();
    let mut pass = refused;
    for (pi, (support, lambda)) in potentials.iter().enumerate() {
        let pts: Vec<Vec<i64>> = support.iter().map(|p| p.to_vec()).collect();
        let exact = laplace_transform(&pts, lambda, u, &table).map_err(|e| anyhow!("{e}"))?;
        let doubled: Vec<f64> = lambda.iter().map(|&l| 2.0 * l).collect();
        laplace_transform(&pts, &doubled, u, &table)
            .map_err(|e| anyhow!("potential {pi} has heavy tails at 2 lambda: {e}"))?;
        let (sum, sumsq, n) = parts.iter().fold((0.0, 0.0, 0u64), |acc, p| {
            (acc.0 + p[pi].0, acc.1 + p[pi].1, acc.2 + p[pi].2)
        });
        let nf = n as f64;
        let mc = sum / nf;
        let var = (sumsq / nf - mc * mc).max(0.0);
        let se = (var / nf).sqrt();
        let z = (mc - exact) / se;
        pass = pass && z.abs() <= 3.0;
        rows.push(vec![
            pi.to_string(),
            format!("{support:?}"),
            format!("{lambda:?}"),
            fmt_f64(exact),
            fmt_f64(mc),
            fmt_f64(se),
            fmt_f64(z),
            n.to_string(),
            cfg.seed.to_string(),
        ]);
        checks.push(json!({
            "potential": pi,
            "exact": exact,
            "mc": {
                "point": mc,
                "ci_lo": mc - 1.96 * se,
                "ci_hi": mc + 1.96 * se,
                "replicas": n,
                "seed": cfg.seed,
            },
            "z": z,
        }));
    }
    w.csv(
        "laplace.csv",
        &["potential", "support", "lambda", "exact", "mc", "se", "z", "replicas", "seed"],
        &rows,
    )?;
    let dump_engine = InterlacementEngine::new(&window, halo, &table).map_err(|e| anyhow!("{e}"))?;
    dump_occupation_field(&dump_engine, u, cfg.seed, w)?;

    Ok((
        pass,
        json!({
            "u": u,
            "side": side,
            "halo": halo,
            "divergent_potential_refused": refused,
            "checks": checks,
        }),
    ))
}

// ---------------------------------------------------------------------------

/// Round-trip helper shared by the binary and its tests.
pub fn load_field_dump(path: &Path) -> Result<(LatticeBox, Vec<f64>)> {
    cablefield::gff::load_field(path)
        .with_context(|| format!("cannot load field dump {}", path.display()))
        .map_err(|e| anyhow!("{e:#}"))
}
