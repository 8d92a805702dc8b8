//! Experiment configuration: a flat `key = value` file with `[sections]`,
//! or the same structure as a JSON object. Unknown sections and keys are
//! rejected with the offending line so a typo cannot silently fall back to
//! a default.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kind {
    VerifyIso,
    EstimateHstar,
    CableContrast,
    Flip,
    RenormCert,
    Decouple,
    Connectivity,
    PsiGrowth,
    LaplaceCheck,
}

pub const KIND_NAMES: [(&str, Kind); 9] = [
    ("verify-iso", Kind::VerifyIso),
    ("estimate-hstar", Kind::EstimateHstar),
    ("cable-contrast", Kind::CableContrast),
    ("flip", Kind::Flip),
    ("renorm-cert", Kind::RenormCert),
    ("decouple", Kind::Decouple),
    ("connectivity", Kind::Connectivity),
    ("psi-growth", Kind::PsiGrowth),
    ("laplace-check", Kind::LaplaceCheck),
];

impl Kind {
    pub fn as_str(self) -> &'static str {
        KIND_NAMES.iter().find(|(_, k)| *k == self).map(|(s, _)| *s).unwrap()
    }

    fn parse(s: &str) -> Result<Self> {
        KIND_NAMES
            .iter()
            .find(|(name, _)| *name == s)
            .map(|(_, k)| *k)
            .ok_or_else(|| {
                let names: Vec<&str> = KIND_NAMES.iter().map(|(n, _)| *n).collect();
                anyhow!("unknown experiment kind `{s}` (expected one of: {})", names.join(", "))
            })
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Named constants shared by every experiment. The first six are envelope
/// parameters: they are never fitted and never asserted against, only
/// printed next to measured decay and growth columns so a run can be read
/// against the shapes the theory predicts.
///
/// * `big_c0`, `small_c0`: capacity envelope `c0 r^(d-2) .. C0 (r+1)^(d-2)`
///   printed next to grown-set capacities (psi-growth).
/// * `big_c1`, `small_c1`: upper decay envelope `C1 exp(-c1 sqrt(L))`
///   printed next to flagged-density rows (renorm-cert).
/// * `big_c1_prime`, `small_c1_prime`: lower decay envelope
///   `c1' exp(-C1' L^(d-2) ln(1+L))`, same table.
/// * `delta`: sprinkling fraction; the decouple experiment shifts levels
///   and fields by this amount.
/// * `halo_factor`: occupation engines run on the window padded by
///   `ceil(halo_factor * max_side)`.
/// * `buffer`: box separation in decouple, as a multiple of the box side.
#[derive(Clone, Debug, Serialize)]
pub struct Constants {
    pub big_c0: f64,
    pub small_c0: f64,
    pub big_c1: f64,
    pub small_c1: f64,
    pub big_c1_prime: f64,
    pub small_c1_prime: f64,
    pub delta: f64,
    pub halo_factor: f64,
    pub buffer: f64,
}

impl Default for Constants {
    fn default() -> Self {
        Constants {
            big_c0: 1.0,
            small_c0: 1.0,
            big_c1: 1.0,
            small_c1: 1.0,
            big_c1_prime: 1.0,
            small_c1_prime: 1.0,
            delta: 1.0 / 6.0,
            halo_factor: 2.0,
            buffer: 2.0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ExperimentConfig {
    pub kind: Kind,
    pub d: usize,
    pub seed: u64,
    /// Box sides, truncation steps, or ladder levels, depending on the kind.
    pub sizes: Vec<i64>,
    pub h_grid: Vec<f64>,
    pub u_grid: Vec<f64>,
    pub replicas: usize,
    pub threads: usize,
    pub constants: Constants,
    pub outdir: PathBuf,
}

/// Parsed file before the subcommand is known: `kind` may still be absent.
#[derive(Clone, Debug, Default)]
pub struct RawConfig {
    pub kind: Option<Kind>,
    pub d: Option<usize>,
    pub seed: Option<u64>,
    pub sizes: Option<Vec<i64>>,
    pub h_grid: Option<Vec<f64>>,
    pub u_grid: Option<Vec<f64>>,
    pub replicas: Option<usize>,
    pub threads: Option<usize>,
    pub constants: Constants,
    pub outdir: Option<PathBuf>,
}

pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub replicas: Option<usize>,
    pub threads: Option<usize>,
}

impl RawConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        if text.trim_start().starts_with('{') {
            parse_json(&text).with_context(|| format!("{}", path.display()))
        } else {
            parse_text(&text, path)
        }
    }

    /// Merge the subcommand and CLI flags into the file values and check
    /// everything the experiments rely on.
    pub fn resolve(self, cli_kind: Kind, ov: &Overrides) -> Result<ExperimentConfig> {
        if let Some(k) = self.kind {
            if k != cli_kind {
                bail!(
                    "config declares kind = {k} but the `{cli_kind}` subcommand was invoked; \
                     drop the key or run the matching subcommand"
                );
            }
        }
        let cfg = ExperimentConfig {
            kind: cli_kind,
            d: self.d.ok_or_else(|| anyhow!("missing required key `d` in [experiment]"))?,
            seed: ov.seed.or(self.seed).unwrap_or(0),
            sizes: self.sizes.unwrap_or_default(),
            h_grid: self.h_grid.unwrap_or_default(),
            u_grid: self.u_grid.unwrap_or_default(),
            replicas: ov.replicas.or(self.replicas).unwrap_or(100),
            threads: ov.threads.or(self.threads).unwrap_or(1),
            constants: self.constants,
            outdir: ov.out.clone().or(self.outdir).unwrap_or_else(|| PathBuf::from("runs")),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl ExperimentConfig {
    fn validate(&self) -> Result<()> {
        if self.d < 3 {
            bail!(
                "d = {} rejected: the walk on Z^{} is recurrent, so the Green function \
                 diverges and none of these experiments are defined; transience needs d >= 3",
                self.d,
                self.d
            );
        }
        if self.replicas == 0 {
            bail!("replicas must be positive");
        }
        if self.threads == 0 {
            bail!("threads must be positive");
        }
        let c = &self.constants;
        for (name, v) in [
            ("C0", c.big_c0),
            ("c0", c.small_c0),
            ("C1", c.big_c1),
            ("c1", c.small_c1),
            ("C1p", c.big_c1_prime),
            ("c1p", c.small_c1_prime),
            ("halo_factor", c.halo_factor),
            ("buffer", c.buffer),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                bail!("constant {name} must be positive and finite, got {v}");
            }
        }
        if !(c.delta > 0.0 && c.delta < 1.0) {
            bail!("delta must lie in (0, 1), got {}", c.delta);
        }
        for &s in &self.sizes {
            if s < 1 {
                bail!("sizes must be positive, got {s}");
            }
        }
        match self.kind {
            Kind::VerifyIso | Kind::Connectivity => {
                self.need_sizes()?;
                self.need_u()?;
            }
            Kind::EstimateHstar => {
                if self.sizes.len() < 2 {
                    bail!("estimate-hstar needs at least two box sizes to intersect curves");
                }
                if self.h_grid.len() < 2 {
                    bail!("estimate-hstar needs an h grid with at least two levels");
                }
                if self.h_grid.windows(2).any(|w| w[1] <= w[0]) {
                    bail!("the h grid must be strictly increasing");
                }
            }
            Kind::CableContrast => {
                self.need_sizes()?;
                if self.h_grid.is_empty() {
                    bail!("cable-contrast needs at least one level in the h grid");
                }
            }
            Kind::Flip => {
                if self.h_grid.is_empty() {
                    bail!("flip needs the level h as the first h grid entry");
                }
            }
            Kind::RenormCert => {
                if self.d != 3 {
                    bail!("renorm-cert runs the pinned d = 3 surrogate ladder; got d = {}", self.d);
                }
            }
            Kind::Decouple => {
                // sizes optional: box side defaults to 4.
            }
            Kind::PsiGrowth => {
                self.need_sizes()?;
                self.need_u()?;
            }
            Kind::LaplaceCheck => {
                self.need_u()?;
            }
        }
        Ok(())
    }

    fn need_sizes(&self) -> Result<()> {
        if self.sizes.is_empty() {
            bail!("{} needs a non-empty sizes list", self.kind);
        }
        Ok(())
    }

    fn need_u(&self) -> Result<()> {
        if self.u_grid.is_empty() {
            bail!("{} needs a non-empty u grid", self.kind);
        }
        if self.u_grid.iter().any(|&u| !(u > 0.0)) {
            bail!("u levels must be positive");
        }
        Ok(())
    }

    /// Hash of everything that determines the numbers: kind, geometry,
    /// grids, replicas, seed, constants. Output directory and thread count
    /// are excluded so moving or parallelizing a run keeps its identity.
    pub fn sha256(&self) -> String {
        #[derive(Serialize)]
        struct HashView<'a> {
            kind: &'static str,
            d: usize,
            seed: u64,
            sizes: &'a [i64],
            h_grid: &'a [f64],
            u_grid: &'a [f64],
            replicas: usize,
            constants: &'a Constants,
        }
        let view = HashView {
            kind: self.kind.as_str(),
            d: self.d,
            seed: self.seed,
            sizes: &self.sizes,
            h_grid: &self.h_grid,
            u_grid: &self.u_grid,
            replicas: self.replicas,
            constants: &self.constants,
        };
        let bytes = serde_json::to_vec(&view).expect("config hash serialization");
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

// ---------------------------------------------------------------------------
// key = value parser

const SECTIONS: [(&str, &[&str]); 5] = [
    ("experiment", &["kind", "d", "seed"]),
    ("grid", &["sizes", "h", "u"]),
    ("sampling", &["replicas", "threads"]),
    ("constants", &["C0", "c0", "C1", "c1", "C1p", "c1p", "delta", "halo_factor", "buffer"]),
    ("output", &["dir"]),
];

fn parse_text(text: &str, path: &Path) -> Result<RawConfig> {
    let mut raw = RawConfig::default();
    let mut section: Option<&'static str> = None;
    let mut seen: Vec<(String, String)> = Vec::new();
    let here = |line: usize| format!("{}:{}", path.display(), line);

    for (idx, line_raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = line_raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            let name = name.trim();
            section = Some(
                SECTIONS
                    .iter()
                    .find(|(s, _)| *s == name)
                    .map(|(s, _)| *s)
                    .ok_or_else(|| anyhow!("{}: unknown section [{name}]", here(lineno)))?,
            );
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("{}: expected `key = value`, got `{line}`", here(lineno)))?;
        let key = key.trim();
        let value = value.trim();
        let sec = section
            .ok_or_else(|| anyhow!("{}: key `{key}` appears before any [section]", here(lineno)))?;
        let allowed = SECTIONS.iter().find(|(s, _)| *s == sec).map(|(_, ks)| *ks).unwrap();
        if !allowed.contains(&key) {
            bail!(
                "{}: unknown key `{key}` in [{sec}] (allowed: {})",
                here(lineno),
                allowed.join(", ")
            );
        }
        if seen.iter().any(|(s, k)| s == sec && k == key) {
            bail!("{}: duplicate key `{key}` in [{sec}]", here(lineno));
        }
        seen.push((sec.to_string(), key.to_string()));
        set_key(&mut raw, sec, key, value)
            .map_err(|e| anyhow!("{}: {e:#}", here(lineno)))?;
    }
    Ok(raw)
}

fn set_key(raw: &mut RawConfig, section: &str, key: &str, value: &str) -> Result<()> {
    match (section, key) {
        ("experiment", "kind") => raw.kind = Some(Kind::parse(value)?),
        ("experiment", "d") => raw.d = Some(parse_scalar(value, "d")?),
        ("experiment", "seed") => raw.seed = Some(parse_scalar(value, "seed")?),
        ("grid", "sizes") => raw.sizes = Some(parse_i64_list(value)?),
        ("grid", "h") => raw.h_grid = Some(parse_f64_list(value)?),
        ("grid", "u") => raw.u_grid = Some(parse_f64_list(value)?),
        ("sampling", "replicas") => raw.replicas = Some(parse_scalar(value, "replicas")?),
        ("sampling", "threads") => raw.threads = Some(parse_scalar(value, "threads")?),
        ("constants", name) => {
            let v: f64 = parse_scalar(value, name)?;
            let c = &mut raw.constants;
            match name {
                "C0" => c.big_c0 = v,
                "c0" => c.small_c0 = v,
                "C1" => c.big_c1 = v,
                "c1" => c.small_c1 = v,
                "C1p" => c.big_c1_prime = v,
                "c1p" => c.small_c1_prime = v,
                "delta" => c.delta = v,
                "halo_factor" => c.halo_factor = v,
                "buffer" => c.buffer = v,
                _ => unreachable!("key list checked by caller"),
            }
        }
        ("output", "dir") => raw.outdir = Some(PathBuf::from(value)),
        _ => unreachable!("key list checked by caller"),
    }
    Ok(())
}

fn parse_scalar<T: std::str::FromStr>(s: &str, name: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    s.parse::<T>().map_err(|e| anyhow!("bad value for {name}: {e}"))
}

fn parse_i64_list(s: &str) -> Result<Vec<i64>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|p| parse_scalar(p.trim(), "sizes entry"))
        .collect()
}

/// Either a comma list (`0.1, 0.2, 0.5`) or an inclusive range written
/// `start:step:end`.
fn parse_f64_list(s: &str) -> Result<Vec<f64>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    if s.contains(':') {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 3 {
            bail!("range must be `start:step:end`, got `{s}`");
        }
        let start: f64 = parse_scalar(parts[0].trim(), "range start")?;
        let step: f64 = parse_scalar(parts[1].trim(), "range step")?;
        let end: f64 = parse_scalar(parts[2].trim(), "range end")?;
        if !(step > 0.0) {
            bail!("range step must be positive");
        }
        if end < start {
            bail!("range end must not precede start");
        }
        let mut out = Vec::new();
        let mut k = 0u32;
        loop {
            let x = start + step * f64::from(k);
            if x > end + step * 1e-9 {
                break;
            }
            out.push(x);
            k += 1;
        }
        return Ok(out);
    }
    s.split(',')
        .map(|p| parse_scalar(p.trim(), "grid entry"))
        .collect()
}

// ---------------------------------------------------------------------------
// JSON input

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct JsonConfig {
    experiment: JsonExperiment,
    #[serde(default)]
    grid: JsonGrid,
    #[serde(default)]
    sampling: JsonSampling,
    #[serde(default)]
    constants: JsonConstants,
    #[serde(default)]
    output: JsonOutput,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct JsonExperiment {
    kind: Option<String>,
    d: Option<usize>,
    seed: Option<u64>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct JsonGrid {
    sizes: Option<Vec<i64>>,
    h: Option<Vec<f64>>,
    u: Option<Vec<f64>>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct JsonSampling {
    replicas: Option<usize>,
    threads: Option<usize>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
#[allow(non_snake_case)]
struct JsonConstants {
    C0: Option<f64>,
    c0: Option<f64>,
    C1: Option<f64>,
    c1: Option<f64>,
    C1p: Option<f64>,
    c1p: Option<f64>,
    delta: Option<f64>,
    halo_factor: Option<f64>,
    buffer: Option<f64>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct JsonOutput {
    dir: Option<String>,
}

fn parse_json(text: &str) -> Result<RawConfig> {
    let parsed: JsonConfig = serde_json::from_str(text)
        .map_err(|e| anyhow!("invalid JSON config at line {}, column {}: {e}", e.line(), e.column()))?;
    let mut raw = RawConfig {
        kind: parsed.experiment.kind.as_deref().map(Kind::parse).transpose()?,
        d: parsed.experiment.d,
        seed: parsed.experiment.seed,
        sizes: parsed.grid.sizes,
        h_grid: parsed.grid.h,
        u_grid: parsed.grid.u,
        replicas: parsed.sampling.replicas,
        threads: parsed.sampling.threads,
        constants: Constants::default(),
        outdir: parsed.output.dir.map(PathBuf::from),
    };
    let c = &mut raw.constants;
    let j = parsed.constants;
    if let Some(v) = j.C0 {
        c.big_c0 = v;
    }
    if let Some(v) = j.c0 {
        c.small_c0 = v;
    }
    if let Some(v) = j.C1 {
        c.big_c1 = v;
    }
    if let Some(v) = j.c1 {
        c.small_c1 = v;
    }
    if let Some(v) = j.C1p {
        c.big_c1_prime = v;
    }
    if let Some(v) = j.c1p {
        c.small_c1_prime = v;
    }
    if let Some(v) = j.delta {
        c.delta = v;
    }
    if let Some(v) = j.halo_factor {
        c.halo_factor = v;
    }
    if let Some(v) = j.buffer {
        c.buffer = v;
    }
    Ok(raw)
}
