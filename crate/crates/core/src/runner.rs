//! Configuration-driven experiments behind the `run` and `validate`
//! subcommands.
//!
//! A configuration is a TOML file with a `[run]` section naming the
//! experiment kind and master seed, a `[model]` section, optional `[gene]`,
//! `[start]`, `[start2]` and `[observable]` sections, and one section of
//! parameters for the experiment itself. See `configs/` for complete files
//! and the README for the schema. Unknown sections and keys are rejected;
//! all problems are reported together, with line numbers where possible.
//!
//! Every run writes CSV tables and a `manifest.toml` into the output
//! directory and returns a one-line summary. Tables depend only on the
//! configuration and seed, never on the worker count; the wall time and the
//! timestamp live in the manifest.

use crate::clt::{
    clt_test, donsker_test, long_run, mw_diagnostic, CltReport, MwReport, Observable, ReplicaPlan,
};
use crate::coupling::{
    check_b_conditions, decay_curve, finite_coupling, Coupling, DecayCurve, FiniteSubKernel,
};
use crate::ergodicity::{ergodicity_curve, stationary_sample, ErgodicityPlan};
use crate::error::{ConfigIssue, Error, Result};
use crate::gene::{
    check_a_conditions, GeneCoupling, GeneModel, GeneModelConfig, ModelConstants, ModelState,
};
use crate::kernel::{
    check_drift, simulate_chain, IdentityKernel, IidNormalKernel, Kernel, MatrixKernel, RealLine,
    Start,
};
use crate::measure::{EmpiricalMeasure, DEFAULT_SUPPORT_CAP};
use crate::rng::{derive_seed, stream_rng, SimRng};
use crate::stats::{default_batch_len, linear_fit, BatchAccumulator, BatchMeans, Estimate};
use rand::Rng;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Simulate,
    CoupleDecay,
    VerifyB,
    VerifyA,
    Ergodicity,
    Clt,
    Donsker,
    Mw,
}

impl Kind {
    pub const ALL: [Kind; 8] = [
        Kind::Simulate,
        Kind::CoupleDecay,
        Kind::VerifyB,
        Kind::VerifyA,
        Kind::Ergodicity,
        Kind::Clt,
        Kind::Donsker,
        Kind::Mw,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Kind::Simulate => "simulate",
            Kind::CoupleDecay => "couple-decay",
            Kind::VerifyB => "verify-B",
            Kind::VerifyA => "verify-A",
            Kind::Ergodicity => "ergodicity",
            Kind::Clt => "clt",
            Kind::Donsker => "donsker",
            Kind::Mw => "mw",
        }
    }

    /// Name of the parameter section and of the main result table.
    pub fn section(self) -> &'static str {
        match self {
            Kind::Simulate => "simulate",
            Kind::CoupleDecay => "couple_decay",
            Kind::VerifyB => "verify_b",
            Kind::VerifyA => "verify_a",
            Kind::Ergodicity => "ergodicity",
            Kind::Clt => "clt",
            Kind::Donsker => "donsker",
            Kind::Mw => "mw",
        }
    }

    fn parse(s: &str) -> Option<Kind> {
        Kind::ALL.into_iter().find(|k| k.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelSpec {
    TwoState { p01: f64, p10: f64 },
    Cycle { states: usize },
    Matrix { rows: Vec<Vec<f64>> },
    Identity,
    IidNormal { mean: f64, sd: f64 },
    Gene(GeneModelConfig),
}

impl ModelSpec {
    fn family(&self) -> Family {
        match self {
            ModelSpec::TwoState { .. } | ModelSpec::Cycle { .. } | ModelSpec::Matrix { .. } => {
                Family::Finite
            }
            ModelSpec::Identity | ModelSpec::IidNormal { .. } => Family::Real,
            ModelSpec::Gene(_) => Family::Gene,
        }
    }

    fn num_states(&self) -> Option<usize> {
        match self {
            ModelSpec::TwoState { .. } => Some(2),
            ModelSpec::Cycle { states } => Some(*states),
            ModelSpec::Matrix { rows } => Some(rows.len()),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Family {
    Finite,
    Real,
    Gene,
}

/// A state given in the configuration, already checked against the model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StateSpec {
    Index(usize),
    Real(f64),
    Gene(ModelState),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ObservableKind {
    /// Finite chains: the position of the state (its index by default).
    Position,
    /// Real-valued chains: `x` clamped to `[-limit, limit]`.
    Clamp { limit: f64 },
    /// Gene model: `atan(min(y, 10)) + shift·[i = 0]`.
    Squash { shift: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObservableSpec {
    pub kind: ObservableKind,
    pub scale: f64,
    pub offset: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MwCenter {
    LongRun,
    Grid,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Params {
    Simulate {
        n: usize,
    },
    CoupleDecay {
        n_max: usize,
        replicas: usize,
        overlap_scale: f64,
        min_r2: f64,
    },
    VerifyA {
        samples: usize,
    },
    VerifyB {
        pairs: usize,
        starts: usize,
        replicas: usize,
        horizon: usize,
        drift_replicas: usize,
        y_max: f64,
    },
    Ergodicity {
        n_max: usize,
        atoms: usize,
        burn_in: usize,
        bin_width: f64,
        min_r2: f64,
        rate_tolerance: f64,
    },
    Clt {
        plan: ReplicaPlan,
        aux_steps: usize,
        aux_burn_in: usize,
    },
    Donsker {
        plan: ReplicaPlan,
        aux_steps: usize,
        aux_burn_in: usize,
    },
    Mw {
        n_list: Vec<usize>,
        replicas: usize,
        aux_steps: usize,
        aux_burn_in: usize,
        center: MwCenter,
        grid_points: usize,
        grid_burn_in: usize,
        grid: Option<Vec<f64>>,
    },
}

/// A fully validated experiment.
#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub kind: Kind,
    pub seed: u64,
    pub workers: Option<usize>,
    pub out: Option<PathBuf>,
    pub model: ModelSpec,
    pub start: StateSpec,
    pub start2: StateSpec,
    pub observable: ObservableSpec,
    pub params: Params,
    /// The parsed configuration, echoed into the manifest.
    pub source: toml::Table,
}

/// Command-line overrides.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub out: Option<PathBuf>,
}

const SECTIONS: [&str; 14] = [
    "run",
    "model",
    "gene",
    "start",
    "start2",
    "observable",
    "simulate",
    "couple_decay",
    "verify_a",
    "verify_b",
    "ergodicity",
    "clt",
    "donsker",
    "mw",
];

struct Reader<'a> {
    text: &'a str,
    root: toml::Table,
    issues: Vec<ConfigIssue>,
}

impl Reader<'_> {
    fn line_of(&self, section: &str, key: Option<&str>) -> Option<usize> {
        let mut current = "";
        for (idx, raw) in self.text.lines().enumerate() {
            let line = raw.trim();
            if line.starts_with('[') {
                current = line.trim_start_matches('[').trim_end_matches(']').trim();
                if key.is_none() && current == section {
                    return Some(idx + 1);
                }
                continue;
            }
            if let (Some(k), true) = (key, current == section) {
                if let Some(rest) = line.strip_prefix(k) {
                    if rest.trim_start().starts_with('=') {
                        return Some(idx + 1);
                    }
                }
            }
        }
        None
    }

    fn issue(&mut self, section: &str, key: Option<&str>, message: impl Into<String>) {
        let line = self
            .line_of(section, key)
            .or_else(|| key.and(self.line_of(section, None)));
        let field = match key {
            Some(k) => format!("{section}.{k}"),
            None => section.to_string(),
        };
        self.issues.push(ConfigIssue {
            field,
            line,
            message: message.into(),
        });
    }

    fn has_section(&self, section: &str) -> bool {
        self.root.get(section).is_some()
    }

    fn get(&self, section: &str, key: &str) -> Option<toml::Value> {
        self.root.get(section)?.as_table()?.get(key).cloned()
    }

    fn unknown_keys(&mut self, section: &str, allowed: &[&str]) {
        let keys: Vec<String> = match self.root.get(section).and_then(|v| v.as_table()) {
            Some(t) => t.keys().cloned().collect(),
            None => return,
        };
        for k in keys {
            if !allowed.contains(&k.as_str()) {
                let msg = format!("unknown key (allowed: {})", allowed.join(", "));
                self.issue(section, Some(&k), msg);
            }
        }
    }

    fn f64_opt(&mut self, section: &str, key: &str) -> Option<f64> {
        match self.get(section, key)? {
            toml::Value::Float(f) => Some(f),
            toml::Value::Integer(i) => Some(i as f64),
            _ => {
                self.issue(section, Some(key), "expected a number");
                None
            }
        }
    }

    fn f64_req(&mut self, section: &str, key: &str) -> Option<f64> {
        if self.get(section, key).is_none() {
            self.issue(section, Some(key), "missing required field");
            return None;
        }
        self.f64_opt(section, key)
    }

    fn f64_or(&mut self, section: &str, key: &str, default: f64) -> f64 {
        self.f64_opt(section, key).unwrap_or(default)
    }

    fn int_opt(&mut self, section: &str, key: &str) -> Option<u64> {
        match self.get(section, key)? {
            toml::Value::Integer(i) if i >= 0 => Some(i as u64),
            _ => {
                self.issue(section, Some(key), "expected a nonnegative integer");
                None
            }
        }
    }

    fn usize_or(&mut self, section: &str, key: &str, default: usize) -> usize {
        self.int_opt(section, key).map_or(default, |v| v as usize)
    }

    fn str_opt(&mut self, section: &str, key: &str) -> Option<String> {
        match self.get(section, key)? {
            toml::Value::String(s) => Some(s),
            _ => {
                self.issue(section, Some(key), "expected a string");
                None
            }
        }
    }

    fn f64_list(&mut self, section: &str, key: &str) -> Option<Vec<f64>> {
        let v = self.get(section, key)?;
        let out: Option<Vec<f64>> = v.as_array().and_then(|a| {
            a.iter()
                .map(|x| x.as_float().or_else(|| x.as_integer().map(|i| i as f64)))
                .collect()
        });
        if out.is_none() {
            self.issue(section, Some(key), "expected an array of numbers");
        }
        out
    }

    fn usize_list(&mut self, section: &str, key: &str) -> Option<Vec<usize>> {
        let v = self.get(section, key)?;
        let out: Option<Vec<usize>> = v.as_array().and_then(|a| {
            a.iter()
                .map(|x| x.as_integer().filter(|i| *i >= 0).map(|i| i as usize))
                .collect()
        });
        if out.is_none() {
            self.issue(
                section,
                Some(key),
                "expected an array of nonnegative integers",
            );
        }
        out
    }

    fn matrix(&mut self, section: &str, key: &str) -> Option<Vec<Vec<f64>>> {
        let v = self.get(section, key)?;
        let out: Option<Vec<Vec<f64>>> = v.as_array().and_then(|rows| {
            rows.iter()
                .map(|r| {
                    r.as_array().and_then(|a| {
                        a.iter()
                            .map(|x| x.as_float().or_else(|| x.as_integer().map(|i| i as f64)))
                            .collect()
                    })
                })
                .collect()
        });
        if out.is_none() {
            self.issue(section, Some(key), "expected an array of arrays of numbers");
        }
        out
    }

    fn positive(&mut self, section: &str, key: &str, value: usize) -> usize {
        if value == 0 {
            self.issue(section, Some(key), "must be positive");
        }
        value
    }
}

fn parse_error(text: &str, err: &toml::de::Error) -> Error {
    let line = err
        .span()
        .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1);
    Error::Config(vec![ConfigIssue {
        field: "syntax".into(),
        line,
        message: err.message().trim().to_string(),
    }])
}

/// Parse and validate a configuration, collecting every problem found.
pub fn parse_spec(text: &str, overrides: &Overrides) -> Result<ExperimentSpec> {
    let root: toml::Table = text.parse().map_err(|e| parse_error(text, &e))?;
    let mut r = Reader {
        text,
        root,
        issues: Vec::new(),
    };
    let sections: Vec<String> = r.root.keys().cloned().collect();
    for s in sections {
        if !SECTIONS.contains(&s.as_str()) {
            r.issue(
                &s,
                None,
                format!("unknown section (allowed: {})", SECTIONS.join(", ")),
            );
        } else if !r.root[&s].is_table() {
            r.issue(&s, None, "expected a section");
        }
    }

    // [run]
    r.unknown_keys("run", &["kind", "seed", "workers", "out"]);
    let kind = match r.str_opt("run", "kind") {
        Some(k) => match Kind::parse(&k) {
            Some(kind) => Some(kind),
            None => {
                let names: Vec<&str> = Kind::ALL.iter().map(|k| k.name()).collect();
                r.issue(
                    "run",
                    Some("kind"),
                    format!(
                        "unknown experiment kind {k:?} (expected one of {})",
                        names.join(", ")
                    ),
                );
                None
            }
        },
        None => {
            if r.get("run", "kind").is_none() {
                r.issue("run", Some("kind"), "missing required field");
            }
            None
        }
    };
    let seed = overrides.seed.or_else(|| r.int_opt("run", "seed"));
    if seed.is_none() && r.get("run", "seed").is_none() {
        r.issue(
            "run",
            Some("seed"),
            "a master seed is required (set run.seed or pass --seed)",
        );
    }
    let workers = overrides
        .workers
        .or_else(|| r.int_opt("run", "workers").map(|w| w as usize));
    if workers == Some(0) {
        r.issue("run", Some("workers"), "worker count must be positive");
    }
    let out = overrides
        .out
        .clone()
        .or_else(|| r.str_opt("run", "out").map(PathBuf::from));

    let model = parse_model(&mut r);
    let family = model.as_ref().map(|m| m.family());

    let start = model
        .as_ref()
        .map(|m| parse_state(&mut r, "start", m, false));
    let start2 = model
        .as_ref()
        .map(|m| parse_state(&mut r, "start2", m, true));
    let observable = family.map(|f| parse_observable(&mut r, f));
    let params = kind.map(|k| parse_params(&mut r, k, model.as_ref()));

    if let (Some(k), Some(m)) = (kind, model.as_ref()) {
        check_compatibility(&mut r, k, m);
    }

    if !r.issues.is_empty() {
        return Err(Error::Config(r.issues));
    }
    Ok(ExperimentSpec {
        kind: kind.expect("checked"),
        seed: seed.expect("checked"),
        workers,
        out,
        model: model.expect("checked"),
        start: start.flatten().expect("checked"),
        start2: start2.flatten().expect("checked"),
        observable: observable.expect("checked"),
        params: params.flatten().expect("checked"),
        source: r.root,
    })
}

fn parse_model(r: &mut Reader<'_>) -> Option<ModelSpec> {
    if !r.has_section("model") {
        r.issue("model", None, "missing required section");
        return None;
    }
    let kind = r.str_opt("model", "kind");
    if kind.is_none() && r.get("model", "kind").is_none() {
        r.issue("model", Some("kind"), "missing required field");
    }
    let kind = kind?;
    let allowed: &[&str] = match kind.as_str() {
        "two-state" => &["kind", "p01", "p10"],
        "cycle" => &["kind", "states"],
        "matrix" => &["kind", "rows"],
        "identity" => &["kind"],
        "iid-normal" => &["kind", "mean", "sd"],
        "gene" => &["kind"],
        other => {
            r.issue(
                "model",
                Some("kind"),
                format!("unknown model {other:?} (expected two-state, cycle, matrix, identity, iid-normal or gene)"),
            );
            return None;
        }
    };
    r.unknown_keys("model", allowed);
    if kind != "gene" && r.has_section("gene") {
        r.issue(
            "gene",
            None,
            "the [gene] section only applies to model.kind = \"gene\"",
        );
    }
    match kind.as_str() {
        "two-state" => {
            let p01 = r.f64_req("model", "p01");
            let p10 = r.f64_req("model", "p10");
            let (p01, p10) = (p01?, p10?);
            if MatrixKernel::two_state(p01, p10).is_err() {
                r.issue(
                    "model",
                    Some("p01"),
                    "switching probabilities must lie in [0, 1]",
                );
                return None;
            }
            Some(ModelSpec::TwoState { p01, p10 })
        }
        "cycle" => {
            let states = r.usize_or("model", "states", 3);
            if states == 0 {
                r.issue("model", Some("states"), "must be positive");
                return None;
            }
            Some(ModelSpec::Cycle { states })
        }
        "matrix" => {
            if r.get("model", "rows").is_none() {
                r.issue("model", Some("rows"), "missing required field");
                return None;
            }
            let rows = r.matrix("model", "rows")?;
            if let Err(e) = MatrixKernel::from_rows(rows.clone()) {
                r.issue("model", Some("rows"), e.to_string());
                return None;
            }
            Some(ModelSpec::Matrix { rows })
        }
        "identity" => Some(ModelSpec::Identity),
        "iid-normal" => {
            let mean = r.f64_or("model", "mean", 0.0);
            let sd = r.f64_or("model", "sd", 1.0);
            if !(sd > 0.0) {
                r.issue("model", Some("sd"), "standard deviation must be positive");
                return None;
            }
            Some(ModelSpec::IidNormal { mean, sd })
        }
        _ => parse_gene(r).map(ModelSpec::Gene),
    }
}

fn parse_gene(r: &mut Reader<'_>) -> Option<GeneModelConfig> {
    const KEYS: [&str; 10] = [
        "lambda",
        "decay_rates",
        "beta0",
        "beta1",
        "switch_low",
        "switch_high",
        "epsilon",
        "epsilon_max",
        "c_tilde",
        "y_ref",
    ];
    if !r.has_section("gene") {
        r.issue(
            "gene",
            None,
            "missing required section for model.kind = \"gene\"",
        );
        return None;
    }
    r.unknown_keys("gene", &KEYS);
    let before = r.issues.len();
    let lambda = r.f64_req("gene", "lambda");
    let decay_rates = if r.get("gene", "decay_rates").is_none() {
        r.issue("gene", Some("decay_rates"), "missing required field");
        None
    } else {
        r.f64_list("gene", "decay_rates")
    };
    let beta0 = r.f64_req("gene", "beta0");
    let beta1 = r.f64_req("gene", "beta1");
    let matrix = |r: &mut Reader<'_>, key: &str| {
        if r.get("gene", key).is_none() {
            r.issue("gene", Some(key), "missing required field");
            None
        } else {
            r.matrix("gene", key)
        }
    };
    let switch_low = matrix(r, "switch_low");
    let switch_high = matrix(r, "switch_high");
    let epsilon = r.f64_req("gene", "epsilon");
    let epsilon_max = r.f64_req("gene", "epsilon_max");
    let c_tilde = r.f64_or("gene", "c_tilde", 1.0);
    let y_ref = r.f64_or("gene", "y_ref", 0.0);
    if r.issues.len() > before {
        return None;
    }
    let cfg = GeneModelConfig {
        lambda: lambda?,
        decay_rates: decay_rates?,
        beta0: beta0?,
        beta1: beta1?,
        switch_low: switch_low?,
        switch_high: switch_high?,
        epsilon: epsilon?,
        epsilon_max: epsilon_max?,
        c_tilde,
        y_ref,
    };
    let problems = cfg.problems();
    for (field, msg) in &problems {
        r.issue("gene", Some(field), msg.clone());
    }
    problems.is_empty().then_some(cfg)
}

fn parse_state(
    r: &mut Reader<'_>,
    section: &str,
    model: &ModelSpec,
    second: bool,
) -> Option<StateSpec> {
    match model.family() {
        Family::Finite => {
            r.unknown_keys(section, &["state"]);
            let n = model.num_states().unwrap_or(1);
            let default = if second { n - 1 } else { 0 };
            let s = r.usize_or(section, "state", default);
            if s >= n {
                r.issue(
                    section,
                    Some("state"),
                    format!("state index must be below {n}"),
                );
                return None;
            }
            Some(StateSpec::Index(s))
        }
        Family::Real => {
            r.unknown_keys(section, &["x"]);
            let x = r.f64_or(section, "x", if second { 1.0 } else { 0.0 });
            if !x.is_finite() {
                r.issue(section, Some("x"), "must be finite");
                return None;
            }
            Some(StateSpec::Real(x))
        }
        Family::Gene => {
            r.unknown_keys(section, &["y", "i"]);
            let (dy, di) = if second { (8.0, 1) } else { (1.5, 0) };
            let y = r.f64_or(section, "y", dy);
            let flows = match model {
                ModelSpec::Gene(c) => c.decay_rates.len().max(1),
                _ => 1,
            };
            let i = r.usize_or(section, "i", di.min(flows - 1));
            if !(y >= 0.0 && y.is_finite()) {
                r.issue(section, Some("y"), "must be a nonnegative number");
                return None;
            }
            if i >= flows {
                r.issue(
                    section,
                    Some("i"),
                    format!("semiflow index must be below {flows}"),
                );
                return None;
            }
            Some(StateSpec::Gene(ModelState::new(y, i)))
        }
    }
}

fn parse_observable(r: &mut Reader<'_>, family: Family) -> ObservableSpec {
    r.unknown_keys("observable", &["kind", "limit", "shift", "scale", "offset"]);
    let default = match family {
        Family::Finite => "position",
        Family::Real => "clamp",
        Family::Gene => "squash",
    };
    let name = r
        .str_opt("observable", "kind")
        .unwrap_or_else(|| default.to_string());
    let kind = match (name.as_str(), family) {
        ("position", Family::Finite) => ObservableKind::Position,
        ("clamp", Family::Real) => {
            let limit = r.f64_or("observable", "limit", 10.0);
            if !(limit > 0.0) {
                r.issue("observable", Some("limit"), "must be positive");
            }
            ObservableKind::Clamp { limit }
        }
        ("squash", Family::Gene) => ObservableKind::Squash {
            shift: r.f64_or("observable", "shift", 0.0),
        },
        _ => {
            r.issue(
                "observable",
                Some("kind"),
                format!("observable {name:?} does not apply to this model (use {default:?})"),
            );
            ObservableKind::Position
        }
    };
    let scale = r.f64_or("observable", "scale", 1.0);
    if scale == 0.0 || !scale.is_finite() {
        r.issue("observable", Some("scale"), "must be a nonzero number");
    }
    ObservableSpec {
        kind,
        scale,
        offset: r.f64_or("observable", "offset", 0.0),
    }
}

fn parse_params(r: &mut Reader<'_>, kind: Kind, model: Option<&ModelSpec>) -> Option<Params> {
    let s = kind.section();
    let keys: &[&str] = match kind {
        Kind::Simulate => &["n"],
        Kind::CoupleDecay => &["n_max", "replicas", "overlap_scale", "min_r2"],
        Kind::VerifyA => &["samples"],
        Kind::VerifyB => &[
            "pairs",
            "starts",
            "replicas",
            "horizon",
            "drift_replicas",
            "y_max",
        ],
        Kind::Ergodicity => &[
            "n_max",
            "atoms",
            "burn_in",
            "bin_width",
            "min_r2",
            "rate_tolerance",
        ],
        Kind::Clt | Kind::Donsker => &["n", "replicas", "burn_in", "aux_steps", "aux_burn_in"],
        Kind::Mw => &[
            "n_list",
            "replicas",
            "aux_steps",
            "aux_burn_in",
            "center",
            "grid_points",
            "grid_burn_in",
            "grid",
        ],
    };
    r.unknown_keys(s, keys);
    let before = r.issues.len();
    let params = match kind {
        Kind::Simulate => {
            let n = r.usize_or(s, "n", 100);
            Params::Simulate { n }
        }
        Kind::CoupleDecay => {
            let n_max = r.usize_or(s, "n_max", 30);
            let replicas = r.usize_or(s, "replicas", 4000);
            if replicas < 100 {
                r.issue(s, Some("replicas"), "at least 100 replicas are required");
            }
            let overlap_scale = r.f64_or(s, "overlap_scale", 1.0);
            if !(0.0..=1.0).contains(&overlap_scale) {
                r.issue(s, Some("overlap_scale"), "must lie in [0, 1]");
            }
            Params::CoupleDecay {
                n_max: r.positive(s, "n_max", n_max),
                replicas,
                overlap_scale,
                min_r2: r.f64_or(s, "min_r2", 0.95),
            }
        }
        Kind::VerifyA => {
            let samples = r.usize_or(s, "samples", 2000);
            Params::VerifyA {
                samples: r.positive(s, "samples", samples),
            }
        }
        Kind::VerifyB => {
            let pairs = r.usize_or(s, "pairs", 50);
            let starts = r.usize_or(s, "starts", 20);
            let replicas = r.usize_or(s, "replicas", 2000);
            let horizon = r.usize_or(s, "horizon", 200);
            let drift_replicas = r.usize_or(s, "drift_replicas", 20_000);
            let y_max = r.f64_or(s, "y_max", 5.0);
            if !(y_max > 0.0) {
                r.issue(s, Some("y_max"), "must be positive");
            }
            if replicas < 2 {
                r.issue(s, Some("replicas"), "at least 2 replicas are required");
            }
            if drift_replicas < 2 {
                r.issue(
                    s,
                    Some("drift_replicas"),
                    "at least 2 replicas are required",
                );
            }
            Params::VerifyB {
                pairs: r.positive(s, "pairs", pairs),
                starts: r.positive(s, "starts", starts),
                replicas,
                horizon: r.positive(s, "horizon", horizon),
                drift_replicas,
                y_max,
            }
        }
        Kind::Ergodicity => {
            let n_max = r.usize_or(s, "n_max", 12);
            let atoms = r.usize_or(s, "atoms", 200_000);
            let burn_in = r.usize_or(s, "burn_in", 60);
            let bin_width = r.f64_or(s, "bin_width", 0.05);
            if !(bin_width > 0.0) {
                r.issue(s, Some("bin_width"), "must be positive");
            }
            Params::Ergodicity {
                n_max: r.positive(s, "n_max", n_max),
                atoms: r.positive(s, "atoms", atoms),
                burn_in,
                bin_width,
                min_r2: r.f64_or(s, "min_r2", 0.95),
                rate_tolerance: r.f64_or(s, "rate_tolerance", 0.05),
            }
        }
        Kind::Clt | Kind::Donsker => {
            let n = r.usize_or(s, "n", 2000);
            let replicas = r.usize_or(s, "replicas", 4000);
            if replicas < 1000 {
                r.issue(
                    s,
                    Some("replicas"),
                    "the KS thresholds need at least 1000 replicas",
                );
            }
            let plan = ReplicaPlan {
                n: r.positive(s, "n", n),
                replicas,
                burn_in: r.usize_or(s, "burn_in", 200),
            };
            let aux_steps = r.usize_or(s, "aux_steps", 20_000_000);
            let aux_burn_in = r.usize_or(s, "aux_burn_in", 200);
            if aux_steps < 10 * default_batch_len(aux_steps.max(1)) {
                r.issue(s, Some("aux_steps"), "too short for batch means");
            }
            if kind == Kind::Clt {
                Params::Clt {
                    plan,
                    aux_steps,
                    aux_burn_in,
                }
            } else {
                Params::Donsker {
                    plan,
                    aux_steps,
                    aux_burn_in,
                }
            }
        }
        Kind::Mw => {
            let n_list = r
                .usize_list(s, "n_list")
                .unwrap_or_else(|| vec![50, 100, 200]);
            if n_list.is_empty() || n_list[0] == 0 || n_list.windows(2).any(|w| w[0] >= w[1]) {
                r.issue(
                    s,
                    Some("n_list"),
                    "must be a strictly increasing list of positive integers",
                );
            }
            let replicas = r.usize_or(s, "replicas", 100_000);
            if replicas < 2 {
                r.issue(s, Some("replicas"), "at least 2 replicas are required");
            }
            let center = match r.str_opt(s, "center").as_deref() {
                None | Some("long-run") => MwCenter::LongRun,
                Some("grid") => MwCenter::Grid,
                Some(other) => {
                    r.issue(
                        s,
                        Some("center"),
                        format!("unknown centering {other:?} (long-run or grid)"),
                    );
                    MwCenter::LongRun
                }
            };
            let grid = r.f64_list(s, "grid");
            let grid_points = r.usize_or(s, "grid_points", 50);
            let needs_grid = matches!(model, Some(ModelSpec::Identity));
            if needs_grid && grid.as_ref().is_none_or(|g| g.is_empty()) {
                r.issue(
                    s,
                    Some("grid"),
                    "the identity model has no invariant law to sample; list grid points",
                );
            }
            if needs_grid && center == MwCenter::LongRun {
                r.issue(
                    s,
                    Some("center"),
                    "the identity model needs center = \"grid\"",
                );
            }
            let aux_steps = r.usize_or(s, "aux_steps", 20_000_000);
            if center == MwCenter::LongRun && aux_steps < 10 * default_batch_len(aux_steps.max(1)) {
                r.issue(s, Some("aux_steps"), "too short for batch means");
            }
            Params::Mw {
                n_list,
                replicas,
                aux_steps,
                aux_burn_in: r.usize_or(s, "aux_burn_in", 200),
                center,
                grid_points: r.positive(s, "grid_points", grid_points),
                grid_burn_in: r.usize_or(s, "grid_burn_in", 200),
                grid,
            }
        }
    };
    (r.issues.len() == before).then_some(params)
}

fn check_compatibility(r: &mut Reader<'_>, kind: Kind, model: &ModelSpec) {
    let family = model.family();
    match kind {
        Kind::CoupleDecay if family == Family::Real => {
            r.issue(
                "model",
                Some("kind"),
                "couple-decay needs a finite-state or gene model",
            );
        }
        Kind::VerifyA | Kind::VerifyB if family != Family::Gene => {
            r.issue(
                "model",
                Some("kind"),
                format!("{} applies to the gene model only", kind.name()),
            );
        }
        _ => {}
    }
    if let ModelSpec::Gene(cfg) = model {
        let needs_clt = matches!(kind, Kind::Clt | Kind::Donsker | Kind::Mw | Kind::VerifyB);
        if needs_clt {
            let k = GeneModel::new(cfg.clone()).map(|m| m.constants());
            if let Ok(k) = k {
                if !k.clt_pass() {
                    r.issue(
                        "gene",
                        Some("decay_rates"),
                        format!(
                            "precondition L^2*L_w' + 2*alpha/lambda < 1 fails ({:.6}); {} needs it",
                            k.clt,
                            kind.name()
                        ),
                    );
                } else if kind == Kind::VerifyB && !(k.delta < 1.0) {
                    r.issue(
                        "gene",
                        Some("decay_rates"),
                        format!("contraction factor delta = {} is not below 1", k.delta),
                    );
                }
            }
        }
    }
}

/// Result of `validate`.
#[derive(Debug, Clone)]
pub struct Validation {
    pub spec: ExperimentSpec,
    pub constants: Option<ModelConstants>,
}

impl Validation {
    /// Human-readable summary: the resolved settings and model constants.
    pub fn render(&self) -> String {
        let s = &self.spec;
        let mut out = format!(
            "valid: kind={} seed={} model={}\n",
            s.kind.name(),
            s.seed,
            model_label(&s.model)
        );
        out.push_str(&format!("start={:?} start2={:?}\n", s.start, s.start2));
        out.push_str(&format!("observable={:?}\n", s.observable));
        out.push_str(&format!("params={:?}\n", s.params));
        if let Some(k) = &self.constants {
            out.push_str(&format!(
                "constants: L={} alpha={} L_w'={} a={} b={} delta={}\n",
                k.l, k.alpha, k.lw_prime, k.a, k.b, k.delta
            ));
            out.push_str(&format!(
                "           L_pi={} L_p={} d_pi={} d_p={} c_beta={}\n",
                k.l_pi, k.l_p, k.d_pi, k.d_p, k.c_beta
            ));
            out.push_str(&format!(
                "balance L*L_w + alpha/lambda = {} ({})\n",
                k.balance,
                if k.balance_pass() { "ok" } else { "FAILS" }
            ));
            out.push_str(&format!(
                "clt     L^2*L_w' + 2*alpha/lambda = {} ({})\n",
                k.clt,
                if k.clt_pass() { "ok" } else { "FAILS" }
            ));
        }
        out
    }
}

fn model_label(m: &ModelSpec) -> String {
    match m {
        ModelSpec::TwoState { p01, p10 } => format!("two-state(p01={p01}, p10={p10})"),
        ModelSpec::Cycle { states } => format!("cycle({states})"),
        ModelSpec::Matrix { rows } => format!("matrix({}x{})", rows.len(), rows.len()),
        ModelSpec::Identity => "identity".into(),
        ModelSpec::IidNormal { mean, sd } => format!("iid-normal(mean={mean}, sd={sd})"),
        ModelSpec::Gene(c) => format!(
            "gene({} semiflows, lambda={})",
            c.decay_rates.len(),
            c.lambda
        ),
    }
}

pub fn validate_text(text: &str, overrides: &Overrides) -> Result<Validation> {
    let spec = parse_spec(text, overrides)?;
    let constants = match &spec.model {
        ModelSpec::Gene(cfg) => Some(GeneModel::new(cfg.clone())?.constants()),
        _ => None,
    };
    Ok(Validation { spec, constants })
}

pub fn validate(path: &Path, overrides: &Overrides) -> Result<Validation> {
    validate_text(&std::fs::read_to_string(path)?, overrides)
}

/// A CSV table with a fixed header.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(name: &str, header: &[&str]) -> Self {
        Table {
            name: name.to_string(),
            header: header.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn file_name(&self) -> String {
        format!("{}.csv", self.name)
    }

    fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(self.file_name());
        let mut w = csv::Writer::from_path(&path).map_err(csv_error)?;
        w.write_record(&self.header).map_err(csv_error)?;
        for row in &self.rows {
            w.write_record(row).map_err(csv_error)?;
        }
        w.flush()?;
        Ok(path)
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

/// What an experiment produced before anything is written.
#[derive(Debug, Clone)]
pub struct Results {
    pub tables: Vec<Table>,
    /// Declared checks and whether each passed.
    pub checks: Vec<(String, bool)>,
    /// Key figures for the summary line, in order.
    pub figures: Vec<(String, String)>,
}

impl Results {
    pub fn pass(&self) -> bool {
        self.checks.iter().all(|c| c.1)
    }

    pub fn summary(&self) -> String {
        let mut line = String::from(if self.pass() { "PASS" } else { "FAIL" });
        for (k, v) in &self.figures {
            line.push_str(&format!(" {k}={v}"));
        }
        let failed: Vec<&str> = self
            .checks
            .iter()
            .filter(|c| !c.1)
            .map(|c| c.0.as_str())
            .collect();
        if !failed.is_empty() {
            line.push_str(&format!(" failed=[{}]", failed.join(",")));
        }
        line
    }
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub results: Results,
    pub out_dir: PathBuf,
    pub files: Vec<PathBuf>,
}

impl Outcome {
    pub fn pass(&self) -> bool {
        self.results.pass()
    }
}

type Projection<P> = Box<dyn Fn(&P) -> P + Sync + Send>;

/// Model-specific glue used by the generic experiment drivers.
trait Model: Kernel {
    fn columns(&self) -> &'static [&'static str];
    fn cells(&self, p: &Self::Point) -> Vec<String>;
    fn point(&self, s: &StateSpec) -> Self::Point;
    fn observable(&self, spec: &ObservableSpec) -> Observable<Self::Point>;
    /// Map onto a grid of width `bin` (identity on finite spaces).
    fn project(&self, bin: f64) -> Projection<Self::Point>;
}

fn fmt(x: f64) -> String {
    format!("{x}")
}

impl Model for MatrixKernel {
    fn columns(&self) -> &'static [&'static str] {
        &["state"]
    }
    fn cells(&self, p: &usize) -> Vec<String> {
        vec![p.to_string()]
    }
    fn point(&self, s: &StateSpec) -> usize {
        match s {
            StateSpec::Index(i) => *i,
            _ => 0,
        }
    }
    fn observable(&self, spec: &ObservableSpec) -> Observable<usize> {
        let pos = self.positions().to_vec();
        let sup = pos.iter().fold(0.0f64, |m, p| m.max(p.abs()));
        Observable::new(move |s: &usize| pos[*s], 1.0, sup).affine(spec.scale, spec.offset)
    }
    fn project(&self, _: f64) -> Projection<usize> {
        Box::new(|s| *s)
    }
}

fn real_observable(spec: &ObservableSpec) -> Observable<f64> {
    let limit = match spec.kind {
        ObservableKind::Clamp { limit } => limit,
        _ => 10.0,
    };
    Observable::new(move |x: &f64| x.clamp(-limit, limit), 1.0, limit)
        .affine(spec.scale, spec.offset)
}

fn real_project(bin: f64) -> Projection<f64> {
    Box::new(move |x| ((x / bin).floor() + 0.5) * bin)
}

impl Model for IdentityKernel<RealLine> {
    fn columns(&self) -> &'static [&'static str] {
        &["x"]
    }
    fn cells(&self, p: &f64) -> Vec<String> {
        vec![fmt(*p)]
    }
    fn point(&self, s: &StateSpec) -> f64 {
        match s {
            StateSpec::Real(x) => *x,
            _ => 0.0,
        }
    }
    fn observable(&self, spec: &ObservableSpec) -> Observable<f64> {
        real_observable(spec)
    }
    fn project(&self, bin: f64) -> Projection<f64> {
        real_project(bin)
    }
}

impl Model for IidNormalKernel {
    fn columns(&self) -> &'static [&'static str] {
        &["x"]
    }
    fn cells(&self, p: &f64) -> Vec<String> {
        vec![fmt(*p)]
    }
    fn point(&self, s: &StateSpec) -> f64 {
        match s {
            StateSpec::Real(x) => *x,
            _ => 0.0,
        }
    }
    fn observable(&self, spec: &ObservableSpec) -> Observable<f64> {
        real_observable(spec)
    }
    fn project(&self, bin: f64) -> Projection<f64> {
        real_project(bin)
    }
}

impl Model for GeneModel {
    fn columns(&self) -> &'static [&'static str] {
        &["y", "i"]
    }
    fn cells(&self, p: &ModelState) -> Vec<String> {
        vec![fmt(p.y), p.i.to_string()]
    }
    fn point(&self, s: &StateSpec) -> ModelState {
        match s {
            StateSpec::Gene(m) => *m,
            _ => ModelState::new(0.0, 0),
        }
    }
    fn observable(&self, spec: &ObservableSpec) -> Observable<ModelState> {
        let shift = match spec.kind {
            ObservableKind::Squash { shift } => shift,
            _ => 0.0,
        };
        let g = self.squashed_observable(shift);
        let lip = 1.0f64.max(shift.abs() / self.config().c_tilde);
        Observable::new(g, lip, 10f64.atan() + shift.abs()).affine(spec.scale, spec.offset)
    }
    fn project(&self, bin: f64) -> Projection<ModelState> {
        Box::new(move |s| ModelState::new(((s.y / bin).floor() + 0.5) * bin, s.i))
    }
}

fn state_label<M: Model>(m: &M, p: &M::Point) -> String {
    m.cells(p).join(":")
}

/// Seed labels for the independent parts of one experiment.
mod label {
    pub const MAIN: u64 = 1;
    pub const AUX: u64 = 2;
    pub const FIXED: u64 = 3;
    pub const STATIONARY: u64 = 4;
    pub const GRID: u64 = 5;
    pub const SAMPLE: u64 = 6;
}

fn run_simulate<M: Model>(m: &M, spec: &ExperimentSpec, n: usize) -> Results {
    let traj = simulate_chain(
        m,
        &Start::At(m.point(&spec.start)),
        n,
        derive_seed(spec.seed, label::MAIN),
    );
    let mut header = vec!["step"];
    header.extend_from_slice(m.columns());
    let mut t = Table::new("simulate", &header);
    for (k, s) in traj.states.iter().enumerate() {
        let mut row = vec![k.to_string()];
        row.extend(m.cells(s));
        t.push(row);
    }
    Results {
        tables: vec![t],
        checks: vec![],
        figures: vec![("steps".into(), n.to_string())],
    }
}

fn decay_results(curve: &DecayCurve, min_r2: f64) -> Results {
    let mut t = Table::new("couple_decay", &["step", "mean", "stderr"]);
    for (k, e) in curve.means.iter().enumerate() {
        t.push(vec![k.to_string(), fmt(e.mean), fmt(e.stderr)]);
    }
    let (rate, r2) = curve
        .fit
        .as_ref()
        .map_or((f64::NAN, f64::NAN), |f| (f.rate, f.r_squared));
    Results {
        tables: vec![t],
        checks: vec![
            ("rate_in_unit_interval".into(), rate > 0.0 && rate < 1.0),
            ("fit_r2".into(), r2 >= min_r2),
        ],
        figures: vec![("q_hat".into(), fmt(rate)), ("r2".into(), fmt(r2))],
    }
}

#[allow(clippy::too_many_arguments)]
fn run_decay<C: Coupling>(
    c: &C,
    g: &Observable<crate::coupling::PointOf<C>>,
    x: &crate::coupling::PointOf<C>,
    y: &crate::coupling::PointOf<C>,
    spec: &ExperimentSpec,
    n_max: usize,
    replicas: usize,
    min_r2: f64,
) -> Result<Results> {
    let f = |p: &crate::coupling::PointOf<C>| g.eval(p);
    let curve = decay_curve(
        c,
        &f,
        x,
        y,
        n_max,
        replicas,
        derive_seed(spec.seed, label::MAIN),
    )?;
    Ok(decay_results(&curve, min_r2))
}

fn run_verify_a(m: &GeneModel, spec: &ExperimentSpec, samples: usize) -> Results {
    let report = check_a_conditions(m, samples, derive_seed(spec.seed, label::MAIN));
    let mut t = Table::new(
        "verify_a",
        &["condition", "value", "threshold", "pass", "detail"],
    );
    for c in &report.checks {
        t.push(vec![
            c.name.into(),
            fmt(c.value),
            fmt(c.threshold),
            c.pass.to_string(),
            c.detail.clone(),
        ]);
    }
    let k = report.constants;
    Results {
        tables: vec![t],
        checks: report
            .checks
            .iter()
            .map(|c| (c.name.to_string(), c.pass))
            .collect(),
        figures: vec![
            ("alpha".into(), fmt(k.alpha)),
            ("balance".into(), fmt(k.balance)),
            ("clt".into(), fmt(k.clt)),
        ],
    }
}

#[allow(clippy::too_many_arguments)]
fn run_verify_b(
    m: &GeneModel,
    spec: &ExperimentSpec,
    pairs: usize,
    starts: usize,
    replicas: usize,
    horizon: usize,
    drift_replicas: usize,
    y_max: f64,
) -> Result<Results> {
    let k = m.constants();
    let params = m.b_condition_params(replicas, horizon).ok_or_else(|| {
        crate::error::invalid("drift constant a or contraction delta out of range")
    })?;
    let v = |s: &ModelState| m.lyapunov_v(s);
    let drift = check_drift(
        m,
        &v,
        &m.drift_grid(),
        k.a,
        k.b,
        true,
        drift_replicas,
        derive_seed(spec.seed, label::MAIN),
    )?;
    let mut rng = stream_rng(
        derive_seed(spec.seed, label::SAMPLE),
        crate::rng::domain::GRID,
        0,
    );
    let sample_pairs: Vec<(ModelState, ModelState)> = (0..pairs)
        .map(|_| {
            let i = rng.random_range(0..m.num_flows());
            (
                ModelState::new(y_max * rng.random::<f64>(), i),
                ModelState::new(y_max * rng.random::<f64>(), i),
            )
        })
        .collect();
    // Starts spread over the admissible set V(x) + V(y) < 4b / (1 - a).
    let half = 2.0 * k.b / (1.0 - k.a);
    let start_pairs: Vec<(ModelState, ModelState)> = (0..starts)
        .map(|_| {
            let draw = |rng: &mut SimRng| {
                let y =
                    (m.config().y_ref + half * (2.0 * rng.random::<f64>() - 1.0) * 0.999).max(0.0);
                ModelState::new(y, rng.random_range(0..m.num_flows()))
            };
            (draw(&mut rng), draw(&mut rng))
        })
        .collect();
    let coupling = GeneCoupling::new(m.clone());
    let report = check_b_conditions(
        &coupling,
        &GeneCoupling::in_f,
        &v,
        &params,
        &sample_pairs,
        &start_pairs,
        derive_seed(spec.seed, label::AUX),
    )?;

    let mut t = Table::new(
        "verify_b",
        &[
            "check", "item", "first", "second", "dist", "estimate", "stderr", "bound", "pass",
        ],
    );
    for (idx, p) in drift.points.iter().enumerate() {
        t.push(vec![
            "drift".into(),
            idx.to_string(),
            state_label(m, &p.state),
            String::new(),
            fmt(p.v),
            fmt(p.estimate.mean),
            fmt(p.estimate.stderr),
            fmt(p.bound),
            p.pass.to_string(),
        ]);
    }
    for (name, rows) in [
        ("contraction", &report.contraction),
        ("near_mass", &report.near_mass),
        ("mass_bound", &report.mass_bound),
    ] {
        for (idx, c) in rows.iter().enumerate() {
            t.push(vec![
                name.into(),
                idx.to_string(),
                state_label(m, &c.x),
                state_label(m, &c.y),
                fmt(c.dist),
                fmt(c.estimate.mean),
                fmt(c.estimate.stderr),
                fmt(c.bound),
                c.pass.to_string(),
            ]);
        }
    }
    for (idx, c) in report.returns.iter().enumerate() {
        let (mean, se) = c.moment.map_or((f64::NAN, f64::NAN), |mo| {
            (mo.estimate.mean, mo.estimate.stderr)
        });
        t.push(vec![
            "return_time".into(),
            idx.to_string(),
            state_label(m, &c.x),
            state_label(m, &c.y),
            fmt(m.lyapunov_v(&c.x) + m.lyapunov_v(&c.y)),
            fmt(mean),
            fmt(se),
            fmt(params.level),
            c.pass.to_string(),
        ]);
    }
    Ok(Results {
        tables: vec![t],
        checks: vec![
            ("drift".into(), drift.all_pass()),
            ("contraction".into(), report.contraction_pass()),
            ("near_mass".into(), report.near_mass_pass()),
            ("mass_bound".into(), report.mass_bound_pass()),
            ("return_time".into(), report.returns_pass()),
        ],
        figures: vec![
            ("a".into(), fmt(k.a)),
            ("b".into(), fmt(k.b)),
            ("delta".into(), fmt(k.delta)),
            ("near_mass_min".into(), fmt(report.near_mass_min)),
            ("gamma0".into(), fmt(report.gamma0)),
        ],
    })
}

#[allow(clippy::too_many_arguments)]
fn run_ergodicity<M: Model>(
    m: &M,
    spec: &ExperimentSpec,
    n_max: usize,
    atoms: usize,
    burn_in: usize,
    bin_width: f64,
    min_r2: f64,
    exact_rate: Option<f64>,
    rate_tolerance: f64,
) -> Result<Results> {
    let x0 = m.point(&spec.start);
    let stat_start = m.point(&spec.start2);
    let seed = derive_seed(spec.seed, label::STATIONARY);
    let stationary = stationary_sample(m, &Start::At(stat_start.clone()), burn_in, atoms, seed, 0)?;
    let other = stationary_sample(m, &Start::At(stat_start), burn_in, atoms, seed, 1)?;
    let initial = EmpiricalMeasure::uniform(vec![x0; atoms])?;
    let project = m.project(bin_width);
    let plan = ErgodicityPlan {
        n_max,
        support_cap: DEFAULT_SUPPORT_CAP,
    };
    let report = ergodicity_curve(
        m,
        &initial,
        &stationary,
        &other,
        &*project,
        &plan,
        derive_seed(spec.seed, label::MAIN),
    )?;
    let mut t = Table::new("ergodicity", &["step", "distance", "above_noise"]);
    for (n, d) in &report.distances {
        t.push(vec![
            n.to_string(),
            fmt(*d),
            (*d > 10.0 * report.noise).to_string(),
        ]);
    }
    let (rate, r2) = report
        .fit
        .as_ref()
        .map_or((f64::NAN, f64::NAN), |f| (f.rate, f.r_squared));
    let mut checks = vec![
        ("decreasing".to_string(), report.decreasing),
        ("fit_r2".to_string(), r2 >= min_r2),
    ];
    let mut figures = vec![
        ("rate".to_string(), fmt(rate)),
        ("r2".to_string(), fmt(r2)),
        ("noise".to_string(), fmt(report.noise)),
    ];
    if let Some(exact) = exact_rate {
        checks.push((
            "rate_matches_eigenvalue".into(),
            (rate - exact).abs() <= rate_tolerance,
        ));
        figures.push(("eigenvalue".into(), fmt(exact)));
    }
    Ok(Results {
        tables: vec![t],
        checks,
        figures,
    })
}

fn aux_run<M: Model>(
    m: &M,
    g: &Observable<M::Point>,
    spec: &ExperimentSpec,
    aux_steps: usize,
    aux_burn_in: usize,
) -> Result<BatchMeans> {
    long_run(
        m,
        g,
        &Start::At(m.point(&spec.start)),
        aux_burn_in,
        aux_steps,
        derive_seed(spec.seed, label::AUX),
    )
}

fn clt_rows(t: &mut Table, mode: &str, report: &CltReport) {
    for (r, z) in report.standardized.iter().enumerate() {
        t.push(vec![mode.to_string(), r.to_string(), fmt(*z)]);
    }
}

fn run_clt<M: Model>(
    m: &M,
    spec: &ExperimentSpec,
    plan: &ReplicaPlan,
    aux_steps: usize,
    aux_burn_in: usize,
) -> Result<Results> {
    let g = m.observable(&spec.observable);
    let reference = aux_run(m, &g, spec, aux_steps, aux_burn_in)?;
    let start = Start::At(m.point(&spec.start));
    let stationary = clt_test(
        m,
        &g,
        &start,
        plan,
        &reference,
        derive_seed(spec.seed, label::MAIN),
    )?;
    let fixed_plan = ReplicaPlan {
        burn_in: 0,
        ..*plan
    };
    let fixed = clt_test(
        m,
        &g,
        &start,
        &fixed_plan,
        &reference,
        derive_seed(spec.seed, label::FIXED),
    )?;
    let mut t = Table::new("clt", &["mode", "replica", "standardized"]);
    clt_rows(&mut t, "stationary", &stationary);
    clt_rows(&mut t, "fixed", &fixed);
    Ok(Results {
        tables: vec![t],
        checks: vec![
            ("ks_stationary".into(), stationary.pass),
            ("ks_fixed".into(), fixed.pass),
        ],
        figures: vec![
            ("ks".into(), format!("{:.6}", stationary.ks)),
            ("ks_fixed".into(), format!("{:.6}", fixed.ks)),
            ("threshold".into(), format!("{:.6}", stationary.threshold)),
            ("sigma2".into(), format!("{:.6}", reference.sigma2)),
            ("sigma2_stderr".into(), format!("{:.6}", reference.stderr)),
            ("center".into(), format!("{:.6}", reference.mean)),
        ],
    })
}

fn run_donsker<M: Model>(
    m: &M,
    spec: &ExperimentSpec,
    plan: &ReplicaPlan,
    aux_steps: usize,
    aux_burn_in: usize,
) -> Result<Results> {
    let g = m.observable(&spec.observable);
    let reference = aux_run(m, &g, spec, aux_steps, aux_burn_in)?;
    let start = Start::At(m.point(&spec.start));
    let report = donsker_test(
        m,
        &g,
        &start,
        plan,
        &reference,
        derive_seed(spec.seed, label::MAIN),
    )?;
    let mut t = Table::new(
        "donsker",
        &["replica", "endpoint", "running_max", "bridge_deviation"],
    );
    for (r, f) in report.features.iter().enumerate() {
        t.push(vec![
            r.to_string(),
            fmt(f.endpoint),
            fmt(f.running_max),
            fmt(f.bridge_deviation),
        ]);
    }
    Ok(Results {
        tables: vec![t],
        checks: vec![("ks_max".into(), report.pass)],
        figures: vec![
            ("ks_max".into(), format!("{:.6}", report.ks_max)),
            ("ks_endpoint".into(), format!("{:.6}", report.ks_endpoint)),
            ("threshold".into(), format!("{:.6}", report.threshold)),
            ("sigma2".into(), format!("{:.6}", reference.sigma2)),
        ],
    })
}

/// Long run on a finite chain: centering plus occupation frequencies.
fn finite_long_run(
    m: &MatrixKernel,
    g: &Observable<usize>,
    spec: &ExperimentSpec,
    aux_steps: usize,
    aux_burn_in: usize,
) -> Result<(BatchMeans, Vec<f64>)> {
    let mut rng = stream_rng(
        derive_seed(spec.seed, label::AUX),
        crate::rng::domain::AUXILIARY,
        0,
    );
    let x = crate::kernel::run_chain(m, m.point(&spec.start), aux_burn_in, &mut rng, |_, _| {});
    let mut acc = BatchAccumulator::new(default_batch_len(aux_steps))?;
    let mut counts = vec![0u64; m.num_states()];
    crate::kernel::run_chain(m, x, aux_steps, &mut rng, |_, s| {
        acc.push(g.eval(s));
        counts[*s] += 1;
    });
    let total = aux_steps as f64;
    Ok((
        acc.finish()?,
        counts.iter().map(|c| *c as f64 / total).collect(),
    ))
}

fn mw_results(
    report: &MwReport,
    grid_labels: &[String],
    weights: &[f64],
    center: &Estimate,
) -> Results {
    let mut values = Table::new("mw", &["n", "atom", "weight", "value", "stderr"]);
    let mut norms = Table::new("mw_norms", &["n", "norm", "norm_stderr"]);
    for row in &report.rows {
        for (a, v) in row.values.iter().enumerate() {
            values.push(vec![
                row.n.to_string(),
                grid_labels[a].clone(),
                fmt(weights[a]),
                fmt(v.mean),
                fmt(v.stderr),
            ]);
        }
        norms.push(vec![row.n.to_string(), fmt(row.norm), fmt(row.norm_stderr)]);
    }
    // Plateau: consecutive norms agree within three combined standard errors.
    let plateau = report.rows.windows(2).all(|w| {
        let se = (w[0].norm_stderr.powi(2) + w[1].norm_stderr.powi(2)).sqrt();
        (w[1].norm - w[0].norm).abs() <= 3.0 * se
    });
    let x: Vec<f64> = report.rows.iter().map(|r| r.n as f64).collect();
    let y: Vec<f64> = report.rows.iter().map(|r| r.norm).collect();
    let fit = linear_fit(&x, &y);
    let mut figures = vec![
        (
            "norm_last".into(),
            fmt(report.rows.last().map_or(f64::NAN, |r| r.norm)),
        ),
        ("center".into(), fmt(center.mean)),
    ];
    if let Some(f) = fit {
        figures.push(("slope".into(), fmt(f.slope)));
        figures.push(("slope_p".into(), fmt(f.slope_p_value)));
    }
    Results {
        tables: vec![values, norms],
        checks: vec![("plateau".into(), plateau)],
        figures,
    }
}

#[allow(clippy::too_many_arguments)]
fn run_mw_generic<M: Model>(
    m: &M,
    spec: &ExperimentSpec,
    n_list: &[usize],
    replicas: usize,
    aux_steps: usize,
    aux_burn_in: usize,
    center_mode: MwCenter,
    grid_points: usize,
    grid_burn_in: usize,
    grid: Option<&Vec<f64>>,
    lift: impl Fn(f64) -> Option<M::Point>,
) -> Result<Results> {
    let g = m.observable(&spec.observable);
    let measure = match grid {
        Some(points) => {
            let pts: Vec<M::Point> = points
                .iter()
                .map(|p| {
                    lift(*p).ok_or_else(|| {
                        crate::error::invalid("grid point does not apply to this model")
                    })
                })
                .collect::<Result<_>>()?;
            EmpiricalMeasure::uniform(pts)?
        }
        None => stationary_sample(
            m,
            &Start::At(m.point(&spec.start)),
            grid_burn_in,
            grid_points,
            derive_seed(spec.seed, label::GRID),
            0,
        )?,
    };
    let center = match center_mode {
        MwCenter::LongRun => {
            let bm = aux_run(m, &g, spec, aux_steps, aux_burn_in)?;
            Estimate {
                mean: bm.mean,
                stderr: bm.mean_stderr,
                count: aux_steps,
            }
        }
        MwCenter::Grid => Estimate::exact(measure.expect(|p| g.eval(p))),
    };
    let report = mw_diagnostic(
        m,
        &g,
        &center,
        n_list,
        &measure,
        replicas,
        derive_seed(spec.seed, label::MAIN),
    )?;
    let labels: Vec<String> = measure
        .atoms()
        .iter()
        .map(|(p, _)| state_label(m, p))
        .collect();
    let weights: Vec<f64> = measure.atoms().iter().map(|(_, w)| *w).collect();
    Ok(mw_results(&report, &labels, &weights, &center))
}

#[allow(clippy::too_many_arguments)]
fn run_mw_finite(
    m: &MatrixKernel,
    spec: &ExperimentSpec,
    n_list: &[usize],
    replicas: usize,
    aux_steps: usize,
    aux_burn_in: usize,
    center_mode: MwCenter,
) -> Result<Results> {
    let g = m.observable(&spec.observable);
    let states: Vec<usize> = (0..m.num_states()).collect();
    let (center, weights) = match center_mode {
        MwCenter::LongRun => {
            let (bm, occupation) = finite_long_run(m, &g, spec, aux_steps, aux_burn_in)?;
            (
                Estimate {
                    mean: bm.mean,
                    stderr: bm.mean_stderr,
                    count: aux_steps,
                },
                occupation,
            )
        }
        MwCenter::Grid => {
            let w = vec![1.0 / states.len() as f64; states.len()];
            let c = states.iter().map(|s| g.eval(s)).sum::<f64>() / states.len() as f64;
            (Estimate::exact(c), w)
        }
    };
    let measure = EmpiricalMeasure::new(
        states
            .iter()
            .copied()
            .zip(weights.iter().copied())
            .collect(),
    )
    .or_else(|_| EmpiricalMeasure::uniform(states.clone()))?;
    let report = mw_diagnostic(
        m,
        &g,
        &center,
        n_list,
        &measure,
        replicas,
        derive_seed(spec.seed, label::MAIN),
    )?;
    let labels: Vec<String> = states.iter().map(|s| s.to_string()).collect();
    Ok(mw_results(&report, &labels, &weights, &center))
}

fn execute_generic<M: Model>(m: &M, spec: &ExperimentSpec) -> Result<Results> {
    match &spec.params {
        Params::Simulate { n } => Ok(run_simulate(m, spec, *n)),
        Params::Ergodicity {
            n_max,
            atoms,
            burn_in,
            bin_width,
            min_r2,
            rate_tolerance,
        } => {
            let exact = match spec.model {
                ModelSpec::TwoState { p01, p10 } => Some((1.0 - p01 - p10).abs()),
                _ => None,
            };
            run_ergodicity(
                m,
                spec,
                *n_max,
                *atoms,
                *burn_in,
                *bin_width,
                *min_r2,
                exact,
                *rate_tolerance,
            )
        }
        Params::Clt {
            plan,
            aux_steps,
            aux_burn_in,
        } => run_clt(m, spec, plan, *aux_steps, *aux_burn_in),
        Params::Donsker {
            plan,
            aux_steps,
            aux_burn_in,
        } => run_donsker(m, spec, plan, *aux_steps, *aux_burn_in),
        _ => Err(crate::error::invalid(format!(
            "{} is not available for this model",
            spec.kind.name()
        ))),
    }
}

fn finite_kernel(model: &ModelSpec) -> Result<MatrixKernel> {
    match model {
        ModelSpec::TwoState { p01, p10 } => MatrixKernel::two_state(*p01, *p10),
        ModelSpec::Cycle { states } => MatrixKernel::cycle(*states),
        ModelSpec::Matrix { rows } => MatrixKernel::from_rows(rows.clone()),
        _ => Err(crate::error::invalid("not a finite-state model")),
    }
}

/// Run the experiment in the current thread pool, without writing files.
pub fn compute(spec: &ExperimentSpec) -> Result<Results> {
    match &spec.model {
        ModelSpec::TwoState { .. } | ModelSpec::Cycle { .. } | ModelSpec::Matrix { .. } => {
            let k = finite_kernel(&spec.model)?;
            match &spec.params {
                Params::CoupleDecay {
                    n_max,
                    replicas,
                    overlap_scale,
                    min_r2,
                } => {
                    let c = finite_coupling(
                        k.clone(),
                        FiniteSubKernel::diagonal_overlap(&k, *overlap_scale)?,
                    )?;
                    let g = k.observable(&spec.observable);
                    run_decay(
                        &c,
                        &g,
                        &k.point(&spec.start),
                        &k.point(&spec.start2),
                        spec,
                        *n_max,
                        *replicas,
                        *min_r2,
                    )
                }
                Params::Mw {
                    n_list,
                    replicas,
                    aux_steps,
                    aux_burn_in,
                    center,
                    ..
                } => run_mw_finite(
                    &k,
                    spec,
                    n_list,
                    *replicas,
                    *aux_steps,
                    *aux_burn_in,
                    *center,
                ),
                _ => execute_generic(&k, spec),
            }
        }
        ModelSpec::Identity | ModelSpec::IidNormal { .. } => {
            let run = |k: &dyn Fn() -> Result<Results>| k();
            match spec.model {
                ModelSpec::Identity => {
                    let k = IdentityKernel(RealLine);
                    run(&|| real_dispatch(&k, spec))
                }
                ModelSpec::IidNormal { mean, sd } => {
                    let k = IidNormalKernel { mean, sd };
                    run(&|| real_dispatch(&k, spec))
                }
                _ => unreachable!(),
            }
        }
        ModelSpec::Gene(cfg) => {
            let m = GeneModel::new(cfg.clone())?;
            match &spec.params {
                Params::CoupleDecay {
                    n_max,
                    replicas,
                    min_r2,
                    ..
                } => {
                    let c = GeneCoupling::new(m.clone());
                    let g = m.observable(&spec.observable);
                    run_decay(
                        &c,
                        &g,
                        &m.point(&spec.start),
                        &m.point(&spec.start2),
                        spec,
                        *n_max,
                        *replicas,
                        *min_r2,
                    )
                }
                Params::VerifyA { samples } => Ok(run_verify_a(&m, spec, *samples)),
                Params::VerifyB {
                    pairs,
                    starts,
                    replicas,
                    horizon,
                    drift_replicas,
                    y_max,
                } => run_verify_b(
                    &m,
                    spec,
                    *pairs,
                    *starts,
                    *replicas,
                    *horizon,
                    *drift_replicas,
                    *y_max,
                ),
                Params::Mw {
                    n_list,
                    replicas,
                    aux_steps,
                    aux_burn_in,
                    center,
                    grid_points,
                    grid_burn_in,
                    grid,
                } => run_mw_generic(
                    &m,
                    spec,
                    n_list,
                    *replicas,
                    *aux_steps,
                    *aux_burn_in,
                    *center,
                    *grid_points,
                    *grid_burn_in,
                    grid.as_ref(),
                    |_| None,
                ),
                _ => execute_generic(&m, spec),
            }
        }
    }
}

fn real_dispatch<M: Model<Point = f64>>(m: &M, spec: &ExperimentSpec) -> Result<Results> {
    match &spec.params {
        Params::Mw {
            n_list,
            replicas,
            aux_steps,
            aux_burn_in,
            center,
            grid_points,
            grid_burn_in,
            grid,
        } => run_mw_generic(
            m,
            spec,
            n_list,
            *replicas,
            *aux_steps,
            *aux_burn_in,
            *center,
            *grid_points,
            *grid_burn_in,
            grid.as_ref(),
            Some,
        ),
        _ => execute_generic(m, spec),
    }
}

fn manifest(
    spec: &ExperimentSpec,
    results: &Results,
    files: &[PathBuf],
    workers: usize,
    wall: f64,
) -> Result<String> {
    let mut run = toml::Table::new();
    run.insert("kind".into(), spec.kind.name().into());
    run.insert("seed".into(), toml::Value::String(spec.seed.to_string()));
    run.insert("workers".into(), (workers as i64).into());
    run.insert("library".into(), env!("CARGO_PKG_NAME").into());
    run.insert("version".into(), env!("CARGO_PKG_VERSION").into());
    let stamp = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs() as i64)
        .unwrap_or(0);
    run.insert("timestamp_unix".into(), stamp.into());
    run.insert("wall_time_seconds".into(), wall.into());
    run.insert("pass".into(), results.pass().into());
    run.insert("summary".into(), results.summary().into());
    let mut checks = toml::Table::new();
    for (name, pass) in &results.checks {
        checks.insert(name.clone(), (*pass).into());
    }
    let mut figures = toml::Table::new();
    for (name, value) in &results.figures {
        figures.insert(name.clone(), value.clone().into());
    }
    let mut tables = toml::Table::new();
    for (t, path) in results.tables.iter().zip(files) {
        let mut entry = toml::Table::new();
        entry.insert(
            "file".into(),
            path.file_name()
                .map(|f| f.to_string_lossy().to_string())
                .unwrap_or_default()
                .into(),
        );
        entry.insert(
            "columns".into(),
            toml::Value::Array(t.header.iter().map(|h| h.clone().into()).collect()),
        );
        entry.insert("rows".into(), (t.rows.len() as i64).into());
        tables.insert(t.name.clone(), entry.into());
    }
    let mut root = toml::Table::new();
    root.insert("run".into(), run.into());
    root.insert("checks".into(), checks.into());
    root.insert("figures".into(), figures.into());
    root.insert("tables".into(), tables.into());
    root.insert("config".into(), spec.source.clone().into());
    toml::to_string(&root).map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
}

/// Run a validated experiment with the requested worker count and write
/// its tables and manifest into `out_dir`.
pub fn execute(spec: &ExperimentSpec, out_dir: &Path) -> Result<Outcome> {
    let started = Instant::now();
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(w) = spec.workers {
        builder = builder.num_threads(w);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::ThreadPool(e.to_string()))?;
    let workers = pool.current_num_threads();
    let results = pool.install(|| compute(spec))?;
    std::fs::create_dir_all(out_dir)?;
    let files = results
        .tables
        .iter()
        .map(|t| t.write(out_dir))
        .collect::<Result<Vec<_>>>()?;
    let text = manifest(
        spec,
        &results,
        &files,
        workers,
        started.elapsed().as_secs_f64(),
    )?;
    let manifest_path = out_dir.join("manifest.toml");
    std::fs::write(&manifest_path, text)?;
    let mut all = files;
    all.push(manifest_path);
    Ok(Outcome {
        results,
        out_dir: out_dir.to_path_buf(),
        files: all,
    })
}

/// Load, validate and run the configuration at `path`.
pub fn run(path: &Path, overrides: &Overrides) -> Result<Outcome> {
    let text = std::fs::read_to_string(path)?;
    let spec = parse_spec(&text, overrides)?;
    let out = spec.out.clone().unwrap_or_else(|| PathBuf::from("results"));
    execute(&spec, &out)
}
