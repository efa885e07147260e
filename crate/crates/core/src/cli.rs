//! Experiment runner: flat `key = value` configs, one experiment per file.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use crate::capacity::{
    boundary_samples, default_fatness_radii, fatness_scan, p_capacity, self_improvement, CapacityOptions, Condenser,
};
use crate::cover::{
    interior_samples, thickness_report, verify_whitney, whitney, ContentOptions, VolumeSurrogate, WhitneyOptions,
};
use crate::error::{Error, Result, ResultExt};
use crate::frames::{CommutatorBasis, VectorFieldSystem};
use crate::grid::{GridDomain, Shape};
use crate::hardy::{
    fefferman_phong, mazya_check, maximize_ratio, pointwise_constant, random_bumps, sharp_experiment, weight_field,
    MaximizeOptions, WeightSpec,
};
use crate::metric::default_oracle;
use crate::nsw::{fitted_exponent, homogeneous_dimensions, system_ball_volume};

pub const EXPERIMENTS: &[&str] = &["volumes", "capacity", "fatness", "whitney", "content", "hardy", "sharp", "chain"];

const KEYS: &[&str] = &[
    "experiment", "system", "system_file", "r0", "shape", "center", "radius", "lo", "hi", "inner", "h", "p", "q",
    "qs", "gamma", "s", "exponent", "weight", "x0", "seed", "samples", "radii", "points", "tolerance", "refine",
    "trace", "output",
];

/// One problem found while validating a config.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Diagnostic {
    /// 1-based line, 0 when the problem is a missing key.
    pub line: usize,
    pub key: String,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.line > 0 {
            write!(f, "line {}: {}: {}", self.line, self.key, self.message)
        } else {
            write!(f, "{}: {}", self.key, self.message)
        }
    }
}

#[derive(Clone, Debug)]
pub enum SystemSource {
    Builtin(String),
    File(PathBuf),
}

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub experiment: String,
    pub system: SystemSource,
    pub r0: Option<f64>,
    pub shape: Option<Shape>,
    pub inner: Option<f64>,
    pub h: f64,
    pub p: f64,
    pub q: Option<f64>,
    pub qs: Vec<f64>,
    pub gamma: Option<f64>,
    pub s: Option<f64>,
    pub exponent: Option<f64>,
    pub weight: String,
    pub x0: Option<Vec<f64>>,
    pub seed: u64,
    pub samples: Option<usize>,
    pub radii: Vec<f64>,
    pub points: Vec<Vec<f64>>,
    pub tolerance: Option<f64>,
    pub refine: bool,
    pub trace: bool,
    pub output: Option<PathBuf>,
    /// Key/value pairs as read, for the manifest.
    pub entries: BTreeMap<String, String>,
}

struct Raw {
    entries: BTreeMap<String, (String, usize)>,
}

fn parse_raw(text: &str, diags: &mut Vec<Diagnostic>) -> Raw {
    let mut entries = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = line.split(['#', ';']).next().unwrap_or("").trim();
        if line.is_empty() || (line.starts_with('[') && line.ends_with(']')) {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            diags.push(Diagnostic {
                line: lineno,
                key: line.to_string(),
                message: "expected `key = value`".into(),
            });
            continue;
        };
        let (k, v) = (k.trim().to_ascii_lowercase(), v.trim().to_string());
        if !KEYS.contains(&k.as_str()) {
            diags.push(Diagnostic {
                line: lineno,
                key: k,
                message: "unknown key".into(),
            });
            continue;
        }
        if entries.contains_key(&k) {
            diags.push(Diagnostic {
                line: lineno,
                key: k,
                message: "duplicate key".into(),
            });
            continue;
        }
        entries.insert(k, (v, lineno));
    }
    Raw { entries }
}

struct Reader<'a> {
    raw: &'a Raw,
    diags: &'a mut Vec<Diagnostic>,
}

impl Reader<'_> {
    fn str(&self, key: &str) -> Option<&str> {
        self.raw.entries.get(key).map(|(v, _)| v.as_str())
    }

    fn bad(&mut self, key: &str, message: String) {
        let line = self.raw.entries.get(key).map_or(0, |(_, l)| *l);
        self.diags.push(Diagnostic {
            line,
            key: key.into(),
            message,
        });
    }

    fn f64(&mut self, key: &str) -> Option<f64> {
        let v = self.str(key)?.to_string();
        match v.parse::<f64>() {
            Ok(x) if x.is_finite() => Some(x),
            _ => {
                self.bad(key, format!("`{v}` is not a finite number"));
                None
            }
        }
    }

    fn list(&mut self, key: &str) -> Option<Vec<f64>> {
        let v = self.str(key)?.to_string();
        let parsed: std::result::Result<Vec<f64>, _> = v.split(',').map(|s| s.trim().parse::<f64>()).collect();
        match parsed {
            Ok(x) if !x.is_empty() && x.iter().all(|v| v.is_finite()) => Some(x),
            _ => {
                self.bad(key, format!("`{v}` is not a comma-separated list of numbers"));
                None
            }
        }
    }

    fn points(&mut self, key: &str) -> Option<Vec<Vec<f64>>> {
        let v = self.str(key)?.to_string();
        let mut out = Vec::new();
        for part in v.split(';') {
            let parsed: std::result::Result<Vec<f64>, _> = part.split(',').map(|s| s.trim().parse::<f64>()).collect();
            match parsed {
                Ok(x) if !x.is_empty() => out.push(x),
                _ => {
                    self.bad(key, format!("`{part}` is not a point"));
                    return None;
                }
            }
        }
        Some(out)
    }

    fn bool(&mut self, key: &str) -> bool {
        match self.str(key) {
            None => false,
            Some("true") | Some("yes") | Some("1") => true,
            Some("false") | Some("no") | Some("0") => false,
            Some(v) => {
                let v = v.to_string();
                self.bad(key, format!("`{v}` is not a boolean"));
                false
            }
        }
    }

    fn uint(&mut self, key: &str) -> Option<u64> {
        let v = self.str(key)?.to_string();
        match v.parse::<u64>() {
            Ok(x) => Some(x),
            Err(_) => {
                self.bad(key, format!("`{v}` is not a nonnegative integer"));
                None
            }
        }
    }
}

fn check_dim(r: &mut Reader, key: &str, v: &[f64], n: Option<usize>) {
    if let Some(n) = n {
        if v.len() != n {
            r.bad(key, format!("expected {n} coordinates, found {}", v.len()));
        }
    }
}

/// Parses and validates config text; `base` resolves `system_file`.
pub fn parse_config(text: &str, base: &Path) -> (Option<ExperimentConfig>, Vec<Diagnostic>) {
    let mut diags = Vec::new();
    let raw = parse_raw(text, &mut diags);
    let mut r = Reader { raw: &raw, diags: &mut diags };

    let experiment = match r.str("experiment") {
        None => {
            r.bad("experiment", format!("missing; one of {}", EXPERIMENTS.join(", ")));
            None
        }
        Some(e) if EXPERIMENTS.contains(&e) => Some(e.to_string()),
        Some(e) => {
            let e = e.to_string();
            r.bad("experiment", format!("unknown experiment `{e}`; one of {}", EXPERIMENTS.join(", ")));
            None
        }
    };
    let exp = experiment.clone().unwrap_or_default();

    let mut dim = None;
    let mut is_group = false;
    let system = match (r.str("system").map(str::to_string), r.str("system_file").map(str::to_string)) {
        (Some(_), Some(_)) => {
            r.bad("system_file", "give either `system` or `system_file`, not both".into());
            None
        }
        (None, None) => {
            r.bad("system", "missing; a builtin name or `system_file`".into());
            None
        }
        (Some(name), None) => match VectorFieldSystem::builtin(&name) {
            Ok(s) => {
                dim = Some(s.ambient_dim());
                is_group = s.group().is_some();
                Some(SystemSource::Builtin(name))
            }
            Err(e) => {
                r.bad("system", e.to_string());
                None
            }
        },
        (None, Some(file)) => {
            let path = base.join(&file);
            match fs::read_to_string(&path).map_err(Error::from).and_then(|t| VectorFieldSystem::parse(&file, &t)) {
                Ok(s) => {
                    dim = Some(s.ambient_dim());
                    Some(SystemSource::File(path))
                }
                Err(e) => {
                    r.bad("system_file", e.to_string());
                    None
                }
            }
        }
    };

    let r0 = r.f64("r0");
    if let Some(v) = r0 {
        if v <= 0.0 {
            r.bad("r0", format!("r0 = {v} must be positive"));
        }
    }
    let p = r.f64("p").unwrap_or(2.0);
    if !(p > 1.0) {
        r.bad("p", format!("p = {p} must exceed 1"));
    }
    let h = r.f64("h");
    if let Some(v) = h {
        if v <= 0.0 {
            r.bad("h", format!("h = {v} must be positive"));
        }
    }
    let q = r.f64("q");
    if let Some(v) = q {
        if !(v > 1.0 && v <= p) {
            r.bad("q", format!("q = {v} outside (1, p] with p = {p}"));
        }
    }
    let qs = r.list("qs").unwrap_or_default();
    for &v in &qs {
        if !(v > 1.0 && v <= p) {
            r.bad("qs", format!("q = {v} outside (1, p] with p = {p}"));
        }
    }
    let gamma = r.f64("gamma");
    if let Some(g) = gamma {
        if !(0.0..=p).contains(&g) {
            r.bad(
                "gamma",
                format!("gamma = {g} outside the admissible range 0 <= gamma <= p = {p} of the mixed weight"),
            );
        }
    }
    let s = r.f64("s");
    if let Some(v) = s {
        if !(v > 1.0) {
            r.bad("s", format!("s = {v} must exceed 1"));
        }
    }
    let exponent = r.f64("exponent");
    if let Some(v) = exponent {
        if v < 0.0 {
            r.bad("exponent", format!("exponent = {v} must be nonnegative"));
        }
    }
    let seed = r.uint("seed").unwrap_or(0);
    let samples = r.uint("samples").map(|v| v as usize);
    if samples == Some(0) {
        r.bad("samples", "samples must be positive".into());
    }
    let radii = r.list("radii").unwrap_or_default();
    if radii.iter().any(|&v| v <= 0.0) {
        r.bad("radii", "radii must be positive".into());
    }
    let points = r.points("points").unwrap_or_default();
    for pt in points.clone() {
        check_dim(&mut r, "points", &pt, dim);
    }
    let x0 = r.list("x0");
    if let Some(x) = &x0 {
        check_dim(&mut r, "x0", &x.clone(), dim);
    }
    let tolerance = r.f64("tolerance");
    if let Some(v) = tolerance {
        if v <= 0.0 {
            r.bad("tolerance", "tolerance must be positive".into());
        }
    }
    let refine = r.bool("refine");
    let trace = r.bool("trace");
    let inner = r.f64("inner");
    let output = r.str("output").map(|o| base.join(o));

    let radius = r.f64("radius");
    let center = r.list("center");
    if let Some(c) = &center {
        check_dim(&mut r, "center", &c.clone(), dim);
    }
    let shape = match r.str("shape").map(str::to_string) {
        None => None,
        Some(kind) => {
            let c = center.clone().unwrap_or_else(|| vec![0.0; dim.unwrap_or(0)]);
            match kind.as_str() {
                "ball" | "gauge_ball" => match radius {
                    Some(rad) if rad > 0.0 => {
                        if kind == "gauge_ball" && !is_group {
                            r.bad("shape", "gauge_ball needs an H-type system".into());
                        }
                        Some(if kind == "ball" {
                            Shape::Ball { center: c, radius: rad }
                        } else {
                            Shape::GaugeBall { center: c, radius: rad }
                        })
                    }
                    _ => {
                        r.bad("radius", format!("shape `{kind}` needs a positive radius"));
                        None
                    }
                },
                "box" | "cube" => {
                    let (lo, hi) = if kind == "cube" {
                        match radius {
                            Some(rad) if rad > 0.0 => (
                                c.iter().map(|v| v - rad).collect::<Vec<_>>(),
                                c.iter().map(|v| v + rad).collect::<Vec<_>>(),
                            ),
                            _ => {
                                r.bad("radius", "shape `cube` needs a positive half-width `radius`".into());
                                (vec![], vec![])
                            }
                        }
                    } else {
                        (r.list("lo").unwrap_or_default(), r.list("hi").unwrap_or_default())
                    };
                    check_dim(&mut r, "lo", &lo, dim);
                    check_dim(&mut r, "hi", &hi, dim);
                    if lo.iter().zip(&hi).any(|(a, b)| !(a < b)) {
                        r.bad("hi", "box needs lo < hi in every coordinate".into());
                    }
                    Some(Shape::Box { lo, hi })
                }
                other => {
                    r.bad("shape", format!("unknown shape `{other}`; one of ball, gauge_ball, box, cube"));
                    None
                }
            }
        }
    };

    let weight = r.str("weight").unwrap_or("boundary").to_string();
    let needs_domain = !matches!(exp.as_str(), "volumes" | "sharp" | "");
    if needs_domain {
        if shape.is_none() && r.str("shape").is_none() {
            r.bad("shape", format!("experiment `{exp}` needs a domain shape"));
        }
        if h.is_none() {
            r.bad("h", format!("experiment `{exp}` needs a grid spacing h"));
        }
    }
    match exp.as_str() {
        "capacity" => match (inner, radius) {
            (Some(a), Some(b)) if a > 0.0 && a < b => {}
            _ => r.bad("inner", "capacity needs 0 < inner < radius".into()),
        },
        "content" if q.is_none() => r.bad("q", "content needs the content exponent q".into()),
        "hardy" => {
            if !["boundary", "point", "mixed", "gauge_sharp", "gauge_corollary"].contains(&weight.as_str()) {
                r.bad(
                    "weight",
                    format!("unknown weight `{weight}`; one of boundary, point, mixed, gauge_sharp, gauge_corollary"),
                );
            }
            if weight == "mixed" && gamma.is_none() {
                r.bad("gamma", "the mixed weight needs gamma".into());
            }
            if weight.starts_with("gauge") && !is_group {
                r.bad("weight", "gauge weights need an H-type system".into());
            }
        }
        "sharp" => {
            if !is_group && system.is_some() {
                r.bad("system", "sharp needs an H-type system".into());
            }
            if radius.is_none() {
                r.bad("radius", "sharp needs the gauge-ball radius".into());
            }
        }
        _ => {}
    }

    let entries = raw.entries.iter().map(|(k, (v, _))| (k.clone(), v.clone())).collect();
    if !diags.is_empty() {
        return (None, diags);
    }
    let cfg = ExperimentConfig {
        experiment: experiment.unwrap(),
        system: system.unwrap(),
        r0,
        shape,
        inner,
        h: h.unwrap_or(0.125),
        p,
        q,
        qs,
        gamma,
        s,
        exponent,
        weight,
        x0,
        seed,
        samples,
        radii,
        points,
        tolerance,
        refine,
        trace,
        output,
        entries,
    };
    (Some(cfg), diags)
}

/// Diagnostics for the config at `path`; empty iff `run` would start.
pub fn validate(path: &Path) -> Result<Vec<Diagnostic>> {
    let text = fs::read_to_string(path)?;
    Ok(parse_config(&text, path.parent().unwrap_or(Path::new("."))).1)
}

pub fn load(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)?;
    match parse_config(&text, path.parent().unwrap_or(Path::new("."))) {
        (Some(cfg), _) => Ok(cfg),
        (None, diags) => Err(Error::Config(
            diags.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("; "),
        )),
    }
}

/// A bound or invariant check recorded in the manifest.
#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub bound: Option<f64>,
    pub pass: bool,
}

impl Check {
    fn at_most(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Check {
            name: name.into(),
            value,
            bound: Some(bound),
            pass: value <= bound,
        }
    }

    fn at_least(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Check {
            name: name.into(),
            value,
            bound: Some(bound),
            pass: value >= bound,
        }
    }

    fn positive(name: impl Into<String>, value: f64) -> Self {
        Check {
            name: name.into(),
            value,
            bound: Some(0.0),
            pass: value > 0.0 && value.is_finite(),
        }
    }

    fn finite(name: impl Into<String>, value: f64) -> Self {
        Check {
            name: name.into(),
            value,
            bound: None,
            pass: value.is_finite(),
        }
    }
}

/// Result of one experiment.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub experiment: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
    pub details: Value,
    pub checks: Vec<Check>,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

#[derive(Clone, Debug)]
pub enum Cell {
    Num(f64),
    Int(u64),
    Text(String),
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cell::Num(v) => f.write_str(&fmt_f64(*v)),
            Cell::Int(v) => write!(f, "{v}"),
            Cell::Text(s) => f.write_str(s),
        }
    }
}

/// 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else if v.is_nan() {
        "nan".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

fn point_text(x: &[f64]) -> Cell {
    Cell::Text(x.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(" "))
}

fn build_system(cfg: &ExperimentConfig) -> Result<VectorFieldSystem> {
    let sys = match &cfg.system {
        SystemSource::Builtin(name) => VectorFieldSystem::builtin(name)?,
        SystemSource::File(path) => {
            let text = fs::read_to_string(path)?;
            VectorFieldSystem::parse(&path.display().to_string(), &text)?
        }
    };
    Ok(match cfg.r0 {
        Some(r0) => sys.with_r0(r0),
        None => sys,
    })
}

fn basis_for(sys: &VectorFieldSystem, samples: &[Vec<f64>]) -> Result<CommutatorBasis> {
    let mut last = None;
    for step in 1..=4 {
        match sys.build_commutator_basis(samples, step) {
            Ok(b) => return Ok(b),
            Err(e) => last = Some(e),
        }
    }
    Err(last.unwrap())
}

fn build_domain(cfg: &ExperimentConfig, sys: &VectorFieldSystem) -> Result<GridDomain> {
    let shape = cfg.shape.as_ref().ok_or_else(|| Error::Config("missing shape".into()))?;
    GridDomain::discretize(shape, cfg.h, sys).context("discretizing the domain")
}

fn center_of(cfg: &ExperimentConfig, n: usize) -> Vec<f64> {
    match &cfg.shape {
        Some(Shape::Ball { center, .. }) | Some(Shape::GaugeBall { center, .. }) => center.clone(),
        Some(Shape::Box { lo, hi }) => lo.iter().zip(hi).map(|(a, b)| 0.5 * (a + b)).collect(),
        _ => vec![0.0; n],
    }
}

fn radius_of(cfg: &ExperimentConfig) -> Option<f64> {
    match &cfg.shape {
        Some(Shape::Ball { radius, .. }) | Some(Shape::GaugeBall { radius, .. }) => Some(*radius),
        _ => cfg.entries.get("radius").and_then(|v| v.parse().ok()),
    }
}

fn volumes(cfg: &ExperimentConfig, sys: &VectorFieldSystem) -> Result<Outcome> {
    let n = sys.ambient_dim();
    let points = if cfg.points.is_empty() {
        let mut e1 = vec![0.0; n];
        e1[0] = 1.0;
        vec![vec![0.0; n], e1]
    } else {
        cfg.points.clone()
    };
    let radii = if cfg.radii.is_empty() {
        vec![0.03125, 0.0625, 0.125]
    } else {
        cfg.radii.clone()
    };
    let samples = cfg.samples.unwrap_or(100_000);
    let tol = cfg.tolerance.unwrap_or(0.2);
    let basis = basis_for(sys, &points)?;
    let mut rows = Vec::new();
    let mut checks = Vec::new();
    let mut per_point = Vec::new();
    for (j, x) in points.iter().enumerate() {
        let (qx, q) = homogeneous_dimensions(&basis, x, &points)?;
        let mut vols = Vec::new();
        for (k, &r) in radii.iter().enumerate() {
            let v = system_ball_volume(sys, x, r, samples, cfg.seed.wrapping_add((j * radii.len() + k) as u64))
                .context(format!("volume at {x:?}, r = {r}"))?;
            rows.push(vec![
                point_text(x),
                Cell::Num(r),
                Cell::Num(v.lower),
                Cell::Num(v.upper),
                Cell::Num(v.estimate),
                Cell::Num(v.half_width),
            ]);
            vols.push(v.estimate);
        }
        let exponent = fitted_exponent(&radii, &vols);
        checks.push(Check::at_most(
            format!("volume exponent at point {j} vs Q(x) = {qx}"),
            (exponent - qx as f64).abs(),
            tol,
        ));
        per_point.push(json!({"point": x, "q_x": qx, "q": q, "exponent": exponent}));
    }
    Ok(Outcome {
        experiment: "volumes".into(),
        header: ["point", "r", "lower", "upper", "estimate", "half_width"].map(String::from).to_vec(),
        rows,
        details: json!({"system": sys.name(), "samples": samples, "radii": radii, "points": per_point}),
        checks,
    })
}

/// `cap_p(B̄(0,a), B(0,b))` in `Rⁿ`.
pub fn euclidean_condenser_capacity(n: usize, p: f64, a: f64, b: f64) -> f64 {
    let nf = n as f64;
    let sphere = 2.0 * std::f64::consts::PI.powf(nf / 2.0) / gamma_fn(nf / 2.0);
    if (p - nf).abs() < 1e-12 {
        return sphere / (b / a).ln().powf(nf - 1.0);
    }
    let e = (p - nf) / (p - 1.0);
    sphere * ((p - nf) / (p - 1.0)).abs().powf(p - 1.0) / (b.powf(e) - a.powf(e)).abs().powf(p - 1.0)
}

fn gamma_fn(x: f64) -> f64 {
    // half-integer arguments only
    if (x - x.round()).abs() < 1e-12 {
        (1..x.round() as u64).map(|k| k as f64).product()
    } else {
        let mut v = std::f64::consts::PI.sqrt();
        let mut t = 0.5;
        while t < x - 1e-12 {
            v *= t;
            t += 1.0;
        }
        v
    }
}

fn capacity(cfg: &ExperimentConfig, sys: &VectorFieldSystem) -> Result<Outcome> {
    let shape = cfg.shape.clone().ok_or_else(|| Error::Config("missing shape".into()))?;
    let inner = cfg.inner.unwrap();
    let outer = radius_of(cfg).unwrap();
    let plate_shape = match &shape {
        Shape::Ball { center, .. } => Shape::Ball {
            center: center.clone(),
            radius: inner,
        },
        Shape::GaugeBall { center, .. } => Shape::GaugeBall {
            center: center.clone(),
            radius: inner,
        },
        _ => return Err(Error::Config("capacity needs a ball or gauge_ball shape".into())),
    };
    let group = sys.group().cloned();
    let opts = CapacityOptions::default();
    let hs: Vec<f64> = if cfg.refine { vec![cfg.h, cfg.h / 2.0] } else { vec![cfg.h] };
    let mut rows = Vec::new();
    let mut values = Vec::new();
    for &h in &hs {
        let domain = GridDomain::discretize_masks(&shape, h, sys)?;
        // closed plate
        let plate = Condenser::from_fn(&domain, |x| match (&plate_shape, &group) {
            (Shape::GaugeBall { center, radius }, Some(g)) => {
                g.kaplan_gauge(&g.product(&g.inverse(center), x)) <= *radius
            }
            (Shape::Ball { center, radius }, _) => {
                x.iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() <= radius * radius
            }
            _ => false,
        });
        let res = p_capacity(&domain, &plate, cfg.p, &opts).context(format!("capacity at h = {h}"))?;
        rows.push(vec![
            Cell::Num(h),
            Cell::Num(res.value),
            Cell::Int(res.iterations as u64),
            Cell::Num(res.final_decrement),
        ]);
        values.push(res.value);
    }
    let mut checks = vec![Check::positive("capacity", values[0])];
    let mut details = json!({"p": cfg.p, "inner": inner, "outer": outer, "values": values});
    if sys.is_euclidean() && matches!(shape, Shape::Ball { .. }) {
        let exact = euclidean_condenser_capacity(sys.ambient_dim(), cfg.p, inner, outer);
        details["exact"] = json!(exact);
        checks.push(Check::at_most(
            "relative error against the condenser formula",
            (values[0] - exact).abs() / exact,
            cfg.tolerance.unwrap_or(0.10),
        ));
    }
    if values.len() == 2 {
        checks.push(Check::at_most(
            "refinement change",
            (values[0] - values[1]).abs() / values[1],
            0.15,
        ));
    }
    Ok(Outcome {
        experiment: "capacity".into(),
        header: ["h", "capacity", "iterations", "final_decrement"].map(String::from).to_vec(),
        rows,
        details,
        checks,
    })
}

fn fatness_radii(cfg: &ExperimentConfig, domain: &GridDomain) -> Vec<f64> {
    if cfg.radii.is_empty() {
        default_fatness_radii(domain)
    } else {
        cfg.radii.clone()
    }
}

fn fatness(cfg: &ExperimentConfig, sys: &VectorFieldSystem) -> Result<Outcome> {
    let domain = build_domain(cfg, sys)?;
    let samples = boundary_samples(&domain, cfg.samples.unwrap_or(24));
    let radii = fatness_radii(cfg, &domain);
    let cert = fatness_scan(&domain, cfg.p, &samples, &radii, &CapacityOptions::default())?;
    let rows = cert
        .table
        .iter()
        .map(|r| {
            vec![
                point_text(&r.point),
                Cell::Num(r.r),
                Cell::Num(r.complement_capacity),
                Cell::Num(r.ball_capacity),
                Cell::Num(r.ratio),
            ]
        })
        .collect();
    Ok(Outcome {
        experiment: "fatness".into(),
        header: ["point", "r", "complement_capacity", "ball_capacity", "ratio"].map(String::from).to_vec(),
        rows,
        details: json!({"p": cert.p, "c0": cert.c0, "r0": cert.r0, "radii": radii}),
        checks: vec![Check::positive("fatness constant c0", cert.c0)],
    })
}

fn whitney_exp(cfg: &ExperimentConfig, sys: &VectorFieldSystem) -> Result<Outcome> {
    let domain = build_domain(cfg, sys)?;
    let oracle = default_oracle(sys);
    let opts = WhitneyOptions::default();
    let dec = whitney(&domain, oracle.as_ref(), &opts)?;
    let verdict = verify_whitney(&domain, oracle.as_ref(), &dec, &opts);
    let rows = dec
        .balls
        .iter()
        .map(|b| vec![point_text(&b.center), Cell::Num(b.radius), Cell::Num(b.boundary_distance)])
        .collect();
    let (pass, overlap, detail) = match &verdict {
        Ok(m) => (true, *m as f64, String::new()),
        Err(e) => (false, f64::NAN, e.to_string()),
    };
    Ok(Outcome {
        experiment: "whitney".into(),
        header: ["center", "radius", "boundary_distance"].map(String::from).to_vec(),
        rows,
        details: json!({"balls": dec.balls.len(), "lambda": dec.lambda, "overlap": dec.overlap, "violation": detail}),
        checks: vec![Check {
            name: "clauses (a)-(d)".into(),
            value: overlap,
            bound: Some(opts.max_overlap as f64),
            pass,
        }],
    })
}

fn surrogate(cfg: &ExperimentConfig, sys: &VectorFieldSystem, domain: &GridDomain) -> Result<VolumeSurrogate> {
    let c = center_of(cfg, sys.ambient_dim());
    let basis = basis_for(sys, &[c.clone()])?;
    let r = (domain.diameter() / 8.0).min(sys.r0());
    VolumeSurrogate::fit(sys, basis, &c, r, 20_000, cfg.seed)
}

fn thickness_rows(rep: &crate::cover::ThicknessReport) -> Vec<Vec<Cell>> {
    rep.rows_iii
        .iter()
        .map(|r| (r, "iii"))
        .chain(rep.rows_iv.iter().map(|r| (r, "iv")))
        .map(|(r, kind)| {
            vec![
                Cell::Text(kind.into()),
                point_text(&r.point),
                Cell::Num(r.radius),
                Cell::Num(r.content),
                Cell::Num(r.score),
            ]
        })
        .collect()
}

fn content(cfg: &ExperimentConfig, sys: &VectorFieldSystem) -> Result<Outcome> {
    let domain = build_domain(cfg, sys)?;
    let oracle = default_oracle(sys);
    let vol = surrogate(cfg, sys, &domain)?;
    let count = cfg.samples.unwrap_or(6);
    let interior = interior_samples(&domain, oracle.as_ref(), count, sys.r0(), cfg.seed);
    let boundary = boundary_samples(&domain, count);
    let radii = fatness_radii(cfg, &domain);
    let q = cfg.q.unwrap();
    let rep = thickness_report(&domain, oracle.as_ref(), &vol, q, &interior, &boundary, &radii, &ContentOptions::default())?;
    Ok(Outcome {
        experiment: "content".into(),
        header: ["condition", "point", "radius", "content", "score"].map(String::from).to_vec(),
        rows: thickness_rows(&rep),
        details: json!({"q": q, "score_iii": rep.score_iii, "score_iv": rep.score_iv, "volume_constant": vol.constant}),
        checks: vec![
            Check::positive("interior thickness score (iii)", rep.score_iii),
            Check::positive("boundary thickness score (iv)", rep.score_iv),
        ],
    })
}

fn weight_spec(cfg: &ExperimentConfig, n: usize) -> WeightSpec {
    let x0 = cfg.x0.clone().unwrap_or_else(|| center_of(cfg, n));
    match cfg.weight.as_str() {
        "point" => WeightSpec::PointPower {
            x0,
            exponent: cfg.exponent.unwrap_or(cfg.p),
        },
        "mixed" => WeightSpec::Mixed {
            p: cfg.p,
            gamma: cfg.gamma.unwrap_or(0.0),
            x0,
        },
        "gauge_sharp" => WeightSpec::GaugeSharp { x0, p: cfg.p },
        "gauge_corollary" => WeightSpec::GaugeCorollary { x0, p: cfg.p },
        _ => WeightSpec::BoundaryPower {
            exponent: cfg.exponent.unwrap_or(cfg.p),
        },
    }
}

fn hardy_exp(cfg: &ExperimentConfig, sys: &VectorFieldSystem) -> Result<Outcome> {
    let domain = build_domain(cfg, sys)?;
    let oracle = default_oracle(sys);
    let weight = weight_spec(cfg, sys.ambient_dim());
    let opts = MaximizeOptions::default();
    let mut checks = Vec::new();
    let mut details = json!({"weight": weight.label(), "p": cfg.p, "h": cfg.h});
    match maximize_ratio(&domain, &weight, cfg.p, oracle.as_ref(), &opts) {
        Ok(rep) => {
            details["best_ratio"] = json!(rep.best_ratio);
            details["family_ratio"] = json!(rep.family_ratio);
            details["grid_ratio"] = json!(rep.grid_ratio);
            details["bound"] = json!(rep.bound);
            details["margin"] = json!(rep.margin);
            match rep.bound {
                Some(b) => checks.push(Check::at_most("best_ratio", rep.best_ratio, b * (1.0 + opts.tol_report))),
                None => checks.push(Check::finite("best_ratio", rep.best_ratio)),
            }
        }
        Err(Error::AnomalousExcess { ratio, bound, tolerance }) => {
            details["best_ratio"] = json!(ratio);
            details["bound"] = json!(bound);
            checks.push(Check::at_most("best_ratio", ratio, bound * (1.0 + tolerance)));
        }
        Err(e) => return Err(e),
    }
    let mut rows = Vec::new();
    if cfg.trace {
        let dec = whitney(&domain, oracle.as_ref(), &WhitneyOptions::default())?;
        let wf = weight_field(&domain, &weight, oracle.as_ref())?;
        let mz = mazya_check(&domain, &wf, cfg.p, &dec, oracle.as_ref(), 8, &CapacityOptions::default())?;
        let s = cfg.s.unwrap_or(1.5);
        let fp = fefferman_phong(&domain, &wf, s, cfg.p, &dec, oracle.as_ref(), 12, 2)?;
        rows.push(vec![Cell::Text("mazya".into()), Cell::Num(mz.estimate)]);
        rows.push(vec![Cell::Text("fefferman_phong".into()), Cell::Num(fp.supremum)]);
        details["mazya"] = json!(mz);
        details["fefferman_phong"] = json!(fp);
        checks.push(Check::finite("mazya estimate", mz.estimate));
        checks.push(Check::finite("fefferman-phong supremum", fp.supremum));
    }
    rows.insert(0, vec![Cell::Text("best_ratio".into()), Cell::Num(details["best_ratio"].as_f64().unwrap_or(f64::NAN))]);
    Ok(Outcome {
        experiment: "hardy".into(),
        header: ["quantity", "value"].map(String::from).to_vec(),
        rows,
        details,
        checks,
    })
}

fn sharp(cfg: &ExperimentConfig, sys: &VectorFieldSystem) -> Result<Outcome> {
    let group = sys
        .group()
        .ok_or_else(|| Error::Config("sharp needs an H-type system".into()))?;
    let radius = radius_of(cfg).unwrap_or(1.0);
    let rep = sharp_experiment(group, cfg.p, radius, cfg.h, &MaximizeOptions::default())?;
    let mut rows = Vec::new();
    let mut checks = Vec::new();
    for r in [&rep.theorem, &rep.corollary] {
        let bound = r.bound.unwrap();
        rows.push(vec![Cell::Text(r.weight.clone()), Cell::Num(r.best_ratio), Cell::Num(bound)]);
        checks.push(Check::at_most(format!("{} ratio", r.weight), r.best_ratio, bound * 1.05));
    }
    checks.push(Check::at_most("log-derivative identity", rep.log_derivative_defect, 1e-12));
    checks.push(Check::at_most("bound consistency", rep.bound_defect, 1e-12));
    checks.push(Check::at_most("radial reduction", rep.reduction_defect, 0.03));
    Ok(Outcome {
        experiment: "sharp".into(),
        header: ["weight", "best_ratio", "bound"].map(String::from).to_vec(),
        rows,
        details: json!({
            "p": cfg.p,
            "radius": radius,
            "homogeneous_dimension": group.homogeneous_dim(),
            "log_derivative_defect": rep.log_derivative_defect,
            "bound_defect": rep.bound_defect,
            "density_exponent": rep.density_exponent,
            "reduction_defect": rep.reduction_defect,
        }),
        checks,
    })
}

fn chain(cfg: &ExperimentConfig, sys: &VectorFieldSystem) -> Result<Outcome> {
    let domain = build_domain(cfg, sys)?;
    let oracle = default_oracle(sys);
    let count = cfg.samples.unwrap_or(6);
    let opts = CapacityOptions::default();
    let samples = boundary_samples(&domain, count);
    let radii = fatness_radii(cfg, &domain);
    let cert = fatness_scan(&domain, cfg.p, &samples, &radii, &opts)?;
    let qs = if cfg.qs.is_empty() {
        vec![1.2, 1.5, 1.8]
    } else {
        cfg.qs.clone()
    };
    let improve = self_improvement(&domain, cfg.p, &qs, &samples, &radii[..1], &opts)?;
    let q = cfg.q.or(improve.smallest_q).unwrap_or(cfg.p);
    let interior = interior_samples(&domain, oracle.as_ref(), count, sys.r0(), cfg.seed);
    let bumps = random_bumps(&domain, 20, cfg.seed);
    let pw = pointwise_constant(&domain, oracle.as_ref(), q, &bumps, &interior)?;
    let vol = surrogate(cfg, sys, &domain)?;
    let thick = thickness_report(&domain, oracle.as_ref(), &vol, q, &interior, &samples, &radii, &ContentOptions::default())?;
    let mut rows = vec![
        vec![Cell::Text("fatness_c0".into()), Cell::Num(cert.c0)],
        vec![Cell::Text("pointwise_constant".into()), Cell::Num(pw.constant)],
        vec![Cell::Text("score_iii".into()), Cell::Num(thick.score_iii)],
        vec![Cell::Text("score_iv".into()), Cell::Num(thick.score_iv)],
    ];
    for (qq, c) in &improve.table {
        rows.push(vec![Cell::Text(format!("c(q={})", fmt_f64(*qq))), Cell::Num(*c)]);
    }
    let smallest = improve.smallest_q.unwrap_or(f64::INFINITY);
    Ok(Outcome {
        experiment: "chain".into(),
        header: ["quantity", "value"].map(String::from).to_vec(),
        rows,
        details: json!({
            "p": cfg.p,
            "q": q,
            "fatness": cert,
            "self_improvement": improve,
            "pointwise": pw,
            "thickness": {"q": thick.q, "score_iii": thick.score_iii, "score_iv": thick.score_iv},
        }),
        checks: vec![
            Check::positive("fatness constant c0", cert.c0),
            Check::positive("pointwise constant", pw.constant),
            Check::positive("thickness score (iii)", thick.score_iii),
            Check::positive("thickness score (iv)", thick.score_iv),
            Check::at_least("self-improvement gap p - q", cfg.p - smallest, f64::MIN_POSITIVE),
        ],
    })
}

/// Runs the configured experiment.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Outcome> {
    let sys = build_system(cfg)?;
    let out = match cfg.experiment.as_str() {
        "volumes" => volumes(cfg, &sys),
        "capacity" => capacity(cfg, &sys),
        "fatness" => fatness(cfg, &sys),
        "whitney" => whitney_exp(cfg, &sys),
        "content" => content(cfg, &sys),
        "hardy" => hardy_exp(cfg, &sys),
        "sharp" => sharp(cfg, &sys),
        "chain" => chain(cfg, &sys),
        other => Err(Error::Config(format!("unknown experiment `{other}`"))),
    };
    out.context(format!("experiment `{}`", cfg.experiment))
}

/// JSON with every float at 17 significant digits.
struct FixedFloats;

impl serde_json::ser::Formatter for FixedFloats {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()> {
        writer.write_all(format!("{value:.16e}").as_bytes())
    }
}

pub fn to_json(value: &Value) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, FixedFloats);
    value.serialize(&mut ser)?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("JSON is UTF-8"))
}

pub fn to_csv(outcome: &Outcome) -> String {
    let mut s = outcome.header.join(",");
    s.push('\n');
    for row in &outcome.rows {
        s.push_str(&row.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(","));
        s.push('\n');
    }
    s
}

pub fn summary(outcome: &Outcome) -> String {
    let mut s = format!("experiment: {}\n", outcome.experiment);
    for c in &outcome.checks {
        let bound = c.bound.map_or("-".to_string(), fmt_f64);
        s.push_str(&format!(
            "{} {}: value {} bound {}\n",
            if c.pass { "PASS" } else { "FAIL" },
            c.name,
            fmt_f64(c.value),
            bound
        ));
    }
    if let Some(b) = outcome.details.get("best_ratio").and_then(Value::as_f64) {
        s.push_str(&format!("best_ratio {}\n", fmt_f64(b)));
    }
    s.push_str(if outcome.passed() { "result: pass\n" } else { "result: fail\n" });
    s
}

/// Writes manifest.json, `<experiment>.csv`, `<experiment>.json` and
/// summary.txt into `dir`.
pub fn write_artifacts(cfg: &ExperimentConfig, outcome: &Outcome, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = json!({
        "tool": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "experiment": outcome.experiment,
        "seed": cfg.seed,
        "inputs": cfg.entries,
        "checks": outcome.checks,
        "pass": outcome.passed(),
    });
    fs::write(dir.join("manifest.json"), to_json(&manifest)?)?;
    fs::write(dir.join(format!("{}.csv", outcome.experiment)), to_csv(outcome))?;
    fs::write(dir.join(format!("{}.json", outcome.experiment)), to_json(&outcome.details)?)?;
    fs::write(dir.join("summary.txt"), summary(outcome))?;
    Ok(())
}

#[derive(clap::Parser, Debug)]
#[command(name = "cc-hardy", version, about = "Hardy-inequality experiments on Carnot-Caratheodory spaces")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Output directory (overrides the config's `output`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Seed (overrides the config's `seed`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(clap::Subcommand, Debug)]
pub enum Command {
    /// Run the experiment described by a config file.
    Run { config: PathBuf },
    /// Check a config file and list its problems.
    Validate { config: PathBuf },
    /// List the built-in vector-field systems.
    ListSystems,
}

/// Entry point behind the binary; returns the process exit code.
pub fn main_with(cli: Cli) -> i32 {
    if let Some(t) = cli.threads {
        // a second initialization only fails if a pool already exists
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t.max(1)).build_global();
    }
    match cli.command {
        Command::ListSystems => {
            for name in VectorFieldSystem::builtin_names() {
                println!("{name}");
            }
            0
        }
        Command::Validate { config } => match validate(&config) {
            Ok(d) if d.is_empty() => {
                println!("ok");
                0
            }
            Ok(d) => {
                for x in d {
                    println!("{x}");
                }
                1
            }
            Err(e) => {
                eprintln!("error: {e}");
                2
            }
        },
        Command::Run { config } => {
            let mut cfg = match load(&config) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("error: {e}");
                    return 2;
                }
            };
            if let Some(s) = cli.seed {
                cfg.seed = s;
                cfg.entries.insert("seed".into(), s.to_string());
            }
            let dir = cli.out.or_else(|| cfg.output.clone()).unwrap_or_else(|| PathBuf::from("out"));
            let outcome = match run_experiment(&cfg) {
                Ok(o) => o,
                Err(e) => {
                    eprintln!("error: {e}");
                    return 2;
                }
            };
            if let Err(e) = write_artifacts(&cfg, &outcome, &dir) {
                eprintln!("error: {e}");
                return 2;
            }
            print!("{}", summary(&outcome));
            if outcome.passed() {
                0
            } else {
                1
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> (Option<ExperimentConfig>, Vec<Diagnostic>) {
        parse_config(text, Path::new("."))
    }

    #[test]
    fn valid_config_has_no_diagnostics() {
        let (cfg, d) = parse("experiment = hardy\nsystem = euclidean3\nshape = ball\nradius = 1\nh = 0.125\np = 2\nweight = point\n");
        assert!(d.is_empty(), "{d:?}");
        let cfg = cfg.unwrap();
        assert_eq!(cfg.experiment, "hardy");
        assert!(matches!(cfg.shape, Some(Shape::Ball { .. })));
    }

    #[test]
    fn unknown_key_is_rejected_with_its_line() {
        let (cfg, d) = parse("experiment = whitney\nsystem = euclidean3\ncolour = blue\n");
        assert!(cfg.is_none());
        assert!(d.iter().any(|x| x.line == 3 && x.key == "colour"));
    }

    #[test]
    fn gamma_above_p_is_a_range_diagnostic() {
        let (_, d) = parse("experiment = hardy\nsystem = euclidean3\nshape = ball\nradius = 1\nh = 0.1\np = 2\ngamma = 3\nweight = mixed\n");
        let g: Vec<_> = d.iter().filter(|x| x.key == "gamma").collect();
        assert_eq!(g.len(), 1);
        assert!(g[0].message.contains("0 <= gamma <= p"), "{}", g[0].message);
        assert_eq!(g[0].line, 7);
    }

    #[test]
    fn missing_system_is_reported() {
        let (_, d) = parse("experiment = volumes\n");
        assert!(d.iter().any(|x| x.key == "system" && x.line == 0));
        let (_, d) = parse("experiment = volumes\nsystem = nowhere\n");
        assert!(d.iter().any(|x| x.key == "system" && x.line == 2));
    }

    #[test]
    fn bad_values_are_reported() {
        let (_, d) = parse("experiment = capacity\nsystem = euclidean3\nshape = ball\nradius = 1\ninner = 2\nh = -1\np = 0.5\nq = 3\n");
        for key in ["inner", "h", "p", "q"] {
            assert!(d.iter().any(|x| x.key == key), "{key}: {d:?}");
        }
    }

    #[test]
    fn floats_use_seventeen_digits() {
        assert_eq!(fmt_f64(0.1), "1.0000000000000001e-1");
        let s = to_json(&json!({"a": 0.1, "b": [1.0, 2]})).unwrap();
        assert_eq!(s, "{\"a\":1.0000000000000001e-1,\"b\":[1.0000000000000000e0,2]}\n");
        let back: Value = serde_json::from_str(&s).unwrap();
        assert_eq!(back["a"].as_f64(), Some(0.1));
    }

    #[test]
    fn condenser_formula() {
        let v = euclidean_condenser_capacity(3, 2.0, 1.0, 2.0);
        assert!((v - 8.0 * std::f64::consts::PI).abs() < 1e-12);
        // p = n: ω (log(b/a))^{1-n}
        let w = euclidean_condenser_capacity(2, 2.0, 1.0, std::f64::consts::E);
        assert!((w - 2.0 * std::f64::consts::PI).abs() < 1e-12);
        assert!((gamma_fn(2.5) - 1.329_340_388_179_137).abs() < 1e-12);
    }

    #[test]
    fn whitney_run_writes_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let (cfg, d) = parse("experiment = whitney\nsystem = euclidean3\nshape = cube\nradius = 1\nh = 0.25\n");
        assert!(d.is_empty(), "{d:?}");
        let cfg = cfg.unwrap();
        let out = run_experiment(&cfg).unwrap();
        assert!(out.passed(), "{:?}", out.checks);
        write_artifacts(&cfg, &out, dir.path()).unwrap();
        for f in ["manifest.json", "whitney.csv", "whitney.json", "summary.txt"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let m: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
        assert_eq!(m["pass"], Value::Bool(true));
    }
}
