//! Run configuration.
//!
//! A configuration is a TOML document. Every key is optional except the ones
//! under `[system]`; unknown keys are errors.
//!
//! ```toml
//! name = "cat_over_rotation"       # free text, echoed in reports
//! seed = 7                         # u64, overridden by --seed
//!
//! [system]
//! fibre_dim = 2                    # 1..=10
//! base_dim = 1                     # 1..=10
//! matrix = [[2, 1], [1, 1]]        # fibre_dim rows of integers, |det| = 1
//!
//! [system.base]
//! kind = "translation"             # translation | automorphism | composite
//! alpha = [0.41421356237309515]    # translation and composite
//! # matrix = [[1, 1], [1, 2]]      # automorphism and composite
//!
//! [[system.translation]]           # terms of v(b), inputs b
//! freq = [1]
//! cos = [0.0, 0.1]                 # fibre_dim entries, default zeros
//! sin = [0.0, 0.0]
//!
//! [[system.perturbation]]          # terms of p(b, x), inputs (b, x)
//! freq = [0, 1, 0]
//! sin = [0.05, 0.0]
//!
//! [model]                          # affine model G, defaults to the system's own
//! matrix = [[2, 1], [1, 1]]
//! # [[model.translation]] terms as above
//!
//! [certify]
//! gamma = 0.5
//! steps = 1
//! grid = 64                        # points per axis of T^(k+d)
//! # stable_dim = 1                 # only used when the matrix is not hyperbolic
//!
//! [conjugate]
//! tol = 1e-6
//! grid = 16
//! samples = 1000
//! injectivity_fibres = 20
//! injectivity_pairs = 50
//!
//! [leaves]
//! radius = 2.0
//! depth = 30
//! fibres = 20
//! stable_anchors = 5
//! unstable_anchors = 4
//!
//! [sweep]
//! epsilons = [0.01, 0.02, 0.05]    # sup bounds the perturbation is rescaled to
//! ```
//!
//! A trigonometric term `{freq, cos, sin}` contributes
//! `cos * cos(2 pi freq.z) + sin * sin(2 pi freq.z)`.

use std::fmt;

use serde::Serialize;
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::linear::{is_hyperbolic, AffineModel, IntegerMatrix};
use crate::system::{BaseSystem, FibrewiseSystem, TrigPolynomial, TrigTerm};
use crate::torus::Grid;

pub const MAX_DIM: usize = 10;
pub const MAX_TERMS: usize = 256;
pub const MAX_FREQUENCY: i64 = 64;
pub const MAX_MATRIX_ENTRY: i64 = 1000;
pub const MAX_CERTIFY_POINTS: usize = 1 << 22;
pub const MAX_CONJUGATE_POINTS: usize = 1 << 18;
pub const MAX_SAMPLES: usize = 1_000_000;
pub const MAX_DEPTH: usize = 200;
pub const MAX_STEPS: usize = 20;
/// Points per run of the load-time invertibility scan.
const DIFFEO_SCAN_POINTS: usize = 4096;
/// Gap below which an eigenvalue modulus counts as 1.
pub const HYPERBOLICITY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CertifySettings {
    pub gamma: f64,
    pub steps: usize,
    pub grid: usize,
    pub stable_dim: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConjugateSettings {
    pub tol: f64,
    pub grid: usize,
    pub samples: usize,
    pub injectivity_fibres: usize,
    pub injectivity_pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LeavesSettings {
    pub radius: f64,
    pub depth: usize,
    pub fibres: usize,
    pub stable_anchors: usize,
    pub unstable_anchors: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepSettings {
    pub epsilons: Vec<f64>,
}

/// Analyses that need more than a unimodular matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Requirement {
    None,
    Hyperbolic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SystemConfig {
    pub name: String,
    /// Hex SHA-256 of the configuration text.
    pub digest: String,
    pub seed: u64,
    pub system: FibrewiseSystem,
    pub model: AffineModel,
    /// Whether `[model]` was given explicitly.
    pub explicit_model: bool,
    pub certify: CertifySettings,
    pub conjugate: ConjugateSettings,
    pub leaves: LeavesSettings,
    pub sweep: SweepSettings,
}

impl SystemConfig {
    pub fn fibre_dim(&self) -> usize {
        self.system.fibre_dim()
    }

    pub fn base_dim(&self) -> usize {
        self.system.base_dim()
    }

    pub fn certify_grid(&self) -> Result<Grid> {
        Grid::uniform(self.base_dim() + self.fibre_dim(), self.certify.grid)
    }

    pub fn conjugate_grid(&self) -> Result<Grid> {
        Grid::uniform(self.base_dim() + self.fibre_dim(), self.conjugate.grid)
    }

    /// Rejects configurations an analysis cannot run on.
    pub fn require(&self, requirement: Requirement, command: &str) -> Result<()> {
        if requirement == Requirement::None {
            return Ok(());
        }
        let mut errors = Vec::new();
        for (path, m) in [("system.matrix", self.system.matrix()), ("model.matrix", self.model.matrix())] {
            if path == "model.matrix" && !self.explicit_model {
                continue;
            }
            match is_hyperbolic(m, HYPERBOLICITY_TOL) {
                Ok(w) if w.hyperbolic => {}
                Ok(w) => errors.push(ConfigError {
                    path: path.into(),
                    message: format!(
                        "matrix is not hyperbolic (an eigenvalue has modulus within {:e} of 1), `{command}` needs a hyperbolic matrix",
                        w.min_gap
                    ),
                }),
                Err(e) => errors.push(ConfigError {
                    path: path.into(),
                    message: e.to_string(),
                }),
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errors))
        }
    }
}

struct Parser {
    errors: Vec<ConfigError>,
}

fn join(path: &str, key: &str) -> String {
    if path.is_empty() {
        key.to_string()
    } else {
        format!("{path}.{key}")
    }
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::String(_) => "string",
        Value::Integer(_) => "integer",
        Value::Float(_) => "float",
        Value::Boolean(_) => "boolean",
        Value::Datetime(_) => "datetime",
        Value::Array(_) => "array",
        Value::Table(_) => "table",
    }
}

impl Parser {
    fn error(&mut self, path: impl Into<String>, message: impl Into<String>) {
        self.errors.push(ConfigError {
            path: path.into(),
            message: message.into(),
        });
    }

    fn check_keys(&mut self, table: &Table, path: &str, allowed: &[&str]) {
        for key in table.keys() {
            if !allowed.contains(&key.as_str()) {
                self.error(join(path, key), "unknown key");
            }
        }
    }

    fn table<'a>(&mut self, parent: &'a Table, path: &str, key: &str) -> Option<&'a Table> {
        match parent.get(key) {
            None => None,
            Some(Value::Table(t)) => Some(t),
            Some(v) => {
                self.error(join(path, key), format!("expected a table, found {}", type_name(v)));
                None
            }
        }
    }

    fn integer(&mut self, v: &Value, path: &str) -> Option<i64> {
        match v {
            Value::Integer(i) => Some(*i),
            other => {
                self.error(path, format!("expected an integer, found {}", type_name(other)));
                None
            }
        }
    }

    fn real(&mut self, v: &Value, path: &str) -> Option<f64> {
        let x = match v {
            Value::Integer(i) => *i as f64,
            Value::Float(f) => *f,
            other => {
                self.error(path, format!("expected a number, found {}", type_name(other)));
                return None;
            }
        };
        if x.is_finite() {
            Some(x)
        } else {
            self.error(path, "must be finite");
            None
        }
    }

    fn count(&mut self, table: &Table, path: &str, key: &str, default: usize, range: (usize, usize)) -> usize {
        let Some(v) = table.get(key) else {
            return default;
        };
        let p = join(path, key);
        match self.integer(v, &p) {
            Some(i) if i >= range.0 as i64 && i <= range.1 as i64 => i as usize,
            Some(i) => {
                self.error(p, format!("{i} is outside {}..={}", range.0, range.1));
                default
            }
            None => default,
        }
    }

    fn positive(&mut self, table: &Table, path: &str, key: &str, default: f64, max: f64) -> f64 {
        let Some(v) = table.get(key) else {
            return default;
        };
        let p = join(path, key);
        match self.real(v, &p) {
            Some(x) if x > 0.0 && x <= max => x,
            Some(x) => {
                self.error(p, format!("{x} is outside (0, {max}]"));
                default
            }
            None => default,
        }
    }

    fn reals(&mut self, v: &Value, path: &str, len: Option<usize>) -> Option<Vec<f64>> {
        let Value::Array(items) = v else {
            self.error(path, format!("expected an array of numbers, found {}", type_name(v)));
            return None;
        };
        if let Some(n) = len {
            if items.len() != n {
                self.error(path, format!("expected {n} entries, found {}", items.len()));
                return None;
            }
        }
        let before = self.errors.len();
        let out: Vec<f64> = items
            .iter()
            .enumerate()
            .map(|(i, x)| self.real(x, &format!("{path}[{i}]")).unwrap_or(0.0))
            .collect();
        (self.errors.len() == before).then_some(out)
    }

    fn matrix(&mut self, v: &Value, path: &str, dim: Option<usize>) -> Option<IntegerMatrix> {
        let Value::Array(rows) = v else {
            self.error(path, format!("expected an array of integer rows, found {}", type_name(v)));
            return None;
        };
        let n = dim.unwrap_or(rows.len());
        if rows.len() != n {
            self.error(path, format!("expected {n} rows, found {}", rows.len()));
            return None;
        }
        if n == 0 || n > MAX_DIM {
            self.error(path, format!("matrix size {n} is outside 1..={MAX_DIM}"));
            return None;
        }
        let before = self.errors.len();
        let mut entries = Vec::with_capacity(n * n);
        for (i, row) in rows.iter().enumerate() {
            let rp = format!("{path}[{i}]");
            let Value::Array(row) = row else {
                self.error(rp, format!("expected a row of integers, found {}", type_name(row)));
                continue;
            };
            if row.len() != n {
                self.error(rp, format!("expected {n} entries, found {}", row.len()));
                continue;
            }
            for (j, x) in row.iter().enumerate() {
                let ep = format!("{path}[{i}][{j}]");
                match x {
                    Value::Integer(a) if a.abs() <= MAX_MATRIX_ENTRY => entries.push(*a),
                    Value::Integer(a) => self.error(ep, format!("entry {a} exceeds {MAX_MATRIX_ENTRY} in magnitude")),
                    Value::Float(f) => self.error(ep, format!("non-integer matrix entry {f}")),
                    other => self.error(ep, format!("expected an integer, found {}", type_name(other))),
                }
            }
        }
        if self.errors.len() != before {
            return None;
        }
        let m = match IntegerMatrix::new(n, entries) {
            Ok(m) => m,
            Err(e) => {
                self.error(path, e.to_string());
                return None;
            }
        };
        match m.determinant() {
            Ok(det) if det.abs() == 1 => Some(m),
            Ok(det) => {
                self.error(path, format!("determinant is {det}, expected +1 or -1"));
                None
            }
            Err(e) => {
                self.error(path, e.to_string());
                None
            }
        }
    }

    fn terms(&mut self, parent: &Table, path: &str, key: &str, dim_in: usize, dim_out: usize) -> Option<TrigPolynomial> {
        let p = join(path, key);
        let items = match parent.get(key) {
            None => return Some(TrigPolynomial::zero(dim_in, dim_out)),
            Some(Value::Array(items)) => items,
            Some(v) => {
                self.error(p, format!("expected an array of term tables, found {}", type_name(v)));
                return None;
            }
        };
        if items.len() > MAX_TERMS {
            self.error(&p, format!("{} terms exceed the limit of {MAX_TERMS}", items.len()));
            return None;
        }
        let before = self.errors.len();
        let mut terms = Vec::with_capacity(items.len());
        for (i, item) in items.iter().enumerate() {
            let tp = format!("{p}[{i}]");
            let Value::Table(t) = item else {
                self.error(tp, format!("expected a term table, found {}", type_name(item)));
                continue;
            };
            self.check_keys(t, &tp, &["freq", "cos", "sin"]);
            let freq = match t.get("freq") {
                None => {
                    self.error(join(&tp, "freq"), "missing");
                    None
                }
                Some(Value::Array(f)) if f.len() == dim_in => {
                    let mut out = Vec::with_capacity(dim_in);
                    for (j, x) in f.iter().enumerate() {
                        let fp = format!("{tp}.freq[{j}]");
                        match self.integer(x, &fp) {
                            Some(k) if k.abs() <= MAX_FREQUENCY => out.push(k),
                            Some(k) => self.error(fp, format!("frequency {k} exceeds {MAX_FREQUENCY} in magnitude")),
                            None => {}
                        }
                    }
                    (out.len() == dim_in).then_some(out)
                }
                Some(Value::Array(f)) => {
                    self.error(join(&tp, "freq"), format!("expected {dim_in} entries, found {}", f.len()));
                    None
                }
                Some(v) => {
                    self.error(join(&tp, "freq"), format!("expected an array of integers, found {}", type_name(v)));
                    None
                }
            };
            let mut coeff = |name: &str| match t.get(name) {
                None => Some(vec![0.0; dim_out]),
                Some(v) => self.reals(v, &join(&tp, name), Some(dim_out)),
            };
            let cos = coeff("cos");
            let sin = coeff("sin");
            if let (Some(freq), Some(cos), Some(sin)) = (freq, cos, sin) {
                terms.push(TrigTerm { freq, cos, sin });
            }
        }
        if self.errors.len() != before {
            return None;
        }
        match TrigPolynomial::new(dim_in, dim_out, terms) {
            Ok(t) => Some(t),
            Err(e) => {
                self.error(p, e.to_string());
                None
            }
        }
    }

    fn base(&mut self, system: &Table, k: Option<usize>) -> Option<BaseSystem> {
        let path = "system.base";
        let Some(t) = self.table(system, "system", "base") else {
            if !system.contains_key("base") {
                self.error(path, "missing");
            }
            return None;
        };
        self.check_keys(t, path, &["kind", "alpha", "matrix"]);
        let kind = match t.get("kind") {
            Some(Value::String(s)) => s.as_str(),
            Some(v) => {
                self.error(join(path, "kind"), format!("expected a string, found {}", type_name(v)));
                return None;
            }
            None => {
                self.error(join(path, "kind"), "missing");
                return None;
            }
        };
        let (wants_alpha, wants_matrix) = match kind {
            "translation" => (true, false),
            "automorphism" => (false, true),
            "composite" => (true, true),
            other => {
                self.error(
                    join(path, "kind"),
                    format!("unknown base kind `{other}`, expected translation, automorphism or composite"),
                );
                return None;
            }
        };
        let k = k?;
        let alpha = match (wants_alpha, t.get("alpha")) {
            (true, Some(v)) => self.reals(v, &join(path, "alpha"), Some(k)),
            (true, None) => {
                self.error(join(path, "alpha"), format!("missing, required by kind `{kind}`"));
                None
            }
            (false, Some(_)) => {
                self.error(join(path, "alpha"), format!("not used by kind `{kind}`"));
                None
            }
            (false, None) => Some(Vec::new()),
        };
        let matrix = match (wants_matrix, t.get("matrix")) {
            (true, Some(v)) => self.matrix(v, &join(path, "matrix"), Some(k)),
            (true, None) => {
                self.error(join(path, "matrix"), format!("missing, required by kind `{kind}`"));
                None
            }
            (false, Some(_)) => {
                self.error(join(path, "matrix"), format!("not used by kind `{kind}`"));
                None
            }
            (false, None) => Some(IntegerMatrix::identity(k)),
        };
        let (alpha, matrix) = (alpha?, matrix?);
        let built = match kind {
            "translation" => Ok(BaseSystem::translation(alpha)),
            "automorphism" => BaseSystem::automorphism(matrix),
            _ => BaseSystem::composite(matrix, alpha),
        };
        match built {
            Ok(b) => Some(b),
            Err(e) => {
                self.error(path, e.to_string());
                None
            }
        }
    }

    fn dim(&mut self, system: &Table, key: &str) -> Option<usize> {
        let p = join("system", key);
        match system.get(key) {
            None => {
                self.error(p, "missing");
                None
            }
            Some(v) => match self.integer(v, &p) {
                Some(n) if (1..=MAX_DIM as i64).contains(&n) => Some(n as usize),
                Some(n) => {
                    self.error(p, format!("{n} is outside 1..={MAX_DIM}"));
                    None
                }
                None => None,
            },
        }
    }

    /// Points per axis: the largest `n <= default_max` within `budget` points
    /// by default, anything up to `cap` points when given.
    fn grid_size(&mut self, table: &Table, path: &str, dim: usize, default_max: usize, budget: usize, cap: usize) -> usize {
        let total = |n: usize| (n as f64).powi(dim as i32);
        let mut default = default_max;
        while default > 2 && total(default) > budget as f64 {
            default -= 1;
        }
        let n = self.count(table, path, "grid", default, (2, 4096));
        if total(n) > cap as f64 {
            self.error(join(path, "grid"), format!("{n}^{dim} grid points exceed the limit of {cap}"));
            return default;
        }
        n
    }
}

/// Smallest `det(A) * det(dF)` over a coarse grid; positive on a local
/// diffeomorphism homotopic to `A`, which then is a diffeomorphism.
pub fn orientation_margin(system: &FibrewiseSystem) -> Result<f64> {
    if system.perturbation().is_zero() {
        return Ok(1.0);
    }
    let dim = system.base_dim() + system.fibre_dim();
    let mut n = 2usize;
    while ((n + 1) as f64).powi(dim as i32) <= DIFFEO_SCAN_POINTS as f64 {
        n += 1;
    }
    let sign = system.matrix().determinant()?.signum() as f64;
    let grid = Grid::uniform(dim, n)?;
    let k = system.base_dim();
    Ok(grid
        .iter()
        .map(|p| {
            let (b, x) = p.coords().split_at(k);
            sign * system.jacobian_at(b, x).determinant()
        })
        .fold(f64::INFINITY, f64::min))
}

pub fn config_digest(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Parses and validates a configuration, reporting every problem found.
pub fn parse_config(text: &str) -> Result<SystemConfig> {
    let root: Table = match text.parse() {
        Ok(t) => t,
        Err(e) => {
            return Err(Error::Config(vec![ConfigError {
                path: "<document>".into(),
                message: e.message().to_string(),
            }]))
        }
    };
    let mut p = Parser { errors: Vec::new() };
    p.check_keys(
        &root,
        "",
        &["name", "seed", "system", "model", "certify", "conjugate", "leaves", "sweep"],
    );
    let name = match root.get("name") {
        None => String::new(),
        Some(Value::String(s)) => s.clone(),
        Some(v) => {
            p.error("name", format!("expected a string, found {}", type_name(v)));
            String::new()
        }
    };
    let seed = match root.get("seed") {
        None => 0,
        Some(v) => match p.integer(v, "seed") {
            Some(s) if s >= 0 => s as u64,
            Some(s) => {
                p.error("seed", format!("{s} is negative"));
                0
            }
            None => 0,
        },
    };

    let empty = Table::new();
    let system_table = match p.table(&root, "", "system") {
        Some(t) => t,
        None => {
            if !root.contains_key("system") {
                p.error("system", "missing");
            }
            &empty
        }
    };
    p.check_keys(
        system_table,
        "system",
        &["fibre_dim", "base_dim", "matrix", "base", "translation", "perturbation"],
    );
    let d = p.dim(system_table, "fibre_dim");
    let k = p.dim(system_table, "base_dim");
    let matrix = match system_table.get("matrix") {
        Some(v) => d.and_then(|d| p.matrix(v, "system.matrix", Some(d))),
        None => {
            p.error("system.matrix", "missing");
            None
        }
    };
    let base = p.base(system_table, k);
    let (translation, perturbation) = match (k, d) {
        (Some(k), Some(d)) => (
            p.terms(system_table, "system", "translation", k, d),
            p.terms(system_table, "system", "perturbation", k + d, d),
        ),
        _ => (None, None),
    };

    let model_table = p.table(&root, "", "model");
    let explicit_model = model_table.is_some();
    let (model_matrix, model_translation) = match model_table {
        None => (matrix.clone(), translation.clone()),
        Some(t) => {
            p.check_keys(t, "model", &["matrix", "translation"]);
            let m = match t.get("matrix") {
                Some(v) => d.and_then(|d| p.matrix(v, "model.matrix", Some(d))),
                None => matrix.clone(),
            };
            let v = match (k, d, t.contains_key("translation")) {
                (Some(k), Some(d), true) => p.terms(t, "model", "translation", k, d),
                (_, _, false) => translation.clone(),
                _ => None,
            };
            (m, v)
        }
    };

    let section = |p: &mut Parser, key: &str, allowed: &[&str]| -> Table {
        match p.table(&root, "", key) {
            Some(t) => {
                p.check_keys(t, key, allowed);
                t.clone()
            }
            None => Table::new(),
        }
    };
    let dim = k.unwrap_or(1) + d.unwrap_or(1);

    let t = section(&mut p, "certify", &["gamma", "steps", "grid", "stable_dim"]);
    let certify = CertifySettings {
        gamma: p.positive(&t, "certify", "gamma", 0.5, 1e3),
        steps: p.count(&t, "certify", "steps", 1, (1, MAX_STEPS)),
        grid: p.grid_size(&t, "certify", dim, 64, 1 << 18, MAX_CERTIFY_POINTS),
        stable_dim: t
            .contains_key("stable_dim")
            .then(|| p.count(&t, "certify", "stable_dim", 1, (1, d.unwrap_or(2).max(2) - 1))),
    };

    let t = section(
        &mut p,
        "conjugate",
        &["tol", "grid", "samples", "injectivity_fibres", "injectivity_pairs"],
    );
    let conjugate = ConjugateSettings {
        tol: p.positive(&t, "conjugate", "tol", 1e-6, 1.0),
        grid: p.grid_size(&t, "conjugate", dim, 16, 1 << 13, MAX_CONJUGATE_POINTS),
        samples: p.count(&t, "conjugate", "samples", 1000, (1, MAX_SAMPLES)),
        injectivity_fibres: p.count(&t, "conjugate", "injectivity_fibres", 20, (1, 1000)),
        injectivity_pairs: p.count(&t, "conjugate", "injectivity_pairs", 50, (1, 10_000)),
    };

    let t = section(
        &mut p,
        "leaves",
        &["radius", "depth", "fibres", "stable_anchors", "unstable_anchors"],
    );
    let leaves = LeavesSettings {
        radius: p.positive(&t, "leaves", "radius", 2.0, crate::leaves::MAX_RADIUS),
        depth: p.count(&t, "leaves", "depth", 30, (1, MAX_DEPTH)),
        fibres: p.count(&t, "leaves", "fibres", 20, (1, 1000)),
        stable_anchors: p.count(&t, "leaves", "stable_anchors", 5, (1, 100)),
        unstable_anchors: p.count(&t, "leaves", "unstable_anchors", 4, (1, 100)),
    };

    let t = section(&mut p, "sweep", &["epsilons"]);
    let epsilons = match t.get("epsilons") {
        None => (1..=10).map(|i| i as f64 / 100.0).collect(),
        Some(v) => match p.reals(v, "sweep.epsilons", None) {
            Some(e) if e.is_empty() => {
                p.error("sweep.epsilons", "must not be empty");
                Vec::new()
            }
            Some(e) if e.len() > 1000 => {
                p.error("sweep.epsilons", "more than 1000 values");
                Vec::new()
            }
            Some(e) => {
                for (i, x) in e.iter().enumerate() {
                    if *x < 0.0 {
                        p.error(format!("sweep.epsilons[{i}]"), format!("{x} is negative"));
                    }
                }
                e
            }
            None => Vec::new(),
        },
    };
    let sweep = SweepSettings { epsilons };

    let (Some(matrix), Some(base), Some(translation), Some(perturbation), Some(model_matrix), Some(model_translation)) =
        (matrix, base, translation, perturbation, model_matrix, model_translation)
    else {
        return Err(Error::Config(p.errors));
    };
    let system = match FibrewiseSystem::new(base.clone(), matrix, translation, perturbation) {
        Ok(s) => Some(s),
        Err(e) => {
            p.error("system", e.to_string());
            None
        }
    };
    let model = match AffineModel::new(model_matrix, model_translation, base) {
        Ok(m) => Some(m),
        Err(e) => {
            p.error("model", e.to_string());
            None
        }
    };
    if let Some(s) = &system {
        match orientation_margin(s) {
            Ok(m) if m > 0.0 => {}
            Ok(m) => p.error(
                "system.perturbation",
                format!("fibre maps are not invertible: det(A) det(dF) reaches {m:.3e} on the scan grid"),
            ),
            Err(e) => p.error("system.perturbation", e.to_string()),
        }
    }
    match (system, model) {
        (Some(system), Some(model)) if p.errors.is_empty() => Ok(SystemConfig {
            name,
            digest: config_digest(text),
            seed,
            system,
            model,
            explicit_model,
            certify,
            conjugate,
            leaves,
            sweep,
        }),
        _ => Err(Error::Config(p.errors)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const CAT: &str = r#"
name = "cat"
[system]
fibre_dim = 2
base_dim = 1
matrix = [[2, 1], [1, 1]]
[system.base]
kind = "translation"
alpha = [0.41421356237309515]
[[system.perturbation]]
freq = [0, 1, 0]
sin = [0.05, 0.0]
"#;

    fn errors(text: &str) -> Vec<ConfigError> {
        match parse_config(text) {
            Err(Error::Config(e)) => e,
            other => panic!("expected config errors, got {other:?}"),
        }
    }

    #[test]
    fn minimal_config_parses_with_defaults() {
        let c = parse_config(CAT).unwrap();
        assert_eq!(c.fibre_dim(), 2);
        assert_eq!(c.base_dim(), 1);
        assert_eq!(c.system.matrix().rows(), vec![vec![2, 1], vec![1, 1]]);
        assert_eq!(c.certify.grid, 64);
        assert_eq!(c.conjugate.grid, 16);
        assert_eq!(c.sweep.epsilons.len(), 10);
        assert!(!c.explicit_model);
        assert_eq!(c.model.matrix(), c.system.matrix());
        assert_eq!(c.system.perturbation_sup(), 0.05);
        assert_eq!(c.digest.len(), 64);
        assert_eq!(c.digest, config_digest(CAT));
        assert_ne!(c.digest, config_digest(&format!("{CAT}\n")));
    }

    #[test]
    fn determinant_is_named() {
        let e = errors(&CAT.replace("[[2, 1], [1, 1]]", "[[2, 0], [0, 1]]"));
        assert_eq!(e.len(), 1);
        assert_eq!(e[0].path, "system.matrix");
        assert!(e[0].message.contains("determinant is 2"), "{}", e[0].message);
    }

    #[test]
    fn identity_is_rejected_for_hyperbolic_commands_only() {
        let c = parse_config(&CAT.replace("[[2, 1], [1, 1]]", "[[1, 0], [0, 1]]")).unwrap();
        assert!(c.require(Requirement::None, "homology").is_ok());
        let Err(Error::Config(e)) = c.require(Requirement::Hyperbolic, "conjugate") else {
            panic!("identity accepted")
        };
        assert!(e[0].message.contains("not hyperbolic"));
        assert!(e[0].message.contains("conjugate"));
    }

    #[test]
    fn all_errors_are_collected() {
        let text = CAT
            .replace("[[2, 1], [1, 1]]", "[[2, 1.5], [1, 1]]")
            .replace("kind = \"translation\"", "kind = \"translation\"\nbogus = 1")
            .replace("freq = [0, 1, 0]", "freq = [0, 1]")
            + "\n[leaves]\nradius = 50.0\n";
        let e = errors(&text);
        let paths: Vec<&str> = e.iter().map(|e| e.path.as_str()).collect();
        assert!(paths.contains(&"system.matrix[0][1]"), "{paths:?}");
        assert!(paths.contains(&"system.base.bogus"), "{paths:?}");
        assert!(paths.contains(&"system.perturbation[0].freq"), "{paths:?}");
        assert!(paths.contains(&"leaves.radius"), "{paths:?}");
        assert!(e.iter().any(|e| e.message.contains("non-integer")));
    }

    #[test]
    fn dimension_mismatches_are_reported() {
        let e = errors(&CAT.replace("[[2, 1], [1, 1]]", "[[2, 1, 0], [1, 1, 0], [0, 0, 1]]"));
        assert_eq!(e[0].path, "system.matrix");
        assert!(e[0].message.contains("expected 2 rows"));
        let e = errors(&CAT.replace("alpha = [0.41421356237309515]", "alpha = [0.1, 0.2]"));
        assert_eq!(e[0].path, "system.base.alpha");
    }

    #[test]
    fn missing_sections_are_reported() {
        let e = errors("");
        assert_eq!(e[0].path, "system");
        let e = errors("[system]\n");
        let paths: Vec<&str> = e.iter().map(|e| e.path.as_str()).collect();
        assert!(paths.contains(&"system.fibre_dim"));
        assert!(paths.contains(&"system.matrix"));
        assert!(paths.contains(&"system.base"));
        let e = errors("not toml ][");
        assert_eq!(e[0].path, "<document>");
    }

    #[test]
    fn dimension_caps() {
        let e = errors(&CAT.replace("fibre_dim = 2", "fibre_dim = 11"));
        assert!(e.iter().any(|e| e.path == "system.fibre_dim"));
        let e = errors(&(CAT.to_string() + "[certify]\ngrid = 4096\n"));
        assert!(e.iter().any(|e| e.path == "certify.grid"));
    }

    #[test]
    fn non_invertible_fibre_maps_are_rejected() {
        let e = errors(&CAT.replace("sin = [0.05, 0.0]", "sin = [0.3, 0.0]"));
        assert_eq!(e[0].path, "system.perturbation");
        assert!(e[0].message.contains("not invertible"));
    }

    #[test]
    fn explicit_model_and_bases() {
        let text = CAT.to_string() + "[model]\nmatrix = [[1, 1], [1, 2]]\n";
        let c = parse_config(&text).unwrap();
        assert!(c.explicit_model);
        assert_eq!(c.model.matrix().rows(), vec![vec![1, 1], vec![1, 2]]);
        let text = CAT
            .replace("base_dim = 1", "base_dim = 2")
            .replace("kind = \"translation\"", "kind = \"automorphism\"")
            .replace("alpha = [0.41421356237309515]", "matrix = [[2, 1], [1, 1]]")
            .replace("freq = [0, 1, 0]", "freq = [0, 0, 1, 0]");
        let c = parse_config(&text).unwrap();
        assert_eq!(c.base_dim(), 2);
        let e = errors(&text.replace("matrix = [[2, 1], [1, 1]]\n[[", "alpha = [0.1, 0.2]\n[["));
        assert!(e.iter().any(|e| e.path == "system.base.matrix"), "{e:?}");
    }
}
