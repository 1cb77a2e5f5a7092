//! Run reports: verdicts, outputs and the serialized form written by the CLI.

use std::fmt::Write as _;

use serde::Serialize;

use crate::cones::ConeCertificate;
use crate::config::ConfigError;
use crate::conjugacy::{ConjugacySummary, InjectivityReport, VerificationReport};
use crate::error::Error;
use crate::leaves::IntersectionStatus;
use crate::linear::HyperbolicityWitness;

pub const EXIT_PASS: i32 = 0;
pub const EXIT_PRECONDITION: i32 = 2;
pub const EXIT_FAIL: i32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Comparison {
    #[serde(rename = "<=")]
    AtMost,
    #[serde(rename = "<")]
    Below,
    #[serde(rename = ">=")]
    AtLeast,
    #[serde(rename = ">")]
    Above,
}

/// A pass/fail check of one reported number against a threshold.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verdict {
    pub name: String,
    pub value: f64,
    pub comparison: Comparison,
    pub threshold: f64,
    pub pass: bool,
}

impl Verdict {
    pub fn new(name: impl Into<String>, value: f64, comparison: Comparison, threshold: f64) -> Self {
        let pass = match comparison {
            Comparison::AtMost => value <= threshold,
            Comparison::Below => value < threshold,
            Comparison::AtLeast => value >= threshold,
            Comparison::Above => value > threshold,
        };
        Self {
            name: name.into(),
            value,
            comparison,
            threshold,
            pass,
        }
    }

    pub fn at_most(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self::new(name, value, Comparison::AtMost, threshold)
    }

    pub fn below(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self::new(name, value, Comparison::Below, threshold)
    }

    pub fn at_least(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self::new(name, value, Comparison::AtLeast, threshold)
    }

    pub fn above(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self::new(name, value, Comparison::Above, threshold)
    }

    fn prefixed(mut self, prefix: &str) -> Self {
        self.name = format!("{prefix}.{}", self.name);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportError {
    pub kind: String,
    pub message: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub fields: Vec<FieldError>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FieldError {
    pub path: String,
    pub message: String,
}

impl From<&ConfigError> for FieldError {
    fn from(e: &ConfigError) -> Self {
        Self {
            path: e.path.clone(),
            message: e.message.clone(),
        }
    }
}

impl From<&Error> for ReportError {
    fn from(e: &Error) -> Self {
        let kind = match e {
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::NotHyperbolic { .. } => "not_hyperbolic",
            Error::EigenSolverFailure { .. } => "eigen_solver_failure",
            Error::NotUnimodular { .. } => "not_unimodular",
            Error::IntegerOverflow(_) => "integer_overflow",
            Error::InversionFailed { .. } => "inversion_failed",
            Error::SingularJacobian(_) => "singular_jacobian",
            Error::NotEquivariant(_) => "not_equivariant",
            Error::HomologyMismatch { .. } => "homology_mismatch",
            Error::BaseMismatch => "base_mismatch",
            Error::GraphFailure(_) => "graph_failure",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Config(_) => "config",
        };
        let fields = match e {
            Error::Config(list) => list.iter().map(FieldError::from).collect(),
            _ => Vec::new(),
        };
        Self {
            kind: kind.into(),
            message: e.to_string(),
            fields,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HomologyOutput {
    pub matrix: Vec<Vec<i64>>,
    pub model_matrix: Vec<Vec<i64>>,
    pub determinant: i64,
    pub hyperbolicity: HyperbolicityWitness,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConjugacyOutput {
    pub summary: ConjugacySummary,
    pub verification: VerificationReport,
    pub injectivity: InjectivityReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LeafPairRecord {
    pub fibre: usize,
    pub base: Vec<f64>,
    pub stable_anchor: Vec<f64>,
    pub unstable_anchor: Vec<f64>,
    pub status: IntersectionStatus,
    pub multiplicity: usize,
    pub min_crossing_angle: f64,
    pub max_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LeavesOutput {
    pub radius: f64,
    pub depth: usize,
    pub fibres: usize,
    pub pairs: usize,
    pub resolved: usize,
    pub resolved_fraction: f64,
    /// Resolved pairs whose multiplicity is not 1.
    pub non_unique: usize,
    pub max_multiplicity: usize,
    pub min_crossing_angle: f64,
    pub max_intersection_residual: f64,
    pub max_invariance_residual: f64,
    pub leaves_with_full_invariance_window: usize,
    pub leaves: usize,
    pub max_chord_slope: f64,
    /// Distance between the intersection of straight model leaves and the linear solve.
    pub model_intersection_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub epsilon: f64,
    pub truncation: usize,
    pub tail_bound: f64,
    pub sup_bound: f64,
    pub cohomology_residual: f64,
    pub conjugacy_residual: f64,
    pub verification_residual: f64,
    pub verification_threshold: f64,
    pub injectivity_min_ratio: f64,
    pub injectivity_min_separation: f64,
    pub degree_defect: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Outputs {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub certificate: Option<ConeCertificate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub homology: Option<HomologyOutput>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub conjugacy: Option<ConjugacyOutput>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub leaves: Option<LeavesOutput>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<Vec<SweepRow>>,
}

/// A CSV table written next to the report.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub file_name: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub command: String,
    pub name: String,
    pub config_digest: String,
    pub seed: u64,
    pub outputs: Outputs,
    pub verdicts: Vec<Verdict>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<ReportError>,
    /// Wall-clock seconds per stage; kept out of the JSON so reports stay reproducible.
    #[serde(skip)]
    pub timing: Vec<(String, f64)>,
    #[serde(skip)]
    pub tables: Vec<Table>,
}

impl RunReport {
    pub fn new(command: &str, name: &str, config_digest: &str, seed: u64) -> Self {
        Self {
            command: command.into(),
            name: name.into(),
            config_digest: config_digest.into(),
            seed,
            outputs: Outputs::default(),
            verdicts: Vec::new(),
            error: None,
            timing: Vec::new(),
            tables: Vec::new(),
        }
    }

    pub fn failed(command: &str, name: &str, config_digest: &str, seed: u64, error: &Error) -> Self {
        let mut r = Self::new(command, name, config_digest, seed);
        r.error = Some(error.into());
        r
    }

    pub fn push_verdicts(&mut self, prefix: &str, verdicts: Vec<Verdict>) {
        self.verdicts.extend(verdicts.into_iter().map(|v| v.prefixed(prefix)));
    }

    pub fn all_pass(&self) -> bool {
        self.error.is_none() && self.verdicts.iter().all(|v| v.pass)
    }

    pub fn exit_code(&self) -> i32 {
        if self.error.is_some() {
            EXIT_PRECONDITION
        } else if self.verdicts.iter().all(|v| v.pass) {
            EXIT_PASS
        } else {
            EXIT_FAIL
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn timing_json(&self) -> String {
        let map: serde_json::Map<String, serde_json::Value> = self
            .timing
            .iter()
            .map(|(k, v)| (k.clone(), serde_json::json!(v)))
            .collect();
        let mut s = serde_json::to_string_pretty(&map).expect("timing serializes");
        s.push('\n');
        s
    }

    /// Plain-text summary for terminals.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let name = if self.name.is_empty() { "<unnamed>" } else { &self.name };
        let _ = writeln!(s, "{} on {name} (seed {})", self.command, self.seed);
        let _ = writeln!(s, "config sha256 {}", self.config_digest);
        if let Some(e) = &self.error {
            let _ = writeln!(s, "error [{}]: {}", e.kind, e.message);
        }
        let o = &self.outputs;
        if let Some(c) = &o.certificate {
            let _ = writeln!(
                s,
                "cones: gamma {} steps {} grid {:?}, margin {:.3e}, rate {:.6}",
                c.gamma, c.steps, c.grid, c.margin, c.lambda_prime
            );
        }
        if let Some(h) = &o.homology {
            let _ = writeln!(s, "homology: {:?} (model {:?})", h.matrix, h.model_matrix);
        }
        if let Some(c) = &o.conjugacy {
            let p = &c.summary.parameters;
            let _ = writeln!(
                s,
                "conjugacy: N = {}, tail bound {:.3e}, max |h F - G h| {:.3e} over {} fresh points, injectivity ratio {:.4}",
                p.truncation, p.tail_bound, c.verification.max_residual, c.verification.samples, c.injectivity.min_ratio
            );
        }
        if let Some(l) = &o.leaves {
            let _ = writeln!(
                s,
                "leaves: {} of {} pairs resolved across {} fibres, {} with multiplicity other than 1",
                l.resolved, l.pairs, l.fibres, l.non_unique
            );
        }
        if let Some(rows) = &o.sweep {
            let _ = writeln!(s, "sweep: {} values of epsilon", rows.len());
        }
        for v in &self.verdicts {
            let cmp = match v.comparison {
                Comparison::AtMost => "<=",
                Comparison::Below => "<",
                Comparison::AtLeast => ">=",
                Comparison::Above => ">",
            };
            let _ = writeln!(
                s,
                "{} {} = {:.6e} {cmp} {:.6e}",
                if v.pass { "PASS" } else { "FAIL" },
                v.name,
                v.value,
                v.threshold
            );
        }
        s
    }
}

/// Decimal text with 17 significant digits.
pub fn csv_float(v: f64) -> String {
    format!("{v:.16e}")
}
