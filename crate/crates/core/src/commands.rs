//! Command dispatch: each command runs one analysis pipeline on a validated
//! configuration and collects its outputs and verdicts into a [`RunReport`].
//!
//! Seeds: fresh-point verification uses `seed`, the injectivity scan
//! `seed + 1` and leaf anchors `seed + 2`.

use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::cones::{check_cone_invariance, ConeCertificate, ConeField};
use crate::config::{orientation_margin, Requirement, SystemConfig};
use crate::conjugacy::{
    build_conjugacy, injectivity_scan, verify_conjugacy, ConjugacyResult, EVALUATION_ALLOWANCE,
};
use crate::error::{Error, Result};
use crate::leaves::{compute_leaf, find_intersections, IntersectionStatus, LeafKind, LeafSegment, LeafSettings};
use crate::linear::{compute_splitting, is_hyperbolic};
use crate::report::{
    csv_float, ConjugacyOutput, HomologyOutput, LeafPairRecord, LeavesOutput, RunReport, SweepRow, Table, Verdict,
};
use crate::system::{induced_homology_matrix, FibrewiseSystem};
use crate::torus::{Grid, LiftPoint, TorusPoint};

/// Largest `|h(x + m) - h(x) - m|` accepted as exact equivariance.
pub const DEGREE_THRESHOLD: f64 = 1e-10;
/// Largest accepted mismatch between an image leaf and the leaf at the image point.
pub const INVARIANCE_THRESHOLD: f64 = 1e-6;
/// Fraction of leaf pairs that must intersect inside both windows.
pub const RESOLVED_FRACTION: f64 = 0.95;
/// Tolerance of the straight-leaf intersection check against the linear solve.
pub const MODEL_INTERSECTION_TOL: f64 = 1e-8;
/// Points per axis of the grid used to certify the affine model's cones.
const MODEL_CERTIFY_GRID: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Certify,
    Homology,
    Conjugate,
    Leaves,
    Sweep,
    Demo,
}

impl Command {
    pub const ALL: [Command; 6] = [
        Command::Certify,
        Command::Homology,
        Command::Conjugate,
        Command::Leaves,
        Command::Sweep,
        Command::Demo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Certify => "certify",
            Command::Homology => "homology",
            Command::Conjugate => "conjugate",
            Command::Leaves => "leaves",
            Command::Sweep => "sweep",
            Command::Demo => "demo",
        }
    }

    pub fn requirement(self) -> Requirement {
        match self {
            Command::Certify | Command::Homology => Requirement::None,
            _ => Requirement::Hyperbolic,
        }
    }
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Command::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown command `{s}`")))
    }
}

struct Stopwatch {
    start: Instant,
    lap: Instant,
}

impl Stopwatch {
    fn start() -> Self {
        let now = Instant::now();
        Stopwatch { start: now, lap: now }
    }

    fn lap(&mut self, report: &mut RunReport, stage: &str) {
        report.timing.push((stage.to_string(), self.lap.elapsed().as_secs_f64()));
        self.lap = Instant::now();
    }

    fn total(&self, report: &mut RunReport) {
        report.timing.push(("total".into(), self.start.elapsed().as_secs_f64()));
    }
}

/// Runs `command` on a parsed configuration. Pipeline errors end up in
/// `report.error`; the report is returned either way.
pub fn run_command(command: Command, config: &SystemConfig, seed: u64) -> RunReport {
    let mut report = RunReport::new(command.name(), &config.name, &config.digest, seed);
    if let Err(e) = config.require(command.requirement(), command.name()) {
        report.error = Some((&e).into());
        return report;
    }
    let mut clock = Stopwatch::start();
    let result = match command {
        Command::Certify => certify(config, &mut report),
        Command::Homology => homology(config, &mut report),
        Command::Conjugate => conjugate(config, seed, &mut report),
        Command::Leaves => leaves(config, seed, &mut report),
        Command::Sweep => sweep(config, seed, &mut report),
        Command::Demo => demo(config, seed, &mut report, &mut clock),
    };
    clock.total(&mut report);
    if let Err(e) = result {
        report.error = Some((&e).into());
    }
    report
}

/// Parses `text` and runs `command`, with `seed` overriding the configured one.
pub fn run_text(command: Command, text: &str, seed: Option<u64>) -> RunReport {
    match crate::config::parse_config(text) {
        Ok(config) => run_command(command, &config, seed.unwrap_or(config.seed)),
        Err(e) => RunReport::failed(
            command.name(),
            "",
            &crate::config::config_digest(text),
            seed.unwrap_or(0),
            &e,
        ),
    }
}

fn cone_field(config: &SystemConfig) -> Result<ConeField> {
    let gamma = config.certify.gamma;
    match compute_splitting(config.system.matrix()) {
        Ok(split) => ConeField::from_splitting(&split, gamma),
        Err(Error::NotHyperbolic { .. }) => {
            let d = config.fibre_dim();
            if d < 2 {
                return Err(Error::InvalidArgument(
                    "cones need a fibre of dimension at least 2".into(),
                ));
            }
            let l = config.certify.stable_dim.unwrap_or(d / 2);
            ConeField::new(DMatrix::identity(d, d), gamma, l)
        }
        Err(e) => Err(e),
    }
}

fn certificate(config: &SystemConfig) -> Result<(ConeField, ConeCertificate)> {
    let cones = cone_field(config)?;
    let cert = check_cone_invariance(&config.system, &cones, config.certify.steps, &config.certify_grid()?)?;
    Ok((cones, cert))
}

fn certificate_verdicts(cert: &ConeCertificate) -> Vec<Verdict> {
    vec![
        Verdict::above("cone_margin", cert.margin, 0.0),
        Verdict::below("contraction_rate", cert.lambda_prime, 1.0),
    ]
}

fn certify(config: &SystemConfig, report: &mut RunReport) -> Result<()> {
    let (_, cert) = certificate(config)?;
    report.push_verdicts("certify", certificate_verdicts(&cert));
    if !cert.failures.is_empty() {
        let d = config.base_dim() + config.fibre_dim();
        let mut csv = (0..d).map(|i| format!("z{i}")).collect::<Vec<_>>().join(",");
        csv.push_str(",unstable_margin,stable_margin\n");
        for f in &cert.failures {
            let row: Vec<String> = f
                .point
                .iter()
                .chain([&f.unstable_margin, &f.stable_margin])
                .map(|v| csv_float(*v))
                .collect();
            let _ = writeln!(csv, "{}", row.join(","));
        }
        report.tables.push(Table {
            file_name: "cone_failures.csv".into(),
            content: csv,
        });
    }
    report.outputs.certificate = Some(cert);
    Ok(())
}

fn homology(config: &SystemConfig, report: &mut RunReport) -> Result<()> {
    let found = induced_homology_matrix(&config.system)?;
    let expected = config.model.matrix();
    let differing = found
        .entries()
        .iter()
        .zip(expected.entries())
        .filter(|(a, b)| a != b)
        .count();
    let det = found.determinant()?;
    report.push_verdicts(
        "homology",
        vec![
            Verdict::at_most("entries_differing_from_model", differing as f64, 0.0),
            Verdict::at_most("determinant_distance_from_unit", (det.abs() - 1) as f64, 0.0),
        ],
    );
    report.outputs.homology = Some(HomologyOutput {
        matrix: found.rows(),
        model_matrix: expected.rows(),
        determinant: det as i64,
        hyperbolicity: is_hyperbolic(&found, crate::config::HYPERBOLICITY_TOL)?,
    });
    Ok(())
}

struct ConjugacyRun {
    result: ConjugacyResult,
    output: ConjugacyOutput,
}

fn run_conjugacy(config: &SystemConfig, system: &FibrewiseSystem, seed: u64) -> Result<ConjugacyRun> {
    let s = &config.conjugate;
    let result = build_conjugacy(system, &config.model, s.tol, &config.conjugate_grid()?)?;
    let verification = verify_conjugacy(&result, system, &config.model, s.samples, seed)?;
    let injectivity = injectivity_scan(&result, s.injectivity_fibres, s.injectivity_pairs, seed.wrapping_add(1))?;
    let output = ConjugacyOutput {
        summary: result.summary.clone(),
        verification,
        injectivity,
    };
    Ok(ConjugacyRun { result, output })
}

fn conjugacy_verdicts(o: &ConjugacyOutput) -> Vec<Verdict> {
    let tail = o.summary.parameters.tail_bound;
    vec![
        Verdict::below("tail_bound", tail, o.summary.parameters.tol / 4.0),
        Verdict::at_most(
            "cohomology_residual",
            o.summary.cohomology_residual.max,
            2.0 * tail + EVALUATION_ALLOWANCE,
        ),
        Verdict::at_most("conjugacy_residual", o.verification.max_residual, o.verification.threshold),
        Verdict::at_most("degree_defect", o.summary.degree_defect, DEGREE_THRESHOLD),
        Verdict::above("injectivity_margin", o.injectivity.min_ratio, 0.0),
    ]
}

fn conjugate(config: &SystemConfig, seed: u64, report: &mut RunReport) -> Result<()> {
    let run = run_conjugacy(config, &config.system, seed)?;
    report.push_verdicts("conjugate", conjugacy_verdicts(&run.output));
    let mut buf = Vec::new();
    run.result
        .write_w_csv(&mut buf)
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    report.tables.push(Table {
        file_name: "w.csv".into(),
        content: String::from_utf8(buf).expect("ascii"),
    });
    report.outputs.conjugacy = Some(run.output);
    Ok(())
}

fn random_lift(d: usize, rng: &mut ChaCha8Rng) -> LiftPoint {
    LiftPoint::new((0..d).map(|_| rng.gen::<f64>()).collect())
}

fn leaf_csv(leaf: &LeafSegment) -> Result<String> {
    let mut buf = Vec::new();
    leaf.write_csv(&mut buf)
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(String::from_utf8(buf).expect("ascii"))
}

/// Intersection of straight model leaves through `p_s` and `p_u` against
/// `p_s + P_s (p_u - p_s)`.
fn model_intersection_error(config: &SystemConfig, cones: &ConeField, p_s: &LiftPoint, p_u: &LiftPoint) -> Result<f64> {
    let model = FibrewiseSystem::from_affine(&config.model)?;
    let grid = Grid::uniform(config.base_dim() + config.fibre_dim(), MODEL_CERTIFY_GRID)?;
    let cert = check_cone_invariance(&model, cones, config.certify.steps, &grid)?;
    if !cert.passed {
        return Err(Error::InvalidArgument("cones are not invariant under the affine model".into()));
    }
    let b = TorusPoint::origin(config.base_dim());
    let settings = LeafSettings {
        radius: config.leaves.radius,
        depth: config.leaves.depth,
    };
    let ws = compute_leaf(&model, cones, &cert, &b, p_s, LeafKind::Stable, settings)?;
    let wu = compute_leaf(&model, cones, &cert, &b, p_u, LeafKind::Unstable, settings)?;
    let r = find_intersections(&model, &ws, &wu)?;
    if r.multiplicity != 1 {
        return Ok(f64::INFINITY);
    }
    let split = compute_splitting(config.model.matrix())?;
    let diff = DVector::from_iterator(
        p_u.dim(),
        p_u.coords().iter().zip(p_s.coords()).map(|(u, s)| u - s),
    );
    let expected = DVector::from_column_slice(p_s.coords()) + split.stable_projector() * diff;
    Ok((DVector::from_column_slice(&r.points[0]) - expected).norm())
}

fn leaves(config: &SystemConfig, seed: u64, report: &mut RunReport) -> Result<()> {
    let (cones, cert) = certificate(config)?;
    if !cert.passed {
        return Err(Error::InvalidArgument(format!(
            "leaves need a passing cone certificate (margin {:e})",
            cert.margin
        )));
    }
    let s = &config.leaves;
    let (k, d) = (config.base_dim(), config.fibre_dim());
    let settings = LeafSettings {
        radius: s.radius,
        depth: s.depth,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
    let mut jobs = Vec::new();
    let mut bases = Vec::new();
    for f in 0..s.fibres {
        let b = TorusPoint::random(k, &mut rng);
        for _ in 0..s.stable_anchors {
            jobs.push((f, b.clone(), random_lift(d, &mut rng), LeafKind::Stable));
        }
        for _ in 0..s.unstable_anchors {
            jobs.push((f, b.clone(), random_lift(d, &mut rng), LeafKind::Unstable));
        }
        bases.push(b);
    }
    let computed: Vec<LeafSegment> = jobs
        .par_iter()
        .map(|(_, b, anchor, kind)| compute_leaf(&config.system, &cones, &cert, b, anchor, *kind, settings))
        .collect::<Result<_>>()?;

    let per_fibre = s.stable_anchors + s.unstable_anchors;
    let mut pair_jobs = Vec::new();
    for f in 0..s.fibres {
        let leaves = &computed[f * per_fibre..(f + 1) * per_fibre];
        let (stable, unstable) = leaves.split_at(s.stable_anchors);
        for ws in stable {
            for wu in unstable {
                pair_jobs.push((f, ws, wu));
            }
        }
    }
    let pairs: Vec<LeafPairRecord> = pair_jobs
        .par_iter()
        .map(|(f, ws, wu)| {
            let r = find_intersections(&config.system, ws, wu)?;
            Ok(LeafPairRecord {
                fibre: *f,
                base: bases[*f].coords().to_vec(),
                stable_anchor: ws.anchor.coords().to_vec(),
                unstable_anchor: wu.anchor.coords().to_vec(),
                status: r.status,
                multiplicity: r.multiplicity,
                min_crossing_angle: r.min_crossing_angle,
                max_residual: r.max_residual,
            })
        })
        .collect::<Result<_>>()?;

    let resolved: Vec<&LeafPairRecord> = pairs
        .iter()
        .filter(|p| p.status == IntersectionStatus::Resolved)
        .collect();
    let non_unique = resolved.iter().filter(|p| p.multiplicity != 1).count();
    let model_error = model_intersection_error(config, &cones, &computed[0].anchor, &computed[s.stable_anchors].anchor)?;
    let output = LeavesOutput {
        radius: s.radius,
        depth: s.depth,
        fibres: s.fibres,
        pairs: pairs.len(),
        resolved: resolved.len(),
        resolved_fraction: resolved.len() as f64 / pairs.len().max(1) as f64,
        non_unique,
        max_multiplicity: resolved.iter().map(|p| p.multiplicity).max().unwrap_or(0),
        min_crossing_angle: resolved.iter().map(|p| p.min_crossing_angle).fold(f64::INFINITY, f64::min),
        max_intersection_residual: resolved.iter().map(|p| p.max_residual).fold(0.0, f64::max),
        max_invariance_residual: computed.iter().map(|l| l.invariance_residual).fold(0.0, f64::max),
        leaves_with_full_invariance_window: computed.iter().filter(|l| l.invariance_covered).count(),
        leaves: computed.len(),
        max_chord_slope: computed.iter().map(|l| l.max_chord_slope).fold(0.0, f64::max),
        model_intersection_error: model_error,
    };
    report.push_verdicts(
        "leaves",
        vec![
            Verdict::at_least("resolved_fraction", output.resolved_fraction, RESOLVED_FRACTION),
            Verdict::at_most("non_unique_intersections", non_unique as f64, 0.0),
            Verdict::at_most("invariance_residual", output.max_invariance_residual, INVARIANCE_THRESHOLD),
            Verdict::at_most("model_intersection_error", model_error, MODEL_INTERSECTION_TOL),
        ],
    );

    let mut csv = String::from("fibre");
    for (prefix, n) in [("b", k), ("s", d), ("u", d)] {
        for i in 0..n {
            let _ = write!(csv, ",{prefix}{i}");
        }
    }
    csv.push_str(",status,multiplicity,min_crossing_angle,max_residual\n");
    for p in &pairs {
        let nums: Vec<String> = p
            .base
            .iter()
            .chain(&p.stable_anchor)
            .chain(&p.unstable_anchor)
            .map(|v| csv_float(*v))
            .collect();
        let status = match p.status {
            IntersectionStatus::Resolved => "resolved",
            IntersectionStatus::Inconclusive => "inconclusive",
        };
        let _ = writeln!(
            csv,
            "{},{},{status},{},{},{}",
            p.fibre,
            nums.join(","),
            p.multiplicity,
            csv_float(p.min_crossing_angle),
            csv_float(p.max_residual)
        );
    }
    report.tables.push(Table {
        file_name: "leaf_pairs.csv".into(),
        content: csv,
    });
    report.tables.push(Table {
        file_name: "stable_leaf.csv".into(),
        content: leaf_csv(&computed[0])?,
    });
    report.tables.push(Table {
        file_name: "unstable_leaf.csv".into(),
        content: leaf_csv(&computed[s.stable_anchors])?,
    });
    report.outputs.leaves = Some(output);
    Ok(())
}

fn sweep(config: &SystemConfig, seed: u64, report: &mut RunReport) -> Result<()> {
    let p = config.system.perturbation();
    let amplitude = p.amplitude();
    if amplitude == 0.0 {
        return Err(Error::InvalidArgument("sweep needs a nonzero perturbation to rescale".into()));
    }
    let mut rows = Vec::with_capacity(config.sweep.epsilons.len());
    let mut verdicts = Vec::new();
    for &eps in &config.sweep.epsilons {
        let system = config.system.with_perturbation(p.scaled(eps / amplitude))?;
        let margin = orientation_margin(&system)?;
        if margin <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "fibre maps at epsilon {eps} are not invertible (det(A) det(dF) reaches {margin:e})"
            )));
        }
        let run = run_conjugacy(config, &system, seed)?;
        let o = &run.output;
        let label = format!("epsilon={eps}");
        verdicts.push(Verdict::at_most(
            format!("{label}.conjugacy_residual"),
            o.verification.max_residual,
            o.verification.threshold,
        ));
        verdicts.push(Verdict::above(format!("{label}.injectivity_margin"), o.injectivity.min_ratio, 0.0));
        rows.push(SweepRow {
            epsilon: eps,
            truncation: o.summary.parameters.truncation,
            tail_bound: o.summary.parameters.tail_bound,
            sup_bound: o.summary.parameters.sup_bound,
            cohomology_residual: o.summary.cohomology_residual.max,
            conjugacy_residual: o.summary.conjugacy_residual.max,
            verification_residual: o.verification.max_residual,
            verification_threshold: o.verification.threshold,
            injectivity_min_ratio: o.injectivity.min_ratio,
            injectivity_min_separation: o.injectivity.min_separation,
            degree_defect: o.summary.degree_defect,
        });
    }
    report.push_verdicts("sweep", verdicts);
    let mut csv = String::from(
        "epsilon,truncation,tail_bound,sup_bound,cohomology_residual,conjugacy_residual,verification_residual,verification_threshold,injectivity_min_ratio,injectivity_min_separation,degree_defect\n",
    );
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{},{}",
            csv_float(r.epsilon),
            r.truncation,
            csv_float(r.tail_bound),
            csv_float(r.sup_bound),
            csv_float(r.cohomology_residual),
            csv_float(r.conjugacy_residual),
            csv_float(r.verification_residual),
            csv_float(r.verification_threshold),
            csv_float(r.injectivity_min_ratio),
            csv_float(r.injectivity_min_separation),
            csv_float(r.degree_defect)
        );
    }
    report.tables.push(Table {
        file_name: "sweep.csv".into(),
        content: csv,
    });
    report.outputs.sweep = Some(rows);
    Ok(())
}

fn demo(config: &SystemConfig, seed: u64, report: &mut RunReport, clock: &mut Stopwatch) -> Result<()> {
    certify(config, report)?;
    clock.lap(report, "certify");
    homology(config, report)?;
    clock.lap(report, "homology");
    conjugate(config, seed, report)?;
    clock.lap(report, "conjugate");
    leaves(config, seed, report)?;
    clock.lap(report, "leaves");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;
    use crate::report::{EXIT_FAIL, EXIT_PASS, EXIT_PRECONDITION};
    use crate::zoo::CAT_OVER_ROTATION;

    fn small(extra: &str) -> SystemConfig {
        let text = CAT_OVER_ROTATION
            .replace("samples = 1000", "samples = 200")
            .replace("fibres = 20", "fibres = 2")
            + extra;
        parse_config(&text).unwrap()
    }

    #[test]
    fn command_names_round_trip() {
        for c in Command::ALL {
            assert_eq!(c.name().parse::<Command>().unwrap(), c);
        }
        assert!("plot".parse::<Command>().is_err());
    }

    #[test]
    fn homology_reports_matrix() {
        let r = run_command(Command::Homology, &small(""), 1);
        assert_eq!(r.exit_code(), EXIT_PASS);
        assert_eq!(r.outputs.homology.as_ref().unwrap().matrix, vec![vec![2, 1], vec![1, 1]]);
    }

    #[test]
    fn mismatched_model_is_a_precondition_error() {
        let c = small("[model]\nmatrix = [[1, 1], [1, 2]]\n");
        let r = run_command(Command::Conjugate, &c, 1);
        assert_eq!(r.exit_code(), EXIT_PRECONDITION);
        let e = r.error.unwrap();
        assert_eq!(e.kind, "homology_mismatch");
        assert!(e.message.contains("homology"));
        let r = run_command(Command::Homology, &c, 1);
        assert_eq!(r.exit_code(), EXIT_FAIL);
    }

    #[test]
    fn identity_fails_certification_and_is_refused_by_conjugate() {
        let text = CAT_OVER_ROTATION.replace("[[2, 1], [1, 1]]", "[[1, 0], [0, 1]]").replace("sin = [0.05, 0.0]", "sin = [0.0, 0.0]");
        let c = parse_config(&text.replace("grid = 64", "grid = 8")).unwrap();
        let r = run_command(Command::Certify, &c, 0);
        assert_eq!(r.exit_code(), EXIT_FAIL);
        assert!(r.outputs.certificate.unwrap().margin <= 0.0);
        let r = run_command(Command::Conjugate, &c, 0);
        assert_eq!(r.exit_code(), EXIT_PRECONDITION);
        assert!(r.error.unwrap().message.contains("not hyperbolic"));
    }

    #[test]
    fn conjugate_passes_on_fixture() {
        let r = run_command(Command::Conjugate, &small(""), 3);
        assert_eq!(r.exit_code(), EXIT_PASS, "{}", r.summary());
        assert_eq!(r.tables[0].file_name, "w.csv");
        assert_eq!(r.tables[0].content.lines().count(), 16usize.pow(3) + 1);
    }

    #[test]
    fn every_verdict_value_appears_in_the_report() {
        let r = run_command(Command::Conjugate, &small(""), 3);
        let json: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        for v in json["verdicts"].as_array().unwrap() {
            assert!(v["value"].is_number() && v["threshold"].is_number(), "{v}");
        }
    }

    #[test]
    fn sweep_rows_follow_epsilons() {
        let c = small("").clone();
        let mut c = c;
        c.sweep.epsilons = vec![0.02, 0.08];
        c.conjugate.samples = 100;
        let r = run_command(Command::Sweep, &c, 5);
        assert_eq!(r.exit_code(), EXIT_PASS, "{}", r.summary());
        let rows = r.outputs.sweep.unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows[0].sup_bound < rows[1].sup_bound);
        assert!(rows[0].injectivity_min_ratio > rows[1].injectivity_min_ratio);
        assert_eq!(r.tables[0].content.lines().count(), 3);
    }
}
