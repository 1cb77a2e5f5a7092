//! Cone fields, grid certification of strict cone invariance with
//! Lipschitz-inflated margins, and the invariant vertical bundles obtained by
//! iterating reference subspaces through the cones.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linear::{min_singular_value, op_norm, orthonormalize, subspace_gap, HyperbolicSplitting};
use crate::system::FibrewiseSystem;
use crate::torus::{BundlePoint, Grid};

/// Failure witnesses kept in a certificate.
pub const MAX_WITNESSES: usize = 100;

/// Newton tolerance for backward orbits used by the bundle approximation.
const ORBIT_TOL: f64 = 1e-13;

/// Cones `C_u = { |v_s| <= gamma |v_u| }` and `C_s = { |v_u| <= gamma |v_s| }`
/// in the coordinates of an orthonormal frame whose first `l` columns span the
/// approximate stable directions. The frame is the same at every point.
#[derive(Debug, Clone, PartialEq)]
pub struct ConeField {
    frame: DMatrix<f64>,
    gamma: f64,
    stable_dim: usize,
}

impl ConeField {
    pub fn new(frame: DMatrix<f64>, gamma: f64, stable_dim: usize) -> Result<Self> {
        let d = frame.nrows();
        check_dim(d, frame.ncols())?;
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::InvalidArgument(format!("gamma must lie in (0, 1), got {gamma}")));
        }
        if stable_dim == 0 || stable_dim >= d {
            return Err(Error::InvalidArgument(format!(
                "stable dimension {stable_dim} must lie in 1..{d}"
            )));
        }
        let defect = (frame.transpose() * &frame - DMatrix::<f64>::identity(d, d)).amax();
        if defect > 1e-10 {
            return Err(Error::InvalidArgument(format!(
                "cone frame is not orthonormal (defect {defect:e})"
            )));
        }
        Ok(Self {
            frame,
            gamma,
            stable_dim,
        })
    }

    /// Cones around the eigen-splitting of the linear model.
    pub fn from_splitting(split: &HyperbolicSplitting, gamma: f64) -> Result<Self> {
        Self::new(split.stable_frame(), gamma, split.stable_dim())
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn stable_dim(&self) -> usize {
        self.stable_dim
    }

    pub fn dim(&self) -> usize {
        self.frame.nrows()
    }

    pub fn frame(&self) -> &DMatrix<f64> {
        &self.frame
    }

    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        Self::new(self.frame.clone(), gamma, self.stable_dim)
    }

    fn stable_reference(&self) -> DMatrix<f64> {
        self.frame.columns(0, self.stable_dim).clone_owned()
    }

    fn unstable_reference(&self) -> DMatrix<f64> {
        self.frame
            .columns(self.stable_dim, self.dim() - self.stable_dim)
            .clone_owned()
    }

    /// Largest `|v_s| / |v_u|` over a subspace given by orthonormal columns;
    /// the subspace lies in the closed unstable cone iff this is `<= gamma`.
    pub fn unstable_slope(&self, basis: &DMatrix<f64>) -> f64 {
        let c = self.frame.transpose() * basis;
        let l = self.stable_dim;
        let s = c.rows(0, l).clone_owned();
        let u = c.rows(l, self.dim() - l).clone_owned();
        match u.try_inverse() {
            Some(ui) => op_norm(&(s * ui)),
            None => f64::INFINITY,
        }
    }

    /// Largest `|v_u| / |v_s|` over a subspace.
    pub fn stable_slope(&self, basis: &DMatrix<f64>) -> f64 {
        let c = self.frame.transpose() * basis;
        let l = self.stable_dim;
        let s = c.rows(0, l).clone_owned();
        let u = c.rows(l, self.dim() - l).clone_owned();
        match s.try_inverse() {
            Some(si) => op_norm(&(u * si)),
            None => f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConeFailure {
    pub point: Vec<f64>,
    pub unstable_margin: f64,
    pub stable_margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConeCertificate {
    pub gamma: f64,
    pub steps: usize,
    /// Certified rate, N-th root of the worst cone rate over the grid.
    pub lambda_prime: f64,
    /// Same rate without the Lipschitz inflation.
    pub lambda_prime_grid: f64,
    pub grid: Vec<usize>,
    pub points_checked: usize,
    /// Worst slack of both strict cone inclusions.
    pub margin: f64,
    pub unstable_margin: f64,
    pub stable_margin: f64,
    /// Bound on the variation of the N-step Jacobian over one grid cell.
    pub inflation: f64,
    pub passed: bool,
    pub failure_count: usize,
    pub failures: Vec<ConeFailure>,
}

#[derive(Debug, Clone, Copy)]
struct PointCheck {
    unstable_margin: f64,
    stable_margin: f64,
    unstable_rate: f64,
    stable_rate: f64,
    unstable_rate_grid: f64,
    stable_rate_grid: f64,
}

struct Blocks {
    n11: f64,
    n12: f64,
    n21: f64,
    n22: f64,
    s11: f64,
    s22: f64,
}

fn blocks(m: &DMatrix<f64>, l: usize) -> Blocks {
    let d = m.nrows();
    let b11 = m.view((0, 0), (l, l)).clone_owned();
    let b12 = m.view((0, l), (l, d - l)).clone_owned();
    let b21 = m.view((l, 0), (d - l, l)).clone_owned();
    let b22 = m.view((l, l), (d - l, d - l)).clone_owned();
    Blocks {
        n11: op_norm(&b11),
        n12: op_norm(&b12),
        n21: op_norm(&b21),
        n22: op_norm(&b22),
        s11: min_singular_value(&b11),
        s22: min_singular_value(&b22),
    }
}

/// Slack and rate of the unstable cone for a map with the given blocks whose
/// entries may move by up to `delta`.
fn unstable_bounds(b: &Blocks, gamma: f64, delta: f64) -> (f64, f64) {
    let grow = b.s22 - delta - gamma * (b.n21 + delta);
    let margin = gamma * grow - (gamma * (b.n11 + delta) + b.n12 + delta);
    let rate = if grow > 0.0 {
        (1.0 + gamma * gamma).sqrt() / grow
    } else {
        f64::INFINITY
    };
    (margin, rate)
}

/// Same for the stable cone under the inverse map `k`.
fn stable_bounds(k: &Blocks, gamma: f64, delta: f64) -> (f64, f64) {
    let grow = k.s11 - delta - gamma * (k.n12 + delta);
    let margin = gamma * grow - (k.n21 + delta + gamma * (k.n22 + delta));
    let rate = if grow > 0.0 {
        (1.0 + gamma * gamma).sqrt() / grow
    } else {
        f64::INFINITY
    };
    (margin, rate)
}

/// `dF^n` along the orbit of `e`, returning the product and the endpoint.
pub fn orbit_jacobian(system: &FibrewiseSystem, e: &BundlePoint, steps: usize) -> (DMatrix<f64>, BundlePoint) {
    let d = system.fibre_dim();
    let mut j = DMatrix::<f64>::identity(d, d);
    let mut p = e.clone();
    for _ in 0..steps {
        j = system.fibre_jacobian(&p) * j;
        p = system.evaluate(&p);
    }
    (j, p)
}

/// Bound on `|dF^N(e') - dF^N(e)|` for `e'` in the grid cell centred at `e`.
fn jacobian_inflation(system: &FibrewiseSystem, steps: usize, grid: &Grid) -> f64 {
    let p = system.perturbation();
    let k = system.base_dim();
    let lj = p.jacobian_lipschitz();
    if lj == 0.0 {
        return 0.0;
    }
    let first: f64 = p
        .jacobian_lipschitz_per_axis(k..p.dim_in())
        .iter()
        .zip(grid.spacing())
        .map(|(l, h)| l * h / 2.0)
        .sum();
    let a_norm = op_norm(system.matrix_f64());
    let jmax = a_norm + system.perturbation_lipschitz();
    let lip_full = system.base().lipschitz() + a_norm + system.translation().lipschitz() + p.lipschitz();
    let radius = grid.covering_radius();
    let later: f64 = (1..steps).map(|i| lj * lip_full.powi(i as i32) * radius).sum();
    jmax.powi(steps as i32 - 1) * (first + later)
}

/// Certifies strict invariance of the unstable cones under `dF^N` and of the
/// stable cones under `dF^-N` at every point of `grid` (a lattice on `T^(k+d)`),
/// with margins inflated so that the statement covers every grid cell.
pub fn check_cone_invariance(
    system: &FibrewiseSystem,
    cones: &ConeField,
    steps: usize,
    grid: &Grid,
) -> Result<ConeCertificate> {
    if steps == 0 {
        return Err(Error::InvalidArgument("cone step count must be at least 1".into()));
    }
    let k = system.base_dim();
    let d = system.fibre_dim();
    check_dim(d, cones.dim())?;
    check_dim(k + d, grid.dim())?;
    let gamma = cones.gamma();
    let l = cones.stable_dim();
    let frame = cones.frame();
    let frame_t = frame.transpose();
    let delta = jacobian_inflation(system, steps, grid);

    let checks: Vec<Result<PointCheck>> = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let e = BundlePoint::from_joint(&grid.point(i), k);
            let (j, _) = orbit_jacobian(system, &e, steps);
            let jf = &frame_t * j * frame;
            let kf = jf
                .clone()
                .try_inverse()
                .ok_or_else(|| Error::SingularJacobian(format!("N-step Jacobian at {:?}", e.joint_coords())))?;
            let bj = blocks(&jf, l);
            let bk = blocks(&kf, l);
            let knorm = op_norm(&kf);
            let delta_k = if knorm * delta < 1.0 {
                knorm * knorm * delta / (1.0 - knorm * delta)
            } else {
                f64::INFINITY
            };
            let (unstable_margin, unstable_rate) = unstable_bounds(&bj, gamma, delta);
            let (stable_margin, stable_rate) = stable_bounds(&bk, gamma, delta_k);
            let (_, unstable_rate_grid) = unstable_bounds(&bj, gamma, 0.0);
            let (_, stable_rate_grid) = stable_bounds(&bk, gamma, 0.0);
            Ok(PointCheck {
                unstable_margin,
                stable_margin,
                unstable_rate,
                stable_rate,
                unstable_rate_grid,
                stable_rate_grid,
            })
        })
        .collect();

    let mut unstable_margin = f64::INFINITY;
    let mut stable_margin = f64::INFINITY;
    let mut worst_rate: f64 = 0.0;
    let mut worst_rate_grid: f64 = 0.0;
    let mut failures = Vec::new();
    let mut failure_count = 0;
    for (i, c) in checks.into_iter().enumerate() {
        let c = c?;
        unstable_margin = unstable_margin.min(c.unstable_margin);
        stable_margin = stable_margin.min(c.stable_margin);
        worst_rate = worst_rate.max(c.unstable_rate).max(c.stable_rate);
        worst_rate_grid = worst_rate_grid.max(c.unstable_rate_grid).max(c.stable_rate_grid);
        if !(c.unstable_margin > 0.0 && c.stable_margin > 0.0) {
            failure_count += 1;
            if failures.len() < MAX_WITNESSES {
                failures.push(ConeFailure {
                    point: grid.point(i).coords().to_vec(),
                    unstable_margin: c.unstable_margin,
                    stable_margin: c.stable_margin,
                });
            }
        }
    }
    let root = 1.0 / steps as f64;
    let lambda_prime = worst_rate.powf(root);
    let margin = unstable_margin.min(stable_margin);
    Ok(ConeCertificate {
        gamma,
        steps,
        lambda_prime,
        lambda_prime_grid: worst_rate_grid.powf(root),
        grid: grid.resolution().to_vec(),
        points_checked: grid.len(),
        margin,
        unstable_margin,
        stable_margin,
        inflation: delta,
        passed: failure_count == 0 && margin > 0.0 && lambda_prime < 1.0,
        failure_count,
        failures,
    })
}

/// Approximate invariant bundles at a single point.
#[derive(Debug, Clone, PartialEq)]
pub struct PointBundles {
    pub stable: DMatrix<f64>,
    pub unstable: DMatrix<f64>,
    pub depth: usize,
    pub gap: f64,
}

fn push_forward(system: &FibrewiseSystem, path: &[BundlePoint], start: DMatrix<f64>) -> DMatrix<f64> {
    // path[0] is the target point, path[last] the starting point
    let mut x = start;
    for p in path[1..].iter().rev() {
        x = orthonormalize(&(system.fibre_jacobian(p) * x));
    }
    x
}

fn pull_back(system: &FibrewiseSystem, path: &[BundlePoint], start: DMatrix<f64>) -> Result<DMatrix<f64>> {
    // path[0] is the target point, path[last] the starting point
    let mut x = start;
    for p in path[..path.len() - 1].iter().rev() {
        let lu = system.fibre_jacobian(p).lu();
        x = lu
            .solve(&x)
            .ok_or_else(|| Error::SingularJacobian("fibre Jacobian in bundle pull-back".into()))?;
        x = orthonormalize(&x);
    }
    Ok(x)
}

/// Unstable bundle by pushing the unstable reference subspace forward along
/// longer and longer backward orbits, stable bundle by pulling the stable
/// reference back along forward orbits; stops once successive depths agree
/// to `tol` in principal angle.
pub fn invariant_bundles_at(
    system: &FibrewiseSystem,
    cones: &ConeField,
    steps: usize,
    e: &BundlePoint,
    iterations: usize,
    tol: f64,
) -> Result<PointBundles> {
    let n = steps.max(1);
    let total = iterations.max(1) * n;
    let mut backward = Vec::with_capacity(total + 1);
    let mut forward = Vec::with_capacity(total + 1);
    backward.push(e.clone());
    forward.push(e.clone());
    for _ in 0..total {
        let prev = backward.last().expect("non-empty");
        backward.push(system.inverse(prev, ORBIT_TOL)?);
        let next = forward.last().expect("non-empty");
        forward.push(system.evaluate(next));
    }
    let ref_u = cones.unstable_reference();
    let ref_s = cones.stable_reference();
    let mut prev: Option<(DMatrix<f64>, DMatrix<f64>)> = None;
    let mut gap = f64::INFINITY;
    let mut depth = 0;
    for i in 1..=iterations.max(1) {
        let u = push_forward(system, &backward[..=i * n], ref_u.clone());
        let s = pull_back(system, &forward[..=i * n], ref_s.clone())?;
        depth = i;
        if let Some((ps, pu)) = &prev {
            gap = subspace_gap(ps, &s).max(subspace_gap(pu, &u));
        }
        prev = Some((s, u));
        if gap < tol {
            break;
        }
    }
    let (stable, unstable) = prev.expect("at least one iteration");
    Ok(PointBundles {
        stable,
        unstable,
        depth,
        gap,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BundleApproximation {
    pub points: Vec<BundlePoint>,
    pub stable: Vec<DMatrix<f64>>,
    pub unstable: Vec<DMatrix<f64>>,
    pub depths: Vec<usize>,
    /// Largest principal-angle gap between the last two depths.
    pub max_gap: f64,
    pub converged: bool,
    /// Smallest `gamma - slope` over both families; positive means strictly inside the cones.
    pub cone_slack: f64,
    /// Smallest sine of the minimal principal angle between stable and unstable.
    pub transversality: f64,
}

/// Sine of the smallest principal angle between two complementary subspaces.
pub fn transversality(stable: &DMatrix<f64>, unstable: &DMatrix<f64>) -> f64 {
    let c = op_norm(&(stable.transpose() * unstable)).min(1.0);
    (1.0 - c * c).max(0.0).sqrt()
}

pub fn approximate_invariant_bundles(
    system: &FibrewiseSystem,
    cones: &ConeField,
    cert: &ConeCertificate,
    points: &[BundlePoint],
    iterations: usize,
    tol: f64,
) -> Result<BundleApproximation> {
    if !cert.passed {
        return Err(Error::InvalidArgument(
            "invariant bundles require a passing cone certificate".into(),
        ));
    }
    let results: Vec<Result<PointBundles>> = points
        .par_iter()
        .map(|e| invariant_bundles_at(system, cones, cert.steps, e, iterations, tol))
        .collect();
    let mut out = BundleApproximation {
        points: points.to_vec(),
        stable: Vec::with_capacity(points.len()),
        unstable: Vec::with_capacity(points.len()),
        depths: Vec::with_capacity(points.len()),
        max_gap: 0.0,
        converged: true,
        cone_slack: f64::INFINITY,
        transversality: f64::INFINITY,
    };
    let gamma = cones.gamma();
    for r in results {
        let pb = r?;
        out.max_gap = out.max_gap.max(pb.gap);
        out.converged &= pb.gap < tol;
        out.cone_slack = out
            .cone_slack
            .min(gamma - cones.stable_slope(&pb.stable))
            .min(gamma - cones.unstable_slope(&pb.unstable));
        out.transversality = out.transversality.min(transversality(&pb.stable, &pb.unstable));
        out.depths.push(pb.depth);
        out.stable.push(pb.stable);
        out.unstable.push(pb.unstable);
    }
    Ok(out)
}
