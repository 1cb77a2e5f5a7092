//! Lifted stable and unstable leaves of the fibre dynamics as graphs over the
//! cone frame, their intersections, and arc-length bounds inside boxes.
//!
//! Leaf points are found by shooting along a torus-reduced pseudo-orbit of
//! the anchor, in coordinates relative to that orbit, so that tiny
//! displacements deep in the window keep full relative precision.

use std::collections::HashMap;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cones::{transversality, ConeCertificate, ConeField};
use crate::error::{check_dim, Error, Result};
use crate::linear::orthonormalize;
use crate::system::FibrewiseSystem;
use crate::torus::{project, LiftPoint, TorusPoint};

/// Largest window half-width accepted.
pub const MAX_RADIUS: f64 = 10.0;

/// Interpolation error that triggers mesh refinement.
pub const MESH_TOL: f64 = 1e-6;

/// Distance below which intersection roots are merged.
pub const ROOT_CLUSTER_TOL: f64 = 1e-8;

const INITIAL_HALF_KNOTS: usize = 8;
const MAX_KNOTS_1D: usize = 4097;
const MAX_KNOTS_ND: usize = 129;
const MAX_REFINE_ROUNDS: usize = 12;
const SHOOT_MAX_STEPS: usize = 80;
const INNER_MAX_STEPS: usize = 60;
const CONTINUATION_STEPS: usize = 16;
const INVARIANCE_SAMPLES_1D: usize = 65;
const INVARIANCE_SAMPLES_ND: usize = 9;
const ORBIT_TOL: f64 = 1e-15;
const FIXED_POINT_MAX_STEPS: usize = 500;
const POLISH_STEPS: usize = 40;
const STARTS_PER_AXIS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeafKind {
    Stable,
    Unstable,
}

impl LeafKind {
    pub fn opposite(self) -> Self {
        match self {
            LeafKind::Stable => LeafKind::Unstable,
            LeafKind::Unstable => LeafKind::Stable,
        }
    }
}

/// Torus-reduced orbit of the anchor in shooting order. For unstable leaves
/// it runs from `F^-n` up to the anchor, for stable leaves from the anchor to `F^n`.
#[derive(Debug, Clone, PartialEq)]
struct Orbit {
    bases: Vec<TorusPoint>,
    points: Vec<Vec<f64>>,
    /// `F~(x_j) - x_(j+1)` up to an integer vector.
    defects: Vec<Vec<f64>>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn mat_vec(m: &DMatrix<f64>, v: &[f64]) -> Vec<f64> {
    (m * DVector::from_column_slice(v)).iter().copied().collect()
}

fn mat_t_vec(m: &DMatrix<f64>, v: &[f64]) -> Vec<f64> {
    (m.transpose() * DVector::from_column_slice(v)).iter().copied().collect()
}

impl Orbit {
    fn build(system: &FibrewiseSystem, b: &TorusPoint, anchor: &[f64], kind: LeafKind, depth: usize) -> Result<Self> {
        let mut bases = vec![b.clone()];
        let mut points = vec![anchor.to_vec()];
        for _ in 0..depth {
            let (cb, cx) = (bases.last().expect("non-empty"), points.last().expect("non-empty"));
            let (nb, nx) = match kind {
                LeafKind::Unstable => {
                    let pb = system.base().inverse(cb);
                    let x = system.invert_fibre(&pb, &LiftPoint::new(cx.clone()), ORBIT_TOL)?;
                    (pb, x)
                }
                LeafKind::Stable => {
                    let y = system.lift_map(cb.coords(), cx);
                    (system.base().forward(cb), LiftPoint::new(y))
                }
            };
            bases.push(nb);
            points.push(project(&nx).coords().to_vec());
        }
        if kind == LeafKind::Unstable {
            bases.reverse();
            points.reverse();
        }
        let defects = (0..depth)
            .map(|j| {
                let image = system.lift_map(bases[j].coords(), &points[j]);
                sub(&image, &points[j + 1]).iter().map(|v| v - v.round()).collect()
            })
            .collect();
        Ok(Self {
            bases,
            points,
            defects,
        })
    }

    fn depth(&self) -> usize {
        self.defects.len()
    }

    /// Relative forward step at orbit index `j`.
    fn forward(&self, system: &FibrewiseSystem, j: usize, delta: &[f64]) -> Vec<f64> {
        add(
            &self.defects[j],
            &system.lift_difference(self.bases[j].coords(), &self.points[j], delta),
        )
    }

    fn jacobian(&self, system: &FibrewiseSystem, j: usize, delta: &[f64]) -> DMatrix<f64> {
        system.jacobian_at(self.bases[j].coords(), &add(&self.points[j], delta))
    }

    /// Relative backward step: solves `forward(j, delta) = target`.
    fn backward(&self, system: &FibrewiseSystem, j: usize, target: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>)> {
        let rhs = sub(target, &self.defects[j]);
        let mut delta = mat_vec(system.matrix_inverse_f64(), &rhs);
        // relative scale: displacements far along the orbit are tiny
        let scale = max_abs(target) + max_abs(&self.defects[j]) + f64::MIN_POSITIVE;
        for _ in 0..INNER_MAX_STEPS {
            let r = sub(&self.forward(system, j, &delta), target);
            let jac = self.jacobian(system, j, &delta);
            if max_abs(&r) <= 4.0 * f64::EPSILON * scale {
                let inv = jac.try_inverse().ok_or_else(|| Error::SingularJacobian("leaf pull-back".into()))?;
                return Ok((delta, inv));
            }
            let step = jac
                .lu()
                .solve(&DVector::from_column_slice(&r))
                .ok_or_else(|| Error::SingularJacobian("leaf pull-back".into()))?;
            let next: Vec<f64> = delta.iter().zip(step.iter()).map(|(d, s)| d - s).collect();
            if max_abs(&sub(&next, &delta)) <= 2.0 * f64::EPSILON * max_abs(&delta) {
                delta = next;
                let jac = self.jacobian(system, j, &delta);
                let inv = jac.try_inverse().ok_or_else(|| Error::SingularJacobian("leaf pull-back".into()))?;
                return Ok((delta, inv));
            }
            delta = next;
        }
        Err(Error::GraphFailure("pull-back along the stable orbit did not converge".into()))
    }
}

/// Exact leaf evaluation by shooting.
struct Shooter<'a> {
    system: &'a FibrewiseSystem,
    kind: LeafKind,
    tangent: &'a DMatrix<f64>,
    normal: &'a DMatrix<f64>,
    orbit: &'a Orbit,
    linear_inverse: &'a DMatrix<f64>,
}

struct Shot {
    delta: Vec<f64>,
    param: Vec<f64>,
}

impl Shooter<'_> {
    /// End displacement and its derivative with respect to the shooting parameter.
    fn shoot(&self, c: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>)> {
        let n = self.orbit.depth();
        let mut delta = mat_vec(self.tangent, c);
        let mut jac = self.tangent.clone();
        match self.kind {
            LeafKind::Unstable => {
                for j in 0..n {
                    jac = self.orbit.jacobian(self.system, j, &delta) * jac;
                    delta = self.orbit.forward(self.system, j, &delta);
                }
            }
            LeafKind::Stable => {
                for j in (0..n).rev() {
                    let (prev, inv) = self.orbit.backward(self.system, j, &delta)?;
                    jac = inv * jac;
                    delta = prev;
                }
            }
        }
        Ok((delta, jac))
    }

    fn newton(&self, a: &[f64], mut c: Vec<f64>) -> Option<Shot> {
        let tol = 4.0 * f64::EPSILON * (1.0 + max_abs(a)) * (1 + self.orbit.depth()) as f64;
        let (mut delta, mut jac) = self.shoot(&c).ok()?;
        let mut res = sub(&mat_t_vec(self.tangent, &delta), a);
        let mut rn = max_abs(&res);
        for _ in 0..SHOOT_MAX_STEPS {
            if rn <= tol {
                return Some(Shot { delta, param: c });
            }
            let m = self.tangent.transpose() * &jac;
            let step = m.lu().solve(&DVector::from_column_slice(&res))?;
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..30 {
                let cand: Vec<f64> = c.iter().zip(step.iter()).map(|(ci, s)| ci - t * s).collect();
                if let Ok((d2, j2)) = self.shoot(&cand) {
                    let r2 = sub(&mat_t_vec(self.tangent, &d2), a);
                    let r2n = max_abs(&r2);
                    if r2n.is_finite() && r2n < rn {
                        c = cand;
                        delta = d2;
                        jac = j2;
                        res = r2;
                        rn = r2n;
                        accepted = true;
                        break;
                    }
                }
                t *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        // stagnation at rounding level
        if rn <= 1e3 * tol {
            Some(Shot { delta, param: c })
        } else {
            None
        }
    }

    /// Leaf point with tangent coordinate `a`, optionally starting from a known parameter.
    fn solve(&self, a: &[f64], guess: Option<&[f64]>) -> Result<Shot> {
        let linear = mat_vec(self.linear_inverse, a);
        if let Some(shot) = self.newton(a, guess.map(|g| g.to_vec()).unwrap_or(linear)) {
            return Ok(shot);
        }
        // continuation along the ray from the anchor
        let mut c = vec![0.0; a.len()];
        for s in 1..=CONTINUATION_STEPS {
            let t = s as f64 / CONTINUATION_STEPS as f64;
            let at: Vec<f64> = a.iter().map(|v| v * t).collect();
            let prev_t = (s - 1) as f64 / CONTINUATION_STEPS as f64;
            let scaled: Vec<f64> = if s == 1 {
                mat_vec(self.linear_inverse, &at)
            } else {
                c.iter().map(|v| v * t / prev_t).collect()
            };
            let shot = self.newton(&at, scaled).ok_or_else(|| {
                Error::GraphFailure(format!(
                    "shooting for the {:?} leaf failed at parameter {:?}",
                    self.kind, at
                ))
            })?;
            if s == CONTINUATION_STEPS {
                return Ok(shot);
            }
            c = shot.param;
        }
        unreachable!("continuation returns at its last step")
    }

    fn graph(&self, a: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let shot = self.solve(a, None)?;
        Ok((mat_t_vec(self.normal, &shot.delta), shot.param))
    }
}

/// A local leaf through `anchor`, stored as the graph of a map from the
/// tangent box `[-R, R]^m` to the normal directions of the cone frame.
#[derive(Debug, Clone, PartialEq)]
pub struct LeafSegment {
    pub kind: LeafKind,
    pub base: TorusPoint,
    pub anchor: LiftPoint,
    pub radius: f64,
    pub depth: usize,
    pub gamma: f64,
    /// Orthonormal tangent reference (d x m).
    pub tangent: DMatrix<f64>,
    /// Orthonormal normal reference (d x (d - m)).
    pub normal: DMatrix<f64>,
    /// Knots per tangent axis.
    pub knots: Vec<Vec<f64>>,
    /// Graph values at the tensor mesh, last axis fastest.
    pub values: Vec<Vec<f64>>,
    pub invariance_residual: f64,
    /// Whether the image leaf covered the half window in the invariance check.
    pub invariance_covered: bool,
    pub max_chord_slope: f64,
    orbit: Orbit,
    linear_inverse: DMatrix<f64>,
}

fn mesh_len(knots: &[Vec<f64>]) -> usize {
    knots.iter().map(Vec::len).product()
}

fn mesh_point(knots: &[Vec<f64>], mut index: usize) -> Vec<f64> {
    let mut out = vec![0.0; knots.len()];
    for (axis, k) in knots.iter().enumerate().rev() {
        out[axis] = k[index % k.len()];
        index /= k.len();
    }
    out
}

fn key(a: &[f64]) -> Vec<u64> {
    a.iter().map(|v| (v + 0.0).to_bits()).collect()
}

fn linear_inverse(system: &FibrewiseSystem, orbit: &Orbit, kind: LeafKind, tangent: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = orbit.depth();
    let d = system.fibre_dim();
    let mut jac = DMatrix::<f64>::identity(d, d);
    let zero = vec![0.0; d];
    for j in 0..n {
        let step = orbit.jacobian(system, j, &zero);
        jac = match kind {
            LeafKind::Unstable => step * jac,
            LeafKind::Stable => {
                let inv = step
                    .try_inverse()
                    .ok_or_else(|| Error::SingularJacobian("stable orbit Jacobian".into()))?;
                jac * inv
            }
        };
    }
    (tangent.transpose() * jac * tangent)
        .try_inverse()
        .ok_or_else(|| Error::GraphFailure("leaf tangent block is singular".into()))
}

impl LeafSegment {
    pub fn leaf_dim(&self) -> usize {
        self.tangent.ncols()
    }

    pub fn fibre_dim(&self) -> usize {
        self.tangent.nrows()
    }

    fn shooter<'a>(&'a self, system: &'a FibrewiseSystem) -> Shooter<'a> {
        Shooter {
            system,
            kind: self.kind,
            tangent: &self.tangent,
            normal: &self.normal,
            orbit: &self.orbit,
            linear_inverse: &self.linear_inverse,
        }
    }

    /// Graph value by multilinear interpolation; `None` outside the window.
    pub fn graph(&self, a: &[f64]) -> Option<Vec<f64>> {
        if a.len() != self.leaf_dim() {
            return None;
        }
        let mut cells = Vec::with_capacity(a.len());
        for (v, k) in a.iter().zip(&self.knots) {
            if !(*v >= k[0] && *v <= k[k.len() - 1]) {
                return None;
            }
            let i = k.partition_point(|t| t <= v).clamp(1, k.len() - 1) - 1;
            let t = (v - k[i]) / (k[i + 1] - k[i]);
            cells.push((i, t));
        }
        let m = a.len();
        let width = self.fibre_dim() - m;
        let mut out = vec![0.0; width];
        for corner in 0..(1usize << m) {
            let mut weight = 1.0;
            let mut index = 0;
            for (axis, &(i, t)) in cells.iter().enumerate() {
                let hi = (corner >> axis) & 1 == 1;
                weight *= if hi { t } else { 1.0 - t };
                index = index * self.knots[axis].len() + i + hi as usize;
            }
            if weight != 0.0 {
                for (o, v) in out.iter_mut().zip(&self.values[index]) {
                    *o += weight * v;
                }
            }
        }
        Some(out)
    }

    /// Graph value re-evaluated by shooting; `system` must be the one the leaf was computed for.
    pub fn exact_graph(&self, system: &FibrewiseSystem, a: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.leaf_dim(), a.len())?;
        Ok(self.shooter(system).graph(a)?.0)
    }

    /// Lift point `anchor + T a + N phi(a)` from the interpolated graph.
    pub fn point(&self, a: &[f64]) -> Option<Vec<f64>> {
        let phi = self.graph(a)?;
        Some(self.point_from(a, &phi))
    }

    fn point_from(&self, a: &[f64], phi: &[f64]) -> Vec<f64> {
        add(
            self.anchor.coords(),
            &add(&mat_vec(&self.tangent, a), &mat_vec(&self.normal, phi)),
        )
    }

    /// Mesh points as lift coordinates, in mesh order.
    pub fn mesh_points(&self) -> Vec<(Vec<f64>, Vec<f64>)> {
        (0..self.values.len())
            .map(|i| {
                let a = mesh_point(&self.knots, i);
                let y = self.point_from(&a, &self.values[i]);
                (a, y)
            })
            .collect()
    }

    /// CSV polyline: tangent parameters then lift coordinates.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let mut header: Vec<String> = (0..self.leaf_dim()).map(|i| format!("s{i}")).collect();
        header.extend((0..self.fibre_dim()).map(|i| format!("y{i}")));
        writeln!(out, "{}", header.join(","))?;
        for (a, y) in self.mesh_points() {
            let row: Vec<String> = a.iter().chain(&y).map(|v| format!("{v:.16e}")).collect();
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

fn max_chord_slope(knots: &[Vec<f64>], values: &[Vec<f64>]) -> f64 {
    let n = values.len();
    let points: Vec<Vec<f64>> = (0..n).map(|i| mesh_point(knots, i)).collect();
    let slope = |i: usize, j: usize| {
        let da = norm(&sub(&points[i], &points[j]));
        if da > 0.0 {
            norm(&sub(&values[i], &values[j])) / da
        } else {
            0.0
        }
    };
    if n <= 4096 {
        (0..n)
            .into_par_iter()
            .map(|i| ((i + 1)..n).map(|j| slope(i, j)).fold(0.0, f64::max))
            .reduce(|| 0.0, f64::max)
    } else {
        // neighbours along each axis
        let mut strides = vec![1usize; knots.len()];
        for axis in (0..knots.len().saturating_sub(1)).rev() {
            strides[axis] = strides[axis + 1] * knots[axis + 1].len();
        }
        (0..n)
            .into_par_iter()
            .map(|i| {
                let mut best: f64 = 0.0;
                for (axis, &s) in strides.iter().enumerate() {
                    if (i / s) % knots[axis].len() + 1 < knots[axis].len() {
                        best = best.max(slope(i, i + s));
                    }
                }
                best
            })
            .reduce(|| 0.0, f64::max)
    }
}

type Cache = HashMap<Vec<u64>, (Vec<f64>, Vec<f64>)>;

fn evaluate_all(shooter: &Shooter<'_>, cache: &mut Cache, params: Vec<Vec<f64>>) -> Result<()> {
    let missing: Vec<Vec<f64>> = params.into_iter().filter(|a| !cache.contains_key(&key(a))).collect();
    let results: Vec<Result<(Vec<f64>, Vec<f64>)>> = missing.par_iter().map(|a| shooter.graph(a)).collect();
    for (a, r) in missing.into_iter().zip(results) {
        cache.insert(key(&a), r?);
    }
    Ok(())
}

/// Window half-width and shooting depth.
#[derive(Debug, Clone, Copy)]
pub struct LeafSettings {
    pub radius: f64,
    pub depth: usize,
}

/// Computes the local leaf of `kind` through the lift `anchor` of the fibre over `b`.
pub fn compute_leaf(
    system: &FibrewiseSystem,
    cones: &ConeField,
    cert: &ConeCertificate,
    b: &TorusPoint,
    anchor: &LiftPoint,
    kind: LeafKind,
    settings: LeafSettings,
) -> Result<LeafSegment> {
    let leaf = compute_leaf_mesh(system, cones, cert, b, anchor, kind, settings)?;
    with_invariance(system, leaf)
}

fn frames(cones: &ConeField, kind: LeafKind) -> (DMatrix<f64>, DMatrix<f64>) {
    let d = cones.dim();
    let l = cones.stable_dim();
    let s = cones.frame().columns(0, l).clone_owned();
    let u = cones.frame().columns(l, d - l).clone_owned();
    match kind {
        LeafKind::Stable => (s, u),
        LeafKind::Unstable => (u, s),
    }
}

fn compute_leaf_mesh(
    system: &FibrewiseSystem,
    cones: &ConeField,
    cert: &ConeCertificate,
    b: &TorusPoint,
    anchor: &LiftPoint,
    kind: LeafKind,
    settings: LeafSettings,
) -> Result<LeafSegment> {
    let LeafSettings { radius, depth } = settings;
    if !cert.passed {
        return Err(Error::InvalidArgument("leaves require a passing cone certificate".into()));
    }
    if !(radius > 0.0 && radius <= MAX_RADIUS) {
        return Err(Error::InvalidArgument(format!("leaf radius must lie in (0, {MAX_RADIUS}], got {radius}")));
    }
    if depth == 0 {
        return Err(Error::InvalidArgument("leaf depth must be at least 1".into()));
    }
    check_dim(system.base_dim(), b.dim())?;
    check_dim(system.fibre_dim(), anchor.dim())?;
    check_dim(system.fibre_dim(), cones.dim())?;

    let (tangent, normal) = frames(cones, kind);
    let m = tangent.ncols();
    let orbit = Orbit::build(system, b, anchor.coords(), kind, depth)?;
    let lin = linear_inverse(system, &orbit, kind, &tangent)?;
    let shooter = Shooter {
        system,
        kind,
        tangent: &tangent,
        normal: &normal,
        orbit: &orbit,
        linear_inverse: &lin,
    };
    let max_knots = if m == 1 { MAX_KNOTS_1D } else { MAX_KNOTS_ND };
    let h0 = radius / INITIAL_HALF_KNOTS as f64;
    let min_h = radius / 256.0;
    let axis: Vec<f64> = (0..=2 * INITIAL_HALF_KNOTS)
        .map(|i| if i == INITIAL_HALF_KNOTS { 0.0 } else { -radius + h0 * i as f64 })
        .collect();
    let mut knots = vec![axis; m];
    let mut cache = Cache::new();
    let gamma = cones.gamma();

    for _ in 0..MAX_REFINE_ROUNDS {
        let all: Vec<Vec<f64>> = (0..mesh_len(&knots)).map(|i| mesh_point(&knots, i)).collect();
        evaluate_all(&shooter, &mut cache, all)?;
        // candidate midpoints per axis and interval, tested on every mesh line
        let mut mids = Vec::new();
        for ax in 0..m {
            if knots[ax].len() >= max_knots {
                continue;
            }
            for i in 0..knots[ax].len() - 1 {
                let mut lines = knots.clone();
                lines[ax] = vec![0.5 * (knots[ax][i] + knots[ax][i + 1])];
                for p in 0..mesh_len(&lines) {
                    mids.push((ax, i, mesh_point(&lines, p)));
                }
            }
        }
        evaluate_all(&shooter, &mut cache, mids.iter().map(|(_, _, a)| a.clone()).collect())?;
        let mut split: Vec<Vec<bool>> = knots.iter().map(|k| vec![false; k.len() - 1]).collect();
        for (ax, i, a) in &mids {
            let (lo, hi) = (knots[*ax][*i], knots[*ax][*i + 1]);
            let mut al = a.clone();
            al[*ax] = lo;
            let mut ah = a.clone();
            ah[*ax] = hi;
            let pl = &cache[&key(&al)].0;
            let ph = &cache[&key(&ah)].0;
            let pm = &cache[&key(a)].0;
            let interp: Vec<f64> = pl.iter().zip(ph).map(|(x, y)| 0.5 * (x + y)).collect();
            let err = norm(&sub(pm, &interp));
            let slope = norm(&sub(ph, pl)) / (hi - lo);
            if err > MESH_TOL || (slope > 0.5 * gamma && hi - lo > min_h) {
                split[*ax][*i] = true;
            }
        }
        let mut changed = false;
        for ax in 0..m {
            let mut next = Vec::with_capacity(knots[ax].len() * 2);
            for i in 0..knots[ax].len() - 1 {
                next.push(knots[ax][i]);
                if split[ax][i] && next.len() + (knots[ax].len() - i) < max_knots {
                    next.push(0.5 * (knots[ax][i] + knots[ax][i + 1]));
                    changed = true;
                }
            }
            next.push(*knots[ax].last().expect("non-empty axis"));
            knots[ax] = next;
        }
        if !changed {
            break;
        }
    }
    let all: Vec<Vec<f64>> = (0..mesh_len(&knots)).map(|i| mesh_point(&knots, i)).collect();
    evaluate_all(&shooter, &mut cache, all.clone())?;
    let values: Vec<Vec<f64>> = all.iter().map(|a| cache[&key(a)].0.clone()).collect();
    let slope = max_chord_slope(&knots, &values);
    if slope > gamma {
        return Err(Error::GraphFailure(format!(
            "chord slope {slope:.3e} exceeds the cone aperture {gamma}; reduce the window or refine the cones"
        )));
    }
    Ok(LeafSegment {
        kind,
        base: b.clone(),
        anchor: anchor.clone(),
        radius,
        depth,
        gamma,
        tangent,
        normal,
        knots,
        values,
        invariance_residual: f64::NAN,
        invariance_covered: false,
        max_chord_slope: slope,
        orbit,
        linear_inverse: lin,
    })
}

fn sample_params(m: usize, radius: f64) -> Vec<Vec<f64>> {
    let per = if m == 1 { INVARIANCE_SAMPLES_1D } else { INVARIANCE_SAMPLES_ND };
    let axis: Vec<f64> = (0..per)
        .map(|i| -radius + 2.0 * radius * i as f64 / (per - 1) as f64)
        .collect();
    let knots = vec![axis; m];
    (0..mesh_len(&knots)).map(|i| mesh_point(&knots, i)).collect()
}

/// Maps sample points of the leaf through `source` forward by one step and
/// measures their distance to the leaf through the image anchor.
fn with_invariance(system: &FibrewiseSystem, mut leaf: LeafSegment) -> Result<LeafSegment> {
    let (src_base, src_anchor, dst_base, dst_anchor) = match leaf.kind {
        LeafKind::Unstable => {
            let pb = system.base().inverse(&leaf.base);
            let pre = system.invert_fibre(&pb, &leaf.anchor, ORBIT_TOL)?;
            (pb, pre.into_coords(), leaf.base.clone(), leaf.anchor.coords().to_vec())
        }
        LeafKind::Stable => {
            let image = system.lift_map(leaf.base.coords(), leaf.anchor.coords());
            (leaf.base.clone(), leaf.anchor.coords().to_vec(), system.base().forward(&leaf.base), image)
        }
    };
    let build = |b: &TorusPoint, x: &[f64]| -> Result<(Orbit, DMatrix<f64>)> {
        let orbit = Orbit::build(system, b, x, leaf.kind, leaf.depth)?;
        let lin = linear_inverse(system, &orbit, leaf.kind, &leaf.tangent)?;
        Ok((orbit, lin))
    };
    let (src_orbit, src_lin) = build(&src_base, &src_anchor)?;
    let (dst_orbit, dst_lin) = build(&dst_base, &dst_anchor)?;
    let src = Shooter {
        system,
        kind: leaf.kind,
        tangent: &leaf.tangent,
        normal: &leaf.normal,
        orbit: &src_orbit,
        linear_inverse: &src_lin,
    };
    let dst = Shooter {
        orbit: &dst_orbit,
        linear_inverse: &dst_lin,
        ..src
    };
    // offset of the image of the source anchor from the target anchor
    let anchor_offset = {
        let image = system.lift_map(src_base.coords(), &src_anchor);
        sub(&image, &dst_anchor)
    };
    let m = leaf.leaf_dim();
    let radius = leaf.radius;
    let samples = sample_params(m, radius);
    let images: Vec<Result<Option<(Vec<f64>, f64)>>> = samples
        .par_iter()
        .map(|a| {
            let shot = src.solve(a, None)?;
            let moved = add(
                &anchor_offset,
                &system.lift_difference(src_base.coords(), &src_anchor, &shot.delta),
            );
            let t = mat_t_vec(&leaf.tangent, &moved);
            if max_abs(&t) > radius {
                return Ok(None);
            }
            let n = mat_t_vec(&leaf.normal, &moved);
            let (phi, _) = dst.graph(&t)?;
            Ok(Some((t, norm(&sub(&n, &phi)))))
        })
        .collect();
    let mut residual: f64 = 0.0;
    let mut lo = vec![f64::INFINITY; m];
    let mut hi = vec![f64::NEG_INFINITY; m];
    for r in images {
        if let Some((t, dist)) = r? {
            residual = residual.max(dist);
            for i in 0..m {
                lo[i] = lo[i].min(t[i]);
                hi[i] = hi[i].max(t[i]);
            }
        }
    }
    leaf.invariance_covered = match leaf.kind {
        LeafKind::Unstable => lo.iter().zip(&hi).all(|(l, h)| *l <= -0.5 * radius && *h >= 0.5 * radius),
        LeafKind::Stable => lo.iter().all(|l| l.is_finite()),
    };
    leaf.invariance_residual = residual;
    Ok(leaf)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntersectionStatus {
    Resolved,
    /// No intersection inside both windows; says nothing about the global leaves.
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntersectionReport {
    pub status: IntersectionStatus,
    pub multiplicity: usize,
    pub points: Vec<Vec<f64>>,
    /// Smallest angle between the leaves at any intersection, radians.
    pub min_crossing_angle: f64,
    /// Largest distance of a reported point from either leaf, re-evaluated exactly.
    pub max_residual: f64,
    pub starts: usize,
    pub converged_starts: usize,
}

fn derivative(leaf: &LeafSegment, system: &FibrewiseSystem, a: &[f64]) -> Result<DMatrix<f64>> {
    let m = a.len();
    let w = leaf.fibre_dim() - m;
    let h = 1e-5 * leaf.radius.max(1.0);
    let mut out = DMatrix::<f64>::zeros(w, m);
    for i in 0..m {
        let mut ap = a.to_vec();
        let mut am = a.to_vec();
        ap[i] += h;
        am[i] -= h;
        let fp = leaf.exact_graph(system, &ap)?;
        let fm = leaf.exact_graph(system, &am)?;
        for r in 0..w {
            out[(r, i)] = (fp[r] - fm[r]) / (2.0 * h);
        }
    }
    Ok(out)
}

/// Intersections of a stable and an unstable leaf in the same fibre cover,
/// from a mesh of starts, polished against exact leaf evaluations.
pub fn find_intersections(
    system: &FibrewiseSystem,
    first: &LeafSegment,
    second: &LeafSegment,
) -> Result<IntersectionReport> {
    if first.kind == second.kind {
        return Err(Error::InvalidArgument("intersections need one stable and one unstable leaf".into()));
    }
    let (ws, wu) = if first.kind == LeafKind::Stable {
        (first, second)
    } else {
        (second, first)
    };
    check_dim(ws.fibre_dim(), wu.fibre_dim())?;
    if ws.base != wu.base {
        return Err(Error::InvalidArgument("leaves lie over different base points".into()));
    }
    if (&ws.tangent - &wu.normal).amax() > 1e-12 || (&ws.normal - &wu.tangent).amax() > 1e-12 {
        return Err(Error::InvalidArgument("leaves were computed for different cone frames".into()));
    }
    let s = &ws.tangent;
    let u = &ws.normal;
    let offset = sub(ws.anchor.coords(), wu.anchor.coords());
    let c0 = mat_t_vec(u, &offset);
    let a0: Vec<f64> = mat_t_vec(s, &offset).iter().map(|v| -v).collect();
    // a = a0 + phi_u(c), c = c0 + phi_s(a)
    let step = |a: &[f64]| -> Option<(Vec<f64>, Vec<f64>)> {
        let c = add(&c0, &ws.graph(a)?);
        let a_next = add(&a0, &wu.graph(&c)?);
        Some((a_next, c))
    };

    let m = s.ncols();
    let axis: Vec<f64> = (0..STARTS_PER_AXIS)
        .map(|i| -ws.radius + 2.0 * ws.radius * i as f64 / (STARTS_PER_AXIS - 1) as f64)
        .collect();
    let start_knots = vec![axis; m];
    let starts: Vec<Vec<f64>> = (0..mesh_len(&start_knots)).map(|i| mesh_point(&start_knots, i)).collect();
    let converged: Vec<Vec<f64>> = starts
        .iter()
        .filter_map(|start| {
            let mut a = start.clone();
            for _ in 0..FIXED_POINT_MAX_STEPS {
                let (next, _) = step(&a)?;
                let change = max_abs(&sub(&next, &a));
                a = next;
                if change <= 1e-13 * (1.0 + max_abs(&a)) {
                    return Some(a);
                }
            }
            None
        })
        .collect();
    let converged_starts = converged.len();

    let mut roots: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = Vec::new();
    for a_start in converged {
        let mut a = a_start;
        let mut c = vec![0.0; wu.leaf_dim()];
        for _ in 0..POLISH_STEPS {
            c = add(&c0, &ws.exact_graph(system, &a)?);
            let next = add(&a0, &wu.exact_graph(system, &c)?);
            let change = max_abs(&sub(&next, &a));
            a = next;
            if change <= 4.0 * f64::EPSILON * (1.0 + max_abs(&a)) {
                break;
            }
        }
        if max_abs(&a) > ws.radius || max_abs(&c) > wu.radius {
            continue;
        }
        let phi = ws.exact_graph(system, &a)?;
        let y = ws.point_from(&a, &phi);
        if roots.iter().all(|(p, _, _)| norm(&sub(p, &y)) > ROOT_CLUSTER_TOL) {
            roots.push((y, a, c));
        }
    }

    let mut min_angle = f64::INFINITY;
    let mut max_residual: f64 = 0.0;
    for (y, a, c) in &roots {
        let ts = orthonormalize(&(s + u * derivative(ws, system, a)?));
        let tu = orthonormalize(&(u + s * derivative(wu, system, c)?));
        min_angle = min_angle.min(transversality(&ts, &tu).clamp(0.0, 1.0).asin());
        let rs = norm(&sub(&mat_t_vec(u, &sub(y, ws.anchor.coords())), &ws.exact_graph(system, a)?));
        let ru = norm(&sub(&mat_t_vec(s, &sub(y, wu.anchor.coords())), &wu.exact_graph(system, c)?));
        max_residual = max_residual.max(rs).max(ru);
    }
    Ok(IntersectionReport {
        status: if roots.is_empty() {
            IntersectionStatus::Inconclusive
        } else {
            IntersectionStatus::Resolved
        },
        multiplicity: roots.len(),
        points: roots.into_iter().map(|(y, _, _)| y).collect(),
        min_crossing_angle: min_angle,
        max_residual,
        starts: starts.len(),
        converged_starts,
    })
}

/// Portion of the segment `p -> q` inside the box, as parameters in `[0, 1]`.
fn clip(p: &[f64], q: &[f64], lo: &[f64], hi: &[f64]) -> Option<(f64, f64)> {
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    for i in 0..p.len() {
        let dp = q[i] - p[i];
        for (num, den) in [(p[i] - lo[i], -dp), (hi[i] - p[i], dp)] {
            if den == 0.0 {
                if num < 0.0 {
                    return None;
                }
            } else {
                let t = num / den;
                if den < 0.0 {
                    t0 = t0.max(t);
                } else {
                    t1 = t1.min(t);
                }
            }
        }
    }
    (t0 <= t1).then_some((t0, t1))
}

/// Arc length of a polyline between its first entry into and last exit from the box.
fn clipped_arc_length(points: &[Vec<f64>], lo: &[f64], hi: &[f64]) -> f64 {
    let segs: Vec<Option<(f64, f64)>> = points.windows(2).map(|w| clip(&w[0], &w[1], lo, hi)).collect();
    let Some(first) = segs.iter().position(Option::is_some) else {
        return 0.0;
    };
    let last = segs.iter().rposition(Option::is_some).expect("some segment intersects");
    let mut total = 0.0;
    for (i, seg) in segs.iter().enumerate().take(last + 1).skip(first) {
        let len = norm(&sub(&points[i + 1], &points[i]));
        let (t0, t1) = match seg {
            Some((t0, t1)) if i == first && i == last => (*t0, *t1),
            Some((t0, _)) if i == first => (*t0, 1.0),
            Some((_, t1)) if i == last => (0.0, *t1),
            _ => (0.0, 1.0),
        };
        total += (t1 - t0) * len;
    }
    total
}

/// Upper bound on the intrinsic distance between points of each leaf that lie
/// in the box `K = prod [lo_i, hi_i]`, maximised over the leaves. For leaves of
/// dimension above one, paths along the mesh axes are summed.
pub fn leaf_distance_bound(leaves: &[LeafSegment], bounds: &[(f64, f64)]) -> Result<f64> {
    let lo: Vec<f64> = bounds.iter().map(|b| b.0).collect();
    let hi: Vec<f64> = bounds.iter().map(|b| b.1).collect();
    let mut best: f64 = 0.0;
    for leaf in leaves {
        check_dim(leaf.fibre_dim(), bounds.len())?;
        let mesh = leaf.mesh_points();
        let m = leaf.leaf_dim();
        let mut total = 0.0;
        for ax in 0..m {
            let mut lines = leaf.knots.clone();
            lines[ax] = vec![0.0];
            let mut widest: f64 = 0.0;
            for p in 0..mesh_len(&lines) {
                let fixed = mesh_point(&lines, p);
                let line: Vec<Vec<f64>> = mesh
                    .iter()
                    .filter(|(a, _)| (0..m).all(|i| i == ax || a[i] == fixed[i]))
                    .map(|(_, y)| y.clone())
                    .collect();
                widest = widest.max(clipped_arc_length(&line, &lo, &hi));
            }
            total += widest;
        }
        best = best.max(total);
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cones::check_cone_invariance;
    use crate::linear::{compute_splitting, IntegerMatrix};
    use crate::system::{BaseSystem, TrigPolynomial};
    use crate::torus::Grid;
    use approx::assert_abs_diff_eq;
    use std::sync::OnceLock;

    fn cat() -> IntegerMatrix {
        IntegerMatrix::from_rows(&[vec![2, 1], vec![1, 1]]).unwrap()
    }

    fn system(eps: f64) -> FibrewiseSystem {
        FibrewiseSystem::new(
            BaseSystem::translation(vec![2f64.sqrt() - 1.0]),
            cat(),
            TrigPolynomial::zero(1, 2),
            TrigPolynomial::single(3, vec![0, 1, 0], vec![0.0, 0.0], vec![eps, 0.0]),
        )
        .unwrap()
    }

    type Setup = (FibrewiseSystem, ConeField, ConeCertificate);

    fn setup(eps: f64) -> Setup {
        static AFFINE: OnceLock<Setup> = OnceLock::new();
        static PERTURBED: OnceLock<Setup> = OnceLock::new();
        let cell = if eps == 0.0 { &AFFINE } else { &PERTURBED };
        assert!(eps == 0.0 || eps == 0.05);
        cell.get_or_init(|| {
            let f = system(eps);
            let cones = ConeField::from_splitting(&compute_splitting(&cat()).unwrap(), 0.5).unwrap();
            let cert = check_cone_invariance(&f, &cones, 1, &Grid::uniform(3, 64).unwrap()).unwrap();
            assert!(cert.passed);
            (f, cones, cert)
        })
        .clone()
    }

    fn b0() -> TorusPoint {
        TorusPoint::new(vec![0.3])
    }

    const SET: LeafSettings = LeafSettings { radius: 1.0, depth: 30 };

    #[test]
    fn affine_leaves_are_straight() {
        let (f, cones, cert) = setup(0.0);
        for kind in [LeafKind::Stable, LeafKind::Unstable] {
            let leaf = compute_leaf(&f, &cones, &cert, &b0(), &LiftPoint::new(vec![0.2, 0.7]), kind, SET).unwrap();
            assert!(leaf.values.iter().all(|v| v[0].abs() < 1e-10), "{kind:?}");
            assert!(leaf.invariance_residual < 1e-10);
            assert!(leaf.invariance_covered);
        }
    }

    #[test]
    fn perturbed_leaves_respect_cones_and_are_invariant() {
        let (f, cones, cert) = setup(0.05);
        for kind in [LeafKind::Stable, LeafKind::Unstable] {
            let leaf = compute_leaf(&f, &cones, &cert, &b0(), &LiftPoint::new(vec![0.2, 0.7]), kind, SET).unwrap();
            assert!(leaf.max_chord_slope <= 0.5);
            assert!(leaf.invariance_residual < 10.0 * MESH_TOL, "{kind:?} {}", leaf.invariance_residual);
            assert!(leaf.invariance_covered);
            let zero = leaf.graph(&[0.0]).unwrap();
            assert!(zero[0].abs() < 1e-13);
            assert!(leaf.values.iter().any(|v| v[0].abs() > 1e-4));
        }
    }

    #[test]
    fn deeper_windows_agree() {
        let (f, cones, cert) = setup(0.05);
        let anchor = LiftPoint::new(vec![0.6, 0.1]);
        for kind in [LeafKind::Stable, LeafKind::Unstable] {
            let a = compute_leaf(&f, &cones, &cert, &b0(), &anchor, kind, SET).unwrap();
            let b = compute_leaf(&f, &cones, &cert, &b0(), &anchor, kind, LeafSettings { depth: 40, ..SET }).unwrap();
            for t in [-0.9, -0.3, 0.0, 0.45, 1.0] {
                let x = a.exact_graph(&f, &[t]).unwrap()[0];
                let y = b.exact_graph(&f, &[t]).unwrap()[0];
                assert!((x - y).abs() < 1e-12 + 0.382f64.powi(30), "{kind:?} {t}");
            }
        }
    }

    #[test]
    fn affine_intersection_matches_linear_solve() {
        let (f, cones, cert) = setup(0.0);
        let split = compute_splitting(&cat()).unwrap();
        let ws = compute_leaf(&f, &cones, &cert, &b0(), &LiftPoint::new(vec![0.0, 0.0]), LeafKind::Stable, SET).unwrap();
        let wu = compute_leaf(&f, &cones, &cert, &b0(), &LiftPoint::new(vec![0.5, 0.5]), LeafKind::Unstable, SET).unwrap();
        let r = find_intersections(&f, &ws, &wu).unwrap();
        assert_eq!(r.status, IntersectionStatus::Resolved);
        assert_eq!(r.multiplicity, 1);
        let expected = split.stable_projector() * DVector::from_vec(vec![0.5, 0.5]);
        assert_abs_diff_eq!(r.points[0][0], expected[0], epsilon = 1e-8);
        assert_abs_diff_eq!(r.points[0][1], expected[1], epsilon = 1e-8);
        assert_abs_diff_eq!(r.min_crossing_angle, std::f64::consts::FRAC_PI_2, epsilon = 1e-6);
    }

    #[test]
    fn leaves_through_same_point_meet_at_anchor() {
        let (f, cones, cert) = setup(0.05);
        let p = LiftPoint::new(vec![0.25, 0.4]);
        let ws = compute_leaf(&f, &cones, &cert, &b0(), &p, LeafKind::Stable, SET).unwrap();
        let wu = compute_leaf(&f, &cones, &cert, &b0(), &p, LeafKind::Unstable, SET).unwrap();
        let r = find_intersections(&f, &wu, &ws).unwrap();
        assert_eq!(r.multiplicity, 1);
        assert!(norm(&sub(&r.points[0], p.coords())) < 1e-12);
        assert!(r.max_residual < 1e-12);
    }

    #[test]
    fn distant_leaves_are_inconclusive() {
        let (f, cones, cert) = setup(0.0);
        let small = LeafSettings { radius: 0.1, depth: 20 };
        let ws = compute_leaf(&f, &cones, &cert, &b0(), &LiftPoint::new(vec![0.0, 0.0]), LeafKind::Stable, small).unwrap();
        let wu = compute_leaf(&f, &cones, &cert, &b0(), &LiftPoint::new(vec![3.0, 3.0]), LeafKind::Unstable, small).unwrap();
        let r = find_intersections(&f, &ws, &wu).unwrap();
        assert_eq!(r.status, IntersectionStatus::Inconclusive);
        assert_eq!(r.multiplicity, 0);
    }

    #[test]
    fn eigenline_length_in_unit_box() {
        let (f, cones, cert) = setup(0.0);
        let wu = compute_leaf(&f, &cones, &cert, &b0(), &LiftPoint::new(vec![0.5, 0.5]), LeafKind::Unstable, SET).unwrap();
        let bound = leaf_distance_bound(&[wu], &[(0.0, 1.0), (0.0, 1.0)]).unwrap();
        let slope = (5f64.sqrt() - 1.0) / 2.0;
        assert_abs_diff_eq!(bound, (1.0 + slope * slope).sqrt(), epsilon = 1e-8);
    }

    #[test]
    fn stable_leaf_contracts() {
        let (f, cones, cert) = setup(0.05);
        let anchor = LiftPoint::new(vec![0.3, 0.9]);
        let ws = compute_leaf(&f, &cones, &cert, &b0(), &anchor, LeafKind::Stable, SET).unwrap();
        let exact = |t: f64| ws.point_from(&[t], &ws.exact_graph(&f, &[t]).unwrap());
        let (p, q) = (exact(0.0), exact(0.2));
        let d0 = norm(&sub(&p, &q));
        let (mut bp, mut x, mut y) = (b0(), p, q);
        for n in 1..=10 {
            x = f.lift_map(bp.coords(), &x);
            y = f.lift_map(bp.coords(), &y);
            bp = f.base().forward(&bp);
            let bound = (1.0 + 0.25f64).sqrt() * cert.lambda_prime.powi(n) * d0;
            assert!(norm(&sub(&x, &y)) <= bound, "{n}");
        }
    }

    #[test]
    fn clip_handles_boxes() {
        let lo = [0.0, 0.0];
        let hi = [1.0, 1.0];
        assert_eq!(clip(&[-1.0, 0.5], &[2.0, 0.5], &lo, &hi), Some((1.0 / 3.0, 2.0 / 3.0)));
        assert_eq!(clip(&[-1.0, 2.0], &[2.0, 2.0], &lo, &hi), None);
        let pts = vec![vec![-1.0, 0.5], vec![0.5, 0.5], vec![2.0, 0.5]];
        assert_abs_diff_eq!(clipped_arc_length(&pts, &lo, &hi), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn invalid_requests_are_rejected() {
        let (f, cones, cert) = setup(0.0);
        let p = LiftPoint::new(vec![0.0, 0.0]);
        assert!(compute_leaf(&f, &cones, &cert, &b0(), &p, LeafKind::Stable, LeafSettings { radius: 11.0, depth: 5 }).is_err());
        assert!(compute_leaf(&f, &cones, &cert, &b0(), &p, LeafKind::Stable, LeafSettings { radius: 1.0, depth: 0 }).is_err());
        let ws = compute_leaf(&f, &cones, &cert, &b0(), &p, LeafKind::Stable, SET).unwrap();
        assert!(find_intersections(&f, &ws, &ws).is_err());
    }

    #[test]
    fn csv_lists_mesh() {
        let (f, cones, cert) = setup(0.0);
        let ws = compute_leaf(&f, &cones, &cert, &b0(), &LiftPoint::new(vec![0.0, 0.0]), LeafKind::Stable, SET).unwrap();
        let mut buf = Vec::new();
        ws.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "s0,y0,y1");
        assert_eq!(text.lines().count(), ws.values.len() + 1);
    }
}
