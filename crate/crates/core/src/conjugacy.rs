//! Series solution of the twisted cohomological equation
//! `A w(e) - w(F(e)) = r(e)` and the conjugacy `h(e) = e + w(e)` between a
//! fibrewise hyperbolic system and its affine model.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linear::{compute_splitting, op_norm, AffineModel, HyperbolicSplitting};
use crate::system::{induced_homology_matrix, DisplacementField, FibrewiseSystem};
use crate::torus::{project, torus_distance, BundlePoint, Grid, LiftPoint, TorusPoint};

/// Truncations beyond this are refused.
pub const MAX_TRUNCATION: usize = 5000;

/// Allowance for rounding in the direct evaluation of both sides of `h F = G h`.
pub const EVALUATION_ALLOWANCE: f64 = 1e-12;

/// Pair distance used for the fixed-scale separation in the injectivity scan.
pub const INJECTIVITY_PAIR_DISTANCE: f64 = 0.1;

const DEGREE_TOL: f64 = 1e-10;
const DEGREE_SAMPLES: usize = 64;
const INJECTIVITY_FIBRES: usize = 8;
const INJECTIVITY_FIBRE_POINTS: usize = 400;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesParameters {
    pub truncation: usize,
    pub tol: f64,
    pub tail_bound: f64,
    pub lambda: f64,
    pub growth_constant: f64,
    pub sup_bound: f64,
}

impl SeriesParameters {
    /// `C lambda^(N+1) M / (1 - lambda)`.
    pub fn tail_bound_for(growth_constant: f64, lambda: f64, sup_bound: f64, truncation: usize) -> f64 {
        growth_constant * lambda.powi(truncation as i32 + 1) * sup_bound / (1.0 - lambda)
    }

    /// Smallest truncation `N >= 1` whose tail is below `tol / 4`.
    pub fn choose(split: &HyperbolicSplitting, sup_bound: f64, tol: f64) -> Result<Self> {
        if !(tol > 0.0) || !tol.is_finite() {
            return Err(Error::InvalidArgument(format!("tolerance must be positive, got {tol}")));
        }
        if !(sup_bound >= 0.0) || !sup_bound.is_finite() {
            return Err(Error::InvalidArgument(format!("displacement bound must be finite, got {sup_bound}")));
        }
        let (c, lambda) = (split.growth_constant(), split.lambda());
        let n = (1..=MAX_TRUNCATION)
            .find(|&n| Self::tail_bound_for(c, lambda, sup_bound, n) < tol / 4.0)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "no truncation up to {MAX_TRUNCATION} reaches tolerance {tol} (lambda = {lambda})"
                ))
            })?;
        Ok(Self::with_truncation(split, sup_bound, tol, n))
    }

    pub fn with_truncation(split: &HyperbolicSplitting, sup_bound: f64, tol: f64, truncation: usize) -> Self {
        let (c, lambda) = (split.growth_constant(), split.lambda());
        Self {
            truncation,
            tol,
            tail_bound: Self::tail_bound_for(c, lambda, sup_bound, truncation),
            lambda,
            growth_constant: c,
            sup_bound,
        }
    }
}

/// Individual summands of the two series at a point.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesTerms {
    /// `-A^n P_s r(F^-(n+1) e)`, `n = 0..=N`.
    pub stable: Vec<Vec<f64>>,
    /// `A^-(n+1) P_u r(F^n e)`, `n = 0..=N`.
    pub unstable: Vec<Vec<f64>>,
}

/// Evaluator for `w~` and `h`, re-summing the series at every query.
#[derive(Debug, Clone)]
pub struct Conjugacy {
    system: FibrewiseSystem,
    model: AffineModel,
    split: HyperbolicSplitting,
    displacement: DisplacementField,
    params: SeriesParameters,
    stable_weights: Vec<DMatrix<f64>>,
    unstable_weights: Vec<DMatrix<f64>>,
    inversion_tol: f64,
}

impl Conjugacy {
    pub fn new(
        system: FibrewiseSystem,
        model: AffineModel,
        split: HyperbolicSplitting,
        displacement: DisplacementField,
        params: SeriesParameters,
    ) -> Self {
        let n = params.truncation;
        let stable_weights = (0..=n).map(|i| split.stable_power(i)).collect();
        let unstable_weights = (0..=n).map(|i| split.unstable_inverse_power(i + 1)).collect();
        let a_norm = op_norm(system.matrix_f64());
        // invert_fibre floors this at the attainable precision
        let inversion_tol = params.tol / (10.0 * (n as f64) * a_norm.powi(n as i32)).max(1.0);
        Self {
            system,
            model,
            split,
            displacement,
            params,
            stable_weights,
            unstable_weights,
            inversion_tol,
        }
    }

    /// The same solution with a different truncation.
    pub fn with_truncation(&self, truncation: usize) -> Self {
        let params = SeriesParameters::with_truncation(
            &self.split,
            self.params.sup_bound,
            self.params.tol,
            truncation,
        );
        Self::new(
            self.system.clone(),
            self.model.clone(),
            self.split.clone(),
            self.displacement.clone(),
            params,
        )
    }

    pub fn parameters(&self) -> &SeriesParameters {
        &self.params
    }

    pub fn system(&self) -> &FibrewiseSystem {
        &self.system
    }

    pub fn model(&self) -> &AffineModel {
        &self.model
    }

    pub fn splitting(&self) -> &HyperbolicSplitting {
        &self.split
    }

    pub fn displacement(&self) -> &DisplacementField {
        &self.displacement
    }

    fn terms_lift(&self, b: &TorusPoint, x: &[f64]) -> Result<SeriesTerms> {
        check_dim(self.system.base_dim(), b.dim())?;
        check_dim(self.system.fibre_dim(), x.len())?;
        let n = self.params.truncation;
        let r = |b: &TorusPoint, x: &[f64]| DVector::from_vec(self.displacement.eval(b.coords(), x));

        let mut stable = Vec::with_capacity(n + 1);
        let mut pb = b.clone();
        let mut px = LiftPoint::new(x.to_vec());
        for weight in &self.stable_weights {
            pb = self.system.base().inverse(&pb);
            let prev = self.system.invert_fibre(&pb, &px, self.inversion_tol)?;
            px = project(&prev).lift();
            let term = -(weight * r(&pb, px.coords()));
            stable.push(term.iter().copied().collect());
        }

        let mut unstable = Vec::with_capacity(n + 1);
        let mut qb = b.clone();
        let mut qx = x.to_vec();
        for (i, weight) in self.unstable_weights.iter().enumerate() {
            let term = weight * r(&qb, &qx);
            unstable.push(term.iter().copied().collect());
            if i < n {
                let next = self.system.lift_map(qb.coords(), &qx);
                qb = self.system.base().forward(&qb);
                qx = project(&LiftPoint::new(next)).coords().to_vec();
            }
        }
        Ok(SeriesTerms { stable, unstable })
    }

    /// Summands of both series at `e`.
    pub fn series_terms(&self, e: &BundlePoint) -> Result<SeriesTerms> {
        self.terms_lift(&e.base, e.fibre.coords())
    }

    /// `w~(b, x)` at a lift `x` of the fibre coordinate.
    pub fn w_lift(&self, b: &TorusPoint, x: &[f64]) -> Result<Vec<f64>> {
        let t = self.terms_lift(b, x)?;
        let mut w = vec![0.0; x.len()];
        for term in t.stable.iter().chain(&t.unstable) {
            for (wi, ti) in w.iter_mut().zip(term) {
                *wi += ti;
            }
        }
        Ok(w)
    }

    pub fn w(&self, e: &BundlePoint) -> Result<Vec<f64>> {
        self.w_lift(&e.base, e.fibre.coords())
    }

    /// `h~_b(x) = x + w~(b, x)`.
    pub fn h_lift(&self, b: &TorusPoint, x: &[f64]) -> Result<Vec<f64>> {
        let w = self.w_lift(b, x)?;
        Ok(x.iter().zip(&w).map(|(xi, wi)| xi + wi).collect())
    }

    /// `h(e)`, the identity on the base.
    pub fn h(&self, e: &BundlePoint) -> Result<BundlePoint> {
        let y = self.h_lift(&e.base, e.fibre.coords())?;
        Ok(BundlePoint::new(e.base.clone(), project(&LiftPoint::new(y))))
    }

    /// `|A w~(e) - w~(F(e)) - r~(e)|`.
    pub fn cohomology_residual(&self, e: &BundlePoint) -> Result<f64> {
        let w = DVector::from_vec(self.w(e)?);
        let wf = DVector::from_vec(self.w(&self.system.evaluate(e))?);
        let r = DVector::from_vec(self.displacement.eval_point(e));
        Ok((self.system.matrix_f64() * w - wf - r).norm())
    }

    /// `d(h(F(e)), G(h(e)))` for the given pair of maps.
    pub fn conjugacy_residual_against(
        &self,
        system: &FibrewiseSystem,
        model: &AffineModel,
        e: &BundlePoint,
    ) -> Result<f64> {
        let left = self.h(&system.evaluate(e))?;
        let right = model.apply(&self.h(e)?)?;
        torus_distance(&left.fibre, &right.fibre)
    }

    pub fn conjugacy_residual(&self, e: &BundlePoint) -> Result<f64> {
        self.conjugacy_residual_against(&self.system, &self.model, e)
    }

    /// Largest `|h~_b(x + m) - h~_b(x) - m|` over the fibre basis vectors `m`.
    pub fn degree_defect(&self, e: &BundlePoint) -> Result<f64> {
        let x = e.fibre.coords();
        let h0 = self.h_lift(&e.base, x)?;
        let mut worst: f64 = 0.0;
        for j in 0..x.len() {
            let mut xm = x.to_vec();
            xm[j] += 1.0;
            let hm = self.h_lift(&e.base, &xm)?;
            for (i, (a, b)) in hm.iter().zip(&h0).enumerate() {
                let shift = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((a - b - shift).abs());
            }
        }
        Ok(worst)
    }
}

/// Truncated `w~s(e) + w~u(e)` for the displacement between `system` and its model.
pub fn solve_cohomological(
    system: &FibrewiseSystem,
    displacement: &DisplacementField,
    split: &HyperbolicSplitting,
    params: &SeriesParameters,
    e: &BundlePoint,
) -> Result<LiftPoint> {
    let c = Conjugacy::new(
        system.clone(),
        system.affine_model(),
        split.clone(),
        displacement.clone(),
        *params,
    );
    Ok(LiftPoint::new(c.w(e)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualStats {
    pub max: f64,
    pub mean: f64,
    pub samples: usize,
}

impl ResidualStats {
    pub fn from_values(values: &[f64]) -> Self {
        let max = values.iter().copied().fold(0.0, f64::max);
        let mean = if values.is_empty() {
            0.0
        } else {
            values.iter().sum::<f64>() / values.len() as f64
        };
        Self {
            max,
            mean,
            samples: values.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConjugacySummary {
    pub parameters: SeriesParameters,
    pub grid: Vec<usize>,
    pub displacement_grid_max: f64,
    pub cohomology_residual: ResidualStats,
    pub conjugacy_residual: ResidualStats,
    pub degree_check: bool,
    pub degree_defect: f64,
    pub injectivity_margin: f64,
}

#[derive(Debug, Clone)]
pub struct ConjugacyResult {
    pub conjugacy: Conjugacy,
    pub summary: ConjugacySummary,
    /// `(point, w~(point))` over the grid.
    pub samples: Vec<(BundlePoint, Vec<f64>)>,
}

impl ConjugacyResult {
    /// CSV with base coordinates, fibre coordinates and `w~` per grid point.
    pub fn write_w_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let k = self.conjugacy.system.base_dim();
        let d = self.conjugacy.system.fibre_dim();
        let mut header: Vec<String> = (0..k).map(|i| format!("b{i}")).collect();
        header.extend((0..d).map(|i| format!("x{i}")));
        header.extend((0..d).map(|i| format!("w{i}")));
        writeln!(out, "{}", header.join(","))?;
        for (e, w) in &self.samples {
            let row: Vec<String> = e
                .joint_coords()
                .iter()
                .chain(w)
                .map(|v| format!("{v:.16e}"))
                .collect();
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

fn check_compatible(system: &FibrewiseSystem, model: &AffineModel) -> Result<()> {
    check_dim(model.fibre_dim(), system.fibre_dim())?;
    if system.base() != model.base() {
        return Err(Error::BaseMismatch);
    }
    let induced = induced_homology_matrix(system)?;
    if &induced != model.matrix() {
        return Err(Error::HomologyMismatch {
            expected: model.matrix().rows(),
            found: induced.rows(),
        });
    }
    Ok(())
}

/// Ratio `d(h(x), h(y)) / d(x, y)` minimised over pairs of grid points in a few fibres.
fn grid_injectivity(samples: &[(BundlePoint, BundlePoint)], grid: &Grid, base_dim: usize) -> f64 {
    let fibre_len: usize = grid.resolution()[base_dim..].iter().product();
    let n_fibres = samples.len() / fibre_len.max(1);
    let fibre_stride = (n_fibres / INJECTIVITY_FIBRES).max(1);
    let point_stride = fibre_len.div_ceil(INJECTIVITY_FIBRE_POINTS).max(1);
    (0..n_fibres)
        .step_by(fibre_stride)
        .take(INJECTIVITY_FIBRES)
        .map(|f| {
            let fibre: Vec<&(BundlePoint, BundlePoint)> = samples[f * fibre_len..(f + 1) * fibre_len]
                .iter()
                .step_by(point_stride)
                .collect();
            (0..fibre.len())
                .into_par_iter()
                .map(|i| {
                    let mut best = f64::INFINITY;
                    for j in (i + 1)..fibre.len() {
                        let dx = torus_distance(&fibre[i].0.fibre, &fibre[j].0.fibre).unwrap_or(0.0);
                        if dx > 0.0 {
                            let dh = torus_distance(&fibre[i].1.fibre, &fibre[j].1.fibre).unwrap_or(0.0);
                            best = best.min(dh / dx);
                        }
                    }
                    best
                })
                .reduce(|| f64::INFINITY, f64::min)
        })
        .fold(f64::INFINITY, f64::min)
}

/// Builds `h` for `system` against `model`, refusing systems that do not
/// induce the model's matrix on homology or have a different base map.
pub fn build_conjugacy(
    system: &FibrewiseSystem,
    model: &AffineModel,
    tol: f64,
    grid: &Grid,
) -> Result<ConjugacyResult> {
    check_compatible(system, model)?;
    let k = system.base_dim();
    check_dim(k + system.fibre_dim(), grid.dim())?;
    let split = compute_splitting(model.matrix())?;
    let displacement = system.displacement(model)?;
    let params = SeriesParameters::choose(&split, displacement.sup_bound(), tol)?;
    let conjugacy = Conjugacy::new(system.clone(), model.clone(), split, displacement, params);

    struct PointResult {
        e: BundlePoint,
        w: Vec<f64>,
        h: BundlePoint,
        cohomology: f64,
        conjugacy: f64,
    }
    let points: Vec<Result<PointResult>> = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let e = BundlePoint::from_joint(&grid.point(i), k);
            let w = conjugacy.w(&e)?;
            let h = BundlePoint::new(
                e.base.clone(),
                project(&LiftPoint::new(
                    e.fibre.coords().iter().zip(&w).map(|(x, wi)| x + wi).collect(),
                )),
            );
            let wf = conjugacy.w(&system.evaluate(&e))?;
            let r = conjugacy.displacement.eval_point(&e);
            let a = system.matrix_f64();
            let aw = a * DVector::from_column_slice(&w);
            let cohomology = (aw - DVector::from_vec(wf) - DVector::from_vec(r)).norm();
            let conj = conjugacy.conjugacy_residual(&e)?;
            Ok(PointResult {
                e,
                w,
                h,
                cohomology,
                conjugacy: conj,
            })
        })
        .collect();
    let points: Vec<PointResult> = points.into_iter().collect::<Result<_>>()?;

    let coh: Vec<f64> = points.iter().map(|p| p.cohomology).collect();
    let con: Vec<f64> = points.iter().map(|p| p.conjugacy).collect();
    let stride = (points.len() / DEGREE_SAMPLES).max(1);
    let degree_defect = points
        .iter()
        .step_by(stride)
        .take(DEGREE_SAMPLES)
        .map(|p| conjugacy.degree_defect(&p.e))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    let pairs: Vec<(BundlePoint, BundlePoint)> = points.iter().map(|p| (p.e.clone(), p.h.clone())).collect();
    let injectivity_margin = grid_injectivity(&pairs, grid, k);

    let summary = ConjugacySummary {
        parameters: params,
        grid: grid.resolution().to_vec(),
        displacement_grid_max: conjugacy.displacement.grid_max(),
        cohomology_residual: ResidualStats::from_values(&coh),
        conjugacy_residual: ResidualStats::from_values(&con),
        degree_check: degree_defect <= DEGREE_TOL,
        degree_defect,
        injectivity_margin,
    };
    Ok(ConjugacyResult {
        conjugacy,
        summary,
        samples: points.into_iter().map(|p| (p.e, p.w)).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub samples: usize,
    pub seed: u64,
    pub max_residual: f64,
    pub mean_residual: f64,
    pub threshold: f64,
    pub pass: bool,
}

/// Re-evaluates `h F` and `G h` at fresh random points.
pub fn verify_conjugacy(
    result: &ConjugacyResult,
    system: &FibrewiseSystem,
    model: &AffineModel,
    samples: usize,
    seed: u64,
) -> Result<VerificationReport> {
    let c = &result.conjugacy;
    let (k, d) = (system.base_dim(), system.fibre_dim());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points: Vec<BundlePoint> = (0..samples).map(|_| BundlePoint::random(k, d, &mut rng)).collect();
    let values = points
        .par_iter()
        .map(|e| c.conjugacy_residual_against(system, model, e))
        .collect::<Result<Vec<f64>>>()?;
    let stats = ResidualStats::from_values(&values);
    let threshold = 4.0 * c.params.tail_bound + EVALUATION_ALLOWANCE;
    Ok(VerificationReport {
        samples,
        seed,
        max_residual: stats.max,
        mean_residual: stats.mean,
        threshold,
        pass: stats.max <= threshold,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectivityReport {
    pub fibres: usize,
    pub pairs: usize,
    pub seed: u64,
    /// Smallest `d(h_b(x), h_b(y)) / d(x, y)` over random pairs.
    pub min_ratio: f64,
    pub pair_distance: f64,
    /// Smallest `d(h_b(x), h_b(y))` over pairs at distance `pair_distance`.
    pub min_separation: f64,
    pub note: String,
}

/// Random pairs in random fibres; a positive margin is evidence of
/// injectivity of each `h_b`, not a proof.
pub fn injectivity_scan(
    result: &ConjugacyResult,
    fibres: usize,
    pairs: usize,
    seed: u64,
) -> Result<InjectivityReport> {
    let c = &result.conjugacy;
    let (k, d) = (c.system.base_dim(), c.system.fibre_dim());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut jobs = Vec::with_capacity(fibres * pairs);
    for _ in 0..fibres {
        let b = TorusPoint::random(k, &mut rng);
        for _ in 0..pairs {
            let x = TorusPoint::random(d, &mut rng);
            let y = TorusPoint::random(d, &mut rng);
            let mut dir: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let len = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            for v in &mut dir {
                *v *= INJECTIVITY_PAIR_DISTANCE / len;
            }
            let z = TorusPoint::new(x.coords().iter().zip(&dir).map(|(a, s)| a + s).collect());
            jobs.push((b.clone(), x, y, z));
        }
    }
    let out = jobs
        .par_iter()
        .map(|(b, x, y, z)| {
            let hx = c.h(&BundlePoint::new(b.clone(), x.clone()))?;
            let hy = c.h(&BundlePoint::new(b.clone(), y.clone()))?;
            let hz = c.h(&BundlePoint::new(b.clone(), z.clone()))?;
            let dxy = torus_distance(x, y)?;
            let ratio = if dxy > 0.0 {
                torus_distance(&hx.fibre, &hy.fibre)? / dxy
            } else {
                f64::INFINITY
            };
            let dxz = torus_distance(x, z)?;
            let sep = torus_distance(&hx.fibre, &hz.fibre)?;
            Ok((ratio.min(sep / dxz), sep))
        })
        .collect::<Result<Vec<(f64, f64)>>>()?;
    Ok(InjectivityReport {
        fibres,
        pairs,
        seed,
        min_ratio: out.iter().map(|v| v.0).fold(f64::INFINITY, f64::min),
        pair_distance: INJECTIVITY_PAIR_DISTANCE,
        min_separation: out.iter().map(|v| v.1).fold(f64::INFINITY, f64::min),
        note: "a positive margin is numerical evidence of injectivity on sampled fibres, not a proof".into(),
    })
}
