//! Fibrewise systems `F(b, x) = (f(b), A x + v(b) + p(b, x))` on `T^k x T^d`,
//! given through their equivariant lifts.

use std::f64::consts::TAU;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linear::{op_norm, AffineModel, IntegerMatrix};
use crate::torus::{project, wrap_centered, BundlePoint, Grid, LiftPoint, TorusPoint};

/// Maximum Newton steps in [`FibrewiseSystem::invert_fibre`].
pub const NEWTON_MAX_STEPS: usize = 100;

/// Upper limit on lattice points used to certify a sup bound.
const SUP_GRID_MAX_POINTS: usize = 1 << 21;
/// Target for the Lipschitz margin added to a grid maximum.
const SUP_GRID_TARGET_MARGIN: f64 = 5e-5;

/// Invertible base dynamics on `T^k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaseSystem {
    /// `b -> b + alpha`
    Translation { alpha: Vec<f64> },
    /// `b -> B b`
    Automorphism {
        matrix: IntegerMatrix,
        inverse: IntegerMatrix,
    },
    /// `b -> B b + alpha`
    Composite {
        matrix: IntegerMatrix,
        inverse: IntegerMatrix,
        alpha: Vec<f64>,
    },
}

impl BaseSystem {
    pub fn translation(alpha: Vec<f64>) -> Self {
        BaseSystem::Translation { alpha }
    }

    pub fn automorphism(matrix: IntegerMatrix) -> Result<Self> {
        let inverse = matrix.inverse()?;
        Ok(BaseSystem::Automorphism { matrix, inverse })
    }

    pub fn composite(matrix: IntegerMatrix, alpha: Vec<f64>) -> Result<Self> {
        check_dim(matrix.dim(), alpha.len())?;
        let inverse = matrix.inverse()?;
        Ok(BaseSystem::Composite {
            matrix,
            inverse,
            alpha,
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            BaseSystem::Translation { alpha } => alpha.len(),
            BaseSystem::Automorphism { matrix, .. } | BaseSystem::Composite { matrix, .. } => {
                matrix.dim()
            }
        }
    }

    pub fn forward(&self, b: &TorusPoint) -> TorusPoint {
        TorusPoint::new(self.forward_coords(b.coords()))
    }

    pub fn inverse(&self, b: &TorusPoint) -> TorusPoint {
        TorusPoint::new(self.inverse_coords(b.coords()))
    }

    fn forward_coords(&self, b: &[f64]) -> Vec<f64> {
        match self {
            BaseSystem::Translation { alpha } => b.iter().zip(alpha).map(|(x, a)| x + a).collect(),
            BaseSystem::Automorphism { matrix, .. } => matrix.apply_f64(b),
            BaseSystem::Composite { matrix, alpha, .. } => matrix
                .apply_f64(b)
                .into_iter()
                .zip(alpha)
                .map(|(x, a)| x + a)
                .collect(),
        }
    }

    fn inverse_coords(&self, b: &[f64]) -> Vec<f64> {
        match self {
            BaseSystem::Translation { alpha } => b.iter().zip(alpha).map(|(x, a)| x - a).collect(),
            BaseSystem::Automorphism { inverse, .. } => inverse.apply_f64(b),
            BaseSystem::Composite { inverse, alpha, .. } => {
                let shifted: Vec<f64> = b.iter().zip(alpha).map(|(x, a)| x - a).collect();
                inverse.apply_f64(&shifted)
            }
        }
    }

    /// Lipschitz constant of the lifted base map.
    pub fn lipschitz(&self) -> f64 {
        match self {
            BaseSystem::Translation { .. } => 1.0,
            BaseSystem::Automorphism { matrix, .. } | BaseSystem::Composite { matrix, .. } => {
                op_norm(&matrix.to_dmatrix())
            }
        }
    }
}

/// One term `cos * cos(2 pi k.x) + sin * sin(2 pi k.x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrigTerm {
    pub freq: Vec<i64>,
    pub cos: Vec<f64>,
    pub sin: Vec<f64>,
}

impl TrigTerm {
    fn weight(&self) -> f64 {
        norm(&self.cos) + norm(&self.sin)
    }

    /// `k . x` reduced to `[-1/2, 1/2]`.
    fn phase(&self, x: &[f64]) -> f64 {
        let t: f64 = self.freq.iter().zip(x).map(|(&k, &xi)| k as f64 * xi).sum();
        wrap_centered(t)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Vector-valued trigonometric polynomial `R^m -> R^n`, 1-periodic in every input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrigPolynomial {
    dim_in: usize,
    dim_out: usize,
    terms: Vec<TrigTerm>,
}

impl TrigPolynomial {
    pub fn new(dim_in: usize, dim_out: usize, terms: Vec<TrigTerm>) -> Result<Self> {
        for t in &terms {
            check_dim(dim_in, t.freq.len())?;
            check_dim(dim_out, t.cos.len())?;
            check_dim(dim_out, t.sin.len())?;
            if t.cos.iter().chain(&t.sin).any(|c| !c.is_finite()) {
                return Err(Error::InvalidArgument(
                    "trigonometric coefficients must be finite".into(),
                ));
            }
        }
        Ok(Self {
            dim_in,
            dim_out,
            terms,
        })
    }

    pub fn zero(dim_in: usize, dim_out: usize) -> Self {
        Self {
            dim_in,
            dim_out,
            terms: Vec::new(),
        }
    }

    pub fn constant(dim_in: usize, value: Vec<f64>) -> Self {
        let dim_out = value.len();
        Self {
            dim_in,
            dim_out,
            terms: vec![TrigTerm {
                freq: vec![0; dim_in],
                sin: vec![0.0; dim_out],
                cos: value,
            }],
        }
    }

    /// Single term; panics on inconsistent lengths (convenience for fixtures).
    pub fn single(dim_in: usize, freq: Vec<i64>, cos: Vec<f64>, sin: Vec<f64>) -> Self {
        let dim_out = cos.len();
        Self::new(dim_in, dim_out, vec![TrigTerm { freq, cos, sin }])
            .expect("consistent trigonometric term")
    }

    pub fn dim_in(&self) -> usize {
        self.dim_in
    }

    pub fn dim_out(&self) -> usize {
        self.dim_out
    }

    pub fn terms(&self) -> &[TrigTerm] {
        &self.terms
    }

    pub fn is_zero(&self) -> bool {
        self.terms
            .iter()
            .all(|t| t.cos.iter().chain(&t.sin).all(|&c| c == 0.0))
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim_out];
        self.add_eval(x, &mut out);
        out
    }

    pub fn add_eval(&self, x: &[f64], out: &mut [f64]) {
        for t in &self.terms {
            let theta = TAU * t.phase(x);
            let (s, c) = theta.sin_cos();
            for i in 0..self.dim_out {
                out[i] += t.cos[i] * c + t.sin[i] * s;
            }
        }
    }

    /// `P(x + dx) - P(x)` evaluated without cancellation for small `dx`.
    pub fn eval_difference(&self, x: &[f64], dx: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim_out];
        for t in &self.terms {
            let theta = TAU * t.phase(x);
            let phi: f64 = TAU * t.freq.iter().zip(dx).map(|(&k, &d)| k as f64 * d).sum::<f64>();
            let half = 0.5 * phi;
            let mid = theta + half;
            let sh = half.sin();
            let dcos = -2.0 * mid.sin() * sh;
            let dsin = 2.0 * mid.cos() * sh;
            for i in 0..self.dim_out {
                out[i] += t.cos[i] * dcos + t.sin[i] * dsin;
            }
        }
        out
    }

    /// Jacobian, `dim_out x dim_in`.
    pub fn jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        let mut j = DMatrix::<f64>::zeros(self.dim_out, self.dim_in);
        for t in &self.terms {
            let theta = TAU * t.phase(x);
            let (s, c) = theta.sin_cos();
            for (col, &k) in t.freq.iter().enumerate() {
                if k == 0 {
                    continue;
                }
                let scale = TAU * k as f64;
                for row in 0..self.dim_out {
                    j[(row, col)] += scale * (-t.cos[row] * s + t.sin[row] * c);
                }
            }
        }
        j
    }

    /// `sum (|cos| + |sin|)`, a sup-norm bound.
    pub fn amplitude(&self) -> f64 {
        self.terms.iter().map(TrigTerm::weight).sum()
    }

    /// Lipschitz bound `sum 2 pi |k| (|cos| + |sin|)`.
    pub fn lipschitz(&self) -> f64 {
        self.terms
            .iter()
            .map(|t| {
                let k: f64 = t.freq.iter().map(|&k| (k as f64).powi(2)).sum::<f64>().sqrt();
                TAU * k * t.weight()
            })
            .sum()
    }

    /// Per-coordinate Lipschitz bounds `sum 2 pi |k_i| (|cos| + |sin|)`.
    pub fn lipschitz_per_axis(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim_in];
        for t in &self.terms {
            let w = t.weight();
            for (o, &k) in out.iter_mut().zip(&t.freq) {
                *o += TAU * (k as f64).abs() * w;
            }
        }
        out
    }

    /// Lipschitz bound restricted to the coordinates in `axes`.
    pub fn lipschitz_on(&self, axes: std::ops::Range<usize>) -> f64 {
        self.terms
            .iter()
            .map(|t| {
                let k: f64 = t.freq[axes.clone()]
                    .iter()
                    .map(|&k| (k as f64).powi(2))
                    .sum::<f64>()
                    .sqrt();
                TAU * k * t.weight()
            })
            .sum()
    }

    /// Lipschitz bound of the Jacobian in operator norm, `sum (2 pi |k|)^2 (|cos| + |sin|)`.
    pub fn jacobian_lipschitz(&self) -> f64 {
        self.terms
            .iter()
            .map(|t| {
                let k2: f64 = t.freq.iter().map(|&k| (k as f64).powi(2)).sum();
                TAU * TAU * k2 * t.weight()
            })
            .sum()
    }

    /// Per input axis, a Lipschitz bound for the Jacobian with respect to the
    /// inputs in `wrt` (operator norm).
    pub fn jacobian_lipschitz_per_axis(&self, wrt: std::ops::Range<usize>) -> Vec<f64> {
        let mut out = vec![0.0; self.dim_in];
        for t in &self.terms {
            let kw: f64 = t.freq[wrt.clone()]
                .iter()
                .map(|&k| (k as f64).powi(2))
                .sum::<f64>()
                .sqrt();
            let w = TAU * TAU * kw * t.weight();
            for (o, &k) in out.iter_mut().zip(&t.freq) {
                *o += (k as f64).abs() * w;
            }
        }
        out
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            dim_in: self.dim_in,
            dim_out: self.dim_out,
            terms: self
                .terms
                .iter()
                .map(|t| TrigTerm {
                    freq: t.freq.clone(),
                    cos: t.cos.iter().map(|c| c * factor).collect(),
                    sin: t.sin.iter().map(|c| c * factor).collect(),
                })
                .collect(),
        }
    }

    /// Reinterprets a polynomial on `T^k` as one on `T^(k + extra)` that ignores
    /// the trailing coordinates.
    pub fn extend_inputs(&self, extra: usize) -> Self {
        Self {
            dim_in: self.dim_in + extra,
            dim_out: self.dim_out,
            terms: self
                .terms
                .iter()
                .map(|t| {
                    let mut freq = t.freq.clone();
                    freq.extend(std::iter::repeat_n(0, extra));
                    TrigTerm {
                        freq,
                        cos: t.cos.clone(),
                        sin: t.sin.clone(),
                    }
                })
                .collect(),
        }
    }

    pub fn sum(&self, other: &TrigPolynomial) -> Result<Self> {
        check_dim(self.dim_in, other.dim_in)?;
        check_dim(self.dim_out, other.dim_out)?;
        let mut terms = self.terms.clone();
        terms.extend(other.terms.iter().cloned());
        Ok(Self {
            dim_in: self.dim_in,
            dim_out: self.dim_out,
            terms,
        })
    }
}

/// Anything that provides the lift of a fibre map over each base point.
pub trait FibreLift {
    fn base_dim(&self) -> usize;
    fn fibre_dim(&self) -> usize;
    fn lift(&self, b: &[f64], x: &[f64]) -> Vec<f64>;
}

/// Black-box fibre lift given by a closure.
pub struct FnLift<F> {
    pub base_dim: usize,
    pub fibre_dim: usize,
    pub map: F,
}

impl<F: Fn(&[f64], &[f64]) -> Vec<f64>> FibreLift for FnLift<F> {
    fn base_dim(&self) -> usize {
        self.base_dim
    }
    fn fibre_dim(&self) -> usize {
        self.fibre_dim
    }
    fn lift(&self, b: &[f64], x: &[f64]) -> Vec<f64> {
        (self.map)(b, x)
    }
}

impl FibreLift for AffineModel {
    fn base_dim(&self) -> usize {
        self.base().dim()
    }
    fn fibre_dim(&self) -> usize {
        self.fibre_dim()
    }
    fn lift(&self, b: &[f64], x: &[f64]) -> Vec<f64> {
        self.lift_map(b, x)
    }
}

/// Integer matrix induced on `H_1(T^d)` by an equivariant fibre lift.
pub fn induced_homology_matrix<L: FibreLift + ?Sized>(lift: &L) -> Result<IntegerMatrix> {
    const SAMPLES: usize = 10;
    const INTEGRALITY: f64 = 0.25;
    let k = lift.base_dim();
    let d = lift.fibre_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(0x40_4d_01);
    let mut found: Option<Vec<i64>> = None;
    for _ in 0..SAMPLES {
        let b = TorusPoint::random(k, &mut rng);
        let x0 = TorusPoint::random(d, &mut rng);
        let y0 = lift.lift(b.coords(), x0.coords());
        check_dim(d, y0.len())?;
        let mut entries = vec![0i64; d * d];
        for j in 0..d {
            let mut xj = x0.coords().to_vec();
            xj[j] += 1.0;
            let yj = lift.lift(b.coords(), &xj);
            for i in 0..d {
                let diff = yj[i] - y0[i];
                let rounded = diff.round();
                if !((diff - rounded).abs() <= INTEGRALITY) || rounded.abs() > 9.0e15 {
                    return Err(Error::NotEquivariant(format!(
                        "column {j} entry {i} is {diff}, not within {INTEGRALITY} of an integer"
                    )));
                }
                entries[i * d + j] = rounded as i64;
            }
        }
        match &found {
            None => found = Some(entries),
            Some(prev) if *prev != entries => {
                return Err(Error::NotEquivariant(
                    "induced matrix depends on the sample point".into(),
                ))
            }
            Some(_) => {}
        }
    }
    IntegerMatrix::new(d, found.expect("at least one sample"))
}

/// Fibrewise map whose lift over `b` is `x -> A x + v(b) + p(b, x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FibrewiseSystem {
    base: BaseSystem,
    matrix: IntegerMatrix,
    a: DMatrix<f64>,
    a_inv: DMatrix<f64>,
    translation: TrigPolynomial,
    perturbation: TrigPolynomial,
    perturbation_sup: f64,
    perturbation_lipschitz: f64,
}

impl FibrewiseSystem {
    pub fn new(
        base: BaseSystem,
        matrix: IntegerMatrix,
        translation: TrigPolynomial,
        perturbation: TrigPolynomial,
    ) -> Result<Self> {
        let k = base.dim();
        let d = matrix.dim();
        check_dim(k, translation.dim_in())?;
        check_dim(d, translation.dim_out())?;
        check_dim(k + d, perturbation.dim_in())?;
        check_dim(d, perturbation.dim_out())?;
        let det = matrix.determinant()?;
        if det.abs() != 1 {
            return Err(Error::NotUnimodular { det });
        }
        let a = matrix.to_dmatrix();
        let a_inv = matrix.inverse()?.to_dmatrix();
        let perturbation_sup = perturbation.amplitude();
        let perturbation_lipschitz = perturbation.lipschitz_on(k..k + d);
        Ok(Self {
            base,
            matrix,
            a,
            a_inv,
            translation,
            perturbation,
            perturbation_sup,
            perturbation_lipschitz,
        })
    }

    /// The affine model itself, viewed as a system with zero perturbation.
    pub fn from_affine(model: &AffineModel) -> Result<Self> {
        let k = model.base().dim();
        let d = model.fibre_dim();
        Self::new(
            model.base().clone(),
            model.matrix().clone(),
            model.translation().clone(),
            TrigPolynomial::zero(k + d, d),
        )
    }

    pub fn base(&self) -> &BaseSystem {
        &self.base
    }

    pub fn base_dim(&self) -> usize {
        self.base.dim()
    }

    pub fn fibre_dim(&self) -> usize {
        self.matrix.dim()
    }

    pub fn matrix(&self) -> &IntegerMatrix {
        &self.matrix
    }

    pub fn matrix_f64(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn matrix_inverse_f64(&self) -> &DMatrix<f64> {
        &self.a_inv
    }

    pub fn translation(&self) -> &TrigPolynomial {
        &self.translation
    }

    pub fn perturbation(&self) -> &TrigPolynomial {
        &self.perturbation
    }

    /// `M_p`, a sup bound of the perturbation.
    pub fn perturbation_sup(&self) -> f64 {
        self.perturbation_sup
    }

    /// `L_p`, Lipschitz bound of the perturbation in the fibre variable.
    pub fn perturbation_lipschitz(&self) -> f64 {
        self.perturbation_lipschitz
    }

    pub fn with_perturbation(&self, perturbation: TrigPolynomial) -> Result<Self> {
        Self::new(
            self.base.clone(),
            self.matrix.clone(),
            self.translation.clone(),
            perturbation,
        )
    }

    pub fn affine_model(&self) -> AffineModel {
        AffineModel::new(
            self.matrix.clone(),
            self.translation.clone(),
            self.base.clone(),
        )
        .expect("dimensions validated at construction")
    }

    fn joint(b: &[f64], x: &[f64]) -> Vec<f64> {
        let mut v = Vec::with_capacity(b.len() + x.len());
        v.extend_from_slice(b);
        v.extend_from_slice(x);
        v
    }

    /// `F~_b(x) = A x + v(b) + p(b, x)`.
    pub fn lift_map(&self, b: &[f64], x: &[f64]) -> Vec<f64> {
        let mut y = self.matrix.apply_f64(x);
        self.translation.add_eval(b, &mut y);
        if !self.perturbation.terms().is_empty() {
            self.perturbation.add_eval(&Self::joint(b, x), &mut y);
        }
        y
    }

    /// `F~_b(x + delta) - F~_b(x)`, accurate for small `delta`.
    pub fn lift_difference(&self, b: &[f64], x: &[f64], delta: &[f64]) -> Vec<f64> {
        let mut y = self.matrix.apply_f64(delta);
        if !self.perturbation.terms().is_empty() {
            let mut dx = vec![0.0; b.len()];
            dx.extend_from_slice(delta);
            for (yi, pi) in y
                .iter_mut()
                .zip(self.perturbation.eval_difference(&Self::joint(b, x), &dx))
            {
                *yi += pi;
            }
        }
        y
    }

    /// `A + d_x p(b, x)`.
    pub fn jacobian_at(&self, b: &[f64], x: &[f64]) -> DMatrix<f64> {
        let k = self.base_dim();
        let d = self.fibre_dim();
        let mut j = self.a.clone();
        if !self.perturbation.terms().is_empty() {
            let full = self.perturbation.jacobian(&Self::joint(b, x));
            j += full.view((0, k), (d, d));
        }
        j
    }

    pub fn fibre_jacobian(&self, e: &BundlePoint) -> DMatrix<f64> {
        self.jacobian_at(e.base.coords(), e.fibre.coords())
    }

    pub fn evaluate(&self, e: &BundlePoint) -> BundlePoint {
        let y = self.lift_map(e.base.coords(), e.fibre.coords());
        BundlePoint::new(self.base.forward(&e.base), project(&LiftPoint::new(y)))
    }

    /// Solves `F~_b(x) = y` by damped Newton iteration.
    pub fn invert_fibre(&self, b: &TorusPoint, y: &LiftPoint, tol: f64) -> Result<LiftPoint> {
        check_dim(self.base_dim(), b.dim())?;
        check_dim(self.fibre_dim(), y.dim())?;
        if !(tol > 0.0) {
            return Err(Error::InvalidArgument("tolerance must be positive".into()));
        }
        let d = self.fibre_dim();
        let b = b.coords();
        let v = self.translation.eval(b);
        let rhs = DVector::from_iterator(d, y.coords().iter().zip(&v).map(|(yi, vi)| yi - vi));
        let mut x: Vec<f64> = (&self.a_inv * rhs).iter().copied().collect();
        if self.perturbation.terms().is_empty() {
            return Ok(LiftPoint::new(x));
        }
        let scale = 1.0
            + y.coords().iter().fold(0.0f64, |m, c| m.max(c.abs()))
            + self.perturbation_sup;
        let floor = 16.0 * f64::EPSILON * scale;
        let target = tol.max(floor);
        let residual = |x: &[f64]| -> Vec<f64> {
            self.lift_map(b, x)
                .iter()
                .zip(y.coords())
                .map(|(fx, yi)| fx - yi)
                .collect()
        };
        let mut r = residual(&x);
        let mut rn = norm(&r);
        for _ in 0..NEWTON_MAX_STEPS {
            if rn <= target {
                return Ok(LiftPoint::new(x));
            }
            let j = self.jacobian_at(b, &x);
            let step = j
                .lu()
                .solve(&DVector::from_column_slice(&r))
                .ok_or_else(|| Error::SingularJacobian("fibre Jacobian during inversion".into()))?;
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..40 {
                let cand: Vec<f64> = x.iter().zip(step.iter()).map(|(xi, s)| xi - t * s).collect();
                let rc = residual(&cand);
                let rcn = norm(&rc);
                if rcn < rn {
                    x = cand;
                    r = rc;
                    rn = rcn;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        if rn <= target {
            Ok(LiftPoint::new(x))
        } else {
            Err(Error::InversionFailed {
                steps: NEWTON_MAX_STEPS,
                residual: rn,
            })
        }
    }

    /// `F^{-1}(e)`.
    pub fn inverse(&self, e: &BundlePoint, tol: f64) -> Result<BundlePoint> {
        let b = self.base.inverse(&e.base);
        let x = self.invert_fibre(&b, &e.fibre.lift(), tol)?;
        Ok(BundlePoint::new(b, project(&x)))
    }

    /// Smallest `|det(A + d_x p)|` over a grid of `T^(k+d)`.
    pub fn diffeomorphism_margin(&self, grid: &Grid) -> Result<f64> {
        check_dim(self.base_dim() + self.fibre_dim(), grid.dim())?;
        let k = self.base_dim();
        Ok((0..grid.len())
            .into_par_iter()
            .map(|i| {
                let p = grid.point(i);
                let (b, x) = p.coords().split_at(k);
                self.jacobian_at(b, x).determinant().abs()
            })
            .reduce(|| f64::INFINITY, f64::min))
    }

    /// Displacement `r~ = F~ - G~` against an affine model with the same matrix.
    pub fn displacement(&self, model: &AffineModel) -> Result<DisplacementField> {
        if model.matrix() != &self.matrix {
            return Err(Error::HomologyMismatch {
                expected: model.matrix().rows(),
                found: self.matrix.rows(),
            });
        }
        check_dim(self.base_dim(), model.base().dim())?;
        let d = self.fibre_dim();
        let dv = self
            .translation
            .sum(&model.translation().scaled(-1.0))?
            .extend_inputs(d);
        DisplacementField::new(self.perturbation.sum(&dv)?, self.base_dim())
    }
}

impl FibreLift for FibrewiseSystem {
    fn base_dim(&self) -> usize {
        self.base.dim()
    }
    fn fibre_dim(&self) -> usize {
        self.matrix.dim()
    }
    fn lift(&self, b: &[f64], x: &[f64]) -> Vec<f64> {
        self.lift_map(b, x)
    }
}

/// The lifted displacement `r~(b, x)`, periodic in `x`, with a certified sup bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisplacementField {
    field: TrigPolynomial,
    base_dim: usize,
    sup_bound: f64,
    grid_max: f64,
    lipschitz: f64,
    grid_resolution: Vec<usize>,
}

impl DisplacementField {
    fn new(field: TrigPolynomial, base_dim: usize) -> Result<Self> {
        let dim = field.dim_in();
        let per_axis = field.lipschitz_per_axis();
        let active: Vec<usize> = (0..dim).filter(|&i| per_axis[i] > 0.0).collect();
        let mut resolution = vec![1usize; dim];
        if !active.is_empty() {
            let m = active.len() as f64;
            let mut wanted: Vec<f64> = active
                .iter()
                .map(|&i| (per_axis[i] * m / (2.0 * SUP_GRID_TARGET_MARGIN)).ceil().max(8.0))
                .collect();
            let total: f64 = wanted.iter().product();
            if total > SUP_GRID_MAX_POINTS as f64 {
                let shrink = (SUP_GRID_MAX_POINTS as f64 / total).powf(1.0 / m);
                for w in &mut wanted {
                    *w = (*w * shrink).floor().max(2.0);
                }
            }
            for (&i, w) in active.iter().zip(wanted) {
                resolution[i] = w as usize;
            }
        }
        let grid = Grid::new(resolution.clone())?;
        let grid_max = (0..grid.len())
            .into_par_iter()
            .map(|i| norm(&field.eval(grid.point(i).coords())))
            .reduce(|| 0.0, f64::max);
        let margin: f64 = per_axis
            .iter()
            .zip(grid.spacing())
            .map(|(l, h)| if *l > 0.0 { 0.5 * l * h } else { 0.0 })
            .sum();
        let sup_bound = (grid_max + margin).min(field.amplitude());
        Ok(Self {
            lipschitz: field.lipschitz(),
            field,
            base_dim,
            sup_bound,
            grid_max,
            grid_resolution: resolution,
        })
    }

    pub fn field(&self) -> &TrigPolynomial {
        &self.field
    }

    /// Certified `M >= sup |r~|`.
    pub fn sup_bound(&self) -> f64 {
        self.sup_bound
    }

    pub fn grid_max(&self) -> f64 {
        self.grid_max
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn grid_resolution(&self) -> &[usize] {
        &self.grid_resolution
    }

    pub fn eval(&self, b: &[f64], x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(b.len(), self.base_dim);
        let mut joint = b.to_vec();
        joint.extend_from_slice(x);
        self.field.eval(&joint)
    }

    pub fn eval_point(&self, e: &BundlePoint) -> Vec<f64> {
        self.eval(e.base.coords(), e.fibre.coords())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::torus::torus_distance;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn cat() -> IntegerMatrix {
        IntegerMatrix::from_rows(&[vec![2, 1], vec![1, 1]]).unwrap()
    }

    fn sin_x1(eps: f64) -> TrigPolynomial {
        TrigPolynomial::single(3, vec![0, 1, 0], vec![0.0, 0.0], vec![eps, 0.0])
    }

    fn perturbed_cat(eps: f64) -> FibrewiseSystem {
        FibrewiseSystem::new(
            BaseSystem::translation(vec![2f64.sqrt() - 1.0]),
            cat(),
            TrigPolynomial::zero(1, 2),
            sin_x1(eps),
        )
        .unwrap()
    }

    #[test]
    fn base_inverse_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b3 = IntegerMatrix::from_rows(&[vec![1, 1, 1], vec![0, 1, 1], vec![0, 1, 2]]).unwrap();
        let systems = [
            BaseSystem::translation(vec![2f64.sqrt() - 1.0]),
            BaseSystem::automorphism(b3.clone()).unwrap(),
            BaseSystem::composite(b3, vec![0.1, 0.2, 0.3]).unwrap(),
        ];
        for f in &systems {
            for _ in 0..1000 {
                let b = TorusPoint::random(f.dim(), &mut rng);
                let back = f.inverse(&f.forward(&b));
                assert!(torus_distance(&back, &b).unwrap() < 1e-12);
            }
        }
    }

    #[test]
    fn trig_jacobian_matches_finite_differences() {
        let p = TrigPolynomial::new(
            3,
            2,
            vec![
                TrigTerm { freq: vec![1, 2, -1], cos: vec![0.03, -0.01], sin: vec![0.02, 0.04] },
                TrigTerm { freq: vec![0, 1, 1], cos: vec![0.0, 0.05], sin: vec![-0.01, 0.0] },
            ],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let x: Vec<f64> = (0..3).map(|_| rng.gen::<f64>()).collect();
            let j = p.jacobian(&x);
            for col in 0..3 {
                let h = 1e-6;
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[col] += h;
                xm[col] -= h;
                let fp = p.eval(&xp);
                let fm = p.eval(&xm);
                for row in 0..2 {
                    let fd = (fp[row] - fm[row]) / (2.0 * h);
                    assert!((fd - j[(row, col)]).abs() < 1e-6);
                }
            }
            let dx = [1e-9, -2e-9, 3e-9];
            let diff = p.eval_difference(&x, &dx);
            let lin = &j * DVector::from_column_slice(&dx);
            for row in 0..2 {
                assert!((diff[row] - lin[row]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_perturbation_reduces_to_affine_model() {
        let v = TrigPolynomial::single(1, vec![1], vec![0.1, 0.0], vec![0.0, 0.05]);
        let f = FibrewiseSystem::new(
            BaseSystem::translation(vec![0.3]),
            cat(),
            v,
            TrigPolynomial::zero(3, 2),
        )
        .unwrap();
        let g = f.affine_model();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let e = BundlePoint::random(1, 2, &mut rng);
            let a = f.evaluate(&e);
            let b = g.apply(&e).unwrap();
            assert_eq!(a.base, b.base);
            assert!(torus_distance(&a.fibre, &b.fibre).unwrap() < 1e-14);
        }
    }

    #[test]
    fn origin_stays_fixed_under_sine_perturbation() {
        let f = perturbed_cat(0.05);
        let e = BundlePoint::new(TorusPoint::origin(1), TorusPoint::origin(2));
        let fe = f.evaluate(&e);
        assert!(torus_distance(&fe.fibre, &TorusPoint::origin(2)).unwrap() < 1e-16);
    }

    #[test]
    fn lift_is_equivariant_for_small_deck_vectors() {
        let f = perturbed_cat(0.05);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let b: Vec<f64> = vec![rng.gen()];
            let x: Vec<f64> = vec![rng.gen(), rng.gen()];
            let y = f.lift_map(&b, &x);
            for m1 in -2..=2i64 {
                for m2 in -2..=2i64 {
                    let xs = [x[0] + m1 as f64, x[1] + m2 as f64];
                    let ys = f.lift_map(&b, &xs);
                    let am = cat().apply_int(&[m1, m2]).unwrap();
                    for i in 0..2 {
                        assert!((ys[i] - y[i] - am[i] as f64).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn affine_inverse_is_exact() {
        let f = FibrewiseSystem::new(
            BaseSystem::translation(vec![0.1]),
            cat(),
            TrigPolynomial::zero(1, 2),
            TrigPolynomial::zero(3, 2),
        )
        .unwrap();
        let y = LiftPoint::new(vec![0.3, 0.7]);
        let x = f.invert_fibre(&TorusPoint::origin(1), &y, 1e-12).unwrap();
        // A^-1 = [[1,-1],[-1,2]]
        assert_abs_diff_eq!(x.coords()[0], -0.4, epsilon = 1e-15);
        assert_abs_diff_eq!(x.coords()[1], 1.1, epsilon = 1e-15);
    }

    #[test]
    fn inversion_round_trips() {
        let f = perturbed_cat(0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let b = TorusPoint::random(1, &mut rng);
            let y = LiftPoint::new(vec![rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)]);
            let x = f.invert_fibre(&b, &y, 1e-12).unwrap();
            let fx = f.lift_map(b.coords(), x.coords());
            assert!(norm(&[fx[0] - y.coords()[0], fx[1] - y.coords()[1]]) <= 1e-12);
        }
    }

    #[test]
    fn inversion_agrees_with_bisection_oracle() {
        // F~(x) = (2x1 + x2 + eps sin(2 pi x1), x1 + x2); eliminating x2 leaves the
        // monotone scalar equation x1 + eps sin(2 pi x1) = y1 - y2.
        let eps = 0.05;
        let f = perturbed_cat(eps);
        let y = [0.3, 0.7];
        let g = |t: f64| t + eps * (TAU * t).sin() - (y[0] - y[1]);
        // coarse exhaustive scan for a sign change, then bisection
        let mut lo = -2.0;
        let mut hi = lo;
        for i in 0..=4000 {
            let t = -2.0 + i as f64 * 1e-3;
            if g(t) >= 0.0 {
                hi = t;
                lo = t - 1e-3;
                break;
            }
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if g(mid) >= 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let x1 = 0.5 * (lo + hi);
        let oracle = [x1, y[1] - x1];
        let x = f
            .invert_fibre(&TorusPoint::origin(1), &LiftPoint::new(y.to_vec()), 1e-13)
            .unwrap();
        assert!((x.coords()[0] - oracle[0]).abs() < 1e-9);
        assert!((x.coords()[1] - oracle[1]).abs() < 1e-9);
    }

    #[test]
    fn inverse_then_evaluate_is_identity_on_the_torus() {
        let f = perturbed_cat(0.05);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..500 {
            let e = BundlePoint::random(1, 2, &mut rng);
            let back = f.inverse(&f.evaluate(&e), 1e-13).unwrap();
            assert!(torus_distance(&back.base, &e.base).unwrap() < 1e-12);
            assert!(torus_distance(&back.fibre, &e.fibre).unwrap() < 1e-12);
        }
    }

    #[test]
    fn jacobian_examples() {
        let f = FibrewiseSystem::new(
            BaseSystem::translation(vec![0.1]),
            cat(),
            TrigPolynomial::zero(1, 2),
            TrigPolynomial::zero(3, 2),
        )
        .unwrap();
        let e = BundlePoint::new(TorusPoint::new(vec![0.3]), TorusPoint::new(vec![0.2, 0.9]));
        assert_eq!(f.fibre_jacobian(&e), cat().to_dmatrix());

        let f = perturbed_cat(0.05);
        let e = BundlePoint::new(TorusPoint::new(vec![0.3]), TorusPoint::new(vec![0.25, 0.6]));
        assert!((f.fibre_jacobian(&e) - cat().to_dmatrix()).amax() < 1e-15);
    }

    #[test]
    fn fibre_jacobian_matches_finite_differences() {
        let f = perturbed_cat(0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let b = [rng.gen::<f64>()];
            let x = [rng.gen::<f64>(), rng.gen::<f64>()];
            let j = f.jacobian_at(&b, &x);
            let h = 1e-6;
            for col in 0..2 {
                let mut xp = x;
                let mut xm = x;
                xp[col] += h;
                xm[col] -= h;
                let fp = f.lift_map(&b, &xp);
                let fm = f.lift_map(&b, &xm);
                for row in 0..2 {
                    assert!(((fp[row] - fm[row]) / (2.0 * h) - j[(row, col)]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn homology_examples() {
        let id = FnLift {
            base_dim: 1,
            fibre_dim: 2,
            map: |_b: &[f64], x: &[f64]| x.to_vec(),
        };
        assert_eq!(induced_homology_matrix(&id).unwrap(), IntegerMatrix::identity(2));
        assert_eq!(induced_homology_matrix(&perturbed_cat(0.2)).unwrap(), cat());

        let b3 = IntegerMatrix::from_rows(&[vec![1, 1, 1], vec![0, 1, 1], vec![0, 1, 2]]).unwrap();
        let g = AffineModel::new(b3.clone(), TrigPolynomial::zero(1, 3), BaseSystem::translation(vec![0.2]))
            .unwrap();
        assert_eq!(induced_homology_matrix(&g).unwrap(), b3);
    }

    #[test]
    fn homology_rejects_non_equivariant_lifts() {
        let bad = FnLift {
            base_dim: 1,
            fibre_dim: 1,
            map: |_b: &[f64], x: &[f64]| vec![1.5 * x[0]],
        };
        assert!(matches!(
            induced_homology_matrix(&bad),
            Err(Error::NotEquivariant(_))
        ));
        let varying = FnLift {
            base_dim: 1,
            fibre_dim: 1,
            map: |b: &[f64], x: &[f64]| vec![if b[0] < 0.5 { x[0] } else { 2.0 * x[0] }],
        };
        assert!(induced_homology_matrix(&varying).is_err());
    }

    #[test]
    fn displacement_examples() {
        let f = FibrewiseSystem::new(
            BaseSystem::translation(vec![0.1]),
            cat(),
            TrigPolynomial::zero(1, 2),
            TrigPolynomial::zero(3, 2),
        )
        .unwrap();
        let r = f.displacement(&f.affine_model()).unwrap();
        assert_eq!(r.sup_bound(), 0.0);
        assert_eq!(r.eval(&[0.3], &[0.1, 0.2]), vec![0.0, 0.0]);

        let f = perturbed_cat(0.05);
        let r = f.displacement(&f.affine_model()).unwrap();
        assert!(r.sup_bound() >= 0.05 && r.sup_bound() <= 0.0501);
        assert!(r.grid_max() <= r.sup_bound());

        // fibre map A x + (0.1, 0) against the model with v = 0
        let shift = FibrewiseSystem::new(
            BaseSystem::translation(vec![0.1]),
            cat(),
            TrigPolynomial::constant(1, vec![0.1, 0.0]),
            TrigPolynomial::zero(3, 2),
        )
        .unwrap();
        let model = AffineModel::new(cat(), TrigPolynomial::zero(1, 2), shift.base().clone()).unwrap();
        let r = shift.displacement(&model).unwrap();
        assert_abs_diff_eq!(r.sup_bound(), 0.1, epsilon = 1e-15);
        let v = r.eval(&[0.7], &[0.4, 0.9]);
        assert_abs_diff_eq!(v[0], 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(v[1], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn displacement_bound_dominates_random_samples() {
        let p = TrigPolynomial::new(
            3,
            2,
            vec![
                TrigTerm { freq: vec![1, 1, 0], cos: vec![0.03, 0.0], sin: vec![0.0, 0.02] },
                TrigTerm { freq: vec![0, 2, -1], cos: vec![0.0, 0.01], sin: vec![0.015, 0.0] },
            ],
        )
        .unwrap();
        let f = perturbed_cat(0.0).with_perturbation(p).unwrap();
        let r = f.displacement(&f.affine_model()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10_000 {
            let e = BundlePoint::random(1, 2, &mut rng);
            assert!(norm(&r.eval_point(&e)) <= r.sup_bound());
        }
    }

    #[test]
    fn non_unimodular_matrix_is_rejected() {
        let two = IntegerMatrix::from_rows(&[vec![2, 0], vec![0, 1]]).unwrap();
        let err = FibrewiseSystem::new(
            BaseSystem::translation(vec![0.1]),
            two,
            TrigPolynomial::zero(1, 2),
            TrigPolynomial::zero(3, 2),
        )
        .unwrap_err();
        assert_eq!(err, Error::NotUnimodular { det: 2 });
    }

    #[test]
    fn diffeomorphism_margin_is_positive_for_moderate_perturbations() {
        let f = perturbed_cat(0.1);
        let m = f.diffeomorphism_margin(&Grid::uniform(3, 16).unwrap()).unwrap();
        // det = 1 + 2 pi eps cos(2 pi x1) >= 1 - 0.2 pi
        assert!(m >= 1.0 - 0.2 * std::f64::consts::PI - 1e-12);
    }
}
