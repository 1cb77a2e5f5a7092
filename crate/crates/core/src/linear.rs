//! Integer matrices in `GL(d, Z)`, hyperbolicity and the spectral splitting
//! `R^d = E^s + E^u`, plus the affine model `G(b, x) = (f(b), A x + v(b))`.

use nalgebra::{DMatrix, DVector};
use num_bigint::BigInt;
use num_complex::Complex64;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::system::{BaseSystem, TrigPolynomial};
use crate::torus::{project, BundlePoint, LiftPoint};

/// Additive margin added to the spectral rate so that certified inequalities are strict.
pub const LAMBDA_MARGIN: f64 = 1e-12;

/// Powers scanned when computing the growth constant `C`.
const GROWTH_SCAN: usize = 100;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct IntegerMatrix {
    dim: usize,
    entries: Vec<i64>,
}

impl IntegerMatrix {
    /// Row-major construction.
    pub fn new(dim: usize, entries: Vec<i64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("matrix dimension must be positive".into()));
        }
        check_dim(dim * dim, entries.len())?;
        Ok(Self { dim, entries })
    }

    pub fn from_rows(rows: &[Vec<i64>]) -> Result<Self> {
        let dim = rows.len();
        for r in rows {
            check_dim(dim, r.len())?;
        }
        Self::new(dim, rows.concat())
    }

    pub fn identity(dim: usize) -> Self {
        let mut entries = vec![0; dim * dim];
        for i in 0..dim {
            entries[i * dim + i] = 1;
        }
        Self { dim, entries }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize, j: usize) -> i64 {
        self.entries[i * self.dim + j]
    }

    pub fn entries(&self) -> &[i64] {
        &self.entries
    }

    pub fn rows(&self) -> Vec<Vec<i64>> {
        self.entries.chunks(self.dim).map(|r| r.to_vec()).collect()
    }

    pub fn transpose(&self) -> Self {
        let d = self.dim;
        let mut entries = vec![0; d * d];
        for i in 0..d {
            for j in 0..d {
                entries[j * d + i] = self.get(i, j);
            }
        }
        Self { dim: d, entries }
    }

    pub fn mul(&self, other: &IntegerMatrix) -> Result<IntegerMatrix> {
        check_dim(self.dim, other.dim)?;
        let d = self.dim;
        let mut entries = vec![0i64; d * d];
        for i in 0..d {
            for j in 0..d {
                let mut acc: i64 = 0;
                for k in 0..d {
                    acc = self
                        .get(i, k)
                        .checked_mul(other.get(k, j))
                        .and_then(|p| acc.checked_add(p))
                        .ok_or(Error::IntegerOverflow("matrix product"))?;
                }
                entries[i * d + j] = acc;
            }
        }
        Ok(Self { dim: d, entries })
    }

    /// Exact determinant by fraction-free (Bareiss) elimination.
    pub fn determinant(&self) -> Result<i128> {
        let d = self.dim;
        let mut m: Vec<i128> = self.entries.iter().map(|&x| x as i128).collect();
        let mut sign = 1i128;
        let mut prev = 1i128;
        for k in 0..d {
            if m[k * d + k] == 0 {
                match (k + 1..d).find(|&r| m[r * d + k] != 0) {
                    Some(r) => {
                        for c in 0..d {
                            m.swap(k * d + c, r * d + c);
                        }
                        sign = -sign;
                    }
                    None => return Ok(0),
                }
            }
            let pivot = m[k * d + k];
            for i in k + 1..d {
                for j in k + 1..d {
                    let num = pivot
                        .checked_mul(m[i * d + j])
                        .zip(m[i * d + k].checked_mul(m[k * d + j]))
                        .and_then(|(a, b)| a.checked_sub(b))
                        .ok_or(Error::IntegerOverflow("determinant"))?;
                    m[i * d + j] = num / prev;
                }
            }
            prev = pivot;
        }
        Ok(sign * m[d * d - 1])
    }

    pub fn is_unimodular(&self) -> Result<bool> {
        Ok(self.determinant()?.abs() == 1)
    }

    /// Exact inverse of a unimodular matrix.
    pub fn inverse(&self) -> Result<IntegerMatrix> {
        let det = self.determinant()?;
        if det.abs() != 1 {
            return Err(Error::NotUnimodular { det });
        }
        let inv = self
            .to_dmatrix()
            .try_inverse()
            .ok_or_else(|| Error::SingularJacobian("integer matrix inverse".into()))?;
        let mut entries = Vec::with_capacity(self.dim * self.dim);
        for i in 0..self.dim {
            for j in 0..self.dim {
                let v = inv[(i, j)].round();
                if !v.is_finite() || v.abs() > 9.0e15 {
                    return Err(Error::IntegerOverflow("matrix inverse"));
                }
                entries.push(v as i64);
            }
        }
        let candidate = IntegerMatrix {
            dim: self.dim,
            entries,
        };
        if self.mul(&candidate)? != IntegerMatrix::identity(self.dim) {
            return Err(Error::IntegerOverflow("matrix inverse (rounding)"));
        }
        Ok(candidate)
    }

    pub fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_iterator(self.dim, self.dim, self.entries.iter().map(|&x| x as f64))
    }

    pub fn apply_f64(&self, x: &[f64]) -> Vec<f64> {
        (0..self.dim)
            .map(|i| (0..self.dim).map(|j| self.get(i, j) as f64 * x[j]).sum())
            .collect()
    }

    pub fn apply_int(&self, m: &[i64]) -> Result<Vec<i64>> {
        check_dim(self.dim, m.len())?;
        (0..self.dim)
            .map(|i| {
                (0..self.dim).try_fold(0i64, |acc, j| {
                    self.get(i, j)
                        .checked_mul(m[j])
                        .and_then(|p| acc.checked_add(p))
                        .ok_or(Error::IntegerOverflow("matrix-vector product"))
                })
            })
            .collect()
    }
}

/// Outcome of the eigenvalue-modulus test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperbolicityWitness {
    pub hyperbolic: bool,
    /// `min | |mu| - 1 |` over the eigenvalues `mu`.
    pub min_gap: f64,
    /// Eigenvalues as `(re, im)` pairs.
    pub eigenvalues: Vec<(f64, f64)>,
}

pub fn eigenvalues(a: &DMatrix<f64>) -> Result<Vec<Complex64>> {
    let schur = nalgebra::linalg::Schur::try_new(a.clone(), f64::EPSILON, 10_000)
        .ok_or(Error::EigenSolverFailure { dim: a.nrows() })?;
    Ok(schur.complex_eigenvalues().iter().copied().collect())
}

/// Characteristic polynomial, lowest degree first, computed exactly.
pub fn characteristic_polynomial(a: &IntegerMatrix) -> Vec<BigInt> {
    let n = a.dim();
    let am: Vec<Vec<BigInt>> = a.rows().into_iter().map(|r| r.into_iter().map(BigInt::from).collect()).collect();
    let mut coeffs = vec![BigInt::zero(); n + 1];
    coeffs[n] = BigInt::one();
    let mut m = vec![vec![BigInt::zero(); n]; n];
    for k in 1..=n {
        let mut next = vec![vec![BigInt::zero(); n]; n];
        for i in 0..n {
            for j in 0..n {
                let mut s: BigInt = (0..n).map(|l| &am[i][l] * &m[l][j]).sum();
                if i == j {
                    s += &coeffs[n + 1 - k];
                }
                next[i][j] = s;
            }
        }
        m = next;
        let trace: BigInt = (0..n).map(|i| (0..n).map(|l| &am[i][l] * &m[l][i]).sum::<BigInt>()).sum();
        coeffs[n - k] = -trace / BigInt::from(k);
    }
    coeffs
}

type RatPoly = Vec<BigRational>;

fn trim(mut p: RatPoly) -> RatPoly {
    while p.len() > 1 && p.last().is_some_and(|c| c.is_zero()) {
        p.pop();
    }
    p
}

fn monic(p: RatPoly) -> RatPoly {
    let lead = p.last().cloned().unwrap_or_else(BigRational::one);
    p.into_iter().map(|c| c / &lead).collect()
}

fn div_rem(num: &RatPoly, den: &RatPoly) -> (RatPoly, RatPoly) {
    let mut rem = num.clone();
    let dd = den.len() - 1;
    if rem.len() <= dd {
        return (vec![BigRational::zero()], trim(rem));
    }
    let mut quot = vec![BigRational::zero(); rem.len() - dd];
    let lead = &den[dd];
    for k in (0..quot.len()).rev() {
        let c = &rem[k + dd] / lead;
        for (i, d) in den.iter().enumerate() {
            rem[k + i] -= &c * d;
        }
        quot[k] = c;
    }
    rem.truncate(dd.max(1));
    (trim(quot), trim(rem))
}

fn gcd(a: &RatPoly, b: &RatPoly) -> RatPoly {
    let (mut a, mut b) = (trim(a.clone()), trim(b.clone()));
    while !(b.len() == 1 && b[0].is_zero()) {
        let (_, r) = div_rem(&a, &b);
        a = b;
        b = r;
    }
    monic(a)
}

/// Distinct eigenvalues, as the roots of the square-free part of the
/// characteristic polynomial. Repeated eigenvalues of defective matrices
/// are only resolved to about eps^(1/k) by a Schur decomposition; the
/// square-free part has simple roots only.
pub fn distinct_eigenvalues(a: &IntegerMatrix) -> Result<Vec<Complex64>> {
    let p: RatPoly = characteristic_polynomial(a).into_iter().map(BigRational::from_integer).collect();
    let dp: RatPoly = trim(p.iter().enumerate().skip(1).map(|(k, c)| c * BigRational::from_integer(BigInt::from(k))).collect());
    let (q, _) = div_rem(&p, &gcd(&p, &dp));
    let q = monic(q);
    let deg = q.len() - 1;
    if deg == 0 {
        return Ok(Vec::new());
    }
    let mut companion = DMatrix::zeros(deg, deg);
    for i in 1..deg {
        companion[(i, i - 1)] = 1.0;
    }
    for i in 0..deg {
        companion[(i, deg - 1)] = -q[i].to_f64().unwrap_or(f64::NAN);
    }
    eigenvalues(&companion)
}

pub fn is_hyperbolic(a: &IntegerMatrix, tol: f64) -> Result<HyperbolicityWitness> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument("tolerance must be positive".into()));
    }
    let roots = distinct_eigenvalues(a)?;
    let min_gap = roots
        .iter()
        .map(|mu| (mu.norm() - 1.0).abs())
        .fold(f64::INFINITY, f64::min);
    let eig = eigenvalues(&a.to_dmatrix())?
        .into_iter()
        .map(|mu| {
            roots
                .iter()
                .copied()
                .min_by(|x, y| (x - mu).norm().total_cmp(&(y - mu).norm()))
                .unwrap_or(mu)
        })
        .collect::<Vec<_>>();
    Ok(HyperbolicityWitness {
        hyperbolic: min_gap > tol,
        min_gap,
        eigenvalues: eig.iter().map(|mu| (mu.re, mu.im)).collect(),
    })
}

/// Spectral norm.
pub fn op_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    m.clone()
        .singular_values()
        .iter()
        .copied()
        .fold(0.0, f64::max)
}

/// Smallest singular value.
pub fn min_singular_value(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return f64::INFINITY;
    }
    m.clone()
        .singular_values()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Orthonormal basis of the column space of a full-column-rank matrix.
pub fn orthonormalize(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut q = m.clone();
    // two passes of modified Gram-Schmidt
    for j in 0..q.ncols() {
        for _ in 0..2 {
            for i in 0..j {
                let proj = q.column(i).dot(&q.column(j));
                let qi = q.column(i).clone_owned();
                q.column_mut(j).axpy(-proj, &qi, 1.0);
            }
        }
        let n = q.column(j).norm();
        q.column_mut(j).scale_mut(1.0 / n);
    }
    q
}

/// Orthonormal basis of the orthogonal complement of the span of orthonormal columns.
pub fn orthonormal_complement(q: &DMatrix<f64>) -> DMatrix<f64> {
    let d = q.nrows();
    let mut basis: Vec<DVector<f64>> = q.column_iter().map(|c| c.clone_owned()).collect();
    let mut out = Vec::new();
    while basis.len() < d {
        let mut best: Option<DVector<f64>> = None;
        for i in 0..d {
            let mut v = DVector::<f64>::zeros(d);
            v[i] = 1.0;
            for _ in 0..2 {
                for b in &basis {
                    let p = b.dot(&v);
                    v.axpy(-p, b, 1.0);
                }
            }
            if best.as_ref().is_none_or(|bv| v.norm() > bv.norm()) {
                best = Some(v);
            }
        }
        let v = best.expect("dimension > 0");
        let v = &v / v.norm();
        basis.push(v.clone());
        out.push(v);
    }
    DMatrix::from_columns(&out)
}

/// Sine of the largest principal angle between the spans of two orthonormal bases.
pub fn subspace_gap(u: &DMatrix<f64>, v: &DMatrix<f64>) -> f64 {
    let residual = v - u * (u.transpose() * v);
    op_norm(&residual).min(1.0)
}

/// Orthonormal basis for the dominant `k`-dimensional invariant subspace of `m`
/// (the one belonging to the `k` eigenvalues of largest modulus), by orthogonal
/// subspace iteration.
fn dominant_subspace(m: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let d = m.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let start = DMatrix::from_fn(d, k, |_, _| rand::Rng::gen_range(&mut rng, -1.0..1.0));
    let mut x = orthonormalize(&start);
    let mut stalled = 0;
    for _ in 0..200_000 {
        let next = orthonormalize(&(m * &x));
        let change = subspace_gap(&x, &next);
        x = next;
        if change < 1e-15 {
            stalled += 1;
            if stalled > 3 {
                break;
            }
        }
    }
    x
}

/// Solves `t11 y - y t22 = rhs` for `y`.
fn solve_sylvester(t11: &DMatrix<f64>, t22: &DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let l = t11.nrows();
    let m = t22.nrows();
    let n = l * m;
    let mut k = DMatrix::<f64>::zeros(n, n);
    for j in 0..m {
        for i in 0..l {
            let row = i + l * j;
            for p in 0..l {
                k[(row, p + l * j)] += t11[(i, p)];
            }
            for q in 0..m {
                k[(row, i + l * q)] -= t22[(q, j)];
            }
        }
    }
    let b = DVector::from_iterator(n, rhs.iter().copied());
    let sol = k
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::SingularJacobian("Sylvester operator".into()))?;
    Ok(DMatrix::from_column_slice(l, m, sol.as_slice()))
}

/// One ordered block-triangular form `Q^T A Q = [[T11, T12], [0, T22]]` with the
/// leading block carrying a chosen invariant subspace, together with the spectral
/// projector `Q [[I, Y], [0, 0]] Q^T` onto it.
#[derive(Debug, Clone)]
struct OrderedBlock {
    basis: DMatrix<f64>,
    lead: DMatrix<f64>,
    /// `[I, Y] Q^T`.
    row: DMatrix<f64>,
}

impl OrderedBlock {
    fn new(a: &DMatrix<f64>, basis: DMatrix<f64>) -> Result<Self> {
        let k = basis.ncols();
        let d = a.nrows();
        let complement = orthonormal_complement(&basis);
        let mut q = DMatrix::<f64>::zeros(d, d);
        q.columns_mut(0, k).copy_from(&basis);
        q.columns_mut(k, d - k).copy_from(&complement);
        let t = q.transpose() * a * &q;
        let t11 = t.view((0, 0), (k, k)).clone_owned();
        let t12 = t.view((0, k), (k, d - k)).clone_owned();
        let t22 = t.view((k, k), (d - k, d - k)).clone_owned();
        let y = solve_sylvester(&t11, &t22, &t12)?;
        let mut iy = DMatrix::<f64>::zeros(k, d);
        iy.columns_mut(0, k).fill_with_identity();
        iy.columns_mut(k, d - k).copy_from(&y);
        Ok(Self {
            basis,
            lead: t11,
            row: iy * q.transpose(),
        })
    }

    fn projector(&self) -> DMatrix<f64> {
        &self.basis * &self.row
    }
}

/// The hyperbolic splitting of a matrix `A` with spectral projectors and rates.
#[derive(Debug, Clone)]
pub struct HyperbolicSplitting {
    stable_projector: DMatrix<f64>,
    unstable_projector: DMatrix<f64>,
    lambda: f64,
    growth_constant: f64,
    stable_dim: usize,
    stable: OrderedBlock,
    unstable: OrderedBlock,
    unstable_lead_inverse: DMatrix<f64>,
}

impl HyperbolicSplitting {
    pub fn dim(&self) -> usize {
        self.stable_projector.nrows()
    }

    pub fn stable_dim(&self) -> usize {
        self.stable_dim
    }

    pub fn unstable_dim(&self) -> usize {
        self.dim() - self.stable_dim
    }

    pub fn stable_projector(&self) -> &DMatrix<f64> {
        &self.stable_projector
    }

    pub fn unstable_projector(&self) -> &DMatrix<f64> {
        &self.unstable_projector
    }

    /// Contraction rate, strictly larger than the spectral rate.
    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// `C >= 1` with `|A^n P_s| <= C lambda^n` and `|A^-n P_u| <= C lambda^n`.
    pub fn growth_constant(&self) -> f64 {
        self.growth_constant
    }

    /// Orthonormal basis of `E^s` (d x l).
    pub fn stable_basis(&self) -> &DMatrix<f64> {
        &self.stable.basis
    }

    /// Orthonormal basis of `E^u` (d x (d - l)).
    pub fn unstable_basis(&self) -> &DMatrix<f64> {
        &self.unstable.basis
    }

    /// Orthonormal frame whose first `l` columns span `E^s`.
    pub fn stable_frame(&self) -> DMatrix<f64> {
        frame_from(&self.stable.basis)
    }

    /// Orthonormal frame whose first `d - l` columns span `E^u`.
    pub fn unstable_frame(&self) -> DMatrix<f64> {
        frame_from(&self.unstable.basis)
    }

    /// `A^n P_s`, evaluated through the contracting block so no unstable
    /// round-off is amplified.
    pub fn stable_power(&self, n: usize) -> DMatrix<f64> {
        let lead = matrix_power(&self.stable.lead, n);
        &self.stable.basis * lead * &self.stable.row
    }

    /// `A^-n P_u`, evaluated through the inverse of the expanding block.
    pub fn unstable_inverse_power(&self, n: usize) -> DMatrix<f64> {
        let lead = matrix_power(&self.unstable_lead_inverse, n);
        &self.unstable.basis * lead * &self.unstable.row
    }

    /// Matrix of `A` restricted to `E^u` in the orthonormal unstable basis.
    pub fn unstable_block(&self) -> &DMatrix<f64> {
        &self.unstable.lead
    }

    /// Matrix of `A` restricted to `E^s` in the orthonormal stable basis.
    pub fn stable_block(&self) -> &DMatrix<f64> {
        &self.stable.lead
    }
}

fn frame_from(basis: &DMatrix<f64>) -> DMatrix<f64> {
    let d = basis.nrows();
    let k = basis.ncols();
    let comp = orthonormal_complement(basis);
    let mut q = DMatrix::<f64>::zeros(d, d);
    q.columns_mut(0, k).copy_from(basis);
    q.columns_mut(k, d - k).copy_from(&comp);
    q
}

pub fn matrix_power(m: &DMatrix<f64>, n: usize) -> DMatrix<f64> {
    let mut out = DMatrix::<f64>::identity(m.nrows(), m.ncols());
    for _ in 0..n {
        out = &out * m;
    }
    out
}

/// Spectral splitting of a hyperbolic integer matrix.
pub fn compute_splitting(a: &IntegerMatrix) -> Result<HyperbolicSplitting> {
    let witness = is_hyperbolic(a, 1e-9)?;
    if !witness.hyperbolic {
        return Err(Error::NotHyperbolic {
            min_gap: witness.min_gap,
        });
    }
    let det = a.determinant()?;
    if det == 0 {
        return Err(Error::NotUnimodular { det });
    }
    let mat = a.to_dmatrix();
    let d = a.dim();
    let moduli: Vec<f64> = witness
        .eigenvalues
        .iter()
        .map(|&(re, im)| re.hypot(im))
        .collect();
    let l = moduli.iter().filter(|&&m| m < 1.0).count();
    if l == 0 || l == d {
        return Err(Error::InvalidArgument(
            "splitting needs both stable and unstable eigenvalues".into(),
        ));
    }
    let lambda_s = moduli.iter().filter(|&&m| m < 1.0).fold(0.0, |a: f64, &m| a.max(m));
    let lambda_u = moduli
        .iter()
        .filter(|&&m| m > 1.0)
        .fold(0.0, |a: f64, &m| a.max(1.0 / m));
    let lambda = lambda_s.max(lambda_u) + LAMBDA_MARGIN;

    let inv = mat
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::SingularJacobian("matrix A".into()))?;
    let stable = OrderedBlock::new(&mat, dominant_subspace(&inv, l))?;
    let unstable = OrderedBlock::new(&mat, dominant_subspace(&mat, d - l))?;
    let unstable_lead_inverse = unstable
        .lead
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::SingularJacobian("unstable block".into()))?;

    let stable_projector = stable.projector();
    let unstable_projector = unstable.projector();

    let mut split = HyperbolicSplitting {
        stable_projector,
        unstable_projector,
        lambda,
        growth_constant: 1.0,
        stable_dim: l,
        stable,
        unstable,
        unstable_lead_inverse,
    };
    let s_scaled = &split.stable.lead / lambda;
    let u_scaled = &split.unstable_lead_inverse / lambda;
    let mut s_pow = DMatrix::<f64>::identity(l, l);
    let mut u_pow = DMatrix::<f64>::identity(d - l, d - l);
    let mut c: f64 = 1.0;
    for _ in 0..=GROWTH_SCAN {
        c = c.max(op_norm(&(&split.stable.basis * &s_pow * &split.stable.row)));
        c = c.max(op_norm(&(&split.unstable.basis * &u_pow * &split.unstable.row)));
        s_pow = &s_pow * &s_scaled;
        u_pow = &u_pow * &u_scaled;
    }
    split.growth_constant = c;
    Ok(split)
}

/// Fibrewise affine model `G(b, x) = (f(b), A x + v(b))`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineModel {
    matrix: IntegerMatrix,
    translation: TrigPolynomial,
    base: BaseSystem,
}

impl AffineModel {
    pub fn new(matrix: IntegerMatrix, translation: TrigPolynomial, base: BaseSystem) -> Result<Self> {
        check_dim(base.dim(), translation.dim_in())?;
        check_dim(matrix.dim(), translation.dim_out())?;
        Ok(Self {
            matrix,
            translation,
            base,
        })
    }

    pub fn matrix(&self) -> &IntegerMatrix {
        &self.matrix
    }

    pub fn translation(&self) -> &TrigPolynomial {
        &self.translation
    }

    pub fn base(&self) -> &BaseSystem {
        &self.base
    }

    pub fn fibre_dim(&self) -> usize {
        self.matrix.dim()
    }

    /// Lift of the fibre map over `b`: `x -> A x + v(b)`.
    pub fn lift_map(&self, b: &[f64], x: &[f64]) -> Vec<f64> {
        let mut y = self.matrix.apply_f64(x);
        for (yi, vi) in y.iter_mut().zip(self.translation.eval(b)) {
            *yi += vi;
        }
        y
    }

    pub fn apply(&self, e: &BundlePoint) -> Result<BundlePoint> {
        check_dim(self.base.dim(), e.base.dim())?;
        check_dim(self.fibre_dim(), e.fibre.dim())?;
        let fibre = project(&LiftPoint::new(
            self.lift_map(e.base.coords(), e.fibre.coords()),
        ));
        Ok(BundlePoint::new(self.base.forward(&e.base), fibre))
    }
}

/// `G(e)` for the affine model.
pub fn apply_affine(model: &AffineModel, e: &BundlePoint) -> Result<BundlePoint> {
    model.apply(e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::torus::{torus_distance, TorusPoint};
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    pub(crate) fn cat() -> IntegerMatrix {
        IntegerMatrix::from_rows(&[vec![2, 1], vec![1, 1]]).unwrap()
    }

    #[test]
    fn characteristic_polynomial_of_cat() {
        let p = characteristic_polynomial(&cat());
        assert_eq!(p, vec![BigInt::from(1), BigInt::from(-3), BigInt::from(1)]);
    }

    #[test]
    fn jordan_blocks_are_not_hyperbolic() {
        let a = IntegerMatrix::from_rows(&[vec![1, 0, 0], vec![0, 1, -1], vec![2, 0, 1]]).unwrap();
        for m in [a.clone(), a.transpose(), a.inverse().unwrap()] {
            let w = is_hyperbolic(&m, 1e-9).unwrap();
            assert!(!w.hyperbolic);
            assert!(w.min_gap < 1e-12);
            assert_eq!(distinct_eigenvalues(&m).unwrap().len(), 1);
        }
    }

    #[test]
    fn rotation_is_not_hyperbolic() {
        let r = IntegerMatrix::from_rows(&[vec![0, -1], vec![1, 0]]).unwrap();
        assert!(!is_hyperbolic(&r, 1e-9).unwrap().hyperbolic);
        assert!(is_hyperbolic(&cat(), 1e-9).unwrap().hyperbolic);
    }

    fn three_dim() -> IntegerMatrix {
        IntegerMatrix::from_rows(&[vec![1, 1, 1], vec![0, 1, 1], vec![0, 1, 2]]).unwrap()
    }

    fn cat_block4() -> IntegerMatrix {
        IntegerMatrix::from_rows(&[
            vec![2, 1, 0, 0],
            vec![1, 1, 0, 0],
            vec![0, 0, 2, 1],
            vec![0, 0, 1, 1],
        ])
        .unwrap()
    }

    /// Random element of GL(d, Z) as a product of elementary matrices.
    fn random_gl<R: Rng>(d: usize, rng: &mut R) -> IntegerMatrix {
        let mut m = IntegerMatrix::identity(d);
        for _ in 0..6 {
            let i = rng.gen_range(0..d);
            let mut j = rng.gen_range(0..d);
            if i == j {
                j = (j + 1) % d;
            }
            let mut e = IntegerMatrix::identity(d);
            e.entries[i * d + j] = rng.gen_range(-2..=2);
            if rng.gen_bool(0.2) {
                e.entries[i * d + i] = -1;
            }
            m = m.mul(&e).unwrap();
        }
        m
    }

    #[test]
    fn determinants_are_exact() {
        assert_eq!(cat().determinant().unwrap(), 1);
        assert_eq!(three_dim().determinant().unwrap(), 1);
        let two = IntegerMatrix::from_rows(&[vec![2, 0], vec![0, 1]]).unwrap();
        assert_eq!(two.determinant().unwrap(), 2);
        let swap = IntegerMatrix::from_rows(&[vec![0, 1], vec![1, 0]]).unwrap();
        assert_eq!(swap.determinant().unwrap(), -1);
        assert!(matches!(two.inverse(), Err(Error::NotUnimodular { det: 2 })));
    }

    #[test]
    fn hyperbolicity_examples() {
        let w = is_hyperbolic(&cat(), 1e-9).unwrap();
        assert!(w.hyperbolic);
        let mut mods: Vec<f64> = w.eigenvalues.iter().map(|(r, i)| r.hypot(*i)).collect();
        mods.sort_by(f64::total_cmp);
        assert_abs_diff_eq!(mods[0], (3.0 - 5f64.sqrt()) / 2.0, epsilon = 1e-13);
        assert_abs_diff_eq!(mods[1], (3.0 + 5f64.sqrt()) / 2.0, epsilon = 1e-13);

        let shear = IntegerMatrix::from_rows(&[vec![1, 1], vec![0, 1]]).unwrap();
        assert!(!is_hyperbolic(&shear, 1e-9).unwrap().hyperbolic);
        assert!(!is_hyperbolic(&three_dim(), 1e-9).unwrap().hyperbolic);
        assert!(is_hyperbolic(&cat(), 0.0).is_err());
    }

    #[test]
    fn cat_splitting_matches_eigenvectors() {
        let s = compute_splitting(&cat()).unwrap();
        assert_eq!(s.stable_dim(), 1);
        let expect = (3.0 - 5f64.sqrt()) / 2.0 + LAMBDA_MARGIN;
        assert_abs_diff_eq!(s.lambda(), expect, epsilon = 1e-14);
        let phi = (5f64.sqrt() - 1.0) / 2.0;
        let es = DMatrix::from_column_slice(2, 1, &[1.0, -1.0 - phi]).normalize();
        let eu = DMatrix::from_column_slice(2, 1, &[1.0, phi]).normalize();
        assert!(subspace_gap(s.stable_basis(), &es) < 1e-14);
        assert!(subspace_gap(s.unstable_basis(), &eu) < 1e-14);
        let sum = s.stable_projector() + s.unstable_projector();
        assert!((sum - DMatrix::<f64>::identity(2, 2)).amax() < 1e-12);
        assert!(s.growth_constant() >= 1.0 && s.growth_constant() < 1.0 + 1e-9);
    }

    fn check_splitting_invariants(a: &IntegerMatrix, s: &HyperbolicSplitting) {
        let d = a.dim();
        let am = a.to_dmatrix();
        let ps = s.stable_projector();
        let pu = s.unstable_projector();
        let id = DMatrix::<f64>::identity(d, d);
        assert!((ps + pu - &id).amax() < 1e-10);
        assert!((ps * ps - ps).amax() < 1e-10);
        assert!((pu * pu - pu).amax() < 1e-10);
        assert!((ps * pu).amax() < 1e-10);
        assert!((ps * &am - &am * ps).amax() < 1e-10);
        assert!((pu * &am - &am * pu).amax() < 1e-10);
        let rank = |m: &DMatrix<f64>| m.clone().singular_values().iter().filter(|&&v| v > 1e-8).count();
        assert_eq!(rank(ps), s.stable_dim());
        assert_eq!(rank(pu), d - s.stable_dim());
        for n in 1..=30 {
            let bound = s.growth_constant() * s.lambda().powi(n as i32);
            assert!(op_norm(&s.stable_power(n)) <= bound * (1.0 + 1e-9));
            assert!(op_norm(&s.unstable_inverse_power(n)) <= bound * (1.0 + 1e-9));
        }
    }

    #[test]
    fn splitting_invariants_hold() {
        for a in [cat(), cat_block4()] {
            let s = compute_splitting(&a).unwrap();
            check_splitting_invariants(&a, &s);
        }
        let nonnormal = IntegerMatrix::from_rows(&[vec![3, 2], vec![1, 1]]).unwrap();
        let s = compute_splitting(&nonnormal).unwrap();
        check_splitting_invariants(&nonnormal, &s);
        // a 3x3 hyperbolic matrix with a complex pair
        let m3 = IntegerMatrix::from_rows(&[vec![0, 0, 1], vec![1, 0, -1], vec![0, 1, 3]]).unwrap();
        if is_hyperbolic(&m3, 1e-9).unwrap().hyperbolic {
            let s = compute_splitting(&m3).unwrap();
            check_splitting_invariants(&m3, &s);
        }
    }

    #[test]
    fn block_diagonal_splitting_is_direct_sum() {
        let s = compute_splitting(&cat_block4()).unwrap();
        assert_eq!(s.stable_dim(), 2);
        let c = compute_splitting(&cat()).unwrap();
        assert_abs_diff_eq!(s.lambda(), c.lambda(), epsilon = 1e-14);
        let mut expected = DMatrix::<f64>::zeros(4, 4);
        expected.view_mut((0, 0), (2, 2)).copy_from(c.stable_projector());
        expected.view_mut((2, 2), (2, 2)).copy_from(c.stable_projector());
        assert!((s.stable_projector() - expected).amax() < 1e-12);
    }

    #[test]
    fn splitting_rejects_non_hyperbolic() {
        let shear = IntegerMatrix::from_rows(&[vec![1, 1], vec![0, 1]]).unwrap();
        assert!(matches!(
            compute_splitting(&shear),
            Err(Error::NotHyperbolic { .. })
        ));
    }

    #[test]
    fn random_vectors_obey_rate_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for a in [cat(), cat_block4()] {
            let s = compute_splitting(&a).unwrap();
            let d = a.dim();
            for _ in 0..200 {
                let w = DVector::from_fn(d, |_, _| rng.gen_range(-1.0..1.0)).normalize();
                let ws = s.stable_projector() * &w;
                let wu = s.unstable_projector() * &w;
                for n in 1..=30 {
                    let bound = s.growth_constant() * s.lambda().powi(n);
                    let fs = (s.stable_power(n as usize) * &w).norm();
                    let fu = (s.unstable_inverse_power(n as usize) * &w).norm();
                    assert!(fs <= bound * ws.norm() * (1.0 + 1e-9) + 1e-15);
                    assert!(fu <= bound * wu.norm() * (1.0 + 1e-9) + 1e-15);
                }
            }
        }
    }

    #[test]
    fn hyperbolicity_is_invariant_under_transpose_and_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut hyperbolic_seen = 0;
        for i in 0..50 {
            let d = 2 + i % 3;
            let a = random_gl(d, &mut rng);
            let inv = a.inverse().unwrap();
            let h = is_hyperbolic(&a, 1e-9).unwrap().hyperbolic;
            assert_eq!(h, is_hyperbolic(&a.transpose(), 1e-9).unwrap().hyperbolic);
            assert_eq!(h, is_hyperbolic(&inv, 1e-9).unwrap().hyperbolic);
            hyperbolic_seen += h as usize;
        }
        assert!(hyperbolic_seen > 0);
    }

    #[test]
    fn affine_examples() {
        let base = BaseSystem::translation(vec![0.25]);
        let zero = TrigPolynomial::zero(1, 2);
        let g = AffineModel::new(cat(), zero, base.clone()).unwrap();
        let e = BundlePoint::new(TorusPoint::origin(1), TorusPoint::origin(2));
        let ge = apply_affine(&g, &e).unwrap();
        assert_eq!(ge.fibre.coords(), &[0.0, 0.0]);
        assert_eq!(ge.base, base.forward(&e.base));

        let e = BundlePoint::new(TorusPoint::origin(1), TorusPoint::new(vec![0.5, 0.5]));
        let ge = apply_affine(&g, &e).unwrap();
        assert_abs_diff_eq!(ge.fibre.coords()[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(ge.fibre.coords()[1], 0.0, epsilon = 1e-15);

        let shift = TrigPolynomial::constant(1, vec![0.1, 0.0]);
        let g = AffineModel::new(cat(), shift, base).unwrap();
        let e = BundlePoint::new(TorusPoint::origin(1), TorusPoint::origin(2));
        let ge = apply_affine(&g, &e).unwrap();
        assert_abs_diff_eq!(ge.fibre.coords()[0], 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(ge.fibre.coords()[1], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn affine_map_is_equivariant_under_fibre_translation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = TrigPolynomial::single(1, vec![1], vec![0.1, -0.2], vec![0.05, 0.0]);
        let g = AffineModel::new(cat(), v, BaseSystem::translation(vec![0.3])).unwrap();
        for _ in 0..100 {
            let e = BundlePoint::random(1, 2, &mut rng);
            let s = TorusPoint::random(2, &mut rng);
            let shifted = BundlePoint::new(e.base.clone(), translate_fibre(&e.fibre, &s));
            let lhs = g.apply(&shifted).unwrap().fibre;
            let a_s = TorusPoint::new(cat().apply_f64(s.coords()));
            let rhs = crate::torus::translate(&g.apply(&e).unwrap().fibre, &a_s).unwrap();
            assert!(torus_distance(&lhs, &rhs).unwrap() < 1e-13);
        }
    }

    fn translate_fibre(x: &TorusPoint, s: &TorusPoint) -> TorusPoint {
        crate::torus::translate(x, s).unwrap()
    }
}
