//! Points, lifts and uniform grids on flat tori.
//!
//! The fundamental domain is `[0, 1)^n` and all distances are taken in the
//! flat metric inherited from the Euclidean cover.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Reduce a real number to its representative in `[0, 1)`.
#[inline]
pub fn wrap_unit(x: f64) -> f64 {
    let r = x - x.floor();
    // -1e-20 - floor(-1e-20) rounds to exactly 1.0
    if r >= 1.0 {
        0.0
    } else {
        r
    }
}

/// Signed difference reduced to `[-1/2, 1/2]`.
#[inline]
pub fn wrap_centered(x: f64) -> f64 {
    x - x.round()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TorusPoint {
    coords: Vec<f64>,
}

impl TorusPoint {
    /// Builds a point from arbitrary reals, reducing each coordinate mod 1.
    pub fn new(coords: Vec<f64>) -> Self {
        Self {
            coords: coords.into_iter().map(wrap_unit).collect(),
        }
    }

    pub fn origin(dim: usize) -> Self {
        Self {
            coords: vec![0.0; dim],
        }
    }

    pub fn random<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        Self {
            coords: (0..dim).map(|_| rng.gen::<f64>()).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    /// The lift lying in the fundamental domain.
    pub fn lift(&self) -> LiftPoint {
        LiftPoint::new(self.coords.clone())
    }

    pub fn negate(&self) -> TorusPoint {
        TorusPoint::new(self.coords.iter().map(|c| -c).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiftPoint {
    coords: Vec<f64>,
}

impl LiftPoint {
    pub fn new(coords: Vec<f64>) -> Self {
        Self { coords }
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.coords
    }

    pub fn shifted(&self, deck: &DeckVector) -> Result<LiftPoint> {
        check_dim(self.dim(), deck.dim())?;
        Ok(LiftPoint::new(
            self.coords
                .iter()
                .zip(deck.entries())
                .map(|(x, m)| x + *m as f64)
                .collect(),
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DeckVector {
    entries: Vec<i64>,
}

impl DeckVector {
    pub fn new(entries: Vec<i64>) -> Self {
        Self { entries }
    }

    /// The `j`-th standard basis vector of `Z^dim`.
    pub fn basis(dim: usize, j: usize) -> Self {
        let mut entries = vec![0; dim];
        entries[j] = 1;
        Self { entries }
    }

    pub fn dim(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> &[i64] {
        &self.entries
    }
}

/// A point of the trivial bundle `B x T^d` with `B = T^k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundlePoint {
    pub base: TorusPoint,
    pub fibre: TorusPoint,
}

impl BundlePoint {
    pub fn new(base: TorusPoint, fibre: TorusPoint) -> Self {
        Self { base, fibre }
    }

    pub fn random<R: Rng + ?Sized>(base_dim: usize, fibre_dim: usize, rng: &mut R) -> Self {
        Self {
            base: TorusPoint::random(base_dim, rng),
            fibre: TorusPoint::random(fibre_dim, rng),
        }
    }

    /// Splits a point of `T^(k+d)` into base and fibre parts.
    pub fn from_joint(joint: &TorusPoint, base_dim: usize) -> Self {
        let (b, x) = joint.coords().split_at(base_dim);
        Self {
            base: TorusPoint { coords: b.to_vec() },
            fibre: TorusPoint { coords: x.to_vec() },
        }
    }

    pub fn joint_coords(&self) -> Vec<f64> {
        let mut v = self.base.coords.clone();
        v.extend_from_slice(&self.fibre.coords);
        v
    }
}

/// Covering projection `R^n -> T^n`.
pub fn project(p: &LiftPoint) -> TorusPoint {
    TorusPoint::new(p.coords.clone())
}

/// Flat distance: `min_j |x - y + j|` over integer vectors `j`.
pub fn torus_distance(x: &TorusPoint, y: &TorusPoint) -> Result<f64> {
    check_dim(x.dim(), y.dim())?;
    Ok(torus_distance_slices(x.coords(), y.coords()))
}

/// Flat distance between the projections of two coordinate vectors of equal length.
pub fn torus_distance_slices(x: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    x.iter()
        .zip(y)
        .map(|(a, b)| {
            let d = wrap_centered(a - b);
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// The principal torus action `x + t`.
pub fn translate(x: &TorusPoint, t: &TorusPoint) -> Result<TorusPoint> {
    check_dim(x.dim(), t.dim())?;
    Ok(TorusPoint::new(
        x.coords.iter().zip(&t.coords).map(|(a, b)| a + b).collect(),
    ))
}

/// Uniform lattice `{ (i_1/n_1, ..., i_m/n_m) }` on `T^m`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    resolution: Vec<usize>,
}

impl Grid {
    pub fn new(resolution: Vec<usize>) -> Result<Self> {
        if resolution.is_empty() {
            return Err(Error::InvalidArgument("grid needs at least one axis".into()));
        }
        if resolution.contains(&0) {
            return Err(Error::InvalidArgument(
                "grid resolutions must be positive".into(),
            ));
        }
        if resolution
            .iter()
            .try_fold(1usize, |acc, &n| acc.checked_mul(n))
            .is_none()
        {
            return Err(Error::InvalidArgument("grid size overflows".into()));
        }
        Ok(Self { resolution })
    }

    pub fn uniform(dim: usize, n: usize) -> Result<Self> {
        Self::new(vec![n; dim])
    }

    pub fn dim(&self) -> usize {
        self.resolution.len()
    }

    pub fn resolution(&self) -> &[usize] {
        &self.resolution
    }

    pub fn len(&self) -> usize {
        self.resolution.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Spacing `1/n_i` along each axis.
    pub fn spacing(&self) -> Vec<f64> {
        self.resolution.iter().map(|&n| 1.0 / n as f64).collect()
    }

    /// Largest distance from any point of the torus to its nearest lattice point.
    pub fn covering_radius(&self) -> f64 {
        0.5 * self.spacing().iter().map(|h| h * h).sum::<f64>().sqrt()
    }

    /// Lattice point with the given linear index (last axis varies fastest).
    pub fn point(&self, mut index: usize) -> TorusPoint {
        let mut coords = vec![0.0; self.dim()];
        for (axis, &n) in self.resolution.iter().enumerate().rev() {
            coords[axis] = (index % n) as f64 / n as f64;
            index /= n;
        }
        TorusPoint { coords }
    }

    pub fn iter(&self) -> impl Iterator<Item = TorusPoint> + '_ {
        (0..self.len()).map(move |i| self.point(i))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn project_examples() {
        let p = project(&LiftPoint::new(vec![0.25, 0.5]));
        assert_eq!(p.coords(), &[0.25, 0.5]);
        let p = project(&LiftPoint::new(vec![1.25, -0.5]));
        assert_eq!(p.coords(), &[0.25, 0.5]);
        let p = project(&LiftPoint::new(vec![3.0, -2.0]));
        assert_eq!(p.coords(), &[0.0, 0.0]);
    }

    #[test]
    fn tiny_negative_wraps_into_domain() {
        let v = wrap_unit(-1e-20);
        assert!((0.0..1.0).contains(&v));
    }

    #[test]
    fn distance_examples() {
        let o = TorusPoint::origin(2);
        assert_eq!(torus_distance(&o, &o).unwrap(), 0.0);
        let x = TorusPoint::new(vec![0.9, 0.0]);
        let y = TorusPoint::new(vec![0.1, 0.0]);
        assert_abs_diff_eq!(torus_distance(&x, &y).unwrap(), 0.2, epsilon = 1e-15);
    }

    #[test]
    fn distance_matches_enumeration_over_neighbouring_cells() {
        let x = TorusPoint::new(vec![0.5, 0.5]);
        let y = TorusPoint::origin(2);
        let mut best = f64::INFINITY;
        for j1 in -1..=1 {
            for j2 in -1..=1 {
                let d = ((0.5 + j1 as f64).powi(2) + (0.5 + j2 as f64).powi(2)).sqrt();
                best = best.min(d);
            }
        }
        assert_abs_diff_eq!(torus_distance(&x, &y).unwrap(), best, epsilon = 1e-15);
        assert_abs_diff_eq!(best, std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-15);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let x = TorusPoint::origin(2);
        let y = TorusPoint::origin(3);
        assert!(matches!(
            torus_distance(&x, &y),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(translate(&x, &y).is_err());
    }

    #[test]
    fn translate_examples() {
        let x = TorusPoint::new(vec![0.3]);
        assert_eq!(translate(&x, &TorusPoint::origin(1)).unwrap(), x);
        let t = TorusPoint::new(vec![0.7]);
        let y = translate(&t, &t).unwrap();
        assert_abs_diff_eq!(y.coords()[0], 0.4, epsilon = 1e-15);
    }

    #[test]
    fn translate_inverse_on_random_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let x = TorusPoint::random(3, &mut rng);
            let t = TorusPoint::random(3, &mut rng);
            let back = translate(&translate(&x, &t).unwrap(), &t.negate()).unwrap();
            assert!(torus_distance(&back, &x).unwrap() < 1e-15);
        }
    }

    #[test]
    fn grid_enumerates_lattice_without_duplicates() {
        let g = Grid::new(vec![3, 4, 2]).unwrap();
        assert_eq!(g.len(), 24);
        let mut seen: Vec<Vec<i64>> = g
            .iter()
            .map(|p| {
                p.coords()
                    .iter()
                    .zip(g.resolution())
                    .map(|(c, &n)| (c * n as f64).round() as i64)
                    .collect()
            })
            .collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 24);
        assert!(Grid::new(vec![0, 2]).is_err());
    }

    #[test]
    fn bundle_point_split_round_trips() {
        let j = TorusPoint::new(vec![0.1, 0.2, 0.3]);
        let e = BundlePoint::from_joint(&j, 1);
        assert_eq!(e.base.coords(), &[0.1]);
        assert_eq!(e.fibre.coords(), &[0.2, 0.3]);
        assert_eq!(e.joint_coords(), vec![0.1, 0.2, 0.3]);
    }
}
