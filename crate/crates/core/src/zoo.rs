//! Bundled example systems.

use crate::config::{parse_config, SystemConfig};
use crate::error::Result;
use crate::linear::IntegerMatrix;
use crate::system::{BaseSystem, FibrewiseSystem, TrigPolynomial, TrigTerm};

/// Text of the bundled `cat_over_rotation.cfg`.
pub const CAT_OVER_ROTATION: &str = include_str!("../fixtures/cat_over_rotation.cfg");

pub fn cat_over_rotation() -> SystemConfig {
    parse_config(CAT_OVER_ROTATION).expect("bundled fixture is valid")
}

#[derive(Debug, Clone)]
pub struct ZooEntry {
    pub name: &'static str,
    pub system: FibrewiseSystem,
}

pub fn cat_matrix() -> IntegerMatrix {
    IntegerMatrix::from_rows(&[vec![2, 1], vec![1, 1]]).expect("square")
}

/// The 3x3 unimodular matrix used for the three-dimensional examples.
pub fn three_dim_matrix() -> IntegerMatrix {
    IntegerMatrix::from_rows(&[vec![1, 1, 1], vec![0, 1, 1], vec![0, 1, 2]]).expect("square")
}

fn rotation() -> BaseSystem {
    BaseSystem::translation(vec![2f64.sqrt() - 1.0])
}

fn term(freq: Vec<i64>, cos: Vec<f64>, sin: Vec<f64>) -> TrigTerm {
    TrigTerm { freq, cos, sin }
}

fn poly(dim_in: usize, dim_out: usize, terms: Vec<TrigTerm>) -> TrigPolynomial {
    TrigPolynomial::new(dim_in, dim_out, terms).expect("consistent terms")
}

/// `x -> A x + (eps sin 2 pi x1, 0)` over the rotation.
pub fn perturbed_cat(eps: f64) -> FibrewiseSystem {
    FibrewiseSystem::new(
        rotation(),
        cat_matrix(),
        TrigPolynomial::zero(1, 2),
        TrigPolynomial::single(3, vec![0, 1, 0], vec![0.0, 0.0], vec![eps, 0.0]),
    )
    .expect("valid system")
}

fn build(base: BaseSystem, matrix: IntegerMatrix, translation: TrigPolynomial, perturbation: TrigPolynomial) -> FibrewiseSystem {
    FibrewiseSystem::new(base, matrix, translation, perturbation).expect("valid zoo system")
}

/// Cat-map systems with perturbation sup bounds up to 0.2, followed by the
/// three-dimensional examples.
pub fn zoo() -> Vec<ZooEntry> {
    let cat = cat_matrix;
    // A composed with the shear (x1 + s(x2), x2) is a diffeomorphism for any s.
    let shear = |s: f64| poly(3, 2, vec![term(vec![0, 0, 1], vec![0.0, 0.0], vec![2.0 * s, s])]);
    vec![
        ZooEntry {
            name: "cat_affine",
            system: build(rotation(), cat(), TrigPolynomial::zero(1, 2), TrigPolynomial::zero(3, 2)),
        },
        ZooEntry {
            name: "cat_over_rotation",
            system: perturbed_cat(0.05),
        },
        ZooEntry {
            name: "cat_sine_0.15",
            system: perturbed_cat(0.15),
        },
        ZooEntry {
            name: "cat_shear_0.2",
            system: build(rotation(), cat(), TrigPolynomial::zero(1, 2), shear(0.089)),
        },
        ZooEntry {
            name: "cat_base_coupled",
            system: build(
                rotation(),
                cat(),
                TrigPolynomial::zero(1, 2),
                poly(
                    3,
                    2,
                    vec![
                        term(vec![1, 1, 0], vec![0.0, 0.0], vec![0.04, 0.0]),
                        term(vec![0, 0, 1], vec![0.0, 0.04], vec![0.0, 0.0]),
                        term(vec![2, 1, -1], vec![0.02, 0.02], vec![0.0, 0.0]),
                    ],
                ),
            ),
        },
        ZooEntry {
            name: "cat_translated",
            system: build(
                rotation(),
                cat(),
                poly(1, 2, vec![term(vec![1], vec![0.1, 0.0], vec![0.0, 0.3])]),
                TrigPolynomial::single(3, vec![0, 1, 0], vec![0.0, 0.0], vec![0.05, 0.0]),
            ),
        },
        ZooEntry {
            name: "cat_over_cat",
            system: build(
                BaseSystem::automorphism(cat()).expect("unimodular"),
                cat(),
                TrigPolynomial::zero(2, 2),
                poly(4, 2, vec![term(vec![1, 0, 1, 0], vec![0.0, 0.03], vec![0.05, 0.0])]),
            ),
        },
        ZooEntry {
            name: "cat_over_composite",
            system: build(
                BaseSystem::composite(three_dim_matrix(), vec![0.1, 0.2, 0.3]).expect("unimodular"),
                cat(),
                TrigPolynomial::zero(3, 2),
                poly(5, 2, vec![term(vec![0, 1, 0, 1, 1], vec![0.02, 0.02], vec![0.0, 0.0])]),
            ),
        },
        ZooEntry {
            name: "three_dim_affine",
            system: build(rotation(), three_dim_matrix(), TrigPolynomial::zero(1, 3), TrigPolynomial::zero(4, 3)),
        },
        ZooEntry {
            name: "three_dim_perturbed",
            system: build(
                rotation(),
                three_dim_matrix(),
                TrigPolynomial::zero(1, 3),
                poly(4, 3, vec![term(vec![1, 0, 0, 1], vec![0.0, 0.02, 0.0], vec![0.03, 0.0, 0.01])]),
            ),
        },
    ]
}

/// The zoo entries as fully validated configurations.
pub fn zoo_config(entry: &ZooEntry) -> Result<String> {
    let s = &entry.system;
    let rows = |m: &IntegerMatrix| {
        let rows: Vec<String> = m
            .rows()
            .iter()
            .map(|r| format!("[{}]", r.iter().map(i64::to_string).collect::<Vec<_>>().join(", ")))
            .collect();
        format!("[{}]", rows.join(", "))
    };
    let list = |v: &[f64]| format!("[{}]", v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(", "));
    let ints = |v: &[i64]| format!("[{}]", v.iter().map(i64::to_string).collect::<Vec<_>>().join(", "));
    let mut out = format!(
        "name = \"{}\"\n[system]\nfibre_dim = {}\nbase_dim = {}\nmatrix = {}\n[system.base]\n",
        entry.name,
        s.fibre_dim(),
        s.base_dim(),
        rows(s.matrix())
    );
    match s.base() {
        BaseSystem::Translation { alpha } => {
            out += &format!("kind = \"translation\"\nalpha = {}\n", list(alpha));
        }
        BaseSystem::Automorphism { matrix, .. } => {
            out += &format!("kind = \"automorphism\"\nmatrix = {}\n", rows(matrix));
        }
        BaseSystem::Composite { matrix, alpha, .. } => {
            out += &format!("kind = \"composite\"\nmatrix = {}\nalpha = {}\n", rows(matrix), list(alpha));
        }
    }
    for (key, p) in [("translation", s.translation()), ("perturbation", s.perturbation())] {
        for t in p.terms() {
            out += &format!(
                "[[system.{key}]]\nfreq = {}\ncos = {}\nsin = {}\n",
                ints(&t.freq),
                list(&t.cos),
                list(&t.sin)
            );
        }
    }
    parse_config(&out)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::orientation_margin;
    use crate::system::induced_homology_matrix;

    #[test]
    fn fixture_matches_constructor() {
        let c = cat_over_rotation();
        assert_eq!(c.system, perturbed_cat(0.05));
        assert_eq!(c.name, "cat_over_rotation");
    }

    #[test]
    fn zoo_members_are_diffeomorphisms_within_amplitude() {
        for e in zoo() {
            assert!(e.system.perturbation_sup() <= 0.2, "{}", e.name);
            assert!(orientation_margin(&e.system).unwrap() > 0.0, "{}", e.name);
        }
    }

    #[test]
    fn zoo_round_trips_through_config_text() {
        for e in zoo() {
            let text = zoo_config(&e).unwrap();
            assert_eq!(parse_config(&text).unwrap().system, e.system, "{}", e.name);
        }
    }

    #[test]
    fn zoo_homology_matches_matrix() {
        for e in zoo() {
            assert_eq!(&induced_homology_matrix(&e.system).unwrap(), e.system.matrix(), "{}", e.name);
        }
    }
}
