//! The ambient model: a product of space forms sitting inside a block
//! pseudo-Euclidean space.
//!
//! Each factor of curvature k and dimension n is modeled as the quadric
//! `<x, x> = 1/k` inside `R^{n+1}` (Euclidean when k > 0, Lorentzian when
//! k < 0, with the hyperbolic model restricted to the upper sheet `x_0 > 0`).
//! Flat factors are plain `R^n` blocks. The whole product lives in the
//! concatenation of the blocks, with the inner product negating the leading
//! coordinate of every Lorentzian block.

use crate::error::{GeomError, Result};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Flat block-concatenated ambient coordinates. Block boundaries are owned by
/// the [`ProductSpace`] the vector is used with.
pub type AmbientVector = DVector<f64>;

/// Default absolute tolerance for the per-factor model constraints.
pub const POINT_TOL: f64 = 1e-10;

/// Relative tolerance for tangency tests.
pub const TANGENT_TOL: f64 = 1e-9;

/// One space-form factor: intrinsic dimension and sectional curvature.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpaceFormSpec {
    pub n: usize,
    pub k: f64,
}

impl SpaceFormSpec {
    pub fn new(n: usize, k: f64) -> Result<Self> {
        if n == 0 {
            return Err(GeomError::InvalidSpec(
                "space form dimension must be at least 1".into(),
            ));
        }
        if !k.is_finite() {
            return Err(GeomError::InvalidSpec("curvature must be finite".into()));
        }
        Ok(Self { n, k })
    }

    /// Ambient block dimension n + v(k), where v(k) = 1 iff k != 0.
    pub fn block_dim(&self) -> usize {
        self.n + usize::from(self.k != 0.0)
    }

    /// True when the factor carries a model constraint (k != 0).
    pub fn is_curved(&self) -> bool {
        self.k != 0.0
    }

    /// Signature index tau(k): 1 iff k < 0 (Lorentzian block).
    pub fn tau(&self) -> usize {
        usize::from(self.k < 0.0)
    }
}

/// An ordered product of space-form factors with its derived block layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ProductSpace {
    factors: Vec<SpaceFormSpec>,
    offsets: Vec<usize>,
    total_dim: usize,
    /// Diagonal of the ambient inner product: -1 on the leading coordinate of
    /// each Lorentzian block, +1 elsewhere.
    signs: DVector<f64>,
}

impl ProductSpace {
    pub fn new(factors: Vec<SpaceFormSpec>) -> Result<Self> {
        if factors.len() < 2 {
            return Err(GeomError::InvalidSpec(
                "a product space needs at least 2 factors".into(),
            ));
        }
        let mut offsets = Vec::with_capacity(factors.len());
        let mut total = 0usize;
        for f in &factors {
            SpaceFormSpec::new(f.n, f.k)?;
            offsets.push(total);
            total += f.block_dim();
        }
        let mut signs = DVector::from_element(total, 1.0);
        for (f, &off) in factors.iter().zip(&offsets) {
            if f.k < 0.0 {
                signs[off] = -1.0;
            }
        }
        Ok(Self {
            factors,
            offsets,
            total_dim: total,
            signs,
        })
    }

    pub fn factor_count(&self) -> usize {
        self.factors.len()
    }

    pub fn factors(&self) -> &[SpaceFormSpec] {
        &self.factors
    }

    pub fn factor(&self, i: usize) -> &SpaceFormSpec {
        &self.factors[i]
    }

    /// Total ambient dimension N.
    pub fn total_dim(&self) -> usize {
        self.total_dim
    }

    /// Indices of the curved factors (the set J).
    pub fn curved_set(&self) -> Vec<usize> {
        (0..self.factors.len())
            .filter(|&i| self.factors[i].is_curved())
            .collect()
    }

    /// Signature index rho = number of Lorentzian blocks.
    pub fn index(&self) -> usize {
        self.factors.iter().map(|f| f.tau()).sum()
    }

    /// Diagonal signs of the ambient inner product.
    pub fn signs(&self) -> &DVector<f64> {
        &self.signs
    }

    pub fn block_range(&self, i: usize) -> std::ops::Range<usize> {
        let off = self.offsets[i];
        off..off + self.factors[i].block_dim()
    }

    fn check_index(&self, i: usize) -> Result<()> {
        if i >= self.factors.len() {
            return Err(GeomError::FactorIndex {
                index: i,
                len: self.factors.len(),
            });
        }
        Ok(())
    }

    fn check_shape(&self, v: &AmbientVector) -> Result<()> {
        if v.len() != self.total_dim {
            return Err(GeomError::DimensionMismatch {
                expected: self.total_dim,
                got: v.len(),
            });
        }
        Ok(())
    }

    pub fn zero_vector(&self) -> AmbientVector {
        DVector::zeros(self.total_dim)
    }

    /// Assemble an ambient vector from per-block coordinate arrays.
    pub fn from_blocks(&self, blocks: &[Vec<f64>]) -> Result<AmbientVector> {
        if blocks.len() != self.factors.len() {
            return Err(GeomError::DimensionMismatch {
                expected: self.factors.len(),
                got: blocks.len(),
            });
        }
        let mut v = self.zero_vector();
        for (i, b) in blocks.iter().enumerate() {
            let range = self.block_range(i);
            if b.len() != range.len() {
                return Err(GeomError::DimensionMismatch {
                    expected: range.len(),
                    got: b.len(),
                });
            }
            for (j, &x) in b.iter().enumerate() {
                v[range.start + j] = x;
            }
        }
        Ok(v)
    }

    /// Signed inner product of two coordinates restricted to block i.
    pub fn block_inner(&self, i: usize, x: &AmbientVector, y: &AmbientVector) -> f64 {
        let range = self.block_range(i);
        let mut acc = 0.0;
        for j in range {
            acc += self.signs[j] * x[j] * y[j];
        }
        acc
    }

    /// The ambient inner product: Lorentzian rule applied per factor with
    /// tau(k_i) = 1, summed over blocks.
    pub fn metric_inner(&self, x: &AmbientVector, y: &AmbientVector) -> Result<f64> {
        self.check_shape(x)?;
        self.check_shape(y)?;
        Ok(self.dot(x, y))
    }

    pub(crate) fn dot(&self, x: &AmbientVector, y: &AmbientVector) -> f64 {
        let mut acc = 0.0;
        for j in 0..self.total_dim {
            acc += self.signs[j] * x[j] * y[j];
        }
        acc
    }

    /// Orthogonal projection onto block i: zero every other block.
    pub fn block_project(&self, i: usize, v: &AmbientVector) -> Result<AmbientVector> {
        self.check_index(i)?;
        self.check_shape(v)?;
        let mut out = self.zero_vector();
        for j in self.block_range(i) {
            out[j] = v[j];
        }
        Ok(out)
    }

    /// Validate the per-factor model constraints and the hyperbolic sheet.
    pub fn validate_point(&self, v: &AmbientVector) -> Result<ProductPoint> {
        self.validate_point_with(v, POINT_TOL)
    }

    pub fn validate_point_with(&self, v: &AmbientVector, tol: f64) -> Result<ProductPoint> {
        self.check_shape(v)?;
        for (i, f) in self.factors.iter().enumerate() {
            if !f.is_curved() {
                continue;
            }
            let residual = (self.block_inner(i, v, v) - 1.0 / f.k).abs();
            if residual > tol {
                return Err(GeomError::ConstraintViolation { factor: i, residual });
            }
            if f.k < 0.0 && v[self.offsets[i]] <= 0.0 {
                return Err(GeomError::WrongSheet { factor: i });
            }
        }
        Ok(ProductPoint(v.clone()))
    }

    /// Tangency at p: X_i orthogonal to x_i for every curved factor.
    pub fn tangent_test(&self, p: &ProductPoint, x: &AmbientVector) -> Result<bool> {
        self.check_shape(x)?;
        let scale = TANGENT_TOL * (1.0 + x.norm());
        for i in self.curved_set() {
            if self.block_inner(i, p.coords(), x).abs() > scale {
                return Ok(false);
            }
        }
        Ok(true)
    }

    fn require_tangent(&self, p: &ProductPoint, x: &AmbientVector) -> Result<()> {
        self.check_shape(x)?;
        let scale = TANGENT_TOL * (1.0 + x.norm());
        for i in self.curved_set() {
            let defect = self.block_inner(i, p.coords(), x).abs();
            if defect > scale {
                return Err(GeomError::NotTangent { factor: i, defect });
            }
        }
        Ok(())
    }

    /// Project an arbitrary ambient vector onto the tangent space of the
    /// product at p (orthogonally to every radial direction).
    pub fn project_tangent(&self, p: &ProductPoint, v: &AmbientVector) -> Result<AmbientVector> {
        self.check_shape(v)?;
        let mut out = v.clone();
        for i in self.curved_set() {
            let radial = self.block_project(i, p.coords())?;
            let c = self.block_inner(i, p.coords(), v) * self.factors[i].k;
            out -= radial * c;
        }
        Ok(out)
    }

    /// Second fundamental form of the inclusion of the product into the
    /// ambient block space: -sum_i <pi_i X, Y> k_i pi_i(p).
    pub fn iota_alpha(
        &self,
        p: &ProductPoint,
        x: &AmbientVector,
        y: &AmbientVector,
    ) -> Result<AmbientVector> {
        self.require_tangent(p, x)?;
        self.require_tangent(p, y)?;
        let mut out = self.zero_vector();
        for i in self.curved_set() {
            let c = self.block_inner(i, x, y) * self.factors[i].k;
            for j in self.block_range(i) {
                out[j] -= c * p.coords()[j];
            }
        }
        Ok(out)
    }

    /// Curvature tensor of the product applied to tangent vectors:
    /// sum_i k_i (pi_i X ^ pi_i Y) Z with (A ^ B)C = <B,C>A - <A,C>B.
    pub fn product_curvature(
        &self,
        p: &ProductPoint,
        x: &AmbientVector,
        y: &AmbientVector,
        z: &AmbientVector,
    ) -> Result<AmbientVector> {
        self.require_tangent(p, x)?;
        self.require_tangent(p, y)?;
        self.require_tangent(p, z)?;
        let mut out = self.zero_vector();
        for (i, f) in self.factors.iter().enumerate() {
            if f.k == 0.0 {
                continue;
            }
            let yz = self.block_inner(i, y, z);
            let xz = self.block_inner(i, x, z);
            for j in self.block_range(i) {
                out[j] += f.k * (yz * x[j] - xz * y[j]);
            }
        }
        Ok(out)
    }

    /// Gram matrix of a list of ambient vectors under the signed metric.
    pub fn gram(&self, vectors: &[AmbientVector]) -> DMatrix<f64> {
        let n = vectors.len();
        DMatrix::from_fn(n, n, |i, j| self.dot(&vectors[i], &vectors[j]))
    }
}

/// An ambient vector satisfying every per-block model constraint.
#[derive(Clone, Debug, PartialEq)]
pub struct ProductPoint(AmbientVector);

impl ProductPoint {
    pub fn coords(&self) -> &AmbientVector {
        &self.0
    }

    pub fn into_coords(self) -> AmbientVector {
        self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_circles() -> ProductSpace {
        ProductSpace::new(vec![
            SpaceFormSpec { n: 1, k: 1.0 },
            SpaceFormSpec { n: 1, k: 1.0 },
        ])
        .unwrap()
    }

    fn hyper_circle() -> ProductSpace {
        ProductSpace::new(vec![
            SpaceFormSpec { n: 1, k: -1.0 },
            SpaceFormSpec { n: 1, k: 1.0 },
        ])
        .unwrap()
    }

    #[test]
    fn lorentz_block_negates_leading_coordinate() {
        let space = hyper_circle();
        let x = space.from_blocks(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        assert_eq!(space.metric_inner(&x, &x).unwrap(), -1.0);
    }

    #[test]
    fn metric_is_bilinear_in_zero() {
        let space = two_circles();
        let x = space.from_blocks(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let zero = space.zero_vector();
        assert_eq!(space.metric_inner(&x, &zero).unwrap(), 0.0);
    }

    #[test]
    fn euclidean_blocks_sum_dot_products() {
        let space = two_circles();
        let x = space.from_blocks(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(space.metric_inner(&x, &x).unwrap(), 2.0);
    }

    #[test]
    fn metric_rejects_shape_mismatch() {
        let space = two_circles();
        let x = DVector::zeros(3);
        assert!(matches!(
            space.metric_inner(&x, &x),
            Err(GeomError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn block_project_zeroes_other_blocks() {
        let space = two_circles();
        let v = space.from_blocks(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let p0 = space.block_project(0, &v).unwrap();
        assert_eq!(p0.as_slice(), &[1.0, 2.0, 0.0, 0.0]);
        assert!(matches!(
            space.block_project(5, &v),
            Err(GeomError::FactorIndex { .. })
        ));
    }

    #[test]
    fn projections_form_an_orthogonal_family() {
        // pi_i^2 = pi_i, pi_i pi_j = 0, sum pi_i = id, self-adjointness.
        let space = ProductSpace::new(vec![
            SpaceFormSpec { n: 1, k: -1.0 },
            SpaceFormSpec { n: 2, k: 1.0 },
            SpaceFormSpec { n: 2, k: 0.0 },
        ])
        .unwrap();
        let n = space.total_dim();
        let v = DVector::from_fn(n, |j, _| (j as f64 * 0.7).sin() + 0.3);
        let w = DVector::from_fn(n, |j, _| (j as f64 * 1.3).cos() - 0.1);

        let mut total = space.zero_vector();
        for i in 0..space.factor_count() {
            let pi_v = space.block_project(i, &v).unwrap();
            let pi_pi_v = space.block_project(i, &pi_v).unwrap();
            assert!((&pi_pi_v - &pi_v).norm() <= 1e-12);
            for j in 0..space.factor_count() {
                if i != j {
                    let pj = space.block_project(j, &pi_v).unwrap();
                    assert!(pj.norm() <= 1e-12);
                }
            }
            let lhs = space.metric_inner(&pi_v, &w).unwrap();
            let rhs = space
                .metric_inner(&v, &space.block_project(i, &w).unwrap())
                .unwrap();
            assert!((lhs - rhs).abs() <= 1e-12);
            total += pi_v;
        }
        assert!((total - v).norm() <= 1e-12);
    }

    #[test]
    fn validate_point_accepts_unit_circles() {
        let space = two_circles();
        let v = space.from_blocks(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!(space.validate_point(&v).is_ok());
    }

    #[test]
    fn validate_point_reports_factor_and_residual() {
        let space = two_circles();
        let v = space.from_blocks(&[vec![2.0, 0.0], vec![0.0, 1.0]]).unwrap();
        match space.validate_point(&v) {
            Err(GeomError::ConstraintViolation { factor, residual }) => {
                assert_eq!(factor, 0);
                assert!((residual - 3.0).abs() <= 1e-12);
            }
            other => panic!("expected constraint violation, got {other:?}"),
        }
    }

    #[test]
    fn validate_point_enforces_hyperbolic_sheet() {
        let space = hyper_circle();
        let v = space
            .from_blocks(&[vec![-1.0, 0.0], vec![0.0, 1.0]])
            .unwrap();
        assert!(matches!(
            space.validate_point(&v),
            Err(GeomError::WrongSheet { factor: 0 })
        ));
    }

    #[test]
    fn tangent_test_on_circles() {
        let space = two_circles();
        let p = space
            .validate_point(&space.from_blocks(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap())
            .unwrap();
        let x = space.from_blocks(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert!(space.tangent_test(&p, &x).unwrap());
        // The position vector itself is radial, never tangent when J is nonempty.
        assert!(!space.tangent_test(&p, p.coords()).unwrap());
    }

    #[test]
    fn flat_factors_impose_no_tangency_constraint() {
        let space = ProductSpace::new(vec![
            SpaceFormSpec { n: 1, k: 0.0 },
            SpaceFormSpec { n: 2, k: 0.0 },
        ])
        .unwrap();
        let p = space
            .validate_point(&space.from_blocks(&[vec![0.5], vec![1.0, -2.0]]).unwrap())
            .unwrap();
        let x = space.from_blocks(&[vec![3.0], vec![-1.0, 7.0]]).unwrap();
        assert!(space.tangent_test(&p, &x).unwrap());
    }

    #[test]
    fn iota_alpha_vanishes_on_flat_products() {
        let space = ProductSpace::new(vec![
            SpaceFormSpec { n: 1, k: 0.0 },
            SpaceFormSpec { n: 1, k: 0.0 },
        ])
        .unwrap();
        let p = space
            .validate_point(&space.from_blocks(&[vec![0.3], vec![0.9]]).unwrap())
            .unwrap();
        let x = space.from_blocks(&[vec![1.0], vec![2.0]]).unwrap();
        let a = space.iota_alpha(&p, &x, &x).unwrap();
        assert_eq!(a.norm(), 0.0);
    }

    #[test]
    fn iota_alpha_matches_hand_computation() {
        let space = two_circles();
        let p = space
            .validate_point(&space.from_blocks(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap())
            .unwrap();
        let x = space.from_blocks(&[vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap();
        let a = space.iota_alpha(&p, &x, &x).unwrap();
        let expected = space
            .from_blocks(&[vec![-1.0, 0.0], vec![0.0, 0.0]])
            .unwrap();
        assert!((a - expected).norm() <= 1e-14);
    }

    #[test]
    fn iota_alpha_is_symmetric_and_normal() {
        let space = ProductSpace::new(vec![
            SpaceFormSpec { n: 2, k: 1.0 },
            SpaceFormSpec { n: 1, k: -2.0 },
        ])
        .unwrap();
        let p = space
            .validate_point(
                &space
                    .from_blocks(&[
                        vec![0.6, 0.8, 0.0],
                        vec![(0.5f64 + 0.25).sqrt(), 0.5],
                    ])
                    .unwrap(),
            )
            .unwrap();
        // Deterministic pseudo-random tangent vectors.
        for s in 0..10 {
            let raw_x = DVector::from_fn(space.total_dim(), |j, _| {
                ((s * 7 + j) as f64 * 0.83).sin()
            });
            let raw_y = DVector::from_fn(space.total_dim(), |j, _| {
                ((s * 3 + j) as f64 * 1.91).cos()
            });
            let x = space.project_tangent(&p, &raw_x).unwrap();
            let y = space.project_tangent(&p, &raw_y).unwrap();
            let axy = space.iota_alpha(&p, &x, &y).unwrap();
            let ayx = space.iota_alpha(&p, &y, &x).unwrap();
            assert!((&axy - &ayx).norm() <= 1e-12);
            // alpha is orthogonal to every tangent vector.
            let w = space.project_tangent(&p, &raw_x.add_scalar(0.2)).unwrap();
            assert!(space.metric_inner(&axy, &w).unwrap().abs() <= 1e-9);
        }
    }

    #[test]
    fn curvature_antisymmetry_and_flat_cases() {
        let space = two_circles();
        let p = space
            .validate_point(&space.from_blocks(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap())
            .unwrap();
        let x = space.from_blocks(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let r = space.product_curvature(&p, &x, &x, &x).unwrap();
        assert_eq!(r.norm(), 0.0);

        let flat = ProductSpace::new(vec![
            SpaceFormSpec { n: 1, k: 0.0 },
            SpaceFormSpec { n: 1, k: 0.0 },
        ])
        .unwrap();
        let q = flat
            .validate_point(&flat.from_blocks(&[vec![0.1], vec![0.2]]).unwrap())
            .unwrap();
        let u = flat.from_blocks(&[vec![1.0], vec![0.0]]).unwrap();
        let v = flat.from_blocks(&[vec![0.0], vec![1.0]]).unwrap();
        assert_eq!(
            flat.product_curvature(&q, &u, &v, &u).unwrap().norm(),
            0.0
        );
    }

    #[test]
    fn sphere_wedge_evaluates_directly() {
        // Sphere block with two orthonormal tangent vectors: R(X,Y)X = -Y.
        let space = ProductSpace::new(vec![
            SpaceFormSpec { n: 2, k: 1.0 },
            SpaceFormSpec { n: 1, k: 0.0 },
        ])
        .unwrap();
        let p = space
            .validate_point(&space.from_blocks(&[vec![1.0, 0.0, 0.0], vec![0.0]]).unwrap())
            .unwrap();
        let x = space.from_blocks(&[vec![0.0, 1.0, 0.0], vec![0.0]]).unwrap();
        let y = space.from_blocks(&[vec![0.0, 0.0, 1.0], vec![0.0]]).unwrap();
        let r = space.product_curvature(&p, &x, &y, &x).unwrap();
        assert!((r + y).norm() <= 1e-14);
    }

    #[test]
    fn first_bianchi_on_random_tangent_triples() {
        let space = ProductSpace::new(vec![
            SpaceFormSpec { n: 2, k: 1.0 },
            SpaceFormSpec { n: 1, k: -1.0 },
            SpaceFormSpec { n: 1, k: 0.0 },
        ])
        .unwrap();
        let base = space
            .from_blocks(&[vec![1.0, 0.0, 0.0], vec![1.0, 0.0], vec![0.4]])
            .unwrap();
        let p = space.validate_point(&base).unwrap();
        for s in 0..20 {
            let mk = |seed: usize| {
                let raw = DVector::from_fn(space.total_dim(), |j, _| {
                    ((seed * 13 + 5 * j + 1) as f64 * 0.577).sin()
                });
                space.project_tangent(&p, &raw).unwrap()
            };
            let (x, y, z) = (mk(s), mk(s + 100), mk(s + 200));
            let mut sum = space.product_curvature(&p, &x, &y, &z).unwrap();
            sum += space.product_curvature(&p, &y, &z, &x).unwrap();
            sum += space.product_curvature(&p, &z, &x, &y).unwrap();
            assert!(sum.norm() <= 1e-10, "bianchi residual {}", sum.norm());
        }
    }
}
