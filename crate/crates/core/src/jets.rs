//! Parametrized immersions into a product of space forms, represented as a
//! closed combinator algebra with exact first and second derivatives.
//!
//! Primitives are unit-speed model curves and patches; combinators realize
//! slices, products, weighted sums, the totally geodesic diagonal immersion,
//! and per-block isometry post-composition. Everything downstream (metric,
//! Christoffel symbols, curvature, frames, second fundamental form) is
//! derived from the exact 2-jets; only genuinely third-order quantities are
//! computed by central differences.

use crate::ambient::{AmbientVector, ProductPoint, ProductSpace, SpaceFormSpec};
use crate::error::{GeomError, Result};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Internal finite-difference step for frame-level (third order) quantities.
pub const DEFAULT_STEP: f64 = 1e-4;

/// Threshold below which a projected frame candidate is discarded.
const FRAME_SEED_MIN_NORM: f64 = 1e-6;

/// Minimal projected norm when carrying a frame to a nearby point.
const CONTINUATION_MIN_NORM: f64 = 0.5;

/// A fixed factor of a slice: the factor's shape and the constant point.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FixedFactor {
    pub n: usize,
    pub k: f64,
    pub point: Vec<f64>,
}

/// Expression tree of immersions `f: U -> O_{k_1}^{n_1} x ... x O_{k_l}^{n_l}`.
///
/// Every node knows its own target factor list; combinators assemble targets
/// from their children. The serialized form uses an `"op"` tag.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum ImmersionSpec {
    /// Unit-speed circle in S^1_k (k > 0).
    Circle {
        k: f64,
        #[serde(default)]
        phase: f64,
    },
    /// Unit-speed constant-latitude circle in S^2_k (k > 0); a great circle
    /// when `polar` is pi/2.
    SphereCircle { k: f64, polar: f64 },
    /// Spherical-coordinate patch of S^2_k with induced metric
    /// diag(1, cos^2(sqrt(k) u)).
    SpherePatch { k: f64 },
    /// Unit-speed hyperbola branch in H^1_k (k < 0), upper sheet.
    Hyperbola {
        k: f64,
        #[serde(default)]
        phase: f64,
    },
    /// Affine line t -> point + t dir in R^n, |dir| = 1.
    Line { point: Vec<f64>, dir: Vec<f64> },
    /// Affine plane (u, v) -> point + u dir1 + v dir2, dir1, dir2 orthonormal.
    Plane {
        point: Vec<f64>,
        dir1: Vec<f64>,
        dir2: Vec<f64>,
    },
    /// Unit-speed helix in R^3. The climb rate may be declared explicitly, in
    /// which case it must be consistent with unit speed.
    Helix {
        radius: f64,
        turn_rate: f64,
        #[serde(default)]
        climb: Option<f64>,
    },
    /// Round sphere of the given radius sitting in R^3, parametrized by
    /// meridian arclength; its second fundamental form has full rank.
    RoundSphere { radius: f64, center: Vec<f64> },
    /// Hold every factor fixed except one run of factors, where `inner` maps.
    /// `at` is the position of the inner factors among the fixed ones.
    Slice {
        at: usize,
        fixed: Vec<FixedFactor>,
        inner: Box<ImmersionSpec>,
    },
    /// Product immersion: each part drives its own parameter slots and its
    /// own run of factors.
    Product { parts: Vec<ImmersionSpec> },
    /// Reorder the target factors: output factor j is inner factor perm[j].
    FactorPermute {
        perm: Vec<usize>,
        inner: Box<ImmersionSpec>,
    },
    /// Weighted sum (a_1 f_1, ..., a_l f_l) with sum a_i^2 = 1. Part i is an
    /// immersion into curvature a_i^2 k_i; the sum lands in curvature k_i.
    WeightedSum {
        weights: Vec<f64>,
        parts: Vec<ImmersionSpec>,
    },
    /// The totally geodesic diagonal immersion of O^n_k into a same-sign
    /// product, post-composed with per-factor isometries.
    SpecialGeodesic {
        k_list: Vec<f64>,
        #[serde(default)]
        isometries: Option<Vec<Vec<Vec<f64>>>>,
        inner: Box<ImmersionSpec>,
    },
    /// Post-compose with a linear isometry on each block (None = identity).
    BlockIsometry {
        maps: Vec<Option<Vec<Vec<f64>>>>,
        inner: Box<ImmersionSpec>,
    },
    /// Unit-speed curve steering between two factor curves at a linearly
    /// turning angle theta(t) = theta0 + rate * t.
    TurningCurve {
        theta0: f64,
        rate: f64,
        parts: Vec<ImmersionSpec>,
    },
    /// Smooth reparametrization t -> inner(t + amp sin(freq t)), m = 1.
    Reparam {
        amp: f64,
        freq: f64,
        inner: Box<ImmersionSpec>,
    },
}

/// Value, first and second partial derivatives of an immersion at a point.
#[derive(Clone, Debug)]
pub struct Jet2 {
    pub value: AmbientVector,
    pub d1: Vec<AmbientVector>,
    pub d2: Vec<Vec<AmbientVector>>,
}

impl Jet2 {
    pub fn m(&self) -> usize {
        self.d1.len()
    }

    fn zeros(dim: usize, m: usize) -> Self {
        Jet2 {
            value: DVector::zeros(dim),
            d1: vec![DVector::zeros(dim); m],
            d2: vec![vec![DVector::zeros(dim); m]; m],
        }
    }

    /// Apply a block-linear map given per-block matrices and scales.
    fn map_blocks(&self, out_dim: usize, f: impl Fn(&AmbientVector, &mut AmbientVector)) -> Self {
        let conv = |v: &AmbientVector| {
            let mut out = DVector::zeros(out_dim);
            f(v, &mut out);
            out
        };
        Jet2 {
            value: conv(&self.value),
            d1: self.d1.iter().map(&conv).collect(),
            d2: self
                .d2
                .iter()
                .map(|row| row.iter().map(&conv).collect())
                .collect(),
        }
    }
}

fn block_offsets(factors: &[SpaceFormSpec]) -> (Vec<usize>, usize) {
    let mut offs = Vec::with_capacity(factors.len());
    let mut total = 0;
    for f in factors {
        offs.push(total);
        total += f.block_dim();
    }
    (offs, total)
}

fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nr = rows.len();
    let nc = rows.first().map(|r| r.len()).unwrap_or(0);
    if nr == 0 || rows.iter().any(|r| r.len() != nc) {
        return Err(GeomError::InvalidSpec("ragged matrix literal".into()));
    }
    Ok(DMatrix::from_fn(nr, nc, |i, j| rows[i][j]))
}

/// Check B^t D B = D for the block's signature and, for Lorentzian blocks,
/// that B preserves the upper sheet.
fn check_block_isometry(b: &DMatrix<f64>, factor: &SpaceFormSpec) -> Result<()> {
    let dim = factor.block_dim();
    if b.nrows() != dim || b.ncols() != dim {
        return Err(GeomError::DimensionMismatch {
            expected: dim,
            got: b.nrows().max(b.ncols()),
        });
    }
    let mut d = DMatrix::identity(dim, dim);
    if factor.k < 0.0 {
        d[(0, 0)] = -1.0;
    }
    let defect = (b.transpose() * &d * b - &d).norm();
    if defect > 1e-10 {
        return Err(GeomError::InvalidSpec(format!(
            "block map is not an isometry of the block signature (defect {defect:.3e})"
        )));
    }
    if factor.k < 0.0 && b[(0, 0)] <= 0.0 {
        return Err(GeomError::InvalidSpec(
            "Lorentzian block map must preserve the upper sheet".into(),
        ));
    }
    Ok(())
}

/// Weights and common curvature of the diagonal geodesic construction:
/// a_i = sqrt(M_i / lambda) with M_i the product of the other curvatures and
/// lambda the sum of the M_i; every a_i^2 k_i collapses to the same value.
pub fn special_geodesic_weights(k_list: &[f64]) -> Result<(Vec<f64>, f64)> {
    if k_list.len() < 2 {
        return Err(GeomError::InvalidSpec(
            "the diagonal geodesic needs at least two factors".into(),
        ));
    }
    for i in 0..k_list.len() {
        for j in (i + 1)..k_list.len() {
            if k_list[i] * k_list[j] <= 0.0 {
                return Err(GeomError::MixedSigns { i, j });
            }
        }
    }
    let m: Vec<f64> = (0..k_list.len())
        .map(|i| {
            k_list
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, k)| k)
                .product()
        })
        .collect();
    let lambda: f64 = m.iter().sum();
    let a: Vec<f64> = m.iter().map(|mi| (mi / lambda).sqrt()).collect();
    let k_tilde = a[0] * a[0] * k_list[0];
    Ok((a, k_tilde))
}

impl ImmersionSpec {
    /// The ordered factor list this immersion maps into.
    pub fn target_factors(&self) -> Result<Vec<SpaceFormSpec>> {
        match self {
            ImmersionSpec::Circle { k, .. } => Ok(vec![SpaceFormSpec::new(1, *k)?]),
            ImmersionSpec::SphereCircle { k, .. } | ImmersionSpec::SpherePatch { k } => {
                Ok(vec![SpaceFormSpec::new(2, *k)?])
            }
            ImmersionSpec::Hyperbola { k, .. } => Ok(vec![SpaceFormSpec::new(1, *k)?]),
            ImmersionSpec::Line { point, .. } => Ok(vec![SpaceFormSpec::new(point.len(), 0.0)?]),
            ImmersionSpec::Plane { point, .. } => Ok(vec![SpaceFormSpec::new(point.len(), 0.0)?]),
            ImmersionSpec::Helix { .. } => Ok(vec![SpaceFormSpec::new(3, 0.0)?]),
            ImmersionSpec::RoundSphere { .. } => Ok(vec![SpaceFormSpec::new(3, 0.0)?]),
            ImmersionSpec::Slice { at, fixed, inner } => {
                let inner_f = inner.target_factors()?;
                let mut out: Vec<SpaceFormSpec> = Vec::new();
                for f in &fixed[..(*at).min(fixed.len())] {
                    out.push(SpaceFormSpec::new(f.n, f.k)?);
                }
                out.extend(inner_f);
                for f in &fixed[(*at).min(fixed.len())..] {
                    out.push(SpaceFormSpec::new(f.n, f.k)?);
                }
                Ok(out)
            }
            ImmersionSpec::Product { parts } => {
                let mut out = Vec::new();
                for p in parts {
                    out.extend(p.target_factors()?);
                }
                Ok(out)
            }
            ImmersionSpec::FactorPermute { perm, inner } => {
                let inner_f = inner.target_factors()?;
                let mut out = Vec::with_capacity(inner_f.len());
                for &j in perm {
                    out.push(
                        *inner_f
                            .get(j)
                            .ok_or(GeomError::FactorIndex { index: j, len: inner_f.len() })?,
                    );
                }
                Ok(out)
            }
            ImmersionSpec::WeightedSum { weights, parts } => {
                let mut out = Vec::new();
                for (a, p) in weights.iter().zip(parts) {
                    let fs = p.target_factors()?;
                    if fs.len() != 1 {
                        return Err(GeomError::InvalidSpec(
                            "weighted-sum parts must target a single factor".into(),
                        ));
                    }
                    out.push(SpaceFormSpec::new(fs[0].n, fs[0].k / (a * a))?);
                }
                Ok(out)
            }
            ImmersionSpec::SpecialGeodesic { k_list, inner, .. } => {
                let inner_f = inner.target_factors()?;
                if inner_f.len() != 1 {
                    return Err(GeomError::InvalidSpec(
                        "the diagonal geodesic takes a single-factor inner immersion".into(),
                    ));
                }
                let n = inner_f[0].n;
                k_list
                    .iter()
                    .map(|&k| SpaceFormSpec::new(n, k))
                    .collect::<Result<Vec<_>>>()
            }
            ImmersionSpec::BlockIsometry { inner, .. } => inner.target_factors(),
            ImmersionSpec::TurningCurve { parts, .. } => {
                let mut out = Vec::new();
                for p in parts {
                    let fs = p.target_factors()?;
                    if fs.len() != 1 {
                        return Err(GeomError::InvalidSpec(
                            "turning-curve parts must target a single factor".into(),
                        ));
                    }
                    out.push(fs[0]);
                }
                Ok(out)
            }
            ImmersionSpec::Reparam { inner, .. } => inner.target_factors(),
        }
    }

    /// Intrinsic parameter dimension m.
    pub fn intrinsic_dim(&self) -> usize {
        match self {
            ImmersionSpec::Circle { .. }
            | ImmersionSpec::SphereCircle { .. }
            | ImmersionSpec::Hyperbola { .. }
            | ImmersionSpec::Line { .. }
            | ImmersionSpec::Helix { .. }
            | ImmersionSpec::TurningCurve { .. }
            | ImmersionSpec::Reparam { .. } => 1,
            ImmersionSpec::SpherePatch { .. }
            | ImmersionSpec::Plane { .. }
            | ImmersionSpec::RoundSphere { .. } => 2,
            ImmersionSpec::Slice { inner, .. } => inner.intrinsic_dim(),
            ImmersionSpec::Product { parts } => parts.iter().map(|p| p.intrinsic_dim()).sum(),
            ImmersionSpec::FactorPermute { inner, .. } => inner.intrinsic_dim(),
            ImmersionSpec::WeightedSum { parts, .. } => {
                parts.first().map(|p| p.intrinsic_dim()).unwrap_or(0)
            }
            ImmersionSpec::SpecialGeodesic { inner, .. } => inner.intrinsic_dim(),
            ImmersionSpec::BlockIsometry { inner, .. } => inner.intrinsic_dim(),
        }
    }

    /// Per-parameter open domain intervals.
    pub fn domain(&self) -> Vec<(f64, f64)> {
        const ALL: (f64, f64) = (f64::NEG_INFINITY, f64::INFINITY);
        match self {
            ImmersionSpec::SpherePatch { k } => {
                let half = std::f64::consts::FRAC_PI_2 / k.sqrt();
                vec![(-half, half), ALL]
            }
            ImmersionSpec::RoundSphere { radius, .. } => {
                let half = std::f64::consts::FRAC_PI_2 * radius;
                vec![(-half, half), ALL]
            }
            ImmersionSpec::Slice { inner, .. } => inner.domain(),
            ImmersionSpec::Product { parts } => {
                parts.iter().flat_map(|p| p.domain()).collect()
            }
            ImmersionSpec::FactorPermute { inner, .. } => inner.domain(),
            ImmersionSpec::WeightedSum { parts, .. } => {
                let m = self.intrinsic_dim();
                let mut dom = vec![ALL; m];
                for p in parts {
                    for (d, pd) in dom.iter_mut().zip(p.domain()) {
                        d.0 = d.0.max(pd.0);
                        d.1 = d.1.min(pd.1);
                    }
                }
                dom
            }
            ImmersionSpec::SpecialGeodesic { inner, .. } => inner.domain(),
            ImmersionSpec::BlockIsometry { inner, .. } => inner.domain(),
            ImmersionSpec::Reparam { amp, inner, .. } => inner
                .domain()
                .into_iter()
                .map(|(lo, hi)| (lo + amp.abs(), hi - amp.abs()))
                .collect(),
            _ => vec![ALL; self.intrinsic_dim()],
        }
    }

    /// Recursively validate every structural invariant of the spec.
    pub fn validate(&self) -> Result<()> {
        self.validate_node()?;
        if self.intrinsic_dim() == 0 || self.intrinsic_dim() > 2 {
            return Err(GeomError::InvalidSpec(
                "intrinsic dimension must be 1 or 2".into(),
            ));
        }
        Ok(())
    }

    fn validate_node(&self) -> Result<()> {
        match self {
            ImmersionSpec::Circle { k, .. } | ImmersionSpec::SphereCircle { k, .. } => {
                if *k <= 0.0 {
                    return Err(GeomError::InvalidSpec("circle needs k > 0".into()));
                }
                if let ImmersionSpec::SphereCircle { polar, .. } = self {
                    if !(*polar > 0.0 && *polar < std::f64::consts::PI) {
                        return Err(GeomError::InvalidSpec(
                            "polar angle must lie in (0, pi)".into(),
                        ));
                    }
                }
                Ok(())
            }
            ImmersionSpec::SpherePatch { k } => {
                if *k <= 0.0 {
                    return Err(GeomError::InvalidSpec("sphere patch needs k > 0".into()));
                }
                Ok(())
            }
            ImmersionSpec::Hyperbola { k, .. } => {
                if *k >= 0.0 {
                    return Err(GeomError::InvalidSpec("hyperbola needs k < 0".into()));
                }
                Ok(())
            }
            ImmersionSpec::Line { point, dir } => {
                if point.len() != dir.len() || point.is_empty() {
                    return Err(GeomError::InvalidSpec("line point/dir shape".into()));
                }
                let n2: f64 = dir.iter().map(|x| x * x).sum();
                if (n2 - 1.0).abs() > 1e-12 {
                    return Err(GeomError::InvalidSpec(
                        "line direction must be unit length".into(),
                    ));
                }
                Ok(())
            }
            ImmersionSpec::Plane { point, dir1, dir2 } => {
                if point.len() != dir1.len() || point.len() != dir2.len() || point.len() < 2 {
                    return Err(GeomError::InvalidSpec("plane shapes".into()));
                }
                let d11: f64 = dir1.iter().map(|x| x * x).sum();
                let d22: f64 = dir2.iter().map(|x| x * x).sum();
                let d12: f64 = dir1.iter().zip(dir2).map(|(a, b)| a * b).sum();
                if (d11 - 1.0).abs() > 1e-12 || (d22 - 1.0).abs() > 1e-12 || d12.abs() > 1e-12 {
                    return Err(GeomError::InvalidSpec(
                        "plane directions must be orthonormal".into(),
                    ));
                }
                Ok(())
            }
            ImmersionSpec::RoundSphere { radius, center } => {
                if *radius <= 0.0 || center.len() != 3 {
                    return Err(GeomError::InvalidSpec(
                        "round sphere needs a positive radius and a center in R^3".into(),
                    ));
                }
                Ok(())
            }
            ImmersionSpec::Helix {
                radius,
                turn_rate,
                climb,
            } => {
                let rw2 = radius * radius * turn_rate * turn_rate;
                match climb {
                    Some(c) => {
                        if (rw2 + c * c - 1.0).abs() > 1e-12 {
                            return Err(GeomError::InvalidSpec(
                                "helix declared speeds are not unit speed".into(),
                            ));
                        }
                    }
                    None => {
                        if rw2 > 1.0 {
                            return Err(GeomError::InvalidSpec(
                                "helix radius * turn rate exceeds unit speed".into(),
                            ));
                        }
                    }
                }
                Ok(())
            }
            ImmersionSpec::Slice { at, fixed, inner } => {
                if *at > fixed.len() {
                    return Err(GeomError::FactorIndex {
                        index: *at,
                        len: fixed.len() + 1,
                    });
                }
                for (i, f) in fixed.iter().enumerate() {
                    let sf = SpaceFormSpec::new(f.n, f.k)?;
                    if f.point.len() != sf.block_dim() {
                        return Err(GeomError::DimensionMismatch {
                            expected: sf.block_dim(),
                            got: f.point.len(),
                        });
                    }
                    if sf.is_curved() {
                        let mut q = 0.0;
                        for (j, &x) in f.point.iter().enumerate() {
                            let s = if sf.k < 0.0 && j == 0 { -1.0 } else { 1.0 };
                            q += s * x * x;
                        }
                        let residual = (q - 1.0 / sf.k).abs();
                        if residual > 1e-10 {
                            return Err(GeomError::ConstraintViolation { factor: i, residual });
                        }
                        if sf.k < 0.0 && f.point[0] <= 0.0 {
                            return Err(GeomError::WrongSheet { factor: i });
                        }
                    }
                }
                inner.validate_node()
            }
            ImmersionSpec::Product { parts } => {
                if parts.is_empty() {
                    return Err(GeomError::InvalidSpec("empty product".into()));
                }
                for p in parts {
                    p.validate_node()?;
                }
                Ok(())
            }
            ImmersionSpec::FactorPermute { perm, inner } => {
                let l = inner.target_factors()?.len();
                let mut seen = vec![false; l];
                if perm.len() != l {
                    return Err(GeomError::InvalidSpec("permutation length".into()));
                }
                for &j in perm {
                    if j >= l || seen[j] {
                        return Err(GeomError::InvalidSpec("not a permutation".into()));
                    }
                    seen[j] = true;
                }
                inner.validate_node()
            }
            ImmersionSpec::WeightedSum { weights, parts } => {
                if weights.len() != parts.len() || parts.len() < 2 {
                    return Err(GeomError::InvalidSpec(
                        "weighted sum needs matching weights and at least 2 parts".into(),
                    ));
                }
                if weights.iter().any(|&a| a <= 0.0) {
                    return Err(GeomError::InvalidSpec("weights must be positive".into()));
                }
                let defect = (weights.iter().map(|a| a * a).sum::<f64>() - 1.0).abs();
                if defect > 1e-12 {
                    return Err(GeomError::WeightConstraint(defect));
                }
                let m = parts[0].intrinsic_dim();
                for p in parts {
                    if p.intrinsic_dim() != m {
                        return Err(GeomError::InvalidSpec(
                            "weighted-sum parts must share the parameter domain".into(),
                        ));
                    }
                    p.validate_node()?;
                }
                Ok(())
            }
            ImmersionSpec::SpecialGeodesic {
                k_list,
                isometries,
                inner,
            } => {
                let (a, k_tilde) = special_geodesic_weights(k_list)?;
                let inner_f = inner.target_factors()?;
                if inner_f.len() != 1 {
                    return Err(GeomError::InvalidSpec(
                        "the diagonal geodesic takes a single-factor inner immersion".into(),
                    ));
                }
                let scale = k_tilde.abs().max(1.0);
                if (inner_f[0].k - k_tilde).abs() > 1e-9 * scale {
                    return Err(GeomError::InvalidSpec(format!(
                        "inner immersion curvature {} does not match the diagonal curvature {}",
                        inner_f[0].k, k_tilde
                    )));
                }
                if let Some(ts) = isometries {
                    if ts.len() != k_list.len() {
                        return Err(GeomError::DimensionMismatch {
                            expected: k_list.len(),
                            got: ts.len(),
                        });
                    }
                    for (i, rows) in ts.iter().enumerate() {
                        let b = matrix_from_rows(rows)?;
                        check_block_isometry(&b, &SpaceFormSpec::new(inner_f[0].n, k_list[i])?)?;
                    }
                }
                let _ = a;
                inner.validate_node()
            }
            ImmersionSpec::BlockIsometry { maps, inner } => {
                let inner_f = inner.target_factors()?;
                if maps.len() != inner_f.len() {
                    return Err(GeomError::DimensionMismatch {
                        expected: inner_f.len(),
                        got: maps.len(),
                    });
                }
                for (f, m) in inner_f.iter().zip(maps) {
                    if let Some(rows) = m {
                        check_block_isometry(&matrix_from_rows(rows)?, f)?;
                    }
                }
                inner.validate_node()
            }
            ImmersionSpec::TurningCurve { parts, .. } => {
                if parts.len() != 2 {
                    return Err(GeomError::InvalidSpec(
                        "turning curve takes exactly two parts".into(),
                    ));
                }
                for p in parts {
                    if p.intrinsic_dim() != 1 {
                        return Err(GeomError::InvalidSpec(
                            "turning-curve parts must be curves".into(),
                        ));
                    }
                    if p.domain().iter().any(|d| d.0.is_finite() || d.1.is_finite()) {
                        return Err(GeomError::InvalidSpec(
                            "turning-curve parts need unbounded domains".into(),
                        ));
                    }
                    p.validate_node()?;
                }
                Ok(())
            }
            ImmersionSpec::Reparam { amp, freq, inner } => {
                if (amp * freq).abs() >= 1.0 {
                    return Err(GeomError::InvalidSpec(
                        "reparametrization must keep positive speed (|amp * freq| < 1)".into(),
                    ));
                }
                if inner.intrinsic_dim() != 1 {
                    return Err(GeomError::InvalidSpec("reparam applies to curves".into()));
                }
                inner.validate_node()
            }
        }
    }

    /// Exact value and derivatives of the composed map at `u`.
    pub fn eval_jet(&self, u: &[f64]) -> Result<Jet2> {
        let m = self.intrinsic_dim();
        if u.len() != m {
            return Err(GeomError::DimensionMismatch {
                expected: m,
                got: u.len(),
            });
        }
        for (x, (lo, hi)) in u.iter().zip(self.domain()) {
            if !(*x > lo && *x < hi) {
                return Err(GeomError::OutOfDomain(u.to_vec()));
            }
        }
        self.eval_inner(u)
    }

    fn eval_inner(&self, u: &[f64]) -> Result<Jet2> {
        match self {
            ImmersionSpec::Circle { k, phase } => {
                let w = k.sqrt();
                let r = 1.0 / w;
                let t = u[0] + phase;
                let (s, c) = (w * t).sin_cos();
                Ok(curve_jet(
                    DVector::from_vec(vec![r * c, r * s]),
                    DVector::from_vec(vec![-s, c]),
                    DVector::from_vec(vec![-w * c, -w * s]),
                ))
            }
            ImmersionSpec::SphereCircle { k, polar } => {
                let w = k.sqrt();
                let rho = polar.sin() / w;
                let z = polar.cos() / w;
                let om = w / polar.sin();
                let (s, c) = (om * u[0]).sin_cos();
                Ok(curve_jet(
                    DVector::from_vec(vec![rho * c, rho * s, z]),
                    DVector::from_vec(vec![-s, c, 0.0]),
                    DVector::from_vec(vec![-om * c, -om * s, 0.0]),
                ))
            }
            ImmersionSpec::SpherePatch { k } => {
                let w = k.sqrt();
                let r = 1.0 / w;
                let (su, cu) = (w * u[0]).sin_cos();
                let (sv, cv) = (w * u[1]).sin_cos();
                let value = DVector::from_vec(vec![r * cu * cv, r * cu * sv, r * su]);
                let du = DVector::from_vec(vec![-su * cv, -su * sv, cu]);
                let dv = DVector::from_vec(vec![-cu * sv, cu * cv, 0.0]);
                let duu = DVector::from_vec(vec![-w * cu * cv, -w * cu * sv, -w * su]);
                let duv = DVector::from_vec(vec![w * su * sv, -w * su * cv, 0.0]);
                let dvv = DVector::from_vec(vec![-w * cu * cv, -w * cu * sv, 0.0]);
                Ok(Jet2 {
                    value,
                    d1: vec![du, dv],
                    d2: vec![vec![duu, duv.clone()], vec![duv, dvv]],
                })
            }
            ImmersionSpec::Hyperbola { k, phase } => {
                let s = (-k).sqrt();
                let r = 1.0 / s;
                let t = s * (u[0] + phase);
                let (sh, ch) = (t.sinh(), t.cosh());
                Ok(curve_jet(
                    DVector::from_vec(vec![r * ch, r * sh]),
                    DVector::from_vec(vec![sh, ch]),
                    DVector::from_vec(vec![s * ch, s * sh]),
                ))
            }
            ImmersionSpec::Line { point, dir } => {
                let n = point.len();
                let value = DVector::from_fn(n, |j, _| point[j] + u[0] * dir[j]);
                Ok(curve_jet(
                    value,
                    DVector::from_fn(n, |j, _| dir[j]),
                    DVector::zeros(n),
                ))
            }
            ImmersionSpec::Plane { point, dir1, dir2 } => {
                let n = point.len();
                let value =
                    DVector::from_fn(n, |j, _| point[j] + u[0] * dir1[j] + u[1] * dir2[j]);
                Ok(Jet2 {
                    value,
                    d1: vec![
                        DVector::from_fn(n, |j, _| dir1[j]),
                        DVector::from_fn(n, |j, _| dir2[j]),
                    ],
                    d2: vec![vec![DVector::zeros(n); 2]; 2],
                })
            }
            ImmersionSpec::RoundSphere { radius, center } => {
                let r = *radius;
                let (su, cu) = (u[0] / r).sin_cos();
                let (sv, cv) = (u[1] / r).sin_cos();
                let value = DVector::from_vec(vec![
                    center[0] + r * cu * cv,
                    center[1] + r * cu * sv,
                    center[2] + r * su,
                ]);
                let du = DVector::from_vec(vec![-su * cv, -su * sv, cu]);
                let dv = DVector::from_vec(vec![-cu * sv, cu * cv, 0.0]);
                let duu = DVector::from_vec(vec![-cu * cv / r, -cu * sv / r, -su / r]);
                let duv = DVector::from_vec(vec![su * sv / r, -su * cv / r, 0.0]);
                let dvv = DVector::from_vec(vec![-cu * cv / r, -cu * sv / r, 0.0]);
                Ok(Jet2 {
                    value,
                    d1: vec![du, dv],
                    d2: vec![vec![duu, duv.clone()], vec![duv, dvv]],
                })
            }
            ImmersionSpec::Helix {
                radius,
                turn_rate,
                climb,
            } => {
                let r = *radius;
                let w = *turn_rate;
                let c = climb.unwrap_or_else(|| (1.0 - r * r * w * w).max(0.0).sqrt());
                let (s, cs) = (w * u[0]).sin_cos();
                Ok(curve_jet(
                    DVector::from_vec(vec![r * cs, r * s, c * u[0]]),
                    DVector::from_vec(vec![-r * w * s, r * w * cs, c]),
                    DVector::from_vec(vec![-r * w * w * cs, -r * w * w * s, 0.0]),
                ))
            }
            ImmersionSpec::Slice { at, fixed, inner } => {
                let inner_jet = inner.eval_inner(u)?;
                let inner_factors = inner.target_factors()?;
                let out_factors = self.target_factors()?;
                let (offs, total) = block_offsets(&out_factors);
                let (inner_offs, _) = block_offsets(&inner_factors);
                let m = inner_jet.m();
                let mut jet = Jet2::zeros(total, m);
                // Fixed blocks contribute only to the value.
                for (idx, f) in fixed.iter().enumerate() {
                    let out_i = if idx < *at { idx } else { idx + inner_factors.len() };
                    for (j, &x) in f.point.iter().enumerate() {
                        jet.value[offs[out_i] + j] = x;
                    }
                }
                for (ii, _f) in inner_factors.iter().enumerate() {
                    let out_i = *at + ii;
                    let dst = offs[out_i];
                    let src = inner_offs[ii];
                    let len = inner_factors[ii].block_dim();
                    for j in 0..len {
                        jet.value[dst + j] = inner_jet.value[src + j];
                        for a in 0..m {
                            jet.d1[a][dst + j] = inner_jet.d1[a][src + j];
                            for b in 0..m {
                                jet.d2[a][b][dst + j] = inner_jet.d2[a][b][src + j];
                            }
                        }
                    }
                }
                Ok(jet)
            }
            ImmersionSpec::Product { parts } => {
                let out_factors = self.target_factors()?;
                let (_, total) = block_offsets(&out_factors);
                let m = self.intrinsic_dim();
                let mut jet = Jet2::zeros(total, m);
                let mut param_off = 0;
                let mut block_off = 0;
                for p in parts {
                    let pm = p.intrinsic_dim();
                    let pj = p.eval_inner(&u[param_off..param_off + pm])?;
                    let pdim = pj.value.len();
                    for j in 0..pdim {
                        jet.value[block_off + j] = pj.value[j];
                        for a in 0..pm {
                            jet.d1[param_off + a][block_off + j] = pj.d1[a][j];
                            for b in 0..pm {
                                jet.d2[param_off + a][param_off + b][block_off + j] =
                                    pj.d2[a][b][j];
                            }
                        }
                    }
                    param_off += pm;
                    block_off += pdim;
                }
                Ok(jet)
            }
            ImmersionSpec::FactorPermute { perm, inner } => {
                let inner_jet = inner.eval_inner(u)?;
                let inner_factors = inner.target_factors()?;
                let (in_offs, total) = block_offsets(&inner_factors);
                let out_factors = self.target_factors()?;
                let (out_offs, _) = block_offsets(&out_factors);
                Ok(inner_jet.map_blocks(total, |v, out| {
                    for (oj, &ij) in perm.iter().enumerate() {
                        let len = inner_factors[ij].block_dim();
                        for j in 0..len {
                            out[out_offs[oj] + j] = v[in_offs[ij] + j];
                        }
                    }
                }))
            }
            ImmersionSpec::WeightedSum { weights, parts } => {
                let m = self.intrinsic_dim();
                let jets: Vec<Jet2> = parts
                    .iter()
                    .map(|p| p.eval_inner(u))
                    .collect::<Result<_>>()?;
                let dims: Vec<usize> = jets.iter().map(|j| j.value.len()).collect();
                let total: usize = dims.iter().sum();
                let mut jet = Jet2::zeros(total, m);
                let mut off = 0;
                for ((a, pj), dim) in weights.iter().zip(&jets).zip(&dims) {
                    for j in 0..*dim {
                        jet.value[off + j] = a * pj.value[j];
                        for x in 0..m {
                            jet.d1[x][off + j] = a * pj.d1[x][j];
                            for y in 0..m {
                                jet.d2[x][y][off + j] = a * pj.d2[x][y][j];
                            }
                        }
                    }
                    off += dim;
                }
                Ok(jet)
            }
            ImmersionSpec::SpecialGeodesic {
                k_list,
                isometries,
                inner,
            } => {
                let (a, _) = special_geodesic_weights(k_list)?;
                let inner_jet = inner.eval_inner(u)?;
                let bdim = inner_jet.value.len();
                let total = bdim * k_list.len();
                let ts: Option<Vec<DMatrix<f64>>> = match isometries {
                    Some(rows) => Some(
                        rows.iter()
                            .map(|r| matrix_from_rows(r))
                            .collect::<Result<_>>()?,
                    ),
                    None => None,
                };
                Ok(inner_jet.map_blocks(total, |v, out| {
                    for (i, ai) in a.iter().enumerate() {
                        let mapped = match &ts {
                            Some(list) => &list[i] * v,
                            None => v.clone(),
                        };
                        for j in 0..bdim {
                            out[i * bdim + j] = ai * mapped[j];
                        }
                    }
                }))
            }
            ImmersionSpec::BlockIsometry { maps, inner } => {
                let inner_jet = inner.eval_inner(u)?;
                let inner_factors = inner.target_factors()?;
                let (offs, total) = block_offsets(&inner_factors);
                let mats: Vec<Option<DMatrix<f64>>> = maps
                    .iter()
                    .map(|m| m.as_ref().map(|rows| matrix_from_rows(rows)).transpose())
                    .collect::<Result<_>>()?;
                Ok(inner_jet.map_blocks(total, |v, out| {
                    for (i, f) in inner_factors.iter().enumerate() {
                        let len = f.block_dim();
                        let seg = v.rows(offs[i], len).into_owned();
                        let mapped = match &mats[i] {
                            Some(b) => b * &seg,
                            None => seg,
                        };
                        for j in 0..len {
                            out[offs[i] + j] = mapped[j];
                        }
                    }
                }))
            }
            ImmersionSpec::TurningCurve {
                theta0,
                rate,
                parts,
            } => {
                let t = u[0];
                let th = theta0 + rate * t;
                let (phi, psi, dphi, dpsi, ddphi, ddpsi) = if rate.abs() < 1e-300 {
                    let (s0, c0) = theta0.sin_cos();
                    (c0 * t, s0 * t, c0, s0, 0.0, 0.0)
                } else {
                    (
                        (th.sin() - theta0.sin()) / rate,
                        (theta0.cos() - th.cos()) / rate,
                        th.cos(),
                        th.sin(),
                        -rate * th.sin(),
                        rate * th.cos(),
                    )
                };
                let j1 = parts[0].eval_inner(&[phi])?;
                let j2 = parts[1].eval_inner(&[psi])?;
                let d1_len = j1.value.len();
                let total = d1_len + j2.value.len();
                let mut jet = Jet2::zeros(total, 1);
                for j in 0..d1_len {
                    jet.value[j] = j1.value[j];
                    jet.d1[0][j] = dphi * j1.d1[0][j];
                    jet.d2[0][0][j] = ddphi * j1.d1[0][j] + dphi * dphi * j1.d2[0][0][j];
                }
                for j in 0..j2.value.len() {
                    jet.value[d1_len + j] = j2.value[j];
                    jet.d1[0][d1_len + j] = dpsi * j2.d1[0][j];
                    jet.d2[0][0][d1_len + j] =
                        ddpsi * j2.d1[0][j] + dpsi * dpsi * j2.d2[0][0][j];
                }
                Ok(jet)
            }
            ImmersionSpec::Reparam { amp, freq, inner } => {
                let t = u[0];
                let sigma = t + amp * (freq * t).sin();
                let ds = 1.0 + amp * freq * (freq * t).cos();
                let dds = -amp * freq * freq * (freq * t).sin();
                let j = inner.eval_inner(&[sigma])?;
                let n = j.value.len();
                Ok(curve_jet(
                    j.value.clone(),
                    DVector::from_fn(n, |i, _| ds * j.d1[0][i]),
                    DVector::from_fn(n, |i, _| dds * j.d1[0][i] + ds * ds * j.d2[0][0][i]),
                ))
            }
        }
    }
}

fn curve_jet(value: DVector<f64>, d1: DVector<f64>, d2: DVector<f64>) -> Jet2 {
    Jet2 {
        value,
        d1: vec![d1],
        d2: vec![vec![d2]],
    }
}

/// Christoffel symbols of the induced metric at a point, Gamma^c_{ab}.
#[derive(Clone, Debug)]
pub struct Christoffels {
    /// Indexed by the upper index c; each matrix is over (a, b).
    pub gamma: Vec<DMatrix<f64>>,
}

impl Christoffels {
    pub fn get(&self, c: usize, a: usize, b: usize) -> f64 {
        self.gamma[c][(a, b)]
    }

    pub fn m(&self) -> usize {
        self.gamma.len()
    }

    pub fn norm(&self) -> f64 {
        self.gamma.iter().map(|g| g.norm_squared()).sum::<f64>().sqrt()
    }
}

/// Gram matrix of the first derivatives: the induced metric.
pub fn induced_metric(space: &ProductSpace, jet: &Jet2) -> Result<DMatrix<f64>> {
    let m = jet.m();
    let g = DMatrix::from_fn(m, m, |a, b| space.dot(&jet.d1[a], &jet.d1[b]));
    let eig = g.clone().symmetric_eigen();
    if eig.eigenvalues.iter().any(|&l| l <= 0.0) {
        return Err(GeomError::DegenerateMetric);
    }
    Ok(g)
}

/// Christoffel symbols from exact 2-jets: the metric derivative is assembled
/// from d2 rather than finite differences.
pub fn christoffels(space: &ProductSpace, spec: &ImmersionSpec, u: &[f64]) -> Result<Christoffels> {
    let jet = spec.eval_jet(u)?;
    let m = jet.m();
    let g = induced_metric(space, &jet)?;
    let g_inv = g
        .clone()
        .try_inverse()
        .ok_or(GeomError::DegenerateMetric)?;
    // dg[c][(a,b)] = <d2_ca, d1_b> + <d1_a, d2_cb>
    let dg: Vec<DMatrix<f64>> = (0..m)
        .map(|c| {
            DMatrix::from_fn(m, m, |a, b| {
                space.dot(&jet.d2[c][a], &jet.d1[b]) + space.dot(&jet.d1[a], &jet.d2[c][b])
            })
        })
        .collect();
    let mut gamma = vec![DMatrix::zeros(m, m); m];
    for c in 0..m {
        for a in 0..m {
            for b in 0..m {
                let mut acc = 0.0;
                for d in 0..m {
                    acc += g_inv[(c, d)] * (dg[a][(d, b)] + dg[b][(d, a)] - dg[d][(a, b)]);
                }
                gamma[c][(a, b)] = 0.5 * acc;
            }
        }
    }
    Ok(Christoffels { gamma })
}

/// Intrinsic curvature components R^d_{abc} for R(X,Y)Z, from central
/// differences of the exact Christoffel symbols.
#[derive(Clone, Debug)]
pub struct Riemann {
    pub m: usize,
    comp: Vec<f64>,
}

impl Riemann {
    /// R^d_{abc}: component on `d` of R(e_a, e_b) e_c in coordinates.
    pub fn up(&self, a: usize, b: usize, c: usize, d: usize) -> f64 {
        self.comp[((a * self.m + b) * self.m + c) * self.m + d]
    }

    /// Fully lowered component <R(e_a, e_b) e_c, e_d>.
    pub fn lowered(&self, g: &DMatrix<f64>, a: usize, b: usize, c: usize, d: usize) -> f64 {
        (0..self.m).map(|e| self.up(a, b, c, e) * g[(e, d)]).sum()
    }
}

pub fn riemann(space: &ProductSpace, spec: &ImmersionSpec, u: &[f64], h: f64) -> Result<Riemann> {
    let m = spec.intrinsic_dim();
    if m == 1 {
        return Ok(Riemann { m, comp: vec![0.0] });
    }
    if !(h > 0.0) {
        return Err(GeomError::InvalidSpec("step must be positive".into()));
    }
    let center = christoffels(space, spec, u)?;
    // dgamma[e][c][(a,b)] = d_e Gamma^c_{ab}
    let mut dgamma = vec![vec![DMatrix::zeros(m, m); m]; m];
    for e in 0..m {
        let mut up = u.to_vec();
        up[e] += h;
        let mut um = u.to_vec();
        um[e] -= h;
        let gp = christoffels(space, spec, &up)?;
        let gm = christoffels(space, spec, &um)?;
        for c in 0..m {
            dgamma[e][c] = (&gp.gamma[c] - &gm.gamma[c]) / (2.0 * h);
        }
    }
    let mut comp = vec![0.0; m * m * m * m];
    for a in 0..m {
        for b in 0..m {
            for c in 0..m {
                for d in 0..m {
                    let mut val = dgamma[a][d][(b, c)] - dgamma[b][d][(a, c)];
                    for e in 0..m {
                        val += center.get(d, a, e) * center.get(e, b, c)
                            - center.get(d, b, e) * center.get(e, a, c);
                    }
                    comp[((a * m + b) * m + c) * m + d] = val;
                }
            }
        }
    }
    Ok(Riemann { m, comp })
}

/// A jet together with orthonormal tangent/normal frames and the radial
/// normals nu_i = -k_i pi_i(value) of the product inclusion.
#[derive(Clone, Debug)]
pub struct FramedPoint {
    pub jet: Jet2,
    pub point: ProductPoint,
    pub tangent_frame: Vec<AmbientVector>,
    pub normal_frame: Vec<AmbientVector>,
    pub nu: Vec<AmbientVector>,
}

impl FramedPoint {
    pub fn m(&self) -> usize {
        self.tangent_frame.len()
    }

    pub fn p(&self) -> usize {
        self.normal_frame.len()
    }

    /// Coordinate-to-frame coefficient matrix B[(c, a)] = <d1_c, e_a>.
    pub fn coordinate_frame_matrix(&self, space: &ProductSpace) -> DMatrix<f64> {
        let m = self.m();
        DMatrix::from_fn(m, m, |c, a| space.dot(&self.jet.d1[c], &self.tangent_frame[a]))
    }
}

/// Build orthonormal frames with the default ambient-basis seeding order.
pub fn orthonormal_frames(space: &ProductSpace, jet: &Jet2) -> Result<FramedPoint> {
    let order: Vec<usize> = (0..space.total_dim()).collect();
    orthonormal_frames_seeded(space, jet, &order)
}

/// Build orthonormal frames, seeding the normal-frame search with the given
/// ambient basis order. Gauge-dependent outputs must only be compared through
/// gauge-invariant summaries.
pub fn orthonormal_frames_seeded(
    space: &ProductSpace,
    jet: &Jet2,
    seed_order: &[usize],
) -> Result<FramedPoint> {
    let point = space.validate_point(&jet.value)?;
    let m = jet.m();

    // Gram-Schmidt on the exact derivatives; the tangent space is spacelike.
    let mut tangent: Vec<AmbientVector> = Vec::with_capacity(m);
    for a in 0..m {
        let mut v = jet.d1[a].clone();
        for e in &tangent {
            let c = space.dot(&v, e);
            v -= e * c;
        }
        let nn = space.dot(&v, &v);
        if nn <= 1e-12 {
            return Err(GeomError::DegenerateMetric);
        }
        tangent.push(v / nn.sqrt());
    }

    let nu: Vec<AmbientVector> = (0..space.factor_count())
        .map(|i| {
            let mut v = space.block_project(i, point.coords()).unwrap();
            v *= -space.factor(i).k;
            v
        })
        .collect();

    let curved = space.curved_set();
    let p = space.total_dim() - curved.len() - m;
    let mut normal: Vec<AmbientVector> = Vec::with_capacity(p);
    for &seed in seed_order {
        if normal.len() == p {
            break;
        }
        if seed >= space.total_dim() {
            continue;
        }
        let mut w = space.zero_vector();
        w[seed] = 1.0;
        for e in &tangent {
            let c = space.dot(&w, e);
            w -= e * c;
        }
        for &i in &curved {
            let c = space.dot(&w, &nu[i]) / space.factor(i).k;
            w -= &nu[i] * c;
        }
        for xi in &normal {
            let c = space.dot(&w, xi);
            w -= xi * c;
        }
        let nn = space.dot(&w, &w);
        if nn.sqrt() > FRAME_SEED_MIN_NORM {
            normal.push(w / nn.sqrt());
        }
    }
    if normal.len() < p {
        return Err(GeomError::FrameRank {
            achieved: normal.len(),
            needed: p,
        });
    }
    Ok(FramedPoint {
        jet: jet.clone(),
        point,
        tangent_frame: tangent,
        normal_frame: normal,
        nu,
    })
}

/// The second fundamental form of the composed immersion into the ambient
/// block space, split into its f-normal coefficients and its radial (nu)
/// coefficients.
#[derive(Clone, Debug)]
pub struct SecondFundamental {
    /// alpha_f coefficients on the normal frame: per normal index, an m x m
    /// symmetric matrix over coordinate arguments.
    pub alpha_f: Vec<DMatrix<f64>>,
    /// Coefficients on nu_i: per factor, an m x m matrix (zero for flat
    /// factors).
    pub alpha_nu: Vec<DMatrix<f64>>,
    /// Raw ambient values alpha_F(d_a, d_b).
    pub alpha_ambient: Vec<Vec<AmbientVector>>,
    /// Worst deviation between alpha_F and its reconstruction from the two
    /// coefficient families.
    pub reconstruction_residual: f64,
}

pub fn second_fundamental(
    space: &ProductSpace,
    framed: &FramedPoint,
    gamma: &Christoffels,
) -> Result<SecondFundamental> {
    let m = framed.m();
    let p = framed.p();
    let jet = &framed.jet;
    let mut alpha_ambient = vec![vec![space.zero_vector(); m]; m];
    for a in 0..m {
        for b in 0..m {
            let mut v = jet.d2[a][b].clone();
            for c in 0..m {
                v -= &jet.d1[c] * gamma.get(c, a, b);
            }
            alpha_ambient[a][b] = v;
        }
    }
    let alpha_f: Vec<DMatrix<f64>> = (0..p)
        .map(|al| {
            DMatrix::from_fn(m, m, |a, b| {
                space.dot(&alpha_ambient[a][b], &framed.normal_frame[al])
            })
        })
        .collect();
    let alpha_nu: Vec<DMatrix<f64>> = (0..space.factor_count())
        .map(|i| {
            let k = space.factor(i).k;
            if k == 0.0 {
                DMatrix::zeros(m, m)
            } else {
                DMatrix::from_fn(m, m, |a, b| space.dot(&alpha_ambient[a][b], &framed.nu[i]) / k)
            }
        })
        .collect();
    let mut residual = 0.0f64;
    for a in 0..m {
        for b in 0..m {
            let mut rec = space.zero_vector();
            for (al, h) in alpha_f.iter().enumerate() {
                rec += &framed.normal_frame[al] * h[(a, b)];
            }
            for (i, c) in alpha_nu.iter().enumerate() {
                rec += &framed.nu[i] * c[(a, b)];
            }
            residual = residual.max((&alpha_ambient[a][b] - rec).norm());
        }
    }
    Ok(SecondFundamental {
        alpha_f,
        alpha_nu,
        alpha_ambient,
        reconstruction_residual: residual,
    })
}

/// Carry the frames of a reference point over to a nearby jet: the tangent
/// frame is rebuilt from the exact derivatives (a continuous operation), the
/// normal frame is obtained by projecting the reference normal frame onto
/// the new normal space and re-orthonormalizing. The result stays in the
/// gauge of the reference, which keeps frame fields single-valued where a
/// fixed seeding rule would flip.
pub fn continue_frames(
    space: &ProductSpace,
    jet: &Jet2,
    reference: &FramedPoint,
) -> Result<FramedPoint> {
    let point = space.validate_point(&jet.value)?;
    let m = jet.m();
    let mut tangent: Vec<AmbientVector> = Vec::with_capacity(m);
    for a in 0..m {
        let mut v = jet.d1[a].clone();
        for e in &tangent {
            let c = space.dot(&v, e);
            v -= e * c;
        }
        let nn = space.dot(&v, &v);
        if nn <= 1e-12 {
            return Err(GeomError::DegenerateMetric);
        }
        tangent.push(v / nn.sqrt());
    }
    let nu: Vec<AmbientVector> = (0..space.factor_count())
        .map(|i| {
            let mut v = space.block_project(i, point.coords()).unwrap();
            v *= -space.factor(i).k;
            v
        })
        .collect();
    let curved = space.curved_set();
    let mut normal: Vec<AmbientVector> = Vec::with_capacity(reference.normal_frame.len());
    for xi_ref in &reference.normal_frame {
        let mut w = xi_ref.clone();
        for e in &tangent {
            let c = space.dot(&w, e);
            w -= e * c;
        }
        for &i in &curved {
            let c = space.dot(&w, &nu[i]) / space.factor(i).k;
            w -= &nu[i] * c;
        }
        for xi in &normal {
            let c = space.dot(&w, xi);
            w -= xi * c;
        }
        let nn = space.dot(&w, &w);
        if nn.sqrt() < CONTINUATION_MIN_NORM {
            return Err(GeomError::FrameContinuation { overlap: nn.sqrt() });
        }
        normal.push(w / nn.sqrt());
    }
    Ok(FramedPoint {
        jet: jet.clone(),
        point,
        tangent_frame: tangent,
        normal_frame: normal,
        nu,
    })
}

/// Frames at a point and at the 2m points of its central-difference stencil.
/// The stencil frames are continued from the center, so the local field is
/// smooth by construction (its bundle connection vanishes at the center to
/// first order).
pub struct FrameStencil {
    pub center: FramedPoint,
    pub plus: Vec<FramedPoint>,
    pub minus: Vec<FramedPoint>,
    pub h: f64,
}

pub fn frame_stencil(
    space: &ProductSpace,
    spec: &ImmersionSpec,
    u: &[f64],
    h: f64,
) -> Result<FrameStencil> {
    let center = orthonormal_frames(space, &spec.eval_jet(u)?)?;
    frame_stencil_from(space, spec, u, h, center)
}

pub fn frame_stencil_from(
    space: &ProductSpace,
    spec: &ImmersionSpec,
    u: &[f64],
    h: f64,
    center: FramedPoint,
) -> Result<FrameStencil> {
    let m = spec.intrinsic_dim();
    let mut plus = Vec::with_capacity(m);
    let mut minus = Vec::with_capacity(m);
    for c in 0..m {
        let mut up = u.to_vec();
        up[c] += h;
        let mut um = u.to_vec();
        um[c] -= h;
        plus.push(continue_frames(space, &spec.eval_jet(&up)?, &center)?);
        minus.push(continue_frames(space, &spec.eval_jet(&um)?, &center)?);
    }
    Ok(FrameStencil {
        center,
        plus,
        minus,
        h,
    })
}

impl FrameStencil {
    /// Central difference of the tangent frame connection:
    /// W_c[(a, b)] = <d_c e_a, e_b>, antisymmetric.
    pub fn tangent_connection(&self, space: &ProductSpace, c: usize) -> DMatrix<f64> {
        let m = self.center.m();
        DMatrix::from_fn(m, m, |a, b| {
            let diff = (&self.plus[c].tangent_frame[a] - &self.minus[c].tangent_frame[a])
                / (2.0 * self.h);
            space.dot(&diff, &self.center.tangent_frame[b])
        })
    }

    /// Central difference of the normal frame connection:
    /// Omega_c[(alpha, beta)] = <d_c xi_alpha, xi_beta>, antisymmetric.
    pub fn normal_connection(&self, space: &ProductSpace, c: usize) -> DMatrix<f64> {
        let p = self.center.p();
        DMatrix::from_fn(p, p, |al, be| {
            let diff = (&self.plus[c].normal_frame[al] - &self.minus[c].normal_frame[al])
                / (2.0 * self.h);
            space.dot(&diff, &self.center.normal_frame[be])
        })
    }

    /// Raw ambient derivative of normal frame member alpha along direction c.
    pub fn normal_frame_derivative(&self, c: usize, al: usize) -> AmbientVector {
        (&self.plus[c].normal_frame[al] - &self.minus[c].normal_frame[al]) / (2.0 * self.h)
    }
}

/// Normal-bundle connection data obtained by differentiating the
/// deterministic normal frame field.
#[derive(Clone, Debug)]
pub struct NormalConnection {
    /// Per coordinate direction: p x p matrix omega_c[(alpha, beta)].
    pub omega: Vec<DMatrix<f64>>,
    /// Shape operators A_{xi_alpha} in the orthonormal tangent frame.
    pub shape_ops: Vec<DMatrix<f64>>,
    /// Worst defect of the radial part against sum_i <S_i X, xi> nu_i.
    pub nu_part_residual: f64,
    /// Worst asymmetry among the shape operators.
    pub shape_asymmetry: f64,
}

pub fn normal_connection(
    space: &ProductSpace,
    spec: &ImmersionSpec,
    u: &[f64],
    h: f64,
) -> Result<NormalConnection> {
    let stencil = frame_stencil(space, spec, u, h)?;
    let center = &stencil.center;
    let m = center.m();
    let p = center.p();
    if p == 0 {
        return Ok(NormalConnection {
            omega: vec![DMatrix::zeros(0, 0); m],
            shape_ops: Vec::new(),
            nu_part_residual: 0.0,
            shape_asymmetry: 0.0,
        });
    }
    let omega: Vec<DMatrix<f64>> = (0..m)
        .map(|c| stencil.normal_connection(space, c))
        .collect();
    let b = center.coordinate_frame_matrix(space);
    let b_inv = b.clone().try_inverse().ok_or(GeomError::DegenerateMetric)?;

    // Tangent part of the frame derivative, converted to frame arguments.
    let mut shape_ops = Vec::with_capacity(p);
    let mut nu_res = 0.0f64;
    for al in 0..p {
        // t[(c, a)] = <d_c xi_al, e_a>
        let t = DMatrix::from_fn(m, m, |c, a| {
            space.dot(
                &stencil.normal_frame_derivative(c, al),
                &center.tangent_frame[a],
            )
        });
        // A_al[(x, a)] with frame argument x: derivative along e_x.
        let a_mat = -(&b_inv * t);
        shape_ops.push(a_mat);
        for c in 0..m {
            let d = stencil.normal_frame_derivative(c, al);
            for i in space.curved_set() {
                let k = space.factor(i).k;
                let got = space.dot(&d, &center.nu[i]) / k;
                let want = space.block_inner(i, &center.jet.d1[c], &center.normal_frame[al]);
                nu_res = nu_res.max((got - want).abs());
            }
        }
    }
    let shape_asymmetry = shape_ops
        .iter()
        .map(|a| (a - a.transpose()).norm())
        .fold(0.0f64, f64::max);
    Ok(NormalConnection {
        omega,
        shape_ops,
        nu_part_residual: nu_res,
        shape_asymmetry,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ambient::SpaceFormSpec;

    fn circle_pair_space() -> ProductSpace {
        ProductSpace::new(vec![
            SpaceFormSpec { n: 1, k: 1.0 },
            SpaceFormSpec { n: 1, k: 1.0 },
        ])
        .unwrap()
    }

    fn slice_circle() -> ImmersionSpec {
        ImmersionSpec::Slice {
            at: 1,
            fixed: vec![FixedFactor {
                n: 1,
                k: 1.0,
                point: vec![1.0, 0.0],
            }],
            inner: Box::new(ImmersionSpec::Circle { k: 1.0, phase: 0.0 }),
        }
    }

    fn weighted_circle_sum() -> ImmersionSpec {
        let a = std::f64::consts::FRAC_1_SQRT_2;
        ImmersionSpec::WeightedSum {
            weights: vec![a, a],
            parts: vec![
                ImmersionSpec::Circle { k: 0.5, phase: 0.0 },
                ImmersionSpec::Circle { k: 0.5, phase: 0.0 },
            ],
        }
    }

    #[test]
    fn circle_jet_at_zero() {
        let spec = ImmersionSpec::Circle { k: 1.0, phase: 0.0 };
        let jet = spec.eval_jet(&[0.0]).unwrap();
        assert_eq!(jet.value.as_slice(), &[1.0, 0.0]);
        assert_eq!(jet.d1[0].as_slice(), &[0.0, 1.0]);
        assert_eq!(jet.d2[0][0].as_slice(), &[-1.0, 0.0]);
    }

    #[test]
    fn product_of_circles_has_factorwise_derivatives() {
        let spec = ImmersionSpec::Product {
            parts: vec![
                ImmersionSpec::Circle { k: 1.0, phase: 0.0 },
                ImmersionSpec::Circle { k: 1.0, phase: 0.0 },
            ],
        };
        let jet = spec.eval_jet(&[0.0, 0.0]).unwrap();
        assert_eq!(jet.d1[0].as_slice(), &[0.0, 1.0, 0.0, 0.0]);
        assert_eq!(jet.d1[1].as_slice(), &[0.0, 0.0, 0.0, 1.0]);
        assert_eq!(jet.d2[0][1].norm(), 0.0);
    }

    #[test]
    fn weighted_sum_of_circles_is_unit_speed() {
        let spec = weighted_circle_sum();
        spec.validate().unwrap();
        let space = circle_pair_space();
        for t in [0.0, 0.4, 1.7, -2.2] {
            let jet = spec.eval_jet(&[t]).unwrap();
            let speed = space.dot(&jet.d1[0], &jet.d1[0]);
            assert!((speed - 1.0).abs() <= 1e-12, "speed {speed}");
            // Value agrees with (cos(t/sqrt2), sin(t/sqrt2)) duplicated.
            let c = (t * std::f64::consts::FRAC_1_SQRT_2).cos();
            let s = (t * std::f64::consts::FRAC_1_SQRT_2).sin();
            assert!((jet.value[0] - c).abs() <= 1e-12);
            assert!((jet.value[1] - s).abs() <= 1e-12);
            assert!((jet.value[2] - c).abs() <= 1e-12);
            space.validate_point(&jet.value).unwrap();
        }
    }

    #[test]
    fn weighted_sum_weight_constraint_is_enforced() {
        let spec = ImmersionSpec::WeightedSum {
            weights: vec![0.8, 0.7],
            parts: vec![
                ImmersionSpec::Circle { k: 0.64, phase: 0.0 },
                ImmersionSpec::Circle { k: 0.49, phase: 0.0 },
            ],
        };
        assert!(matches!(
            spec.validate(),
            Err(GeomError::WeightConstraint(_))
        ));
    }

    #[test]
    fn induced_metric_of_unit_speed_curve_is_one() {
        let space = circle_pair_space();
        let spec = slice_circle();
        let jet = spec.eval_jet(&[0.3]).unwrap();
        let g = induced_metric(&space, &jet).unwrap();
        assert!((g[(0, 0)] - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn induced_metric_of_circle_product_is_identity() {
        let space = circle_pair_space();
        let spec = ImmersionSpec::Product {
            parts: vec![
                ImmersionSpec::Circle { k: 1.0, phase: 0.0 },
                ImmersionSpec::Circle { k: 1.0, phase: 0.0 },
            ],
        };
        let jet = spec.eval_jet(&[0.7, -0.2]).unwrap();
        let g = induced_metric(&space, &jet).unwrap();
        assert!((g - DMatrix::identity(2, 2)).norm() <= 1e-12);
    }

    #[test]
    fn misdeclared_helix_is_rejected() {
        let spec = ImmersionSpec::Helix {
            radius: 0.5,
            turn_rate: 1.0,
            climb: Some(0.9),
        };
        assert!(matches!(spec.validate(), Err(GeomError::InvalidSpec(_))));
    }

    #[test]
    fn christoffels_vanish_for_arclength_parametrizations() {
        let space = circle_pair_space();
        let torus = ImmersionSpec::Product {
            parts: vec![
                ImmersionSpec::Circle { k: 1.0, phase: 0.0 },
                ImmersionSpec::Circle { k: 1.0, phase: 0.0 },
            ],
        };
        let c = christoffels(&space, &torus, &[0.4, 1.1]).unwrap();
        assert!(c.norm() <= 1e-12);

        let curve = slice_circle();
        let c1 = christoffels(&space, &curve, &[0.9]).unwrap();
        assert!(c1.norm() <= 1e-12);
    }

    #[test]
    fn christoffels_match_finite_difference_oracle() {
        // Independent oracle: assemble Gamma from central differences of the
        // induced metric instead of the exact jet route.
        let space = circle_pair_space();
        let spec = ImmersionSpec::Reparam {
            amp: 0.3,
            freq: 1.0,
            inner: Box::new(slice_circle()),
        };
        spec.validate().unwrap();
        let u = [0.37];
        let h = 1e-5;
        let g_at = |t: f64| {
            let jet = spec.eval_jet(&[t]).unwrap();
            induced_metric(&space, &jet).unwrap()[(0, 0)]
        };
        let g = g_at(u[0]);
        let dg = (g_at(u[0] + h) - g_at(u[0] - h)) / (2.0 * h);
        let oracle = 0.5 * dg / g;
        let exact = christoffels(&space, &spec, &u).unwrap();
        assert!(
            (exact.get(0, 0, 0) - oracle).abs() <= 1e-9,
            "exact {} vs oracle {}",
            exact.get(0, 0, 0),
            oracle
        );
    }

    #[test]
    fn riemann_is_zero_for_curves_and_flat_tori() {
        let space = circle_pair_space();
        let curve = slice_circle();
        let r = riemann(&space, &curve, &[0.1], 1e-4).unwrap();
        assert_eq!(r.up(0, 0, 0, 0), 0.0);

        let torus = ImmersionSpec::Product {
            parts: vec![
                ImmersionSpec::Circle { k: 1.0, phase: 0.0 },
                ImmersionSpec::Circle { k: 1.0, phase: 0.0 },
            ],
        };
        let r2 = riemann(&space, &torus, &[0.4, -0.9], 1e-4).unwrap();
        let mut max = 0.0f64;
        for a in 0..2 {
            for b in 0..2 {
                for c in 0..2 {
                    for d in 0..2 {
                        max = max.max(r2.up(a, b, c, d).abs());
                    }
                }
            }
        }
        assert!(max <= 1e-8);
    }

    #[test]
    fn sphere_patch_sectional_curvature_is_k() {
        let space = ProductSpace::new(vec![
            SpaceFormSpec { n: 2, k: 1.0 },
            SpaceFormSpec { n: 1, k: 1.0 },
        ])
        .unwrap();
        let spec = ImmersionSpec::Slice {
            at: 0,
            fixed: vec![FixedFactor {
                n: 1,
                k: 1.0,
                point: vec![0.0, 1.0],
            }],
            inner: Box::new(ImmersionSpec::SpherePatch { k: 1.0 }),
        };
        let u = [0.3, 0.8];
        let jet = spec.eval_jet(&u).unwrap();
        let g = induced_metric(&space, &jet).unwrap();
        let r = riemann(&space, &spec, &u, 1e-4).unwrap();
        let sec = r.lowered(&g, 0, 1, 1, 0) / (g[(0, 0)] * g[(1, 1)] - g[(0, 1)] * g[(0, 1)]);
        assert!((sec - 1.0).abs() <= 1e-6, "sectional curvature {sec}");
    }

    #[test]
    fn slice_normal_frame_is_the_fixed_circle_tangent() {
        let space = circle_pair_space();
        let spec = slice_circle();
        let jet = spec.eval_jet(&[0.5]).unwrap();
        let f = orthonormal_frames(&space, &jet).unwrap();
        assert_eq!(f.p(), 1);
        let xi = &f.normal_frame[0];
        // Up to sign the only normal direction is (0, 1, 0, 0).
        assert!((xi[1].abs() - 1.0).abs() <= 1e-12);
        assert!(xi[0].abs() + xi[2].abs() + xi[3].abs() <= 1e-12);
    }

    #[test]
    fn full_dimensional_immersion_has_empty_normal_frame() {
        let space = circle_pair_space();
        let torus = ImmersionSpec::Product {
            parts: vec![
                ImmersionSpec::Circle { k: 1.0, phase: 0.0 },
                ImmersionSpec::Circle { k: 1.0, phase: 0.0 },
            ],
        };
        let jet = torus.eval_jet(&[0.2, 0.4]).unwrap();
        let f = orthonormal_frames(&space, &jet).unwrap();
        assert_eq!(f.p(), 0);
    }

    #[test]
    fn nu_vanishes_on_flat_factors_and_has_norm_k() {
        let space = ProductSpace::new(vec![
            SpaceFormSpec { n: 2, k: 1.0 },
            SpaceFormSpec { n: 1, k: 0.0 },
        ])
        .unwrap();
        let spec = ImmersionSpec::WeightedSum {
            weights: vec![(1.0f64 / 3.0).sqrt(), (2.0f64 / 3.0).sqrt()],
            parts: vec![
                ImmersionSpec::SphereCircle {
                    k: 1.0 / 3.0,
                    polar: std::f64::consts::FRAC_PI_3,
                },
                ImmersionSpec::Line {
                    point: vec![0.0],
                    dir: vec![1.0],
                },
            ],
        };
        spec.validate().unwrap();
        let jet = spec.eval_jet(&[0.4]).unwrap();
        let f = orthonormal_frames(&space, &jet).unwrap();
        assert_eq!(f.nu[1].norm(), 0.0);
        let norm_sq = space.dot(&f.nu[0], &f.nu[0]);
        assert!((norm_sq - 1.0).abs() <= 1e-10);
    }

    #[test]
    fn tangent_frames_are_orthonormal_and_tangent() {
        let space = ProductSpace::new(vec![
            SpaceFormSpec { n: 1, k: -1.0 },
            SpaceFormSpec { n: 1, k: 1.0 },
        ])
        .unwrap();
        let spec = ImmersionSpec::Product {
            parts: vec![
                ImmersionSpec::Hyperbola { k: -1.0, phase: 0.0 },
                ImmersionSpec::Circle { k: 1.0, phase: 0.0 },
            ],
        };
        for t in [-0.8, 0.0, 0.6] {
            let jet = spec.eval_jet(&[t, 0.3]).unwrap();
            let f = orthonormal_frames(&space, &jet).unwrap();
            let gram = space.gram(&f.tangent_frame);
            assert!((gram - DMatrix::identity(2, 2)).norm() <= 1e-10);
            for e in &f.tangent_frame {
                assert!(space.tangent_test(&f.point, e).unwrap());
            }
        }
    }

    #[test]
    fn geodesic_slices_have_zero_second_fundamental_form() {
        let space = circle_pair_space();
        let spec = slice_circle();
        let u = [0.7];
        let jet = spec.eval_jet(&u).unwrap();
        let f = orthonormal_frames(&space, &jet).unwrap();
        let gamma = christoffels(&space, &spec, &u).unwrap();
        let sf = second_fundamental(&space, &f, &gamma).unwrap();
        assert!(sf.alpha_f[0].norm() <= 1e-12);
        assert!(sf.reconstruction_residual <= 1e-8);
    }

    #[test]
    fn weighted_sum_is_totally_geodesic() {
        let space = circle_pair_space();
        let spec = weighted_circle_sum();
        let u = [1.3];
        let jet = spec.eval_jet(&u).unwrap();
        let f = orthonormal_frames(&space, &jet).unwrap();
        let gamma = christoffels(&space, &spec, &u).unwrap();
        let sf = second_fundamental(&space, &f, &gamma).unwrap();
        for h in &sf.alpha_f {
            assert!(h.norm() <= 1e-12);
        }
    }

    #[test]
    fn second_fundamental_form_is_symmetric() {
        let space = ProductSpace::new(vec![
            SpaceFormSpec { n: 2, k: 1.0 },
            SpaceFormSpec { n: 2, k: 1.0 },
        ])
        .unwrap();
        let spec = ImmersionSpec::Product {
            parts: vec![
                ImmersionSpec::SphereCircle {
                    k: 1.0,
                    polar: 1.1,
                },
                ImmersionSpec::SphereCircle {
                    k: 1.0,
                    polar: 0.7,
                },
            ],
        };
        let u = [0.5, -0.4];
        let jet = spec.eval_jet(&u).unwrap();
        let f = orthonormal_frames(&space, &jet).unwrap();
        let gamma = christoffels(&space, &spec, &u).unwrap();
        let sf = second_fundamental(&space, &f, &gamma).unwrap();
        for h in &sf.alpha_f {
            assert!((h - h.transpose()).norm() <= 1e-12);
        }
        assert!(sf.reconstruction_residual <= 1e-8);
    }

    #[test]
    fn slice_normal_connection_is_parallel() {
        let space = circle_pair_space();
        let spec = slice_circle();
        let nc = normal_connection(&space, &spec, &[0.4], DEFAULT_STEP).unwrap();
        assert!(nc.omega[0].norm() <= 1e-9);
        assert!(nc.shape_ops[0].norm() <= 1e-9);
        assert!(nc.nu_part_residual <= 1e-5);
    }

    #[test]
    fn normal_connection_empty_when_no_normal_bundle() {
        let space = circle_pair_space();
        let torus = ImmersionSpec::Product {
            parts: vec![
                ImmersionSpec::Circle { k: 1.0, phase: 0.0 },
                ImmersionSpec::Circle { k: 1.0, phase: 0.0 },
            ],
        };
        let nc = normal_connection(&space, &torus, &[0.1, 0.2], DEFAULT_STEP).unwrap();
        assert!(nc.shape_ops.is_empty());
    }

    #[test]
    fn shape_operators_are_symmetric() {
        let space = ProductSpace::new(vec![
            SpaceFormSpec { n: 2, k: 1.0 },
            SpaceFormSpec { n: 1, k: 1.0 },
        ])
        .unwrap();
        let spec = ImmersionSpec::Slice {
            at: 0,
            fixed: vec![FixedFactor {
                n: 1,
                k: 1.0,
                point: vec![0.0, 1.0],
            }],
            inner: Box::new(ImmersionSpec::SphereCircle {
                k: 1.0,
                polar: std::f64::consts::FRAC_PI_3,
            }),
        };
        let nc = normal_connection(&space, &spec, &[0.9], DEFAULT_STEP).unwrap();
        assert!(nc.shape_asymmetry <= 1e-7, "asymmetry {}", nc.shape_asymmetry);
        assert!(nc.nu_part_residual <= 1e-5);
    }

    #[test]
    fn turning_curve_is_unit_speed_with_varying_split() {
        let space = circle_pair_space();
        let spec = ImmersionSpec::TurningCurve {
            theta0: 0.6,
            rate: 0.25,
            parts: vec![
                ImmersionSpec::Circle { k: 1.0, phase: 0.0 },
                ImmersionSpec::Circle { k: 1.0, phase: 0.0 },
            ],
        };
        spec.validate().unwrap();
        let j0 = spec.eval_jet(&[0.0]).unwrap();
        let j1 = spec.eval_jet(&[1.0]).unwrap();
        for j in [&j0, &j1] {
            let speed = space.dot(&j.d1[0], &j.d1[0]);
            assert!((speed - 1.0).abs() <= 1e-12);
            space.validate_point(&j.value).unwrap();
        }
        // The split of speed between the factors changes along the curve.
        let r0 = space.block_inner(0, &j0.d1[0], &j0.d1[0]);
        let r1 = space.block_inner(0, &j1.d1[0], &j1.d1[0]);
        assert!((r0 - r1).abs() > 1e-2);
    }

    #[test]
    fn jets_d2_is_symmetric_everywhere() {
        let spec = ImmersionSpec::SpherePatch { k: 2.0 };
        let jet = spec.eval_jet(&[0.2, 0.5]).unwrap();
        assert!((&jet.d2[0][1] - &jet.d2[1][0]).norm() <= 1e-15);
    }

    #[test]
    fn out_of_domain_is_rejected() {
        let spec = ImmersionSpec::SpherePatch { k: 1.0 };
        assert!(matches!(
            spec.eval_jet(&[2.0, 0.0]),
            Err(GeomError::OutOfDomain(_))
        ));
    }

    #[test]
    fn spec_round_trips_through_json() {
        let spec = weighted_circle_sum();
        let text = serde_json::to_string(&spec).unwrap();
        let back: ImmersionSpec = serde_json::from_str(&text).unwrap();
        let j0 = spec.eval_jet(&[0.3]).unwrap();
        let j1 = back.eval_jet(&[0.3]).unwrap();
        assert_eq!(j0.value, j1.value);
    }
}
