//! Constructors for the standard example immersions and the converse
//! detectors that recognize them from sampled split tensors.
//!
//! The detector runs slice, then weighted sum, then two-part products, with
//! first-match semantics; each test consumes only gauge-invariant summaries
//! of the sampled tensors. Proportionality (`k_i R_i` equal across factors)
//! gets its own check because it gates the factorization through the
//! diagonal geodesic.

use crate::ambient::{AmbientVector, ProductSpace, SpaceFormSpec};
use crate::calculus::PointData;
use crate::codim::{first_normal, FirstNormal};
use crate::error::{GeomError, Result};
use crate::grid::Grid;
use crate::jets::{special_geodesic_weights, FixedFactor, ImmersionSpec};
use crate::report::ResidualReport;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Detector threshold for tensor equality over the grid.
pub const DETECT_TOL: f64 = 1e-6;

/// Weights of a weighted sum; the squares must sum to one.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WeightVector {
    a: Vec<f64>,
}

impl WeightVector {
    pub fn new(a: Vec<f64>) -> Result<Self> {
        if a.len() < 2 {
            return Err(GeomError::InvalidSpec(
                "a weight vector needs at least two entries".into(),
            ));
        }
        if a.iter().any(|&x| x <= 0.0) {
            return Err(GeomError::InvalidSpec("weights must be positive".into()));
        }
        let defect = (a.iter().map(|x| x * x).sum::<f64>() - 1.0).abs();
        if defect > 1e-12 {
            return Err(GeomError::WeightConstraint(defect));
        }
        Ok(Self { a })
    }

    pub fn weights(&self) -> &[f64] {
        &self.a
    }
}

/// What the detector concluded, with the residual evidence behind it.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Verdict {
    Slice { factor: usize },
    Product { partition: Vec<Vec<usize>> },
    WeightedSum { weights: Vec<f64> },
    Proportional { lambdas: Vec<f64> },
    None,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DetectionResult {
    pub verdict: Verdict,
    pub evidence: ResidualReport,
}

/// Fix one point in every factor except `factor`, where `inner` maps.
pub fn make_slice(
    space: &ProductSpace,
    factor: usize,
    z_blocks: &[Vec<f64>],
    inner: ImmersionSpec,
) -> Result<ImmersionSpec> {
    let l = space.factor_count();
    if factor >= l {
        return Err(GeomError::FactorIndex { index: factor, len: l });
    }
    if z_blocks.len() != l - 1 {
        return Err(GeomError::DimensionMismatch {
            expected: l - 1,
            got: z_blocks.len(),
        });
    }
    let inner_target = inner.target_factors()?;
    if inner_target.len() != 1 || inner_target[0] != *space.factor(factor) {
        return Err(GeomError::InvalidSpec(
            "slice inner immersion must target the selected factor".into(),
        ));
    }
    let mut fixed = Vec::with_capacity(l - 1);
    let mut zi = 0;
    for (i, f) in space.factors().iter().enumerate() {
        if i == factor {
            continue;
        }
        fixed.push(FixedFactor {
            n: f.n,
            k: f.k,
            point: z_blocks[zi].clone(),
        });
        zi += 1;
    }
    let spec = ImmersionSpec::Slice {
        at: factor,
        fixed,
        inner: Box::new(inner),
    };
    spec.validate()?;
    Ok(spec)
}

/// Product immersion over a partition of the factors. Parts are given in
/// partition order; factor interleavings are realized by a final permutation.
pub fn make_product(
    space: &ProductSpace,
    partition: &[Vec<usize>],
    parts: Vec<ImmersionSpec>,
) -> Result<ImmersionSpec> {
    let l = space.factor_count();
    if partition.len() != parts.len() || partition.is_empty() {
        return Err(GeomError::InvalidSpec(
            "partition and parts must match and be nonempty".into(),
        ));
    }
    let mut seen = vec![false; l];
    for group in partition {
        for &i in group {
            if i >= l || seen[i] {
                return Err(GeomError::InvalidSpec(
                    "partition must cover the factors disjointly".into(),
                ));
            }
            seen[i] = true;
        }
    }
    if seen.iter().any(|&s| !s) {
        return Err(GeomError::InvalidSpec("partition must cover every factor".into()));
    }
    for (group, part) in partition.iter().zip(&parts) {
        let target = part.target_factors()?;
        if target.len() != group.len() {
            return Err(GeomError::InvalidSpec(
                "part target length does not match its partition group".into(),
            ));
        }
        for (&i, t) in group.iter().zip(&target) {
            if *t != *space.factor(i) {
                return Err(GeomError::InvalidSpec(format!(
                    "part factor ({}, {}) does not match space factor {}",
                    t.n, t.k, i
                )));
            }
        }
    }
    let seq: Vec<usize> = partition.iter().flatten().cloned().collect();
    let inner = if parts.len() == 1 {
        parts.into_iter().next().unwrap()
    } else {
        ImmersionSpec::Product { parts }
    };
    let spec = if seq.iter().enumerate().all(|(pos, &i)| pos == i) {
        inner
    } else {
        // Output factor j must be inner factor perm[j], i.e. the position of
        // j inside the concatenated sequence.
        let mut perm = vec![0usize; l];
        for (pos, &i) in seq.iter().enumerate() {
            perm[i] = pos;
        }
        ImmersionSpec::FactorPermute {
            perm,
            inner: Box::new(inner),
        }
    };
    spec.validate()?;
    Ok(spec)
}

/// Weighted sum with the stated weights; part i must be an immersion into
/// the rescaled curvature a_i^2 k_i of factor i.
pub fn make_weighted_sum(
    space: &ProductSpace,
    weights: &WeightVector,
    parts: Vec<ImmersionSpec>,
) -> Result<ImmersionSpec> {
    let l = space.factor_count();
    if weights.weights().len() != l || parts.len() != l {
        return Err(GeomError::DimensionMismatch {
            expected: l,
            got: parts.len(),
        });
    }
    for (i, (a, part)) in weights.weights().iter().zip(&parts).enumerate() {
        let target = part.target_factors()?;
        if target.len() != 1 {
            return Err(GeomError::InvalidSpec(
                "weighted-sum parts must target a single factor".into(),
            ));
        }
        let f = space.factor(i);
        let want = a * a * f.k;
        if target[0].n != f.n || (target[0].k - want).abs() > 1e-9 * want.abs().max(1.0) {
            return Err(GeomError::InvalidSpec(format!(
                "part {i} must land in curvature {want}, found {}",
                target[0].k
            )));
        }
    }
    let spec = ImmersionSpec::WeightedSum {
        weights: weights.weights().to_vec(),
        parts,
    };
    spec.validate()?;
    Ok(spec)
}

/// The diagonal geodesic immersion determined by same-sign curvatures,
/// applied after `inner`. Returns the composed spec, the weights, and the
/// common rescaled curvature.
pub fn make_special_geodesic(
    k_list: &[f64],
    isometries: Option<Vec<Vec<Vec<f64>>>>,
    inner: ImmersionSpec,
) -> Result<(ImmersionSpec, Vec<f64>, f64)> {
    let (a, k_tilde) = special_geodesic_weights(k_list)?;
    let spec = ImmersionSpec::SpecialGeodesic {
        k_list: k_list.to_vec(),
        isometries,
        inner: Box::new(inner),
    };
    spec.validate()?;
    Ok((spec, a, k_tilde))
}

fn max_norm_over<F: Fn(&PointData) -> f64>(samples: &[PointData], f: F) -> f64 {
    samples.iter().map(f).fold(0.0, f64::max)
}

/// Number of eigenvalues below 1/2 (the kernel side of a [0,1] spectrum).
fn kernel_dim(mat: &DMatrix<f64>) -> usize {
    if mat.nrows() == 0 {
        return 0;
    }
    mat.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .filter(|&&l| l < 0.5)
        .count()
}

/// Run the slice, weighted-sum and two-part-product tests in order of
/// decreasing specificity and return the first match.
pub fn detect(space: &ProductSpace, samples: &[PointData]) -> DetectionResult {
    let l = space.factor_count();
    let m = samples[0].st.m();
    let mut evidence = ResidualReport::new();

    // Slice: some R_i is the identity everywhere.
    for i in 0..l {
        let res = max_norm_over(samples, |pd| {
            (&pd.st.r[i] - DMatrix::<f64>::identity(m, m)).norm()
        });
        evidence.insert(format!("slice_f{i}"), res, DETECT_TOL);
        if res <= DETECT_TOL {
            return DetectionResult {
                verdict: Verdict::Slice { factor: i },
                evidence,
            };
        }
    }

    // Weighted sum: every R_i is a constant positive multiple of the
    // identity; the weights are read off the traces.
    let mut ws_res = 0.0f64;
    let mut weights = Vec::with_capacity(l);
    for i in 0..l {
        let mean: f64 = samples
            .iter()
            .map(|pd| pd.st.r[i].trace() / m as f64)
            .sum::<f64>()
            / samples.len() as f64;
        ws_res = ws_res.max(max_norm_over(samples, |pd| {
            (&pd.st.r[i] - DMatrix::<f64>::identity(m, m) * mean).norm()
        }));
        if mean <= 1e-6 {
            ws_res = ws_res.max(1.0);
        }
        weights.push(mean.max(0.0).sqrt());
    }
    evidence.insert("weighted_sum", ws_res, DETECT_TOL);
    if ws_res <= DETECT_TOL {
        return DetectionResult {
            verdict: Verdict::WeightedSum { weights },
            evidence,
        };
    }

    // Two-part products: the summed S vanishes and the summed R has a
    // nontrivial kernel of constant dimension. Subsets are enumerated with
    // factor 0 pinned to skip complements.
    let mut subsets: Vec<Vec<usize>> = Vec::new();
    for mask in 1u32..(1 << l) {
        if mask & 1 == 0 || mask == (1 << l) - 1 {
            continue;
        }
        subsets.push((0..l).filter(|&i| mask >> i & 1 == 1).collect());
    }
    subsets.sort_by_key(|s| (s.len(), s.clone()));
    for subset in subsets {
        let tag: String = subset.iter().map(|i| i.to_string()).collect();
        let s_res = max_norm_over(samples, |pd| {
            let mut sum = DMatrix::zeros(pd.st.p(), m);
            for &i in &subset {
                sum += &pd.st.s[i];
            }
            sum.norm()
        });
        evidence.insert(format!("product_p{tag}_s"), s_res, DETECT_TOL);
        if s_res > DETECT_TOL {
            continue;
        }
        let dims: Vec<usize> = samples
            .iter()
            .map(|pd| {
                let mut sum = DMatrix::zeros(m, m);
                for &i in &subset {
                    sum += &pd.st.r[i];
                }
                kernel_dim(&sum)
            })
            .collect();
        let d0 = dims[0];
        let constant = dims.iter().all(|&d| d == d0);
        let ker_res = if !constant {
            (dims.iter().max().unwrap() - dims.iter().min().unwrap()) as f64
        } else if d0 == 0 || d0 == m {
            1.0
        } else {
            0.0
        };
        evidence.insert(format!("product_p{tag}_ker"), ker_res, 0.5);
        if ker_res <= 0.5 {
            let complement: Vec<usize> =
                (0..l).filter(|i| !subset.contains(i)).collect();
            return DetectionResult {
                verdict: Verdict::Product {
                    partition: vec![subset, complement],
                },
                evidence,
            };
        }
    }

    DetectionResult {
        verdict: Verdict::None,
        evidence,
    }
}

/// Check whether k_i R_i agrees across factors on the grid; when it does,
/// verify the derived structure (scalar R_i, sign condition, similarity
/// ratios, block norms, orthogonality of alpha to the S images).
pub fn check_proportionality(
    space: &ProductSpace,
    samples: &[PointData],
) -> Result<DetectionResult> {
    let l = space.factor_count();
    let m = samples[0].st.m();
    let ks: Vec<f64> = space.factors().iter().map(|f| f.k).collect();
    if ks.iter().any(|&k| k == 0.0) {
        return Err(GeomError::InvalidSpec(
            "proportionality requires every factor curved".into(),
        ));
    }
    let mut evidence = ResidualReport::new();
    let mut gate = 0.0f64;
    for i in 0..l {
        for j in (i + 1)..l {
            gate = gate.max(max_norm_over(samples, |pd| {
                (&pd.st.r[i] * ks[i] - &pd.st.r[j] * ks[j]).norm()
            }));
        }
    }
    evidence.insert("prop_equal", gate, DETECT_TOL);
    if gate > DETECT_TOL {
        return Ok(DetectionResult {
            verdict: Verdict::None,
            evidence,
        });
    }

    let (a, _k_tilde) = special_geodesic_weights(&ks)?;
    let lambdas: Vec<f64> = a.iter().map(|x| x * x).collect();

    // (II) scalar R_i.
    let mut r2 = 0.0f64;
    for i in 0..l {
        r2 = r2.max(max_norm_over(samples, |pd| {
            (&pd.st.r[i] - DMatrix::<f64>::identity(m, m) * lambdas[i]).norm()
        }));
    }
    evidence.insert("prop_II", r2, DETECT_TOL);

    // (III) one sign: report as a boolean residual.
    let mixed = (0..l).any(|i| (0..l).any(|j| ks[i] * ks[j] <= 0.0));
    evidence.insert("prop_III", if mixed { 1.0 } else { 0.0 }, 0.5);

    // (IV) pi_i composed with the differential is a similarity of ratio a_i:
    // tested on the raw coordinate derivatives against the induced metric.
    let mut r4 = 0.0f64;
    for i in 0..l {
        r4 = r4.max(max_norm_over(samples, |pd| {
            let jet = &pd.framed.jet;
            let mut worst = 0.0f64;
            for x in 0..m {
                for y in 0..m {
                    let lhs = space.block_inner(i, &jet.d1[x], &jet.d1[y]);
                    let g = space.dot(&jet.d1[x], &jet.d1[y]);
                    worst = worst.max((lhs - lambdas[i] * g).abs());
                }
            }
            worst
        }));
    }
    evidence.insert("prop_IV", r4, DETECT_TOL);

    // (V) block norms of the composed immersion.
    let total_norm: f64 = ks.iter().map(|k| 1.0 / k).sum();
    let mut r5 = 0.0f64;
    for i in 0..l {
        r5 = r5.max(max_norm_over(samples, |pd| {
            let f = &pd.framed.jet.value;
            (space.block_inner(i, f, f) - lambdas[i] * total_norm).abs()
        }));
    }
    evidence.insert("prop_V", r5, DETECT_TOL);

    // (VI) alpha is orthogonal to every S_i image.
    let mut r6 = 0.0f64;
    for i in 0..l {
        r6 = r6.max(max_norm_over(samples, |pd| {
            let p = pd.st.p();
            let mut worst = 0.0f64;
            for x in 0..m {
                for y in 0..m {
                    for z in 0..m {
                        let mut acc = 0.0;
                        for al in 0..p {
                            acc += pd.hf[al][(x, y)] * pd.st.s[i][(al, z)];
                        }
                        worst = worst.max(acc.abs());
                    }
                }
            }
            worst
        }));
    }
    evidence.insert("prop_VI", r6, DETECT_TOL);

    let verdict = if evidence.pass() {
        Verdict::Proportional { lambdas }
    } else {
        Verdict::None
    };
    Ok(DetectionResult { verdict, evidence })
}

/// Result of recognizing a diagonal subspace: the orthonormalized basis,
/// the per-factor isometries mapping the model space onto the blocks, and
/// the similarity ratios.
#[derive(Clone, Debug)]
pub struct FactorIsometries {
    pub basis: Vec<AmbientVector>,
    pub isometries: Vec<DMatrix<f64>>,
    pub ratios: Vec<f64>,
}

/// Recognize a subspace as the graph of per-factor similarities. The given
/// basis is orthonormalized in order (the first vector must be timelike when
/// the curvatures are negative) and each block projection is verified to be
/// a similarity of the predicted ratio; for negative curvature the sign of
/// the whole family is corrected so the isometries preserve the upper sheet.
pub fn extract_factor_isometries(
    space: &ProductSpace,
    v_basis: &[AmbientVector],
) -> Result<FactorIsometries> {
    let l = space.factor_count();
    let ks: Vec<f64> = space.factors().iter().map(|f| f.k).collect();
    let (a, k_tilde) = special_geodesic_weights(&ks)?;
    let d = v_basis.len();
    if d == 0 {
        return Err(GeomError::InvalidSpec("empty subspace basis".into()));
    }
    let lorentz = k_tilde < 0.0;

    // Order-preserving Gram-Schmidt under the ambient signature.
    let mut basis: Vec<AmbientVector> = Vec::with_capacity(d);
    let mut signs: Vec<f64> = Vec::with_capacity(d);
    for (j, v) in v_basis.iter().enumerate() {
        let mut w = v.clone();
        for (b, &s) in basis.iter().zip(&signs) {
            let c = space.dot(&w, b) * s;
            w -= b * c;
        }
        let nn = space.dot(&w, &w);
        let expect_timelike = lorentz && j == 0;
        if expect_timelike {
            if nn >= -1e-12 {
                return Err(GeomError::InvalidSpec(
                    "subspace basis lacks a leading timelike direction".into(),
                ));
            }
            basis.push(&w / (-nn).sqrt());
            signs.push(-1.0);
        } else {
            if nn <= 1e-12 {
                return Err(GeomError::InvalidSpec(
                    "subspace basis is degenerate or has wrong signature".into(),
                ));
            }
            basis.push(&w / nn.sqrt());
            signs.push(1.0);
        }
    }

    // Similarity test per factor: the block Gram of the orthonormal basis
    // must equal a_i^2 times the model signature.
    for i in 0..l {
        let mut defect = 0.0f64;
        for x in 0..d {
            for y in 0..d {
                let got = space.block_inner(i, &basis[x], &basis[y]);
                let want = if x == y { a[i] * a[i] * signs[x] } else { 0.0 };
                defect = defect.max((got - want).abs());
            }
        }
        if defect > 1e-8 {
            return Err(GeomError::NotSimilarity { factor: i, defect });
        }
    }

    // T_i = a_i^{-1} (block i of the basis matrix).
    let mut isometries: Vec<DMatrix<f64>> = (0..l)
        .map(|i| {
            let range = space.block_range(i);
            DMatrix::from_fn(range.len(), d, |r, c| basis[c][range.start + r] / a[i])
        })
        .collect();

    // Upper-sheet correction: flip the whole family when the image of the
    // timelike model axis points down.
    let mut flipped = false;
    if lorentz && isometries[0][(0, 0)] < 0.0 {
        for t in &mut isometries {
            *t = -t.clone();
        }
        for b in &mut basis {
            *b = -b.clone();
        }
        flipped = true;
    }
    if lorentz {
        for (i, t) in isometries.iter().enumerate() {
            if t[(0, 0)] <= 0.0 {
                return Err(GeomError::InvalidSpec(format!(
                    "factor {i} isometry does not preserve the sheet"
                )));
            }
        }
    }
    let _ = flipped;

    // Validate the per-factor isometry property T^t D T = model signature.
    for (i, t) in isometries.iter().enumerate() {
        let bd = space.block_range(i).len();
        let mut dmat = DMatrix::identity(bd, bd);
        if ks[i] < 0.0 {
            dmat[(0, 0)] = -1.0;
        }
        let mut eps = DMatrix::identity(d, d);
        if lorentz {
            eps[(0, 0)] = -1.0;
        }
        let defect = (t.transpose() * dmat * t - eps).norm();
        if defect > 1e-8 {
            return Err(GeomError::NotSimilarity { factor: i, defect });
        }
    }

    Ok(FactorIsometries {
        basis,
        isometries,
        ratios: a,
    })
}

/// Output of factoring an immersion through the diagonal geodesic: the
/// recovered inner curve samples, the diagonal data, and the evidence.
#[derive(Clone, Debug)]
pub struct GeodesicFactorization {
    pub weights: Vec<f64>,
    pub k_tilde: f64,
    pub isometries: Vec<DMatrix<f64>>,
    pub fbar: Vec<DVector<f64>>,
    pub subspace_drift: f64,
    pub constraint_residual: f64,
    pub evidence: ResidualReport,
}

const TOL_DRIFT: f64 = 1e-6;
const TOL_N1_PARALLEL: f64 = 1e-4;

fn euclidean_orthonormalize(vectors: &[AmbientVector]) -> Vec<AmbientVector> {
    let mut out: Vec<AmbientVector> = Vec::new();
    for v in vectors {
        let mut w = v.clone();
        for b in &out {
            let c = b.dot(&w);
            w -= b * c;
        }
        if w.norm() > 1e-12 {
            let n = w.norm();
            out.push(w / n);
        }
    }
    out
}

fn principal_angle_drift(base: &[AmbientVector], other: &[AmbientVector]) -> f64 {
    if base.len() != other.len() || base.is_empty() {
        return f64::INFINITY;
    }
    let d = base.len();
    let cross = DMatrix::from_fn(d, d, |i, j| base[i].dot(&other[j]));
    let svd = cross.svd(false, false);
    let smin = svd
        .singular_values
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    smin.min(1.0).acos()
}

/// Factor an immersion with proportional split tensors through the diagonal
/// geodesic: build the constant subspace spanned by the position, the
/// tangent spaces and the first normal space, recognize it as a diagonal,
/// and pull the immersion back to the model space form.
pub fn factor_through_geodesic(
    space: &ProductSpace,
    spec: &ImmersionSpec,
    grid: &Grid,
) -> Result<GeodesicFactorization> {
    let points = grid.points();
    let samples = crate::calculus::sample_grid_continued(space, spec, grid)?;
    let prop = check_proportionality(space, &samples)?;
    let mut evidence = prop.evidence.clone();
    let lambdas = match prop.verdict {
        Verdict::Proportional { lambdas } => lambdas,
        _ => {
            let defect = prop
                .evidence
                .get("prop_equal")
                .map(|e| e.residual)
                .unwrap_or(f64::INFINITY);
            return Err(GeomError::NotProportional(defect));
        }
    };
    let _ = lambdas;

    // First normal space: constant rank and parallel.
    let n1s: Vec<FirstNormal> = samples.iter().map(|pd| first_normal(&pd.hf)).collect();
    let nbar = n1s[0].rank;
    for (j, n1) in n1s.iter().enumerate() {
        if n1.rank != nbar {
            return Err(GeomError::DimensionJump(format!(
                "first normal rank {} at point 0 but {} at point {}",
                nbar, n1.rank, j
            )));
        }
    }
    let mut n1_parallel = 0.0f64;
    if nbar > 0 {
        let h = crate::jets::DEFAULT_STEP;
        for (u, (pd, n1)) in points.iter().zip(samples.iter().zip(&n1s)) {
            let stencil =
                crate::calculus::stencil_data_from(space, spec, u, h, pd.clone(), false)?;
            for axis in 0..grid.dims() {
                let n1_p = first_normal(&stencil.plus[axis].hf);
                let n1_m = first_normal(&stencil.minus[axis].hf);
                let omega = stencil.omega(space, axis);
                for b in &n1.basis {
                    // Align the neighbors to the center vector.
                    let align = |basis: &Vec<DVector<f64>>| {
                        let mut w = DVector::zeros(b.len());
                        for x in basis {
                            w += x * x.dot(b);
                        }
                        w
                    };
                    let bp = align(&n1_p.basis);
                    let bm = align(&n1_m.basis);
                    let grad = (&bp - &bm) / (2.0 * h) + omega.transpose() * b;
                    let mut leak = grad.clone();
                    for x in &n1.basis {
                        let c = x.dot(&grad);
                        leak -= x * c;
                    }
                    n1_parallel = n1_parallel.max(leak.norm());
                }
            }
        }
    }
    evidence.insert("n1_parallel", n1_parallel, TOL_N1_PARALLEL);
    if n1_parallel > TOL_N1_PARALLEL {
        return Err(GeomError::Hypothesis(format!(
            "first normal space is not parallel (residual {n1_parallel:.3e})"
        )));
    }

    // Assemble V(u) = span{F, F_* TM, N1} and confirm it is constant.
    let v_at = |pd: &PointData, n1: &FirstNormal| -> Vec<AmbientVector> {
        let mut v = vec![pd.framed.jet.value.clone()];
        v.extend(pd.framed.tangent_frame.iter().cloned());
        for b in &n1.basis {
            let mut amb = space.zero_vector();
            for (al, xi) in pd.framed.normal_frame.iter().enumerate() {
                amb += xi * b[al];
            }
            v.push(amb);
        }
        v
    };
    let base_v = euclidean_orthonormalize(&v_at(&samples[0], &n1s[0]));
    let mut drift = 0.0f64;
    for (pd, n1) in samples.iter().zip(&n1s).skip(1) {
        let vu = euclidean_orthonormalize(&v_at(pd, n1));
        drift = drift.max(principal_angle_drift(&base_v, &vu));
    }
    evidence.insert("subspace_drift", drift, TOL_DRIFT);
    if drift > TOL_DRIFT {
        return Err(GeomError::Hypothesis(format!(
            "diagonal subspace drifts by principal angle {drift:.3e}"
        )));
    }

    // Recognize the subspace from the ordered base-point basis.
    let fact = extract_factor_isometries(space, &v_at(&samples[0], &n1s[0]))?;
    let ks: Vec<f64> = space.factors().iter().map(|f| f.k).collect();
    let (weights, k_tilde) = special_geodesic_weights(&ks)?;

    // Pull back: fbar = G^{-1} F via the signature inverse of the basis.
    let d = fact.basis.len();
    let lorentz = k_tilde < 0.0;
    let mut fbar = Vec::with_capacity(samples.len());
    let mut constraint = 0.0f64;
    for pd in &samples {
        let f = &pd.framed.jet.value;
        let mut coeff = DVector::zeros(d);
        for (x, b) in fact.basis.iter().enumerate() {
            let sign = if lorentz && x == 0 { -1.0 } else { 1.0 };
            coeff[x] = sign * space.dot(b, f);
        }
        // Model constraint |fbar|^2 = 1/k_tilde under the model signature.
        let mut q = 0.0;
        for x in 0..d {
            let sign = if lorentz && x == 0 { -1.0 } else { 1.0 };
            q += sign * coeff[x] * coeff[x];
        }
        constraint = constraint.max((q - 1.0 / k_tilde).abs());
        fbar.push(coeff);
    }
    evidence.insert("fbar_constraint", constraint, 1e-8);

    Ok(GeodesicFactorization {
        weights,
        k_tilde,
        isometries: fact.isometries,
        fbar,
        subspace_drift: drift,
        constraint_residual: constraint,
        evidence,
    })
}

/// Sample split-tensor data over a grid, in the continued frame gauge.
pub fn sample_grid(
    space: &ProductSpace,
    spec: &ImmersionSpec,
    grid: &Grid,
) -> Result<Vec<PointData>> {
    crate::calculus::sample_grid_continued(space, spec, grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calculus::point_data;

    fn circle_pair_space() -> ProductSpace {
        ProductSpace::new(vec![
            SpaceFormSpec { n: 1, k: 1.0 },
            SpaceFormSpec { n: 1, k: 1.0 },
        ])
        .unwrap()
    }

    fn line_grid(n: usize) -> Grid {
        Grid::new(vec![(0.0, 3.0)], vec![n]).unwrap()
    }

    #[test]
    fn slice_round_trip() {
        let space = circle_pair_space();
        let spec = make_slice(
            &space,
            1,
            &[vec![1.0, 0.0]],
            ImmersionSpec::Circle { k: 1.0, phase: 0.0 },
        )
        .unwrap();
        let jet = spec.eval_jet(&[0.0]).unwrap();
        assert_eq!(jet.value.as_slice(), &[1.0, 0.0, 1.0, 0.0]);
        let samples = sample_grid(&space, &spec, &line_grid(7)).unwrap();
        let result = detect(&space, &samples);
        assert!(matches!(result.verdict, Verdict::Slice { factor: 1 }));
    }

    #[test]
    fn slice_rejects_invalid_fixed_point() {
        let space = circle_pair_space();
        let err = make_slice(
            &space,
            1,
            &[vec![2.0, 0.0]],
            ImmersionSpec::Circle { k: 1.0, phase: 0.0 },
        );
        assert!(matches!(err, Err(GeomError::ConstraintViolation { .. })));
    }

    #[test]
    fn product_round_trip() {
        let space = circle_pair_space();
        let spec = make_product(
            &space,
            &[vec![0], vec![1]],
            vec![
                ImmersionSpec::Circle { k: 1.0, phase: 0.0 },
                ImmersionSpec::Circle { k: 1.0, phase: 0.0 },
            ],
        )
        .unwrap();
        let grid = Grid::new(vec![(0.0, 2.5), (0.0, 2.5)], vec![4, 4]).unwrap();
        let samples = sample_grid(&space, &spec, &grid).unwrap();
        let result = detect(&space, &samples);
        match result.verdict {
            Verdict::Product { partition } => {
                assert_eq!(partition, vec![vec![0], vec![1]]);
            }
            other => panic!("expected product, got {other:?}"),
        }
    }

    #[test]
    fn hyperbola_circle_product_tensors() {
        let space = ProductSpace::new(vec![
            SpaceFormSpec { n: 1, k: -1.0 },
            SpaceFormSpec { n: 1, k: 1.0 },
        ])
        .unwrap();
        let spec = make_product(
            &space,
            &[vec![0], vec![1]],
            vec![
                ImmersionSpec::Hyperbola { k: -1.0, phase: 0.0 },
                ImmersionSpec::Circle { k: 1.0, phase: 0.0 },
            ],
        )
        .unwrap();
        let pd = point_data(&space, &spec, &[0.4, 0.9]).unwrap();
        let expect = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        assert!((&pd.st.r[0] - expect).norm() <= 1e-10);
    }

    #[test]
    fn weighted_sum_round_trip_recovers_weights() {
        let space = circle_pair_space();
        let a1 = (1.0f64 / 3.0).sqrt();
        let a2 = (2.0f64 / 3.0).sqrt();
        let w = WeightVector::new(vec![a1, a2]).unwrap();
        let spec = make_weighted_sum(
            &space,
            &w,
            vec![
                ImmersionSpec::Circle {
                    k: a1 * a1,
                    phase: 0.0,
                },
                ImmersionSpec::Circle {
                    k: a2 * a2,
                    phase: 0.0,
                },
            ],
        )
        .unwrap();
        let samples = sample_grid(&space, &spec, &line_grid(9)).unwrap();
        // R_i = a_i^2 as predicted.
        for pd in &samples {
            assert!((pd.st.r[0][(0, 0)] - 1.0 / 3.0).abs() <= 1e-12);
        }
        let result = detect(&space, &samples);
        match result.verdict {
            Verdict::WeightedSum { weights } => {
                assert!((weights[0] - a1).abs() <= 1e-8);
                assert!((weights[1] - a2).abs() <= 1e-8);
            }
            other => panic!("expected weighted sum, got {other:?}"),
        }
    }

    #[test]
    fn umbilical_parts_propagate() {
        // Weighted sum of geodesic circles: alpha vanishes entirely, which
        // is the umbilical case with vanishing mean curvature.
        let space = circle_pair_space();
        let a = std::f64::consts::FRAC_1_SQRT_2;
        let w = WeightVector::new(vec![a, a]).unwrap();
        let spec = make_weighted_sum(
            &space,
            &w,
            vec![
                ImmersionSpec::Circle { k: 0.5, phase: 0.0 },
                ImmersionSpec::Circle { k: 0.5, phase: 0.0 },
            ],
        )
        .unwrap();
        for t in [0.1, 0.9, 2.2] {
            let pd = point_data(&space, &spec, &[t]).unwrap();
            let norm: f64 = pd.hf.iter().map(|h| h.norm_squared()).sum();
            assert!(norm.sqrt() <= 1e-10);
        }
    }

    #[test]
    fn turning_curve_detected_as_none() {
        let space = circle_pair_space();
        let spec = ImmersionSpec::TurningCurve {
            theta0: 0.5,
            rate: 0.4,
            parts: vec![
                ImmersionSpec::Circle { k: 1.0, phase: 0.0 },
                ImmersionSpec::Circle { k: 1.0, phase: 0.0 },
            ],
        };
        let samples = sample_grid(&space, &spec, &line_grid(9)).unwrap();
        let result = detect(&space, &samples);
        assert!(matches!(result.verdict, Verdict::None));
        assert!(!result.evidence.pass());
    }

    #[test]
    fn special_geodesic_arithmetic_for_1_2_2() {
        let (spec, a, k_tilde) = make_special_geodesic(
            &[1.0, 2.0, 2.0],
            None,
            ImmersionSpec::Circle { k: 0.5, phase: 0.0 },
        )
        .unwrap();
        assert!((a[0] - 0.5f64.sqrt()).abs() <= 1e-15);
        assert!((a[1] - 0.5).abs() <= 1e-15);
        assert!((a[2] - 0.5).abs() <= 1e-15);
        assert!((k_tilde - 0.5).abs() <= 1e-15);
        let space = ProductSpace::new(vec![
            SpaceFormSpec { n: 1, k: 1.0 },
            SpaceFormSpec { n: 1, k: 2.0 },
            SpaceFormSpec { n: 1, k: 2.0 },
        ])
        .unwrap();
        let pd = point_data(&space, &spec, &[0.8]).unwrap();
        // k_i R_i all equal k_tilde.
        for i in 0..3 {
            let ki = space.factor(i).k;
            assert!((pd.st.r[i][(0, 0)] * ki - 0.5).abs() <= 1e-12);
        }
        // Totally geodesic.
        let norm: f64 = pd.hf.iter().map(|h| h.norm_squared()).sum();
        assert!(norm.sqrt() <= 1e-10);
    }

    #[test]
    fn mixed_sign_curvatures_are_rejected() {
        let err = make_special_geodesic(
            &[1.0, -1.0],
            None,
            ImmersionSpec::Circle { k: 0.5, phase: 0.0 },
        );
        assert!(matches!(err, Err(GeomError::MixedSigns { .. })));
    }

    #[test]
    fn proportionality_holds_for_weighted_circle_sum() {
        let space = circle_pair_space();
        let a = std::f64::consts::FRAC_1_SQRT_2;
        let spec = ImmersionSpec::WeightedSum {
            weights: vec![a, a],
            parts: vec![
                ImmersionSpec::Circle { k: 0.5, phase: 0.0 },
                ImmersionSpec::Circle { k: 0.5, phase: 0.0 },
            ],
        };
        let samples = sample_grid(&space, &spec, &line_grid(9)).unwrap();
        let result = check_proportionality(&space, &samples).unwrap();
        match result.verdict {
            Verdict::Proportional { lambdas } => {
                assert!((lambdas[0] - 0.5).abs() <= 1e-12);
            }
            other => panic!("expected proportional, got {other:?}"),
        }
        assert_eq!(result.evidence.get("prop_III").unwrap().residual, 0.0);
    }

    #[test]
    fn product_torus_is_not_proportional() {
        let space = circle_pair_space();
        let spec = ImmersionSpec::Product {
            parts: vec![
                ImmersionSpec::Circle { k: 1.0, phase: 0.0 },
                ImmersionSpec::Circle { k: 1.0, phase: 0.0 },
            ],
        };
        let grid = Grid::new(vec![(0.0, 2.0), (0.0, 2.0)], vec![3, 3]).unwrap();
        let samples = sample_grid(&space, &spec, &grid).unwrap();
        let result = check_proportionality(&space, &samples).unwrap();
        assert!(matches!(result.verdict, Verdict::None));
    }

    #[test]
    fn proportionality_needs_curved_factors() {
        let space = ProductSpace::new(vec![
            SpaceFormSpec { n: 1, k: 1.0 },
            SpaceFormSpec { n: 1, k: 0.0 },
        ])
        .unwrap();
        let spec = make_slice(
            &space,
            0,
            &[vec![0.0]],
            ImmersionSpec::Circle { k: 1.0, phase: 0.0 },
        )
        .unwrap();
        let samples = sample_grid(&space, &spec, &line_grid(5)).unwrap();
        assert!(check_proportionality(&space, &samples).is_err());
    }

    #[test]
    fn extract_isometries_from_diagonal_basis() {
        let space = circle_pair_space();
        let a = std::f64::consts::FRAC_1_SQRT_2;
        let basis = vec![
            DVector::from_vec(vec![a, 0.0, a, 0.0]),
            DVector::from_vec(vec![0.0, a, 0.0, a]),
        ];
        let fact = extract_factor_isometries(&space, &basis).unwrap();
        for t in &fact.isometries {
            assert!((t - DMatrix::<f64>::identity(2, 2)).norm() <= 1e-12);
        }
    }

    #[test]
    fn extract_isometries_sees_a_block_rotation() {
        let space = circle_pair_space();
        let a = std::f64::consts::FRAC_1_SQRT_2;
        let th = 0.7f64;
        let rot = [[th.cos(), -th.sin()], [th.sin(), th.cos()]];
        let basis = vec![
            DVector::from_vec(vec![a, 0.0, a * rot[0][0], a * rot[1][0]]),
            DVector::from_vec(vec![0.0, a, a * rot[0][1], a * rot[1][1]]),
        ];
        let fact = extract_factor_isometries(&space, &basis).unwrap();
        assert!((fact.isometries[0].clone() - DMatrix::<f64>::identity(2, 2)).norm() <= 1e-12);
        let want = DMatrix::from_row_slice(2, 2, &[rot[0][0], rot[0][1], rot[1][0], rot[1][1]]);
        assert!((fact.isometries[1].clone() - want).norm() <= 1e-12);
    }

    #[test]
    fn degenerate_projection_is_not_a_similarity() {
        let space = circle_pair_space();
        let basis = vec![
            DVector::from_vec(vec![1.0, 0.0, 0.0, 0.0]),
            DVector::from_vec(vec![0.0, 1.0, 0.0, 0.0]),
        ];
        assert!(matches!(
            extract_factor_isometries(&space, &basis),
            Err(GeomError::NotSimilarity { .. })
        ));
    }

    #[test]
    fn hyperbolic_diagonal_gets_sheet_corrected() {
        let space = ProductSpace::new(vec![
            SpaceFormSpec { n: 1, k: -2.0 },
            SpaceFormSpec { n: 1, k: -2.0 },
        ])
        .unwrap();
        let a = std::f64::consts::FRAC_1_SQRT_2;
        // Basis given with downward-pointing timelike vectors.
        let basis = vec![
            DVector::from_vec(vec![-a, 0.0, -a, 0.0]),
            DVector::from_vec(vec![0.0, -a, 0.0, -a]),
        ];
        let fact = extract_factor_isometries(&space, &basis).unwrap();
        for t in &fact.isometries {
            assert!(t[(0, 0)] > 0.0);
        }
    }

    #[test]
    fn factorization_reproduces_the_summand_circle() {
        let space = circle_pair_space();
        let a = std::f64::consts::FRAC_1_SQRT_2;
        let spec = ImmersionSpec::WeightedSum {
            weights: vec![a, a],
            parts: vec![
                ImmersionSpec::Circle { k: 0.5, phase: 0.0 },
                ImmersionSpec::Circle { k: 0.5, phase: 0.0 },
            ],
        };
        let grid = line_grid(21);
        let out = factor_through_geodesic(&space, &spec, &grid).unwrap();
        assert!(out.subspace_drift <= 1e-6);
        let summand = ImmersionSpec::Circle { k: 0.5, phase: 0.0 };
        for (u, fbar) in grid.points().iter().zip(&out.fbar) {
            let expect = summand.eval_jet(u).unwrap().value;
            assert!(
                (fbar - &expect).norm() <= 1e-7,
                "fbar {fbar:?} vs {expect:?}"
            );
        }
        assert!(out.constraint_residual <= 1e-8);
    }

    #[test]
    fn factorization_rejects_the_product_torus() {
        let space = circle_pair_space();
        let spec = ImmersionSpec::Product {
            parts: vec![
                ImmersionSpec::Circle { k: 1.0, phase: 0.0 },
                ImmersionSpec::Circle { k: 1.0, phase: 0.0 },
            ],
        };
        let grid = Grid::new(vec![(0.0, 2.0), (0.0, 2.0)], vec![3, 3]).unwrap();
        assert!(matches!(
            factor_through_geodesic(&space, &spec, &grid),
            Err(GeomError::NotProportional(_))
        ));
    }

    #[test]
    fn factorization_of_the_geodesic_itself_returns_the_inner_curve() {
        let inner = ImmersionSpec::Circle { k: 0.5, phase: 0.0 };
        let (spec, _, _) =
            make_special_geodesic(&[1.0, 2.0, 2.0], None, inner.clone()).unwrap();
        let space = ProductSpace::new(vec![
            SpaceFormSpec { n: 1, k: 1.0 },
            SpaceFormSpec { n: 1, k: 2.0 },
            SpaceFormSpec { n: 1, k: 2.0 },
        ])
        .unwrap();
        let grid = line_grid(15);
        let out = factor_through_geodesic(&space, &spec, &grid).unwrap();
        for (u, fbar) in grid.points().iter().zip(&out.fbar) {
            let expect = inner.eval_jet(u).unwrap().value;
            assert!((fbar - &expect).norm() <= 1e-7);
        }
    }

    #[test]
    fn rank_constancy_when_s_vanishes() {
        // Reflection of the constant-dimension lemmas: with S identically
        // zero on the grid, the kernel dimension of each R_i is constant.
        let space = circle_pair_space();
        let spec = ImmersionSpec::Product {
            parts: vec![
                ImmersionSpec::Circle { k: 1.0, phase: 0.0 },
                ImmersionSpec::Circle { k: 1.0, phase: 0.0 },
            ],
        };
        let grid = Grid::new(vec![(0.0, 2.0), (0.0, 2.0)], vec![4, 4]).unwrap();
        let samples = sample_grid(&space, &spec, &grid).unwrap();
        for i in 0..2 {
            let s_max = samples
                .iter()
                .map(|pd| pd.st.s[i].norm())
                .fold(0.0f64, f64::max);
            assert!(s_max <= 1e-8);
            let dims: Vec<usize> = samples.iter().map(|pd| kernel_dim(&pd.st.r[i])).collect();
            assert!(dims.iter().all(|&d| d == dims[0]));
        }
    }
}
