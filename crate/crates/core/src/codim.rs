//! First normal space, the kernel/fixed-space splitting of the normal
//! projection blocks, and the reduction-of-codimension tests.
//!
//! The normal space of an immersion splits, for each factor i, as
//! `S_i(TM) + U_i + V_i` where U_i is killed by T_i and V_i is fixed by it.
//! The constructive reduction candidate at factor i is `V_i` intersected with
//! the orthogonal complement of the first normal space; when that bundle is
//! parallel in the normal connection, the factor can be replaced by a
//! lower-dimensional totally geodesic submanifold.

use crate::ambient::ProductSpace;
use crate::calculus::{
    point_data_continued, sample_grid_continued, stencil_data_from, PointData, SplitTensors,
};
use crate::error::{GeomError, Result};
use crate::grid::Grid;
use crate::jets::ImmersionSpec;
use crate::report::ResidualReport;
use nalgebra::{DMatrix, DVector};

/// Rank threshold: relative to the largest singular value, with an absolute
/// fallback when everything is tiny.
fn svd_rank(singular: &[f64]) -> usize {
    let smax = singular.iter().cloned().fold(0.0f64, f64::max);
    if smax <= 1e-9 {
        singular.iter().filter(|&&s| s > 1e-10).count()
    } else {
        singular.iter().filter(|&&s| s > 1e-7 * smax).count()
    }
}

/// Span of the second fundamental form values at a point, in normal-frame
/// coefficients.
#[derive(Clone, Debug)]
pub struct FirstNormal {
    pub basis: Vec<DVector<f64>>,
    pub rank: usize,
    pub singular_values: Vec<f64>,
}

/// Compute the first normal space from alpha coefficients (one m x m matrix
/// per normal-frame index).
pub fn first_normal(alpha: &[DMatrix<f64>]) -> FirstNormal {
    let p = alpha.len();
    if p == 0 {
        return FirstNormal {
            basis: Vec::new(),
            rank: 0,
            singular_values: Vec::new(),
        };
    }
    let m = alpha[0].nrows();
    let cols = m * (m + 1) / 2;
    let mut mat = DMatrix::zeros(p, cols);
    let mut col = 0;
    for a in 0..m {
        for b in a..m {
            for al in 0..p {
                mat[(al, col)] = alpha[al][(a, b)];
            }
            col += 1;
        }
    }
    let svd = mat.clone().svd(true, false);
    let singular: Vec<f64> = svd.singular_values.iter().cloned().collect();
    let rank = svd_rank(&singular);
    let u = svd.u.expect("left singular vectors requested");
    let basis = (0..rank).map(|j| u.column(j).into_owned()).collect();
    FirstNormal {
        basis,
        rank,
        singular_values: singular,
    }
}

/// The orthogonal splitting of the normal space at one factor:
/// the image of S_i, the kernel U_i of T_i, and the fixed space V_i.
#[derive(Clone, Debug)]
pub struct NormalSplit {
    pub s_image: Vec<DVector<f64>>,
    pub u_basis: Vec<DVector<f64>>,
    pub v_basis: Vec<DVector<f64>>,
}

/// Split the complement of S_i(TM) by the spectrum of T_i. The restriction
/// of T_i there is an orthogonal projection, so its eigenvalues must cluster
/// at 0 and 1; anything inside [0.1, 0.9] signals that the splitting is
/// numerically ill-defined at this point.
pub fn split_uv(st: &SplitTensors, factor: usize) -> Result<NormalSplit> {
    let p = st.p();
    if p == 0 {
        return Ok(NormalSplit {
            s_image: Vec::new(),
            u_basis: Vec::new(),
            v_basis: Vec::new(),
        });
    }
    let s = &st.s[factor];
    let svd = s.clone().svd(true, false);
    let singular: Vec<f64> = svd.singular_values.iter().cloned().collect();
    let rank_s = svd_rank(&singular);
    let u_mat = svd.u.expect("left singular vectors requested");
    let s_image: Vec<DVector<f64>> = (0..rank_s).map(|j| u_mat.column(j).into_owned()).collect();

    // Orthogonal complement of the image inside the normal space.
    let mut complement: Vec<DVector<f64>> = Vec::new();
    for j in 0..p {
        let mut w = DVector::zeros(p);
        w[j] = 1.0;
        for b in s_image.iter().chain(complement.iter()) {
            let c = b.dot(&w);
            w -= b * c;
        }
        if w.norm() > 1e-8 {
            let n = w.norm();
            complement.push(w / n);
        }
        if s_image.len() + complement.len() == p {
            break;
        }
    }

    let mut u_basis = Vec::new();
    let mut v_basis = Vec::new();
    if !complement.is_empty() {
        let q = complement.len();
        let t = &st.t[factor];
        let restricted = DMatrix::from_fn(q, q, |x, y| (t * &complement[y]).dot(&complement[x]));
        let eig = restricted.symmetric_eigen();
        for (j, &lambda) in eig.eigenvalues.iter().enumerate() {
            let mut vec = DVector::zeros(p);
            for x in 0..q {
                vec += &complement[x] * eig.eigenvectors[(x, j)];
            }
            if lambda < 0.1 {
                u_basis.push(vec);
            } else if lambda > 0.9 {
                v_basis.push(vec);
            } else {
                return Err(GeomError::SpectralGap {
                    factor,
                    value: lambda,
                });
            }
        }
    }
    Ok(NormalSplit {
        s_image,
        u_basis,
        v_basis,
    })
}

/// Basis (normal-frame coefficients) of V_i intersected with the orthogonal
/// complement of the first normal space.
fn reduction_candidate(split: &NormalSplit, n1: &FirstNormal) -> Vec<DVector<f64>> {
    let v = &split.v_basis;
    if v.is_empty() {
        return Vec::new();
    }
    if n1.rank == 0 {
        return v.clone();
    }
    let p = v[0].len();
    // Kernel of the (rank x dimV) pairing matrix.
    let pairing = DMatrix::from_fn(n1.rank, v.len(), |r, c| n1.basis[r].dot(&v[c]));
    let svd = pairing.clone().svd(false, true);
    let vt = svd.v_t.expect("right singular vectors requested");
    let mut out: Vec<DVector<f64>> = Vec::new();
    for j in 0..v.len() {
        let sigma = if j < svd.singular_values.len() {
            svd.singular_values[j]
        } else {
            0.0
        };
        if sigma <= 1e-8 {
            let mut w = DVector::zeros(p);
            for c in 0..v.len() {
                w += &v[c] * vt[(j, c)];
            }
            for b in &out {
                let cc = b.dot(&w);
                w -= b * cc;
            }
            if w.norm() > 1e-8 {
                let n = w.norm();
                out.push(w / n);
            }
        }
    }
    out
}

/// Align a frame (list of coefficient vectors) to the span of `target` by
/// projection and re-orthonormalization; fails when the overlap degrades.
fn continue_frame(prev: &[DVector<f64>], target: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
    if prev.is_empty() {
        return Ok(Vec::new());
    }
    let mut out: Vec<DVector<f64>> = Vec::new();
    for v in prev {
        // Project onto span(target).
        let mut w = DVector::zeros(v.len());
        for b in target {
            w += b * b.dot(v);
        }
        for b in &out {
            let c = b.dot(&w);
            w -= b * c;
        }
        let n = w.norm();
        if n < 0.5 {
            return Err(GeomError::FrameContinuation { overlap: n });
        }
        out.push(w / n);
    }
    Ok(out)
}

/// Outcome of the reduction-of-codimension test at one factor.
#[derive(Clone, Debug)]
pub struct ReductionOutcome {
    pub reducible: bool,
    pub nbar: usize,
    pub certificate: ResidualReport,
    /// Ambient directions spanning the parallel bundle at the base point
    /// (empty when nbar = 0).
    pub directions: Vec<crate::ambient::AmbientVector>,
}

const TOL_PARALLEL: f64 = 1e-4;

struct GridData {
    samples: Vec<PointData>,
    candidates: Vec<Vec<DVector<f64>>>,
    n1s: Vec<FirstNormal>,
    nbar: usize,
}

fn grid_data(
    space: &ProductSpace,
    spec: &ImmersionSpec,
    factor: usize,
    grid: &Grid,
) -> Result<GridData> {
    if factor >= space.factor_count() {
        return Err(GeomError::FactorIndex {
            index: factor,
            len: space.factor_count(),
        });
    }
    let samples = sample_grid_continued(space, spec, grid)?;
    let mut candidates = Vec::with_capacity(grid.len());
    let mut n1s = Vec::with_capacity(grid.len());
    for pd in &samples {
        let split = split_uv(&pd.st, factor)?;
        let n1 = first_normal(&pd.hf);
        candidates.push(reduction_candidate(&split, &n1));
        n1s.push(n1);
    }
    let nbar = candidates[0].len();
    for (j, c) in candidates.iter().enumerate() {
        if c.len() != nbar {
            return Err(GeomError::DimensionJump(format!(
                "dim(V cap N1-perp) is {} at grid point 0 but {} at point {}",
                nbar,
                c.len(),
                j
            )));
        }
    }
    for (j, n1) in n1s.iter().enumerate() {
        if n1.rank != n1s[0].rank {
            return Err(GeomError::DimensionJump(format!(
                "first normal rank is {} at grid point 0 but {} at point {}",
                n1s[0].rank, n1.rank, j
            )));
        }
    }
    Ok(GridData {
        samples,
        candidates,
        n1s,
        nbar,
    })
}

/// Derivative of normal-bundle coefficient vectors along a coordinate
/// direction, corrected by the connection of the frame field the
/// coefficients are expressed in.
fn normal_derivative(
    omega: &DMatrix<f64>,
    center: &[DVector<f64>],
    frame_prev: &[DVector<f64>],
    frame_next: &[DVector<f64>],
    step: f64,
) -> Vec<DVector<f64>> {
    let mut out = Vec::with_capacity(frame_prev.len());
    for ((vp, vn), vc) in frame_prev.iter().zip(frame_next).zip(center) {
        let d = (vn - vp) / (2.0 * step);
        // nabla coefficients: d + Omega^t x (input-row convention).
        out.push(d + omega.transpose() * vc);
    }
    out
}

/// Connection of the continued grid frame field along one axis, by central
/// differences of the sampled frames.
fn grid_omega(
    space: &ProductSpace,
    prev: &PointData,
    center: &PointData,
    next: &PointData,
    step: f64,
) -> DMatrix<f64> {
    let p = center.framed.p();
    DMatrix::from_fn(p, p, |al, be| {
        let diff =
            (&next.framed.normal_frame[al] - &prev.framed.normal_frame[al]) / (2.0 * step);
        space.dot(&diff, &center.framed.normal_frame[be])
    })
}

/// Parallel-transport certificate that V_i cap N1-perp is preserved by the
/// normal connection across the grid.
pub fn reduction_test(
    space: &ProductSpace,
    spec: &ImmersionSpec,
    factor: usize,
    grid: &Grid,
) -> Result<ReductionOutcome> {
    let data = grid_data(space, spec, factor, grid)?;
    let mut certificate = ResidualReport::new();
    let nbar = data.nbar;
    if nbar == 0 {
        certificate.insert(format!("parallel_f{factor}"), 0.0, TOL_PARALLEL);
        return Ok(ReductionOutcome {
            reducible: true,
            nbar: 0,
            certificate,
            directions: Vec::new(),
        });
    }

    let mut worst = 0.0f64;
    for axis in 0..grid.dims() {
        let step = grid.spacing(axis);
        // Sweep every grid line along this axis.
        let other_counts: Vec<usize> = (0..grid.dims())
            .filter(|&d| d != axis)
            .map(|d| grid.counts[d])
            .collect();
        let line_count: usize = other_counts.iter().product::<usize>().max(1);
        for line in 0..line_count {
            // Build the index path along this line.
            let n_axis = grid.counts[axis];
            let mut path = Vec::with_capacity(n_axis);
            for j in 0..n_axis {
                let mut idx = vec![0usize; grid.dims()];
                idx[axis] = j;
                let mut rem = line;
                for d in (0..grid.dims()).filter(|&d| d != axis) {
                    idx[d] = rem % grid.counts[d];
                    rem /= grid.counts[d];
                }
                path.push(grid.flatten(&idx));
            }
            // Continue the frame along the line.
            let mut frames: Vec<Vec<DVector<f64>>> = Vec::with_capacity(n_axis);
            frames.push(data.candidates[path[0]].clone());
            for j in 1..n_axis {
                let prev = frames[j - 1].clone();
                frames.push(continue_frame(&prev, &data.candidates[path[j]])?);
            }
            // Centered finite differences at interior points.
            for j in 1..n_axis - 1 {
                let flat = path[j];
                let omega = grid_omega(
                    space,
                    &data.samples[path[j - 1]],
                    &data.samples[flat],
                    &data.samples[path[j + 1]],
                    step,
                );
                let grad = normal_derivative(
                    &omega,
                    &frames[j],
                    &frames[j - 1],
                    &frames[j + 1],
                    step,
                );
                let l_basis = &data.candidates[flat];
                for g in &grad {
                    let mut residual_vec = g.clone();
                    for b in l_basis {
                        let c = b.dot(g);
                        residual_vec -= b * c;
                    }
                    worst = worst.max(residual_vec.norm());
                }
            }
        }
    }
    certificate.insert(format!("parallel_f{factor}"), worst, TOL_PARALLEL);

    // Ambient directions at the base point.
    let base = &data.samples[0];
    let directions = data.candidates[0]
        .iter()
        .map(|coeff| {
            let mut v = space.zero_vector();
            for (al, xi) in base.framed.normal_frame.iter().enumerate() {
                v += xi * coeff[al];
            }
            v
        })
        .collect();
    Ok(ReductionOutcome {
        reducible: worst <= TOL_PARALLEL,
        nbar,
        certificate,
        directions,
    })
}

const TOL_THM44_I: f64 = 1e-2;
const TOL_THM44_II: f64 = 1e-4;
const TOL_EQ18: f64 = 1e-3;
const STEP_CURVATURE: f64 = 2e-3;

/// Normal-curvature matrices R_perp_{cd} (input-row convention) at a point,
/// from second differences of a coherent stencil field continued from the
/// given center gauge. Identically zero for curves.
fn normal_curvature_from(
    space: &ProductSpace,
    spec: &ImmersionSpec,
    u: &[f64],
    h: f64,
    center: &PointData,
) -> Result<Vec<Vec<DMatrix<f64>>>> {
    let m = spec.intrinsic_dim();
    let p = center.framed.p();
    let mut rperp = vec![vec![DMatrix::zeros(p, p); m]; m];
    if m < 2 || p == 0 {
        return Ok(rperp);
    }
    let stencil = stencil_data_from(space, spec, u, h, center.clone(), true)?;
    let omega_c: Vec<DMatrix<f64>> = (0..m).map(|c| stencil.omega(space, c)).collect();
    let mut d_omega = vec![vec![DMatrix::zeros(p, p); m]; m];
    for c in 0..m {
        for d in 0..m {
            if c == d {
                continue;
            }
            let op = stencil.omega_at_axis(space, c, 1.0, d);
            let om = stencil.omega_at_axis(space, c, -1.0, d);
            d_omega[c][d] = (op - om) / (2.0 * h);
        }
    }
    for c in 0..m {
        for d in 0..m {
            if c == d {
                continue;
            }
            rperp[c][d] = &d_omega[c][d] - &d_omega[d][c] + &omega_c[d] * &omega_c[c]
                - &omega_c[c] * &omega_c[d];
        }
    }
    Ok(rperp)
}

/// Conditions of the derivative characterization of reducibility: flatness of
/// the normal curvature on the candidate bundle, orthogonality of its
/// derivative to the mean curvature vector, and the conclusion that the
/// derivative stays orthogonal to the first normal space.
pub fn thm44_check(
    space: &ProductSpace,
    spec: &ImmersionSpec,
    factor: usize,
    grid: &Grid,
) -> Result<ResidualReport> {
    let data = grid_data(space, spec, factor, grid)?;
    let m = spec.intrinsic_dim();
    let mut report = ResidualReport::new();
    let mut res_i = 0.0f64;
    let mut res_ii = 0.0f64;
    let mut res_concl = 0.0f64;
    let mut res_eq18 = 0.0f64;

    if data.nbar > 0 {
        for (flat, u) in grid.points().iter().enumerate() {
            let center = &data.samples[flat];
            let l_basis = &data.candidates[flat];
            let n1 = &data.n1s[flat];
            let p = center.framed.p();

            // eq18 and condition (I): curvature applied to the candidate,
            // everything expressed in the gauge of the grid sample.
            let rperp = normal_curvature_from(space, spec, u, STEP_CURVATURE, center)?;
            for c in 0..m {
                for d in 0..m {
                    for x in l_basis {
                        res_eq18 = res_eq18.max((rperp[c][d].transpose() * x).norm());
                    }
                }
            }
            // (nabla_e Rperp)(c, d) xi for xi in the candidate.
            let gamma = crate::jets::christoffels(space, spec, u)?;
            let stencil = stencil_data_from(
                space,
                spec,
                u,
                STEP_CURVATURE,
                center.clone(),
                false,
            )?;
            for e in 0..m {
                let omega_e = stencil.omega(space, e);
                let mut up = u.to_vec();
                up[e] += STEP_CURVATURE;
                let mut um = u.to_vec();
                um[e] -= STEP_CURVATURE;
                let pd_p = point_data_continued(space, spec, &up, &center.framed)?;
                let pd_m = point_data_continued(space, spec, &um, &center.framed)?;
                let rp = normal_curvature_from(space, spec, &up, STEP_CURVATURE, &pd_p)?;
                let rm = normal_curvature_from(space, spec, &um, STEP_CURVATURE, &pd_m)?;
                for c in 0..m {
                    for d in 0..m {
                        let mut grad =
                            (&rp[c][d] - &rm[c][d]) / (2.0 * STEP_CURVATURE);
                        grad += &rperp[c][d] * &omega_e - &omega_e * &rperp[c][d];
                        for x in 0..m {
                            grad -= &rperp[x][d] * gamma.get(x, e, c);
                            grad -= &rperp[c][x] * gamma.get(x, e, d);
                        }
                        for xi in l_basis {
                            res_i = res_i.max((grad.transpose() * xi).norm());
                        }
                    }
                }
            }

            // Conditions (II) and the conclusion need the derivative of a
            // candidate section: local continuation over a short stencil.
            let h = crate::jets::DEFAULT_STEP;
            let small = stencil_data_from(space, spec, u, h, center.clone(), false)?;
            let mut eta = DVector::zeros(p);
            for al in 0..p {
                let tr: f64 = (0..m).map(|a| center.hf[al][(a, a)]).sum();
                eta[al] = tr / m as f64;
            }
            for e in 0..m {
                let pd_p = &small.plus[e];
                let pd_m = &small.minus[e];
                let cand_p = reduction_candidate(
                    &split_uv(&pd_p.st, factor)?,
                    &first_normal(&pd_p.hf),
                );
                let cand_m = reduction_candidate(
                    &split_uv(&pd_m.st, factor)?,
                    &first_normal(&pd_m.hf),
                );
                let fr_p = continue_frame(l_basis, &cand_p)?;
                let fr_m = continue_frame(l_basis, &cand_m)?;
                let omega = small.omega(space, e);
                let grads = normal_derivative(&omega, l_basis, &fr_m, &fr_p, h);
                for g in &grads {
                    res_ii = res_ii.max(g.dot(&eta).abs());
                    for b in &n1.basis {
                        res_concl = res_concl.max(g.dot(b).abs());
                    }
                }
            }
        }
    }
    report.insert("thm44_I", res_i, TOL_THM44_I);
    report.insert("thm44_II", res_ii, TOL_THM44_II);
    report.insert("thm44_conclusion", res_concl, TOL_THM44_II);
    report.insert("eq18", res_eq18, TOL_EQ18);
    Ok(report)
}
