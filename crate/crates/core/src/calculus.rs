//! Split tensors of the factor projections along an immersion, and the full
//! identity suite evaluated as numerical residuals.
//!
//! All tensors are expressed in the orthonormal tangent and normal frames of
//! a [`FramedPoint`], so every identity becomes plain matrix algebra. The
//! blocks of the projection pi_i are
//!
//! * `R_i` (tangent-tangent, symmetric, spectrum in [0, 1]),
//! * `S_i` (tangent-normal),
//! * `T_i` (normal-normal, symmetric, spectrum in [0, 1]).
//!
//! Zeroth-order identities are checked pointwise at 1e-9; identities with one
//! covariant derivative at 1e-4 (or 1e-6 when the derivative is exact); the
//! curvature-level equations at 1e-5 (Gauss), 1e-4 (Codazzi) and 1e-3
//! (Ricci), reflecting one versus two levels of central differencing over
//! exact jets.

use crate::ambient::ProductSpace;
use crate::error::{GeomError, Result};
use crate::jets::{
    christoffels, continue_frames, frame_stencil, orthonormal_frames, orthonormal_frames_seeded,
    riemann, second_fundamental, FramedPoint, ImmersionSpec, SecondFundamental, DEFAULT_STEP,
};
use crate::report::ResidualReport;
use nalgebra::DMatrix;

pub const TOL_ALGEBRAIC: f64 = 1e-9;
pub const TOL_EIGENVALUE: f64 = 1e-8;
pub const TOL_MOVING: f64 = 1e-4;
pub const TOL_GAUSS: f64 = 1e-5;
pub const TOL_CODAZZI: f64 = 1e-4;
pub const TOL_RICCI: f64 = 1e-3;
pub const TOL_LIFT: f64 = 1e-6;

/// Per-factor matrices of the split tensors in the frames of a point.
#[derive(Clone, Debug)]
pub struct SplitTensors {
    /// R_i: m x m symmetric.
    pub r: Vec<DMatrix<f64>>,
    /// S_i: p x m, row alpha = normal index, column a = tangent index.
    pub s: Vec<DMatrix<f64>>,
    /// T_i: p x p symmetric.
    pub t: Vec<DMatrix<f64>>,
    /// Worst defect of pi_i e_a (resp. pi_i xi_alpha) against its
    /// reconstruction from the split pieces.
    pub reconstruction_residual: f64,
}

impl SplitTensors {
    pub fn m(&self) -> usize {
        self.r.first().map(|r| r.nrows()).unwrap_or(0)
    }

    pub fn p(&self) -> usize {
        self.t.first().map(|t| t.nrows()).unwrap_or(0)
    }

    pub fn factor_count(&self) -> usize {
        self.r.len()
    }
}

/// Compute R_i, S_i, T_i from the frames at a point.
pub fn split_tensors(space: &ProductSpace, framed: &FramedPoint) -> Result<SplitTensors> {
    let m = framed.m();
    let p = framed.p();
    let l = space.factor_count();
    let mut r = Vec::with_capacity(l);
    let mut s = Vec::with_capacity(l);
    let mut t = Vec::with_capacity(l);
    for i in 0..l {
        r.push(DMatrix::from_fn(m, m, |a, b| {
            space.block_inner(i, &framed.tangent_frame[a], &framed.tangent_frame[b])
        }));
        s.push(DMatrix::from_fn(p, m, |al, a| {
            space.block_inner(i, &framed.tangent_frame[a], &framed.normal_frame[al])
        }));
        t.push(DMatrix::from_fn(p, p, |al, be| {
            space.block_inner(i, &framed.normal_frame[al], &framed.normal_frame[be])
        }));
    }
    // Reconstruction of equation (3) in ambient coordinates.
    let mut residual = 0.0f64;
    for i in 0..l {
        for a in 0..m {
            let mut rec = space.zero_vector();
            for b in 0..m {
                rec += &framed.tangent_frame[b] * r[i][(a, b)];
            }
            for al in 0..p {
                rec += &framed.normal_frame[al] * s[i][(al, a)];
            }
            let proj = space.block_project(i, &framed.tangent_frame[a])?;
            residual = residual.max((proj - rec).norm());
        }
        for al in 0..p {
            let mut rec = space.zero_vector();
            for b in 0..m {
                rec += &framed.tangent_frame[b] * s[i][(al, b)];
            }
            for be in 0..p {
                rec += &framed.normal_frame[be] * t[i][(al, be)];
            }
            let proj = space.block_project(i, &framed.normal_frame[al])?;
            residual = residual.max((proj - rec).norm());
        }
    }
    Ok(SplitTensors {
        r,
        s,
        t,
        reconstruction_residual: residual,
    })
}

/// Everything the residual suites need at one parameter point.
#[derive(Clone, Debug)]
pub struct PointData {
    pub u: Vec<f64>,
    pub framed: FramedPoint,
    pub st: SplitTensors,
    pub alpha: SecondFundamental,
    /// alpha_f coefficients with orthonormal-frame arguments:
    /// hf[alpha][(x, y)] = <alpha(e_x, e_y), xi_alpha>.
    pub hf: Vec<DMatrix<f64>>,
    /// Coordinate-to-frame matrix B[(c, a)] = <d1_c, e_a>.
    pub b: DMatrix<f64>,
    pub b_inv: DMatrix<f64>,
}

pub fn point_data(space: &ProductSpace, spec: &ImmersionSpec, u: &[f64]) -> Result<PointData> {
    point_data_seeded(space, spec, u, None)
}

pub fn point_data_seeded(
    space: &ProductSpace,
    spec: &ImmersionSpec,
    u: &[f64],
    seed_order: Option<&[usize]>,
) -> Result<PointData> {
    let jet = spec.eval_jet(u)?;
    let framed = match seed_order {
        Some(order) => orthonormal_frames_seeded(space, &jet, order)?,
        None => orthonormal_frames(space, &jet)?,
    };
    point_data_with_frames(space, spec, u, framed)
}

/// Point data in the gauge of an already-chosen frame.
pub fn point_data_with_frames(
    space: &ProductSpace,
    spec: &ImmersionSpec,
    u: &[f64],
    framed: FramedPoint,
) -> Result<PointData> {
    let gamma = christoffels(space, spec, u)?;
    let alpha = second_fundamental(space, &framed, &gamma)?;
    let b = framed.coordinate_frame_matrix(space);
    let b_inv = b.clone().try_inverse().ok_or(GeomError::DegenerateMetric)?;
    let hf: Vec<DMatrix<f64>> = alpha
        .alpha_f
        .iter()
        .map(|h| &b_inv * h * b_inv.transpose())
        .collect();
    let st = split_tensors(space, &framed)?;
    Ok(PointData {
        u: u.to_vec(),
        framed,
        st,
        alpha,
        hf,
        b,
        b_inv,
    })
}

/// Point data continued from a reference frame at a nearby point.
pub fn point_data_continued(
    space: &ProductSpace,
    spec: &ImmersionSpec,
    u: &[f64],
    reference: &FramedPoint,
) -> Result<PointData> {
    let jet = spec.eval_jet(u)?;
    let framed = continue_frames(space, &jet, reference)?;
    point_data_with_frames(space, spec, u, framed)
}

/// Sample every grid point, carrying the frame gauge from point to point in
/// row-major order so the sampled fields are smooth across the grid.
pub fn sample_grid_continued(
    space: &ProductSpace,
    spec: &ImmersionSpec,
    grid: &crate::grid::Grid,
) -> Result<Vec<PointData>> {
    let mut out: Vec<PointData> = Vec::with_capacity(grid.len());
    for (flat, u) in grid.points().iter().enumerate() {
        let pd = if flat == 0 {
            point_data(space, spec, u)?
        } else {
            let idx = grid.unflatten(flat);
            let last = idx.len() - 1;
            let reference = if idx[last] > 0 {
                flat - 1
            } else {
                flat - grid.counts[last]
            };
            point_data_continued(space, spec, u, &out[reference].framed)?
        };
        out.push(pd);
    }
    Ok(out)
}

impl PointData {
    /// Coefficients of alpha(d_c, e_a) on the normal frame:
    /// returns the p x m matrix with entry (alpha, a).
    fn alpha_row(&self, c: usize) -> DMatrix<f64> {
        let m = self.framed.m();
        let p = self.framed.p();
        DMatrix::from_fn(p, m, |al, a| {
            (0..m).map(|x| self.b[(c, x)] * self.hf[al][(x, a)]).sum()
        })
    }
}

fn spectrum_defect(mat: &DMatrix<f64>) -> f64 {
    if mat.nrows() == 0 {
        return 0.0;
    }
    let eig = mat.clone().symmetric_eigen();
    eig.eigenvalues
        .iter()
        .map(|&l| (-l).max(l - 1.0).max(0.0))
        .fold(0.0, f64::max)
}

/// Pointwise identities of the split tensors: completeness, the quadratic
/// relations within one factor and across factor pairs, and the [0, 1]
/// eigenvalue localization.
pub fn algebraic_residuals(st: &SplitTensors) -> ResidualReport {
    let m = st.m();
    let p = st.p();
    let l = st.factor_count();
    let mut report = ResidualReport::new();

    let mut sum_r = DMatrix::zeros(m, m);
    let mut sum_s = DMatrix::zeros(p, m);
    let mut sum_t = DMatrix::zeros(p, p);
    for i in 0..l {
        sum_r += &st.r[i];
        sum_s += &st.s[i];
        sum_t += &st.t[i];
    }
    report.insert(
        "eq4_R",
        (sum_r - DMatrix::identity(m, m)).norm(),
        TOL_ALGEBRAIC,
    );
    report.insert("eq4_S", sum_s.norm(), TOL_ALGEBRAIC);
    report.insert(
        "eq4_T",
        (sum_t - DMatrix::identity(p, p)).norm(),
        TOL_ALGEBRAIC,
    );

    let eye_m = DMatrix::<f64>::identity(m, m);
    let eye_p = DMatrix::<f64>::identity(p, p);
    let mut eig = 0.0f64;
    for i in 0..l {
        let (r, s, t) = (&st.r[i], &st.s[i], &st.t[i]);
        report.insert(
            format!("eq5_a_f{i}"),
            (s.transpose() * s - r * (&eye_m - r)).norm(),
            TOL_ALGEBRAIC,
        );
        report.insert(
            format!("eq5_b_f{i}"),
            (t * s - s * (&eye_m - r)).norm(),
            TOL_ALGEBRAIC,
        );
        report.insert(
            format!("eq5_c_f{i}"),
            (s * s.transpose() - t * (&eye_p - t)).norm(),
            TOL_ALGEBRAIC,
        );
        eig = eig.max(spectrum_defect(r)).max(spectrum_defect(t));
    }
    for i in 0..l {
        for j in 0..l {
            if i == j {
                continue;
            }
            report.insert(
                format!("eq6_a_f{i}{j}"),
                (st.s[i].transpose() * &st.s[j] + &st.r[i] * &st.r[j]).norm(),
                TOL_ALGEBRAIC,
            );
            report.insert(
                format!("eq6_b_f{i}{j}"),
                (&st.t[i] * &st.s[j] + &st.s[i] * &st.r[j]).norm(),
                TOL_ALGEBRAIC,
            );
            report.insert(
                format!("eq6_c_f{i}{j}"),
                (&st.s[i] * st.s[j].transpose() + &st.t[i] * &st.t[j]).norm(),
                TOL_ALGEBRAIC,
            );
        }
    }
    report.insert("eig_range", eig, TOL_EIGENVALUE);
    report
}

/// Point data on the 3^m stencil around a point, all in one coherent gauge:
/// axis nodes are continued from the center, diagonal nodes (built on
/// demand, m = 2 only) from the axis-0 nodes. In this gauge the bundle
/// connection at the center vanishes to first order, so finite differences
/// of the frame-expressed fields are covariant derivatives up to O(h^2).
pub struct StencilData {
    pub center: PointData,
    pub plus: Vec<PointData>,
    pub minus: Vec<PointData>,
    /// Diagonal nodes for m = 2, indexed by (sign0, sign1) as
    /// (+,+), (+,-), (-,+), (-,-).
    diag: Vec<PointData>,
    pub h: f64,
}

pub fn stencil_data(
    space: &ProductSpace,
    spec: &ImmersionSpec,
    u: &[f64],
    h: f64,
) -> Result<StencilData> {
    let center = point_data(space, spec, u)?;
    stencil_data_from(space, spec, u, h, center, false)
}

pub fn stencil_data_from(
    space: &ProductSpace,
    spec: &ImmersionSpec,
    u: &[f64],
    h: f64,
    center: PointData,
    diagonals: bool,
) -> Result<StencilData> {
    let m = spec.intrinsic_dim();
    let mut plus = Vec::with_capacity(m);
    let mut minus = Vec::with_capacity(m);
    for c in 0..m {
        let mut up = u.to_vec();
        up[c] += h;
        let mut um = u.to_vec();
        um[c] -= h;
        plus.push(point_data_continued(space, spec, &up, &center.framed)?);
        minus.push(point_data_continued(space, spec, &um, &center.framed)?);
    }
    let mut diag = Vec::new();
    if diagonals && m == 2 {
        for (s0, s1) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
            let mut ud = u.to_vec();
            ud[0] += s0 * h;
            ud[1] += s1 * h;
            let reference = if s0 > 0.0 { &plus[0] } else { &minus[0] };
            diag.push(point_data_continued(space, spec, &ud, &reference.framed)?);
        }
    }
    Ok(StencilData {
        center,
        plus,
        minus,
        diag,
        h,
    })
}

impl StencilData {
    /// W_c[(a, b)] = <d_c e_a, e_b>.
    pub(crate) fn w(&self, space: &ProductSpace, c: usize) -> DMatrix<f64> {
        let m = self.center.framed.m();
        DMatrix::from_fn(m, m, |a, b| {
            let diff = (&self.plus[c].framed.tangent_frame[a]
                - &self.minus[c].framed.tangent_frame[a])
                / (2.0 * self.h);
            space.dot(&diff, &self.center.framed.tangent_frame[b])
        })
    }

    /// Omega_c[(alpha, beta)] = <d_c xi_alpha, xi_beta>.
    pub(crate) fn omega(&self, space: &ProductSpace, c: usize) -> DMatrix<f64> {
        let p = self.center.framed.p();
        DMatrix::from_fn(p, p, |al, be| {
            let diff = (&self.plus[c].framed.normal_frame[al]
                - &self.minus[c].framed.normal_frame[al])
                / (2.0 * self.h);
            space.dot(&diff, &self.center.framed.normal_frame[be])
        })
    }

    pub(crate) fn d_field(&self, c: usize, f: impl Fn(&PointData) -> DMatrix<f64>) -> DMatrix<f64> {
        (f(&self.plus[c]) - f(&self.minus[c])) / (2.0 * self.h)
    }

    /// Covariant derivative of a tangent-tangent form field (m x m).
    fn cov_tt(
        &self,
        space: &ProductSpace,
        c: usize,
        f: impl Fn(&PointData) -> DMatrix<f64>,
    ) -> DMatrix<f64> {
        let d = self.d_field(c, &f);
        let w = self.w(space, c);
        let center = f(&self.center);
        d - &w * &center - &center * w.transpose()
    }

    /// Covariant derivative of a normal-tangent field (p x m).
    fn cov_nt(
        &self,
        space: &ProductSpace,
        c: usize,
        f: impl Fn(&PointData) -> DMatrix<f64>,
    ) -> DMatrix<f64> {
        let d = self.d_field(c, &f);
        let w = self.w(space, c);
        let om = self.omega(space, c);
        let center = f(&self.center);
        d - om * &center - &center * w.transpose()
    }

    /// Covariant derivative of a normal-normal field (p x p).
    fn cov_nn(
        &self,
        space: &ProductSpace,
        c: usize,
        f: impl Fn(&PointData) -> DMatrix<f64>,
    ) -> DMatrix<f64> {
        let d = self.d_field(c, &f);
        let om = self.omega(space, c);
        let center = f(&self.center);
        d - &om * &center - &center * om.transpose()
    }

    pub(crate) fn diag_at(&self, s0: f64, s1: f64) -> &PointData {
        let idx = match (s0 > 0.0, s1 > 0.0) {
            (true, true) => 0,
            (true, false) => 1,
            (false, true) => 2,
            (false, false) => 3,
        };
        &self.diag[idx]
    }

    /// Bundle connection Omega_dir evaluated at the axis node
    /// u + sign * h * e_axis, using the diagonal nodes of the coherent
    /// stencil field (m = 2, dir != axis).
    pub(crate) fn omega_at_axis(
        &self,
        space: &ProductSpace,
        axis: usize,
        sign: f64,
        dir: usize,
    ) -> DMatrix<f64> {
        debug_assert!(axis != dir);
        let base = if sign > 0.0 { &self.plus[axis] } else { &self.minus[axis] };
        let (fwd, bwd) = if axis == 0 {
            (self.diag_at(sign, 1.0), self.diag_at(sign, -1.0))
        } else {
            (self.diag_at(1.0, sign), self.diag_at(-1.0, sign))
        };
        let p = base.framed.p();
        DMatrix::from_fn(p, p, |al, be| {
            let diff = (&fwd.framed.normal_frame[al] - &bwd.framed.normal_frame[al])
                / (2.0 * self.h);
            space.dot(&diff, &base.framed.normal_frame[be])
        })
    }
}

/// Covariant-derivative identities of R_i, S_i, T_i along each coordinate
/// direction, checked against their shape-operator right-hand sides.
pub fn moving_residuals(
    space: &ProductSpace,
    spec: &ImmersionSpec,
    u: &[f64],
    h: f64,
) -> Result<ResidualReport> {
    let stencil = stencil_data(space, spec, u, h)?;
    let center = &stencil.center;
    let m = center.framed.m();
    let l = space.factor_count();
    let mut report = ResidualReport::new();
    for i in 0..l {
        let mut res7 = 0.0f64;
        let mut res8 = 0.0f64;
        let mut res9 = 0.0f64;
        for c in 0..m {
            let wmat = center.alpha_row(c);
            let s_i = &center.st.s[i];
            let r_i = &center.st.r[i];
            let t_i = &center.st.t[i];

            let grad_r = stencil.cov_tt(space, c, |pd| pd.st.r[i].clone());
            let mixed = s_i.transpose() * &wmat;
            res7 = res7.max((grad_r - (&mixed + mixed.transpose())).norm());

            let grad_s = stencil.cov_nt(space, c, |pd| pd.st.s[i].clone());
            res8 = res8.max((grad_s - (t_i * &wmat - &wmat * r_i)).norm());

            let grad_t = stencil.cov_nn(space, c, |pd| pd.st.t[i].clone());
            res9 = res9.max((grad_t + s_i * wmat.transpose() + &wmat * s_i.transpose()).norm());
        }
        report.insert(format!("eq7_f{i}"), res7, TOL_MOVING);
        report.insert(format!("eq8_f{i}"), res8, TOL_MOVING);
        report.insert(format!("eq9_f{i}"), res9, TOL_MOVING);
    }
    Ok(report)
}

/// Gauss, Codazzi (both written forms) and Ricci equations at a point.
/// For curves every entry is vacuous and reported as a zero residual.
pub fn fundamental_residuals(
    space: &ProductSpace,
    spec: &ImmersionSpec,
    u: &[f64],
    h: f64,
) -> Result<ResidualReport> {
    let mut report = ResidualReport::new();
    let m = spec.intrinsic_dim();
    if m < 2 {
        report.insert("eq10_gauss", 0.0, TOL_GAUSS);
        report.insert("eq11_codazzi_normal", 0.0, TOL_CODAZZI);
        report.insert("eq11_codazzi_tangent", 0.0, TOL_CODAZZI);
        report.insert("eq12_ricci", 0.0, TOL_RICCI);
        return Ok(report);
    }
    let center_pd = point_data(space, spec, u)?;
    let stencil = stencil_data_from(space, spec, u, h, center_pd, true)?;
    let center = &stencil.center;
    let p = center.framed.p();
    let l = space.factor_count();
    let b_inv = &center.b_inv;
    let ks: Vec<f64> = space.factors().iter().map(|f| f.k).collect();

    // Gauss: intrinsic curvature against the wedge sum plus alpha terms.
    let rm = riemann(space, spec, u, h)?;
    let jet = &center.framed.jet;
    let g = DMatrix::from_fn(m, m, |a, b| space.dot(&jet.d1[a], &jet.d1[b]));
    let mut gauss = 0.0f64;
    for x in 0..m {
        for y in 0..m {
            for z in 0..m {
                for w in 0..m {
                    // Convert R^e_{abc} to frame arguments on every slot.
                    let mut lhs = 0.0;
                    for a in 0..m {
                        for b in 0..m {
                            for c in 0..m {
                                let low = rm.lowered(&g, a, b, c, 0) * b_inv[(w, 0)]
                                    + if m > 1 {
                                        rm.lowered(&g, a, b, c, 1) * b_inv[(w, 1)]
                                    } else {
                                        0.0
                                    };
                                lhs += b_inv[(x, a)] * b_inv[(y, b)] * b_inv[(z, c)] * low;
                            }
                        }
                    }
                    let mut rhs = 0.0;
                    for i in 0..l {
                        let r = &center.st.r[i];
                        rhs += ks[i] * (r[(y, z)] * r[(x, w)] - r[(x, z)] * r[(y, w)]);
                    }
                    for al in 0..p {
                        let hmat = &center.hf[al];
                        rhs += hmat[(x, w)] * hmat[(y, z)] - hmat[(y, w)] * hmat[(x, z)];
                    }
                    gauss = gauss.max((lhs - rhs).abs());
                }
            }
        }
    }
    report.insert("eq10_gauss", gauss, TOL_GAUSS);

    // Codazzi, normal form: antisymmetrized covariant derivative of alpha.
    // grad_hf[c][alpha] = (nabla_c alpha) coefficients with frame arguments.
    let mut grad_hf = vec![vec![DMatrix::zeros(m, m); p]; m];
    for c in 0..m {
        let w = stencil.w(space, c);
        let om = stencil.omega(space, c);
        for al in 0..p {
            let d = stencil.d_field(c, |pd| pd.hf[al].clone());
            let mut corr = d - &w * &center.hf[al] - &center.hf[al] * w.transpose();
            for be in 0..p {
                corr -= &center.hf[be] * om[(al, be)];
            }
            grad_hf[c][al] = corr;
        }
    }
    // Convert the derivative slot to frame arguments.
    let frame_grad = |x: usize, al: usize| -> DMatrix<f64> {
        let mut out = DMatrix::zeros(m, m);
        for c in 0..m {
            out += &grad_hf[c][al] * b_inv[(x, c)];
        }
        out
    };
    let mut codazzi_n = 0.0f64;
    for x in 0..m {
        for y in 0..m {
            for z in 0..m {
                for al in 0..p {
                    let lhs = frame_grad(x, al)[(y, z)] - frame_grad(y, al)[(x, z)];
                    let mut rhs = 0.0;
                    for i in 0..l {
                        let r = &center.st.r[i];
                        let s = &center.st.s[i];
                        rhs += ks[i] * (r[(y, z)] * s[(al, x)] - r[(x, z)] * s[(al, y)]);
                    }
                    codazzi_n = codazzi_n.max((lhs - rhs).abs());
                }
            }
        }
    }
    report.insert("eq11_codazzi_normal", codazzi_n, TOL_CODAZZI);

    // Codazzi, tangent form: antisymmetrized covariant derivative of the
    // shape operators.
    let mut codazzi_t = 0.0f64;
    {
        // grad_a[c][al] = (nabla_c A)_{xi_al} as a frame matrix.
        let mut grad_a = vec![vec![DMatrix::zeros(m, m); p]; m];
        for c in 0..m {
            let w = stencil.w(space, c);
            let om = stencil.omega(space, c);
            for al in 0..p {
                let d = stencil.d_field(c, |pd| pd.hf[al].clone());
                let mut corr = d - &w * &center.hf[al] - &center.hf[al] * w.transpose();
                for be in 0..p {
                    corr -= &center.hf[be] * om[(al, be)];
                }
                grad_a[c][al] = corr;
            }
        }
        let frame_grad_a = |x: usize, al: usize| -> DMatrix<f64> {
            let mut out = DMatrix::zeros(m, m);
            for c in 0..m {
                out += &grad_a[c][al] * b_inv[(x, c)];
            }
            out
        };
        for x in 0..m {
            for y in 0..m {
                for al in 0..p {
                    for a in 0..m {
                        let lhs =
                            frame_grad_a(y, al)[(x, a)] - frame_grad_a(x, al)[(y, a)];
                        let mut rhs = 0.0;
                        for i in 0..l {
                            let r = &center.st.r[i];
                            let s = &center.st.s[i];
                            rhs += ks[i] * (s[(al, y)] * r[(x, a)] - s[(al, x)] * r[(y, a)]);
                        }
                        codazzi_t = codazzi_t.max((lhs - rhs).abs());
                    }
                }
            }
        }
    }
    report.insert("eq11_codazzi_tangent", codazzi_t, TOL_CODAZZI);

    // Ricci: curvature of the normal connection from second differences of
    // the coherent stencil field.
    let mut ricci = 0.0f64;
    if p > 0 {
        let omega_c: Vec<DMatrix<f64>> = (0..m).map(|c| stencil.omega(space, c)).collect();
        let mut d_omega = vec![vec![DMatrix::zeros(p, p); m]; m];
        for c in 0..m {
            for d in 0..m {
                if c == d {
                    continue;
                }
                let op = stencil.omega_at_axis(space, c, 1.0, d);
                let omn = stencil.omega_at_axis(space, c, -1.0, d);
                d_omega[c][d] = (op - omn) / (2.0 * h);
            }
        }
        let mut rperp = vec![vec![DMatrix::zeros(p, p); m]; m];
        for c in 0..m {
            for d in 0..m {
                if c == d {
                    continue;
                }
                rperp[c][d] = &d_omega[c][d] - &d_omega[d][c] + &omega_c[d] * &omega_c[c]
                    - &omega_c[c] * &omega_c[d];
            }
        }
        for x in 0..m {
            for y in 0..m {
                let mut rf = DMatrix::zeros(p, p);
                for c in 0..m {
                    for d in 0..m {
                        rf += &rperp[c][d] * (b_inv[(x, c)] * b_inv[(y, d)]);
                    }
                }
                for be in 0..p {
                    for ga in 0..p {
                        let lhs = rf[(be, ga)];
                        let mut rhs = 0.0;
                        for z in 0..m {
                            rhs += center.hf[be][(y, z)] * center.hf[ga][(x, z)]
                                - center.hf[be][(x, z)] * center.hf[ga][(y, z)];
                        }
                        for i in 0..l {
                            let s = &center.st.s[i];
                            rhs += ks[i]
                                * (s[(be, y)] * s[(ga, x)] - s[(be, x)] * s[(ga, y)]);
                        }
                        ricci = ricci.max((lhs - rhs).abs());
                    }
                }
            }
        }
    }
    report.insert("eq12_ricci", ricci, TOL_RICCI);
    Ok(report)
}

/// Relations between the immersion into the product and its composition with
/// the inclusion into flat space: the radial normals have exact derivatives,
/// the normal frame is differentiated once.
pub fn lift_residuals(space: &ProductSpace, spec: &ImmersionSpec, u: &[f64]) -> Result<ResidualReport> {
    let h = DEFAULT_STEP;
    let center = point_data(space, spec, u)?;
    let m = center.framed.m();
    let p = center.framed.p();
    let jet = &center.framed.jet;
    let mut report = ResidualReport::new();

    for i in space.curved_set() {
        let k = space.factor(i).k;
        // d_c nu_i = -k_i pi_i(d1_c), exactly.
        let mut shape = 0.0f64;
        let mut conn = 0.0f64;
        for c in 0..m {
            let dnu = space.block_project(i, &jet.d1[c])? * (-k);
            for a in 0..m {
                let got = space.dot(&dnu, &center.framed.tangent_frame[a]);
                let want: f64 = -k
                    * (0..m)
                        .map(|x| center.b[(c, x)] * center.st.r[i][(x, a)])
                        .sum::<f64>();
                shape = shape.max((got - want).abs());
            }
            for al in 0..p {
                let got = space.dot(&dnu, &center.framed.normal_frame[al]);
                let want = -k
                    * space.block_inner(i, &jet.d1[c], &center.framed.normal_frame[al]);
                conn = conn.max((got - want).abs());
            }
        }
        report.insert(format!("eq13_shape_f{i}"), shape, TOL_LIFT);
        report.insert(format!("eq13_conn_f{i}"), conn, TOL_LIFT);
        let sym = (&center.st.r[i] - center.st.r[i].transpose()).norm();
        report.insert(format!("eq13_sym_f{i}"), sym, TOL_ALGEBRAIC);
    }

    if p > 0 {
        let stencil = frame_stencil(space, spec, u, h)?;
        let mut shape = 0.0f64;
        let mut conn = 0.0f64;
        for c in 0..m {
            for al in 0..p {
                let d = stencil.normal_frame_derivative(c, al);
                for a in 0..m {
                    let got = space.dot(&d, &center.framed.tangent_frame[a]);
                    let want: f64 = -(0..m)
                        .map(|x| center.b[(c, x)] * center.hf[al][(x, a)])
                        .sum::<f64>();
                    shape = shape.max((got - want).abs());
                }
                for j in space.curved_set() {
                    let kj = space.factor(j).k;
                    let got = space.dot(&d, &center.framed.nu[j]) / kj;
                    let want =
                        space.block_inner(j, &jet.d1[c], &center.framed.normal_frame[al]);
                    conn = conn.max((got - want).abs());
                }
            }
        }
        report.insert("eq14_shape", shape, TOL_LIFT);
        report.insert("eq14_conn", conn, TOL_LIFT);
    }
    Ok(report)
}
