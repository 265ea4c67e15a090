//! Desk-scale existence and uniqueness round trip: read bundle data off an
//! immersion, check the fundamental equations on the grid, rebuild the
//! immersion by integrating the flat total connection, and match the result
//! to the original up to an ambient isometry.
//!
//! The abstract bundle data lives in mixed frames: tangent quantities use the
//! coordinate basis of the grid (so the metric and Christoffel symbols
//! travel with the data), bundle quantities use an orthonormal frame of the
//! abstract normal bundle. The total bundle `TM + E + span{nu_i}` then has a
//! constant-signature Gram matrix per point, and the frame system
//! `dPhi = Phi . omega` is integrated with fixed-step RK4, one grid line at
//! a time, using cubic interpolation of the connection for the half steps.

use crate::ambient::{AmbientVector, ProductSpace, SpaceFormSpec};
use crate::error::{GeomError, Result};
use crate::grid::Grid;
use crate::jets::{christoffels, orthonormal_frames, ImmersionSpec};
use crate::report::ResidualReport;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub const TOL_POINTWISE: f64 = 1e-9;
pub const TOL_FIRST_ORDER: f64 = 1e-4;
pub const TOL_SECOND_ORDER: f64 = 1e-3;
pub const TOL_CLAIM_ALGEBRAIC: f64 = 1e-10;
pub const TOL_CLAIM_SPAN: f64 = 1e-9;
pub const TOL_CLAIM_PARALLEL: f64 = 1e-4;
pub const TOL_HOLONOMY: f64 = 1e-5;
pub const TOL_BLOCK_CONSTRAINT: f64 = 1e-6;
pub const TOL_ISO_ORTHOGONAL: f64 = 1e-9;
pub const TOL_ISO_COMMUTE: f64 = 1e-9;
pub const TOL_ISO_TRANSLATION: f64 = 1e-8;

/// Bundle data at one grid point. Tangent indices refer to the coordinate
/// basis; bundle indices to an orthonormal frame of the abstract bundle.
#[derive(Clone, Debug, PartialEq)]
pub struct BonnetPoint {
    /// Induced metric, m x m.
    pub g: DMatrix<f64>,
    /// Christoffel symbols, indexed by the upper index: gamma[c][(a,b)].
    pub gamma: Vec<DMatrix<f64>>,
    /// Bundle connection per direction: conn_e[c][(al,be)] = <D_c xi_al, xi_be>.
    pub conn_e: Vec<DMatrix<f64>>,
    /// Second fundamental form coefficients per bundle index: alpha_e[al][(a,b)].
    pub alpha_e: Vec<DMatrix<f64>>,
    /// Per-factor split tensors: r[i] is the symmetric form g(R_i ., .),
    /// s[i][(al,a)] = <S_i d_a, xi_al>, t[i] symmetric on the bundle frame.
    pub r: Vec<DMatrix<f64>>,
    pub s: Vec<DMatrix<f64>>,
    pub t: Vec<DMatrix<f64>>,
}

/// Gridded hypothesis data for the existence theorem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BonnetDataFile", into = "BonnetDataFile")]
pub struct BonnetData {
    pub factors: Vec<SpaceFormSpec>,
    pub m: usize,
    pub grid: Grid,
    /// Bundle rank: sum of the factor dimensions minus m.
    pub e_rank: usize,
    /// Signature index carried by the radial directions.
    pub index: usize,
    pub points: Vec<BonnetPoint>,
}

/// Flat serialized form: per-point row-major arrays in the documented order
/// g, gamma, conn_e, alpha_e, then per-factor r, s, t.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BonnetDataFile {
    pub factors: Vec<SpaceFormSpec>,
    pub m: usize,
    pub grid: Grid,
    pub e_rank: usize,
    pub index: usize,
    pub points: Vec<BonnetPointFile>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BonnetPointFile {
    pub g: Vec<f64>,
    pub gamma: Vec<f64>,
    pub conn_e: Vec<f64>,
    pub alpha_e: Vec<f64>,
    pub r: Vec<f64>,
    pub s: Vec<f64>,
    pub t: Vec<f64>,
}

fn flatten(mats: &[DMatrix<f64>]) -> Vec<f64> {
    let mut out = Vec::new();
    for m in mats {
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                out.push(m[(i, j)]);
            }
        }
    }
    out
}

fn unflatten(data: &[f64], count: usize, rows: usize, cols: usize) -> Result<Vec<DMatrix<f64>>> {
    if data.len() != count * rows * cols {
        return Err(GeomError::DimensionMismatch {
            expected: count * rows * cols,
            got: data.len(),
        });
    }
    Ok((0..count)
        .map(|k| {
            DMatrix::from_fn(rows, cols, |i, j| data[k * rows * cols + (i * cols + j)])
        })
        .collect())
}

impl From<BonnetData> for BonnetDataFile {
    fn from(d: BonnetData) -> Self {
        let points = d
            .points
            .iter()
            .map(|p| BonnetPointFile {
                g: flatten(std::slice::from_ref(&p.g)),
                gamma: flatten(&p.gamma),
                conn_e: flatten(&p.conn_e),
                alpha_e: flatten(&p.alpha_e),
                r: flatten(&p.r),
                s: flatten(&p.s),
                t: flatten(&p.t),
            })
            .collect();
        BonnetDataFile {
            factors: d.factors,
            m: d.m,
            grid: d.grid,
            e_rank: d.e_rank,
            index: d.index,
            points,
        }
    }
}

impl TryFrom<BonnetDataFile> for BonnetData {
    type Error = GeomError;

    fn try_from(f: BonnetDataFile) -> Result<Self> {
        let m = f.m;
        let p = f.e_rank;
        let l = f.factors.len();
        if f.points.len() != f.grid.len() {
            return Err(GeomError::InvalidScene(
                "bundle data does not cover the grid".into(),
            ));
        }
        let points = f
            .points
            .iter()
            .map(|pt| {
                Ok(BonnetPoint {
                    g: unflatten(&pt.g, 1, m, m)?.pop().unwrap(),
                    gamma: unflatten(&pt.gamma, m, m, m)?,
                    conn_e: unflatten(&pt.conn_e, m, p, p)?,
                    alpha_e: unflatten(&pt.alpha_e, p, m, m)?,
                    r: unflatten(&pt.r, l, m, m)?,
                    s: unflatten(&pt.s, l, p, m)?,
                    t: unflatten(&pt.t, l, p, p)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BonnetData {
            factors: f.factors,
            m: f.m,
            grid: f.grid,
            e_rank: f.e_rank,
            index: f.index,
            points,
        })
    }
}

impl BonnetData {
    pub fn space(&self) -> Result<ProductSpace> {
        ProductSpace::new(self.factors.clone())
    }

    pub fn curved_set(&self) -> Vec<usize> {
        (0..self.factors.len())
            .filter(|&i| self.factors[i].is_curved())
            .collect()
    }

    /// Total frame dimension m + e_rank + |J| (equal to the ambient N).
    pub fn frame_dim(&self) -> usize {
        self.m + self.e_rank + self.curved_set().len()
    }

    /// Constant-signature Gram matrix of the total frame at a point.
    pub fn total_gram(&self, flat: usize) -> DMatrix<f64> {
        let n = self.frame_dim();
        let mut gram = DMatrix::zeros(n, n);
        let m = self.m;
        for a in 0..m {
            for b in 0..m {
                gram[(a, b)] = self.points[flat].g[(a, b)];
            }
        }
        for al in 0..self.e_rank {
            gram[(m + al, m + al)] = 1.0;
        }
        for (slot, &j) in self.curved_set().iter().enumerate() {
            let idx = m + self.e_rank + slot;
            gram[(idx, idx)] = self.factors[j].k;
        }
        gram
    }
}

/// Differentiation weights of the Lagrange interpolant through `xs`,
/// evaluated at `x`.
fn fd_weights(xs: &[f64], x: f64) -> Vec<f64> {
    let n = xs.len();
    let mut w = vec![0.0; n];
    for i in 0..n {
        let denom: f64 = (0..n)
            .filter(|&k| k != i)
            .map(|k| xs[i] - xs[k])
            .product();
        let mut num = 0.0;
        for j in 0..n {
            if j == i {
                continue;
            }
            let prod: f64 = (0..n)
                .filter(|&k| k != i && k != j)
                .map(|k| x - xs[k])
                .product();
            num += prod;
        }
        w[i] = num / denom;
    }
    w
}

/// Read the hypothesis data off an actual immersion: the induced metric and
/// Christoffel symbols come from exact jets, the bundle frame is the grid
/// frame field (continued point to point so it is smooth across the grid),
/// and its connection comes from high-order finite differences of that
/// field along the grid.
pub fn extract_data(
    space: &ProductSpace,
    spec: &ImmersionSpec,
    grid: &Grid,
) -> Result<BonnetData> {
    let m = spec.intrinsic_dim();
    let l = space.factor_count();
    let e_rank: usize = space.factors().iter().map(|f| f.n).sum::<usize>() - m;
    let samples = crate::calculus::sample_grid_continued(space, spec, grid)?;
    for pd in &samples {
        if pd.framed.p() != e_rank {
            return Err(GeomError::FrameRank {
                achieved: pd.framed.p(),
                needed: e_rank,
            });
        }
    }
    // Bundle connection along each axis from the sampled frame field.
    let conn_field = |flat: usize, axis: usize| -> DMatrix<f64> {
        let idx = grid.unflatten(flat);
        let n_axis = grid.counts[axis];
        let window = n_axis.min(5);
        let lo = (idx[axis] as isize - 2).clamp(0, (n_axis - window) as isize) as usize;
        let xs: Vec<f64> = (0..window)
            .map(|j| grid.coordinate(axis, lo + j))
            .collect();
        let weights = fd_weights(&xs, grid.coordinate(axis, idx[axis]));
        let here = &samples[flat].framed;
        DMatrix::from_fn(e_rank, e_rank, |al, be| {
            let mut acc = 0.0;
            for (j, w) in weights.iter().enumerate() {
                let mut id = idx.clone();
                id[axis] = lo + j;
                let xi = &samples[grid.flatten(&id)].framed.normal_frame[al];
                acc += w * space.dot(xi, &here.normal_frame[be]);
            }
            acc
        })
    };
    let mut points = Vec::with_capacity(grid.len());
    for (flat, (u, pd)) in grid.points().iter().zip(&samples).enumerate() {
        let jet = &pd.framed.jet;
        let gamma = christoffels(space, spec, u)?;
        let conn_e: Vec<DMatrix<f64>> = (0..m).map(|c| conn_field(flat, c)).collect();
        let g = DMatrix::from_fn(m, m, |a, b| space.dot(&jet.d1[a], &jet.d1[b]));
        let mut r = Vec::with_capacity(l);
        let mut s = Vec::with_capacity(l);
        let mut t = Vec::with_capacity(l);
        for i in 0..l {
            r.push(DMatrix::from_fn(m, m, |a, b| {
                space.block_inner(i, &jet.d1[a], &jet.d1[b])
            }));
            s.push(DMatrix::from_fn(e_rank, m, |al, a| {
                space.block_inner(i, &jet.d1[a], &pd.framed.normal_frame[al])
            }));
            t.push(DMatrix::from_fn(e_rank, e_rank, |al, be| {
                space.block_inner(
                    i,
                    &pd.framed.normal_frame[al],
                    &pd.framed.normal_frame[be],
                )
            }));
        }
        points.push(BonnetPoint {
            g,
            gamma: gamma.gamma,
            conn_e,
            alpha_e: pd.alpha.alpha_f.clone(),
            r,
            s,
            t,
        });
    }
    Ok(BonnetData {
        factors: space.factors().to_vec(),
        m,
        grid: grid.clone(),
        e_rank,
        index: space.index(),
        points,
    })
}

/// Central difference of a matrix field along a grid axis: fourth order when
/// the stencil fits, second order otherwise, `None` on the boundary.
fn grid_derivative(
    grid: &Grid,
    data: &BonnetData,
    axis: usize,
    idx: &[usize],
    field: &dyn Fn(&BonnetPoint) -> DMatrix<f64>,
) -> Option<DMatrix<f64>> {
    let j = idx[axis];
    let n = grid.counts[axis];
    let h = grid.spacing(axis);
    let at = |jj: usize| {
        let mut id = idx.to_vec();
        id[axis] = jj;
        field(&data.points[grid.flatten(&id)])
    };
    if j >= 2 && j + 2 < n {
        Some((at(j - 2) - at(j - 1) * 8.0 + at(j + 1) * 8.0 - at(j + 2)) / (12.0 * h))
    } else if j >= 1 && j + 1 < n {
        Some((at(j + 1) - at(j - 1)) / (2.0 * h))
    } else {
        None
    }
}

/// Evaluate the fundamental equations on the gridded data: the pointwise
/// tensor identities at 1e-9, the first-derivative identities by grid
/// differences at 1e-4, Gauss and Ricci at 1e-3.
pub fn compatibility_check(data: &BonnetData) -> Result<ResidualReport> {
    let m = data.m;
    let p = data.e_rank;
    let l = data.factors.len();
    let ks: Vec<f64> = data.factors.iter().map(|f| f.k).collect();
    let grid = &data.grid;
    let mut report = ResidualReport::new();

    let mut eq4 = [0.0f64; 3];
    let mut eq5 = [0.0f64; 3];
    let mut eq6 = [0.0f64; 3];
    let mut eig = 0.0f64;
    for pt in &data.points {
        let g_inv = pt
            .g
            .clone()
            .try_inverse()
            .ok_or(GeomError::DegenerateMetric)?;
        let mut sum_r = DMatrix::zeros(m, m);
        let mut sum_s = DMatrix::zeros(p, m);
        let mut sum_t = DMatrix::zeros(p, p);
        for i in 0..l {
            sum_r += &pt.r[i];
            sum_s += &pt.s[i];
            sum_t += &pt.t[i];
        }
        eq4[0] = eq4[0].max((sum_r - &pt.g).norm());
        eq4[1] = eq4[1].max(sum_s.norm());
        eq4[2] = eq4[2].max((sum_t - DMatrix::identity(p, p)).norm());
        let eye_p = DMatrix::<f64>::identity(p, p);
        for i in 0..l {
            let rop = &g_inv * &pt.r[i];
            let eye = DMatrix::<f64>::identity(m, m);
            let sdag = &g_inv * pt.s[i].transpose();
            eq5[0] = eq5[0]
                .max((&sdag * &pt.s[i] - &rop * (&eye - &rop)).norm());
            eq5[1] = eq5[1].max((&pt.t[i] * &pt.s[i] - &pt.s[i] * (&eye - &rop)).norm());
            eq5[2] = eq5[2]
                .max((&pt.s[i] * &sdag - &pt.t[i] * (&eye_p - &pt.t[i])).norm());
            for j in 0..l {
                if i == j {
                    continue;
                }
                let ropj = &g_inv * &pt.r[j];
                eq6[0] = eq6[0].max((&sdag * &pt.s[j] + &rop * &ropj).norm());
                eq6[1] = eq6[1].max((&pt.t[i] * &pt.s[j] + &pt.s[i] * &ropj).norm());
                let sdagj = &g_inv * pt.s[j].transpose();
                eq6[2] = eq6[2].max((&pt.s[i] * &sdagj + &pt.t[i] * &pt.t[j]).norm());
            }
            // Eigenvalues of R_i with respect to g, and of T_i.
            let chol = pt
                .g
                .clone()
                .cholesky()
                .ok_or(GeomError::DegenerateMetric)?;
            let li = chol.l().try_inverse().ok_or(GeomError::DegenerateMetric)?;
            let sym = &li * &pt.r[i] * li.transpose();
            for &lam in sym.symmetric_eigen().eigenvalues.iter() {
                eig = eig.max((-lam).max(lam - 1.0).max(0.0));
            }
            for &lam in pt.t[i].clone().symmetric_eigen().eigenvalues.iter() {
                eig = eig.max((-lam).max(lam - 1.0).max(0.0));
            }
        }
    }
    report.insert("eq4_R", eq4[0], TOL_POINTWISE);
    report.insert("eq4_S", eq4[1], TOL_POINTWISE);
    report.insert("eq4_T", eq4[2], TOL_POINTWISE);
    report.insert("eq5_a", eq5[0], TOL_POINTWISE);
    report.insert("eq5_b", eq5[1], TOL_POINTWISE);
    report.insert("eq5_c", eq5[2], TOL_POINTWISE);
    report.insert("eq6_a", eq6[0], TOL_POINTWISE);
    report.insert("eq6_b", eq6[1], TOL_POINTWISE);
    report.insert("eq6_c", eq6[2], TOL_POINTWISE);
    report.insert("eig_range", eig, 1e-8);

    // Derivative identities on interior grid points.
    let mut eq7 = 0.0f64;
    let mut eq8 = 0.0f64;
    let mut eq9 = 0.0f64;
    let mut gauss = 0.0f64;
    let mut codazzi_n = 0.0f64;
    let mut codazzi_t = 0.0f64;
    let mut ricci = 0.0f64;
    for idx in grid.indices() {
        if !grid.is_interior(&idx, 1) {
            continue;
        }
        let flat = grid.flatten(&idx);
        let pt = &data.points[flat];
        let g_inv = pt.g.clone().try_inverse().ok_or(GeomError::DegenerateMetric)?;

        for c in 0..m {
            let gamma_c = &pt.gamma; // gamma[x][(a,b)] = Gamma^x_{ab}
            let omega_c = &pt.conn_e[c];
            for i in 0..l {
                // (7): covariant derivative of the R form.
                if let Some(dr) = grid_derivative(grid, data, c, &idx, &|q| q.r[i].clone()) {
                    let mut lhs = dr;
                    for a in 0..m {
                        for b in 0..m {
                            let mut corr = 0.0;
                            for x in 0..m {
                                corr += gamma_c[x][(c, a)] * pt.r[i][(x, b)]
                                    + gamma_c[x][(c, b)] * pt.r[i][(a, x)];
                            }
                            lhs[(a, b)] -= corr;
                        }
                    }
                    let mut rhs = DMatrix::zeros(m, m);
                    for a in 0..m {
                        for b in 0..m {
                            let mut acc = 0.0;
                            for al in 0..p {
                                acc += pt.alpha_e[al][(c, b)] * pt.s[i][(al, a)]
                                    + pt.alpha_e[al][(c, a)] * pt.s[i][(al, b)];
                            }
                            rhs[(a, b)] = acc;
                        }
                    }
                    eq7 = eq7.max((lhs - rhs).norm());
                }
                // (8): covariant derivative of S.
                if let Some(ds) = grid_derivative(grid, data, c, &idx, &|q| q.s[i].clone()) {
                    let mut lhs = ds;
                    for al in 0..p {
                        for b in 0..m {
                            let mut corr = 0.0;
                            for x in 0..m {
                                corr += gamma_c[x][(c, b)] * pt.s[i][(al, x)];
                            }
                            for be in 0..p {
                                corr += omega_c[(al, be)] * pt.s[i][(be, b)];
                            }
                            lhs[(al, b)] -= corr;
                        }
                    }
                    let rop = &g_inv * &pt.r[i];
                    let mut rhs = DMatrix::zeros(p, m);
                    for al in 0..p {
                        for b in 0..m {
                            let mut acc = 0.0;
                            for be in 0..p {
                                acc += pt.t[i][(al, be)] * pt.alpha_e[be][(c, b)];
                            }
                            for x in 0..m {
                                acc -= pt.alpha_e[al][(c, x)] * rop[(x, b)];
                            }
                            rhs[(al, b)] = acc;
                        }
                    }
                    eq8 = eq8.max((lhs - rhs).norm());
                }
                // (9): covariant derivative of T.
                if let Some(dt) = grid_derivative(grid, data, c, &idx, &|q| q.t[i].clone()) {
                    let mut lhs = dt;
                    for al in 0..p {
                        for be in 0..p {
                            let mut corr = 0.0;
                            for ga in 0..p {
                                corr += omega_c[(al, ga)] * pt.t[i][(ga, be)]
                                    + omega_c[(be, ga)] * pt.t[i][(al, ga)];
                            }
                            lhs[(al, be)] -= corr;
                        }
                    }
                    let mut rhs = DMatrix::zeros(p, p);
                    for al in 0..p {
                        for be in 0..p {
                            let mut acc = 0.0;
                            let a_be = &g_inv * &pt.alpha_e[be];
                            for x in 0..m {
                                acc -= pt.s[i][(al, x)] * a_be[(x, c)];
                            }
                            let sdag = &g_inv * pt.s[i].transpose();
                            for x in 0..m {
                                acc -= pt.alpha_e[al][(c, x)] * sdag[(x, be)];
                            }
                            rhs[(al, be)] = acc;
                        }
                    }
                    eq9 = eq9.max((lhs - rhs).norm());
                }
            }
        }

        if m >= 2 {
            // Gauss from the Christoffel field.
            let mut dgamma = vec![vec![DMatrix::zeros(m, m); m]; m];
            let mut ok = true;
            for e in 0..m {
                for x in 0..m {
                    match grid_derivative(grid, data, e, &idx, &|q| q.gamma[x].clone()) {
                        Some(d) => dgamma[e][x] = d,
                        None => ok = false,
                    }
                }
            }
            if ok {
                for a in 0..m {
                    for b in 0..m {
                        for cc in 0..m {
                            for dd in 0..m {
                                let mut up = vec![0.0; m];
                                for x in 0..m {
                                    let mut val =
                                        dgamma[a][x][(b, cc)] - dgamma[b][x][(a, cc)];
                                    for e in 0..m {
                                        val += pt.gamma[x][(a, e)] * pt.gamma[e][(b, cc)]
                                            - pt.gamma[x][(b, e)] * pt.gamma[e][(a, cc)];
                                    }
                                    up[x] = val;
                                }
                                let lhs: f64 =
                                    (0..m).map(|x| up[x] * pt.g[(x, dd)]).sum();
                                let mut rhs = 0.0;
                                for i in 0..l {
                                    rhs += ks[i]
                                        * (pt.r[i][(b, cc)] * pt.r[i][(a, dd)]
                                            - pt.r[i][(a, cc)] * pt.r[i][(b, dd)]);
                                }
                                for al in 0..p {
                                    rhs += pt.alpha_e[al][(b, cc)] * pt.alpha_e[al][(a, dd)]
                                        - pt.alpha_e[al][(a, cc)] * pt.alpha_e[al][(b, dd)];
                                }
                                gauss = gauss.max((lhs - rhs).abs());
                            }
                        }
                    }
                }
            }

            // Codazzi, both written forms.
            let nabla_h = |c: usize, al: usize| -> Option<DMatrix<f64>> {
                let d = grid_derivative(grid, data, c, &idx, &|q| q.alpha_e[al].clone())?;
                let mut out = d;
                for a in 0..m {
                    for b in 0..m {
                        let mut corr = 0.0;
                        for x in 0..m {
                            corr += pt.gamma[x][(c, a)] * pt.alpha_e[al][(x, b)]
                                + pt.gamma[x][(c, b)] * pt.alpha_e[al][(a, x)];
                        }
                        for be in 0..p {
                            corr += pt.conn_e[c][(al, be)] * pt.alpha_e[be][(a, b)];
                        }
                        out[(a, b)] -= corr;
                    }
                }
                Some(out)
            };
            for al in 0..p {
                let grads: Option<Vec<DMatrix<f64>>> =
                    (0..m).map(|c| nabla_h(c, al)).collect();
                if let Some(grads) = grads {
                    for c in 0..m {
                        for a in 0..m {
                            for b in 0..m {
                                let lhs = grads[c][(a, b)] - grads[a][(c, b)];
                                let mut rhs = 0.0;
                                for i in 0..l {
                                    rhs += ks[i]
                                        * (pt.r[i][(a, b)] * pt.s[i][(al, c)]
                                            - pt.r[i][(c, b)] * pt.s[i][(al, a)]);
                                }
                                codazzi_n = codazzi_n.max((lhs - rhs).abs());
                                // Tangent form, contracted with the metric.
                                let mut rhs_t = 0.0;
                                for i in 0..l {
                                    rhs_t += ks[i]
                                        * (pt.s[i][(al, a)] * pt.r[i][(c, b)]
                                            - pt.s[i][(al, c)] * pt.r[i][(a, b)]);
                                }
                                codazzi_t = codazzi_t.max((-lhs - rhs_t).abs());
                            }
                        }
                    }
                }
            }

            // Ricci from the bundle connection field.
            if p > 0 {
                let mut d_omega = vec![vec![DMatrix::zeros(p, p); m]; m];
                let mut ok = true;
                for c in 0..m {
                    for d in 0..m {
                        match grid_derivative(grid, data, c, &idx, &|q| q.conn_e[d].clone()) {
                            Some(v) => d_omega[c][d] = v,
                            None => ok = false,
                        }
                    }
                }
                if ok {
                    for c in 0..m {
                        for d in 0..m {
                            let re = &d_omega[c][d] - &d_omega[d][c]
                                + &pt.conn_e[d] * &pt.conn_e[c]
                                - &pt.conn_e[c] * &pt.conn_e[d];
                            for al in 0..p {
                                for ga in 0..p {
                                    let lhs = re[(al, ga)];
                                    let mut rhs = 0.0;
                                    let a_al = &g_inv * &pt.alpha_e[al];
                                    for x in 0..m {
                                        rhs += pt.alpha_e[ga][(c, x)] * a_al[(x, d)]
                                            - pt.alpha_e[ga][(d, x)] * a_al[(x, c)];
                                    }
                                    for i in 0..l {
                                        rhs += ks[i]
                                            * (pt.s[i][(al, d)] * pt.s[i][(ga, c)]
                                                - pt.s[i][(al, c)] * pt.s[i][(ga, d)]);
                                    }
                                    ricci = ricci.max((lhs - rhs).abs());
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    report.insert("eq7", eq7, TOL_FIRST_ORDER);
    report.insert("eq8", eq8, TOL_FIRST_ORDER);
    report.insert("eq9", eq9, TOL_FIRST_ORDER);
    report.insert("eq10_gauss", gauss, TOL_SECOND_ORDER);
    report.insert("eq11_codazzi_normal", codazzi_n, TOL_FIRST_ORDER);
    report.insert("eq11_codazzi_tangent", codazzi_t, TOL_FIRST_ORDER);
    report.insert("eq12_ricci", ricci, TOL_SECOND_ORDER);
    Ok(report)
}

/// The assembled Whitney-sum structure: the total connection and the
/// parallel factor projections per grid point.
#[derive(Clone, Debug)]
pub struct WhitneyData {
    pub frame_dim: usize,
    /// omega[flat][axis]: total connection matrix in the frame
    /// (coordinate tangent, bundle frame, radial slots).
    pub omega: Vec<Vec<DMatrix<f64>>>,
    /// p_mats[flat][factor]: P_i on the total bundle.
    pub p_mats: Vec<Vec<DMatrix<f64>>>,
    pub report: ResidualReport,
}

/// Build the total connection and factor projections, verifying that the
/// projections are an orthogonal parallel family summing to the identity.
pub fn build_whitney(data: &BonnetData) -> Result<WhitneyData> {
    let m = data.m;
    let p = data.e_rank;
    let l = data.factors.len();
    let curved = data.curved_set();
    let n = data.frame_dim();
    let ks: Vec<f64> = data.factors.iter().map(|f| f.k).collect();
    let grid = &data.grid;

    let mut omega_all = Vec::with_capacity(data.points.len());
    let mut p_all = Vec::with_capacity(data.points.len());
    let mut claim4 = 0.0f64;
    let mut claim6 = 0.0f64;
    let mut claim8 = 0.0f64;

    for (flat, pt) in data.points.iter().enumerate() {
        let g_inv = pt.g.clone().try_inverse().ok_or(GeomError::DegenerateMetric)?;
        // Total connection per direction.
        let mut omegas = Vec::with_capacity(m);
        for c in 0..m {
            let mut om = DMatrix::zeros(n, n);
            // Column: tangent basis vector b.
            for b in 0..m {
                for a in 0..m {
                    om[(a, b)] = pt.gamma[a][(c, b)];
                }
                for al in 0..p {
                    om[(m + al, b)] = pt.alpha_e[al][(c, b)];
                }
                for (slot, &j) in curved.iter().enumerate() {
                    om[(m + p + slot, b)] = pt.r[j][(c, b)];
                }
            }
            // Column: bundle frame vector beta.
            for be in 0..p {
                let a_be = &g_inv * &pt.alpha_e[be];
                for a in 0..m {
                    om[(a, m + be)] = -a_be[(a, c)];
                }
                for al in 0..p {
                    om[(m + al, m + be)] = pt.conn_e[c][(be, al)];
                }
                for (slot, &j) in curved.iter().enumerate() {
                    om[(m + p + slot, m + be)] = pt.s[j][(be, c)];
                }
            }
            // Column: radial slot j.
            for (slot, &j) in curved.iter().enumerate() {
                let rop = &g_inv * &pt.r[j];
                for a in 0..m {
                    om[(a, m + p + slot)] = -ks[j] * rop[(a, c)];
                }
                for al in 0..p {
                    om[(m + al, m + p + slot)] = -ks[j] * pt.s[j][(al, c)];
                }
            }
            omegas.push(om);
        }

        // Factor projections.
        let mut ps = Vec::with_capacity(l);
        for i in 0..l {
            let mut pm = DMatrix::zeros(n, n);
            let rop = &g_inv * &pt.r[i];
            let sdag = &g_inv * pt.s[i].transpose();
            for b in 0..m {
                for a in 0..m {
                    pm[(a, b)] = rop[(a, b)];
                }
                for al in 0..p {
                    pm[(m + al, b)] = pt.s[i][(al, b)];
                }
            }
            for be in 0..p {
                for a in 0..m {
                    pm[(a, m + be)] = sdag[(a, be)];
                }
                for al in 0..p {
                    pm[(m + al, m + be)] = pt.t[i][(al, be)];
                }
            }
            for (slot, &j) in curved.iter().enumerate() {
                if j == i {
                    pm[(m + p + slot, m + p + slot)] = 1.0;
                }
            }
            ps.push(pm);
        }

        // Claims 4, 6, 8 algebraically.
        let gram = data.total_gram(flat);
        let mut sum = DMatrix::zeros(n, n);
        for i in 0..l {
            for j in 0..l {
                let prod = &ps[i] * &ps[j];
                let expect = if i == j { ps[i].clone() } else { DMatrix::zeros(n, n) };
                claim4 = claim4.max((prod - expect).norm());
            }
            let gp = &gram * &ps[i];
            claim6 = claim6.max((&gp - gp.transpose()).norm());
            sum += &ps[i];
        }
        claim8 = claim8.max((sum - DMatrix::identity(n, n)).norm());

        omega_all.push(omegas);
        p_all.push(ps);
    }

    // Claim 5: parallelism of the projections, by grid differences.
    let mut claim5 = 0.0f64;
    for idx in grid.indices() {
        if !grid.is_interior(&idx, 1) {
            continue;
        }
        let flat = grid.flatten(&idx);
        for c in 0..m {
            for i in 0..l {
                let h = grid.spacing(c);
                let mut ip = idx.clone();
                ip[c] += 1;
                let mut im = idx.clone();
                im[c] -= 1;
                let dp = (&p_all[grid.flatten(&ip)][i] - &p_all[grid.flatten(&im)][i])
                    / (2.0 * h);
                let om = &omega_all[flat][c];
                let res = dp + om * &p_all[flat][i] - &p_all[flat][i] * om;
                claim5 = claim5.max(res.norm());
            }
        }
    }

    let mut report = ResidualReport::new();
    report.insert("claim4_projections", claim4, TOL_CLAIM_ALGEBRAIC);
    report.insert("claim5_parallel", claim5, TOL_CLAIM_PARALLEL);
    report.insert("claim6_symmetric", claim6, TOL_CLAIM_ALGEBRAIC);
    report.insert("claim8_spanning", claim8, TOL_CLAIM_SPAN);
    if !report.pass() {
        let (label, _) = report.worst().unwrap();
        let entry = report.get(label).unwrap();
        return Err(GeomError::Incompatible {
            label: label.to_string(),
            residual: entry.residual,
            tol: entry.tol,
        });
    }
    Ok(WhitneyData {
        frame_dim: n,
        omega: omega_all,
        p_mats: p_all,
        report,
    })
}

/// Position and full frame of an immersion (or a reconstruction) at a grid
/// point: columns are the coordinate tangents, the bundle frame, and the
/// radial normals of the curved factors.
#[derive(Clone, Debug)]
pub struct FrameSample {
    pub position: AmbientVector,
    pub frame: DMatrix<f64>,
}

/// Sample an actual immersion into frame samples for matching.
pub fn immersion_frame_samples(
    space: &ProductSpace,
    spec: &ImmersionSpec,
    grid: &Grid,
) -> Result<Vec<FrameSample>> {
    let n = space.total_dim();
    let m = spec.intrinsic_dim();
    let curved = space.curved_set();
    let mut out = Vec::with_capacity(grid.len());
    for u in grid.points() {
        let jet = spec.eval_jet(&u)?;
        let framed = orthonormal_frames(space, &jet)?;
        let p = framed.p();
        let mut frame = DMatrix::zeros(n, m + p + curved.len());
        for a in 0..m {
            frame.set_column(a, &jet.d1[a]);
        }
        for al in 0..p {
            frame.set_column(m + al, &framed.normal_frame[al]);
        }
        for (slot, &j) in curved.iter().enumerate() {
            frame.set_column(m + p + slot, &framed.nu[j]);
        }
        out.push(FrameSample {
            position: jet.value,
            frame,
        });
    }
    Ok(out)
}

/// Result of integrating the frame system and normalizing the position.
#[derive(Clone, Debug)]
pub struct ReconstructionResult {
    pub samples: Vec<FrameSample>,
    /// Drift of the radial first integrals across the grid.
    pub zeta_residual: f64,
    /// Worst per-block model-constraint defect after the constant shift.
    pub constraint_residual: f64,
    /// Worst plaquette transport mismatch (zero on 1D grids).
    pub holonomy_residual: f64,
    /// Row-major versus column-major integration mismatch (zero on 1D).
    pub path_agreement: f64,
}

/// Four-point Lagrange interpolation of matrix samples at fractional node
/// position `t`.
fn interp_matrix(values: &[DMatrix<f64>], t: f64) -> DMatrix<f64> {
    let n = values.len();
    if n == 1 {
        return values[0].clone();
    }
    let j = t.floor() as isize;
    let lo = j
        .saturating_sub(1)
        .clamp(0, n.saturating_sub(4).max(0) as isize) as usize;
    let window = (n - lo).min(4);
    let mut out = DMatrix::zeros(values[0].nrows(), values[0].ncols());
    for a in 0..window {
        let xa = (lo + a) as f64;
        let mut w = 1.0;
        for b in 0..window {
            if a != b {
                let xb = (lo + b) as f64;
                w *= (t - xb) / (xa - xb);
            }
        }
        out += &values[lo + a] * w;
    }
    out
}

/// One RK4 step of the combined system dY = Y omega(t) dt, dF = Y e_axis dt,
/// over a single grid cell; `omega_line` holds the connection at the nodes
/// of the line, `j` the starting node, `h` the real step.
fn rk4_step(
    y: &DMatrix<f64>,
    f: &DVector<f64>,
    omega_line: &[DMatrix<f64>],
    j: usize,
    h: f64,
    axis_col: usize,
) -> (DMatrix<f64>, DVector<f64>) {
    let om = |t: f64| interp_matrix(omega_line, t);
    let deriv = |y: &DMatrix<f64>, om_t: &DMatrix<f64>| (y * om_t, y.column(axis_col).into_owned());
    let t0 = j as f64;
    let o1 = om(t0);
    let o2 = om(t0 + 0.5);
    let o4 = om(t0 + 1.0);
    let (k1y, k1f) = deriv(y, &o1);
    let y2 = y + &k1y * (h / 2.0);
    let (k2y, k2f) = deriv(&y2, &o2);
    let y3 = y + &k2y * (h / 2.0);
    let (k3y, k3f) = deriv(&y3, &o2);
    let y4 = y + &k3y * h;
    let (k4y, k4f) = deriv(&y4, &o4);
    let ynext = y + (k1y + k2y * 2.0 + k3y * 2.0 + k4y) * (h / 6.0);
    let fnext = f + (k1f + k2f * 2.0 + k3f * 2.0 + k4f) * (h / 6.0);
    (ynext, fnext)
}

/// Integrate the frame system along one grid line (all nodes of `path`),
/// starting from the given state at the first node.
fn integrate_line(
    whitney: &WhitneyData,
    grid: &Grid,
    path: &[usize],
    axis: usize,
    y0: DMatrix<f64>,
    f0: DVector<f64>,
) -> Vec<(DMatrix<f64>, DVector<f64>)> {
    let h = grid.spacing(axis);
    let omega_line: Vec<DMatrix<f64>> =
        path.iter().map(|&flat| whitney.omega[flat][axis].clone()).collect();
    let mut out = Vec::with_capacity(path.len());
    out.push((y0, f0));
    for j in 0..path.len() - 1 {
        let (y, f) = &out[j];
        out.push(rk4_step(y, f, &omega_line, j, h, axis));
    }
    out
}

fn line_path(grid: &Grid, axis: usize, fixed: &[usize]) -> Vec<usize> {
    let n = grid.counts[axis];
    (0..n)
        .map(|j| {
            let mut idx = fixed.to_vec();
            idx[axis] = j;
            grid.flatten(&idx)
        })
        .collect()
}

/// Build the canonical initial frame: an ambient frame whose Gram matrix is
/// the total bundle Gram, with timelike slots assigned to the Lorentzian
/// block axes in factor order.
fn canonical_gauge(data: &BonnetData, space: &ProductSpace) -> Result<DMatrix<f64>> {
    let n = data.frame_dim();
    let m = data.m;
    let p = data.e_rank;
    let curved = data.curved_set();
    // Signature of the abstract frame slots.
    let mut eps = vec![1.0f64; n];
    for (slot, &j) in curved.iter().enumerate() {
        if data.factors[j].k < 0.0 {
            eps[m + p + slot] = -1.0;
        }
    }
    // Ambient axes by causal character.
    let signs = space.signs();
    let timelike: Vec<usize> = (0..n).filter(|&j| signs[j] < 0.0).collect();
    let spacelike: Vec<usize> = (0..n).filter(|&j| signs[j] > 0.0).collect();
    if timelike.len() != eps.iter().filter(|&&e| e < 0.0).count() {
        return Err(GeomError::InvalidScene(
            "bundle index does not match the ambient signature".into(),
        ));
    }
    let mut q = DMatrix::zeros(n, n);
    let (mut it, mut is) = (0usize, 0usize);
    for (slot, &e) in eps.iter().enumerate() {
        let axis = if e < 0.0 {
            it += 1;
            timelike[it - 1]
        } else {
            is += 1;
            spacelike[is - 1]
        };
        q[(axis, slot)] = 1.0;
    }
    // Scale: Gram of the columns must equal the total Gram at the base.
    let chol = data.points[0]
        .g
        .clone()
        .cholesky()
        .ok_or(GeomError::DegenerateMetric)?;
    let mut b = DMatrix::zeros(n, n);
    let lt = chol.l().transpose();
    for a in 0..m {
        for c in 0..m {
            b[(a, c)] = lt[(a, c)];
        }
    }
    for al in 0..p {
        b[(m + al, m + al)] = 1.0;
    }
    for (slot, &j) in curved.iter().enumerate() {
        b[(m + p + slot, m + p + slot)] = data.factors[j].k.abs().sqrt();
    }
    Ok(q * b)
}

fn gram_defect(space: &ProductSpace, y: &DMatrix<f64>, gram: &DMatrix<f64>) -> f64 {
    let n = y.ncols();
    let mut d = DMatrix::zeros(n, n);
    for a in 0..n {
        for b in 0..n {
            let mut acc = 0.0;
            for j in 0..y.nrows() {
                acc += space.signs()[j] * y[(j, a)] * y[(j, b)];
            }
            d[(a, b)] = acc - gram[(a, b)];
        }
    }
    d.norm()
}

/// Integrate the flat frame system over the grid and normalize the result to
/// the product. The optional gauge replaces the canonical initial frame; it
/// must have the same Gram matrix.
pub fn reconstruct(data: &BonnetData, gauge: Option<&DMatrix<f64>>) -> Result<ReconstructionResult> {
    let space = data.space()?;
    let whitney = build_whitney(data)?;
    let n = data.frame_dim();
    if n != space.total_dim() {
        return Err(GeomError::DimensionMismatch {
            expected: space.total_dim(),
            got: n,
        });
    }
    let gram0 = data.total_gram(0);
    let y0 = match gauge {
        Some(y) => {
            let defect = gram_defect(&space, y, &gram0);
            if defect > 1e-8 {
                return Err(GeomError::NoIsometry(defect));
            }
            y.clone()
        }
        None => canonical_gauge(data, &space)?,
    };
    let f0 = DVector::zeros(n);
    let grid = &data.grid;

    // Row-major sweep: along axis 0 first, then each line along the last axis.
    let sweep = |primary: usize| -> Vec<(DMatrix<f64>, DVector<f64>)> {
        let mut states: Vec<Option<(DMatrix<f64>, DVector<f64>)>> = vec![None; grid.len()];
        match grid.dims() {
            1 => {
                let path = line_path(grid, 0, &[0]);
                for (j, st) in integrate_line(&whitney, grid, &path, 0, y0.clone(), f0.clone())
                    .into_iter()
                    .enumerate()
                {
                    states[path[j]] = Some(st);
                }
            }
            2 => {
                let secondary = 1 - primary;
                let spine = line_path(grid, primary, &[0, 0]);
                let spine_states =
                    integrate_line(&whitney, grid, &spine, primary, y0.clone(), f0.clone());
                for (jp, st) in spine_states.into_iter().enumerate() {
                    let mut fixed = [0usize, 0usize];
                    fixed[primary] = jp;
                    let path = line_path(grid, secondary, &fixed);
                    for (js, st2) in
                        integrate_line(&whitney, grid, &path, secondary, st.0.clone(), st.1.clone())
                            .into_iter()
                            .enumerate()
                    {
                        states[path[js]] = Some(st2);
                    }
                }
            }
            _ => unreachable!(),
        }
        states.into_iter().map(|s| s.unwrap()).collect()
    };
    let states = sweep(0);
    let path_agreement = if grid.dims() == 2 {
        let alt = sweep(1);
        states
            .iter()
            .zip(&alt)
            .map(|((y1, f1), (y2, f2))| ((y1 - y2).norm()).max((f1 - f2).norm()))
            .fold(0.0f64, f64::max)
    } else {
        0.0
    };

    // Plaquette holonomy on 2D grids.
    let mut holonomy = 0.0f64;
    if grid.dims() == 2 {
        for i in 0..grid.counts[0] - 1 {
            for j in 0..grid.counts[1] - 1 {
                let c00 = grid.flatten(&[i, j]);
                let (y, f) = &states[c00];
                // Right (axis 1) then up (axis 0).
                let row = line_path(grid, 1, &[i, 0]);
                let (y1, f1) = rk4_step(
                    y,
                    f,
                    &row.iter().map(|&fl| whitney.omega[fl][1].clone()).collect::<Vec<_>>(),
                    j,
                    grid.spacing(1),
                    1,
                );
                let col_r = line_path(grid, 0, &[0, j + 1]);
                let (y_ru, _) = rk4_step(
                    &y1,
                    &f1,
                    &col_r.iter().map(|&fl| whitney.omega[fl][0].clone()).collect::<Vec<_>>(),
                    i,
                    grid.spacing(0),
                    0,
                );
                // Up then right.
                let col = line_path(grid, 0, &[0, j]);
                let (y2, f2) = rk4_step(
                    y,
                    f,
                    &col.iter().map(|&fl| whitney.omega[fl][0].clone()).collect::<Vec<_>>(),
                    i,
                    grid.spacing(0),
                    0,
                );
                let row_u = line_path(grid, 1, &[i + 1, 0]);
                let (y_ur, _) = rk4_step(
                    &y2,
                    &f2,
                    &row_u.iter().map(|&fl| whitney.omega[fl][1].clone()).collect::<Vec<_>>(),
                    j,
                    grid.spacing(1),
                    1,
                );
                let scale = y.norm().max(1.0);
                holonomy = holonomy.max((y_ru - y_ur).norm() / scale);
            }
        }
        if holonomy > TOL_HOLONOMY {
            return Err(GeomError::NotIntegrable(holonomy));
        }
    }

    // Radial first integrals and the constant shift.
    let curved = data.curved_set();
    let m = data.m;
    let p = data.e_rank;
    let mut zeta0: Vec<AmbientVector> = Vec::new();
    let mut zeta_residual = 0.0f64;
    for (slot, &i) in curved.iter().enumerate() {
        let k = data.factors[i].k;
        let col = m + p + slot;
        let mut base = None;
        for (flat, (y, f)) in states.iter().enumerate() {
            let _ = flat;
            let zeta = {
                let mut z = space.block_project(i, f)?;
                z += y.column(col).into_owned() / k;
                z
            };
            match &base {
                None => base = Some(zeta),
                Some(b) => zeta_residual = zeta_residual.max((&zeta - b).norm()),
            }
        }
        zeta0.push(base.unwrap());
    }
    let mut shift = space.zero_vector();
    for z in &zeta0 {
        shift += z;
    }

    let mut constraint = 0.0f64;
    let mut samples = Vec::with_capacity(states.len());
    for (y, f) in &states {
        let pos = f - &shift;
        for &i in &curved {
            let k = data.factors[i].k;
            let q = space.block_inner(i, &pos, &pos);
            constraint = constraint.max((q - 1.0 / k).abs());
        }
        samples.push(FrameSample {
            position: pos,
            frame: y.clone(),
        });
    }
    if constraint > TOL_BLOCK_CONSTRAINT {
        return Err(GeomError::Renormalization(format!(
            "block constraint defect {constraint:.3e} after the radial shift"
        )));
    }
    Ok(ReconstructionResult {
        samples,
        zeta_residual,
        constraint_residual: constraint,
        holonomy_residual: holonomy,
        path_agreement,
    })
}

/// A recovered ambient isometry: a block-preserving orthogonal map and a
/// translation supported on the flat blocks.
#[derive(Clone, Debug)]
pub struct IsometryMatch {
    pub b: DMatrix<f64>,
    pub c: DVector<f64>,
    pub max_pointwise_error: f64,
    pub report: ResidualReport,
}

/// Solve the ambient isometry from the frame correspondence at the base
/// vertex and verify it globally.
pub fn match_isometry(
    space: &ProductSpace,
    reference: &[FrameSample],
    target: &[FrameSample],
) -> Result<IsometryMatch> {
    if reference.len() != target.len() || reference.is_empty() {
        return Err(GeomError::DimensionMismatch {
            expected: reference.len(),
            got: target.len(),
        });
    }
    let n = space.total_dim();
    let yf = &reference[0].frame;
    let yg = &target[0].frame;
    if yf.ncols() != n || yg.ncols() != n {
        return Err(GeomError::DimensionMismatch {
            expected: n,
            got: yf.ncols(),
        });
    }
    // The correspondence must be an isometry of the frame Gram matrices.
    let gram = |y: &DMatrix<f64>| {
        DMatrix::from_fn(n, n, |a, b| {
            (0..n)
                .map(|j| space.signs()[j] * y[(j, a)] * y[(j, b)])
                .sum::<f64>()
        })
    };
    let mismatch = (gram(yf) - gram(yg)).norm();
    if mismatch > 1e-6 {
        return Err(GeomError::NoIsometry(mismatch));
    }
    let b = yg * yf
        .clone()
        .try_inverse()
        .ok_or(GeomError::DegenerateMetric)?;

    let mut report = ResidualReport::new();
    // Orthogonality with respect to the ambient signature.
    let d = DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            space.signs()[i]
        } else {
            0.0
        }
    });
    report.insert(
        "iso_orthogonal",
        (b.transpose() * &d * &b - &d).norm(),
        TOL_ISO_ORTHOGONAL,
    );
    // Block commutation: off-diagonal blocks vanish.
    let mut commute = 0.0f64;
    for i in 0..space.factor_count() {
        for j in 0..space.factor_count() {
            if i == j {
                continue;
            }
            let ri = space.block_range(i);
            let rj = space.block_range(j);
            let block = b.view((ri.start, rj.start), (ri.len(), rj.len()));
            commute = commute.max(block.norm());
        }
    }
    report.insert("iso_block_commute", commute, TOL_ISO_COMMUTE);

    let c = &target[0].position - &b * &reference[0].position;
    let mut curved_translation = 0.0f64;
    for i in space.curved_set() {
        curved_translation = curved_translation.max(space.block_project(i, &c)?.norm());
    }
    report.insert(
        "iso_curved_translation",
        curved_translation,
        TOL_ISO_TRANSLATION,
    );

    let mut max_err = 0.0f64;
    for (f, g) in reference.iter().zip(target) {
        max_err = max_err.max((&g.position - &b * &f.position - &c).norm());
    }
    Ok(IsometryMatch {
        b,
        c,
        max_pointwise_error: max_err,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jets::FixedFactor;

    fn circle_pair_space() -> ProductSpace {
        ProductSpace::new(vec![
            SpaceFormSpec { n: 1, k: 1.0 },
            SpaceFormSpec { n: 1, k: 1.0 },
        ])
        .unwrap()
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

    fn torus() -> ImmersionSpec {
        ImmersionSpec::Product {
            parts: vec![
                ImmersionSpec::Circle { k: 1.0, phase: 0.0 },
                ImmersionSpec::Circle { k: 1.0, phase: 0.0 },
            ],
        }
    }

    #[test]
    fn extracted_slice_data_has_expected_shape() {
        let space = circle_pair_space();
        let spec = ImmersionSpec::Slice {
            at: 1,
            fixed: vec![FixedFactor {
                n: 1,
                k: 1.0,
                point: vec![1.0, 0.0],
            }],
            inner: Box::new(ImmersionSpec::Circle { k: 1.0, phase: 0.0 }),
        };
        let grid = Grid::new(vec![(0.0, 3.0)], vec![11]).unwrap();
        let data = extract_data(&space, &spec, &grid).unwrap();
        assert_eq!(data.e_rank, 1);
        assert_eq!(data.frame_dim(), 4);
        for pt in &data.points {
            // alpha vanishes, R constant.
            assert!(pt.alpha_e[0].norm() <= 1e-12);
            assert!((pt.r[1][(0, 0)] - 1.0).abs() <= 1e-12);
        }
        let report = compatibility_check(&data).unwrap();
        assert!(report.pass(), "{report}");
    }

    #[test]
    fn extracted_weighted_sum_data_is_compatible() {
        let space = circle_pair_space();
        let grid = Grid::new(vec![(0.0, 4.0)], vec![41]).unwrap();
        let data = extract_data(&space, &weighted_circle_sum(), &grid).unwrap();
        for pt in &data.points {
            assert!((pt.r[0][(0, 0)] - 0.5).abs() <= 1e-12);
        }
        let report = compatibility_check(&data).unwrap();
        assert!(report.pass(), "{report}");
    }

    #[test]
    fn zeroed_alpha_breaks_gauss() {
        let space = ProductSpace::new(vec![
            SpaceFormSpec { n: 2, k: 1.0 },
            SpaceFormSpec { n: 2, k: 1.0 },
        ])
        .unwrap();
        let spec = ImmersionSpec::Product {
            parts: vec![
                ImmersionSpec::SphereCircle { k: 1.0, polar: 1.0 },
                ImmersionSpec::SphereCircle { k: 1.0, polar: 0.7 },
            ],
        };
        let grid = Grid::new(vec![(0.0, 1.5), (0.0, 1.5)], vec![7, 7]).unwrap();
        let mut data = extract_data(&space, &spec, &grid).unwrap();
        for pt in &mut data.points {
            for h in &mut pt.alpha_e {
                *h *= 0.0;
            }
        }
        let report = compatibility_check(&data).unwrap();
        assert!(!report.get("eq10_gauss").unwrap().pass, "{report}");
    }

    #[test]
    fn scaled_r_breaks_completeness() {
        let space = circle_pair_space();
        let grid = Grid::new(vec![(0.0, 3.0)], vec![21]).unwrap();
        let mut data = extract_data(&space, &weighted_circle_sum(), &grid).unwrap();
        for pt in &mut data.points {
            pt.r[0] *= 1.1;
        }
        let report = compatibility_check(&data).unwrap();
        let entry = report.get("eq4_R").unwrap();
        assert!(!entry.pass);
        assert!((entry.residual - 0.05).abs() <= 1e-9);
    }

    #[test]
    fn whitney_projections_on_slice_data() {
        let space = circle_pair_space();
        let spec = ImmersionSpec::Slice {
            at: 1,
            fixed: vec![FixedFactor {
                n: 1,
                k: 1.0,
                point: vec![1.0, 0.0],
            }],
            inner: Box::new(ImmersionSpec::Circle { k: 1.0, phase: 0.0 }),
        };
        let grid = Grid::new(vec![(0.0, 3.0)], vec![11]).unwrap();
        let data = extract_data(&space, &spec, &grid).unwrap();
        let w = build_whitney(&data).unwrap();
        assert!(w.report.pass(), "{}", w.report);
        // P_1 restricted to the tangent slot is the identity row (R_1 = 1).
        let p1 = &w.p_mats[0][1];
        assert!((p1[(0, 0)] - 1.0).abs() <= 1e-12);
        assert!(p1[(1, 0)].abs() <= 1e-12);
    }

    #[test]
    fn bonnet_data_round_trips_through_json() {
        let space = circle_pair_space();
        let grid = Grid::new(vec![(0.0, 2.0)], vec![5]).unwrap();
        let data = extract_data(&space, &weighted_circle_sum(), &grid).unwrap();
        let text = serde_json::to_string(&data).unwrap();
        let back: BonnetData = serde_json::from_str(&text).unwrap();
        assert_eq!(data, back);
    }

    #[test]
    fn one_dimensional_round_trip_is_tight() {
        let space = circle_pair_space();
        let spec = weighted_circle_sum();
        let grid = Grid::new(vec![(0.0, 5.0)], vec![101]).unwrap();
        let data = extract_data(&space, &spec, &grid).unwrap();
        let rec = reconstruct(&data, None).unwrap();
        assert!(rec.zeta_residual <= 1e-6, "zeta {}", rec.zeta_residual);
        let original = immersion_frame_samples(&space, &spec, &grid).unwrap();
        let matched = match_isometry(&space, &original, &rec.samples).unwrap();
        assert!(matched.report.pass(), "{}", matched.report);
        assert!(
            matched.max_pointwise_error <= 1e-5,
            "error {}",
            matched.max_pointwise_error
        );
    }

    #[test]
    fn two_dimensional_round_trip_on_the_torus() {
        let space = circle_pair_space();
        let spec = torus();
        let grid =
            Grid::new(vec![(0.0, 5.0), (0.0, 5.0)], vec![17, 17]).unwrap();
        let data = extract_data(&space, &spec, &grid).unwrap();
        let rec = reconstruct(&data, None).unwrap();
        assert!(rec.holonomy_residual <= 1e-6, "holonomy {}", rec.holonomy_residual);
        assert!(rec.path_agreement <= 1e-6, "paths {}", rec.path_agreement);
        let original = immersion_frame_samples(&space, &spec, &grid).unwrap();
        let matched = match_isometry(&space, &original, &rec.samples).unwrap();
        assert!(matched.max_pointwise_error <= 1e-4, "error {}", matched.max_pointwise_error);
    }

    #[test]
    fn gauge_change_alters_the_result_by_an_isometry_only() {
        let space = circle_pair_space();
        let spec = weighted_circle_sum();
        let grid = Grid::new(vec![(0.0, 4.0)], vec![81]).unwrap();
        let data = extract_data(&space, &spec, &grid).unwrap();
        let rec1 = reconstruct(&data, None).unwrap();
        // Rotate the canonical gauge inside the first block.
        let canonical = canonical_gauge(&data, &space).unwrap();
        let th = 0.9f64;
        let mut rot = DMatrix::identity(4, 4);
        rot[(0, 0)] = th.cos();
        rot[(0, 1)] = -th.sin();
        rot[(1, 0)] = th.sin();
        rot[(1, 1)] = th.cos();
        let gauge = rot * canonical;
        let rec2 = reconstruct(&data, Some(&gauge)).unwrap();
        let matched = match_isometry(&space, &rec1.samples, &rec2.samples).unwrap();
        assert!(matched.report.pass(), "{}", matched.report);
        assert!(matched.max_pointwise_error <= 1e-6);
    }

    #[test]
    fn invalid_gauge_is_rejected() {
        let space = circle_pair_space();
        let grid = Grid::new(vec![(0.0, 2.0)], vec![21]).unwrap();
        let data = extract_data(&space, &weighted_circle_sum(), &grid).unwrap();
        let bad = DMatrix::identity(4, 4) * 1.3;
        assert!(matches!(
            reconstruct(&data, Some(&bad)),
            Err(GeomError::NoIsometry(_))
        ));
    }

    #[test]
    fn identity_match_and_block_rotation_match() {
        let space = circle_pair_space();
        let spec = weighted_circle_sum();
        let grid = Grid::new(vec![(0.0, 3.0)], vec![31]).unwrap();
        let f = immersion_frame_samples(&space, &spec, &grid).unwrap();
        let same = match_isometry(&space, &f, &f).unwrap();
        assert!((same.b.clone() - DMatrix::<f64>::identity(4, 4)).norm() <= 1e-12);
        assert!(same.c.norm() <= 1e-12);

        // Rotate block 2 and push the frames forward through the rotation.
        let th = 0.6f64;
        let mut rot = DMatrix::identity(4, 4);
        rot[(2, 2)] = th.cos();
        rot[(2, 3)] = -th.sin();
        rot[(3, 2)] = th.sin();
        rot[(3, 3)] = th.cos();
        let g: Vec<FrameSample> = f
            .iter()
            .map(|s| FrameSample {
                position: &rot * &s.position,
                frame: &rot * &s.frame,
            })
            .collect();
        let matched = match_isometry(&space, &f, &g).unwrap();
        assert!(matched.report.pass(), "{}", matched.report);
        assert!((matched.b - rot).norm() <= 1e-9);
        assert!(matched.c.norm() <= 1e-8);
        assert!(matched.max_pointwise_error <= 1e-9);
    }

    #[test]
    fn flat_factor_translations_are_allowed() {
        let space = ProductSpace::new(vec![
            SpaceFormSpec { n: 2, k: 1.0 },
            SpaceFormSpec { n: 1, k: 0.0 },
        ])
        .unwrap();
        let a1 = (1.0f64 / 3.0).sqrt();
        let a2 = (2.0f64 / 3.0).sqrt();
        let spec = ImmersionSpec::WeightedSum {
            weights: vec![a1, a2],
            parts: vec![
                ImmersionSpec::SphereCircle {
                    k: 1.0 / 3.0,
                    polar: 1.1,
                },
                ImmersionSpec::Line {
                    point: vec![0.0],
                    dir: vec![1.0],
                },
            ],
        };
        let grid = Grid::new(vec![(0.0, 2.0)], vec![11]).unwrap();
        let f = immersion_frame_samples(&space, &spec, &grid).unwrap();
        let mut shift = space.zero_vector();
        shift[3] = 2.5;
        let g: Vec<FrameSample> = f
            .iter()
            .map(|s| FrameSample {
                position: &s.position + &shift,
                frame: s.frame.clone(),
            })
            .collect();
        let matched = match_isometry(&space, &f, &g).unwrap();
        assert!(matched.report.pass(), "{}", matched.report);
        // The translation is supported on the flat block only.
        assert!((matched.c[3] - 2.5).abs() <= 1e-12);
        assert!(matched.c.rows(0, 3).norm() <= 1e-12);
    }
}
