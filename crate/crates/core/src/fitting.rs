//! Landmark-driven fitting of pose and shape coefficients.
//!
//! The objective is the squared reprojection error plus a ridge penalty on
//! the scale-normalized coefficients. It is minimized by alternating two
//! exact block solves:
//!
//! 1. pose: rotation, scale and translation with the current shape fixed;
//! 2. shape: coefficients, together with scale and translation, with the
//!    rotation fixed. Given the rotation, `scale * (mean + basis * alpha)`
//!    and the translation are linear in `(scale, scale * alpha, t)`, so this
//!    block is a single linear least-squares solve.
//!
//! The penalty is measured in model units and so carries a factor `scale^2`
//! in pixel space. Both blocks minimize the same objective, which therefore
//! never increases between rounds.

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3, Matrix4, Rotation3, Vector2, Vector3, Vector4};

use crate::error::{Error, Result};
use crate::projection::{project, Landmarks2D, Pose};
use crate::shape_model::{Coefficients, Landmarks3D, ShapeBasis};

/// Residuals at or below this RMS (pixels) count as an exact fit.
const EXACT_FIT_RMS: f64 = 1e-9;
const POSE_MAX_STEPS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub max_iters: usize,
    /// Stop once the relative drop in residual between rounds falls below this.
    pub tol: f64,
    pub lambda_id: f64,
    pub lambda_exp: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iters: 20,
            tol: 1e-6,
            lambda_id: 1e-3,
            lambda_exp: 1e-3,
        }
    }
}

impl FitOptions {
    pub fn unregularized() -> Self {
        Self {
            lambda_id: 0.0,
            lambda_exp: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::InvalidParameter("max_iters must be at least 1".into()));
        }
        if !(self.tol.is_finite() && self.tol > 0.0) {
            return Err(Error::InvalidParameter(format!("tol must be positive, got {}", self.tol)));
        }
        for (name, v) in [("lambda_id", self.lambda_id), ("lambda_exp", self.lambda_exp)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidParameter(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub pose: Pose,
    pub coeffs: Coefficients,
    /// Root-mean-square per-coordinate reprojection error in pixels.
    pub residual_rms: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Residual RMS after each full (pose, coefficients) round.
    pub residual_history: Vec<f64>,
    /// Objective value (data plus ridge penalty) after each round.
    pub objective_history: Vec<f64>,
}

fn centered(points: &[Vector3<f64>]) -> (Vector3<f64>, Vec<Vector3<f64>>) {
    let c = points.iter().sum::<Vector3<f64>>() / points.len() as f64;
    (c, points.iter().map(|p| p - c).collect())
}

fn complete_rotation(rows: &Matrix2x3<f64>) -> Matrix3<f64> {
    let r1 = rows.row(0).transpose();
    let r2 = rows.row(1).transpose();
    Matrix3::from_columns(&[r1, r2, r1.cross(&r2)]).transpose()
}

fn pose_cost(obs: &[Vector2<f64>], pts: &[Vector3<f64>], scale: f64, rot: &Matrix3<f64>, penalty: f64) -> f64 {
    let rows: Matrix2x3<f64> = rot.fixed_rows::<2>(0).into_owned();
    let data: f64 = obs
        .iter()
        .zip(pts)
        .map(|(y, x)| (y - rows * x * scale).norm_squared())
        .sum();
    data + penalty * scale * scale
}

/// Least-squares weak-perspective alignment of `shape` onto `observed`.
///
/// Centroids are removed, an initial rotation comes from the orthonormal
/// polar factor of the affine 3D-to-2D least-squares map, and a damped
/// Gauss-Newton refinement over rotation and scale then reaches the exact
/// minimizer. The third rotation row is the cross product of the first two,
/// so the result is always a proper rotation.
pub fn fit_pose(observed: &Landmarks2D, shape: &Landmarks3D) -> Result<Pose> {
    align_pose(observed, shape, 0.0)
}

/// [`fit_pose`] with an extra `scale_penalty * scale^2` term in the cost.
fn align_pose(observed: &Landmarks2D, shape: &Landmarks3D, scale_penalty: f64) -> Result<Pose> {
    let n = observed.landmark_count();
    if shape.landmark_count() != n {
        return Err(Error::Dimension {
            context: "fit_pose landmarks",
            expected: n,
            actual: shape.landmark_count(),
        });
    }
    if n < 3 {
        return Err(Error::Degenerate(format!("{n} landmarks cannot determine a pose")));
    }

    let pts3: Vec<Vector3<f64>> = (0..n).map(|i| Vector3::from(shape.vertex(i))).collect();
    let (c3, x) = centered(&pts3);
    let c2 = observed.centroid();
    let y: Vec<Vector2<f64>> = (0..n).map(|i| observed.point(i) - c2).collect();

    let mut cross = Matrix2x3::zeros();
    let mut scatter = Matrix3::zeros();
    for (yi, xi) in y.iter().zip(&x) {
        cross += yi * xi.transpose();
        scatter += xi * xi.transpose();
    }
    let extent = scatter.trace();
    let cross_sv = cross.singular_values();
    if !(extent > 0.0) || !(cross_sv[0] > 0.0) || cross_sv[1] <= 1e-12 * cross_sv[0] {
        return Err(Error::Degenerate("landmark cross-covariance is rank deficient".into()));
    }

    // Affine least squares y ~ M x, then the nearest row-orthonormal map.
    let scatter_inv = scatter
        .pseudo_inverse(1e-12 * extent)
        .map_err(|e| Error::Degenerate(e.to_string()))?;
    let svd = (cross * scatter_inv).svd(true, true);
    let rows: Matrix2x3<f64> = svd.u.expect("requested u") * svd.v_t.expect("requested v_t");
    let mut rot = complete_rotation(&rows);

    let optimal_scale = |rot: &Matrix3<f64>| -> f64 {
        let rows: Matrix2x3<f64> = rot.fixed_rows::<2>(0).into_owned();
        let (mut num, mut den) = (0.0, scale_penalty);
        for (yi, xi) in y.iter().zip(&x) {
            let p = rows * xi;
            num += yi.dot(&p);
            den += p.norm_squared();
        }
        num / den
    };
    let mut scale = optimal_scale(&rot);
    if scale < 0.0 {
        // In-plane half turn.
        rot = complete_rotation(&-rows);
        scale = -scale;
    }
    if !(scale > 0.0) {
        return Err(Error::Degenerate("observed landmarks carry no extent".into()));
    }

    let mut cost = pose_cost(&y, &x, scale, &rot, scale_penalty);
    let mut damping = 1e-6;
    for _ in 0..POSE_MAX_STEPS {
        // Normal equations in (omega, scale) for R <- exp(omega) R.
        let mut jtj = Matrix4::<f64>::zeros();
        let mut jtr = Vector4::<f64>::zeros();
        for (yi, xi) in y.iter().zip(&x) {
            let q = rot * xi;
            let r = yi - Vector2::new(q.x, q.y) * scale;
            // d(Pi R x)/d(omega) = -Pi [q]x
            let jw = Matrix2x3::new(0.0, q.z, -q.y, -q.z, 0.0, q.x) * scale;
            let mut j = nalgebra::Matrix2x4::<f64>::zeros();
            j.fixed_view_mut::<2, 3>(0, 0).copy_from(&jw);
            j.set_column(3, &Vector2::new(q.x, q.y));
            jtj += j.transpose() * j;
            jtr += j.transpose() * r;
        }
        jtj[(3, 3)] += scale_penalty;
        jtr[3] -= scale_penalty * scale;

        let mut accepted = None;
        for _ in 0..30 {
            let mut a = jtj;
            for d in 0..4 {
                a[(d, d)] += damping * jtj[(d, d)].max(1e-12 * extent);
            }
            let Some(step) = a.cholesky().map(|c| c.solve(&jtr)) else {
                damping *= 10.0;
                continue;
            };
            let omega = Vector3::new(step[0], step[1], step[2]);
            let cand_rot = Rotation3::new(omega).into_inner() * rot;
            let cand_scale = scale + step[3];
            let cand_cost = if cand_scale > 0.0 {
                pose_cost(&y, &x, cand_scale, &cand_rot, scale_penalty)
            } else {
                f64::INFINITY
            };
            if cand_cost < cost {
                accepted = Some((cand_rot, cand_scale, cand_cost, omega.norm() + (step[3] / scale).abs()));
                damping = (damping * 0.1).max(1e-12);
                break;
            }
            damping *= 10.0;
        }
        let Some((r, s, c, step_size)) = accepted else {
            break;
        };
        let gain = (cost - c) / cost;
        rot = r;
        scale = s;
        cost = c;
        if step_size < 1e-14 || gain < 1e-15 {
            break;
        }
    }

    // Shed accumulated rounding.
    let rot = Rotation3::from_matrix(&rot).into_inner();
    let q = rot * c3;
    let translation = c2 - Vector2::new(q.x, q.y) * scale;
    Pose::new(scale, rot, translation)
}

/// `sum_ab P_ab M_ab` for the in-image projector `P = r1 r1^T + r2 r2^T`.
fn projected_moment(moments: &[DMatrix<f64>], rot: &Matrix3<f64>) -> DMatrix<f64> {
    let (r1, r2) = (rot.row(0), rot.row(1));
    let mut out = DMatrix::zeros(moments[0].nrows(), moments[0].ncols());
    for a in 0..3 {
        for b in 0..3 {
            let p = r1[a] * r1[b] + r2[a] * r2[b];
            if p != 0.0 {
                out.zip_apply(&moments[3 * a + b], |o, m| *o += p * m);
            }
        }
    }
    out
}

/// Lifts per-landmark image vectors back into model space through the
/// first two rotation rows: `l_i = u_i r1 + v_i r2`.
fn lift(image: &DVector<f64>, rot: &Matrix3<f64>) -> DVector<f64> {
    let n = image.len() / 2;
    let (r1, r2) = (rot.row(0), rot.row(1));
    let mut out = DVector::zeros(3 * n);
    for i in 0..n {
        let (u, v) = (image[2 * i], image[2 * i + 1]);
        for a in 0..3 {
            out[3 * i + a] = u * r1[a] + v * r2[a];
        }
    }
    out
}

fn check_observed(observed: &Landmarks2D, basis: &ShapeBasis) -> Result<()> {
    if observed.landmark_count() != basis.landmark_count() {
        return Err(Error::Dimension {
            context: "observed landmarks",
            expected: basis.landmark_count(),
            actual: observed.landmark_count(),
        });
    }
    if observed.points.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("observed landmarks"));
    }
    Ok(())
}

/// Ridge weights `lambda / scale_j^2` on the raw coefficients, in model units.
fn ridge_weights(basis: &ShapeBasis, opts: &FitOptions) -> DVector<f64> {
    let id = basis.id_scales().iter().map(|s| opts.lambda_id / (s * s));
    let exp = basis.exp_scales().iter().map(|s| opts.lambda_exp / (s * s));
    DVector::from_iterator(basis.id_components() + basis.exp_components(), id.chain(exp))
}

fn penalty(coeffs: &Coefficients, weights: &DVector<f64>) -> f64 {
    let alpha = coeffs.alpha_id.iter().chain(coeffs.alpha_exp.iter());
    alpha.zip(weights.iter()).map(|(a, w)| w * a * a).sum()
}

fn split(basis: &ShapeBasis, alpha: &DVector<f64>) -> Result<Coefficients> {
    let kid = basis.id_components();
    Coefficients::new(alpha.rows(0, kid).into_owned(), alpha.rows(kid, basis.exp_components()).into_owned())
}

fn solve_spd(normal: DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    let chol = normal
        .cholesky()
        .ok_or_else(|| Error::Solver("normal equations are not positive definite".into()))?;
    let x = chol.solve(rhs);
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Solver("linear solve produced non-finite values".into()));
    }
    Ok(x)
}

/// Minimizes the regularized reprojection error over the coefficients for a
/// fixed pose:
///
/// `|observed - scale * Pi R (mean + A_id a_id + A_exp a_exp) - t|^2
///  + scale^2 (lambda_id |a_id / s_id|^2 + lambda_exp |a_exp / s_exp|^2)`.
pub fn fit_coefficients(
    observed: &Landmarks2D,
    pose: &Pose,
    basis: &ShapeBasis,
    opts: &FitOptions,
) -> Result<Coefficients> {
    check_observed(observed, basis)?;
    opts.validate()?;
    let m = basis.moments();
    let k = basis.id_components() + basis.exp_components();
    let f = pose.scale();

    let mean_only = Coefficients::zeros(basis);
    let projected_mean = project(pose, &basis.reconstruct(&mean_only)?);
    let target = lift(&(&observed.points - projected_mean.points), pose.rotation());
    let rhs = m.augmented.columns(1, k).tr_mul(&target) * f;

    let full = projected_moment(&m.raw, pose.rotation());
    let mut normal = full.view((1, 1), (k, k)) * (f * f);
    for (d, w) in ridge_weights(basis, opts).iter().enumerate() {
        normal[(d, d)] += f * f * w;
    }
    split(basis, &solve_spd(normal, &rhs)?)
}

/// Shape block: scale, translation and coefficients for a fixed rotation.
fn solve_shape_block(
    observed: &Landmarks2D,
    rot: &Matrix3<f64>,
    basis: &ShapeBasis,
    weights: &DVector<f64>,
) -> Result<(Pose, Coefficients)> {
    let m = basis.moments();
    let k = weights.len();
    let n = observed.landmark_count();
    let c2 = observed.centroid();
    let mut centered_obs = observed.points.clone();
    for i in 0..n {
        centered_obs[2 * i] -= c2.x;
        centered_obs[2 * i + 1] -= c2.y;
    }
    let rhs = m.centered_basis.tr_mul(&lift(&centered_obs, rot));
    let mut normal = projected_moment(&m.centered, rot);
    for (d, w) in weights.iter().enumerate() {
        normal[(d + 1, d + 1)] += w;
    }
    let gamma = solve_spd(normal, &rhs)?;
    let scale = gamma[0];
    if !(scale > 0.0) {
        return Err(Error::Solver(format!("shape block produced non-positive scale {scale}")));
    }
    let alpha = gamma.rows(1, k) / scale;
    let offset = &m.centroid * &gamma;
    let (r1, r2) = (rot.row(0), rot.row(1));
    let translation = c2 - Vector2::new(r1.dot(&offset.transpose()), r2.dot(&offset.transpose()));
    Ok((Pose::new(scale, *rot, translation)?, split(basis, &alpha)?))
}

pub fn residual_rms(observed: &Landmarks2D, pose: &Pose, basis: &ShapeBasis, coeffs: &Coefficients) -> Result<f64> {
    let predicted = project(pose, &basis.reconstruct(coeffs)?);
    let diff = &observed.points - predicted.points;
    Ok((diff.norm_squared() / diff.len() as f64).sqrt())
}

/// Data term plus the ridge penalty, in squared pixels.
pub fn objective(observed: &Landmarks2D, pose: &Pose, basis: &ShapeBasis, coeffs: &Coefficients, opts: &FitOptions) -> Result<f64> {
    let rms = residual_rms(observed, pose, basis, coeffs)?;
    let data = rms * rms * observed.points.len() as f64;
    let f = pose.scale();
    Ok(data + f * f * penalty(coeffs, &ridge_weights(basis, opts)))
}

/// Fits pose and coefficients, starting from the mean face.
pub fn fit(observed: &Landmarks2D, basis: &ShapeBasis, opts: &FitOptions) -> Result<FitResult> {
    check_observed(observed, basis)?;
    opts.validate()?;

    let weights = ridge_weights(basis, opts);
    let mut coeffs = Coefficients::zeros(basis);
    let mut pose = Pose::identity();
    let mut history = Vec::with_capacity(opts.max_iters);
    let mut objectives = Vec::with_capacity(opts.max_iters);
    let mut converged = false;

    let mut rotation = Matrix3::identity();
    let mut last_step: Option<Vector3<f64>> = None;
    for round in 0..opts.max_iters {
        let shape = basis.reconstruct(&coeffs)?;
        let mut aligned = align_pose(observed, &shape, penalty(&coeffs, &weights))?;
        if round > 0 && objective(observed, &aligned, basis, &coeffs, opts)? > objective(observed, &pose, basis, &coeffs, opts)? {
            // A different basin than the current rotation; stay put.
            aligned = pose.clone();
        }
        let mut best = solve_shape_block(observed, aligned.rotation(), basis, &weights)?;

        // The tilt/shape coupling makes plain alternation converge linearly.
        // When successive rotation updates line up, try the Aitken
        // extrapolation of the rotation and keep it only if it lowers the
        // objective.
        let step = Rotation3::from_matrix_unchecked(aligned.rotation() * rotation.transpose()).scaled_axis();
        if let (true, Some(prev)) = (round > 0, last_step) {
            let ratio = step.dot(&prev) / prev.norm_squared();
            let aligned_dirs = step.dot(&prev) > 0.9 * step.norm() * prev.norm();
            if aligned_dirs && ratio > 0.0 && ratio < 0.95 {
                let boost = ratio / (1.0 - ratio);
                let extrapolated = Rotation3::new(step * boost).into_inner() * aligned.rotation();
                if let Ok(cand) = solve_shape_block(observed, &extrapolated, basis, &weights) {
                    let j_best = objective(observed, &best.0, basis, &best.1, opts)?;
                    let j_cand = objective(observed, &cand.0, basis, &cand.1, opts)?;
                    if j_cand < j_best {
                        best = cand;
                    }
                }
            }
        }
        // The first step is measured from an arbitrary start and would break
        // equivariance under in-plane rotation of the input.
        last_step = (round > 0).then(|| Rotation3::from_matrix_unchecked(best.0.rotation() * rotation.transpose()).scaled_axis());
        rotation = *best.0.rotation();
        (pose, coeffs) = best;

        let rms = residual_rms(observed, &pose, basis, &coeffs)?;
        let previous = history.last().copied();
        history.push(rms);
        objectives.push(objective(observed, &pose, basis, &coeffs, opts)?);
        if rms <= EXACT_FIT_RMS {
            converged = true;
            break;
        }
        if let Some(prev) = previous {
            if (prev - rms).abs() <= opts.tol * prev {
                converged = true;
                break;
            }
        }
    }

    Ok(FitResult {
        pose,
        coeffs,
        residual_rms: *history.last().expect("max_iters >= 1"),
        iterations: history.len(),
        converged,
        residual_history: history,
        objective_history: objectives,
    })
}
