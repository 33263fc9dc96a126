//! Deterministic starting point for the variational fit: robust per-frame
//! triangulation of every site, damped least-squares inverse kinematics
//! against the triangulated points, then a smoothing spline through the
//! per-frame poses.

use nalgebra::{DMatrix, DVector, Matrix3, SVD};

use crate::camera::CameraRig;
use crate::chain::{KinematicChain, ROOT_DOF};
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::observation::ObservationSet;
use crate::trajectory::SplineBasis;

/// Reprojection error above which a view is dropped from a triangulation.
const OUTLIER_PX: f64 = 25.0;

/// Weighted linear (DLT) triangulation from `(camera, pixel, weight)` views.
/// With more than two views, every pair proposes a point and the proposal
/// with the most views reprojecting within [`OUTLIER_PX`] wins; the point
/// is then re-estimated from those inliers.
pub fn triangulate(rig: &CameraRig, views: &[(usize, [f64; 2], f64)]) -> Option<[f64; 3]> {
    if views.len() < 2 {
        return None;
    }
    let reproj = |p: [f64; 3], (c, px, _): &(usize, [f64; 2], f64)| match crate::camera::project(rig, *c, p) {
        Ok(q) => ((q[0] - px[0]).powi(2) + (q[1] - px[1]).powi(2)).sqrt(),
        Err(_) => f64::INFINITY,
    };
    if views.len() == 2 {
        let p = dlt(rig, views)?;
        return views.iter().all(|v| reproj(p, v).is_finite()).then_some(p);
    }
    let mut best: Option<(usize, f64, Vec<(usize, [f64; 2], f64)>)> = None;
    for a in 0..views.len() {
        for b in a + 1..views.len() {
            let Some(p) = dlt(rig, &[views[a], views[b]]) else { continue };
            let errs: Vec<f64> = views.iter().map(|v| reproj(p, v)).collect();
            let inliers: Vec<_> = views.iter().zip(&errs).filter(|(_, e)| **e <= OUTLIER_PX).map(|(v, _)| *v).collect();
            let spread: f64 = errs.iter().filter(|e| **e <= OUTLIER_PX).sum();
            let better = match &best {
                None => true,
                Some((n, s, _)) => inliers.len() > *n || (inliers.len() == *n && spread < *s),
            };
            if better && inliers.len() >= 2 {
                best = Some((inliers.len(), spread, inliers));
            }
        }
    }
    let (_, _, inliers) = best?;
    dlt(rig, &inliers)
}

fn dlt(rig: &CameraRig, views: &[(usize, [f64; 2], f64)]) -> Option<[f64; 3]> {
    let mut a = DMatrix::<f64>::zeros(2 * views.len(), 4);
    for (row, (c, px, w)) in views.iter().enumerate() {
        let cam = rig.cameras().get(*c)?;
        let r = cam.rotation_matrix();
        let t = cam.translation;
        let k = &cam.intrinsics;
        let p = Matrix3::new(k.fx, 0.0, k.cx, 0.0, k.fy, k.cy, 0.0, 0.0, 1.0)
            * nalgebra::Matrix3x4::new(
                r[0][0], r[0][1], r[0][2], t[0], r[1][0], r[1][1], r[1][2], t[1], r[2][0], r[2][1], r[2][2], t[2],
            );
        let w = w.max(1e-3);
        for j in 0..4 {
            a[(2 * row, j)] = w * (px[0] * p[(2, j)] - p[(0, j)]);
            a[(2 * row + 1, j)] = w * (px[1] * p[(2, j)] - p[(1, j)]);
        }
    }
    let svd = SVD::new(a, false, true);
    let vt = svd.v_t?;
    let h = vt.row(vt.nrows() - 1);
    (h[3].abs() > 1e-12).then(|| [h[0] / h[3], h[1] / h[3], h[2] / h[3]])
}

/// Triangulated site positions per frame; `None` where fewer than two views
/// survive.
pub fn triangulate_sequence(rig: &CameraRig, obs: &ObservationSet) -> Vec<Vec<Option<[f64; 3]>>> {
    obs.frames()
        .iter()
        .map(|f| {
            (0..obs.keypoint_count())
                .map(|k| {
                    let views: Vec<_> = f
                        .views
                        .iter()
                        .enumerate()
                        .filter_map(|(c, v)| v.as_ref().filter(|v| v.vis[k]).map(|v| (c, v.kp[k], v.score[k])))
                        .collect();
                    triangulate(rig, &views)
                })
                .collect()
        })
        .collect()
}

/// Rotation and translation taking `from` onto `to` in least squares.
pub fn kabsch(from: &[[f64; 3]], to: &[[f64; 3]]) -> ([[f64; 3]; 3], [f64; 3]) {
    let n = from.len() as f64;
    let cf = from.iter().fold([0.0; 3], |a, p| [a[0] + p[0] / n, a[1] + p[1] / n, a[2] + p[2] / n]);
    let ct = to.iter().fold([0.0; 3], |a, p| [a[0] + p[0] / n, a[1] + p[1] / n, a[2] + p[2] / n]);
    let mut h = Matrix3::<f64>::zeros();
    for (p, q) in from.iter().zip(to) {
        let a = nalgebra::Vector3::new(p[0] - cf[0], p[1] - cf[1], p[2] - cf[2]);
        let b = nalgebra::Vector3::new(q[0] - ct[0], q[1] - ct[1], q[2] - ct[2]);
        h += a * b.transpose();
    }
    let svd = SVD::new(h, true, true);
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
    let mut d = Matrix3::identity();
    if (vt.transpose() * u.transpose()).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = vt.transpose() * d * u.transpose();
    let rot: [[f64; 3]; 3] = std::array::from_fn(|i| std::array::from_fn(|j| r[(i, j)]));
    let rc = [0, 1, 2].map(|i| rot[i][0] * cf[0] + rot[i][1] * cf[1] + rot[i][2] * cf[2]);
    (rot, [ct[0] - rc[0], ct[1] - rc[1], ct[2] - rc[2]])
}

/// Intrinsic X-Y-Z angles `(rx, ry, rz)` with `R = Rx Ry Rz`.
pub fn euler_xyz_from_matrix(r: [[f64; 3]; 3]) -> [f64; 3] {
    let ry = r[0][2].clamp(-1.0, 1.0).asin();
    let rx = (-r[1][2]).atan2(r[2][2]);
    let rz = (-r[0][1]).atan2(r[0][0]);
    [rx, ry, rz]
}

/// Damped Gauss-Newton fit of a full pose to target site positions, with
/// quadratic joint-limit barriers. `targets[k] = None` ignores site `k`.
pub fn inverse_kinematics(
    chain: &KinematicChain,
    targets: &[Option<[f64; 3]>],
    start: &[f64],
    iterations: usize,
) -> Vec<f64> {
    let zero = vec![[0.0; 3]; chain.site_count()];
    let residual = |pose: &[f64]| -> Vec<f64> {
        let sites = chain.forward_unchecked(pose, &zero);
        let mut r = Vec::new();
        for (s, t) in sites.iter().zip(targets) {
            if let Some(t) = t {
                r.extend((0..3).map(|i| s.0[i] - t[i]));
            }
        }
        for (seg, q) in chain.segments().iter().zip(&pose[ROOT_DOF..]) {
            r.push(10.0 * ((q - seg.limits[1]).max(0.0) + (q - seg.limits[0]).min(0.0)));
        }
        r
    };
    levenberg_marquardt(&residual, start.to_vec(), iterations).0
}

fn jacobian(residual: &dyn Fn(&[f64]) -> Vec<f64>, x: &[f64], rows: usize) -> DMatrix<f64> {
    let h = 1e-6;
    let mut jac = DMatrix::<f64>::zeros(rows, x.len());
    let mut xp = x.to_vec();
    for j in 0..x.len() {
        xp[j] = x[j] + h;
        let rp = residual(&xp);
        xp[j] = x[j] - h;
        let rm = residual(&xp);
        xp[j] = x[j];
        for i in 0..rows {
            jac[(i, j)] = (rp[i] - rm[i]) / (2.0 * h);
        }
    }
    jac
}

/// Damped Gauss–Newton on a least-squares residual with a central-difference
/// Jacobian. Returns the solution and the Jacobian at it.
fn levenberg_marquardt(residual: &dyn Fn(&[f64]) -> Vec<f64>, mut x: Vec<f64>, iterations: usize) -> (Vec<f64>, DMatrix<f64>) {
    let cost = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>();
    let dim = x.len();
    let mut r = residual(&x);
    let mut lambda = 1e-3;
    let mut jac = jacobian(residual, &x, r.len());
    for _ in 0..iterations {
        let rv = DVector::from_column_slice(&r);
        let jtj = jac.transpose() * &jac;
        let g = jac.transpose() * rv;
        let mut improved = false;
        for _ in 0..8 {
            let mut a = jtj.clone();
            for i in 0..dim {
                a[(i, i)] += lambda * (1.0 + jtj[(i, i)]);
            }
            let Some(chol) = a.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let step = chol.solve(&g);
            let cand: Vec<f64> = x.iter().zip(step.iter()).map(|(a, s)| a - s).collect();
            let rc = residual(&cand);
            if cost(&rc) < cost(&r) {
                x = cand;
                r = rc;
                lambda = (lambda * 0.3).max(1e-9);
                improved = true;
                break;
            }
            lambda *= 10.0;
        }
        if !improved || cost(&r) < 1e-16 {
            break;
        }
        jac = jacobian(residual, &x, r.len());
    }
    (x, jac)
}

/// One detection for per-frame refinement: camera, keypoint, pixel, noise
/// scale [px].
pub type WeightedView = (usize, usize, [f64; 2], f64);

/// Whitened residual above which a detection is ignored during refinement.
const REFINE_TRIM: f64 = 6.0;

/// Prior standard deviation keeping unobserved coordinates finite.
const LAPLACE_PRIOR_SD: f64 = 1.0;

/// Refines one frame's pose on whitened reprojection residuals and returns
/// it with the Laplace covariance `(JᵀJ + I/s²)⁻¹` (row-major `D × D`) and
/// the sum of squared whitened residuals of the kept detections.
pub fn laplace_frame(
    chain: &KinematicChain,
    rig: &CameraRig,
    views: &[WeightedView],
    start: &[f64],
    iterations: usize,
) -> (Vec<f64>, Vec<f64>, f64, usize) {
    let zero = vec![[0.0; 3]; chain.site_count()];
    let whitened = |pose: &[f64], keep: &[bool]| -> Vec<f64> {
        let sites = chain.forward_unchecked(pose, &zero);
        let mut r = Vec::with_capacity(2 * views.len() + chain.joint_count());
        for (&(c, k, y, sigma), &kept) in views.iter().zip(keep) {
            let cam = &rig.cameras()[c];
            match cam.pixel(&cam.to_camera(&sites[k])) {
                Some(px) if kept => r.extend([(px[0] - y[0]) / sigma, (px[1] - y[1]) / sigma]),
                _ => r.extend([0.0, 0.0]),
            }
        }
        for (seg, q) in chain.segments().iter().zip(&pose[ROOT_DOF..]) {
            r.push(10.0 * ((q - seg.limits[1]).max(0.0) + (q - seg.limits[0]).min(0.0)));
        }
        r
    };
    let mut keep = vec![true; views.len()];
    let mut x = start.to_vec();
    for pass in 0..2 {
        let f = |p: &[f64]| whitened(p, &keep);
        x = levenberg_marquardt(&f, x, if pass == 0 { iterations } else { iterations / 2 + 1 }).0;
        let r = whitened(&x, &keep);
        for (i, kept) in keep.iter_mut().enumerate() {
            *kept = *kept && r[2 * i].hypot(r[2 * i + 1]) < REFINE_TRIM;
        }
    }
    let f = |p: &[f64]| whitened(p, &keep);
    let r = f(&x);
    let jac = jacobian(&f, &x, r.len());
    let dim = x.len();
    let mut info = jac.transpose() * &jac;
    for i in 0..dim {
        info[(i, i)] += 1.0 / (LAPLACE_PRIOR_SD * LAPLACE_PRIOR_SD);
    }
    let cov = info.try_inverse().unwrap_or_else(|| DMatrix::identity(dim, dim) * LAPLACE_PRIOR_SD.powi(2));
    let chi2 = r[..2 * views.len()].iter().map(|v| v * v).sum();
    let kept = keep.iter().filter(|&&k| k).count();
    (x, cov.transpose().as_slice().to_vec(), chi2, kept)
}

/// Low-rank-plus-diagonal split of a covariance: the leading `rank`
/// eigen-directions form the factor (row-major `D × R`) and the diagonal
/// restores the exact marginal variances, floored at `floor`.
pub fn low_rank_split(cov: &[f64], dim: usize, rank: usize, floor: f64) -> (Vec<f64>, Vec<f64>) {
    let m = DMatrix::from_row_slice(dim, dim, cov);
    let m = (&m + m.transpose()) * 0.5;
    let eig = m.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let rest = order[rank.min(dim)..].iter().map(|&i| eig.eigenvalues[i].max(0.0)).sum::<f64>() / (dim - rank.min(dim)).max(1) as f64;
    let mut factor = vec![0.0; dim * rank];
    for (r, &e) in order.iter().take(rank).enumerate() {
        let w = (eig.eigenvalues[e] - rest).max(0.0).sqrt();
        for i in 0..dim {
            factor[i * rank + r] = w * eig.eigenvectors[(i, e)];
        }
    }
    let diag = (0..dim)
        .map(|i| {
            let low: f64 = (0..rank).map(|r| factor[i * rank + r].powi(2)).sum();
            (m[(i, i)] - low).max(floor * floor).sqrt()
        })
        .collect();
    (factor, diag)
}

/// Rotates the columns of a `D × R` factor (row-major) by the orthogonal
/// matrix bringing it closest to `target`; `UUᵀ` is unchanged.
pub fn procrustes_align(u: &[f64], target: &[f64], dim: usize, rank: usize) -> Vec<f64> {
    let a = DMatrix::from_row_slice(dim, rank, u);
    let b = DMatrix::from_row_slice(dim, rank, target);
    let svd = SVD::new(a.transpose() * &b, true, true);
    let (Some(left), Some(right_t)) = (svd.u, svd.v_t) else {
        return u.to_vec();
    };
    let rotated = a * (left * right_t);
    rotated.transpose().as_slice().to_vec()
}

/// Per-frame pose estimates from triangulated sites. The first usable frame
/// seeds its root pose by aligning root-attached sites; later frames warm
/// start from their predecessor.
pub fn initial_poses(chain: &KinematicChain, rig: &CameraRig, obs: &ObservationSet) -> Result<Vec<Vec<f64>>> {
    let tri = triangulate_sequence(rig, obs);
    let rest_pose = vec![0.0; chain.pose_dim()];
    let zero = vec![[0.0; 3]; chain.site_count()];
    let rest: Vec<[f64; 3]> = chain.forward_unchecked(&rest_pose, &zero).iter().map(Vec3::value).collect();
    let root_sites: Vec<usize> = (0..chain.site_count()).filter(|&k| chain.sites()[k].segment.is_none()).collect();

    let mut poses: Vec<Option<Vec<f64>>> = vec![None; tri.len()];
    let mut prev: Option<Vec<f64>> = None;
    for (f, targets) in tri.iter().enumerate() {
        let usable = targets.iter().filter(|t| t.is_some()).count();
        if usable < 3 {
            continue;
        }
        let start = match &prev {
            Some(p) => p.clone(),
            None => seed_pose(chain, &rest, targets, &root_sites),
        };
        let pose = inverse_kinematics(chain, targets, &start, 40);
        prev = Some(pose.clone());
        poses[f] = Some(pose);
    }
    fill_gaps(poses)
}

fn seed_pose(chain: &KinematicChain, rest: &[[f64; 3]], targets: &[Option<[f64; 3]>], root_sites: &[usize]) -> Vec<f64> {
    let mut pose = vec![0.0; chain.pose_dim()];
    let pairs: Vec<([f64; 3], [f64; 3])> =
        root_sites.iter().filter_map(|&k| targets[k].map(|t| (rest[k], t))).collect();
    let all: Vec<([f64; 3], [f64; 3])> =
        (0..rest.len()).filter_map(|k| targets[k].map(|t| (rest[k], t))).collect();
    let use_pairs = if pairs.len() >= 3 { &pairs } else { &all };
    let (from, to): (Vec<_>, Vec<_>) = use_pairs.iter().copied().unzip();
    if from.len() >= 3 {
        let (r, t) = kabsch(&from, &to);
        pose[..3].copy_from_slice(&t);
        pose[3..6].copy_from_slice(&euler_xyz_from_matrix(r));
    } else if let Some((f, t)) = from.first().zip(to.first()) {
        pose[..3].copy_from_slice(&[t[0] - f[0], t[1] - f[1], t[2] - f[2]]);
    }
    pose
}

fn fill_gaps(poses: Vec<Option<Vec<f64>>>) -> Result<Vec<Vec<f64>>> {
    let known: Vec<usize> = (0..poses.len()).filter(|&i| poses[i].is_some()).collect();
    if known.is_empty() {
        return Err(Error::InsufficientData("no frame has enough triangulated sites to initialize".into()));
    }
    let mut out = Vec::with_capacity(poses.len());
    for i in 0..poses.len() {
        let nearest = *known.iter().min_by_key(|&&k| k.abs_diff(i)).expect("known is nonempty");
        out.push(poses[nearest].clone().expect("known index"));
    }
    // Keep root angles continuous across ±π wraps.
    for i in 1..out.len() {
        for j in 3..6 {
            let d = out[i][j] - out[i - 1][j];
            out[i][j] -= (d / std::f64::consts::TAU).round() * std::f64::consts::TAU;
        }
    }
    Ok(out)
}

/// Spline coefficients (`B × D`, row per basis function) fitting `values`
/// at `times` with a light second-difference penalty on the coefficients.
pub fn fit_spline_coefficients(basis: &SplineBasis, times: &[f64], values: &[Vec<f64>], smoothing: f64) -> Result<Vec<f64>> {
    let nb = basis.count();
    let dim = values.first().map(Vec::len).unwrap_or(0);
    let mut ata = DMatrix::<f64>::zeros(nb, nb);
    let mut atb = DMatrix::<f64>::zeros(nb, dim);
    for (t, v) in times.iter().zip(values) {
        let (i, w) = basis.weights(*t)?;
        for a in 0..4 {
            for b in 0..4 {
                ata[(i + a, i + b)] += w[a] * w[b];
            }
            for d in 0..dim {
                atb[(i + a, d)] += w[a] * v[d];
            }
        }
    }
    for k in 0..nb.saturating_sub(2) {
        let stencil = [(k, 1.0), (k + 1, -2.0), (k + 2, 1.0)];
        for &(a, wa) in &stencil {
            for &(b, wb) in &stencil {
                ata[(a, b)] += smoothing * wa * wb;
            }
        }
    }
    for k in 0..nb {
        ata[(k, k)] += 1e-10;
    }
    let chol = ata.cholesky().ok_or_else(|| Error::InsufficientData("spline normal equations are singular".into()))?;
    let x = chol.solve(&atb);
    Ok((0..nb).flat_map(|b| (0..dim).map(move |d| (b, d))).map(|(b, d)| x[(b, d)]).collect())
}
