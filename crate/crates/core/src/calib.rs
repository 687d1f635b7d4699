//! Joint bundle adjustment of a multi-camera rig observing a planar board.
//!
//! Camera `k` maps reference-frame points into its own frame through its
//! extrinsic `T_k`; image `i` places the board in the reference frame
//! through `T_i`. Camera 0 is the reference and its extrinsic stays at the
//! identity, which removes the gauge freedom. Board points are held fixed.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, SMatrix, Vector2, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    orthonormalize, project, project_with_jacobian, projection_intrinsics_jacobian, Camera, CameraRig, CameraRole,
    Intrinsics, RigidTransform,
};

const INTRINSIC_NAMES: [&str; 9] = ["fx", "fy", "cx", "cy", "k1", "k2", "p1", "p2", "k3"];
const SE3_NAMES: [&str; 6] = ["tx", "ty", "tz", "rx", "ry", "rz"];
const LAMBDA_INIT: f64 = 1e-4;
const LAMBDA_MAX: f64 = 1e16;
/// Smallest-to-largest eigenvalue ratio of the scaled normal matrix below
/// which the problem counts as rank deficient.
const RANK_TOL: f64 = 1e-13;

/// One detected board corner.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Observation {
    pub cam: usize,
    pub image: usize,
    pub point_id: usize,
    /// Board point in the board frame, metres.
    pub point: Vector3<f64>,
    /// Detected corner, pixels.
    pub pixel: Vector2<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraParams {
    pub width: usize,
    pub height: usize,
    pub intrinsics: Intrinsics,
    pub extrinsic: RigidTransform,
}

impl CameraParams {
    /// Corners outside `[-0.5, w - 0.5] × [-0.5, h - 0.5]` are not visible.
    pub fn contains(&self, p: &Vector2<f64>) -> bool {
        p.x >= -0.5 && p.y >= -0.5 && p.x <= self.width as f64 - 0.5 && p.y <= self.height as f64 - 0.5
    }

    fn dof(index: usize) -> usize {
        if index == 0 {
            9
        } else {
            15
        }
    }
}

/// Everything the adjustment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibParams {
    pub cameras: Vec<CameraParams>,
    /// Board-to-reference pose per image.
    pub poses: Vec<RigidTransform>,
}

impl CalibParams {
    pub fn from_rig(rig: &CameraRig, poses: Vec<RigidTransform>) -> Self {
        let cameras = rig
            .cameras()
            .iter()
            .map(|c| CameraParams {
                width: c.width,
                height: c.height,
                intrinsics: c.intrinsics,
                extrinsic: c.extrinsic,
            })
            .collect();
        CalibParams { cameras, poses }
    }

    /// Rebuilds a rig; camera `k` takes the role with index `k`.
    pub fn to_rig(&self) -> Result<CameraRig> {
        let roles = [CameraRole::PolLeft, CameraRole::PolRight, CameraRole::Itof, CameraRole::StructuredLight];
        if self.cameras.len() != roles.len() {
            return Err(Error::Arg(format!("a rig needs 4 cameras, have {}", self.cameras.len())));
        }
        let cams: Vec<Camera> = self
            .cameras
            .iter()
            .zip(roles)
            .map(|(c, role)| Camera {
                role,
                width: c.width,
                height: c.height,
                intrinsics: c.intrinsics,
                extrinsic: c.extrinsic,
            })
            .collect();
        CameraRig::new(cams.try_into().expect("four cameras"))
    }

    fn camera_block_len(&self) -> usize {
        (0..self.cameras.len()).map(CameraParams::dof).sum()
    }

    fn camera_offset(&self, k: usize) -> usize {
        (0..k).map(CameraParams::dof).sum()
    }

    fn parameter_name(&self, index: usize) -> String {
        let nc = self.camera_block_len();
        if index >= nc {
            let i = index - nc;
            return format!("image {} pose {}", i / 6, SE3_NAMES[i % 6]);
        }
        let k = (0..self.cameras.len()).rfind(|&k| self.camera_offset(k) <= index).unwrap_or(0);
        let local = index - self.camera_offset(k);
        let name = if local < 9 { INTRINSIC_NAMES[local] } else { SE3_NAMES[local - 9] };
        format!("camera {k} {name}")
    }

    fn updated(&self, delta: &DVector<f64>) -> CalibParams {
        let mut out = self.clone();
        for (k, cam) in out.cameras.iter_mut().enumerate() {
            let o = self.camera_offset(k);
            let mut p = cam.intrinsics.to_params();
            for (j, v) in p.iter_mut().enumerate() {
                *v += delta[o + j];
            }
            cam.intrinsics = Intrinsics::from_params(&p);
            if k > 0 {
                cam.extrinsic = cam.extrinsic.perturbed(delta.rows(o + 9, 6).as_slice());
            }
        }
        let nc = self.camera_block_len();
        for (i, pose) in out.poses.iter_mut().enumerate() {
            *pose = pose.perturbed(delta.rows(nc + 6 * i, 6).as_slice());
        }
        out
    }
}

/// Huber m-estimator on the residual norm.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Huber {
    pub delta: f64,
}

impl Default for Huber {
    fn default() -> Self {
        Huber { delta: 1.0 }
    }
}

impl Huber {
    pub fn new(delta: f64) -> Result<Self> {
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::Arg(format!("huber delta must be positive, got {delta}")));
        }
        Ok(Huber { delta })
    }

    /// `½ r²` up to `delta`, `delta (r − ½ delta)` beyond.
    pub fn cost(&self, r: f64) -> f64 {
        if r <= self.delta {
            0.5 * r * r
        } else {
            self.delta * (r - 0.5 * self.delta)
        }
    }

    /// Derivative of [`Huber::cost`] with respect to `r`.
    pub fn slope(&self, r: f64) -> f64 {
        r.min(self.delta)
    }

    /// Iteratively reweighted least-squares weight `slope(r) / r`.
    pub fn weight(&self, r: f64) -> f64 {
        if r <= self.delta {
            1.0
        } else {
            self.delta / r
        }
    }
}

/// Parameters plus the observation edges that constrain them.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibGraph {
    pub params: CalibParams,
    pub observations: Vec<Observation>,
}

impl CalibGraph {
    pub fn new(params: CalibParams, observations: Vec<Observation>) -> Result<Self> {
        if params.cameras.is_empty() {
            return Err(Error::Arg("calibration graph has no camera".into()));
        }
        let e = &params.cameras[0].extrinsic;
        if (e.rotation - Matrix3::identity()).abs().max() > 1e-12 || e.translation.abs().max() > 1e-12 {
            return Err(Error::Arg("camera 0 is the reference and needs an identity extrinsic".into()));
        }
        for (n, o) in observations.iter().enumerate() {
            if o.cam >= params.cameras.len() || o.image >= params.poses.len() {
                return Err(Error::Arg(format!(
                    "observation {n} references camera {} / image {} outside the graph",
                    o.cam, o.image
                )));
            }
            if !(o.point.iter().all(|v| v.is_finite()) && o.pixel.iter().all(|v| v.is_finite())) {
                return Err(Error::Arg(format!("observation {n} is not finite")));
            }
        }
        Ok(CalibGraph { params, observations })
    }

    /// Each camera needs at least 3 images with at least 6 visible corners.
    pub fn check_solvable(&self) -> Result<()> {
        for k in 0..self.params.cameras.len() {
            let cam = &self.params.cameras[k];
            let mut per_image = vec![0usize; self.params.poses.len()];
            for o in self.observations.iter().filter(|o| o.cam == k && cam.contains(&o.pixel)) {
                per_image[o.image] += 1;
            }
            let good = per_image.iter().filter(|&&n| n >= 6).count();
            if good < 3 {
                return Err(Error::Singular(format!(
                    "camera {k} sees only {good} images with 6 or more corners, need 3"
                )));
            }
        }
        Ok(())
    }
}

/// `x̂ − x` for one edge, or `None` when the detected corner lies outside
/// the image.
pub fn reprojection_residual(obs: &Observation, params: &CalibParams) -> Result<Option<Vector2<f64>>> {
    let cam = &params.cameras[obs.cam];
    if !cam.contains(&obs.pixel) {
        return Ok(None);
    }
    let p = cam.extrinsic.apply(&params.poses[obs.image].apply(&obs.point));
    Ok(Some(project(&p, &cam.intrinsics)? - obs.pixel))
}

struct Linearised {
    r: Vector2<f64>,
    /// Intrinsics then extrinsic twist.
    j_cam: SMatrix<f64, 2, 15>,
    j_pose: SMatrix<f64, 2, 6>,
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

fn linearise(obs: &Observation, params: &CalibParams) -> Result<Option<Linearised>> {
    let cam = &params.cameras[obs.cam];
    if !cam.contains(&obs.pixel) {
        return Ok(None);
    }
    let y = params.poses[obs.image].apply(&obs.point);
    let p = cam.extrinsic.apply(&y);
    let (uv, jp) = project_with_jacobian(&p, &cam.intrinsics)?;
    let mut j_cam = SMatrix::<f64, 2, 15>::zeros();
    j_cam
        .fixed_view_mut::<2, 9>(0, 0)
        .copy_from(&projection_intrinsics_jacobian(&p, &cam.intrinsics));
    // left perturbations: d(exp(ξ) q)/dξ = [I, −[q]×]
    let mut dp_cam = SMatrix::<f64, 3, 6>::zeros();
    dp_cam.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
    dp_cam.fixed_view_mut::<3, 3>(0, 3).copy_from(&-skew(&p));
    j_cam.fixed_view_mut::<2, 6>(0, 9).copy_from(&(jp * dp_cam));
    let mut dy = SMatrix::<f64, 3, 6>::zeros();
    dy.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
    dy.fixed_view_mut::<3, 3>(0, 3).copy_from(&-skew(&y));
    let j_pose = jp * cam.extrinsic.rotation * dy;
    Ok(Some(Linearised { r: uv - obs.pixel, j_cam, j_pose }))
}

/// Robust cost, plain squared error and number of active edges. Edges whose
/// point falls behind its camera are skipped.
fn evaluate_cost(graph: &CalibGraph, params: &CalibParams, kernel: &Huber) -> (f64, f64, usize) {
    let per_edge: Vec<Option<f64>> = graph
        .observations
        .par_iter()
        .map(|o| reprojection_residual(o, params).ok().flatten().map(|r| r.norm()))
        .collect();
    per_edge.iter().flatten().fold((0.0, 0.0, 0), |(c, s, n), &r| (c + kernel.cost(r), s + r * r, n + 1))
}

/// Outcome of [`optimize`].
#[derive(Clone, Debug, PartialEq)]
pub struct CalibReport {
    pub initial_rmse: f64,
    pub final_rmse: f64,
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Accepted Levenberg–Marquardt steps.
    pub iterations: usize,
    pub edges: usize,
    /// Robust cost after every accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
}

impl CalibReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,cost\n");
        for (i, c) in self.cost_history.iter().enumerate() {
            let _ = writeln!(s, "{i},{c}");
        }
        s
    }
}

struct NormalEquations {
    a: DMatrix<f64>,
    b: Vec<DMatrix<f64>>,
    d: Vec<Matrix6<f64>>,
    gc: DVector<f64>,
    gp: Vec<Vector6<f64>>,
}

fn build_normal(graph: &CalibGraph, params: &CalibParams, kernel: &Huber) -> Result<NormalEquations> {
    let nc = params.camera_block_len();
    let np = params.poses.len();
    let lins: Vec<Option<Linearised>> = graph
        .observations
        .par_iter()
        .map(|o| linearise(o, params).or_else(|e| match e {
            Error::BehindCamera { .. } => Ok(None),
            e => Err(e),
        }))
        .collect::<Result<_>>()?;
    let mut n = NormalEquations {
        a: DMatrix::zeros(nc, nc),
        b: vec![DMatrix::zeros(nc, 6); np],
        d: vec![Matrix6::zeros(); np],
        gc: DVector::zeros(nc),
        gp: vec![Vector6::zeros(); np],
    };
    for (o, lin) in graph.observations.iter().zip(&lins) {
        let Some(l) = lin else { continue };
        let w = kernel.weight(l.r.norm());
        let off = params.camera_offset(o.cam);
        let dof = CameraParams::dof(o.cam);
        let jc = l.j_cam.columns(0, dof);
        let jtj = jc.transpose() * jc * w;
        let mut a = n.a.view_mut((off, off), (dof, dof));
        a += &jtj;
        let cross = jc.transpose() * l.j_pose * w;
        let mut b = n.b[o.image].view_mut((off, 0), (dof, 6));
        b += &cross;
        n.d[o.image] += l.j_pose.transpose() * l.j_pose * w;
        let mut gc = n.gc.rows_mut(off, dof);
        gc += jc.transpose() * l.r * w;
        n.gp[o.image] += l.j_pose.transpose() * l.r * w;
    }
    Ok(n)
}

/// Names the parameter directions that no edge constrains.
fn rank_diagnostics(n: &NormalEquations, params: &CalibParams) -> Result<()> {
    let nc = params.camera_block_len();
    let np = params.poses.len();
    let dim = nc + 6 * np;
    let mut h = DMatrix::zeros(dim, dim);
    h.view_mut((0, 0), (nc, nc)).copy_from(&n.a);
    for i in 0..np {
        let o = nc + 6 * i;
        h.view_mut((0, o), (nc, 6)).copy_from(&n.b[i]);
        h.view_mut((o, 0), (6, nc)).copy_from(&n.b[i].transpose());
        h.view_mut((o, o), (6, 6)).copy_from(&n.d[i]);
    }
    if let Some(j) = (0..dim).find(|&j| h[(j, j)] <= 0.0) {
        return Err(Error::Singular(format!("{} is not observed by any edge", params.parameter_name(j))));
    }
    let scale = DVector::from_iterator(dim, (0..dim).map(|j| 1.0 / h[(j, j)].sqrt()));
    let scaled = DMatrix::from_fn(dim, dim, |r, c| h[(r, c)] * scale[r] * scale[c]);
    let eig = scaled.symmetric_eigen();
    let (imin, min) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, v)| (i, *v))
        .expect("non-empty");
    let max = eig.eigenvalues.max();
    if min <= RANK_TOL * max {
        let v = eig.eigenvectors.column(imin);
        let worst = v.iamax();
        return Err(Error::Singular(format!(
            "normal equations are rank deficient (eigenvalue ratio {:.3e}); the null direction is dominated by {}",
            min / max,
            params.parameter_name(worst)
        )));
    }
    Ok(())
}

/// Damped step via the Schur complement on the pose blocks.
fn solve_step(n: &NormalEquations, lambda: f64, params: &CalibParams) -> Result<DVector<f64>> {
    let nc = params.camera_block_len();
    let np = params.poses.len();
    let mut s = n.a.clone();
    for j in 0..nc {
        s[(j, j)] *= 1.0 + lambda;
    }
    let mut rhs = n.gc.clone();
    let mut d_inv = Vec::with_capacity(np);
    for i in 0..np {
        let mut d = n.d[i];
        for j in 0..6 {
            d[(j, j)] *= 1.0 + lambda;
        }
        let inv = d
            .cholesky()
            .ok_or_else(|| Error::Singular(format!("pose block of image {i} is not positive definite")))?
            .inverse();
        let bd = &n.b[i] * inv;
        s -= &bd * n.b[i].transpose();
        rhs -= &bd * n.gp[i];
        d_inv.push(inv);
    }
    let dc = s
        .cholesky()
        .ok_or_else(|| Error::Singular("reduced camera system is not positive definite".into()))?
        .solve(&(-rhs));
    let mut delta = DVector::zeros(nc + 6 * np);
    delta.rows_mut(0, nc).copy_from(&dc);
    for i in 0..np {
        let dp = d_inv[i] * (-(n.gp[i] + n.b[i].transpose() * &dc));
        delta.rows_mut(nc + 6 * i, 6).copy_from(&dp);
    }
    Ok(delta)
}

/// Levenberg–Marquardt on the Huber-robustified reprojection error.
///
/// Stops when an accepted step changes the cost by less than `tol`
/// relative, after `max_iters` accepted steps, or when no damping level
/// yields a decrease.
pub fn optimize(graph: &CalibGraph, kernel: Huber, max_iters: usize, tol: f64) -> Result<(CalibParams, CalibReport)> {
    Huber::new(kernel.delta)?;
    if !(tol >= 0.0) {
        return Err(Error::Arg(format!("tolerance must be non-negative, got {tol}")));
    }
    graph.check_solvable()?;
    let mut params = graph.params.clone();
    let (mut cost, sq, edges) = evaluate_cost(graph, &params, &kernel);
    let rmse = |sq: f64, n: usize| (sq / n.max(1) as f64).sqrt();
    let initial_rmse = rmse(sq, edges);
    let initial_cost = cost;
    let mut final_sq = sq;
    let mut active = edges;
    let mut history = vec![cost];
    let mut lambda = LAMBDA_INIT;
    let mut iterations = 0;
    let mut checked = false;

    while iterations < max_iters && cost > 0.0 {
        let normal = build_normal(graph, &params, &kernel)?;
        if !checked {
            rank_diagnostics(&normal, &params)?;
            checked = true;
        }
        let accepted = loop {
            let delta = solve_step(&normal, lambda, &params)?;
            let candidate = params.updated(&delta);
            let (c, s, n) = evaluate_cost(graph, &candidate, &kernel);
            if n == active && c < cost {
                lambda = (lambda / 10.0).max(1e-12);
                break Some((candidate, c, s));
            }
            lambda *= 10.0;
            if lambda > LAMBDA_MAX {
                break None;
            }
        };
        let Some((candidate, c, s)) = accepted else { break };
        let rel = (cost - c) / cost;
        params = candidate;
        cost = c;
        final_sq = s;
        active = edges;
        history.push(cost);
        iterations += 1;
        if rel < tol {
            break;
        }
    }
    let report = CalibReport {
        initial_rmse,
        final_rmse: rmse(final_sq, active),
        initial_cost,
        final_cost: cost,
        iterations,
        edges: active,
        cost_history: history,
    };
    Ok((params, report))
}

/// Board pose from the planar homography between board points (Z = 0) and
/// undistorted normalised image coordinates.
pub fn board_pose_from_homography(pairs: &[(Vector3<f64>, Vector2<f64>)], intrinsics: &Intrinsics) -> Result<RigidTransform> {
    if pairs.len() < 4 {
        return Err(Error::Arg(format!("a homography needs 4 points, have {}", pairs.len())));
    }
    if pairs.iter().any(|(p, _)| p.z.abs() > 1e-9) {
        return Err(Error::Arg("board points must lie on Z = 0".into()));
    }
    let norm: Vec<Vector2<f64>> = pairs
        .iter()
        .map(|(_, uv)| intrinsics.ray(*uv).map(|r| Vector2::new(r.x / r.z, r.y / r.z)))
        .collect::<Result<_>>()?;
    let src: Vec<Vector2<f64>> = pairs.iter().map(|(p, _)| p.xy()).collect();
    let (ts, s) = similarity(&src);
    let (td, d) = similarity(&norm);
    let mut m = DMatrix::zeros(2 * pairs.len(), 9);
    for (i, (a, b)) in s.iter().zip(&d).enumerate() {
        let (x, y, u, v) = (a.x, a.y, b.x, b.y);
        m.row_mut(2 * i).copy_from_slice(&[-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u]);
        m.row_mut(2 * i + 1).copy_from_slice(&[0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v]);
    }
    let eig = (m.transpose() * &m).symmetric_eigen();
    let imin = eig.eigenvalues.imin();
    let h = eig.eigenvectors.column(imin);
    let hn = Matrix3::from_row_slice(h.as_slice());
    let td_inv = td
        .try_inverse()
        .ok_or_else(|| Error::Singular("degenerate image points for the homography".into()))?;
    let hm = td_inv * hn * ts;
    let (h1, h2, h3) = (hm.column(0).into_owned(), hm.column(1).into_owned(), hm.column(2).into_owned());
    let mut scale = 2.0 / (h1.norm() + h2.norm());
    if h3.z * scale < 0.0 {
        scale = -scale;
    }
    let (r1, r2) = (h1 * scale, h2 * scale);
    let r = Matrix3::from_columns(&[r1, r2, r1.cross(&r2)]);
    Ok(RigidTransform {
        rotation: orthonormalize(&r),
        translation: h3 * scale,
    })
}

/// Translation and isotropic scale taking points to zero mean and mean
/// distance √2, with the normalised points.
fn similarity(p: &[Vector2<f64>]) -> (Matrix3<f64>, Vec<Vector2<f64>>) {
    let n = p.len() as f64;
    let c = p.iter().sum::<Vector2<f64>>() / n;
    let spread = p.iter().map(|q| (q - c).norm()).sum::<f64>() / n;
    let s = if spread > 0.0 { std::f64::consts::SQRT_2 / spread } else { 1.0 };
    let t = Matrix3::new(s, 0.0, -s * c.x, 0.0, s, -s * c.y, 0.0, 0.0, 1.0);
    (t, p.iter().map(|q| (q - c) * s).collect())
}

/// Calibrates every camera on its own observations (homography poses, then
/// single-camera adjustment from `nominal` intrinsics) and assembles a
/// joint initial estimate: reference poses from camera 0 and extrinsics
/// averaged over the images two cameras share.
pub fn per_camera_init(
    observations: &[Observation],
    nominal: &[CameraParams],
    n_images: usize,
    kernel: Huber,
    max_iters: usize,
    tol: f64,
) -> Result<CalibParams> {
    let mut intrinsics = Vec::with_capacity(nominal.len());
    let mut local: Vec<Vec<Option<RigidTransform>>> = Vec::with_capacity(nominal.len());
    for (k, cam) in nominal.iter().enumerate() {
        let mut poses = vec![None; n_images];
        let mut index = vec![usize::MAX; n_images];
        let mut dense = Vec::new();
        for i in 0..n_images {
            let pairs: Vec<_> = observations
                .iter()
                .filter(|o| o.cam == k && o.image == i && cam.contains(&o.pixel))
                .map(|o| (o.point, o.pixel))
                .collect();
            if pairs.len() < 6 {
                continue;
            }
            index[i] = dense.len();
            dense.push(board_pose_from_homography(&pairs, &cam.intrinsics)?);
        }
        let sub: Vec<Observation> = observations
            .iter()
            .filter(|o| o.cam == k && index[o.image] != usize::MAX)
            .map(|o| Observation { cam: 0, image: index[o.image], ..*o })
            .collect();
        let single = CameraParams { extrinsic: RigidTransform::identity(), ..*cam };
        let graph = CalibGraph::new(CalibParams { cameras: vec![single], poses: dense }, sub)?;
        let (fit, _) = optimize(&graph, kernel, max_iters, tol)
            .map_err(|e| match e {
                Error::Singular(m) => Error::Singular(format!("camera {k}: {m}")),
                e => e,
            })?;
        for i in 0..n_images {
            if index[i] != usize::MAX {
                poses[i] = Some(fit.poses[index[i]]);
            }
        }
        intrinsics.push(fit.cameras[0].intrinsics);
        local.push(poses);
    }

    let mut extrinsics = vec![RigidTransform::identity(); nominal.len()];
    for k in 1..nominal.len() {
        let rel: Vec<RigidTransform> = (0..n_images)
            .filter_map(|i| Some(local[k][i]?.compose(&local[0][i]?.inverse())))
            .collect();
        if rel.is_empty() {
            return Err(Error::Singular(format!("camera {k} shares no image with camera 0")));
        }
        let n = rel.len() as f64;
        let r = rel.iter().map(|t| t.rotation).sum::<Matrix3<f64>>() / n;
        let t = rel.iter().map(|t| t.translation).sum::<Vector3<f64>>() / n;
        extrinsics[k] = RigidTransform { rotation: orthonormalize(&r), translation: t };
    }
    let poses = (0..n_images)
        .map(|i| {
            (0..nominal.len())
                .find_map(|k| local[k][i].map(|p| extrinsics[k].inverse().compose(&p)))
                .ok_or_else(|| Error::Singular(format!("image {i} is seen by no camera")))
        })
        .collect::<Result<Vec<_>>>()?;
    let cameras = nominal
        .iter()
        .zip(intrinsics)
        .zip(extrinsics)
        .map(|((c, intrinsics), extrinsic)| CameraParams { intrinsics, extrinsic, ..*c })
        .collect();
    Ok(CalibParams { cameras, poses })
}

/// Planar checkerboard corners on `Z = 0`, centred on the origin.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Board {
    pub cols: usize,
    pub rows: usize,
    pub square: f64,
}

impl Default for Board {
    fn default() -> Self {
        Board { cols: 8, rows: 6, square: 0.04 }
    }
}

impl Board {
    pub fn points(&self) -> Vec<Vector3<f64>> {
        let (ox, oy) = ((self.cols - 1) as f64 / 2.0, (self.rows - 1) as f64 / 2.0);
        (0..self.rows)
            .flat_map(|r| (0..self.cols).map(move |c| (r, c)))
            .map(|(r, c)| Vector3::new((c as f64 - ox) * self.square, (r as f64 - oy) * self.square, 0.0))
            .collect()
    }
}

/// Board poses 0.8–1.3 m in front of the reference camera, tilted up to 35°.
pub fn synthetic_poses(n: usize, seed: u64) -> Vec<RigidTransform> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-0.3..0.3));
            let angle = rng.random_range(5f64..35.0).to_radians();
            let t = Vector3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.08..0.08), rng.random_range(0.8..1.3));
            RigidTransform::from_axis_angle(axis.normalize() * angle, t)
        })
        .collect()
}

/// Projects every board corner into every camera, keeps those that land
/// inside the image, and adds Gaussian pixel noise.
pub fn synthetic_observations(params: &CalibParams, board: &Board, noise_sigma: f64, seed: u64) -> Result<Vec<Observation>> {
    let noise = Normal::new(0.0, noise_sigma).map_err(|e| Error::Arg(format!("noise sigma: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = board.points();
    let mut out = Vec::new();
    for (i, pose) in params.poses.iter().enumerate() {
        for (k, cam) in params.cameras.iter().enumerate() {
            for (j, x) in points.iter().enumerate() {
                let p = cam.extrinsic.apply(&pose.apply(x));
                let Ok(uv) = project(&p, &cam.intrinsics) else { continue };
                if !cam.contains(&uv) {
                    continue;
                }
                let pixel = uv + Vector2::new(noise.sample(&mut rng), noise.sample(&mut rng));
                out.push(Observation { cam: k, image: i, point_id: j, point: *x, pixel });
            }
        }
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct Record {
    cam: usize,
    image: usize,
    point_id: usize,
    #[serde(rename = "X")]
    x: f64,
    #[serde(rename = "Y")]
    y: f64,
    #[serde(rename = "Z")]
    z: f64,
    u: f64,
    v: f64,
}

/// Writes observations as CSV with header `cam,image,point_id,X,Y,Z,u,v`.
pub fn observations_to_csv(observations: &[Observation]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for o in observations {
        w.serialize(Record {
            cam: o.cam,
            image: o.image,
            point_id: o.point_id,
            x: o.point.x,
            y: o.point.y,
            z: o.point.z,
            u: o.pixel.x,
            v: o.pixel.y,
        })
        .map_err(|e| Error::Format(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

pub fn parse_observations(text: &str) -> Result<Vec<Observation>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = r
        .headers()
        .map_err(|e| csv_error(&e))?
        .iter()
        .map(str::to_owned)
        .collect();
    if header != ["cam", "image", "point_id", "X", "Y", "Z", "u", "v"] {
        return Err(Error::Parse {
            line: 1,
            column: 1,
            message: format!("expected header cam,image,point_id,X,Y,Z,u,v, got {}", header.join(",")),
        });
    }
    r.deserialize::<Record>()
        .map(|rec| {
            let rec = rec.map_err(|e| csv_error(&e))?;
            Ok(Observation {
                cam: rec.cam,
                image: rec.image,
                point_id: rec.point_id,
                point: Vector3::new(rec.x, rec.y, rec.z),
                pixel: Vector2::new(rec.u, rec.v),
            })
        })
        .collect()
}

fn csv_error(e: &csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::Parse { line, column: 1, message: e.to_string() }
}

pub fn read_observations(path: &Path) -> Result<Vec<Observation>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_observations(&text)
}

pub fn write_observations(path: &Path, observations: &[Observation]) -> Result<()> {
    std::fs::write(path, observations_to_csv(observations)?).map_err(|e| Error::io(path, e))
}

/// The four-camera desk rig at calibration resolution with `n` board poses.
pub fn synthetic_rig(n: usize, seed: u64) -> CalibParams {
    CalibParams::from_rig(&crate::synth::desk_rig(640, 480, 320, 240), synthetic_poses(n, seed))
}

/// Rotations by up to `rot_deg`, translations by up to `trans` metres and
/// focal lengths scaled by `focal_scale`; camera 0 stays the reference.
pub fn perturb(params: &CalibParams, rot_deg: f64, trans: f64, focal_scale: f64, seed: u64) -> CalibParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let twist = |rng: &mut ChaCha8Rng| -> [f64; 6] {
        let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let w = axis.normalize() * rot_deg.to_radians();
        let t = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let t = t.normalize() * trans;
        [t.x, t.y, t.z, w.x, w.y, w.z]
    };
    let mut out = params.clone();
    for (k, cam) in out.cameras.iter_mut().enumerate() {
        cam.intrinsics.fx *= focal_scale;
        cam.intrinsics.fy *= focal_scale;
        if k > 0 {
            cam.extrinsic = cam.extrinsic.perturbed(&twist(&mut rng));
        }
    }
    for pose in out.poses.iter_mut() {
        *pose = pose.perturbed(&twist(&mut rng));
    }
    out
}
