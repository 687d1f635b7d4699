//! Pinhole cameras with radial-tangential distortion, rigid transforms and
//! the four-camera rig.
//!
//! Distortion follows the OpenCV convention with coefficients
//! `(k1, k2, p1, p2, k3)` applied to normalized image coordinates.

use std::fmt::Write as _;

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Rotation3, Vector2, Vector3, SMatrix};

use crate::error::{Error, Result};

pub type Mat2x9 = SMatrix<f64, 2, 9>;

const UNDISTORT_MAX_ITERS: usize = 20;
const UNDISTORT_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Distortion {
    pub k1: f64,
    pub k2: f64,
    pub p1: f64,
    pub p2: f64,
    pub k3: f64,
}

impl Distortion {
    pub fn is_zero(&self) -> bool {
        *self == Distortion::default()
    }

    pub fn as_array(&self) -> [f64; 5] {
        [self.k1, self.k2, self.p1, self.p2, self.k3]
    }

    pub fn from_array(a: [f64; 5]) -> Self {
        Distortion {
            k1: a[0],
            k2: a[1],
            p1: a[2],
            p2: a[3],
            k3: a[4],
        }
    }

    /// Distorts a normalized point.
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let r2 = x * x + y * y;
        let radial = 1.0 + r2 * (self.k1 + r2 * (self.k2 + r2 * self.k3));
        let xd = x * radial + 2.0 * self.p1 * x * y + self.p2 * (r2 + 2.0 * x * x);
        let yd = y * radial + self.p1 * (r2 + 2.0 * y * y) + 2.0 * self.p2 * x * y;
        (xd, yd)
    }

    /// Jacobian of [`Distortion::apply`] with respect to `(x, y)`.
    pub fn jacobian(&self, x: f64, y: f64) -> Matrix2<f64> {
        let r2 = x * x + y * y;
        let radial = 1.0 + r2 * (self.k1 + r2 * (self.k2 + r2 * self.k3));
        // d(radial)/d(r2)
        let dr = self.k1 + r2 * (2.0 * self.k2 + 3.0 * self.k3 * r2);
        let (p1, p2) = (self.p1, self.p2);
        Matrix2::new(
            radial + 2.0 * x * x * dr + 2.0 * p1 * y + 6.0 * p2 * x,
            2.0 * x * y * dr + 2.0 * p1 * x + 2.0 * p2 * y,
            2.0 * x * y * dr + 2.0 * p1 * x + 2.0 * p2 * y,
            radial + 2.0 * y * y * dr + 6.0 * p1 * y + 2.0 * p2 * x,
        )
    }

    /// Inverts [`Distortion::apply`] by fixed-point iteration.
    pub fn remove(&self, xd: f64, yd: f64) -> Result<(f64, f64)> {
        if self.is_zero() {
            return Ok((xd, yd));
        }
        let (mut x, mut y) = (xd, yd);
        for _ in 0..UNDISTORT_MAX_ITERS {
            let r2 = x * x + y * y;
            let radial = 1.0 + r2 * (self.k1 + r2 * (self.k2 + r2 * self.k3));
            let dx = 2.0 * self.p1 * x * y + self.p2 * (r2 + 2.0 * x * x);
            let dy = self.p1 * (r2 + 2.0 * y * y) + 2.0 * self.p2 * x * y;
            let nx = (xd - dx) / radial;
            let ny = (yd - dy) / radial;
            let step = (nx - x).abs().max((ny - y).abs());
            x = nx;
            y = ny;
            if !(x.is_finite() && y.is_finite()) {
                break;
            }
            if step < UNDISTORT_TOL {
                return Ok((x, y));
            }
        }
        Err(Error::numeric(format!(
            "undistortion of ({xd}, {yd}) did not converge in {UNDISTORT_MAX_ITERS} iterations"
        )))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub dist: Distortion,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, dist: Distortion) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::Arg(format!("focal lengths must be positive, got {fx}, {fy}")));
        }
        Ok(Intrinsics {
            fx,
            fy,
            cx,
            cy,
            dist,
        })
    }

    pub fn pinhole(fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        Self::new(fx, fy, cx, cy, Distortion::default()).expect("positive focal lengths")
    }

    /// `[fx, fy, cx, cy, k1, k2, p1, p2, k3]`
    pub fn to_params(&self) -> [f64; 9] {
        let d = self.dist.as_array();
        [self.fx, self.fy, self.cx, self.cy, d[0], d[1], d[2], d[3], d[4]]
    }

    pub fn from_params(p: &[f64]) -> Self {
        Intrinsics {
            fx: p[0],
            fy: p[1],
            cx: p[2],
            cy: p[3],
            dist: Distortion::from_array([p[4], p[5], p[6], p[7], p[8]]),
        }
    }

    /// Unit-depth ray `(x, y, 1)` through pixel `p`, undistorted.
    pub fn ray(&self, p: Vector2<f64>) -> Result<Vector3<f64>> {
        let xd = (p.x - self.cx) / self.fx;
        let yd = (p.y - self.cy) / self.fy;
        let (x, y) = self.dist.remove(xd, yd)?;
        Ok(Vector3::new(x, y, 1.0))
    }
}

/// Perspective division, distortion, then pixel mapping.
pub fn project(point: &Vector3<f64>, cam: &Intrinsics) -> Result<Vector2<f64>> {
    if point.z <= 0.0 {
        return Err(Error::BehindCamera { z: point.z });
    }
    let (xd, yd) = cam.dist.apply(point.x / point.z, point.y / point.z);
    Ok(Vector2::new(cam.fx * xd + cam.cx, cam.fy * yd + cam.cy))
}

/// Projection together with its Jacobian with respect to the 3D point.
pub fn project_with_jacobian(
    point: &Vector3<f64>,
    cam: &Intrinsics,
) -> Result<(Vector2<f64>, Matrix2x3<f64>)> {
    if point.z <= 0.0 {
        return Err(Error::BehindCamera { z: point.z });
    }
    let iz = 1.0 / point.z;
    let (x, y) = (point.x * iz, point.y * iz);
    let (xd, yd) = cam.dist.apply(x, y);
    let jd = cam.dist.jacobian(x, y);
    let jn = Matrix2x3::new(iz, 0.0, -x * iz, 0.0, iz, -y * iz);
    let jf = Matrix2::new(cam.fx, 0.0, 0.0, cam.fy);
    Ok((
        Vector2::new(cam.fx * xd + cam.cx, cam.fy * yd + cam.cy),
        jf * jd * jn,
    ))
}

/// Jacobian of the projection with respect to `[fx, fy, cx, cy, k1, k2, p1, p2, k3]`.
pub fn projection_intrinsics_jacobian(point: &Vector3<f64>, cam: &Intrinsics) -> Mat2x9 {
    let (x, y) = (point.x / point.z, point.y / point.z);
    let (xd, yd) = cam.dist.apply(x, y);
    let r2 = x * x + y * y;
    let (r4, r6) = (r2 * r2, r2 * r2 * r2);
    let (fx, fy) = (cam.fx, cam.fy);
    #[rustfmt::skip]
    let j = Mat2x9::from_row_slice(&[
        xd, 0.0, 1.0, 0.0, fx * x * r2, fx * x * r4, fx * 2.0 * x * y, fx * (r2 + 2.0 * x * x), fx * x * r6,
        0.0, yd, 0.0, 1.0, fy * y * r2, fy * y * r4, fy * (r2 + 2.0 * y * y), fy * 2.0 * x * y, fy * y * r6,
    ]);
    j
}

/// Lifts pixel `p` at z-depth `depth` to a camera-frame point.
pub fn backproject(p: Vector2<f64>, depth: f64, cam: &Intrinsics) -> Result<Vector3<f64>> {
    if !(depth > 0.0) {
        return Err(Error::Arg(format!("depth must be positive, got {depth}")));
    }
    Ok(cam.ray(p)? * depth)
}

/// Rigid motion `x -> R x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    const ORTHO_TOL: f64 = 1e-9;

    pub fn identity() -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Validates `RᵀR = I` and `det R = 1` to 1e-9.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let t = RigidTransform {
            rotation,
            translation,
        };
        if t.orthonormality_error() > Self::ORTHO_TOL {
            return Err(Error::Arg("rotation is not orthonormal with det +1".into()));
        }
        Ok(t)
    }

    pub fn from_axis_angle(axis_angle: Vector3<f64>, translation: Vector3<f64>) -> Self {
        RigidTransform {
            rotation: Rotation3::from_scaled_axis(axis_angle).into_inner(),
            translation,
        }
    }

    pub fn translation(t: Vector3<f64>) -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    pub fn orthonormality_error(&self) -> f64 {
        let r = &self.rotation;
        let gram = (r.transpose() * r - Matrix3::identity()).abs().max();
        gram.max((r.determinant() - 1.0).abs())
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        let mut out = RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        };
        if out.orthonormality_error() > Self::ORTHO_TOL {
            out.rotation = orthonormalize(&out.rotation);
        }
        out
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Left-multiplies by `exp(ξ)` with `ξ = (ρ, ω)`: translation part first,
    /// rotation as a scaled axis.
    pub fn perturbed(&self, xi: &[f64]) -> RigidTransform {
        let delta = RigidTransform::from_axis_angle(
            Vector3::new(xi[3], xi[4], xi[5]),
            Vector3::new(xi[0], xi[1], xi[2]),
        );
        delta.compose(self)
    }

    pub fn rotation_angle(&self) -> f64 {
        Rotation3::from_matrix_unchecked(self.rotation).angle()
    }
}

/// Closest rotation in the Frobenius sense.
pub fn orthonormalize(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        r = u * v_t;
    }
    r
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CameraRole {
    PolLeft,
    PolRight,
    Itof,
    StructuredLight,
}

impl CameraRole {
    pub const ALL: [CameraRole; 4] = [
        CameraRole::PolLeft,
        CameraRole::PolRight,
        CameraRole::Itof,
        CameraRole::StructuredLight,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CameraRole::PolLeft => "pol_left",
            CameraRole::PolRight => "pol_right",
            CameraRole::Itof => "itof",
            CameraRole::StructuredLight => "structured_light",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl std::str::FromStr for CameraRole {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CameraRole::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::Arg(format!("unknown camera role {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub role: CameraRole,
    pub width: usize,
    pub height: usize,
    pub intrinsics: Intrinsics,
    /// Maps points from the reference (left polarisation) frame into this camera.
    pub extrinsic: RigidTransform,
}

/// The four calibrated cameras; the left polarisation camera is the world frame.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraRig {
    cameras: [Camera; 4],
}

impl CameraRig {
    /// Takes the cameras in any order; each role must appear exactly once and
    /// the left polarisation extrinsic must be the identity.
    pub fn new(cameras: [Camera; 4]) -> Result<Self> {
        let mut slots: [Option<Camera>; 4] = [None; 4];
        for c in cameras {
            if slots[c.role.index()].replace(c).is_some() {
                return Err(Error::Arg(format!("duplicate camera role {}", c.role.as_str())));
            }
            if c.width == 0 || c.height == 0 {
                return Err(Error::Arg(format!("camera {} has zero size", c.role.as_str())));
            }
        }
        let cameras = slots.map(|c| c.expect("four distinct roles fill every slot"));
        let left = cameras[CameraRole::PolLeft.index()].extrinsic;
        if (left.rotation - Matrix3::identity()).abs().max() > 1e-12
            || left.translation.abs().max() > 1e-12
        {
            return Err(Error::Arg("pol_left extrinsic must be the identity".into()));
        }
        Ok(CameraRig { cameras })
    }

    pub fn camera(&self, role: CameraRole) -> &Camera {
        &self.cameras[role.index()]
    }

    pub fn cameras(&self) -> &[Camera; 4] {
        &self.cameras
    }

    /// Transform taking points in camera `from` into camera `to`.
    pub fn relative(&self, from: CameraRole, to: CameraRole) -> RigidTransform {
        self.camera(to)
            .extrinsic
            .compose(&self.camera(from).extrinsic.inverse())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for c in &self.cameras {
            let k = &c.intrinsics;
            let d = &k.dist;
            let r = &c.extrinsic.rotation;
            let t = &c.extrinsic.translation;
            let rot: Vec<String> = (0..3)
                .flat_map(|i| (0..3).map(move |j| (i, j)))
                .map(|(i, j)| r[(i, j)].to_string())
                .collect();
            let _ = writeln!(
                s,
                "role={} width={} height={} fx={} fy={} cx={} cy={} k1={} k2={} p1={} p2={} k3={} rotation={} translation={},{},{}",
                c.role.as_str(),
                c.width,
                c.height,
                k.fx,
                k.fy,
                k.cx,
                k.cy,
                d.k1,
                d.k2,
                d.p1,
                d.p2,
                d.k3,
                rot.join(","),
                t.x,
                t.y,
                t.z
            );
        }
        s
    }

    /// Parses the rig text format: one camera per line of space-separated
    /// `key=value` fields; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cams = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let content = line.split('#').next().unwrap_or("");
            if content.trim().is_empty() {
                continue;
            }
            cams.push(parse_camera_line(content, ln + 1)?);
        }
        let cams: [Camera; 4] = cams.try_into().map_err(|v: Vec<Camera>| Error::Parse {
            line: text.lines().count().max(1),
            column: 1,
            message: format!("expected 4 cameras, found {}", v.len()),
        })?;
        CameraRig::new(cams)
    }
}

/// Splits a line into `(column, key, value)` triples; columns are 1-based.
pub(crate) fn key_values(line: &str, line_no: usize) -> Result<Vec<(usize, &str, &str)>> {
    let mut out = Vec::new();
    let mut offset = 0;
    for token in line.split(' ') {
        let col = offset + 1;
        offset += token.len() + 1;
        if token.trim().is_empty() {
            continue;
        }
        let token = token.trim();
        match token.split_once('=') {
            Some((k, v)) if !k.is_empty() => out.push((col, k, v)),
            _ => {
                return Err(Error::Parse {
                    line: line_no,
                    column: col,
                    message: format!("expected key=value, got {token:?}"),
                })
            }
        }
    }
    Ok(out)
}

pub(crate) fn parse_floats(v: &str, n: usize, line: usize, column: usize) -> Result<Vec<f64>> {
    let vals: std::result::Result<Vec<f64>, _> = v.split(',').map(|s| s.trim().parse()).collect();
    match vals {
        Ok(vals) if vals.len() == n => Ok(vals),
        _ => Err(Error::Parse {
            line,
            column,
            message: format!("expected {n} comma-separated numbers, got {v:?}"),
        }),
    }
}

fn parse_camera_line(line: &str, ln: usize) -> Result<Camera> {
    let mut role = None;
    let (mut width, mut height) = (None, None);
    let mut k = [f64::NAN; 4];
    let mut d = [0.0; 5];
    let mut rotation = Matrix3::identity();
    let mut translation = Vector3::zeros();
    let perr = |column: usize, message: String| Error::Parse {
        line: ln,
        column,
        message,
    };
    for (col, key, val) in key_values(line, ln)? {
        let one = || -> Result<f64> { Ok(parse_floats(val, 1, ln, col)?[0]) };
        match key {
            "role" => role = Some(val.parse::<CameraRole>().map_err(|e| perr(col, e.to_string()))?),
            "width" | "height" => {
                let n: usize = val
                    .parse()
                    .map_err(|_| perr(col, format!("{key} must be a positive integer")))?;
                if key == "width" {
                    width = Some(n);
                } else {
                    height = Some(n);
                }
            }
            "fx" => k[0] = one()?,
            "fy" => k[1] = one()?,
            "cx" => k[2] = one()?,
            "cy" => k[3] = one()?,
            "k1" => d[0] = one()?,
            "k2" => d[1] = one()?,
            "p1" => d[2] = one()?,
            "p2" => d[3] = one()?,
            "k3" => d[4] = one()?,
            "rotation" => {
                rotation = Matrix3::from_row_slice(&parse_floats(val, 9, ln, col)?);
            }
            "translation" => {
                translation = Vector3::from_column_slice(&parse_floats(val, 3, ln, col)?);
            }
            other => return Err(perr(col, format!("unknown key {other:?}"))),
        }
    }
    let missing = |what: &str| perr(1, format!("missing {what}"));
    let role = role.ok_or_else(|| missing("role"))?;
    if k.iter().any(|v| v.is_nan()) {
        return Err(missing("fx, fy, cx or cy"));
    }
    let intrinsics = Intrinsics::new(k[0], k[1], k[2], k[3], Distortion::from_array(d))
        .map_err(|e| perr(1, e.to_string()))?;
    let extrinsic = RigidTransform::new(rotation, translation).map_err(|e| perr(1, e.to_string()))?;
    Ok(Camera {
        role,
        width: width.ok_or_else(|| missing("width"))?,
        height: height.ok_or_else(|| missing("height"))?,
        intrinsics,
        extrinsic,
    })
}
