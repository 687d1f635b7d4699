//! Surface normals and view geometry from a depth field.
//!
//! Normals follow the orientation of the cross product `∂x P × ∂y P` of the
//! back-projected surface `P(x, y) = d(x, y) · ray(x, y)`: a fronto-parallel
//! plane has `n = (0, 0, 1)`. The viewing ray of a pixel uses the same
//! orientation (camera towards surface), so `cos θ = n · v` stays in `[0, 1]`
//! for visible surfaces.

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::Intrinsics;
use crate::grid::Grid;

/// Unit-depth rays `(x, y, 1)` of every pixel of a `width × height` image.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelRays {
    width: usize,
    height: usize,
    rays: Vec<Vector3<f64>>,
}

impl PixelRays {
    pub fn new(cam: &Intrinsics, width: usize, height: usize) -> Result<Self> {
        let mut rays = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                rays.push(cam.ray(Vector2::new(x as f64, y as f64))?);
            }
        }
        Ok(PixelRays {
            width,
            height,
            rays,
        })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Vector3<f64> {
        self.rays[y * self.width + x]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }
}

/// Per-pixel normals; `valid[i]` false marks pixels without support.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalField {
    pub width: usize,
    pub height: usize,
    pub normals: Vec<Vector3<f64>>,
    pub valid: Vec<bool>,
}

impl NormalField {
    pub fn get(&self, x: usize, y: usize) -> Option<Vector3<f64>> {
        let i = y * self.width + x;
        self.valid[i].then(|| self.normals[i])
    }
}

/// Viewing ray, viewing angle `θ ∈ [0, π/2]` and azimuth `α ∈ [0, 2π)` per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewField {
    pub width: usize,
    pub height: usize,
    pub view: Vec<Vector3<f64>>,
    pub theta: Grid,
    pub azimuth: Grid,
    pub valid: Vec<bool>,
}

/// Image-plane step of a directional difference.
pub(crate) type Step = (isize, isize);

/// Direction pairs `(a, b)` whose cross products are averaged; each pair is
/// positively oriented in the image plane.
pub(crate) const DIRECTION_PAIRS: [(Step, Step); 4] = [
    ((1, 0), (0, 1)),
    ((-1, 0), (0, -1)),
    ((1, 1), (-1, 1)),
    ((-1, -1), (1, -1)),
];

/// Start pixel `q` of the difference `f(q + step) - f(q)` used at `(x, y)`:
/// `(x, y)` itself when `q + step` is inside, otherwise the nearest pixel
/// for which it is (the last interior difference is replicated).
#[inline]
pub(crate) fn stencil_origin(x: usize, y: usize, step: Step, w: usize, h: usize) -> (usize, usize) {
    let clamp = |p: usize, s: isize, n: usize| -> usize {
        let lo = (-s).max(0) as usize;
        let hi = n - 1 - s.max(0) as usize;
        p.clamp(lo, hi)
    };
    (clamp(x, step.0, w), clamp(y, step.1, h))
}

#[inline]
pub(crate) fn offset(q: (usize, usize), step: Step) -> (usize, usize) {
    (
        (q.0 as isize + step.0) as usize,
        (q.1 as isize + step.1) as usize,
    )
}

fn require_support(depth: &Grid) -> Result<()> {
    if depth.width() < 2 || depth.height() < 2 {
        return Err(Error::Arg(format!(
            "normals need at least 2x2 pixels, got {}x{}",
            depth.width(),
            depth.height()
        )));
    }
    Ok(())
}

/// Closed-form normal from forward depth differences:
/// `n = [-fy ∂x d, -fx ∂y d, (x - cx) ∂x d + (y - cy) ∂y d + d]`, normalized.
pub fn normal_simple(depth: &Grid, cam: &Intrinsics) -> Result<NormalField> {
    require_support(depth)?;
    let (w, h) = depth.dims();
    let mut normals = vec![Vector3::zeros(); w * h];
    let mut valid = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let qx = stencil_origin(x, y, (1, 0), w, h);
            let qy = stencil_origin(x, y, (0, 1), w, h);
            let d = depth.get(x, y);
            let dx = depth[offset(qx, (1, 0))] - depth[qx];
            let dy = depth[offset(qy, (0, 1))] - depth[qy];
            let n = Vector3::new(
                -cam.fy * dx,
                -cam.fx * dy,
                (x as f64 - cam.cx) * dx + (y as f64 - cam.cy) * dy + d,
            );
            let norm = n.norm();
            if d > 0.0 && norm.is_finite() && norm > 0.0 {
                normals[y * w + x] = n / norm;
                valid[y * w + x] = true;
            }
        }
    }
    Ok(NormalField {
        width: w,
        height: h,
        normals,
        valid,
    })
}

/// One directional difference term of a weighted normal: the pixels its two
/// differences start from and its photometric weight.
#[derive(Clone, Copy, Debug)]
pub(crate) struct NormalTerm {
    pub qa: (usize, usize),
    pub qb: (usize, usize),
    pub weight: f64,
    pub active: bool,
}

/// Unnormalized weighted normals plus the stencil bookkeeping needed to
/// differentiate them.
#[derive(Clone, Debug)]
pub(crate) struct WeightedNormals {
    pub width: usize,
    pub height: usize,
    pub raw: Vec<Vector3<f64>>,
    pub valid: Vec<bool>,
    pub terms: Vec<[NormalTerm; 4]>,
}

pub(crate) fn guide_weights(guide: &Grid, x: usize, y: usize) -> [(f64, (usize, usize), (usize, usize)); 4] {
    let (w, h) = guide.dims();
    DIRECTION_PAIRS.map(|(a, b)| {
        let qa = stencil_origin(x, y, a, w, h);
        let qb = stencil_origin(x, y, b, w, h);
        let ga = (guide[offset(qa, a)] - guide[qa]).abs();
        let gb = (guide[offset(qb, b)] - guide[qb]).abs();
        ((-0.5 * ga).exp() * (-0.5 * gb).exp(), qa, qb)
    })
}

pub(crate) fn weighted_normals(
    depth: &Grid,
    guide: Option<&Grid>,
    rays: &PixelRays,
) -> Result<WeightedNormals> {
    require_support(depth)?;
    let (w, h) = depth.dims();
    if rays.dims() != (w, h) || guide.is_some_and(|g| g.dims() != (w, h)) {
        return Err(Error::Arg("depth, guide and rays must share one resolution".into()));
    }
    let point = |q: (usize, usize)| -> Option<Vector3<f64>> {
        depth
            .is_valid_depth(q.0, q.1)
            .then(|| rays.get(q.0, q.1) * depth[q])
    };
    let per_pixel: Vec<(Vector3<f64>, bool, [NormalTerm; 4])> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let (x, y) = (i % w, i / w);
            let weights = match guide {
                Some(g) => guide_weights(g, x, y).map(|t| t.0),
                None => [1.0; 4],
            };
            let mut n = Vector3::zeros();
            let mut any = false;
            let mut terms = [NormalTerm {
                qa: (0, 0),
                qb: (0, 0),
                weight: 0.0,
                active: false,
            }; 4];
            for (k, &(a, b)) in DIRECTION_PAIRS.iter().enumerate() {
                let qa = stencil_origin(x, y, a, w, h);
                let qb = stencil_origin(x, y, b, w, h);
                terms[k].qa = qa;
                terms[k].qb = qb;
                terms[k].weight = weights[k];
                let (Some(pa0), Some(pa1), Some(pb0), Some(pb1)) =
                    (point(qa), point(offset(qa, a)), point(qb), point(offset(qb, b)))
                else {
                    continue;
                };
                n += 0.25 * weights[k] * (pa1 - pa0).cross(&(pb1 - pb0));
                terms[k].active = true;
                any = true;
            }
            let ok = any && depth.is_valid_depth(x, y) && n.norm() > 0.0 && n.norm().is_finite();
            (n, ok, terms)
        })
        .collect();
    let mut raw = Vec::with_capacity(w * h);
    let mut valid = Vec::with_capacity(w * h);
    let mut terms = Vec::with_capacity(w * h);
    for (n, ok, t) in per_pixel {
        raw.push(n);
        valid.push(ok);
        terms.push(t);
    }
    Ok(WeightedNormals {
        width: w,
        height: h,
        raw,
        valid,
        terms,
    })
}

impl WeightedNormals {
    pub fn unit(&self) -> NormalField {
        NormalField {
            width: self.width,
            height: self.height,
            normals: self
                .raw
                .iter()
                .zip(&self.valid)
                .map(|(n, &ok)| if ok { n.normalize() } else { Vector3::zeros() })
                .collect(),
            valid: self.valid.clone(),
        }
    }

    /// Pulls a cotangent on the unnormalized normals back to the depth.
    pub fn vjp(&self, depth: &Grid, rays: &PixelRays, g_raw: &[Vector3<f64>]) -> Grid {
        let (w, h) = (self.width, self.height);
        let mut g = Grid::zeros(w, h);
        let mut scatter = |q: (usize, usize), gp: Vector3<f64>| {
            g.add_at(q.0, q.1, gp.dot(&rays.get(q.0, q.1)));
        };
        let point = |q: (usize, usize)| rays.get(q.0, q.1) * depth[q];
        for i in 0..w * h {
            if !self.valid[i] {
                continue;
            }
            let gn = g_raw[i];
            if gn == Vector3::zeros() {
                continue;
            }
            for (k, &(a, b)) in DIRECTION_PAIRS.iter().enumerate() {
                let t = self.terms[i][k];
                if !t.active {
                    continue;
                }
                let da = point(offset(t.qa, a)) - point(t.qa);
                let db = point(offset(t.qb, b)) - point(t.qb);
                let s = 0.25 * t.weight;
                // ∂(a × b)·g: a receives b × g, b receives g × a
                let ga = s * db.cross(&gn);
                let gb = s * gn.cross(&da);
                scatter(offset(t.qa, a), ga);
                scatter(t.qa, -ga);
                scatter(offset(t.qb, b), gb);
                scatter(t.qb, -gb);
            }
        }
        g
    }
}

/// Robust normal: the average of four directional cross products, each
/// weighted by `exp(-0.5 |∂ i_un|)` products, then normalized.
pub fn normal_weighted(depth: &Grid, i_un: &Grid, cam: &Intrinsics) -> Result<NormalField> {
    let rays = PixelRays::new(cam, depth.width(), depth.height())?;
    Ok(weighted_normals(depth, Some(i_un), &rays)?.unit())
}

/// Viewing angle and azimuth of every valid normal.
pub fn view_geometry(depth: &Grid, n: &NormalField, cam: &Intrinsics) -> Result<ViewField> {
    let (w, h) = depth.dims();
    if (n.width, n.height) != (w, h) {
        return Err(Error::Arg("depth and normals differ in size".into()));
    }
    let rays = PixelRays::new(cam, w, h)?;
    let mut view = Vec::with_capacity(w * h);
    let mut theta = Grid::new(w, h, f64::NAN);
    let mut azimuth = Grid::new(w, h, f64::NAN);
    let mut valid = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let v = rays.get(x, y).normalize();
            view.push(v);
            if !(n.valid[i] && depth.is_valid_depth(x, y)) {
                continue;
            }
            let nn = n.normals[i].normalize();
            theta.set(x, y, nn.dot(&v).clamp(0.0, 1.0).acos());
            azimuth.set(x, y, wrap_azimuth(nn.y.atan2(nn.x)));
            valid[i] = true;
        }
    }
    Ok(ViewField {
        width: w,
        height: h,
        view,
        theta,
        azimuth,
        valid,
    })
}

/// Maps an `atan2` result into `[0, 2π)`.
pub fn wrap_azimuth(a: f64) -> f64 {
    let tau = std::f64::consts::TAU;
    let r = a.rem_euclid(tau);
    if r >= tau {
        0.0
    } else {
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn cam(f: f64, c: f64) -> Intrinsics {
        Intrinsics::pinhole(f, f, c, c)
    }

    #[test]
    fn constant_depth_faces_camera() {
        let d = Grid::new(6, 5, 2.5);
        let k = cam(40.0, 3.0);
        for n in [
            normal_simple(&d, &k).unwrap(),
            normal_weighted(&d, &Grid::from_fn(6, 5, |x, y| (x * y) as f64 * 0.3), &k).unwrap(),
        ] {
            for (v, ok) in n.normals.iter().zip(&n.valid) {
                assert!(ok);
                assert_abs_diff_eq!(v.x, 0.0, epsilon = 1e-12);
                assert_abs_diff_eq!(v.y, 0.0, epsilon = 1e-12);
                assert_abs_diff_eq!(v.z, 1.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn single_pixel_has_no_support() {
        let d = Grid::new(1, 4, 1.0);
        assert!(matches!(normal_simple(&d, &cam(10.0, 0.0)), Err(Error::Arg(_))));
        assert!(matches!(
            normal_weighted(&d, &Grid::new(1, 4, 0.0), &cam(10.0, 0.0)),
            Err(Error::Arg(_))
        ));
    }

    #[test]
    fn simple_normal_on_a_ramp() {
        // d = a (x - cx) + d0 at the principal point: (-f a, 0, d0) before normalization
        let (f, c, a, d0) = (50.0, 4.0, 0.01, 2.0);
        let d = Grid::from_fn(9, 9, |x, _| a * (x as f64 - c) + d0);
        let n = normal_simple(&d, &cam(f, c)).unwrap();
        let expected = Vector3::new(-f * a, 0.0, d0).normalize();
        let got = n.get(4, 4).unwrap();
        assert_abs_diff_eq!((got - expected).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn simple_normal_scale_invariance_on_flat_depth() {
        let k = cam(30.0, 2.0);
        let a = normal_simple(&Grid::new(5, 5, 1.0), &k).unwrap();
        let b = normal_simple(&Grid::new(5, 5, 7.0), &k).unwrap();
        assert_eq!(a.normals, b.normals);
    }

    #[test]
    fn uniform_guide_is_the_plain_average() {
        let k = cam(20.0, 3.5);
        let d = Grid::from_fn(8, 7, |x, y| 2.0 + 0.1 * (x as f64 * 0.7).sin() + 0.05 * y as f64);
        let rays = PixelRays::new(&k, 8, 7).unwrap();
        let weighted = weighted_normals(&d, Some(&Grid::new(8, 7, 0.4)), &rays).unwrap();
        let plain = weighted_normals(&d, None, &rays).unwrap();
        assert_eq!(weighted.raw, plain.raw);
    }

    /// Values frozen from an independent evaluation of the four-direction
    /// scheme (see `tools/oracles.py`).
    #[test]
    fn weighted_normals_match_reference_values() {
        let k = Intrinsics::pinhole(5.0, 6.0, 1.5, 1.2);
        let d = Grid::from_vec(
            4,
            3,
            vec![2.0, 2.1, 2.3, 2.2, 1.9, 2.05, 2.4, 2.35, 1.8, 2.0, 2.5, 2.6],
        );
        let guide = Grid::from_vec(
            4,
            3,
            vec![0.1, 0.5, 0.2, 0.9, 0.3, 0.3, 0.7, 0.1, 0.8, 0.6, 0.4, 0.2],
        );
        let n = normal_weighted(&d, &guide, &k).unwrap();
        let expected: [(usize, usize, [f64; 3]); 4] = [
            (0, 0, include!("../tests/data/normal_ref_0_0.in")),
            (1, 1, include!("../tests/data/normal_ref_1_1.in")),
            (3, 2, include!("../tests/data/normal_ref_3_2.in")),
            (2, 0, include!("../tests/data/normal_ref_2_0.in")),
        ];
        for (x, y, e) in expected {
            let got = n.get(x, y).unwrap();
            for c in 0..3 {
                assert_abs_diff_eq!(got[c], e[c], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn weighted_vjp_matches_finite_differences() {
        let k = Intrinsics::pinhole(9.0, 8.0, 2.6, 2.1);
        let d = Grid::from_fn(6, 5, |x, y| {
            2.0 + 0.2 * (0.9 * x as f64).sin() + 0.15 * (0.7 * y as f64).cos()
        });
        let guide = Grid::from_fn(6, 5, |x, y| ((x * 3 + y * 5) % 7) as f64 / 7.0);
        let rays = PixelRays::new(&k, 6, 5).unwrap();
        let base = weighted_normals(&d, Some(&guide), &rays).unwrap();
        let cot: Vec<Vector3<f64>> = (0..30)
            .map(|i| Vector3::new((i as f64 * 0.37).sin(), (i as f64 * 0.11).cos(), 0.3))
            .collect();
        let g = base.vjp(&d, &rays, &cot);
        let f = |dd: &Grid| -> f64 {
            let n = weighted_normals(dd, Some(&guide), &rays).unwrap();
            n.raw.iter().zip(&cot).map(|(a, b)| a.dot(b)).sum()
        };
        let eps = 1e-6;
        for i in 0..30 {
            let mut p = d.clone();
            let mut m = d.clone();
            p.data_mut()[i] += eps;
            m.data_mut()[i] -= eps;
            let fd = (f(&p) - f(&m)) / (2.0 * eps);
            assert_abs_diff_eq!(g.data()[i], fd, epsilon = 1e-7);
        }
    }

    #[test]
    fn view_angles() {
        let k = cam(10.0, 2.0);
        let d = Grid::new(5, 5, 3.0);
        let n = normal_simple(&d, &k).unwrap();
        let v = view_geometry(&d, &n, &k).unwrap();
        assert_abs_diff_eq!(v.theta.get(2, 2), 0.0, epsilon = 1e-12);

        let mut tilted = n.clone();
        tilted.normals[0] = Vector3::new(1.0, 0.0, 0.0);
        tilted.normals[1] = Vector3::new(0.0, 1.0, 0.0);
        tilted.normals[2] = Vector3::new(-1.0, -1e-300, 0.0);
        let v = view_geometry(&d, &tilted, &k).unwrap();
        assert_abs_diff_eq!(v.azimuth.get(0, 0), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(v.azimuth.get(1, 0), FRAC_PI_2, epsilon = 1e-15);
        let a = v.azimuth.get(2, 0);
        assert!((0.0..2.0 * PI).contains(&a));
        for (t, ok) in v.theta.data().iter().zip(&v.valid) {
            if *ok {
                assert!((0.0..=FRAC_PI_2).contains(t));
            }
        }
    }

    #[test]
    fn view_angle_on_slanted_plane() {
        let (f, c, a, d0) = (50.0, 4.0, 0.01, 2.0);
        let k = cam(f, c);
        let d = Grid::from_fn(9, 9, |x, _| a * (x as f64 - c) + d0);
        let n = normal_simple(&d, &k).unwrap();
        let v = view_geometry(&d, &n, &k).unwrap();
        // at (cx, cy) the ray is the optical axis
        let cos = Vector3::new(-f * a, 0.0, d0).normalize().z;
        assert_abs_diff_eq!(v.theta.get(4, 4), cos.acos(), epsilon = 1e-12);
    }

    /// Analytic sphere: the normal error must shrink roughly by half when the
    /// sampling density doubles.
    #[test]
    fn sphere_normals_converge_first_order() {
        let error_at = |n: usize| -> f64 {
            let f = n as f64 * 1.2;
            let c = (n as f64 - 1.0) / 2.0;
            let k = cam(f, c);
            let (centre, r) = (Vector3::new(0.0, 0.0, 4.0), 1.0);
            let rays = PixelRays::new(&k, n, n).unwrap();
            let hit = |x: usize, y: usize| -> Option<Vector3<f64>> {
                let dir = rays.get(x, y);
                let b = dir.dot(&centre);
                let a = dir.norm_squared();
                let disc = b * b - a * (centre.norm_squared() - r * r);
                (disc >= 0.0).then(|| dir * ((b - disc.sqrt()) / a))
            };
            let d = Grid::from_fn(n, n, |x, y| hit(x, y).map_or(f64::NAN, |p| p.z));
            let normals = weighted_normals(&d, None, &rays).unwrap().unit();
            let mut worst: f64 = 0.0;
            for y in 0..n {
                for x in 0..n {
                    let Some(p) = hit(x, y) else { continue };
                    // only pixels well inside the silhouette
                    if (p - centre).z > -0.6 {
                        continue;
                    }
                    // +z points away from the camera, so the expected normal faces inward
                    let truth = (centre - p).normalize();
                    if let Some(nv) = normals.get(x, y) {
                        worst = worst.max((nv - truth).norm());
                    }
                }
            }
            worst
        };
        let e1 = error_at(24);
        let e2 = error_at(48);
        let e3 = error_at(96);
        assert!(e2 < 0.65 * e1, "{e1} -> {e2}");
        assert!(e3 < 0.65 * e2, "{e2} -> {e3}");
    }
}
