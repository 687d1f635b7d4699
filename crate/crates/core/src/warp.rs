//! Cross-camera reprojection through a depth map and differentiable bilinear
//! backward warping.

use nalgebra::Vector2;
#[cfg(test)]
use nalgebra::Vector3;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{project_with_jacobian, Intrinsics, RigidTransform};
use crate::grid::Grid;
use crate::image::ImagePlane;
use crate::normals::PixelRays;

/// Per output pixel, the coordinate `(u, v)` to sample in a source image of
/// size `source_dims`, and its derivative with respect to the output pixel's
/// depth.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub source_dims: (usize, usize),
    pub u: Grid,
    pub v: Grid,
    /// `true` where `(u, v)` lies inside the source rectangle.
    pub mask: Vec<bool>,
    pub(crate) d_depth: Vec<Vector2<f64>>,
}

impl FlowField {
    /// The flow that samples every pixel at its own position.
    pub fn identity(width: usize, height: usize) -> Self {
        FlowField {
            width,
            height,
            source_dims: (width, height),
            u: Grid::from_fn(width, height, |x, _| x as f64),
            v: Grid::from_fn(width, height, |_, y| y as f64),
            mask: vec![true; width * height],
            d_depth: vec![Vector2::zeros(); width * height],
        }
    }

    /// A flow from explicit coordinates, with no depth dependence.
    pub fn from_coords(u: Grid, v: Grid, source_dims: (usize, usize)) -> Result<Self> {
        if !u.same_dims(&v) {
            return Err(Error::Arg("flow components differ in size".into()));
        }
        let (width, height) = u.dims();
        let mask = u
            .data()
            .iter()
            .zip(v.data())
            .map(|(&a, &b)| inside(a, b, source_dims))
            .collect();
        Ok(FlowField {
            width,
            height,
            source_dims,
            u,
            v,
            mask,
            d_depth: vec![Vector2::zeros(); width * height],
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    /// `∂(u, v)/∂d` of pixel `i` (zero for depth-independent flows).
    pub fn depth_derivative(&self, i: usize) -> Vector2<f64> {
        self.d_depth[i]
    }
}

const EDGE_TOL: f64 = 1e-9;

fn inside(u: f64, v: f64, (w, h): (usize, usize)) -> bool {
    u >= -EDGE_TOL && v >= -EDGE_TOL && u <= (w - 1) as f64 + EDGE_TOL && v <= (h - 1) as f64 + EDGE_TOL
}

/// Maps each pixel of the reference camera into the target camera:
/// `p = K_t · T · d(p) · K_r⁻¹ · p`, with distortion on both ends.
///
/// Pixels with invalid depth or landing behind the target camera are masked.
pub fn reproject_coords(
    depth: &Grid,
    reference: &Intrinsics,
    target: &Intrinsics,
    target_dims: (usize, usize),
    transform: &RigidTransform,
) -> Result<FlowField> {
    let (w, h) = depth.dims();
    let rays = PixelRays::new(reference, w, h)?;
    reproject_with_rays(depth, &rays, target, target_dims, transform)
}

pub(crate) fn reproject_with_rays(
    depth: &Grid,
    rays: &PixelRays,
    target: &Intrinsics,
    target_dims: (usize, usize),
    transform: &RigidTransform,
) -> Result<FlowField> {
    let (w, h) = depth.dims();
    if rays.dims() != (w, h) {
        return Err(Error::Arg("rays and depth differ in size".into()));
    }
    let per_pixel: Vec<(f64, f64, bool, Vector2<f64>)> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let (x, y) = (i % w, i / w);
            if !depth.is_valid_depth(x, y) {
                return (f64::NAN, f64::NAN, false, Vector2::zeros());
            }
            let ray = rays.get(x, y);
            let q = transform.apply(&(ray * depth[(x, y)]));
            match project_with_jacobian(&q, target) {
                Ok((p, j)) => {
                    let dq = transform.rotation * ray;
                    let dp = j * dq;
                    (p.x, p.y, inside(p.x, p.y, target_dims), dp)
                }
                Err(_) => (f64::NAN, f64::NAN, false, Vector2::zeros()),
            }
        })
        .collect();
    let mut u = Grid::zeros(w, h);
    let mut v = Grid::zeros(w, h);
    let mut mask = Vec::with_capacity(w * h);
    let mut d_depth = Vec::with_capacity(w * h);
    for (i, (a, b, m, dp)) in per_pixel.into_iter().enumerate() {
        u.data_mut()[i] = a;
        v.data_mut()[i] = b;
        mask.push(m);
        d_depth.push(dp);
    }
    Ok(FlowField {
        width: w,
        height: h,
        source_dims: target_dims,
        u,
        v,
        mask,
        d_depth,
    })
}

/// The `d → ∞` limit of [`reproject_coords`]: only the rotation acts, so the
/// flow is independent of depth and translation.
pub fn rotation_only_flow(
    reference: &Intrinsics,
    dims: (usize, usize),
    target: &Intrinsics,
    target_dims: (usize, usize),
    transform: &RigidTransform,
) -> Result<FlowField> {
    let rays = PixelRays::new(reference, dims.0, dims.1)?;
    rotation_flow_with_rays(&rays, target, target_dims, transform)
}

pub(crate) fn rotation_flow_with_rays(
    rays: &PixelRays,
    target: &Intrinsics,
    target_dims: (usize, usize),
    transform: &RigidTransform,
) -> Result<FlowField> {
    let (w, h) = rays.dims();
    let mut u = Grid::new(w, h, f64::NAN);
    let mut v = Grid::new(w, h, f64::NAN);
    for y in 0..h {
        for x in 0..w {
            let dir = transform.rotation * rays.get(x, y);
            if let Ok((p, _)) = project_with_jacobian(&dir, target) {
                u.set(x, y, p.x);
                v.set(x, y, p.y);
            }
        }
    }
    let mut flow = FlowField::from_coords(u, v, target_dims)?;
    for (m, (a, b)) in flow.mask.iter_mut().zip(flow.u.data().iter().zip(flow.v.data())) {
        *m &= a.is_finite() && b.is_finite();
    }
    Ok(flow)
}

/// Bilinear cell of a sample: top-left tap and fractional offsets. The cell
/// is kept inside the image so a sample on the last row or column uses the
/// cell to its left or above with weight 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub(crate) struct Cell {
    pub x0: usize,
    pub y0: usize,
}

#[inline]
fn cell(u: f64, v: f64, (w, h): (usize, usize)) -> (Cell, f64, f64) {
    let x0 = (u.floor() as usize).min(w.saturating_sub(2));
    let y0 = (v.floor() as usize).min(h.saturating_sub(2));
    (Cell { x0, y0 }, u - x0 as f64, v - y0 as f64)
}

/// Result of warping one channel: values, validity, and the per-pixel sample
/// derivative `∂value/∂(u, v)`.
#[derive(Clone, Debug)]
pub(crate) struct WarpedChannel {
    pub values: Grid,
    pub valid: Vec<bool>,
    pub d_uv: Vec<Vector2<f64>>,
}

pub(crate) fn warp_channel(src: &Grid, flow: &FlowField) -> Result<WarpedChannel> {
    if src.dims() != flow.source_dims {
        return Err(Error::Arg(format!(
            "source is {:?} but flow expects {:?}",
            src.dims(),
            flow.source_dims
        )));
    }
    let (sw, sh) = src.dims();
    if sw < 2 || sh < 2 {
        return Err(Error::Arg("bilinear sampling needs a source of at least 2x2".into()));
    }
    let (w, h) = flow.dims();
    let mut values = Grid::zeros(w, h);
    let mut valid = vec![false; w * h];
    let mut d_uv = vec![Vector2::zeros(); w * h];
    for i in 0..w * h {
        if !flow.mask[i] {
            continue;
        }
        let (c, fx, fy) = cell(flow.u.data()[i], flow.v.data()[i], src.dims());
        let s00 = src.get(c.x0, c.y0);
        let s10 = src.get(c.x0 + 1, c.y0);
        let s01 = src.get(c.x0, c.y0 + 1);
        let s11 = src.get(c.x0 + 1, c.y0 + 1);
        if !(s00.is_finite() && s10.is_finite() && s01.is_finite() && s11.is_finite()) {
            continue;
        }
        let top = s00 + fx * (s10 - s00);
        let bottom = s01 + fx * (s11 - s01);
        values.data_mut()[i] = top + fy * (bottom - top);
        d_uv[i] = Vector2::new(
            (1.0 - fy) * (s10 - s00) + fy * (s11 - s01),
            bottom - top,
        );
        valid[i] = true;
    }
    Ok(WarpedChannel { values, valid, d_uv })
}

/// Cotangent of a warp's source given the cotangent of its output.
pub(crate) fn warp_source_vjp(flow: &FlowField, valid: &[bool], g_out: &Grid, src_dims: (usize, usize)) -> Grid {
    let mut g = Grid::zeros(src_dims.0, src_dims.1);
    for i in 0..flow.width * flow.height {
        let go = g_out.data()[i];
        if !valid[i] || go == 0.0 {
            continue;
        }
        let (c, fx, fy) = cell(flow.u.data()[i], flow.v.data()[i], src_dims);
        g.add_at(c.x0, c.y0, go * (1.0 - fx) * (1.0 - fy));
        g.add_at(c.x0 + 1, c.y0, go * fx * (1.0 - fy));
        g.add_at(c.x0, c.y0 + 1, go * (1.0 - fx) * fy);
        g.add_at(c.x0 + 1, c.y0 + 1, go * fx * fy);
    }
    g
}

/// Hashable record of the bilinear cells used by a flow, for branch
/// fingerprinting.
pub(crate) fn flow_cells(flow: &FlowField) -> Vec<Option<Cell>> {
    (0..flow.width * flow.height)
        .map(|i| {
            flow.mask[i].then(|| cell(flow.u.data()[i], flow.v.data()[i], flow.source_dims).0)
        })
        .collect()
}

/// Bilinear backward warp of every channel. Samples outside the source, or
/// touching a non-finite source value, are 0 and reported invalid.
pub fn backward_warp(src: &ImagePlane, flow: &FlowField) -> Result<(ImagePlane, Vec<bool>)> {
    let mut valid = flow.mask.clone();
    let mut out = Vec::with_capacity(src.channels());
    for g in src.grids() {
        let warped = warp_channel(&g, flow)?;
        for (v, w) in valid.iter_mut().zip(&warped.valid) {
            *v &= *w;
        }
        out.push(warped.values);
    }
    for g in &mut out {
        for (x, &ok) in g.data_mut().iter_mut().zip(&valid) {
            if !ok {
                *x = 0.0;
            }
        }
    }
    Ok((ImagePlane::from_grids(&out)?, valid))
}

/// [`backward_warp`] on a single `f64` plane.
pub fn backward_warp_grid(src: &Grid, flow: &FlowField) -> Result<(Grid, Vec<bool>)> {
    let w = warp_channel(src, flow)?;
    Ok((w.values, w.valid))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn cam() -> Intrinsics {
        Intrinsics::pinhole(100.0, 100.0, 15.5, 11.5)
    }

    #[test]
    fn identity_transform_maps_pixels_to_themselves() {
        let depth = Grid::from_fn(32, 24, |x, y| 1.0 + 0.01 * (x + y) as f64);
        let f = reproject_coords(&depth, &cam(), &cam(), (32, 24), &RigidTransform::identity()).unwrap();
        for y in 0..24 {
            for x in 0..32 {
                assert_abs_diff_eq!(f.u.get(x, y), x as f64, epsilon = 1e-9);
                assert_abs_diff_eq!(f.v.get(x, y), y as f64, epsilon = 1e-9);
            }
        }
        assert!(f.mask.iter().all(|&m| m));
    }

    #[test]
    fn translation_gives_pinhole_disparity() {
        let depth = Grid::new(32, 24, 2.0);
        let t = RigidTransform::translation(Vector3::new(0.1, 0.0, 0.0));
        let f = reproject_coords(&depth, &cam(), &cam(), (32, 24), &t).unwrap();
        for y in 0..24 {
            for x in 0..32 {
                assert_abs_diff_eq!(f.u.get(x, y) - x as f64, 5.0, epsilon = 1e-9);
                assert_abs_diff_eq!(f.v.get(x, y), y as f64, epsilon = 1e-9);
            }
        }
        assert!(!f.mask[31] && f.mask[26] && !f.mask[27]);
    }

    #[test]
    fn far_depth_approaches_rotation_only_flow() {
        let t = RigidTransform::from_axis_angle(Vector3::new(0.01, -0.02, 0.005), Vector3::new(0.3, 0.1, -0.2));
        let depth = Grid::new(32, 24, 1e9);
        let far = reproject_coords(&depth, &cam(), &cam(), (32, 24), &t).unwrap();
        let rot = rotation_only_flow(&cam(), (32, 24), &cam(), (32, 24), &t).unwrap();
        for i in 0..32 * 24 {
            assert_abs_diff_eq!(far.u.data()[i], rot.u.data()[i], epsilon = 1e-6);
            assert_abs_diff_eq!(far.v.data()[i], rot.v.data()[i], epsilon = 1e-6);
        }
        let other = RigidTransform::new(t.rotation, Vector3::new(-5.0, 2.0, 1.0)).unwrap();
        let rot2 = rotation_only_flow(&cam(), (32, 24), &cam(), (32, 24), &other).unwrap();
        assert_eq!(rot.u, rot2.u);
    }

    #[test]
    fn behind_camera_is_masked() {
        let depth = Grid::new(4, 4, 1.0);
        let t = RigidTransform::translation(Vector3::new(0.0, 0.0, -2.0));
        let f = reproject_coords(&depth, &cam(), &cam(), (32, 24), &t).unwrap();
        assert!(f.mask.iter().all(|&m| !m));
    }

    #[test]
    fn depth_derivative_matches_finite_difference() {
        let k = Intrinsics::new(
            90.0,
            95.0,
            15.0,
            12.0,
            crate::geometry::Distortion { k1: 0.05, k2: -0.01, p1: 0.001, p2: -0.002, k3: 0.0 },
        )
        .unwrap();
        let t = RigidTransform::from_axis_angle(Vector3::new(0.02, 0.05, -0.01), Vector3::new(0.1, 0.02, 0.03));
        let depth = Grid::from_fn(8, 6, |x, y| 1.5 + 0.1 * x as f64 - 0.05 * y as f64);
        let f = reproject_coords(&depth, &k, &k, (32, 24), &t).unwrap();
        let eps = 1e-6;
        for i in 0..48 {
            let mut dp = depth.clone();
            dp.data_mut()[i] += eps;
            let mut dm = depth.clone();
            dm.data_mut()[i] -= eps;
            let fp = reproject_coords(&dp, &k, &k, (32, 24), &t).unwrap();
            let fm = reproject_coords(&dm, &k, &k, (32, 24), &t).unwrap();
            let du = (fp.u.data()[i] - fm.u.data()[i]) / (2.0 * eps);
            let dv = (fp.v.data()[i] - fm.v.data()[i]) / (2.0 * eps);
            assert_abs_diff_eq!(f.d_depth[i].x, du, epsilon = 1e-5);
            assert_abs_diff_eq!(f.d_depth[i].y, dv, epsilon = 1e-5);
        }
    }

    fn ramp() -> ImagePlane {
        let g = Grid::from_fn(8, 6, |x, y| 2.0 * x as f64 + 0.5 * y as f64);
        ImagePlane::from_grids(&[g]).unwrap()
    }

    #[test]
    fn identity_flow_returns_source() {
        let src = ramp();
        let (out, valid) = backward_warp(&src, &FlowField::identity(8, 6)).unwrap();
        assert_eq!(out, src);
        assert!(valid.iter().all(|&v| v));
    }

    #[test]
    fn integer_shift_shifts_ramp() {
        let src = ramp();
        let u = Grid::from_fn(8, 6, |x, _| x as f64 + 1.0);
        let v = Grid::from_fn(8, 6, |_, y| y as f64);
        let flow = FlowField::from_coords(u, v, (8, 6)).unwrap();
        let (out, valid) = backward_warp(&src, &flow).unwrap();
        for y in 0..6 {
            for x in 0..7 {
                assert_eq!(out.get(0, x, y), src.get(0, x + 1, y));
            }
            assert!(!valid[y * 8 + 7]);
            assert_eq!(out.get(0, 7, y), 0.0);
        }
    }

    #[test]
    fn half_pixel_shift_interpolates_linearly() {
        let src = ramp();
        let u = Grid::from_fn(8, 6, |x, _| (x as f64 + 0.5).min(7.0));
        let v = Grid::from_fn(8, 6, |_, y| (y as f64 + 0.5).min(5.0));
        let flow = FlowField::from_coords(u.clone(), v.clone(), (8, 6)).unwrap();
        let (out, _) = backward_warp(&src, &flow).unwrap();
        for y in 0..6 {
            for x in 0..8 {
                let want = 2.0 * u.get(x, y) + 0.5 * v.get(x, y);
                assert_abs_diff_eq!(out.get(0, x, y) as f64, want, epsilon = 1e-5);
            }
        }
    }

    #[test]
    fn non_finite_taps_are_masked() {
        let mut g = Grid::from_fn(4, 4, |x, _| x as f64);
        g.set(1, 1, f64::NAN);
        let u = Grid::new(1, 1, 0.5);
        let v = Grid::new(1, 1, 0.5);
        let flow = FlowField::from_coords(u, v, (4, 4)).unwrap();
        let (out, valid) = backward_warp_grid(&g, &flow).unwrap();
        assert!(!valid[0]);
        assert_eq!(out.data()[0], 0.0);
    }

    #[test]
    fn sample_derivative_matches_finite_difference() {
        let src = Grid::from_fn(10, 10, |x, y| ((x as f64) * 0.4).sin() + ((y as f64) * 0.3).cos());
        let (u0, v0) = (3.3, 4.7);
        let eps = 1e-7;
        let at = |u: f64, v: f64| {
            let flow = FlowField::from_coords(Grid::new(1, 1, u), Grid::new(1, 1, v), (10, 10)).unwrap();
            warp_channel(&src, &flow).unwrap()
        };
        let w = at(u0, v0);
        let du = (at(u0 + eps, v0).values.data()[0] - at(u0 - eps, v0).values.data()[0]) / (2.0 * eps);
        let dv = (at(u0, v0 + eps).values.data()[0] - at(u0, v0 - eps).values.data()[0]) / (2.0 * eps);
        assert_abs_diff_eq!(w.d_uv[0].x, du, epsilon = 1e-5);
        assert_abs_diff_eq!(w.d_uv[0].y, dv, epsilon = 1e-5);
    }

    #[test]
    fn source_vjp_is_adjoint_of_warp() {
        let src = Grid::from_fn(6, 5, |x, y| (x * 3 + y) as f64 * 0.1);
        let u = Grid::from_fn(4, 4, |x, y| 0.3 + x as f64 * 1.1 + 0.2 * y as f64);
        let v = Grid::from_fn(4, 4, |x, y| 0.7 + y as f64 * 0.9 - 0.1 * x as f64);
        let flow = FlowField::from_coords(u, v, (6, 5)).unwrap();
        let out = warp_channel(&src, &flow).unwrap();
        let probe = Grid::from_fn(4, 4, |x, y| 1.0 + (x as f64) - 0.5 * y as f64);
        let g = warp_source_vjp(&flow, &out.valid, &probe, (6, 5));
        let lhs: f64 = out.values.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = g.data().iter().zip(src.data()).map(|(a, b)| a * b).sum();
        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn warp_is_linear_in_source(
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
            shift in 0.0f64..2.5,
        ) {
            let x = Grid::from_fn(6, 6, |i, j| ((i * 7 + j * 3) % 5) as f64);
            let y = Grid::from_fn(6, 6, |i, j| (i as f64 * 0.3 - j as f64).sin());
            let u = Grid::from_fn(6, 6, |i, _| i as f64 * 0.7 + shift);
            let v = Grid::from_fn(6, 6, |_, j| j as f64 * 0.8 + shift * 0.5);
            let flow = FlowField::from_coords(u, v, (6, 6)).unwrap();
            let mix = Grid::from_vec(6, 6, x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect());
            let (wm, _) = backward_warp_grid(&mix, &flow).unwrap();
            let (wx, _) = backward_warp_grid(&x, &flow).unwrap();
            let (wy, _) = backward_warp_grid(&y, &flow).unwrap();
            for i in 0..36 {
                prop_assert!((wm.data()[i] - (a * wx.data()[i] + b * wy.data()[i])).abs() < 1e-12);
            }
        }
    }
}
