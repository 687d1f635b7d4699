//! Parametric scenes ray-cast into every camera of the rig and rendered
//! through the sensor models.
//!
//! Scene text format, one item per line, `#` starts a comment:
//!
//! ```text
//! scene eta=1.5
//! plane point=0,0,2 normal=0,0,-1 texture=sines period=0.25 contrast=0.6
//! sphere center=0,0,1.6 radius=0.3 reflection=specular albedo=0.7
//! box center=0.3,0,1.8 size=0.2,0.2,0.2 rotation=0,0.4,0
//! ```
//!
//! Coordinates are in metres in the left polarisation camera frame. Shared
//! material keys: `albedo`, `texture` (`none`, `checker`, `sines`),
//! `period`, `contrast`, `reflection` (`diffuse`, `specular`), `itof_alpha`,
//! `itof_beta`. Planes accept an optional `radius` that bounds them to a disc.

use std::f64::consts::TAU;
use std::fmt::Write as _;

use nalgebra::{Rotation3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{
    key_values, parse_floats, Camera, CameraRig, CameraRole, Distortion, Intrinsics, RigidTransform,
};
use crate::grid::Grid;
use crate::image::{
    CorrelationImage, DepthField, FrameBundle, ImagePlane, PolarisationImage, TemporalFrame,
};
use crate::itof::{correlation_grids, ItofConfig};
use crate::normals::PixelRays;
use crate::polarisation::{render_polarisation_grids, Reflection, DEFAULT_ETA};

/// Structured-light depth beyond this distance from its camera is dropped.
pub const STRUCT_MAX_RANGE: f64 = 10.0;

#[derive(Clone, Debug, PartialEq)]
pub enum Shape {
    Plane {
        point: Vector3<f64>,
        normal: Vector3<f64>,
        radius: Option<f64>,
    },
    Sphere {
        center: Vector3<f64>,
        radius: f64,
    },
    Cuboid {
        center: Vector3<f64>,
        half_size: Vector3<f64>,
        /// Box-to-scene rotation as an axis-angle vector.
        rotation: Vector3<f64>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Texture {
    None,
    /// 3-D checkerboard with cells of `period` metres.
    Checker { period: f64, contrast: f64 },
    /// Three oriented sines, the slowest with wavelength `period` metres.
    Sines { period: f64, contrast: f64 },
}

impl Texture {
    /// Multiplicative modulation in `[1 − contrast, 1 + contrast]`.
    fn factor(&self, p: &Vector3<f64>) -> f64 {
        match *self {
            Texture::None => 1.0,
            Texture::Checker { period, contrast } => {
                let s = (p.x / period).floor() + (p.y / period).floor() + (p.z / period).floor();
                if (s as i64).rem_euclid(2) == 0 {
                    1.0 + contrast
                } else {
                    1.0 - contrast
                }
            }
            Texture::Sines { period, contrast } => {
                let k = TAU / period;
                let t = ((k * (p.x + 0.3 * p.y)).sin()
                    + (1.37 * k * (0.8 * p.x - 0.6 * p.y + 0.2 * p.z) + 1.0).sin()
                    + (0.71 * k * (0.5 * p.x + 0.9 * p.y + 0.4 * p.z) + 2.0).sin())
                    / 3.0;
                1.0 + contrast * t
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Material {
    pub albedo: f64,
    pub texture: Texture,
    pub reflection: Reflection,
    /// i-ToF reflectance: correlation amplitude.
    pub itof_alpha: f64,
    /// i-ToF ambient offset.
    pub itof_beta: f64,
}

impl Default for Material {
    fn default() -> Self {
        Material {
            albedo: 0.5,
            texture: Texture::None,
            reflection: Reflection::Diffuse,
            itof_alpha: 1.0,
            itof_beta: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub material: Material,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub primitives: Vec<Primitive>,
    pub eta: f64,
}

/// Gaussian noise levels per modality, in the units of each modality, and
/// the seed of the counter-based generator.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct NoiseSpec {
    pub pol_sigma: f64,
    pub corr_sigma: f64,
    pub struct_sigma: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, s) in [
            ("pol_sigma", self.pol_sigma),
            ("corr_sigma", self.corr_sigma),
            ("struct_sigma", self.struct_sigma),
        ] {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::Arg(format!("{name} must be a non-negative number")));
            }
        }
        Ok(())
    }
}

/// First surface hit along a pixel ray.
#[derive(Clone, Copy, Debug)]
struct Hit {
    /// Distance along the ray whose camera-frame z component is 1, i.e. the
    /// z-depth in that camera.
    t: f64,
    primitive: usize,
    point: Vector3<f64>,
}

fn intersect(shape: &Shape, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
    const EPS: f64 = 1e-12;
    match shape {
        Shape::Plane { point, normal, radius } => {
            let den = normal.dot(d);
            if den.abs() < EPS {
                return None;
            }
            let t = normal.dot(&(point - o)) / den;
            if t <= EPS {
                return None;
            }
            if let Some(r) = radius {
                if (o + d * t - point).norm() > *r {
                    return None;
                }
            }
            Some(t)
        }
        Shape::Sphere { center, radius } => {
            let oc = o - center;
            let a = d.dot(d);
            let b = oc.dot(d);
            let c = oc.dot(&oc) - radius * radius;
            let disc = b * b - a * c;
            if disc < 0.0 {
                return None;
            }
            let s = disc.sqrt();
            let t0 = (-b - s) / a;
            let t1 = (-b + s) / a;
            if t0 > EPS {
                Some(t0)
            } else if t1 > EPS {
                Some(t1)
            } else {
                None
            }
        }
        Shape::Cuboid {
            center,
            half_size,
            rotation,
        } => {
            let r = Rotation3::from_scaled_axis(*rotation);
            let ob = r.inverse_transform_vector(&(o - center));
            let db = r.inverse_transform_vector(d);
            let (mut near, mut far) = (f64::NEG_INFINITY, f64::INFINITY);
            for k in 0..3 {
                if db[k].abs() < EPS {
                    if ob[k].abs() > half_size[k] {
                        return None;
                    }
                    continue;
                }
                let t1 = (-half_size[k] - ob[k]) / db[k];
                let t2 = (half_size[k] - ob[k]) / db[k];
                near = near.max(t1.min(t2));
                far = far.min(t1.max(t2));
            }
            if near > far || far <= EPS {
                None
            } else if near > EPS {
                Some(near)
            } else {
                Some(far)
            }
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.primitives.is_empty() {
            return Err(Error::Arg("scene has no primitives".into()));
        }
        if !(self.eta > 1.0) {
            return Err(Error::Arg("eta must exceed 1".into()));
        }
        for (i, p) in self.primitives.iter().enumerate() {
            let bad = |m: &str| Err(Error::Arg(format!("primitive {i}: {m}")));
            match &p.shape {
                Shape::Plane { normal, radius, .. } => {
                    if !(normal.norm() > 0.0) {
                        return bad("plane normal is zero");
                    }
                    if radius.is_some_and(|r| !(r > 0.0)) {
                        return bad("plane radius must be positive");
                    }
                }
                Shape::Sphere { radius, .. } => {
                    if !(*radius > 0.0) {
                        return bad("sphere radius must be positive");
                    }
                }
                Shape::Cuboid { half_size, .. } => {
                    if half_size.iter().any(|&s| !(s > 0.0)) {
                        return bad("box size must be positive");
                    }
                }
            }
            let m = &p.material;
            if !(m.albedo >= 0.0) || !(m.itof_alpha >= 0.0) || !m.itof_beta.is_finite() {
                return bad("albedo and itof_alpha must be non-negative");
            }
            match m.texture {
                Texture::Checker { period, contrast } | Texture::Sines { period, contrast } => {
                    if !(period > 0.0) || !(0.0..=1.0).contains(&contrast) {
                        return bad("texture needs period > 0 and contrast in [0, 1]");
                    }
                }
                Texture::None => {}
            }
        }
        Ok(())
    }

    fn cast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for (i, p) in self.primitives.iter().enumerate() {
            if let Some(t) = intersect(&p.shape, origin, dir) {
                if best.is_none_or(|b| t < b.t) {
                    best = Some(Hit {
                        t,
                        primitive: i,
                        point: origin + dir * t,
                    });
                }
            }
        }
        best
    }

    /// Nearest hit of every pixel of `cam`, viewed from `pose` (scene frame
    /// to camera frame).
    fn cast_camera(&self, intrinsics: &Intrinsics, dims: (usize, usize), pose: &RigidTransform) -> Result<Vec<Option<Hit>>> {
        let rays = PixelRays::new(intrinsics, dims.0, dims.1)?;
        let inv = pose.inverse();
        let origin = inv.translation;
        Ok((0..dims.0 * dims.1)
            .into_par_iter()
            .map(|i| {
                let dir = inv.rotation * rays.get(i % dims.0, i / dims.0);
                self.cast(&origin, &dir)
            })
            .collect())
    }

    /// Pixels of `cam` whose nearest surface is primitive `index`.
    pub fn primitive_mask(&self, cam: &Camera, index: usize) -> Result<Vec<bool>> {
        if index >= self.primitives.len() {
            return Err(Error::Arg(format!("scene has no primitive {index}")));
        }
        let hits = self.cast_camera(&cam.intrinsics, (cam.width, cam.height), &cam.extrinsic)?;
        Ok(hits.iter().map(|h| h.is_some_and(|h| h.primitive == index)).collect())
    }

    /// z-depth of the nearest surface per pixel; misses are `NaN`.
    pub fn render_depth(&self, cam: &Camera) -> Result<DepthField> {
        Ok(DepthField::from_grid(&self.depth_grid(&cam.intrinsics, (cam.width, cam.height), &cam.extrinsic)?))
    }

    pub(crate) fn depth_grid(&self, k: &Intrinsics, dims: (usize, usize), pose: &RigidTransform) -> Result<Grid> {
        let hits = self.cast_camera(k, dims, pose)?;
        Ok(Grid::from_vec(
            dims.0,
            dims.1,
            hits.iter().map(|h| h.map_or(f64::NAN, |h| h.t)).collect(),
        ))
    }

    /// Depth, unpolarised intensity and reflection type seen by one camera.
    fn appearance(
        &self,
        k: &Intrinsics,
        dims: (usize, usize),
        pose: &RigidTransform,
    ) -> Result<(Grid, Grid, Vec<Reflection>, Vec<Option<usize>>)> {
        let hits = self.cast_camera(k, dims, pose)?;
        let (w, h) = dims;
        let mut depth = Grid::new(w, h, f64::NAN);
        let mut i_un = Grid::zeros(w, h);
        let mut refl = vec![Reflection::Diffuse; w * h];
        let mut prim = vec![None; w * h];
        for (i, hit) in hits.iter().enumerate() {
            if let Some(hit) = hit {
                let m = &self.primitives[hit.primitive].material;
                depth.data_mut()[i] = hit.t;
                i_un.data_mut()[i] = m.albedo * m.texture.factor(&hit.point);
                refl[i] = m.reflection;
                prim[i] = Some(hit.primitive);
            }
        }
        Ok((depth, i_un, refl, prim))
    }

    fn render_pol(&self, k: &Intrinsics, dims: (usize, usize), pose: &RigidTransform) -> Result<(Grid, [Grid; 4])> {
        let (depth, i_un, refl, _) = self.appearance(k, dims, pose)?;
        let planes = render_polarisation_grids(&depth, &i_un, k, self.eta, &refl)?;
        Ok((depth, planes))
    }

    /// Renders every modality of `rig` with optional noise. Deterministic for
    /// a fixed `noise.seed`, independent of thread count.
    pub fn render_frame(&self, rig: &CameraRig, noise: &NoiseSpec, frame_id: u64) -> Result<FrameBundle> {
        self.validate()?;
        noise.validate()?;
        let cam = |r: CameraRole| rig.camera(r);
        let cl = cam(CameraRole::PolLeft);
        let cr = cam(CameraRole::PolRight);
        let cc = cam(CameraRole::Itof);
        let cs = cam(CameraRole::StructuredLight);

        let (depth_l, mut left) = self.render_pol(&cl.intrinsics, (cl.width, cl.height), &cl.extrinsic)?;
        let (_, mut right) = self.render_pol(&cr.intrinsics, (cr.width, cr.height), &cr.extrinsic)?;
        add_noise(&mut left, noise.pol_sigma, noise.seed, 0);
        add_noise(&mut right, noise.pol_sigma, noise.seed, 1);

        let (depth_c, _, _, prim_c) = self.appearance(&cc.intrinsics, (cc.width, cc.height), &cc.extrinsic)?;
        let (cw, ch) = (cc.width, cc.height);
        let mut amp = Grid::zeros(cw, ch);
        let mut off = Grid::zeros(cw, ch);
        let mut d_safe = depth_c.clone();
        for i in 0..cw * ch {
            match prim_c[i] {
                Some(p) => {
                    let m = &self.primitives[p].material;
                    amp.data_mut()[i] = m.itof_alpha;
                    off.data_mut()[i] = m.itof_beta;
                }
                None => d_safe.data_mut()[i] = 0.0,
            }
        }
        let mut corr = correlation_grids(&d_safe, &amp, &off, &ItofConfig::default())?;
        add_noise(&mut corr, noise.corr_sigma, noise.seed, 2);

        let t_ls = rig.relative(CameraRole::PolLeft, CameraRole::StructuredLight);
        let rays_l = PixelRays::new(&cl.intrinsics, cl.width, cl.height)?;
        let mut struct_depth = depth_l.clone();
        for y in 0..cl.height {
            for x in 0..cl.width {
                let d = depth_l.get(x, y);
                if !d.is_finite() {
                    continue;
                }
                let q = t_ls.apply(&(rays_l.get(x, y) * d));
                let in_view = q.z > 0.0
                    && crate::geometry::project(&q, &cs.intrinsics).is_ok_and(|p| {
                        p.x >= -0.5 && p.y >= -0.5 && p.x < cs.width as f64 - 0.5 && p.y < cs.height as f64 - 0.5
                    });
                if !in_view || q.z > STRUCT_MAX_RANGE {
                    struct_depth.set(x, y, f64::NAN);
                }
            }
        }
        if noise.struct_sigma > 0.0 {
            let mut g = [struct_depth];
            add_noise(&mut g, noise.struct_sigma, noise.seed, 3);
            [struct_depth] = g;
        }

        let bundle = FrameBundle {
            pol_left: PolarisationImage::new(ImagePlane::from_grids(&left)?)?,
            pol_right: PolarisationImage::new(ImagePlane::from_grids(&right)?)?,
            corr: CorrelationImage::new(ImagePlane::from_grids(&corr)?)?,
            struct_depth: Some(DepthField::from_grid(&struct_depth)),
            gt_depth: Some(DepthField::from_grid(&depth_l)),
            rig: rig.clone(),
            frame_id,
            temporal: Vec::new(),
        };
        bundle.validate()?;
        Ok(bundle)
    }

    /// Left-camera polarisation images seen from further poses (scene frame
    /// to view frame).
    pub fn render_temporal(&self, rig: &CameraRig, poses: &[RigidTransform], noise: &NoiseSpec) -> Result<Vec<TemporalFrame>> {
        let cl = rig.camera(CameraRole::PolLeft);
        poses
            .iter()
            .enumerate()
            .map(|(k, pose)| {
                let (_, mut planes) = self.render_pol(&cl.intrinsics, (cl.width, cl.height), pose)?;
                add_noise(&mut planes, noise.pol_sigma, noise.seed, 16 + k as u64);
                Ok(TemporalFrame {
                    image: PolarisationImage::new(ImagePlane::from_grids(&planes)?)?,
                    pose: *pose,
                })
            })
            .collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut scene = SceneSpec {
            primitives: Vec::new(),
            eta: DEFAULT_ETA,
        };
        let mut seen_scene = false;
        for (ln, raw) in text.lines().enumerate() {
            let line_no = ln + 1;
            let content = raw.split('#').next().unwrap_or("");
            let trimmed = content.trim_start();
            if trimmed.is_empty() {
                continue;
            }
            let lead = content.len() - trimmed.len();
            let (kind, rest) = trimmed.split_once(' ').unwrap_or((trimmed, ""));
            let base = lead + kind.len() + 1;
            let fields: Vec<(usize, &str, &str)> = key_values(rest, line_no)?
                .into_iter()
                .map(|(c, k, v)| (c + base, k, v))
                .collect();
            let perr = |column: usize, message: String| Error::Parse {
                line: line_no,
                column,
                message,
            };
            match kind {
                "scene" => {
                    if seen_scene {
                        return Err(perr(lead + 1, "duplicate scene line".into()));
                    }
                    seen_scene = true;
                    for (col, k, v) in fields {
                        match k {
                            "eta" => scene.eta = parse_floats(v, 1, line_no, col)?[0],
                            _ => return Err(perr(col, format!("unknown key {k:?}"))),
                        }
                    }
                }
                "plane" | "sphere" | "box" => scene.primitives.push(parse_primitive(kind, &fields, line_no, lead + 1)?),
                _ => return Err(perr(lead + 1, format!("unknown item {kind:?}"))),
            }
        }
        scene.validate().map_err(|e| Error::Parse {
            line: text.lines().count().max(1),
            column: 1,
            message: e.to_string(),
        })?;
        Ok(scene)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("scene eta={}\n", self.eta);
        let v = |v: &Vector3<f64>| format!("{},{},{}", v.x, v.y, v.z);
        for p in &self.primitives {
            match &p.shape {
                Shape::Plane { point, normal, radius } => {
                    let _ = write!(s, "plane point={} normal={}", v(point), v(normal));
                    if let Some(r) = radius {
                        let _ = write!(s, " radius={r}");
                    }
                }
                Shape::Sphere { center, radius } => {
                    let _ = write!(s, "sphere center={} radius={radius}", v(center));
                }
                Shape::Cuboid {
                    center,
                    half_size,
                    rotation,
                } => {
                    let _ = write!(s, "box center={} size={} rotation={}", v(center), v(&(half_size * 2.0)), v(rotation));
                }
            }
            let m = &p.material;
            let _ = write!(s, " albedo={}", m.albedo);
            match m.texture {
                Texture::None => {}
                Texture::Checker { period, contrast } => {
                    let _ = write!(s, " texture=checker period={period} contrast={contrast}");
                }
                Texture::Sines { period, contrast } => {
                    let _ = write!(s, " texture=sines period={period} contrast={contrast}");
                }
            }
            let refl = match m.reflection {
                Reflection::Diffuse => "diffuse",
                Reflection::Specular => "specular",
            };
            let _ = writeln!(s, " reflection={refl} itof_alpha={} itof_beta={}", m.itof_alpha, m.itof_beta);
        }
        s
    }
}

fn parse_primitive(kind: &str, fields: &[(usize, &str, &str)], line: usize, kind_col: usize) -> Result<Primitive> {
    let perr = |column: usize, message: String| Error::Parse {
        line,
        column,
        message,
    };
    let vec3 = |v: &str, col: usize| -> Result<Vector3<f64>> {
        let f = parse_floats(v, 3, line, col)?;
        Ok(Vector3::new(f[0], f[1], f[2]))
    };
    let one = |v: &str, col: usize| -> Result<f64> { Ok(parse_floats(v, 1, line, col)?[0]) };
    let mut m = Material::default();
    let mut texture_kind = "none";
    let (mut period, mut contrast) = (0.25, 0.5);
    let mut a: Option<Vector3<f64>> = None;
    let mut b: Option<Vector3<f64>> = None;
    let mut radius: Option<f64> = None;
    let mut rotation = Vector3::zeros();
    for &(col, k, v) in fields {
        match (kind, k) {
            (_, "albedo") => m.albedo = one(v, col)?,
            (_, "texture") => {
                texture_kind = match v {
                    "none" | "checker" | "sines" => v,
                    _ => return Err(perr(col, format!("unknown texture {v:?}"))),
                }
            }
            (_, "period") => period = one(v, col)?,
            (_, "contrast") => contrast = one(v, col)?,
            (_, "reflection") => m.reflection = v.parse().map_err(|e: Error| perr(col, e.to_string()))?,
            (_, "itof_alpha") => m.itof_alpha = one(v, col)?,
            (_, "itof_beta") => m.itof_beta = one(v, col)?,
            ("plane", "point") | ("sphere", "center") | ("box", "center") => a = Some(vec3(v, col)?),
            ("plane", "normal") | ("box", "size") => b = Some(vec3(v, col)?),
            ("plane", "radius") | ("sphere", "radius") => radius = Some(one(v, col)?),
            ("box", "rotation") => rotation = vec3(v, col)?,
            _ => return Err(perr(col, format!("unknown key {k:?} for {kind}"))),
        }
    }
    m.texture = match texture_kind {
        "checker" => Texture::Checker { period, contrast },
        "sines" => Texture::Sines { period, contrast },
        _ => Texture::None,
    };
    let need = |x: Option<Vector3<f64>>, name: &str| x.ok_or_else(|| perr(kind_col, format!("{kind} needs {name}")));
    let shape = match kind {
        "plane" => Shape::Plane {
            point: need(a, "point")?,
            normal: need(b, "normal")?,
            radius,
        },
        "sphere" => Shape::Sphere {
            center: need(a, "center")?,
            radius: radius.ok_or_else(|| perr(kind_col, "sphere needs radius".into()))?,
        },
        _ => Shape::Cuboid {
            center: need(a, "center")?,
            half_size: need(b, "size")? / 2.0,
            rotation,
        },
    };
    Ok(Primitive { shape, material: m })
}

/// Adds `N(0, σ²)` to every sample. Each sample draws from its own counter
/// position of a ChaCha stream keyed by `(seed, stream)`, so the result does
/// not depend on evaluation order.
fn add_noise(planes: &mut [Grid], sigma: f64, seed: u64, stream: u64) {
    if sigma == 0.0 {
        return;
    }
    let per_plane = planes.first().map_or(0, |g| g.len()) as u128;
    for (c, g) in planes.iter_mut().enumerate() {
        g.data_mut().par_iter_mut().enumerate().for_each(|(i, v)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream);
            rng.set_word_pos(((c as u128) * per_plane + i as u128) * 64);
            let n: f64 = StandardNormal.sample(&mut rng);
            *v += sigma * n;
        });
    }
}

/// Desk-scale four-camera rig: a 10 cm stereo pair of polarisation cameras
/// with the i-ToF and structured-light cameras in between, slightly rotated
/// and with mild distortion.
pub fn desk_rig(pol_w: usize, pol_h: usize, itof_w: usize, itof_h: usize) -> CameraRig {
    let pol_f = pol_w as f64;
    let itof_f = 0.9 * itof_w as f64;
    let centre = |w: usize, h: usize| ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (pcx, pcy) = centre(pol_w, pol_h);
    let (icx, icy) = centre(itof_w, itof_h);
    let pol = Intrinsics::pinhole(pol_f, pol_f, pcx, pcy);
    let right = Intrinsics::new(
        pol_f,
        pol_f,
        pcx,
        pcy,
        Distortion {
            k1: -0.02,
            k2: 0.005,
            ..Default::default()
        },
    )
    .expect("valid intrinsics");
    let itof = Intrinsics::new(
        itof_f,
        itof_f,
        icx,
        icy,
        Distortion {
            k1: 0.03,
            p1: 0.001,
            ..Default::default()
        },
    )
    .expect("valid intrinsics");
    let structured = Intrinsics::pinhole(pol_f, pol_f, pcx, pcy);
    let cams = [
        Camera {
            role: CameraRole::PolLeft,
            width: pol_w,
            height: pol_h,
            intrinsics: pol,
            extrinsic: RigidTransform::identity(),
        },
        Camera {
            role: CameraRole::PolRight,
            width: pol_w,
            height: pol_h,
            intrinsics: right,
            extrinsic: RigidTransform::from_axis_angle(Vector3::new(0.0, -0.01, 0.0), Vector3::new(-0.1, 0.0, 0.0)),
        },
        Camera {
            role: CameraRole::Itof,
            width: itof_w,
            height: itof_h,
            intrinsics: itof,
            extrinsic: RigidTransform::from_axis_angle(
                Vector3::new(0.005, -0.008, 0.002),
                Vector3::new(-0.05, 0.03, 0.005),
            ),
        },
        Camera {
            role: CameraRole::StructuredLight,
            width: pol_w,
            height: pol_h,
            intrinsics: structured,
            extrinsic: RigidTransform::from_axis_angle(Vector3::new(-0.004, 0.006, 0.0), Vector3::new(-0.03, -0.03, 0.0)),
        },
    ];
    CameraRig::new(cams).expect("desk rig is valid")
}

/// Named demo scenes: `plane`, `desk`, `textureless`, `far`, and `tiny`
/// with textures coarse enough for 8 to 16 pixel images.
pub fn demo_scene(name: &str) -> Result<SceneSpec> {
    let text = match name {
        "plane" => DEMO_PLANE,
        "desk" => DEMO_DESK,
        "textureless" => DEMO_TEXTURELESS,
        "far" => DEMO_FAR,
        "tiny" => DEMO_TINY,
        _ => return Err(Error::Arg(format!("unknown demo scene {name:?}"))),
    };
    SceneSpec::parse(text)
}

pub const DEMO_NAMES: [&str; 5] = ["plane", "desk", "textureless", "far", "tiny"];

const DEMO_PLANE: &str = "\
scene eta=1.5
plane point=0,0,2 normal=0.15,0.1,-1 albedo=0.5 texture=sines period=0.5 contrast=0.6
";

const DEMO_DESK: &str = "\
scene eta=1.5
plane point=0,0,2.4 normal=0.05,0.1,-1 albedo=0.5 texture=sines period=0.35 contrast=0.5
sphere center=-0.25,0.1,1.7 radius=0.3 albedo=0.6 texture=sines period=0.2 contrast=0.4 itof_alpha=1.2 itof_beta=0.4
box center=0.35,-0.15,1.9 size=0.3,0.25,0.3 rotation=0.2,0.5,0 albedo=0.4 texture=checker period=0.12 contrast=0.3
";

const DEMO_TEXTURELESS: &str = "\
scene eta=1.5
plane point=0,0,2.5 normal=0.1,0.05,-1 albedo=0.5 texture=sines period=0.3 contrast=0.6
sphere center=0,0,1.9 radius=0.45 albedo=0.6 reflection=specular itof_alpha=1.2 itof_beta=0.4
";

const DEMO_TINY: &str = "\
scene eta=1.5
plane point=0,0,2.6 normal=0.1,0.15,-1 albedo=0.5 texture=sines period=2 contrast=0.6
sphere center=0.1,0,2.2 radius=0.7 albedo=0.6 texture=sines period=1.4 contrast=0.4 itof_alpha=1.2 itof_beta=0.4
";

const DEMO_FAR: &str = "\
scene eta=1.5
plane point=0,0,12 normal=0,0,-1 albedo=0.5 texture=sines period=1.5 contrast=0.6
";

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn one_camera(w: usize, h: usize, f: f64) -> Camera {
        Camera {
            role: CameraRole::PolLeft,
            width: w,
            height: h,
            intrinsics: Intrinsics::pinhole(f, f, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0),
            extrinsic: RigidTransform::identity(),
        }
    }

    fn depth(s: &SceneSpec, cam: &Camera) -> Grid {
        s.depth_grid(&cam.intrinsics, (cam.width, cam.height), &cam.extrinsic).unwrap()
    }

    fn plane_at(z: f64) -> Primitive {
        Primitive {
            shape: Shape::Plane {
                point: Vector3::new(0.0, 0.0, z),
                normal: Vector3::new(0.0, 0.0, -1.0),
                radius: None,
            },
            material: Material::default(),
        }
    }

    #[test]
    fn fronto_plane_depth_is_constant() {
        let s = SceneSpec {
            primitives: vec![plane_at(2.0)],
            eta: 1.5,
        };
        let d = depth(&s, &one_camera(9, 7, 10.0));
        for &v in d.data() {
            assert_abs_diff_eq!(v, 2.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn sphere_centre_depth() {
        let s = SceneSpec {
            primitives: vec![Primitive {
                shape: Shape::Sphere {
                    center: Vector3::new(0.0, 0.0, 4.0),
                    radius: 1.0,
                },
                material: Material::default(),
            }],
            eta: 1.5,
        };
        let d = depth(&s, &one_camera(9, 9, 10.0));
        assert_abs_diff_eq!(d.get(4, 4), 3.0, epsilon = 1e-12);
        assert!(d.get(0, 0).is_nan());
    }

    #[test]
    fn sphere_depths_match_closed_form() {
        let c = Vector3::new(0.1, -0.2, 3.0);
        let r = 0.8;
        let s = SceneSpec {
            primitives: vec![Primitive {
                shape: Shape::Sphere { center: c, radius: r },
                material: Material::default(),
            }],
            eta: 1.5,
        };
        let cam = one_camera(16, 12, 12.0);
        let d = depth(&s, &cam);
        let rays = PixelRays::new(&cam.intrinsics, 16, 12).unwrap();
        for y in 0..12 {
            for x in 0..16 {
                let ray = rays.get(x, y);
                let a = ray.dot(&ray);
                let b = -2.0 * ray.dot(&c);
                let cc = c.dot(&c) - r * r;
                let disc = b * b - 4.0 * a * cc;
                if disc < 0.0 {
                    assert!(d.get(x, y).is_nan());
                } else {
                    assert_abs_diff_eq!(d.get(x, y), (-b - disc.sqrt()) / (2.0 * a), epsilon = 1e-9);
                }
            }
        }
    }

    #[test]
    fn box_occludes_plane() {
        let cube = Primitive {
            shape: Shape::Cuboid {
                center: Vector3::new(0.0, 0.0, 1.5),
                half_size: Vector3::new(0.2, 0.2, 0.2),
                rotation: Vector3::zeros(),
            },
            material: Material::default(),
        };
        let cam = one_camera(15, 15, 10.0);
        let both = SceneSpec {
            primitives: vec![plane_at(3.0), cube.clone()],
            eta: 1.5,
        };
        let only_plane = SceneSpec {
            primitives: vec![plane_at(3.0)],
            eta: 1.5,
        };
        let only_box = SceneSpec {
            primitives: vec![cube],
            eta: 1.5,
        };
        let d = depth(&both, &cam);
        let p = depth(&only_plane, &cam);
        let b = depth(&only_box, &cam);
        let mut boxed = 0;
        for i in 0..d.len() {
            let want = if b.data()[i].is_nan() { p.data()[i] } else { p.data()[i].min(b.data()[i]) };
            assert_eq!(d.data()[i], want);
            if !b.data()[i].is_nan() {
                boxed += 1;
                assert_abs_diff_eq!(b.data()[i], 1.3, epsilon = 1e-12);
            }
        }
        assert!(boxed > 0);
    }

    #[test]
    fn parse_roundtrip_and_errors() {
        for name in DEMO_NAMES {
            let s = demo_scene(name).unwrap();
            let again = SceneSpec::parse(&s.to_text()).unwrap();
            assert_eq!(s.primitives.len(), again.primitives.len());
            assert_eq!(s.to_text(), again.to_text());
        }
        let err = SceneSpec::parse("scene eta=1.5\nplane point=0,0,2 normal=0,0,-1 colour=3\n").unwrap_err();
        match err {
            Error::Parse { line, column, .. } => assert_eq!((line, column), (2, 33)),
            e => panic!("unexpected {e}"),
        }
        assert!(matches!(SceneSpec::parse("cone radius=1"), Err(Error::Parse { line: 1, column: 1, .. })));
        assert!(matches!(SceneSpec::parse("sphere center=0,0,1"), Err(Error::Parse { .. })));
        assert!(matches!(SceneSpec::parse("# nothing\n"), Err(Error::Parse { .. })));
    }

    #[test]
    fn frames_are_deterministic() {
        let rig = desk_rig(16, 16, 16, 12);
        let scene = demo_scene("desk").unwrap();
        let noise = NoiseSpec {
            pol_sigma: 0.01,
            corr_sigma: 0.01,
            struct_sigma: 0.005,
            seed: 7,
        };
        let a = scene.render_frame(&rig, &noise, 3).unwrap();
        let b = scene.render_frame(&rig, &noise, 3).unwrap();
        assert_eq!(a, b);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let c = pool.install(|| scene.render_frame(&rig, &noise, 3).unwrap());
        assert_eq!(a, c);
        let other = scene
            .render_frame(&rig, &NoiseSpec { seed: 8, ..noise }, 3)
            .unwrap();
        assert_ne!(a.pol_left, other.pol_left);
    }

    #[test]
    fn noiseless_modalities_satisfy_sensor_invariants() {
        let rig = desk_rig(16, 16, 16, 12);
        let b = demo_scene("desk").unwrap().render_frame(&rig, &NoiseSpec::default(), 0).unwrap();
        let l = b.pol_left.0.grids();
        for i in 0..l[0].len() {
            assert_abs_diff_eq!(l[0].data()[i] + l[2].data()[i], l[1].data()[i] + l[3].data()[i], epsilon = 1e-6);
        }
        let c = b.corr.0.grids();
        let rec = crate::itof::recover_from_grids(&c, 1e-9).unwrap();
        for i in 0..c[0].len() {
            let mean = (c[0].data()[i] + c[1].data()[i] + c[2].data()[i] + c[3].data()[i]) / 4.0;
            assert_eq!(rec.offset.data()[i], mean);
        }
    }

    #[test]
    fn struct_depth_range_cutoff() {
        let rig = desk_rig(16, 16, 16, 12);
        let make = |z: f64| SceneSpec {
            primitives: vec![plane_at(z)],
            eta: 1.5,
        };
        let near = make(7.0).render_frame(&rig, &NoiseSpec::default(), 0).unwrap();
        let far = make(12.0).render_frame(&rig, &NoiseSpec::default(), 0).unwrap();
        let sd = near.struct_depth.unwrap().to_grid();
        assert!(sd.get(8, 8).is_finite());
        let sf = far.struct_depth.unwrap().to_grid();
        assert!(sf.data().iter().all(|v| v.is_nan()));
        assert!(far.gt_depth.unwrap().to_grid().data().iter().all(|v| v.is_finite()));
    }
}
