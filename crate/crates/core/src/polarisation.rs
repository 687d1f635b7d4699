//! Depth to polarisation: Fresnel degree of linear polarisation, angle of
//! polarisation and the four polariser-angle intensities.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geometry::Intrinsics;
use crate::grid::Grid;
use crate::image::{ImagePlane, PolarisationImage};
use crate::normals::{normal_weighted, view_geometry};

/// Polariser angles of the four sensor channels.
pub const POLARISER_ANGLES: [f64; 4] = [0.0, FRAC_PI_4, FRAC_PI_2, 3.0 * FRAC_PI_4];

pub const DEFAULT_ETA: f64 = 1.5;

/// Largest viewing angle evaluated for specular reflection.
const SPECULAR_MAX_THETA: f64 = FRAC_PI_2 - 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum Reflection {
    #[default]
    Diffuse,
    Specular,
}

impl Reflection {
    pub const BOTH: [Reflection; 2] = [Reflection::Diffuse, Reflection::Specular];

    fn sign(self) -> f64 {
        match self {
            Reflection::Diffuse => 1.0,
            Reflection::Specular => -1.0,
        }
    }
}

impl std::str::FromStr for Reflection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diffuse" => Ok(Reflection::Diffuse),
            "specular" => Ok(Reflection::Specular),
            _ => Err(Error::Arg(format!("unknown reflection type {s:?}"))),
        }
    }
}

/// Degree of linear polarisation `ρ` at viewing angle `theta` for refractive
/// index `eta`.
pub fn degree_of_polarisation(theta: f64, eta: f64, kind: Reflection) -> f64 {
    let theta = match kind {
        Reflection::Diffuse => theta.clamp(0.0, FRAC_PI_2),
        Reflection::Specular => theta.clamp(0.0, SPECULAR_MAX_THETA),
    };
    let (s, c) = theta.sin_cos();
    let s2 = s * s;
    let root = (eta * eta - s2).sqrt();
    let rho = match kind {
        Reflection::Specular => {
            2.0 * s2 * c * root / (eta * eta - s2 - eta * eta * s2 + 2.0 * s2 * s2)
        }
        Reflection::Diffuse => {
            let a = (eta - 1.0 / eta).powi(2);
            let b = (eta + 1.0 / eta).powi(2);
            a * s2 / (2.0 + 2.0 * eta * eta - b * s2 + 4.0 * c * root)
        }
    };
    rho.min(1.0)
}

/// `ρ` and `dρ/d(cos θ)` as functions of `cos θ`; smooth at `θ = 0`, where
/// the chain through `arccos` is singular.
pub(crate) fn dop_from_cos(cos: f64, eta: f64, kind: Reflection) -> (f64, f64) {
    let lo = match kind {
        Reflection::Diffuse => 0.0,
        Reflection::Specular => SPECULAR_MAX_THETA.cos(),
    };
    let clamped = cos < lo || cos > 1.0;
    let c = cos.clamp(lo, 1.0);
    let s2 = 1.0 - c * c;
    let ds2 = -2.0 * c;
    let root = (eta * eta - s2).sqrt();
    let droot = c / root;
    let (rho, drho) = match kind {
        Reflection::Specular => {
            let n = 2.0 * s2 * c * root;
            let dn = 2.0 * (ds2 * c * root + s2 * root + s2 * c * droot);
            let e = eta * eta - s2 - eta * eta * s2 + 2.0 * s2 * s2;
            let de = ds2 * (-1.0 - eta * eta + 4.0 * s2);
            (n / e, (dn * e - n * de) / (e * e))
        }
        Reflection::Diffuse => {
            let a = (eta - 1.0 / eta).powi(2);
            let b = (eta + 1.0 / eta).powi(2);
            let d = 2.0 + 2.0 * eta * eta - b * s2 + 4.0 * c * root;
            let dd = -b * ds2 + 4.0 * root + 4.0 * c * droot;
            (a * s2 / d, a * (ds2 * d - s2 * dd) / (d * d))
        }
    };
    if rho > 1.0 {
        return (1.0, 0.0);
    }
    (rho, if clamped { 0.0 } else { drho })
}

/// Angle of polarisation in `[0, π)` from the normal azimuth.
pub fn polarisation_phase(azimuth: f64, kind: Reflection) -> f64 {
    let shifted = match kind {
        Reflection::Diffuse => azimuth,
        Reflection::Specular => azimuth + FRAC_PI_2,
    };
    let r = shifted.rem_euclid(PI);
    if r >= PI {
        0.0
    } else {
        r
    }
}

/// Intensity behind a polariser at `polariser_angle`.
pub fn polarisation_intensity(i_un: f64, rho: f64, phi: f64, polariser_angle: f64) -> f64 {
    i_un * (1.0 + rho * (2.0 * polariser_angle - 2.0 * phi).cos())
}

/// Pointwise polarisation render from an (unnormalized) normal and the unit
/// viewing ray, written in terms of `cos θ`, `cos 2α` and `sin 2α` so that it
/// is differentiable everywhere except at `n_x = n_y = 0`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct PixelPolarisation {
    rho: f64,
    drho: f64,
    cos: f64,
    c2a: f64,
    s2a: f64,
    q: f64,
    norm: f64,
    sign: f64,
}

const AZIMUTH_EPS: f64 = 1e-24;

impl PixelPolarisation {
    pub fn new(normal: &Vector3<f64>, view: &Vector3<f64>, eta: f64, kind: Reflection) -> Self {
        let norm = normal.norm();
        let cos = normal.dot(view) / norm;
        let (rho, drho) = dop_from_cos(cos, eta, kind);
        let q = normal.x * normal.x + normal.y * normal.y;
        let (c2a, s2a) = if q > AZIMUTH_EPS * norm * norm {
            (
                (normal.x * normal.x - normal.y * normal.y) / q,
                2.0 * normal.x * normal.y / q,
            )
        } else {
            (1.0, 0.0)
        };
        PixelPolarisation {
            rho,
            drho,
            cos,
            c2a,
            s2a,
            q,
            norm,
            sign: kind.sign(),
        }
    }

    /// Modulation `ρ cos(2ψ - 2φ)` for each polariser angle ψ.
    pub fn modulation(&self) -> [f64; 4] {
        let m = self.sign * self.rho;
        [m * self.c2a, m * self.s2a, -m * self.c2a, -m * self.s2a]
    }

    pub fn intensities(&self, i_un: f64) -> [f64; 4] {
        self.modulation().map(|m| i_un * (1.0 + m))
    }

    /// Cotangent of the normal given cotangents of the four intensities.
    pub fn vjp(&self, normal: &Vector3<f64>, view: &Vector3<f64>, i_un: f64, g: [f64; 4]) -> Vector3<f64> {
        let gc = i_un * (g[0] - g[2]);
        let gs = i_un * (g[1] - g[3]);
        let g_rho = self.sign * (gc * self.c2a + gs * self.s2a);
        let g_c2a = self.sign * self.rho * gc;
        let g_s2a = self.sign * self.rho * gs;

        let unit = normal / self.norm;
        let dcos_dn = (view - unit * self.cos) / self.norm;
        let mut out = dcos_dn * (g_rho * self.drho);

        if self.q > AZIMUTH_EPS * self.norm * self.norm {
            let (x, y, q2) = (normal.x, normal.y, self.q * self.q);
            let dc_dx = 4.0 * x * y * y / q2;
            let dc_dy = -4.0 * x * x * y / q2;
            let ds_dx = 2.0 * y * (y * y - x * x) / q2;
            let ds_dy = 2.0 * x * (x * x - y * y) / q2;
            out.x += g_c2a * dc_dx + g_s2a * ds_dx;
            out.y += g_c2a * dc_dy + g_s2a * ds_dy;
        }
        out
    }
}

/// Renders the four polariser channels from depth, following
/// normals → view geometry → degree and angle of polarisation → intensity.
///
/// `reflection` is either a single entry applied everywhere or one entry per
/// pixel. Pixels without a valid normal keep `i_un` in every channel.
pub fn render_polarisation_grids(
    depth: &Grid,
    i_un: &Grid,
    cam: &Intrinsics,
    eta: f64,
    reflection: &[Reflection],
) -> Result<[Grid; 4]> {
    let (w, h) = depth.dims();
    if i_un.dims() != (w, h) {
        return Err(Error::Arg("depth and i_un differ in size".into()));
    }
    if reflection.len() != 1 && reflection.len() != w * h {
        return Err(Error::Arg("reflection map must have 1 or width*height entries".into()));
    }
    let normals = normal_weighted(depth, i_un, cam)?;
    let view = view_geometry(depth, &normals, cam)?;
    let mut out = [(); 4].map(|_| i_un.clone());
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !view.valid[i] {
                continue;
            }
            let kind = reflection[if reflection.len() == 1 { 0 } else { i }];
            let rho = degree_of_polarisation(view.theta.get(x, y), eta, kind);
            let phi = polarisation_phase(view.azimuth.get(x, y), kind);
            for (k, &angle) in POLARISER_ANGLES.iter().enumerate() {
                out[k].set(x, y, polarisation_intensity(i_un.get(x, y), rho, phi, angle));
            }
        }
    }
    Ok(out)
}

/// [`render_polarisation_grids`] for a single reflection type, as an image.
pub fn render_polarisation(
    depth: &Grid,
    i_un: &Grid,
    cam: &Intrinsics,
    eta: f64,
    kind: Reflection,
) -> Result<PolarisationImage> {
    let grids = render_polarisation_grids(depth, i_un, cam, eta, &[kind])?;
    PolarisationImage::new(ImagePlane::from_grids(&grids)?)
}

/// Colour variant: three unpolarised intensities sharing one set of `ρ`, `φ`.
/// Normals are guided by the colour mean.
pub fn render_polarisation_colour(
    depth: &Grid,
    i_un: &[Grid; 3],
    cam: &Intrinsics,
    eta: f64,
    reflection: &[Reflection],
) -> Result<PolarisationImage> {
    let (w, h) = depth.dims();
    let mean = Grid::from_fn(w, h, |x, y| {
        i_un.iter().map(|g| g.get(x, y)).sum::<f64>() / 3.0
    });
    let mono = render_polarisation_grids(depth, &mean, cam, eta, reflection)?;
    let mut channels = Vec::with_capacity(12);
    for colour in i_un {
        for plane in &mono {
            channels.push(Grid::from_fn(w, h, |x, y| {
                let m = mean.get(x, y);
                if m == 0.0 {
                    colour.get(x, y)
                } else {
                    plane.get(x, y) / m * colour.get(x, y)
                }
            }));
        }
    }
    PolarisationImage::new(ImagePlane::from_grids(&channels)?)
}
