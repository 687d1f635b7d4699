//! `E_pe(X, Y) = α (1 − SSIM(X, Y)) / 2 + (1 − α) |X − Y|`, averaged over
//! channels, with a 3×3 box SSIM under reflect padding.

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::image::ImagePlane;

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r.clamp(0, n - 1) as usize
}

/// Window taps of pixel `(x, y)`: the nine reflected neighbours.
#[inline]
fn window(x: usize, y: usize, w: usize, h: usize) -> [(usize, usize); 9] {
    let mut out = [(0, 0); 9];
    let mut k = 0;
    for dy in -1..=1isize {
        for dx in -1..=1isize {
            out[k] = (reflect(x as isize + dx, w), reflect(y as isize + dy, h));
            k += 1;
        }
    }
    out
}

struct Stats {
    mx: f64,
    my: f64,
    sxx: f64,
    syy: f64,
    sxy: f64,
}

fn stats(xg: &Grid, yg: &Grid, x: usize, y: usize) -> Stats {
    let (w, h) = xg.dims();
    let (mut mx, mut my, mut exx, mut eyy, mut exy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for q in window(x, y, w, h) {
        let a = xg[q];
        let b = yg[q];
        mx += a;
        my += b;
        exx += a * a;
        eyy += b * b;
        exy += a * b;
    }
    let n = 9.0;
    let (mx, my) = (mx / n, my / n);
    Stats {
        mx,
        my,
        sxx: exx / n - mx * mx,
        syy: eyy / n - my * my,
        sxy: exy / n - mx * my,
    }
}

fn ssim_of(s: &Stats) -> f64 {
    let a = 2.0 * s.mx * s.my + SSIM_C1;
    let b = 2.0 * s.sxy + SSIM_C2;
    let c = s.mx * s.mx + s.my * s.my + SSIM_C1;
    let d = s.sxx + s.syy + SSIM_C2;
    a * b / (c * d)
}

/// Per-pixel SSIM of two single-channel planes.
pub fn ssim_map(x: &Grid, y: &Grid) -> Result<Grid> {
    check_pair(x, y)?;
    let (w, h) = x.dims();
    Ok(Grid::from_fn(w, h, |i, j| ssim_of(&stats(x, y, i, j))))
}

fn check_pair(x: &Grid, y: &Grid) -> Result<()> {
    if !x.same_dims(y) {
        return Err(Error::Arg(format!(
            "photometric inputs differ in size: {:?} vs {:?}",
            x.dims(),
            y.dims()
        )));
    }
    if x.width() < 2 || x.height() < 2 {
        return Err(Error::Arg("SSIM needs images of at least 2x2".into()));
    }
    Ok(())
}

/// Photometric error of multi-channel planes given as grids.
pub(crate) fn photometric_grids(x: &[Grid], y: &[Grid], alpha: f64) -> Result<Grid> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::Arg("photometric inputs need equal, non-zero channel counts".into()));
    }
    let (w, h) = x[0].dims();
    let mut out = Grid::zeros(w, h);
    let inv = 1.0 / x.len() as f64;
    for (xc, yc) in x.iter().zip(y) {
        check_pair(xc, yc)?;
        if xc.dims() != (w, h) {
            return Err(Error::Arg("channels differ in size".into()));
        }
        for j in 0..h {
            for i in 0..w {
                let s = ssim_of(&stats(xc, yc, i, j));
                let l1 = (xc.get(i, j) - yc.get(i, j)).abs();
                out.add_at(i, j, inv * (alpha * (1.0 - s) / 2.0 + (1.0 - alpha) * l1));
            }
        }
    }
    Ok(out)
}

/// Cotangent of `Y` given a cotangent `g` of the error map.
pub(crate) fn photometric_vjp(x: &[Grid], y: &[Grid], alpha: f64, g: &Grid) -> Vec<Grid> {
    let (w, h) = g.dims();
    let inv = 1.0 / x.len() as f64;
    x.iter()
        .zip(y)
        .map(|(xc, yc)| {
            let mut gy = Grid::zeros(w, h);
            for j in 0..h {
                for i in 0..w {
                    let gp = g.get(i, j) * inv;
                    if gp == 0.0 {
                        continue;
                    }
                    let d = yc.get(i, j) - xc.get(i, j);
                    gy.add_at(i, j, gp * (1.0 - alpha) * sign(d));

                    let s = stats(xc, yc, i, j);
                    let a = 2.0 * s.mx * s.my + SSIM_C1;
                    let b = 2.0 * s.sxy + SSIM_C2;
                    let c = s.mx * s.mx + s.my * s.my + SSIM_C1;
                    let dd = s.sxx + s.syy + SSIM_C2;
                    let ssim = a * b / (c * dd);
                    let gs = -gp * alpha / 2.0;
                    // partials of SSIM in (μy, σy², σxy)
                    let d_my = 2.0 * s.mx * b / (c * dd) - ssim * 2.0 * s.my / c;
                    let d_syy = -ssim / dd;
                    let d_sxy = 2.0 * a / (c * dd);
                    // reparameterize on (μy, E[y²], E[xy])
                    let g_my = gs * (d_my - 2.0 * s.my * d_syy - s.mx * d_sxy);
                    let g_eyy = gs * d_syy;
                    let g_exy = gs * d_sxy;
                    for q in window(i, j, w, h) {
                        let v = (g_my + 2.0 * g_eyy * yc[q] + g_exy * xc[q]) / 9.0;
                        gy.add_at(q.0, q.1, v);
                    }
                }
            }
            gy
        })
        .collect()
}

/// Sign used for the L1 subgradient; 0 at equality.
#[inline]
pub(crate) fn sign(d: f64) -> f64 {
    if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Per-pixel `E_pe` of two images with equal shape.
pub fn photometric_error(x: &ImagePlane, y: &ImagePlane, alpha: f64) -> Result<Grid> {
    if (x.width(), x.height(), x.channels()) != (y.width(), y.height(), y.channels()) {
        return Err(Error::Arg("photometric inputs differ in shape".into()));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Arg(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    photometric_grids(&x.grids(), &y.grids(), alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn textured(w: usize, h: usize, phase: f64) -> Grid {
        Grid::from_fn(w, h, |x, y| 0.5 + 0.3 * ((x as f64) * 0.9 + phase).sin() * ((y as f64) * 0.7).cos())
    }

    #[test]
    fn identical_images_have_zero_error() {
        let x = textured(7, 5, 0.0);
        let e = photometric_grids(&[x.clone()], &[x], 0.85).unwrap();
        assert!(e.data().iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn zero_alpha_is_l1() {
        let x = textured(6, 6, 0.0);
        let y = textured(6, 6, 0.4);
        let e = photometric_grids(&[x.clone()], &[y.clone()], 0.0).unwrap();
        for i in 0..36 {
            assert_abs_diff_eq!(e.data()[i], (x.data()[i] - y.data()[i]).abs(), epsilon = 1e-15);
        }
    }

    #[test]
    fn constant_images_reference() {
        // tools/oracles.py
        let x = Grid::new(4, 4, 0.2);
        let y = Grid::new(4, 4, 0.5);
        let s = ssim_map(&x, &y).unwrap();
        let e = photometric_grids(&[x], &[y], 0.85).unwrap();
        for i in 0..16 {
            assert_abs_diff_eq!(s.data()[i], 0.6897621509824198, epsilon = 1e-12);
            assert_abs_diff_eq!(e.data()[i], 0.1768510858324716, epsilon = 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = ImagePlane::filled(4, 4, 1, 0.0).unwrap();
        let b = ImagePlane::filled(4, 3, 1, 0.0).unwrap();
        assert!(matches!(photometric_error(&a, &b, 0.85), Err(Error::Arg(_))));
    }

    #[test]
    fn reflect_padding_indices() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(2, 5), 2);
    }

    #[test]
    fn vjp_matches_finite_difference() {
        let x = vec![textured(6, 5, 0.0), textured(6, 5, 1.1)];
        let y = vec![textured(6, 5, 0.3), textured(6, 5, 0.9)];
        let probe = Grid::from_fn(6, 5, |i, j| 1.0 + 0.1 * i as f64 - 0.2 * j as f64);
        let f = |y: &[Grid]| -> f64 {
            let e = photometric_grids(&x, y, 0.85).unwrap();
            e.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
        };
        let g = photometric_vjp(&x, &y, 0.85, &probe);
        let eps = 1e-6;
        for c in 0..2 {
            for i in 0..30 {
                let mut yp = y.clone();
                yp[c].data_mut()[i] += eps;
                let mut ym = y.clone();
                ym[c].data_mut()[i] -= eps;
                let fd = (f(&yp) - f(&ym)) / (2.0 * eps);
                assert_abs_diff_eq!(g[c].data()[i], fd, epsilon = 1e-6);
            }
        }
    }

    proptest! {
        #[test]
        fn error_is_non_negative_on_unit_range(
            a in proptest::collection::vec(0.0f64..1.0, 16),
            b in proptest::collection::vec(0.0f64..1.0, 16),
        ) {
            let x = Grid::from_vec(4, 4, a);
            let y = Grid::from_vec(4, 4, b);
            let e = photometric_grids(&[x.clone()], &[y.clone()], 0.85).unwrap();
            prop_assert!(e.data().iter().all(|&v| v >= -1e-12));
            let l1 = photometric_grids(&[x.clone()], &[y.clone()], 0.0).unwrap();
            let l1r = photometric_grids(&[y], &[x], 0.0).unwrap();
            prop_assert_eq!(l1, l1r);
        }
    }
}
