//! Displacement fields that move depth samples on strong discontinuities to
//! their nearest calm neighbour, removing flying pixels.

use crate::error::{Error, Result};
use crate::grid::Grid;

#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField {
    pub width: usize,
    pub height: usize,
    /// Per-pixel `(dx, dy)` offset in pixels.
    pub offsets: Vec<[f64; 2]>,
    /// Pixels that needed an offset but found no calm pixel in range.
    pub unresolved: Vec<bool>,
}

impl DisplacementField {
    pub fn zeros(width: usize, height: usize) -> Self {
        DisplacementField {
            width,
            height,
            offsets: vec![[0.0; 2]; width * height],
            unresolved: vec![false; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [f64; 2] {
        self.offsets[y * self.width + x]
    }

    pub fn is_zero(&self) -> bool {
        self.offsets.iter().all(|o| o[0] == 0.0 && o[1] == 0.0)
    }
}

/// Largest relative depth jump `|d_n − d| / d` to a 4-neighbour. Invalid
/// pixels report `NaN`.
pub fn local_disparity(depth: &Grid) -> Grid {
    let (w, h) = depth.dims();
    Grid::from_fn(w, h, |x, y| {
        if !depth.is_valid_depth(x, y) {
            return f64::NAN;
        }
        let d = depth.get(x, y);
        let mut m: f64 = 0.0;
        let neighbours = [
            (x.wrapping_sub(1), y),
            (x + 1, y),
            (x, y.wrapping_sub(1)),
            (x, y + 1),
        ];
        for (nx, ny) in neighbours {
            if nx < w && ny < h && depth.is_valid_depth(nx, ny) {
                m = m.max((depth.get(nx, ny) - d).abs() / d);
            }
        }
        m
    })
}

/// Ground-truth displacement field of a depth map: every pixel whose local
/// disparity exceeds `threshold` points at the nearest pixel (Euclidean,
/// within `radius`) that does not. Ties resolve in row-major scan order.
pub fn df_ground_truth(depth: &Grid, threshold: f64, radius: usize) -> Result<DisplacementField> {
    if !(threshold > 0.0) {
        return Err(Error::Arg("displacement threshold must be positive".into()));
    }
    let (w, h) = depth.dims();
    let disparity = local_disparity(depth);
    let strong = |x: usize, y: usize| {
        let v = disparity.get(x, y);
        !v.is_finite() || v > threshold
    };
    let mut df = DisplacementField::zeros(w, h);
    let r = radius as isize;
    for y in 0..h {
        for x in 0..w {
            if !depth.is_valid_depth(x, y) || !strong(x, y) {
                continue;
            }
            let mut best: Option<(isize, isize, isize)> = None;
            for dy in -r..=r {
                for dx in -r..=r {
                    let d2 = dx * dx + dy * dy;
                    if d2 == 0 || d2 > r * r {
                        continue;
                    }
                    let (nx, ny) = (x as isize + dx, y as isize + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let (nx, ny) = (nx as usize, ny as usize);
                    if strong(nx, ny) {
                        continue;
                    }
                    if best.is_none_or(|b| d2 < b.2) {
                        best = Some((dx, dy, d2));
                    }
                }
            }
            let i = y * w + x;
            match best {
                Some((dx, dy, _)) => df.offsets[i] = [dx as f64, dy as f64],
                None => df.unresolved[i] = true,
            }
        }
    }
    Ok(df)
}

/// `d'(p) = d(p + df(p))` with nearest-pixel lookup. Offsets that leave the
/// image keep the original value.
pub fn apply_displacement_field(depth: &Grid, df: &DisplacementField) -> Result<Grid> {
    if depth.dims() != (df.width, df.height) {
        return Err(Error::Arg("depth and displacement field differ in size".into()));
    }
    let (w, h) = depth.dims();
    Ok(Grid::from_fn(w, h, |x, y| {
        let [dx, dy] = df.get(x, y);
        let nx = (x as f64 + dx).round();
        let ny = (y as f64 + dy).round();
        if nx < 0.0 || ny < 0.0 || nx >= w as f64 || ny >= h as f64 {
            depth.get(x, y)
        } else {
            depth.get(nx as usize, ny as usize)
        }
    }))
}

/// Per-pixel `‖candidate − reference‖₂`.
pub fn df_distance(candidate: &DisplacementField, reference: &DisplacementField) -> Result<Grid> {
    if (candidate.width, candidate.height) != (reference.width, reference.height) {
        return Err(Error::Arg("displacement fields differ in size".into()));
    }
    Ok(Grid::from_vec(
        candidate.width,
        candidate.height,
        candidate
            .offsets
            .iter()
            .zip(&reference.offsets)
            .map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt())
            .collect(),
    ))
}
