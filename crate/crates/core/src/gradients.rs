//! Adjoint gradients of the depth losses and a finite-difference harness
//! that checks them.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::image::{FrameBundle, ImagePlane};
use crate::itof::{depth_from_phase, recover_from_buckets, ItofConfig};
use crate::losses::{LossBreakdown, LossModel, Objective, Wrt};

/// Largest image side accepted by [`finite_diff_check`].
pub const FD_MAX_SIDE: usize = 32;

/// `∂L/∂d` per pixel of the differentiated depth, zero where the depth is
/// invalid or no term sees it.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientField {
    pub wrt: Wrt,
    pub grid: Grid,
}

impl GradientField {
    pub fn to_plane(&self) -> Result<ImagePlane> {
        ImagePlane::from_grids(std::slice::from_ref(&self.grid))
    }

    pub fn max_abs(&self) -> f64 {
        self.grid.data().iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Loss breakdown and gradient of `objective` with respect to one depth.
pub fn loss_gradient(
    model: &LossModel,
    d_pol: &Grid,
    d_corr: Option<&Grid>,
    objective: Objective,
    wrt: Wrt,
) -> Result<(LossBreakdown, GradientField)> {
    let eval = model.evaluate(d_pol, d_corr, None)?;
    let g = model.gradient(&eval, objective)?;
    let grid = g
        .get(wrt)
        .cloned()
        .ok_or(Error::MissingModality("correlation (strategy without T)"))?;
    Ok((eval.breakdown, GradientField { wrt, grid }))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FdConfig {
    /// Central-difference step in metres.
    pub eps: f64,
    pub tol: f64,
    pub objective: Objective,
    /// Relative errors are taken against `max(|adjoint|, |fd|, floor)` with
    /// `floor = floor_ratio · max|adjoint|` so that pixels with a vanishing
    /// gradient do not divide by round-off.
    pub floor_ratio: f64,
    /// Scales the adjoint by 1.1 before comparing. Negative control only.
    #[doc(hidden)]
    pub corrupt_adjoint: bool,
}

impl Default for FdConfig {
    fn default() -> Self {
        FdConfig {
            eps: 1e-4,
            tol: 1e-3,
            objective: Objective::Total,
            floor_ratio: 1e-2,
            corrupt_adjoint: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub worst_pixel: Option<(usize, usize)>,
    pub checked: usize,
    /// Pixels whose ±ε evaluation changed a discrete branch.
    pub skipped: usize,
    pub tol: f64,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

fn objective_value(b: &LossBreakdown, objective: Objective) -> Result<f64> {
    match objective {
        Objective::Total => Ok(b.total),
        Objective::Term(t) => b
            .term(t)
            .ok_or_else(|| Error::Arg(format!("term {} is not enabled", t.name())))?
            .mean()
            .ok_or_else(|| Error::numeric(format!("term {} has no valid pixel", t.name()))),
    }
}

/// Compares the adjoint gradient against central differences at every
/// valid pixel of the differentiated depth.
pub fn finite_diff_check(
    model: &LossModel,
    d_pol: &Grid,
    d_corr: Option<&Grid>,
    wrt: Wrt,
    cfg: &FdConfig,
) -> Result<FdReport> {
    if !(cfg.eps > 0.0 && cfg.eps.is_finite()) {
        return Err(Error::Arg("finite-difference step must be positive".into()));
    }
    if !(cfg.tol > 0.0) {
        return Err(Error::Arg("tolerance must be positive".into()));
    }
    let target = match wrt {
        Wrt::Pol => d_pol,
        Wrt::Corr => d_corr.ok_or(Error::MissingModality("D_corr"))?,
    };
    let (w, h) = target.dims();
    if w > FD_MAX_SIDE || h > FD_MAX_SIDE {
        return Err(Error::Arg(format!(
            "finite-difference check needs images of at most {FD_MAX_SIDE}x{FD_MAX_SIDE}, got {w}x{h}"
        )));
    }
    let base = model.evaluate(d_pol, d_corr, None)?;
    let adj = model.gradient(&base, cfg.objective)?;
    let mut adjoint = adj
        .get(wrt)
        .cloned()
        .ok_or(Error::MissingModality("correlation (strategy without T)"))?;
    if cfg.corrupt_adjoint {
        adjoint = adjoint.map(|v| 1.1 * v);
    }
    let floor = cfg.floor_ratio * adjoint.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));

    let probe = |i: usize, delta: f64| -> Result<(f64, u64)> {
        let mut d = target.clone();
        d.data_mut()[i] += delta;
        let eval = match wrt {
            Wrt::Pol => model.evaluate(&d, d_corr, None)?,
            Wrt::Corr => model.evaluate(d_pol, Some(&d), None)?,
        };
        Ok((objective_value(&eval.breakdown, cfg.objective)?, eval.fingerprint))
    };

    let per_pixel: Vec<Option<f64>> = (0..w * h)
        .into_par_iter()
        .map(|i| -> Result<Option<f64>> {
            let d = target.data()[i];
            if !(d.is_finite() && d > 0.0) {
                return Ok(Some(0.0));
            }
            let (lp, fp) = probe(i, cfg.eps)?;
            let (lm, fm) = probe(i, -cfg.eps)?;
            if fp != base.fingerprint || fm != base.fingerprint {
                return Ok(None);
            }
            let fd = (lp - lm) / (2.0 * cfg.eps);
            let a = adjoint.data()[i];
            let scale = a.abs().max(fd.abs()).max(floor);
            Ok(Some(if scale == 0.0 { 0.0 } else { (a - fd).abs() / scale }))
        })
        .collect::<Result<_>>()?;

    let mut report = FdReport {
        max_rel_err: 0.0,
        worst_pixel: None,
        checked: 0,
        skipped: 0,
        tol: cfg.tol,
    };
    for (i, r) in per_pixel.iter().enumerate() {
        match r {
            None => report.skipped += 1,
            Some(e) => {
                report.checked += 1;
                if report.worst_pixel.is_none() || *e > report.max_rel_err {
                    report.max_rel_err = *e;
                    report.worst_pixel = Some((i % w, i / w));
                }
            }
        }
    }
    Ok(report)
}

/// Depths near ground truth at which to check gradients: GT scaled by a
/// fixed pattern of 1.0–1.03, and the phase depth scaled by 1.02–1.06.
/// At GT itself most terms sit at a kink or a vanishing gradient.
pub fn probe_depths(bundle: &FrameBundle) -> Result<(Grid, Grid)> {
    let gt = bundle
        .gt_depth
        .as_ref()
        .ok_or(Error::MissingModality("gt_depth"))?
        .to_grid();
    let (w, h) = gt.dims();
    let d_pol = Grid::from_fn(w, h, |x, y| gt.get(x, y) * (1.01 + 0.006 * ((x * 7 + y * 3) % 5) as f64));
    let rec = recover_from_buckets(&bundle.corr, 1e-9)?;
    let cfg = ItofConfig::default();
    let (cw, ch) = rec.phase.dims();
    let d_corr = Grid::from_fn(cw, ch, |x, y| {
        let p = rec.phase.get(x, y);
        if p.is_finite() {
            depth_from_phase(p, &cfg) * (1.0 + 0.02 * (1 + (x + 2 * y) % 3) as f64)
        } else {
            f64::NAN
        }
    });
    Ok((d_pol, d_corr))
}
