//! Single-term entry points. Each normalizes its inputs the same way the
//! combined model does and returns maps with `NaN` where a term is undefined.

use crate::error::Result;
use crate::geometry::CameraRig;
use crate::grid::Grid;
use crate::image::{CorrelationImage, FrameBundle, PolarisationImage};

use super::model::{LossModel, Parts};
use super::{DisplacementField, LossBreakdown, LossConfig, Source, Strategy, Term};

fn parts<'a>(
    left: &'a PolarisationImage,
    right: Option<&'a PolarisationImage>,
    corr: Option<&'a CorrelationImage>,
    struct_depth: Option<Grid>,
    rig: &'a CameraRig,
) -> Parts<'a> {
    Parts {
        left,
        right,
        corr,
        struct_depth,
        temporal: &[],
        rig,
    }
}

/// Stereo loss (right image warped through `d_pol`) and auto-mask loss
/// (right image warped through the rotation-only, infinite-depth flow).
pub fn stereo_and_mask_loss(
    left: &PolarisationImage,
    right: &PolarisationImage,
    d_pol: &Grid,
    rig: &CameraRig,
    cfg: &LossConfig,
) -> Result<(Grid, Grid)> {
    let model = LossModel::from_parts(parts(left, Some(right), None, None, rig), Strategy::S, *cfg)?;
    let b = model.evaluate(d_pol, None, None)?.breakdown;
    Ok((
        b.source(Source::Stereo).expect("stereo enabled").map.clone(),
        b.source(Source::Mask).expect("mask enabled").map.clone(),
    ))
}

/// Photometric error between the correlation buckets and buckets re-rendered
/// from `d_corr` with the amplitude and offset recovered from `corr`.
pub fn corr_loss(
    left: &PolarisationImage,
    corr: &CorrelationImage,
    d_corr: &Grid,
    d_pol: &Grid,
    rig: &CameraRig,
    cfg: &LossConfig,
) -> Result<Grid> {
    let t = Strategy {
        itof: true,
        ..Default::default()
    };
    let model = LossModel::from_parts(parts(left, None, Some(corr), None, rig), t, *cfg)?;
    let b = model.evaluate(d_pol, Some(d_corr), None)?.breakdown;
    Ok(b.corr.expect("corr enabled").map)
}

/// Polarisation rendered from the i-ToF depth's normals, carried into the
/// left view through `d_pol`, scored against the left image; the lower of
/// the diffuse and specular renderings per pixel, ties to diffuse.
pub fn corr_to_pol_loss(
    left: &PolarisationImage,
    corr: &CorrelationImage,
    d_corr: &Grid,
    d_pol: &Grid,
    rig: &CameraRig,
    cfg: &LossConfig,
) -> Result<Grid> {
    let t = Strategy {
        itof: true,
        ..Default::default()
    };
    let model = LossModel::from_parts(parts(left, None, Some(corr), None, rig), t, *cfg)?;
    let b = model.evaluate(d_pol, Some(d_corr), None)?.breakdown;
    Ok(b.source(Source::CorrToPol).expect("corr_to_pol enabled").map.clone())
}

/// Photometric loss of the right image warped through the structured-light
/// depth, and the ungated hint `|d_pred − d_struct|`. The combined loss only
/// keeps the hint where the structured-light term wins the minimum.
pub fn struct_loss(
    left: &PolarisationImage,
    right: &PolarisationImage,
    d_struct: &Grid,
    d_pred: &Grid,
    rig: &CameraRig,
    cfg: &LossConfig,
) -> Result<(Grid, Grid)> {
    let l = Strategy {
        structured: true,
        ..Default::default()
    };
    let model = LossModel::from_parts(parts(left, Some(right), None, Some(d_struct.clone()), rig), l, *cfg)?;
    let b = model.evaluate(d_pred, None, None)?.breakdown;
    let map = b.term(Term::Source(Source::Struct)).expect("struct enabled").map.clone();
    let hint = Grid::from_vec(
        d_pred.width(),
        d_pred.height(),
        d_pred
            .data()
            .iter()
            .zip(d_struct.data())
            .map(|(&p, &s)| {
                if p.is_finite() && p > 0.0 && s.is_finite() && s > 0.0 {
                    (p - s).abs()
                } else {
                    f64::NAN
                }
            })
            .collect(),
    );
    Ok((map, hint))
}

/// All losses of `strategy` on one bundle.
pub fn total_loss(
    bundle: &FrameBundle,
    strategy: Strategy,
    d_pol: &Grid,
    d_corr: Option<&Grid>,
    df: Option<&DisplacementField>,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let model = LossModel::new(bundle, strategy, *cfg)?;
    Ok(model.evaluate(d_pol, d_corr, df)?.breakdown)
}
