use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geometry::{CameraRig, CameraRole, Intrinsics, RigidTransform};
use crate::grid::{masked_mean, Grid};
use crate::image::{percentile, CorrelationImage, FrameBundle, PolarisationImage, TemporalFrame};
use crate::itof::{bucket_depth_derivatives, buckets, recover_from_grids};
use crate::normals::{weighted_normals, PixelRays, WeightedNormals};
use crate::polarisation::{PixelPolarisation, Reflection};
use crate::warp::{
    flow_cells, reproject_with_rays, rotation_flow_with_rays, warp_channel, warp_source_vjp, FlowField,
    WarpedChannel,
};

use super::displacement::{df_distance, df_ground_truth, DisplacementField};
use super::photometric::{photometric_grids, photometric_vjp, sign};
use super::{LossBreakdown, LossConfig, Source, Strategy, Term, TermMap};

/// Depth map a gradient is taken with respect to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Wrt {
    /// The left polarisation depth `D_pol`.
    Pol,
    /// The i-ToF depth `D_corr`.
    Corr,
}

/// Scalar being differentiated: the total, or the mean of one term over its
/// valid pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    Total,
    Term(Term),
}

pub(crate) struct CorrInputs {
    pub buckets: Vec<Grid>,
    pub amplitude: Grid,
    pub offset: Grid,
    pub valid: Vec<bool>,
    pub guide: Grid,
}

/// Normalized inputs of every loss and the depth-independent terms.
pub struct LossModel {
    cfg: LossConfig,
    strategy: Strategy,
    pol_dims: (usize, usize),
    itof_dims: (usize, usize),
    k_itof: Intrinsics,
    k_left: Intrinsics,
    k_right: Intrinsics,
    right_dims: (usize, usize),
    rays_left: PixelRays,
    views: Vec<Vector3<f64>>,
    rays_itof: PixelRays,
    t_lr: RigidTransform,
    t_lc: RigidTransform,
    left: Vec<Grid>,
    i_un: Grid,
    right: Option<Vec<Grid>>,
    temporal: Vec<(Vec<Grid>, RigidTransform)>,
    mask: Option<TermMap>,
    structured: Option<(TermMap, Grid)>,
    corr: Option<CorrInputs>,
    pol_scale: f64,
    corr_scale: f64,
}

/// Borrowed inputs of a [`LossModel`]; absent modalities are `None`.
pub(crate) struct Parts<'a> {
    pub left: &'a PolarisationImage,
    pub right: Option<&'a PolarisationImage>,
    pub corr: Option<&'a CorrelationImage>,
    pub struct_depth: Option<Grid>,
    pub temporal: &'a [TemporalFrame],
    pub rig: &'a CameraRig,
}

fn scale_of(grids: &[Grid], q: f64) -> f64 {
    let all: Vec<f64> = grids.iter().flat_map(|g| g.data().iter().map(|v| v.abs())).collect();
    match percentile(&all, q) {
        Some(s) if s > 0.0 => s,
        _ => 1.0,
    }
}

fn scaled(grids: Vec<Grid>, s: f64) -> Vec<Grid> {
    grids.into_iter().map(|g| g.map(|v| v / s)).collect()
}

struct WarpTape {
    flow: FlowField,
    channels: Vec<WarpedChannel>,
    valid: Vec<bool>,
    pred: Vec<Grid>,
}

struct CorrToPolTape {
    depth: Grid,
    normals: WeightedNormals,
    units: Vec<Vector3<f64>>,
    flow: FlowField,
    channels: Vec<WarpedChannel>,
    valid: Vec<bool>,
    pixels: Vec<Option<(Vector3<f64>, PixelPolarisation, PixelPolarisation)>>,
    pred_diffuse: Vec<Grid>,
    pred_specular: Vec<Grid>,
    specular: Vec<bool>,
}

struct CorrTape {
    valid: Vec<bool>,
    pred: Vec<Grid>,
    deriv: Vec<[f64; 4]>,
}

/// Result of [`LossModel::evaluate`]: the loss maps plus everything the
/// reverse pass needs.
pub struct Evaluation {
    pub breakdown: LossBreakdown,
    /// Hash of every discrete decision taken (masks, bilinear cells, signs,
    /// argmins). Equal fingerprints mean the same smooth branch.
    pub fingerprint: u64,
    d_pol: Grid,
    stereo: Option<WarpTape>,
    temporal: Vec<WarpTape>,
    corr_to_pol: Option<CorrToPolTape>,
    corr: Option<CorrTape>,
    struct_depth: Option<Grid>,
}

/// Gradients of one objective.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub pol: Grid,
    pub corr: Option<Grid>,
}

impl Gradients {
    pub fn get(&self, wrt: Wrt) -> Option<&Grid> {
        match wrt {
            Wrt::Pol => Some(&self.pol),
            Wrt::Corr => self.corr.as_ref(),
        }
    }
}

fn nan_outside(mut map: Grid, valid: &[bool]) -> Grid {
    for (v, &ok) in map.data_mut().iter_mut().zip(valid) {
        if !ok {
            *v = f64::NAN;
        }
    }
    map
}

fn zero_outside(g: &Grid, valid: &[bool]) -> Grid {
    let mut out = g.clone();
    for (v, &ok) in out.data_mut().iter_mut().zip(valid) {
        if !ok {
            *v = 0.0;
        }
    }
    out
}

/// Warps `src` by `flow`, fills invalid samples with the target and scores
/// the result against `target`.
fn warp_term(target: &[Grid], src: &[Grid], flow: FlowField, alpha: f64) -> Result<(Grid, WarpTape)> {
    let channels = src
        .iter()
        .map(|s| warp_channel(s, &flow))
        .collect::<Result<Vec<_>>>()?;
    let n = flow.width * flow.height;
    let valid: Vec<bool> = (0..n)
        .map(|i| flow.mask[i] && channels.iter().all(|c| c.valid[i]))
        .collect();
    let pred: Vec<Grid> = channels
        .iter()
        .zip(target)
        .map(|(c, x)| {
            let mut p = c.values.clone();
            for i in 0..n {
                if !valid[i] {
                    p.data_mut()[i] = x.data()[i];
                }
            }
            p
        })
        .collect();
    let map = nan_outside(photometric_grids(target, &pred, alpha)?, &valid);
    Ok((
        map,
        WarpTape {
            flow,
            channels,
            valid,
            pred,
        },
    ))
}

fn warp_term_vjp(target: &[Grid], tape: &WarpTape, alpha: f64, g_map: &Grid, g_depth: &mut Grid) {
    let g_pred = photometric_vjp(target, &tape.pred, alpha, g_map);
    for i in 0..g_depth.len() {
        if !tape.valid[i] {
            continue;
        }
        let mut g_u = 0.0;
        let mut g_v = 0.0;
        for (c, gp) in tape.channels.iter().zip(&g_pred) {
            g_u += gp.data()[i] * c.d_uv[i].x;
            g_v += gp.data()[i] * c.d_uv[i].y;
        }
        let dd = tape.flow.depth_derivative(i);
        g_depth.data_mut()[i] += g_u * dd.x + g_v * dd.y;
    }
}

fn hash_warp(h: &mut DefaultHasher, target: &[Grid], tape: &WarpTape) {
    tape.valid.hash(h);
    flow_cells(&tape.flow).hash(h);
    hash_signs(h, target, &tape.pred, &tape.valid);
}

fn hash_signs(h: &mut DefaultHasher, target: &[Grid], pred: &[Grid], valid: &[bool]) {
    for (x, y) in target.iter().zip(pred) {
        for i in 0..x.len() {
            if valid[i] {
                (sign(y.data()[i] - x.data()[i]) as i8).hash(h);
            }
        }
    }
}

pub(crate) fn corr_inputs(corr: &CorrelationImage, quantile: f64, eps: f64) -> Result<(CorrInputs, f64)> {
    let raw = corr.0.grids();
    let s = scale_of(&raw, quantile);
    let bucket_grids = scaled(raw, s);
    let rec = recover_from_grids(&bucket_grids, eps)?;
    let guide = rec.amplitude.clone();
    Ok((
        CorrInputs {
            buckets: bucket_grids,
            amplitude: rec.amplitude,
            offset: rec.offset,
            valid: rec.valid,
            guide,
        },
        s,
    ))
}

impl LossModel {
    /// Prepares the losses of `strategy` on one bundle. Fails with
    /// `MissingModality` when the strategy needs data the bundle lacks.
    pub fn new(bundle: &FrameBundle, strategy: Strategy, cfg: LossConfig) -> Result<Self> {
        if strategy.structured && bundle.struct_depth.is_none() {
            return Err(Error::MissingModality("struct_depth"));
        }
        if strategy.temporal && bundle.temporal.is_empty() {
            return Err(Error::MissingModality("temporal"));
        }
        Self::from_parts(
            Parts {
                left: &bundle.pol_left,
                right: Some(&bundle.pol_right),
                corr: Some(&bundle.corr),
                struct_depth: bundle.struct_depth.as_ref().map(|d| d.to_grid()),
                temporal: &bundle.temporal,
                rig: &bundle.rig,
            },
            strategy,
            cfg,
        )
    }

    pub(crate) fn from_parts(parts: Parts<'_>, strategy: Strategy, cfg: LossConfig) -> Result<Self> {
        cfg.validate()?;
        if strategy.is_empty() {
            return Err(Error::Arg("no loss source enabled".into()));
        }
        let rig = parts.rig;
        let cl = rig.camera(CameraRole::PolLeft);
        let cr = rig.camera(CameraRole::PolRight);
        let cc = rig.camera(CameraRole::Itof);
        let pol_dims = (parts.left.0.width(), parts.left.0.height());
        if pol_dims != (cl.width, cl.height) {
            return Err(Error::Arg("left image does not match its camera".into()));
        }
        let itof_dims = (cc.width, cc.height);
        let rays_left = PixelRays::new(&cl.intrinsics, pol_dims.0, pol_dims.1)?;
        let rays_itof = PixelRays::new(&cc.intrinsics, itof_dims.0, itof_dims.1)?;
        let views = (0..pol_dims.0 * pol_dims.1)
            .map(|i| rays_left.get(i % pol_dims.0, i / pol_dims.0).normalize())
            .collect();

        let raw_left = parts.left.mono_grids();
        let pol_scale = scale_of(&raw_left, cfg.normalisation_quantile);
        let left = scaled(raw_left, pol_scale);
        let (w, h) = pol_dims;
        let i_un = Grid::from_fn(w, h, |x, y| left.iter().map(|g| g.get(x, y)).sum::<f64>() / 4.0);

        let t_lr = rig.relative(CameraRole::PolLeft, CameraRole::PolRight);
        let t_lc = rig.relative(CameraRole::PolLeft, CameraRole::Itof);

        let need_right = strategy.stereo || strategy.structured;
        let right = match (need_right, parts.right) {
            (false, _) => None,
            (true, Some(r)) => {
                if (r.0.width(), r.0.height()) != (cr.width, cr.height) {
                    return Err(Error::Arg("right image does not match its camera".into()));
                }
                Some(scaled(r.mono_grids(), pol_scale))
            }
            (true, None) => return Err(Error::MissingModality("pol_right")),
        };
        let right_dims = (cr.width, cr.height);

        let mask = match &right {
            Some(r) if strategy.stereo => {
                let flow = rotation_flow_with_rays(&rays_left, &cr.intrinsics, right_dims, &t_lr)?;
                let (map, tape) = warp_term(&left, r, flow, cfg.alpha_ssim)?;
                Some(TermMap {
                    term: Term::Source(Source::Mask),
                    map,
                    valid: tape.valid,
                })
            }
            _ => None,
        };

        let structured = if strategy.structured {
            let ds = parts.struct_depth.ok_or(Error::MissingModality("struct_depth"))?;
            if ds.dims() != pol_dims {
                return Err(Error::Arg("struct depth must be registered to the left camera".into()));
            }
            let r = right.as_ref().expect("right image loaded for L");
            let flow = reproject_with_rays(&ds, &rays_left, &cr.intrinsics, right_dims, &t_lr)?;
            let (map, tape) = warp_term(&left, r, flow, cfg.alpha_ssim)?;
            Some((
                TermMap {
                    term: Term::Source(Source::Struct),
                    map,
                    valid: tape.valid,
                },
                ds,
            ))
        } else {
            None
        };

        let (corr, corr_scale) = if strategy.itof {
            let c = parts.corr.ok_or(Error::MissingModality("corr"))?;
            if (c.0.width(), c.0.height()) != itof_dims {
                return Err(Error::Arg("correlation image does not match the i-ToF camera".into()));
            }
            let (inputs, s) = corr_inputs(c, cfg.normalisation_quantile, cfg.amplitude_eps)?;
            (Some(inputs), s)
        } else {
            (None, 1.0)
        };

        let temporal = if strategy.temporal {
            if parts.temporal.is_empty() {
                return Err(Error::MissingModality("temporal"));
            }
            parts
                .temporal
                .iter()
                .map(|t| {
                    if (t.image.0.width(), t.image.0.height()) != pol_dims {
                        return Err(Error::Arg("temporal view does not match the left camera".into()));
                    }
                    Ok((scaled(t.image.mono_grids(), pol_scale), t.pose))
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };

        Ok(LossModel {
            cfg,
            strategy,
            pol_dims,
            itof_dims,
            k_itof: cc.intrinsics,
            k_left: cl.intrinsics,
            k_right: cr.intrinsics,
            right_dims,
            rays_left,
            views,
            rays_itof,
            t_lr,
            t_lc,
            left,
            i_un,
            right,
            temporal,
            mask,
            structured,
            corr,
            pol_scale,
            corr_scale,
        })
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    pub fn config(&self) -> &LossConfig {
        &self.cfg
    }

    pub fn pol_dims(&self) -> (usize, usize) {
        self.pol_dims
    }

    pub fn itof_dims(&self) -> (usize, usize) {
        self.itof_dims
    }

    /// Intensity scales applied to the polarisation and correlation inputs.
    pub fn scales(&self) -> (f64, f64) {
        (self.pol_scale, self.corr_scale)
    }

    /// Normalized left intensities, one grid per polariser angle.
    pub fn left(&self) -> &[Grid] {
        &self.left
    }

    /// Recovered amplitude, offset and validity of the normalized buckets.
    pub fn correlation(&self) -> Option<(&Grid, &Grid, &[bool])> {
        self.corr
            .as_ref()
            .map(|c| (&c.amplitude, &c.offset, c.valid.as_slice()))
    }

    pub fn struct_depth(&self) -> Option<&Grid> {
        self.structured.as_ref().map(|s| &s.1)
    }

    fn stereo_term(&self, d_pol: &Grid) -> Result<(Grid, WarpTape)> {
        let right = self.right.as_ref().expect("right image loaded for S");
        let flow = reproject_with_rays(d_pol, &self.rays_left, &self.k_right, self.right_dims, &self.t_lr)?;
        warp_term(&self.left, right, flow, self.cfg.alpha_ssim)
    }

    fn temporal_term(&self, d_pol: &Grid, k: usize) -> Result<(Grid, WarpTape)> {
        let (img, pose) = &self.temporal[k];
        let flow = reproject_with_rays(d_pol, &self.rays_left, &self.k_left, self.pol_dims, pose)?;
        warp_term(&self.left, img, flow, self.cfg.alpha_ssim)
    }

    fn corr_term(&self, d_corr: &Grid) -> Result<(Grid, CorrTape)> {
        let c = self.corr.as_ref().expect("correlation loaded for T");
        let (w, h) = self.itof_dims;
        let n = w * h;
        let mut valid = vec![false; n];
        let mut pred: Vec<Grid> = c.buckets.clone();
        let mut deriv = vec![[0.0; 4]; n];
        for i in 0..n {
            let d = d_corr.data()[i];
            if !(c.valid[i] && d.is_finite() && d > 0.0) {
                continue;
            }
            valid[i] = true;
            let (a, b) = (c.amplitude.data()[i], c.offset.data()[i]);
            let v = buckets(d, a, b, &self.cfg.itof);
            for k in 0..4 {
                pred[k].data_mut()[i] = v[k];
            }
            deriv[i] = bucket_depth_derivatives(d, a, &self.cfg.itof);
        }
        let map = nan_outside(photometric_grids(&c.buckets, &pred, self.cfg.alpha_ssim)?, &valid);
        Ok((map, CorrTape { valid, pred, deriv }))
    }

    fn corr_to_pol_term(&self, d_pol: &Grid, d_corr: &Grid) -> Result<(Grid, CorrToPolTape)> {
        let c = self.corr.as_ref().expect("correlation loaded for T");
        let normals = weighted_normals(d_corr, Some(&c.guide), &self.rays_itof)?;
        let r_cl = self.t_lc.rotation.transpose();
        let (cw, ch) = self.itof_dims;
        let mut comps = [(); 3].map(|_| Grid::new(cw, ch, f64::NAN));
        let mut units = vec![Vector3::zeros(); cw * ch];
        for j in 0..cw * ch {
            if !normals.valid[j] {
                continue;
            }
            let u = normals.raw[j].normalize();
            units[j] = u;
            let m = r_cl * u;
            for k in 0..3 {
                comps[k].data_mut()[j] = m[k];
            }
        }
        let flow = reproject_with_rays(d_pol, &self.rays_left, &self.k_itof, self.itof_dims, &self.t_lc)?;
        let channels = comps
            .iter()
            .map(|g| warp_channel(g, &flow))
            .collect::<Result<Vec<_>>>()?;
        let (w, h) = self.pol_dims;
        let n = w * h;
        let mut valid = vec![false; n];
        let mut pixels = vec![None; n];
        let mut pred_diffuse = self.left.clone();
        let mut pred_specular = self.left.clone();
        for i in 0..n {
            if !(flow.mask[i] && channels.iter().all(|c| c.valid[i])) {
                continue;
            }
            let nv = Vector3::new(
                channels[0].values.data()[i],
                channels[1].values.data()[i],
                channels[2].values.data()[i],
            );
            if !(nv.norm() > 1e-9) {
                continue;
            }
            let view = &self.views[i];
            let pd = PixelPolarisation::new(&nv, view, self.cfg.eta, Reflection::Diffuse);
            let ps = PixelPolarisation::new(&nv, view, self.cfg.eta, Reflection::Specular);
            let iu = self.i_un.data()[i];
            let (yd, ys) = (pd.intensities(iu), ps.intensities(iu));
            for k in 0..4 {
                pred_diffuse[k].data_mut()[i] = yd[k];
                pred_specular[k].data_mut()[i] = ys[k];
            }
            valid[i] = true;
            pixels[i] = Some((nv, pd, ps));
        }
        let e_d = photometric_grids(&self.left, &pred_diffuse, self.cfg.alpha_ssim)?;
        let e_s = photometric_grids(&self.left, &pred_specular, self.cfg.alpha_ssim)?;
        let specular: Vec<bool> = (0..n).map(|i| valid[i] && e_s.data()[i] < e_d.data()[i]).collect();
        let map = Grid::from_vec(
            w,
            h,
            (0..n)
                .map(|i| {
                    if !valid[i] {
                        f64::NAN
                    } else if specular[i] {
                        e_s.data()[i]
                    } else {
                        e_d.data()[i]
                    }
                })
                .collect(),
        );
        Ok((
            map,
            CorrToPolTape {
                depth: d_corr.clone(),
                normals,
                units,
                flow,
                channels,
                valid,
                pixels,
                pred_diffuse,
                pred_specular,
                specular,
            },
        ))
    }

    /// Evaluates every enabled loss. `d_corr` is required when the strategy
    /// includes `T`; `df` adds the displacement-field term.
    pub fn evaluate(&self, d_pol: &Grid, d_corr: Option<&Grid>, df: Option<&DisplacementField>) -> Result<Evaluation> {
        if d_pol.dims() != self.pol_dims {
            return Err(Error::Arg(format!(
                "D_pol is {:?}, left camera is {:?}",
                d_pol.dims(),
                self.pol_dims
            )));
        }
        let d_corr = if self.strategy.itof {
            let d = d_corr.ok_or_else(|| Error::Arg("strategy T needs an i-ToF depth".into()))?;
            if d.dims() != self.itof_dims {
                return Err(Error::Arg(format!(
                    "D_corr is {:?}, i-ToF camera is {:?}",
                    d.dims(),
                    self.itof_dims
                )));
            }
            Some(d)
        } else {
            None
        };
        let (w, h) = self.pol_dims;
        let n = w * h;
        let mut hasher = DefaultHasher::new();
        let mut sources: Vec<TermMap> = Vec::new();

        if let Some(m) = &self.mask {
            sources.push(m.clone());
        }
        let stereo = if self.strategy.stereo {
            let (map, tape) = self.stereo_term(d_pol)?;
            hash_warp(&mut hasher, &self.left, &tape);
            sources.push(TermMap {
                term: Term::Source(Source::Stereo),
                map,
                valid: tape.valid.clone(),
            });
            Some(tape)
        } else {
            None
        };
        let (corr_to_pol, corr) = match d_corr {
            Some(dc) => {
                let (map, tape) = self.corr_to_pol_term(d_pol, dc)?;
                tape.normals.valid.hash(&mut hasher);
                for t in &tape.normals.terms {
                    for term in t {
                        term.active.hash(&mut hasher);
                    }
                }
                tape.valid.hash(&mut hasher);
                flow_cells(&tape.flow).hash(&mut hasher);
                tape.specular.hash(&mut hasher);
                for i in 0..n {
                    if tape.valid[i] {
                        let pred = if tape.specular[i] { &tape.pred_specular } else { &tape.pred_diffuse };
                        for (x, y) in self.left.iter().zip(pred) {
                            (sign(y.data()[i] - x.data()[i]) as i8).hash(&mut hasher);
                        }
                    }
                }
                sources.push(TermMap {
                    term: Term::Source(Source::CorrToPol),
                    map,
                    valid: tape.valid.clone(),
                });
                let (cmap, ctape) = self.corr_term(dc)?;
                ctape.valid.hash(&mut hasher);
                let c = self.corr.as_ref().unwrap();
                hash_signs(&mut hasher, &c.buckets, &ctape.pred, &ctape.valid);
                let corr_map = TermMap {
                    term: Term::Corr,
                    map: cmap,
                    valid: ctape.valid.clone(),
                };
                (Some(tape), Some((corr_map, ctape)))
            }
            None => (None, None),
        };
        if let Some((s, _)) = &self.structured {
            sources.push(s.clone());
        }
        let mut temporal = Vec::with_capacity(self.temporal.len());
        for k in 0..self.temporal.len() {
            let (map, tape) = self.temporal_term(d_pol, k)?;
            hash_warp(&mut hasher, &self.left, &tape);
            sources.push(TermMap {
                term: Term::Source(Source::Temporal(k)),
                map,
                valid: tape.valid.clone(),
            });
            temporal.push(tape);
        }

        let mut min_map = Grid::new(w, h, f64::NAN);
        let mut argmin = vec![None; n];
        for i in 0..n {
            // the auto-mask alone says nothing about depth
            let constrained = sources
                .iter()
                .any(|s| s.valid[i] && s.term != Term::Source(Source::Mask));
            if !constrained {
                continue;
            }
            let mut best: Option<(f64, Source)> = None;
            for s in &sources {
                if !s.valid[i] {
                    continue;
                }
                let v = s.map.data()[i];
                let src = match s.term {
                    Term::Source(src) => src,
                    _ => unreachable!("sources hold source terms only"),
                };
                if best.is_none_or(|(b, _)| v < b) {
                    best = Some((v, src));
                }
            }
            if let Some((v, s)) = best {
                min_map.data_mut()[i] = v;
                argmin[i] = Some(s);
            }
        }
        argmin.hash(&mut hasher);

        let hint = self.structured.as_ref().map(|(_, ds)| {
            let mut map = Grid::new(w, h, f64::NAN);
            let mut valid = vec![false; n];
            for i in 0..n {
                let (d, s) = (d_pol.data()[i], ds.data()[i]);
                if argmin[i] == Some(Source::Struct) && d.is_finite() && d > 0.0 && s.is_finite() {
                    map.data_mut()[i] = (d - s).abs();
                    valid[i] = true;
                    (sign(d - s) as i8).hash(&mut hasher);
                }
            }
            TermMap {
                term: Term::Hint,
                map,
                valid,
            }
        });

        let df_term = match df {
            Some(cand) => {
                let gt = df_ground_truth(d_pol, self.cfg.df_threshold, self.cfg.df_radius)?;
                gt.offsets
                    .iter()
                    .map(|o| (o[0] as i64, o[1] as i64))
                    .collect::<Vec<_>>()
                    .hash(&mut hasher);
                let map = df_distance(cand, &gt)?;
                let valid = (0..n).map(|i| d_pol.data()[i].is_finite() && d_pol.data()[i] > 0.0).collect();
                Some(TermMap {
                    term: Term::DisplacementField,
                    map,
                    valid,
                })
            }
            None => None,
        };

        let mut total_map = Grid::new(w, h, f64::NAN);
        let total_valid: Vec<bool> = argmin.iter().map(|a| a.is_some()).collect();
        for i in 0..n {
            if !total_valid[i] {
                continue;
            }
            let mut v = min_map.data()[i];
            if let Some(hm) = &hint {
                if hm.valid[i] {
                    v += hm.map.data()[i];
                }
            }
            if let Some(d) = &df_term {
                if d.valid[i] {
                    v += d.map.data()[i];
                }
            }
            if !v.is_finite() {
                return Err(Error::Numeric {
                    message: "non-finite loss".into(),
                    pixel: Some((i % w, i / w)),
                });
            }
            total_map.data_mut()[i] = v;
        }
        let mut total = masked_mean(&total_map, &total_valid)
            .ok_or_else(|| Error::numeric("no pixel has a valid loss source"))?;
        if let Some((c, _)) = &corr {
            total += c.mean().ok_or_else(|| Error::numeric("no valid i-ToF pixel"))?;
        }

        let (corr_map, corr_tape) = match corr {
            Some((m, t)) => (Some(m), Some(t)),
            None => (None, None),
        };
        Ok(Evaluation {
            breakdown: LossBreakdown {
                strategy: self.strategy,
                sources,
                corr: corr_map,
                hint,
                df: df_term,
                min_map,
                argmin,
                total_map,
                total_valid,
                total,
            },
            fingerprint: hasher.finish(),
            d_pol: d_pol.clone(),
            stereo,
            temporal,
            corr_to_pol,
            corr: corr_tape,
            struct_depth: self.structured.as_ref().map(|s| s.1.clone()),
        })
    }

    /// Reverse pass of `objective` through the tape of `eval`.
    pub fn gradient(&self, eval: &Evaluation, objective: Objective) -> Result<Gradients> {
        let b = &eval.breakdown;
        let (w, h) = self.pol_dims;
        let n = w * h;
        let uniform = |valid: &[bool], dims: (usize, usize)| -> Grid {
            let count = valid.iter().filter(|&&v| v).count();
            let g = if count == 0 { 0.0 } else { 1.0 / count as f64 };
            Grid::from_vec(dims.0, dims.1, valid.iter().map(|&v| if v { g } else { 0.0 }).collect())
        };

        // cotangents of each term's map
        let mut g_sources: Vec<(Source, Grid)> = Vec::new();
        let mut g_corr_map: Option<Grid> = None;
        let mut g_hint: Option<Grid> = None;
        match objective {
            Objective::Total => {
                let g_total = uniform(&b.total_valid, (w, h));
                for s in &b.sources {
                    let Term::Source(src) = s.term else { continue };
                    let g = Grid::from_vec(
                        w,
                        h,
                        (0..n)
                            .map(|i| if b.argmin[i] == Some(src) { g_total.data()[i] } else { 0.0 })
                            .collect(),
                    );
                    g_sources.push((src, g));
                }
                if let Some(hm) = &b.hint {
                    g_hint = Some(zero_outside(&g_total, &hm.valid));
                }
                if let Some(c) = &b.corr {
                    g_corr_map = Some(uniform(&c.valid, self.itof_dims));
                }
            }
            Objective::Term(t) => {
                let tm = b
                    .term(t)
                    .ok_or_else(|| Error::Arg(format!("term {} is not enabled", t.name())))?;
                let dims = tm.map.dims();
                let g = uniform(&tm.valid, dims);
                match t {
                    Term::Source(s) => g_sources.push((s, g)),
                    Term::Corr => g_corr_map = Some(g),
                    Term::Hint => g_hint = Some(g),
                    Term::DisplacementField => {}
                }
            }
        }

        let alpha = self.cfg.alpha_ssim;
        let mut g_pol = Grid::zeros(w, h);
        let mut g_corr = self.strategy.itof.then(|| Grid::zeros(self.itof_dims.0, self.itof_dims.1));

        for (src, g) in &g_sources {
            match src {
                Source::Mask | Source::Struct => {}
                Source::Stereo => {
                    let tape = eval.stereo.as_ref().expect("stereo tape");
                    warp_term_vjp(&self.left, tape, alpha, &zero_outside(g, &tape.valid), &mut g_pol);
                }
                Source::Temporal(k) => {
                    let tape = &eval.temporal[*k];
                    warp_term_vjp(&self.left, tape, alpha, &zero_outside(g, &tape.valid), &mut g_pol);
                }
                Source::CorrToPol => {
                    let tape = eval.corr_to_pol.as_ref().expect("corr_to_pol tape");
                    let gc = g_corr.as_mut().expect("i-ToF gradient");
                    self.corr_to_pol_vjp(tape, g, &mut g_pol, gc)?;
                }
            }
        }

        if let Some(g) = &g_hint {
            let ds = eval.struct_depth.as_ref().expect("struct depth");
            for i in 0..n {
                let gi = g.data()[i];
                if gi != 0.0 {
                    g_pol.data_mut()[i] += gi * sign(eval.d_pol.data()[i] - ds.data()[i]);
                }
            }
        }

        if let Some(g) = &g_corr_map {
            let tape = eval.corr.as_ref().expect("corr tape");
            let c = self.corr.as_ref().expect("correlation inputs");
            let g_pred = photometric_vjp(&c.buckets, &tape.pred, alpha, &zero_outside(g, &tape.valid));
            let gc = g_corr.as_mut().expect("i-ToF gradient");
            for j in 0..gc.len() {
                if tape.valid[j] {
                    let s: f64 = (0..4).map(|k| g_pred[k].data()[j] * tape.deriv[j][k]).sum();
                    gc.data_mut()[j] += s;
                }
            }
        }

        for (i, v) in g_pol.data().iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::Numeric {
                    message: "non-finite gradient of D_pol".into(),
                    pixel: Some((i % w, i / w)),
                });
            }
        }
        if let Some(gc) = &g_corr {
            if let Some(i) = gc.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric {
                    message: "non-finite gradient of D_corr".into(),
                    pixel: Some((i % gc.width(), i / gc.width())),
                });
            }
        }
        Ok(Gradients { pol: g_pol, corr: g_corr })
    }

    fn corr_to_pol_vjp(&self, tape: &CorrToPolTape, g_map: &Grid, g_pol: &mut Grid, g_corr: &mut Grid) -> Result<()> {
        let (w, h) = self.pol_dims;
        let n = w * h;
        let mut g_d = Grid::zeros(w, h);
        let mut g_s = Grid::zeros(w, h);
        for i in 0..n {
            if tape.valid[i] {
                if tape.specular[i] {
                    g_s.data_mut()[i] = g_map.data()[i];
                } else {
                    g_d.data_mut()[i] = g_map.data()[i];
                }
            }
        }
        let gy_d = photometric_vjp(&self.left, &tape.pred_diffuse, self.cfg.alpha_ssim, &g_d);
        let gy_s = photometric_vjp(&self.left, &tape.pred_specular, self.cfg.alpha_ssim, &g_s);
        let mut g_comp = [(); 3].map(|_| Grid::zeros(w, h));
        for i in 0..n {
            let Some((nv, pd, ps)) = &tape.pixels[i] else { continue };
            let view = &self.views[i];
            let iu = self.i_un.data()[i];
            let gd = [0, 1, 2, 3].map(|k| gy_d[k].data()[i]);
            let gs = [0, 1, 2, 3].map(|k| gy_s[k].data()[i]);
            let gn = pd.vjp(nv, view, iu, gd) + ps.vjp(nv, view, iu, gs);
            let mut g_u = 0.0;
            let mut g_v = 0.0;
            for k in 0..3 {
                g_comp[k].data_mut()[i] = gn[k];
                g_u += gn[k] * tape.channels[k].d_uv[i].x;
                g_v += gn[k] * tape.channels[k].d_uv[i].y;
            }
            let dd = tape.flow.depth_derivative(i);
            g_pol.data_mut()[i] += g_u * dd.x + g_v * dd.y;
        }
        let g_m: Vec<Grid> = g_comp
            .iter()
            .map(|g| warp_source_vjp(&tape.flow, &tape.valid, g, self.itof_dims))
            .collect();
        let r_lc = self.t_lc.rotation;
        let g_raw: Vec<Vector3<f64>> = (0..self.itof_dims.0 * self.itof_dims.1)
            .map(|j| {
                if !tape.normals.valid[j] {
                    return Vector3::zeros();
                }
                let gm = Vector3::new(g_m[0].data()[j], g_m[1].data()[j], g_m[2].data()[j]);
                let g_u = r_lc * gm;
                let u = tape.units[j];
                (g_u - u * u.dot(&g_u)) / tape.normals.raw[j].norm()
            })
            .collect();
        let dc = tape.normals.vjp(&tape.depth, &self.rays_itof, &g_raw);
        for (a, b) in g_corr.data_mut().iter_mut().zip(dc.data()) {
            *a += b;
        }
        Ok(())
    }
}
