//! Per-pixel depth recovery by first-order descent on the cross-modal loss,
//! and the standard depth metrics.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::geometry::{project, CameraRole};
use crate::grid::Grid;
use crate::image::{DepthField, FrameBundle};
use crate::itof::{depth_from_phase, recover_from_buckets};
use crate::losses::{
    apply_displacement_field, df_ground_truth, LossBreakdown, LossConfig, LossModel, Objective, Strategy,
};
use crate::normals::PixelRays;

pub const MIN_DEPTH: f64 = 0.1;
pub const MAX_DEPTH: f64 = 20.0;
/// A total loss above this aborts the solve.
pub const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Optimizer {
    Plain,
    /// Heavy-ball momentum 0.9.
    Momentum,
    /// Adam with β = (0.9, 0.999).
    Adaptive,
}

impl FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(Optimizer::Plain),
            "momentum" => Ok(Optimizer::Momentum),
            "adaptive" | "adam" => Ok(Optimizer::Adaptive),
            _ => Err(Error::Arg(format!("unknown optimizer {s:?}"))),
        }
    }
}

impl fmt::Display for Optimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Optimizer::Plain => "plain",
            Optimizer::Momentum => "momentum",
            Optimizer::Adaptive => "adaptive",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Constant(f64),
    /// Ground truth times `exp(σ·n)`, `n ~ N(0, 1)` per pixel.
    NoisyGt(f64),
    /// The i-ToF phase depth splatted into the left camera.
    FromCorr,
}

impl FromStr for Init {
    type Err = Error;

    /// `const:<metres>`, `noisy-gt:<sigma>` or `from-corr`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Arg(format!("unknown init {s:?}; expected const:<m>, noisy-gt:<sigma> or from-corr"));
        if s == "from-corr" {
            return Ok(Init::FromCorr);
        }
        let (kind, v) = s.split_once(':').ok_or_else(bad)?;
        let v: f64 = v.parse().map_err(|_| bad())?;
        match kind {
            "const" if v > 0.0 => Ok(Init::Constant(v)),
            "noisy-gt" if v >= 0.0 => Ok(Init::NoisyGt(v)),
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for Init {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Init::Constant(d) => write!(f, "const:{d}"),
            Init::NoisyGt(s) => write!(f, "noisy-gt:{s}"),
            Init::FromCorr => f.write_str("from-corr"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolveConfig {
    pub strategy: Strategy,
    pub iterations: usize,
    /// Learning rate in log-depth.
    pub step: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
    pub init: Init,
    /// Number of multi-scale log-depth levels; 1 is a plain per-pixel field.
    pub levels: usize,
    /// Step multiplier per level below the coarsest.
    pub level_decay: f64,
    /// Snap the final depth through its own displacement field.
    pub sharpen: bool,
    pub loss: LossConfig,
}

impl Default for SolveConfig {
    fn default() -> Self {
        SolveConfig {
            strategy: Strategy::S,
            iterations: 500,
            step: 1e-2,
            optimizer: Optimizer::Momentum,
            seed: 0,
            init: Init::Constant(3.0),
            levels: 6,
            level_decay: 0.3,
            sharpen: false,
            loss: LossConfig::default(),
        }
    }
}

impl SolveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::Arg("levels must be at least 1".into()));
        }
        if !(self.level_decay > 0.0 && self.level_decay <= 1.0) {
            return Err(Error::Arg("level_decay must lie in (0, 1]".into()));
        }
        if self.iterations == 0 {
            return Err(Error::Arg("iterations must be at least 1".into()));
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::Arg("step must be positive".into()));
        }
        self.loss.validate()
    }
}

/// SqRel, RMSE, RMSElog and the three δ accuracies over `count` pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsReport {
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta: [f64; 3],
    pub count: usize,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "sq_rel,rmse,rmse_log,delta1,delta2,delta3,count";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.sq_rel, self.rmse, self.rmse_log, self.delta[0], self.delta[1], self.delta[2], self.count
        )
    }
}

/// Metrics over pixels where both depths are valid and `gt ≤ max_range`.
pub fn evaluate(pred: &DepthField, gt: &DepthField, max_range: f64) -> Result<MetricsReport> {
    evaluate_grids(&pred.to_grid(), &gt.to_grid(), max_range, None)
}

/// [`evaluate`] on grids, optionally restricted to `region`.
pub fn evaluate_grids(pred: &Grid, gt: &Grid, max_range: f64, region: Option<&[bool]>) -> Result<MetricsReport> {
    if !pred.same_dims(gt) {
        return Err(Error::Arg("prediction and ground truth differ in size".into()));
    }
    if region.is_some_and(|r| r.len() != gt.len()) {
        return Err(Error::Arg("region mask differs in size".into()));
    }
    let (mut sq_rel, mut sq, mut sq_log) = (0.0, 0.0, 0.0);
    let mut hits = [0usize; 3];
    let mut n = 0usize;
    for (i, (&d, &g)) in pred.data().iter().zip(gt.data()).enumerate() {
        let usable = d.is_finite() && d > 0.0 && g.is_finite() && g > 0.0 && g <= max_range;
        if !usable || region.is_some_and(|r| !r[i]) {
            continue;
        }
        n += 1;
        let e = d - g;
        sq_rel += e * e / g;
        sq += e * e;
        sq_log += (d.ln() - g.ln()).powi(2);
        let ratio = (d / g).max(g / d);
        for (k, hit) in hits.iter_mut().enumerate() {
            if ratio < 1.25f64.powi(k as i32 + 1) {
                *hit += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::Arg("no pixel is valid in both depths within range".into()));
    }
    let nf = n as f64;
    Ok(MetricsReport {
        sq_rel: sq_rel / nf,
        rmse: (sq / nf).sqrt(),
        rmse_log: (sq_log / nf).sqrt(),
        delta: hits.map(|h| h as f64 / nf),
        count: n,
    })
}

#[derive(Clone, Debug)]
pub struct SolveReport {
    /// Total loss at the start of every iteration.
    pub history: Vec<f64>,
    /// Breakdown at the returned depth.
    pub breakdown: LossBreakdown,
    pub metrics: Option<MetricsReport>,
    pub initial_metrics: Option<MetricsReport>,
    pub corr_depth: Option<Grid>,
    pub wall_time: Duration,
}

impl SolveReport {
    /// One line per iteration: `iteration,total`.
    pub fn history_csv(&self) -> String {
        let mut s = String::from("iteration,total\n");
        for (i, v) in self.history.iter().enumerate() {
            s.push_str(&format!("{i},{v}\n"));
        }
        s
    }
}

struct Descent {
    kind: Optimizer,
    step: f64,
    v: Vec<f64>,
    m: Vec<f64>,
    t: i32,
}

impl Descent {
    fn new(kind: Optimizer, step: f64, n: usize) -> Self {
        Descent {
            kind,
            step,
            v: vec![0.0; n],
            m: vec![0.0; n],
            t: 0,
        }
    }

    fn apply(&mut self, x: &mut [f64], g: &[f64]) {
        self.t += 1;
        let (b1, b2): (f64, f64) = (0.9, 0.999);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for i in 0..x.len() {
            if !x[i].is_finite() {
                continue;
            }
            let delta = match self.kind {
                Optimizer::Plain => g[i],
                Optimizer::Momentum => {
                    self.v[i] = 0.9 * self.v[i] + g[i];
                    self.v[i]
                }
                Optimizer::Adaptive => {
                    self.m[i] = b1 * self.m[i] + (1.0 - b1) * g[i];
                    self.v[i] = b2 * self.v[i] + (1.0 - b2) * g[i] * g[i];
                    (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + 1e-8)
                }
            };
            x[i] -= self.step * delta;
        }
    }
}

/// Log-depth as a sum of block-upsampled levels, level `k` having one cell
/// per `2^k × 2^k` pixels. Level 0 alone is a plain per-pixel field. Finer
/// levels step `decay` times slower than the level above.
struct LogDepth {
    width: usize,
    height: usize,
    levels: Vec<Grid>,
    opts: Vec<Descent>,
    fixed: Vec<bool>,
}

impl LogDepth {
    fn new(depth: &Grid, levels: usize, decay: f64, kind: Optimizer, step: f64) -> Self {
        let (w, h) = depth.dims();
        let fixed: Vec<bool> = depth.data().iter().map(|d| !(d.is_finite() && *d > 0.0)).collect();
        let mut grids = vec![depth.map(|d| if d.is_finite() && d > 0.0 { d.ln() } else { 0.0 })];
        for k in 1..levels.max(1) {
            let (lw, lh) = (w.div_ceil(1 << k), h.div_ceil(1 << k));
            if lw < 2 && lh < 2 && k > 1 {
                break;
            }
            grids.push(Grid::zeros(lw, lh));
        }
        let n = grids.len();
        let opts = grids
            .iter()
            .enumerate()
            .map(|(k, g)| Descent::new(kind, step * decay.powi((n - 1 - k) as i32), g.len()))
            .collect();
        LogDepth {
            width: w,
            height: h,
            levels: grids,
            opts,
            fixed,
        }
    }

    fn depth(&self) -> Grid {
        Grid::from_fn(self.width, self.height, |x, y| {
            if self.fixed[y * self.width + x] {
                return f64::NAN;
            }
            let u: f64 = self.levels.iter().enumerate().map(|(k, l)| l.get(x >> k, y >> k)).sum();
            u.clamp(MIN_DEPTH.ln(), MAX_DEPTH.ln()).exp()
        })
    }

    /// One optimizer step from `∂L/∂u` per pixel; each level sees the block
    /// mean of the pixels it covers.
    fn descend(&mut self, g: &[f64]) {
        for (k, (level, opt)) in self.levels.iter_mut().zip(&mut self.opts).enumerate() {
            let (lw, lh) = level.dims();
            let mut sum = vec![0.0; lw * lh];
            let mut count = vec![0usize; lw * lh];
            for y in 0..self.height {
                for x in 0..self.width {
                    let c = (y >> k) * lw + (x >> k);
                    sum[c] += g[y * self.width + x];
                    count[c] += 1;
                }
            }
            let mean: Vec<f64> = sum.iter().zip(&count).map(|(s, &n)| s / n.max(1) as f64).collect();
            opt.apply(level.data_mut(), &mean);
        }
    }
}

fn chain(n: f64, g: f64, d: f64) -> f64 {
    if d.is_finite() {
        n * g * d
    } else {
        0.0
    }
}

/// Phase depth of every i-ToF pixel with a usable amplitude.
pub fn phase_depth(bundle: &FrameBundle, cfg: &LossConfig) -> Result<Grid> {
    let rec = recover_from_buckets(&bundle.corr, cfg.amplitude_eps)?;
    Ok(rec.phase.map(|p| if p.is_finite() { depth_from_phase(p, &cfg.itof) } else { f64::NAN }))
}

/// Splats i-ToF points into the left camera with a z-buffer; pixels no
/// point lands on take the median splatted depth.
fn splat_to_left(bundle: &FrameBundle, d_corr: &Grid) -> Result<Grid> {
    let rig = &bundle.rig;
    let cc = rig.camera(CameraRole::Itof);
    let cl = rig.camera(CameraRole::PolLeft);
    let rays = PixelRays::new(&cc.intrinsics, cc.width, cc.height)?;
    let t = rig.relative(CameraRole::Itof, CameraRole::PolLeft);
    let mut out = Grid::new(cl.width, cl.height, f64::INFINITY);
    for y in 0..cc.height {
        for x in 0..cc.width {
            let d = d_corr.get(x, y);
            if !(d.is_finite() && d > 0.0) {
                continue;
            }
            let q = t.apply(&(rays.get(x, y) * d));
            let Ok(p) = project(&q, &cl.intrinsics) else { continue };
            let (u, v) = (p.x.round(), p.y.round());
            if u < 0.0 || v < 0.0 || u >= cl.width as f64 || v >= cl.height as f64 {
                continue;
            }
            let (u, v) = (u as usize, v as usize);
            if q.z < out.get(u, v) {
                out.set(u, v, q.z);
            }
        }
    }
    let mut hit: Vec<f64> = out.data().iter().copied().filter(|v| v.is_finite()).collect();
    if hit.is_empty() {
        return Err(Error::MissingModality("i-ToF depth visible in the left camera"));
    }
    hit.sort_by(f64::total_cmp);
    let median = hit[hit.len() / 2];
    Ok(out.map(|v| if v.is_finite() { v } else { median }))
}

fn initial_depth(bundle: &FrameBundle, cfg: &SolveConfig) -> Result<Grid> {
    let cl = bundle.rig.camera(CameraRole::PolLeft);
    let (w, h) = (cl.width, cl.height);
    let d = match cfg.init {
        Init::Constant(d) => Grid::new(w, h, d),
        Init::NoisyGt(sigma) => {
            let gt = bundle
                .gt_depth
                .as_ref()
                .ok_or(Error::MissingModality("gt_depth"))?
                .to_grid();
            let valid: Vec<f64> = gt.data().iter().copied().filter(|v| v.is_finite() && *v > 0.0).collect();
            if valid.is_empty() {
                return Err(Error::MissingModality("gt_depth"));
            }
            let fill = valid.iter().sum::<f64>() / valid.len() as f64;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let data = gt
                .data()
                .iter()
                .map(|&v| {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    let base = if v.is_finite() && v > 0.0 { v } else { fill };
                    base * (sigma * n).exp()
                })
                .collect();
            Grid::from_vec(w, h, data)
        }
        Init::FromCorr => splat_to_left(bundle, &phase_depth(bundle, &cfg.loss)?)?,
    };
    Ok(d.map(|v| v.clamp(MIN_DEPTH, MAX_DEPTH)))
}

/// Recovers the left-camera depth (and the i-ToF depth when `T` is on) by
/// descending the total loss in log-depth.
pub fn recover_depth(bundle: &FrameBundle, cfg: &SolveConfig) -> Result<(DepthField, SolveReport)> {
    cfg.validate()?;
    let start = Instant::now();
    let model = LossModel::new(bundle, cfg.strategy, cfg.loss)?;
    let mut p_pol = LogDepth::new(&initial_depth(bundle, cfg)?, cfg.levels, cfg.level_decay, cfg.optimizer, cfg.step);
    let mut p_corr = if cfg.strategy.itof {
        let d = phase_depth(bundle, &cfg.loss)?.map(|d| if d.is_finite() { d.clamp(MIN_DEPTH, MAX_DEPTH) } else { d });
        Some(LogDepth::new(&d, cfg.levels, cfg.level_decay, cfg.optimizer, cfg.step))
    } else {
        None
    };

    let gt = bundle.gt_depth.as_ref().map(DepthField::to_grid);
    let initial_metrics = gt
        .as_ref()
        .and_then(|g| evaluate_grids(&p_pol.depth(), g, MAX_DEPTH, None).ok());

    let mut history = Vec::with_capacity(cfg.iterations);
    for iteration in 0..cfg.iterations {
        let d_pol = p_pol.depth();
        let d_corr = p_corr.as_ref().map(LogDepth::depth);
        let eval = model.evaluate(&d_pol, d_corr.as_ref(), None)?;
        let total = eval.breakdown.total;
        if !(total <= DIVERGENCE_LOSS) {
            return Err(Error::Diverged { iteration, loss: total });
        }
        history.push(total);
        let g = model.gradient(&eval, Objective::Total)?;
        // chain rule through d = exp(u), scaled so each pixel's own loss
        // carries unit weight
        let n_pol = eval.breakdown.total_valid.iter().filter(|&&v| v).count().max(1) as f64;
        let g_pol: Vec<f64> = g.pol.data().iter().zip(d_pol.data()).map(|(g, d)| chain(n_pol, *g, *d)).collect();
        p_pol.descend(&g_pol);
        if let (Some(p), Some(gc), Some(dc)) = (p_corr.as_mut(), g.corr.as_ref(), d_corr) {
            let n_c = eval
                .breakdown
                .corr
                .as_ref()
                .map_or(1, |c| c.valid.iter().filter(|&&v| v).count().max(1)) as f64;
            let g_c: Vec<f64> = gc.data().iter().zip(dc.data()).map(|(g, d)| chain(n_c, *g, *d)).collect();
            p.descend(&g_c);
        }
    }

    let mut d_pol = p_pol.depth();
    let d_corr = p_corr.as_ref().map(LogDepth::depth);
    if cfg.sharpen {
        let df = df_ground_truth(&d_pol, cfg.loss.df_threshold, cfg.loss.df_radius)?;
        d_pol = apply_displacement_field(&d_pol, &df)?;
    }
    let breakdown = model.evaluate(&d_pol, d_corr.as_ref(), None)?.breakdown;
    let metrics = gt.as_ref().and_then(|g| evaluate_grids(&d_pol, g, MAX_DEPTH, None).ok());
    let report = SolveReport {
        history,
        breakdown,
        metrics,
        initial_metrics,
        corr_depth: d_corr,
        wall_time: start.elapsed(),
    };
    Ok((DepthField::from_grid(&d_pol), report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{demo_scene, desk_rig, NoiseSpec};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest};

    fn plane(side: usize) -> FrameBundle {
        demo_scene("plane")
            .unwrap()
            .render_frame(&desk_rig(side, side, side, side * 3 / 4), &NoiseSpec::default(), 0)
            .unwrap()
    }

    fn row(v: &[f64]) -> Grid {
        Grid::from_vec(v.len(), 1, v.to_vec())
    }

    #[test]
    fn hand_computed_metrics() {
        let m = evaluate_grids(&row(&[1.0, 2.0, 4.0]), &row(&[1.0, 2.0, 2.0]), 10.0, None).unwrap();
        assert_abs_diff_eq!(m.sq_rel, 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m.rmse, (4.0f64 / 3.0).sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(m.rmse_log, (2.0f64.ln().powi(2) / 3.0).sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(m.delta[0], 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m.delta[2], 2.0 / 3.0, epsilon = 1e-12);
        assert_eq!(m.count, 3);
    }

    #[test]
    fn exact_prediction_is_perfect() {
        let g = row(&[0.5, 1.0, 3.0, 7.5]);
        let m = evaluate_grids(&g, &g, 10.0, None).unwrap();
        assert_eq!((m.sq_rel, m.rmse, m.rmse_log), (0.0, 0.0, 0.0));
        assert_eq!(m.delta, [1.0; 3]);
    }

    #[test]
    fn scaling_past_threshold_flips_delta1() {
        let g = row(&[0.5, 1.0, 3.0, 7.5]);
        let m = evaluate_grids(&g.map(|v| v * (1.25 + 1e-9)), &g, 20.0, None).unwrap();
        assert_eq!(m.delta[0], 0.0);
        assert_eq!(m.delta[1], 1.0);
    }

    #[test]
    fn range_and_region_filter() {
        let gt = row(&[1.0, 2.0, 30.0, f64::NAN]);
        let pred = row(&[1.0, 3.0, 1.0, 1.0]);
        assert_eq!(evaluate_grids(&pred, &gt, 20.0, None).unwrap().count, 2);
        let m = evaluate_grids(&pred, &gt, 20.0, Some(&[true, false, true, true])).unwrap();
        assert_eq!((m.count, m.rmse), (1, 0.0));
        assert!(matches!(evaluate_grids(&pred, &gt, 0.5, None), Err(Error::Arg(_))));
        assert!(evaluate_grids(&pred, &gt, 20.0, Some(&[false; 4])).is_err());
    }

    #[test]
    fn config_parsing_and_validation() {
        assert_eq!("adam".parse::<Optimizer>().unwrap(), Optimizer::Adaptive);
        assert_eq!("const:2.5".parse::<Init>().unwrap(), Init::Constant(2.5));
        assert_eq!("from-corr".parse::<Init>().unwrap(), Init::FromCorr);
        assert!("const:x".parse::<Init>().is_err());
        assert!(SolveConfig { iterations: 0, ..Default::default() }.validate().is_err());
        assert!(SolveConfig { step: 0.0, ..Default::default() }.validate().is_err());
        assert!(SolveConfig::default().validate().is_ok());
    }

    #[test]
    fn ground_truth_is_a_near_fixpoint() {
        // over long horizons the depth creeps along the flat stereo valley:
        // one pixel of disparity is about 0.6 m here
        let b = plane(64);
        let cfg = SolveConfig { iterations: 10, optimizer: Optimizer::Plain, init: Init::NoisyGt(0.0), ..Default::default() };
        let (d, report) = recover_depth(&b, &cfg).unwrap();
        assert!(report.history.iter().all(|&l| l < 1e-3), "{:?}", report.history.last());
        let gt = b.gt_depth.as_ref().unwrap().to_grid();
        let drift = d
            .to_grid()
            .data()
            .iter()
            .zip(gt.data())
            .filter(|(_, g)| g.is_finite())
            .map(|(a, g)| (a - g).abs())
            .fold(0.0, f64::max);
        assert!(drift < 1e-3, "drift {drift}");
    }

    #[test]
    fn seeded_runs_are_reproducible() {
        let b = plane(24);
        let cfg = SolveConfig { iterations: 15, strategy: Strategy::STL, init: Init::NoisyGt(0.1), seed: 5, ..Default::default() };
        let (a, ra) = recover_depth(&b, &cfg).unwrap();
        let (c, rc) = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| recover_depth(&b, &cfg).unwrap());
        assert_eq!(ra.history.len(), 15);
        let bits = |d: &DepthField| d.to_grid().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&c));
        assert_eq!(ra.history, rc.history);
    }

    #[test]
    fn missing_modality_is_reported() {
        let mut b = plane(16);
        b.struct_depth = None;
        let cfg = SolveConfig { strategy: Strategy::SL, iterations: 1, ..Default::default() };
        assert!(matches!(recover_depth(&b, &cfg), Err(Error::MissingModality(_))));
    }

    #[test]
    fn extra_sources_never_raise_the_min() {
        let b = plane(24);
        let d = initial_depth(&b, &SolveConfig { init: Init::NoisyGt(0.2), ..Default::default() }).unwrap();
        let s = LossModel::new(&b, Strategy::S, LossConfig::default()).unwrap();
        let base = s.evaluate(&d, None, None).unwrap().breakdown.min_map;
        for strategy in [Strategy::ST, Strategy::SL, Strategy::STL] {
            let m = LossModel::new(&b, strategy, LossConfig::default()).unwrap();
            let d_corr = phase_depth(&b, &LossConfig::default()).unwrap();
            let richer = m.evaluate(&d, strategy.itof.then_some(&d_corr), None).unwrap().breakdown.min_map;
            for (r, s) in richer.data().iter().zip(base.data()) {
                if s.is_finite() {
                    assert!(*r <= *s, "{strategy}: {r} > {s}");
                }
            }
        }
    }

    proptest! {
        #[test]
        fn metrics_ignore_pixel_order(
            pairs in prop::collection::vec((0.2f64..15.0, 0.2f64..15.0), 1..40),
            rot in 0usize..40,
        ) {
            let (p, g): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
            let a = evaluate_grids(&row(&p), &row(&g), 20.0, None).unwrap();
            let k = rot % p.len();
            let (mut p2, mut g2) = (p.clone(), g.clone());
            p2.rotate_left(k);
            g2.rotate_left(k);
            p2.reverse();
            g2.reverse();
            let b = evaluate_grids(&row(&p2), &row(&g2), 20.0, None).unwrap();
            prop_assert_eq!(a.delta, b.delta);
            prop_assert!((a.rmse - b.rmse).abs() < 1e-12);
        }
    }
}
