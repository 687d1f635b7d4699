//! Acceptance criteria, one pass/fail line each.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use xmodal::calib::{optimize, per_camera_init, perturb, synthetic_observations, synthetic_rig, Board, CalibGraph, Huber};
use xmodal::cli::temporal_poses;
use xmodal::geometry::{CameraRole, Intrinsics, RigidTransform};
use xmodal::gradients::{finite_diff_check, probe_depths, FdConfig};
use xmodal::image::{read_bundle, write_bundle, CorrelationImage, DepthField, FrameBundle, ImagePlane, PolarisationImage, TemporalFrame};
use xmodal::itof::{buckets, phase_from_depth, recover_pixel, ItofConfig};
use xmodal::losses::{apply_displacement_field, df_ground_truth, LossConfig, LossModel, Objective, Source, Strategy, Term, Wrt};
use xmodal::polarisation::{
    degree_of_polarisation, polarisation_intensity, polarisation_phase, render_polarisation, Reflection, POLARISER_ANGLES,
};
use xmodal::solver::{evaluate_grids, phase_depth, recover_depth, SolveConfig, MAX_DEPTH};
use xmodal::synth::{demo_scene, desk_rig, NoiseSpec};
use xmodal::Grid;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(budget: Duration, start: Instant, outcome: Outcome) -> Outcome {
    let elapsed = start.elapsed();
    match outcome {
        Ok(d) if elapsed <= budget => Ok(format!("{d}; {elapsed:.2?}")),
        Ok(d) => Err(format!("{d}; {elapsed:.2?} exceeds {budget:?}")),
        Err(d) => Err(format!("{d}; {elapsed:.2?}")),
    }
}

fn itof_roundtrip() -> Outcome {
    let start = Instant::now();
    let cfg = ItofConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = [0.0f64; 3];
    for _ in 0..10_000 {
        let d = rng.random_range(0.0..=5.9);
        let alpha = rng.random_range(1e-3..=10.0);
        let beta = rng.random_range(0.0..=10.0);
        let r = recover_pixel(buckets(d, alpha, beta, &cfg), 1e-12);
        let phi = phase_from_depth(d, &cfg);
        let dp = r.phase.map_or(f64::INFINITY, |p| {
            let e = (p - phi).abs();
            e.min(std::f64::consts::TAU - e)
        });
        worst[0] = worst[0].max(dp);
        worst[1] = worst[1].max((r.amplitude - alpha).abs());
        worst[2] = worst[2].max((r.offset - beta).abs());
    }
    let range = cfg.ambiguity_range();
    let expected = 299_792_458.0 / (2.0 * 25e6);
    let wraps = (0..100).all(|k| {
        let d = 0.059 * k as f64;
        let (a, b) = (buckets(d, 1.0, 0.5, &cfg), buckets(d + range, 1.0, 0.5, &cfg));
        a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-9)
    });
    let ok = worst.iter().all(|&e| e < 1e-9) && range == expected && (range - 5.99585).abs() < 1e-5 && wraps;
    within(
        Duration::from_secs(1),
        start,
        check(ok, format!("max |Δφ| {:.1e}, |Δα| {:.1e}, |Δβ| {:.1e}, range {range:.6} m", worst[0], worst[1], worst[2])),
    )
}

fn polarisation_physics() -> Outcome {
    let start = Instant::now();
    let zero = [Reflection::Diffuse, Reflection::Specular].iter().all(|&k| degree_of_polarisation(0.0, 1.5, k) == 0.0);
    let brewster = [1.3, 1.5, 2.0]
        .iter()
        .map(|&eta: &f64| (degree_of_polarisation(eta.atan(), eta, Reflection::Specular) - 1.0).abs())
        .fold(0.0, f64::max);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mean_err = 0.0f64;
    let mut flip_err = 0.0f64;
    for _ in 0..1000 {
        let i_un = rng.random_range(0.0..5.0);
        let rho = rng.random_range(0.0..=1.0);
        let az = rng.random_range(0.0..std::f64::consts::TAU);
        let kind = if rng.random_bool(0.5) { Reflection::Diffuse } else { Reflection::Specular };
        let phi = polarisation_phase(az, kind);
        let c = POLARISER_ANGLES.map(|a| polarisation_intensity(i_un, rho, phi, a));
        mean_err = mean_err.max((c.iter().sum::<f64>() / 4.0 - i_un).abs());
        let flipped = POLARISER_ANGLES.map(|a| polarisation_intensity(i_un, rho, polarisation_phase(az + std::f64::consts::PI, kind), a));
        flip_err = c.iter().zip(&flipped).fold(flip_err, |m, (a, b)| m.max((a - b).abs()));
    }
    // a point-symmetric surface turns every azimuth by π between mirrored pixels
    let (w, h) = (21, 17);
    let cam = Intrinsics::pinhole(30.0, 30.0, (w - 1) as f64 / 2.0, (h - 1) as f64 / 2.0);
    let depth = Grid::from_fn(w, h, |x, y| {
        let (u, v) = (x as f64 - 10.0, y as f64 - 8.0);
        2.0 - 0.2 * (-(u * u + v * v) / 60.0).exp()
    });
    let img = render_polarisation(&depth, &Grid::new(w, h, 0.7), &cam, 1.5, Reflection::Diffuse).map_err(|e| e.to_string())?;
    let mut image_flip = 0.0f64;
    let mut image_mean = 0.0f64;
    for c in 0..4 {
        let g = img.0.channel_grid(c);
        for y in 0..h {
            for x in 0..w {
                image_flip = image_flip.max((g.get(x, y) - g.get(w - 1 - x, h - 1 - y)).abs());
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            let m = (0..4).map(|c| img.0.get(c, x, y) as f64).sum::<f64>() / 4.0;
            image_mean = image_mean.max((m - 0.7).abs());
        }
    }
    let ok = zero && brewster < 1e-6 && mean_err < 1e-9 && flip_err < 1e-9 && image_flip < 1e-6 && image_mean < 1e-6;
    within(
        Duration::from_secs(1),
        start,
        check(
            ok,
            format!(
                "ρ(0)=0 {zero}, Brewster |ρ_s-1| {brewster:.1e}, mean err {mean_err:.1e}, azimuth+π err {flip_err:.1e} (rendered f32 {image_flip:.1e})"
            ),
        ),
    )
}

fn terms_of(strategy: Strategy) -> Vec<(Term, Vec<Wrt>)> {
    let mut t = vec![(Term::Source(Source::Mask), vec![Wrt::Pol]), (Term::Source(Source::Stereo), vec![Wrt::Pol])];
    if strategy.itof {
        t.push((Term::Source(Source::CorrToPol), vec![Wrt::Pol, Wrt::Corr]));
        t.push((Term::Corr, vec![Wrt::Corr]));
    }
    if strategy.structured {
        t.push((Term::Source(Source::Struct), vec![Wrt::Pol]));
        t.push((Term::Hint, vec![Wrt::Pol]));
    }
    t
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let bundle = demo_scene("tiny")
        .and_then(|s| s.render_frame(&desk_rig(8, 8, 8, 8), &NoiseSpec::default(), 0))
        .map_err(|e| e.to_string())?;
    let (d_pol, d_corr) = probe_depths(&bundle).map_err(|e| e.to_string())?;
    let mut worst_term = (0.0f64, String::new());
    let mut worst_total = (0.0f64, String::new());
    let mut checks = 0;
    for strategy in [Strategy::S, Strategy::ST, Strategy::SL, Strategy::STL] {
        let model = LossModel::new(&bundle, strategy, LossConfig::default()).map_err(|e| e.to_string())?;
        let run = |objective: Objective, wrt: Wrt| {
            let cfg = FdConfig { objective, ..Default::default() };
            finite_diff_check(&model, &d_pol, Some(&d_corr), wrt, &cfg).map_err(|e| e.to_string())
        };
        for (term, wrts) in terms_of(strategy) {
            for wrt in wrts {
                let r = run(Objective::Term(term), wrt)?;
                checks += 1;
                if r.checked == 0 {
                    return Err(format!("{strategy} {} checked no pixel", term.name()));
                }
                if r.max_rel_err >= worst_term.0 {
                    worst_term = (r.max_rel_err, format!("{strategy}/{}/{wrt:?}", term.name()));
                }
            }
        }
        let wrts = if strategy.itof { vec![Wrt::Pol, Wrt::Corr] } else { vec![Wrt::Pol] };
        for wrt in wrts {
            let r = run(Objective::Total, wrt)?;
            checks += 1;
            if r.max_rel_err >= worst_total.0 {
                worst_total = (r.max_rel_err, format!("{strategy}/total/{wrt:?}"));
            }
        }
    }
    let ok = worst_term.0 < 1e-3 && worst_total.0 < 5e-3;
    within(
        Duration::from_secs(120),
        start,
        check(
            ok,
            format!(
                "{checks} checks; worst term {:.1e} ({}), worst composed {:.1e} ({})",
                worst_term.0, worst_term.1, worst_total.0, worst_total.1
            ),
        ),
    )
}

fn forward_consistency() -> Outcome {
    let start = Instant::now();
    let scene = demo_scene("plane").map_err(|e| e.to_string())?;
    let rig = desk_rig(64, 64, 64, 48);
    let mut bundle = scene.render_frame(&rig, &NoiseSpec::default(), 0).map_err(|e| e.to_string())?;
    bundle.temporal = scene
        .render_temporal(&rig, &temporal_poses(2), &NoiseSpec::default())
        .map_err(|e| e.to_string())?;
    let gt = bundle.gt_depth.as_ref().ok_or("no gt")?.to_grid();
    let d_corr = phase_depth(&bundle, &LossConfig::default()).map_err(|e| e.to_string())?;
    let mut worst = (0.0f64, String::new());
    let mut parts = Vec::new();
    for name in ["S", "ST", "SL", "STL", "MS", "MSTL"] {
        let strategy: Strategy = name.parse().map_err(|e: xmodal::Error| e.to_string())?;
        let model = LossModel::new(&bundle, strategy, LossConfig::default()).map_err(|e| e.to_string())?;
        let total = model
            .evaluate(&gt, strategy.itof.then_some(&d_corr), None)
            .map_err(|e| e.to_string())?
            .breakdown
            .total;
        parts.push(format!("{name} {total:.1e}"));
        if total >= worst.0 {
            worst = (total, name.to_string());
        }
    }
    within(
        Duration::from_secs(60),
        start,
        check(worst.0 < 1e-3, format!("total at GT: {}", parts.join(", "))),
    )
}

fn depth_recovery() -> Outcome {
    let start = Instant::now();
    let bundle = demo_scene("plane")
        .and_then(|s| s.render_frame(&desk_rig(64, 64, 64, 48), &NoiseSpec { seed: 5, ..Default::default() }, 0))
        .map_err(|e| e.to_string())?;
    let cfg = SolveConfig { seed: 5, ..Default::default() };
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().map_err(|e| e.to_string())?;
    let (a, report) = single.install(|| recover_depth(&bundle, &cfg)).map_err(|e| e.to_string())?;
    let (b, _) = single.install(|| recover_depth(&bundle, &cfg)).map_err(|e| e.to_string())?;
    let bits = |d: &DepthField| d.0.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let same = bits(&a) == bits(&b);
    let initial = report.initial_metrics.ok_or("no initial metrics")?.rmse;
    let fin = report.metrics.ok_or("no final metrics")?.rmse;
    let ratio = fin / initial;
    within(
        Duration::from_secs(60),
        start,
        check(
            ratio <= 0.1 && same && report.history.len() == 500,
            format!("RMSE {initial:.4} -> {fin:.4} m (ratio {ratio:.3}), 500 iterations, bit-identical rerun {same}"),
        ),
    )
}

fn cross_modal_benefit() -> Outcome {
    let start = Instant::now();
    let scene = demo_scene("textureless").map_err(|e| e.to_string())?;
    let rig = desk_rig(64, 64, 64, 48);
    let bundle = scene.render_frame(&rig, &NoiseSpec { seed: 11, ..Default::default() }, 0).map_err(|e| e.to_string())?;
    let patch = scene.primitive_mask(rig.camera(CameraRole::PolLeft), 1).map_err(|e| e.to_string())?;
    let gt = bundle.gt_depth.as_ref().ok_or("no gt")?.to_grid();
    let mut rmse = Vec::new();
    for strategy in [Strategy::S, Strategy::ST, Strategy::STL] {
        let cfg = SolveConfig { strategy, seed: 11, ..Default::default() };
        let (d, _) = recover_depth(&bundle, &cfg).map_err(|e| e.to_string())?;
        let m = evaluate_grids(&d.to_grid(), &gt, MAX_DEPTH, Some(&patch)).map_err(|e| e.to_string())?;
        rmse.push(m.rmse);
    }
    within(
        Duration::from_secs(180),
        start,
        check(
            rmse[1] < rmse[0] && rmse[2] < rmse[1],
            format!("patch RMSE S {:.4}, ST {:.4}, STL {:.4} m", rmse[0], rmse[1], rmse[2]),
        ),
    )
}

fn displacement_sharpening() -> Outcome {
    let start = Instant::now();
    let (w, h, edge, near, far) = (32, 24, 13, 1.2, 2.7);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut depth = Grid::from_fn(w, h, |x, _| if x < edge { near } else { far });
    for y in 0..h {
        let t: f64 = rng.random_range(0.05..0.95);
        depth.set(edge, y, t * near + (1.0 - t) * far);
    }
    let cfg = LossConfig::default();
    let df = df_ground_truth(&depth, cfg.df_threshold, cfg.df_radius).map_err(|e| e.to_string())?;
    let sharp = apply_displacement_field(&depth, &df).map_err(|e| e.to_string())?;
    let between = sharp.data().iter().filter(|&&v| v > near && v < far).count();
    let flying = depth.data().iter().filter(|&&v| v > near && v < far).count();
    within(
        Duration::from_secs(10),
        start,
        check(between == 0 && flying == h, format!("{flying} flying pixels before, {between} after")),
    )
}

fn bundle_adjustment() -> Outcome {
    let start = Instant::now();
    let gt = synthetic_rig(20, 7);
    let board = Board::default();
    let clean = synthetic_observations(&gt, &board, 0.0, 1).map_err(|e| e.to_string())?;
    let init = perturb(&gt, 1.0, 0.01, 1.02, 3);
    let graph = CalibGraph::new(init, clean).map_err(|e| e.to_string())?;
    let (_, exact) = optimize(&graph, Huber::default(), 200, 0.0).map_err(|e| e.to_string())?;
    let noisy = synthetic_observations(&gt, &board, 0.5, 100).map_err(|e| e.to_string())?;
    let nominal = perturb(&gt, 0.0, 0.0, 1.02, 0).cameras;
    let per_cam = per_camera_init(&noisy, &nominal, 20, Huber::default(), 100, 1e-10).map_err(|e| e.to_string())?;
    let graph = CalibGraph::new(per_cam, noisy).map_err(|e| e.to_string())?;
    let (_, joint) = optimize(&graph, Huber::default(), 100, 1e-10).map_err(|e| e.to_string())?;
    let gain = 1.0 - joint.final_rmse / joint.initial_rmse;
    within(
        Duration::from_secs(30),
        start,
        check(
            exact.final_rmse < 1e-6 && gain >= 0.05,
            format!(
                "noiseless {:.2e} -> {:.2e} px; 0.5 px noise {:.4} -> {:.4} px ({:.1}% better)",
                exact.initial_rmse,
                exact.final_rmse,
                joint.initial_rmse,
                joint.final_rmse,
                100.0 * gain
            ),
        ),
    )
}

fn metrics_example() -> Outcome {
    let start = Instant::now();
    let row = |v: &[f64]| Grid::from_vec(v.len(), 1, v.to_vec());
    let m = evaluate_grids(&row(&[1.0, 2.0, 4.0]), &row(&[1.0, 2.0, 2.0]), MAX_DEPTH, None).map_err(|e| e.to_string())?;
    let ok = (m.sq_rel - 0.6667).abs() < 1e-4 && (m.rmse - 1.1547).abs() < 1e-4 && (m.delta[0] - 2.0 / 3.0).abs() < 1e-4;
    within(
        Duration::from_secs(1),
        start,
        check(ok, format!("SqRel {:.4}, RMSE {:.4}, δ1 {:.4}", m.sq_rel, m.rmse, m.delta[0])),
    )
}

fn random_plane(rng: &mut ChaCha8Rng, w: usize, h: usize, c: usize, nan: bool) -> ImagePlane {
    let data = (0..w * h * c)
        .map(|_| {
            if nan && rng.random_bool(0.1) {
                f32::NAN
            } else {
                f32::from_bits(rng.random_range(0u32..0x7f00_0000)) * if rng.random_bool(0.5) { -1.0 } else { 1.0 }
            }
        })
        .collect();
    ImagePlane::new(w, h, c, data).expect("valid plane")
}

fn random_bundle(rng: &mut ChaCha8Rng, frame_id: u64) -> FrameBundle {
    let (w, h) = (rng.random_range(1..24), rng.random_range(1..24));
    let (iw, ih) = (rng.random_range(1..24), rng.random_range(1..24));
    let rig = desk_rig(w, h, iw, ih);
    let depth = |rng: &mut ChaCha8Rng| DepthField(random_plane(rng, w, h, 1, true));
    let pol = |rng: &mut ChaCha8Rng| {
        let c = if rng.random_bool(0.5) { 4 } else { 12 };
        PolarisationImage::new(random_plane(rng, w, h, c, false)).expect("pol")
    };
    let temporal = (0..rng.random_range(0..3))
        .map(|_| TemporalFrame {
            image: pol(rng),
            pose: RigidTransform::from_axis_angle(
                Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)),
                Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
            ),
        })
        .collect();
    FrameBundle {
        pol_left: pol(rng),
        pol_right: pol(rng),
        corr: CorrelationImage::new(random_plane(rng, iw, ih, 4, false)).expect("corr"),
        struct_depth: rng.random_bool(0.7).then(|| depth(rng)),
        gt_depth: rng.random_bool(0.7).then(|| depth(rng)),
        rig,
        frame_id,
        temporal,
    }
}

fn same_bits(a: &ImagePlane, b: &ImagePlane) -> bool {
    (a.width(), a.height(), a.channels()) == (b.width(), b.height(), b.channels())
        && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn io_roundtrip() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    for k in 0..100u64 {
        let b = random_bundle(&mut rng, k * 7919);
        let dir = root.path().join(k.to_string());
        write_bundle(&b, &dir).map_err(|e| e.to_string())?;
        let r = read_bundle(&dir).map_err(|e| format!("bundle {k}: {e}"))?;
        let opt = |a: &Option<DepthField>, b: &Option<DepthField>| match (a, b) {
            (Some(x), Some(y)) => same_bits(&x.0, &y.0),
            (None, None) => true,
            _ => false,
        };
        let ok = same_bits(&b.pol_left.0, &r.pol_left.0)
            && same_bits(&b.pol_right.0, &r.pol_right.0)
            && same_bits(&b.corr.0, &r.corr.0)
            && opt(&b.struct_depth, &r.struct_depth)
            && opt(&b.gt_depth, &r.gt_depth)
            && b.rig == r.rig
            && b.frame_id == r.frame_id
            && b.temporal.len() == r.temporal.len()
            && b.temporal.iter().zip(&r.temporal).all(|(x, y)| same_bits(&x.image.0, &y.image.0) && x.pose == y.pose);
        if !ok {
            return Err(format!("bundle {k} differs after the roundtrip"));
        }
    }
    within(Duration::from_secs(60), start, Ok("100 random bundles bit-identical".into()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("i-ToF roundtrip", itof_roundtrip),
        ("polarisation physics", polarisation_physics),
        ("gradient correctness", gradient_correctness),
        ("forward consistency", forward_consistency),
        ("depth recovery", depth_recovery),
        ("cross-modal benefit", cross_modal_benefit),
        ("displacement-field sharpening", displacement_sharpening),
        ("bundle adjustment", bundle_adjustment),
        ("metrics", metrics_example),
        ("bundle IO", io_roundtrip),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(d) => println!("criterion {:>2} PASS  {name}: {d}", i + 1),
            Err(d) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {d}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
