//! Recover depth on the textureless scene with and without the i-ToF camera.

use xmodal::geometry::CameraRole;
use xmodal::losses::Strategy;
use xmodal::solver::{evaluate_grids, recover_depth, SolveConfig, MAX_DEPTH};
use xmodal::synth::{demo_scene, desk_rig, NoiseSpec};

fn main() -> xmodal::Result<()> {
    let scene = demo_scene("textureless")?;
    let rig = desk_rig(64, 64, 64, 48);
    let bundle = scene.render_frame(&rig, &NoiseSpec::default(), 0)?;
    let patch = scene.primitive_mask(rig.camera(CameraRole::PolLeft), 1)?;
    let gt = bundle.gt_depth.as_ref().expect("rendered").to_grid();

    for strategy in [Strategy::S, Strategy::ST, Strategy::STL] {
        let (depth, report) = recover_depth(&bundle, &SolveConfig { strategy, ..Default::default() })?;
        let all = report.metrics.expect("gt present");
        let on_patch = evaluate_grids(&depth.to_grid(), &gt, MAX_DEPTH, Some(&patch))?;
        println!(
            "{strategy:<4} loss {:.4} -> {:.4}  RMSE {:.4} m  patch RMSE {:.4} m  ({:.1?})",
            report.history[0],
            report.breakdown.total,
            all.rmse,
            on_patch.rmse,
            report.wall_time
        );
    }
    Ok(())
}
