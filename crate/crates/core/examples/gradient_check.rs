//! Adjoint gradients against central differences on the tiny scene.

use xmodal::gradients::{finite_diff_check, probe_depths, FdConfig};
use xmodal::losses::{LossConfig, LossModel, Objective, Strategy, Wrt};
use xmodal::synth::{demo_scene, desk_rig, NoiseSpec};

fn main() -> xmodal::Result<()> {
    let bundle = demo_scene("tiny")?.render_frame(&desk_rig(8, 8, 8, 8), &NoiseSpec::default(), 0)?;
    let (d_pol, d_corr) = probe_depths(&bundle)?;
    for strategy in [Strategy::S, Strategy::ST, Strategy::SL, Strategy::STL] {
        let model = LossModel::new(&bundle, strategy, LossConfig::default())?;
        for wrt in [Wrt::Pol, Wrt::Corr] {
            if wrt == Wrt::Corr && !strategy.itof {
                continue;
            }
            let cfg = FdConfig { objective: Objective::Total, ..Default::default() };
            let r = finite_diff_check(&model, &d_pol, Some(&d_corr), wrt, &cfg)?;
            println!(
                "{strategy:<4} {wrt:?}: max rel err {:.2e} over {} pixels ({} skipped) {}",
                r.max_rel_err,
                r.checked,
                r.skipped,
                if r.passed() { "ok" } else { "FAIL" }
            );
        }
    }
    Ok(())
}
