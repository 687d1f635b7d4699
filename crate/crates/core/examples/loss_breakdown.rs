use xmodal::losses::{LossConfig, LossModel, Strategy};
use xmodal::solver::phase_depth;
use xmodal::synth::{demo_scene, desk_rig, NoiseSpec};

fn main() -> xmodal::Result<()> {
    let bundle = demo_scene("desk")?.render_frame(&desk_rig(64, 48, 64, 48), &NoiseSpec::default(), 0)?;
    let gt = bundle.gt_depth.as_ref().expect("rendered").to_grid();
    let d_corr = phase_depth(&bundle, &LossConfig::default())?;
    let wrong = gt.map(|d| d * 1.1);

    for strategy in [Strategy::S, Strategy::ST, Strategy::SL, Strategy::STL] {
        let model = LossModel::new(&bundle, strategy, LossConfig::default())?;
        let corr = strategy.itof.then_some(&d_corr);
        let at_gt = model.evaluate(&gt, corr, None)?.breakdown;
        let off = model.evaluate(&wrong, corr, None)?.breakdown;
        println!("{strategy:<4} total at GT {:.5}   at 1.1·GT {:.5}", at_gt.total, off.total);
        for t in &off.sources {
            println!("       {:<12} {:.5}", t.term.name(), t.mean().unwrap_or(f64::NAN));
        }
    }
    Ok(())
}
