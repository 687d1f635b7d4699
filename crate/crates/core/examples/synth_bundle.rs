//! Render a demo scene to a bundle directory and read it back.

use xmodal::image::{read_bundle, write_bundle};
use xmodal::synth::{demo_scene, desk_rig, NoiseSpec, DEMO_NAMES};

fn main() -> xmodal::Result<()> {
    let name = std::env::args().nth(1).unwrap_or_else(|| "desk".into());
    if !DEMO_NAMES.contains(&name.as_str()) {
        eprintln!("scenes: {}", DEMO_NAMES.join(", "));
        std::process::exit(2);
    }
    let scene = demo_scene(&name)?;
    print!("{}", scene.to_text());
    let noise = NoiseSpec { pol_sigma: 0.005, corr_sigma: 0.01, struct_sigma: 0.002, seed: 1 };
    let bundle = scene.render_frame(&desk_rig(96, 72, 80, 60), &noise, 0)?;

    let dir = std::env::temp_dir().join(format!("xmodal_{name}"));
    write_bundle(&bundle, &dir)?;
    let back = read_bundle(&dir)?;
    println!("wrote {} (pol {}x{}, corr {}x{})", dir.display(), back.pol_left.0.width(), back.pol_left.0.height(), back.corr.0.width(), back.corr.0.height());
    Ok(())
}
