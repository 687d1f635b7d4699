//! Normals and viewing geometry of a rendered sphere.

use xmodal::geometry::CameraRole;
use xmodal::normals::{normal_simple, view_geometry};
use xmodal::synth::{demo_scene, desk_rig};

fn main() -> xmodal::Result<()> {
    let rig = desk_rig(48, 36, 48, 36);
    let cam = rig.camera(CameraRole::PolLeft);
    let depth = demo_scene("desk")?.render_depth(cam)?.to_grid();
    let normals = normal_simple(&depth, &cam.intrinsics)?;
    let view = view_geometry(&depth, &normals, &cam.intrinsics)?;
    for y in (0..36).step_by(7) {
        for x in (0..48).step_by(9) {
            match normals.get(x, y) {
                Some(n) => print!(
                    "({:+.2} {:+.2} {:+.2}) θ={:4.1} α={:5.1}   ",
                    n.x,
                    n.y,
                    n.z,
                    view.theta.get(x, y).to_degrees(),
                    view.azimuth.get(x, y).to_degrees()
                ),
                None => print!("{:<36}", "(invalid)"),
            }
        }
        println!();
    }
    Ok(())
}
