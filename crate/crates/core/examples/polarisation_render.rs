use xmodal::geometry::Intrinsics;
use xmodal::polarisation::{degree_of_polarisation, render_polarisation, Reflection, POLARISER_ANGLES};
use xmodal::Grid;

fn main() -> xmodal::Result<()> {
    let eta = 1.5_f64;
    println!("theta_deg  rho_diffuse  rho_specular");
    for deg in (0..=85).step_by(10) {
        let t = (deg as f64).to_radians();
        println!(
            "{deg:>9}  {:>11.4}  {:>12.4}",
            degree_of_polarisation(t, eta, Reflection::Diffuse),
            degree_of_polarisation(t, eta, Reflection::Specular)
        );
    }
    println!("Brewster angle {:.2} deg", eta.atan().to_degrees());

    // a tilted plane seen through four polariser angles
    let (w, h) = (32, 24);
    let cam = Intrinsics::pinhole(40.0, 40.0, 15.5, 11.5);
    let depth = Grid::from_fn(w, h, |x, _| 1.5 + 0.02 * x as f64);
    let img = render_polarisation(&depth, &Grid::new(w, h, 0.6), &cam, eta, Reflection::Diffuse)?;
    for (c, a) in POLARISER_ANGLES.iter().enumerate() {
        println!("{:>5.0} deg: centre intensity {:.5}", a.to_degrees(), img.0.get(c, w / 2, h / 2));
    }
    Ok(())
}
