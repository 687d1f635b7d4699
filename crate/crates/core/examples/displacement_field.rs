use xmodal::losses::{apply_displacement_field, df_ground_truth, LossConfig};
use xmodal::Grid;

fn main() -> xmodal::Result<()> {
    // a depth edge with one column of interpolated flying pixels
    let mut depth = Grid::from_fn(12, 3, |x, _| if x < 6 { 1.0 } else { 2.0 });
    for y in 0..3 {
        depth.set(6, y, 1.2 + 0.3 * y as f64);
    }
    let cfg = LossConfig::default();
    let df = df_ground_truth(&depth, cfg.df_threshold, cfg.df_radius)?;
    let sharp = apply_displacement_field(&depth, &df)?;
    for y in 0..3 {
        let row = |g: &Grid| (3..10).map(|x| format!("{:.2}", g.get(x, y))).collect::<Vec<_>>().join(" ");
        println!("before {}   after {}", row(&depth), row(&sharp));
    }
    Ok(())
}
