use xmodal::solver::{evaluate_grids, MAX_DEPTH};
use xmodal::Grid;

fn main() -> xmodal::Result<()> {
    let gt = Grid::from_fn(16, 16, |x, y| 1.0 + 0.1 * (x + y) as f64);
    let pred = gt.map(|d| d * 1.05 + 0.01);
    let m = evaluate_grids(&pred, &gt, MAX_DEPTH, None)?;
    println!("{}", xmodal::solver::MetricsReport::CSV_HEADER);
    println!("{}", m.csv_row());
    Ok(())
}
