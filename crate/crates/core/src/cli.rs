//! The `xmodal` command line.
//!
//! Exit codes: 0 success, 1 a check failed, 2 usage or parse error, 3 input
//! data missing.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::calib::{
    board_pose_from_homography, optimize, per_camera_init, perturb, read_observations, synthetic_observations,
    synthetic_rig, write_observations, Board, CalibGraph, CalibParams, Huber, Observation,
};
use crate::error::Error;
use crate::geometry::{CameraRig, CameraRole, RigidTransform};
use crate::gradients::{finite_diff_check, probe_depths, FdConfig};
use crate::grid::Grid;
use crate::image::{read_bundle, read_image, write_bundle, write_image, DepthField, ImagePlane};
use crate::losses::{LossConfig, LossModel, Objective, Source, Strategy, Term, Wrt};
use crate::solver::{evaluate_grids, recover_depth, Init, MetricsReport, Optimizer, SolveConfig, MAX_DEPTH};
use crate::synth::{demo_scene, desk_rig, NoiseSpec, SceneSpec, DEMO_NAMES};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_MISSING: i32 = 3;

const FORMATS: &str = "\
File formats:
  bundle directory   one <role>.f32 (little-endian f32, row-major, channel-planar)
                     plus <role>.txt header per image (width, height, channels,
                     dtype=f32le, role, frame_id); roles pol_left, pol_right,
                     corr, struct_depth, gt_depth, temporal_<k>; rig.txt and
                     temporal_poses.txt alongside
  rig file           one camera per line: role= width= height= fx= fy= cx= cy=
                     k1= k2= p1= p2= k3= rotation=<9 floats, row-major>
                     translation=<3 floats>; the extrinsic maps pol_left
                     coordinates into the camera
  scene file         `scene eta=<f>` then one primitive per line:
                     plane point= normal= [radius=] | sphere center= radius= |
                     box center= size= [rotation=<axis-angle>], each with
                     albedo= [texture=checker|sines period= contrast=]
                     [reflection=diffuse|specular] [itof_alpha=] [itof_beta=]
  observations CSV   cam,image,point_id,X,Y,Z,u,v with board points on Z = 0
  manifest.txt       written to every output directory before anything else";

#[derive(Parser, Debug)]
#[command(name = "xmodal", version, about = "Cross-modal depth supervision and rig calibration", after_long_help = FORMATS)]
pub struct Cli {
    /// Worker threads; 1 makes every run bit-reproducible.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a scene into a frame bundle.
    Synth(SynthArgs),
    /// Recover depth from a bundle under a supervision strategy.
    Recover(RecoverArgs),
    /// Compare adjoint gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Generate synthetic board observations for the desk rig.
    Board(BoardArgs),
    /// Jointly refine a rig from board observations.
    Calibrate(CalibrateArgs),
    /// Depth metrics of a prediction against ground truth.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
#[command(group(clap::ArgGroup::new("source").required(true).args(["scene", "demo"])))]
pub struct SynthArgs {
    /// Scene text file.
    #[arg(long)]
    pub scene: Option<PathBuf>,
    /// Built-in scene instead of a file.
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(DEMO_NAMES))]
    pub demo: Option<String>,
    /// Rig file; defaults to the desk rig at `--size` / `--itof-size`.
    #[arg(long, conflicts_with_all = ["size", "itof_size"])]
    pub rig: Option<PathBuf>,
    /// Polarisation resolution of the desk rig, `WxH`.
    #[arg(long, default_value = "64x64", value_parser = parse_size)]
    pub size: (usize, usize),
    /// i-ToF resolution of the desk rig, `WxH`; defaults to 64x48 scaled with `--size`.
    #[arg(long, value_parser = parse_size)]
    pub itof_size: Option<(usize, usize)>,
    #[arg(long, default_value_t = 0.0)]
    pub pol_sigma: f64,
    #[arg(long, default_value_t = 0.0)]
    pub corr_sigma: f64,
    #[arg(long, default_value_t = 0.0)]
    pub struct_sigma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0)]
    pub frame_id: u64,
    /// Extra left-camera views at known poses, for strategy M.
    #[arg(long, default_value_t = 0)]
    pub temporal: usize,
    /// Also write one mask per primitive under `masks/`.
    #[arg(long)]
    pub masks: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct RecoverArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    /// Letters from S (stereo), T (i-ToF), L (structured light), M (temporal).
    #[arg(long, value_parser = parse_strategy)]
    pub strategy: Strategy,
    #[arg(long, default_value_t = 500)]
    pub iterations: usize,
    #[arg(long, default_value_t = 1e-2)]
    pub step: f64,
    /// plain, momentum or adaptive.
    #[arg(long, default_value = "momentum", value_parser = parse_optimizer)]
    pub optimizer: Optimizer,
    /// const:<metres>, noisy-gt:<sigma> or from-corr.
    #[arg(long, default_value = "const:3", value_parser = parse_init)]
    pub init: Init,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 6)]
    pub levels: usize,
    #[arg(long, default_value_t = 0.3)]
    pub decay: f64,
    /// Snap the result through its own displacement field.
    #[arg(long)]
    pub sharpen: bool,
    /// Mask image (`.f32` with header); adds a `patch` metrics row.
    #[arg(long)]
    pub patch: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum WrtArg {
    Pol,
    Corr,
    Both,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long, value_parser = parse_strategy)]
    pub strategy: Strategy,
    #[arg(long, default_value_t = 1e-4)]
    pub eps: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub tol: f64,
    /// Depth to differentiate; `both` covers D_corr only under T.
    #[arg(long, value_enum, default_value = "both")]
    pub wrt: WrtArg,
    /// `total` or one term: mask, stereo, corr_to_pol, struct, corr, hint, df.
    #[arg(long, default_value = "total")]
    pub term: String,
    #[arg(long, hide = true)]
    pub corrupt_adjoint: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct BoardArgs {
    #[arg(long, default_value_t = 20)]
    pub poses: usize,
    /// Gaussian corner noise per coordinate, pixels.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub observations: PathBuf,
    /// Initial rig.
    #[arg(long)]
    pub rig: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    pub huber: f64,
    #[arg(long, default_value_t = 100)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 1e-12)]
    pub tol: f64,
    /// Calibrate each camera alone first and keep only the rig's nominal
    /// intrinsics.
    #[arg(long)]
    pub per_camera: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Predicted depth `.f32`.
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth depth `.f32`.
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, default_value_t = MAX_DEPTH)]
    pub max_range: f64,
    /// Optional mask `.f32`; non-zero pixels are evaluated.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s.split_once('x').ok_or_else(|| format!("expected WxH, got {s:?}"))?;
    let parse = |v: &str| v.parse::<usize>().ok().filter(|&n| n > 0).ok_or_else(|| format!("bad size {s:?}"));
    Ok((parse(w)?, parse(h)?))
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_optimizer(s: &str) -> Result<Optimizer, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_init(s: &str) -> Result<Init, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// A failed run with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure { code: exit_code(&e), message: e.to_string() }
    }
}

fn missing(message: impl Into<String>) -> Failure {
    Failure { code: EXIT_MISSING, message: message.into() }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Arg(_) | Error::Parse { .. } | Error::Format(_) => EXIT_USAGE,
        Error::MissingModality(_) | Error::Io { .. } => EXIT_MISSING,
        Error::BehindCamera { .. } | Error::Numeric { .. } | Error::Singular(_) | Error::Diverged { .. } => {
            EXIT_CHECK_FAILED
        }
    }
}

/// Provenance of one run, written before any other output.
#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub subcommand: String,
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out_dir: PathBuf,
    pub version: String,
}

impl RunManifest {
    pub fn new(subcommand: &str, config: Option<&Path>, seed: Option<u64>, out_dir: &Path) -> Self {
        RunManifest {
            subcommand: subcommand.into(),
            config: config.map(Path::to_path_buf),
            seed,
            out_dir: out_dir.to_path_buf(),
            version: env!("CARGO_PKG_VERSION").into(),
        }
    }

    pub fn to_text(&self) -> String {
        let opt = |p: &Option<PathBuf>| p.as_ref().map_or(String::new(), |p| p.display().to_string());
        format!(
            "subcommand={}\nconfig={}\nseed={}\nout_dir={}\nversion={}\n",
            self.subcommand,
            opt(&self.config),
            self.seed.map_or(String::new(), |s| s.to_string()),
            self.out_dir.display(),
            self.version
        )
    }

    pub fn write(&self) -> crate::Result<()> {
        fs::create_dir_all(&self.out_dir).map_err(|e| Error::io(&self.out_dir, e))?;
        let p = self.out_dir.join("manifest.txt");
        fs::write(&p, self.to_text()).map_err(|e| Error::io(&p, e))
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// exit code. Messages go to stdout and stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

/// Runs a parsed command inside a pool of the requested size.
pub fn execute(cli: Cli) -> Result<i32, Failure> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure { code: EXIT_USAGE, message: "--threads must be at least 1".into() });
        }
        pool = pool.num_threads(n);
    }
    let pool = pool
        .build()
        .map_err(|e| Failure { code: EXIT_CHECK_FAILED, message: format!("thread pool: {e}") })?;
    pool.install(|| match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Recover(a) => cmd_recover(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::Board(a) => cmd_board(&a),
        Command::Calibrate(a) => cmd_calibrate(&a),
        Command::Eval(a) => cmd_eval(&a),
    })
}

fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e).into())
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Error::io(path, e).into())
}

/// Reads `<dir>/<role>.f32` given the path of either file.
fn read_plane(path: &Path) -> Result<ImagePlane, Failure> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let role = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Failure { code: EXIT_USAGE, message: format!("bad image path {}", path.display()) })?;
    Ok(read_image(dir, role)?.0)
}

fn read_mask(path: &Path, dims: (usize, usize)) -> Result<Vec<bool>, Failure> {
    let plane = read_plane(path)?;
    if (plane.width(), plane.height()) != dims {
        return Err(Failure {
            code: EXIT_USAGE,
            message: format!(
                "mask {} is {}x{}, expected {}x{}",
                path.display(),
                plane.width(),
                plane.height(),
                dims.0,
                dims.1
            ),
        });
    }
    Ok(plane.channel(0).iter().map(|&v| v > 0.5).collect())
}

fn metrics_line(scope: &str, m: &MetricsReport) -> String {
    format!("{scope},{}", m.csv_row())
}

/// Known poses for temporal views: alternating sideways steps of 2 cm and a
/// slight yaw.
pub fn temporal_poses(n: usize) -> Vec<RigidTransform> {
    (0..n)
        .map(|k| {
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            let step = 0.02 * (k / 2 + 1) as f64 * sign;
            RigidTransform::from_axis_angle(
                nalgebra::Vector3::new(0.0, 0.1 * step, 0.0),
                nalgebra::Vector3::new(step, 0.0, 0.0),
            )
        })
        .collect()
}

fn cmd_synth(a: &SynthArgs) -> Result<i32, Failure> {
    RunManifest::new("synth", a.scene.as_deref(), Some(a.seed), &a.out).write()?;
    let scene = match (&a.scene, &a.demo) {
        (Some(p), _) => SceneSpec::parse(&read_text(p)?)?,
        (None, Some(name)) => demo_scene(name)?,
        (None, None) => unreachable!("clap requires one source"),
    };
    let rig = match &a.rig {
        Some(p) => CameraRig::parse(&read_text(p)?)?,
        None => {
            let (w, h) = a.size;
            let (iw, ih) = a.itof_size.unwrap_or((w, (h * 3 / 4).max(1)));
            desk_rig(w, h, iw, ih)
        }
    };
    let noise = NoiseSpec {
        pol_sigma: a.pol_sigma,
        corr_sigma: a.corr_sigma,
        struct_sigma: a.struct_sigma,
        seed: a.seed,
    };
    let mut bundle = scene.render_frame(&rig, &noise, a.frame_id)?;
    if a.temporal > 0 {
        bundle.temporal = scene.render_temporal(&rig, &temporal_poses(a.temporal), &noise)?;
    }
    write_bundle(&bundle, &a.out)?;
    write_text(&a.out.join("scene.txt"), &scene.to_text())?;
    if a.masks {
        let dir = a.out.join("masks");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let cam = rig.camera(CameraRole::PolLeft);
        for k in 0..scene.primitives.len() {
            let m = scene.primitive_mask(cam, k)?;
            let data = m.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
            let plane = ImagePlane::new(cam.width, cam.height, 1, data)?;
            write_image(&dir, &format!("primitive_{k}"), &plane, a.frame_id)?;
        }
    }
    let images = 3 + usize::from(bundle.struct_depth.is_some()) + usize::from(bundle.gt_depth.is_some()) + bundle.temporal.len();
    println!("wrote {images} images to {}", a.out.display());
    Ok(EXIT_OK)
}

fn cmd_recover(a: &RecoverArgs) -> Result<i32, Failure> {
    RunManifest::new("recover", Some(&a.bundle), Some(a.seed), &a.out).write()?;
    let bundle = read_bundle(&a.bundle)?;
    let cfg = SolveConfig {
        strategy: a.strategy,
        iterations: a.iterations,
        step: a.step,
        optimizer: a.optimizer,
        seed: a.seed,
        init: a.init,
        levels: a.levels,
        level_decay: a.decay,
        sharpen: a.sharpen,
        loss: LossConfig::default(),
    };
    cfg.validate()?;
    let cam = bundle.rig.camera(CameraRole::PolLeft);
    let patch = a.patch.as_deref().map(|p| read_mask(p, (cam.width, cam.height))).transpose()?;
    let (depth, report) = recover_depth(&bundle, &cfg)?;

    write_image(&a.out, "depth", &depth.0, bundle.frame_id)?;
    if let Some(dc) = &report.corr_depth {
        write_image(&a.out, "depth_corr", &DepthField::from_grid(dc).0, bundle.frame_id)?;
    }
    write_text(&a.out.join("report.csv"), &report.history_csv())?;
    let (header, row) = report.breakdown.csv();
    write_text(&a.out.join("breakdown.csv"), &format!("{header}\n{row}\n"))?;

    let mut metrics = format!("scope,{}\n", MetricsReport::CSV_HEADER);
    if let Some(gt) = &bundle.gt_depth {
        let gt = gt.to_grid();
        let pred = depth.to_grid();
        for (scope, region) in [("all", None), ("patch", patch.as_deref())] {
            if scope == "patch" && region.is_none() {
                continue;
            }
            let m = evaluate_grids(&pred, &gt, MAX_DEPTH, region)?;
            metrics.push_str(&metrics_line(scope, &m));
            metrics.push('\n');
        }
    }
    write_text(&a.out.join("metrics.csv"), &metrics)?;
    print!("{metrics}");
    println!(
        "strategy {} final loss {:.6e} in {:.2?}",
        a.strategy,
        report.history.last().copied().unwrap_or(f64::NAN),
        report.wall_time
    );
    Ok(EXIT_OK)
}

fn parse_objective(name: &str) -> Result<Objective, Failure> {
    let terms = [
        Term::Source(Source::Mask),
        Term::Source(Source::Stereo),
        Term::Source(Source::CorrToPol),
        Term::Source(Source::Struct),
        Term::Corr,
        Term::Hint,
        Term::DisplacementField,
    ];
    if name == "total" {
        return Ok(Objective::Total);
    }
    terms
        .into_iter()
        .find(|t| t.name() == name)
        .map(Objective::Term)
        .ok_or_else(|| Failure { code: EXIT_USAGE, message: format!("unknown loss term {name:?}") })
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<i32, Failure> {
    RunManifest::new("gradcheck", Some(&a.bundle), None, &a.out).write()?;
    let objective = parse_objective(&a.term)?;
    let cfg = FdConfig {
        eps: a.eps,
        tol: a.tol,
        objective,
        corrupt_adjoint: a.corrupt_adjoint,
        ..Default::default()
    };
    if !(cfg.eps > 0.0 && cfg.eps.is_finite()) || !(cfg.tol > 0.0) {
        return Err(Failure { code: EXIT_USAGE, message: "--eps and --tol must be positive".into() });
    }
    let bundle = read_bundle(&a.bundle)?;
    let (d_pol, d_corr) = probe_depths(&bundle)?;
    let model = LossModel::new(&bundle, a.strategy, LossConfig::default())?;
    let targets: Vec<Wrt> = match a.wrt {
        WrtArg::Pol => vec![Wrt::Pol],
        WrtArg::Corr => vec![Wrt::Corr],
        WrtArg::Both if a.strategy.itof => vec![Wrt::Pol, Wrt::Corr],
        WrtArg::Both => vec![Wrt::Pol],
    };
    let mut csv = String::from("wrt,max_rel_err,worst_x,worst_y,checked,skipped,tol,passed\n");
    let mut passed = true;
    for wrt in targets {
        let r = finite_diff_check(&model, &d_pol, Some(&d_corr), wrt, &cfg)?;
        let (x, y) = r.worst_pixel.map_or((String::new(), String::new()), |(x, y)| (x.to_string(), y.to_string()));
        let name = match wrt {
            Wrt::Pol => "pol",
            Wrt::Corr => "corr",
        };
        let _ = writeln!(csv, "{name},{:e},{x},{y},{},{},{:e},{}", r.max_rel_err, r.checked, r.skipped, r.tol, r.passed());
        passed &= r.passed();
    }
    write_text(&a.out.join("gradcheck.csv"), &csv)?;
    print!("{csv}");
    Ok(if passed { EXIT_OK } else { EXIT_CHECK_FAILED })
}

fn cmd_board(a: &BoardArgs) -> Result<i32, Failure> {
    RunManifest::new("board", None, Some(a.seed), &a.out).write()?;
    let gt = synthetic_rig(a.poses, a.seed);
    let obs = synthetic_observations(&gt, &Board::default(), a.noise, a.seed.wrapping_add(1))?;
    write_observations(&a.out.join("observations.csv"), &obs)?;
    write_text(&a.out.join("rig_gt.txt"), &gt.to_rig()?.to_text())?;
    let init = perturb(&gt, 1.0, 0.01, 1.02, a.seed.wrapping_add(2));
    write_text(&a.out.join("rig_init.txt"), &init.to_rig()?.to_text())?;
    println!("wrote {} observations of {} poses to {}", obs.len(), a.poses, a.out.display());
    Ok(EXIT_OK)
}

/// Board poses from camera 0's homography, or from the first camera that
/// sees the board, moved into the reference frame through the rig.
fn homography_poses(obs: &[Observation], params: &CalibParams, n_images: usize) -> crate::Result<Vec<RigidTransform>> {
    (0..n_images)
        .map(|i| {
            for (k, cam) in params.cameras.iter().enumerate() {
                let pairs: Vec<_> = obs
                    .iter()
                    .filter(|o| o.cam == k && o.image == i && cam.contains(&o.pixel))
                    .map(|o| (o.point, o.pixel))
                    .collect();
                if pairs.len() >= 6 {
                    let local = board_pose_from_homography(&pairs, &cam.intrinsics)?;
                    return Ok(cam.extrinsic.inverse().compose(&local));
                }
            }
            Err(Error::Singular(format!("image {i} has no camera with 6 visible corners")))
        })
        .collect()
}

fn cmd_calibrate(a: &CalibrateArgs) -> Result<i32, Failure> {
    RunManifest::new("calibrate", Some(&a.observations), None, &a.out).write()?;
    let kernel = Huber::new(a.huber)?;
    let obs = read_observations(&a.observations)?;
    if obs.is_empty() {
        return Err(missing(format!("{} holds no observation", a.observations.display())));
    }
    let rig = CameraRig::parse(&read_text(&a.rig)?)?;
    let n_images = obs.iter().map(|o| o.image).max().unwrap_or(0) + 1;
    let nominal = CalibParams::from_rig(&rig, Vec::new());
    let init = if a.per_camera {
        per_camera_init(&obs, &nominal.cameras, n_images, kernel, a.max_iters, a.tol)?
    } else {
        let poses = homography_poses(&obs, &nominal, n_images)?;
        CalibParams { poses, ..nominal }
    };
    let graph = CalibGraph::new(init, obs)?;
    let (fit, report) = optimize(&graph, kernel, a.max_iters, a.tol)?;
    write_text(&a.out.join("rig.txt"), &fit.to_rig()?.to_text())?;
    write_text(&a.out.join("calib_report.csv"), &report.to_csv())?;
    let summary = format!(
        "initial_rmse,final_rmse,iterations,edges\n{},{},{},{}\n",
        report.initial_rmse, report.final_rmse, report.iterations, report.edges
    );
    write_text(&a.out.join("calib_summary.csv"), &summary)?;
    print!("{summary}");
    Ok(EXIT_OK)
}

fn cmd_eval(a: &EvalArgs) -> Result<i32, Failure> {
    RunManifest::new("eval", Some(&a.pred), None, &a.out).write()?;
    let pred = DepthField(read_plane(&a.pred)?).to_grid();
    let gt = DepthField(read_plane(&a.gt)?).to_grid();
    if !pred.same_dims(&gt) {
        return Err(Failure { code: EXIT_USAGE, message: "prediction and ground truth differ in size".into() });
    }
    let mask = a.mask.as_deref().map(|p| read_mask(p, gt.dims())).transpose()?;
    if overlap(&pred, &gt, a.max_range, mask.as_deref()) == 0 {
        return Err(missing("no pixel is valid in both depths within range and mask"));
    }
    let m = evaluate_grids(&pred, &gt, a.max_range, mask.as_deref())?;
    let text = format!("{}\n{}\n", MetricsReport::CSV_HEADER, m.csv_row());
    write_text(&a.out.join("metrics.csv"), &text)?;
    print!("{text}");
    Ok(EXIT_OK)
}

fn overlap(pred: &Grid, gt: &Grid, max_range: f64, mask: Option<&[bool]>) -> usize {
    pred.data()
        .iter()
        .zip(gt.data())
        .enumerate()
        .filter(|(i, (d, g))| {
            d.is_finite() && **d > 0.0 && g.is_finite() && **g > 0.0 && **g <= max_range && mask.is_none_or(|m| m[*i])
        })
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn xmodal(args: &[&str]) -> i32 {
        run(std::iter::once("xmodal").chain(args.iter().copied()))
    }

    fn p(dir: &TempDir, rel: &str) -> String {
        dir.path().join(rel).to_str().unwrap().to_owned()
    }

    #[test]
    fn synth_writes_manifest_and_five_images() {
        let t = TempDir::new().unwrap();
        assert_eq!(xmodal(&["synth", "--demo", "plane", "--size", "16x16", "--out", &p(&t, "b")]), 0);
        let files: Vec<String> = fs::read_dir(t.path().join("b"))
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        assert_eq!(files.iter().filter(|f| f.ends_with(".f32")).count(), 5);
        let manifest = fs::read_to_string(t.path().join("b/manifest.txt")).unwrap();
        assert!(manifest.starts_with("subcommand=synth\n"));
    }

    #[test]
    fn synth_is_byte_deterministic() {
        let t = TempDir::new().unwrap();
        for out in ["a", "b"] {
            let args = ["synth", "--demo", "desk", "--size", "16x16", "--pol-sigma", "0.01", "--seed", "9", "--out", &p(&t, out)];
            assert_eq!(xmodal(&args), 0);
        }
        for role in ["pol_left", "pol_right", "corr", "struct_depth", "gt_depth"] {
            let read = |d: &str| fs::read(t.path().join(d).join(format!("{role}.f32"))).unwrap();
            assert_eq!(read("a"), read("b"), "{role}");
        }
    }

    #[test]
    fn bad_scene_key_is_a_parse_error() {
        let t = TempDir::new().unwrap();
        let scene = t.path().join("scene.txt");
        fs::write(&scene, "scene eta=1.5\nsphere center=0,0,2 radius=0.5 albedo=0.5 glow=1\n").unwrap();
        assert_eq!(xmodal(&["synth", "--scene", scene.to_str().unwrap(), "--out", &p(&t, "b")]), EXIT_USAGE);
        assert!(t.path().join("b/manifest.txt").exists());
    }

    #[test]
    fn recover_writes_one_row_per_iteration() {
        let t = TempDir::new().unwrap();
        assert_eq!(xmodal(&["synth", "--demo", "plane", "--size", "16x16", "--out", &p(&t, "b")]), 0);
        assert_eq!(xmodal(&["--threads", "1", "recover", "--bundle", &p(&t, "b"), "--strategy", "S", "--out", &p(&t, "r")]), 0);
        let report = fs::read_to_string(t.path().join("r/report.csv")).unwrap();
        assert_eq!(report.lines().count(), 501);
        let metrics = fs::read_to_string(t.path().join("r/metrics.csv")).unwrap();
        assert!(metrics.lines().nth(1).unwrap().starts_with("all,"));
        assert!(t.path().join("r/depth.f32").exists());
    }

    #[test]
    fn recover_rejects_bad_strategy_and_missing_modality() {
        let t = TempDir::new().unwrap();
        assert_eq!(xmodal(&["synth", "--demo", "far", "--size", "8x8", "--out", &p(&t, "b")]), 0);
        let b = p(&t, "b");
        assert_eq!(xmodal(&["recover", "--bundle", &b, "--strategy", "X", "--out", &p(&t, "r")]), EXIT_USAGE);
        fs::remove_file(t.path().join("b/struct_depth.f32")).unwrap();
        fs::remove_file(t.path().join("b/struct_depth.txt")).unwrap();
        let code = xmodal(&["recover", "--bundle", &b, "--strategy", "SL", "--iterations", "2", "--out", &p(&t, "r")]);
        assert_eq!(code, EXIT_MISSING);
        assert_eq!(xmodal(&["recover", "--bundle", &p(&t, "none"), "--strategy", "S", "--out", &p(&t, "r")]), EXIT_MISSING);
    }

    #[test]
    fn gradcheck_exit_codes() {
        let t = TempDir::new().unwrap();
        let b = p(&t, "b");
        assert_eq!(xmodal(&["synth", "--demo", "tiny", "--size", "8x8", "--itof-size", "8x8", "--out", &b]), 0);
        let out = p(&t, "g");
        assert_eq!(xmodal(&["gradcheck", "--bundle", &b, "--strategy", "T", "--out", &out]), EXIT_OK);
        assert_eq!(
            xmodal(&["gradcheck", "--bundle", &b, "--strategy", "T", "--corrupt-adjoint", "--out", &out]),
            EXIT_CHECK_FAILED
        );
        assert_eq!(xmodal(&["gradcheck", "--bundle", &b, "--strategy", "T", "--eps", "0", "--out", &out]), EXIT_USAGE);
        assert_eq!(xmodal(&["gradcheck", "--bundle", &b, "--strategy", "S", "--term", "glow", "--out", &out]), EXIT_USAGE);
        let big = p(&t, "big");
        assert_eq!(xmodal(&["synth", "--demo", "tiny", "--size", "40x40", "--out", &big]), 0);
        assert_eq!(xmodal(&["gradcheck", "--bundle", &big, "--strategy", "S", "--out", &out]), EXIT_USAGE);
    }

    #[test]
    fn calibrate_recovers_noiseless_rig() {
        let t = TempDir::new().unwrap();
        assert_eq!(xmodal(&["board", "--seed", "4", "--out", &p(&t, "board")]), 0);
        let args = [
            "calibrate",
            "--observations",
            &p(&t, "board/observations.csv"),
            "--rig",
            &p(&t, "board/rig_init.txt"),
            "--out",
            &p(&t, "cal"),
        ];
        assert_eq!(xmodal(&args), 0);
        let summary = fs::read_to_string(t.path().join("cal/calib_summary.csv")).unwrap();
        let row: Vec<f64> = summary.lines().nth(1).unwrap().split(',').map(|v| v.parse().unwrap()).collect();
        assert!(row[0] > 1.0 && row[1] < 1e-6, "{summary}");
        assert!(CameraRig::parse(&fs::read_to_string(t.path().join("cal/rig.txt")).unwrap()).is_ok());
    }

    #[test]
    fn eval_exit_codes() {
        let t = TempDir::new().unwrap();
        let b = p(&t, "b");
        assert_eq!(xmodal(&["synth", "--demo", "plane", "--size", "8x8", "--out", &b]), 0);
        let gt = p(&t, "b/gt_depth.f32");
        assert_eq!(xmodal(&["eval", "--pred", &gt, "--gt", &gt, "--out", &p(&t, "e")]), 0);
        let metrics = fs::read_to_string(t.path().join("e/metrics.csv")).unwrap();
        assert!(metrics.lines().nth(1).unwrap().starts_with("0,0,0,1,1,1,"));
        let empty = ImagePlane::filled(8, 8, 1, 0.0).unwrap();
        write_image(t.path(), "empty", &empty, 0).unwrap();
        let mask = p(&t, "empty.f32");
        assert_eq!(xmodal(&["eval", "--pred", &gt, "--gt", &gt, "--mask", &mask, "--out", &p(&t, "e")]), EXIT_MISSING);
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(xmodal(&["frobnicate"]), EXIT_USAGE);
        assert_eq!(xmodal(&["synth", "--out", "x"]), EXIT_USAGE);
        assert_eq!(xmodal(&["--help"]), EXIT_OK);
    }

    #[test]
    fn error_classes_map_to_exit_codes() {
        assert_eq!(exit_code(&Error::Arg("x".into())), EXIT_USAGE);
        assert_eq!(exit_code(&Error::MissingModality("corr")), EXIT_MISSING);
        assert_eq!(exit_code(&Error::Singular("x".into())), EXIT_CHECK_FAILED);
    }
}
