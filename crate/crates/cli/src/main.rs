use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use bimslam_core::change::{detect_changes, ChangeParams};
use bimslam_core::cloud::PointCloud;
use bimslam_core::eval::ate;
use bimslam_core::geometry::BuildingModel;
use bimslam_core::pgo::{assemble_map, load_trajectory, save_trajectory};
use bimslam_core::pipeline::{anchor_sessions, AnchorParams};
use bimslam_core::registration::encounters_to_text;
use bimslam_core::se3::Pose;
use bimslam_core::session::{load_session, save_session, Session};
use bimslam_core::sim::coverage::goals_to_text;
use bimslam_core::sim::{
    coverage_path, densify, inject_drift, offset_session, rasterize, simulate_session, subsample_goals, Cell, DriftModel, LidarSpec, SimParams, DEFAULT_SLICE,
};

#[derive(Parser)]
#[command(name = "bimslam", version, about = "Anchor LiDAR sessions to a building model and detect changes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a ground-truth session by sweeping a LiDAR through a model.
    Simulate(SimulateArgs),
    /// Derive a query session by injecting odometry drift into a session.
    Drift(DriftArgs),
    /// Align a query session to a reference session.
    Anchor(AnchorArgs),
    /// Find objects in an aligned map that the model does not contain.
    Diff(DiffArgs),
    /// Absolute trajectory error between two index-aligned trajectories.
    Eval(EvalArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Triangulated OBJ model.
    #[arg(long)]
    model: PathBuf,
    /// Output session directory.
    #[arg(long)]
    out: PathBuf,
    /// Occupancy grid resolution (m).
    #[arg(long, default_value_t = 0.1)]
    resolution: f64,
    /// Keyframe spacing (m).
    #[arg(long, default_value_t = 1.0)]
    spacing: f64,
    /// Seed for range noise.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Cell size of the coverage grid (m); the path is planned on the
    /// occupancy grid coarsened to this size.
    #[arg(long, default_value_t = 2.0)]
    sweep: f64,
    /// Clearance kept from non-free coverage cells (m).
    #[arg(long, default_value_t = 0.0)]
    clearance: f64,
    /// One path waypoint out of this many becomes a goal.
    #[arg(long, default_value_t = 20)]
    stride: usize,
    /// Travel speed (m/s); scans are taken at 10 Hz.
    #[arg(long, default_value_t = 0.5)]
    speed: f64,
    /// Start point `x,y` inside the building; defaults to the first free
    /// coverage cell in scanline order.
    #[arg(long, value_parser = parse_pair)]
    start: Option<(f64, f64)>,
    /// Horizontal samples per LiDAR revolution.
    #[arg(long, default_value_t = 900)]
    horizontal_steps: usize,
    /// Range noise standard deviation (m).
    #[arg(long, default_value_t = 0.01)]
    noise: f64,
    /// Goal list written here instead of DIR/goals.txt.
    #[arg(long)]
    goals: Option<PathBuf>,
}

#[derive(Args)]
struct DriftArgs {
    /// Input session directory.
    #[arg(long = "in")]
    input: PathBuf,
    /// Output session directory.
    #[arg(long)]
    out: PathBuf,
    /// Fractional translation over-estimate per edge.
    #[arg(long, default_value_t = 0.005)]
    trans_drift: f64,
    /// Yaw bias per metre travelled (rad/m).
    #[arg(long, default_value_t = 0.002)]
    yaw_drift: f64,
    /// Per-axis translation noise per edge (m).
    #[arg(long, default_value_t = 0.0)]
    trans_noise: f64,
    /// Yaw noise per edge (rad).
    #[arg(long, default_value_t = 0.0)]
    yaw_noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Re-express the result in a frame offset by `x,y,yaw` (m, m, rad).
    #[arg(long, value_parser = parse_triple)]
    offset: Option<(f64, f64, f64)>,
}

#[derive(Args)]
struct AnchorArgs {
    /// Reference (ground-truth) session directory.
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Query session directory.
    #[arg(long)]
    query: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Minimum descriptor similarity for a candidate.
    #[arg(long, default_value_t = 0.6)]
    sc_threshold: f64,
    /// Proximity search radius (m).
    #[arg(long, default_value_t = 10.0)]
    sc_radius: f64,
    /// Encounters with a higher ICP fitness are rejected (m^2).
    #[arg(long, default_value_t = 0.04)]
    fitness_threshold: f64,
    /// Initial query-to-reference anchor `x,y,yaw`; without it only
    /// descriptor matches seed the search.
    #[arg(long, value_parser = parse_triple)]
    guess: Option<(f64, f64, f64)>,
}

#[derive(Args)]
struct DiffArgs {
    /// Triangulated OBJ model.
    #[arg(long)]
    model: PathBuf,
    /// Aligned map cloud, e.g. the `map.pc` written by `anchor`.
    #[arg(long)]
    map: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Points farther than this from the model are changes (m).
    #[arg(long, default_value_t = 0.15)]
    threshold: f64,
    /// Clustering radius (m).
    #[arg(long, default_value_t = 0.3)]
    eps: f64,
    /// Neighbours within `eps` (self included) that make a core point.
    #[arg(long, default_value_t = 10)]
    min_pts: usize,
    /// Voxel size of the cluster meshes (m).
    #[arg(long, default_value_t = 0.1)]
    voxel: f64,
    /// Only cluster changes with z in `a,b` (m).
    #[arg(long, value_parser = parse_pair)]
    crop_z: Option<(f64, f64)>,
}

#[derive(Args)]
struct EvalArgs {
    /// Estimated trajectory.
    #[arg(long)]
    est: PathBuf,
    /// Reference trajectory.
    #[arg(long)]
    gt: PathBuf,
}

fn parse_list(s: &str, n: usize) -> Result<Vec<f64>, String> {
    let vals: Vec<f64> = s.split(',').map(|v| v.trim().parse::<f64>().map_err(|e| format!("`{v}`: {e}"))).collect::<Result<_, _>>()?;
    if vals.len() != n || vals.iter().any(|v| !v.is_finite()) {
        return Err(format!("expected {n} comma-separated finite numbers, got `{s}`"));
    }
    Ok(vals)
}

fn parse_pair(s: &str) -> Result<(f64, f64), String> {
    let v = parse_list(s, 2)?;
    Ok((v[0], v[1]))
}

fn parse_triple(s: &str) -> Result<(f64, f64, f64), String> {
    let v = parse_list(s, 3)?;
    Ok((v[0], v[1], v[2]))
}

fn load(dir: &Path, role: &str) -> Result<Session> {
    load_session(dir).with_context(|| format!("cannot load {role} session {}", dir.display()))
}

fn simulate(a: SimulateArgs) -> Result<()> {
    if !(a.resolution > 0.0 && a.sweep > 0.0 && a.stride >= 1) {
        bail!("resolution and sweep must be positive and stride at least 1");
    }
    let model = BuildingModel::load_obj(&a.model).with_context(|| format!("cannot load model {}", a.model.display()))?;
    let grid = rasterize(&model, a.resolution, DEFAULT_SLICE, a.start.map(|(x, y)| [x, y]))?;
    let factor = ((a.sweep / a.resolution).round() as usize).max(1);
    let coarse = grid.coarsen(factor);
    let start = match a.start {
        Some((x, y)) => coarse.cell_of(x, y).with_context(|| format!("start ({x}, {y}) is outside the model"))?,
        None => (0..coarse.height)
            .flat_map(|iy| (0..coarse.width).map(move |ix| (ix, iy)))
            .find(|&(ix, iy)| coarse.get(ix, iy) == Cell::Free)
            .context("no free coverage cell; try a smaller --sweep")?,
    };
    let path = densify(&coverage_path(&coarse, start, a.clearance)?, a.resolution);
    let goals = subsample_goals(&path, a.stride);
    let params = SimParams {
        lidar: LidarSpec { horizontal_steps: a.horizontal_steps, noise_sigma: a.noise, ..LidarSpec::default() },
        speed: a.speed,
        spacing: a.spacing,
        seed: a.seed,
        ..SimParams::default()
    };
    let session = simulate_session(&model, &goals, &params)?;
    save_session(&session, &a.out)?;
    let goals_path = a.goals.unwrap_or_else(|| a.out.join("goals.txt"));
    fs::write(&goals_path, goals_to_text(&goals)).with_context(|| format!("cannot write {}", goals_path.display()))?;
    println!("goals={}", goals.len());
    println!("keyframes={}", session.len());
    Ok(())
}

fn drift(a: DriftArgs) -> Result<()> {
    let input = load(&a.input, "input")?;
    let model = DriftModel {
        trans_drift_per_m: a.trans_drift,
        yaw_drift_per_m: a.yaw_drift,
        trans_noise_sigma: a.trans_noise,
        yaw_noise_sigma: a.yaw_noise,
        seed: a.seed,
    };
    let mut out = inject_drift(&input, &model)?;
    if let Some((x, y, yaw)) = a.offset {
        out = offset_session(&out, &Pose::from_xyz_yaw(x, y, 0.0, yaw));
    }
    save_session(&out, &a.out)?;
    println!("keyframes={}", out.len());
    Ok(())
}

fn anchor(a: AnchorArgs) -> Result<()> {
    let gt = load(&a.reference, "reference")?;
    let query = load(&a.query, "query")?;
    let mut params = AnchorParams::default();
    params.loops.sim_threshold = a.sc_threshold;
    params.loops.radius = a.sc_radius;
    params.loops.icp.fitness_threshold = a.fitness_threshold;
    let guess = a.guess.map(|(x, y, yaw)| Pose::from_xyz_yaw(x, y, 0.0, yaw));
    let outcome = anchor_sessions(&gt, &query, guess, &params)?;
    fs::create_dir_all(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;
    let world = outcome.query_world();
    save_trajectory(&outcome.gt_world(), &a.out.join("gt.txt"))?;
    save_trajectory(&outcome.query_local(), &a.out.join("query_local.txt"))?;
    save_trajectory(&world, &a.out.join("query_world.txt"))?;
    assemble_map(&query, &world)?.save(&a.out.join("map.pc"))?;
    let write = |name: &str, text: String| {
        let path = a.out.join(name);
        fs::write(&path, text).with_context(|| format!("cannot write {}", path.display()))
    };
    write("encounters.txt", encounters_to_text(&outcome.encounters))?;
    let report = outcome.report();
    write("report.txt", report.clone())?;
    print!("{report}");
    Ok(())
}

fn diff(a: DiffArgs) -> Result<()> {
    let model = BuildingModel::load_obj(&a.model).with_context(|| format!("cannot load model {}", a.model.display()))?;
    let map = PointCloud::load(&a.map).with_context(|| format!("cannot load map {}", a.map.display()))?;
    let params = ChangeParams { threshold: a.threshold, eps: a.eps, min_pts: a.min_pts, voxel: a.voxel, crop_z: a.crop_z };
    let changes = detect_changes(&map, &model, &params)?;
    changes.export(&a.out)?;
    print!("{}", changes.report());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let est = load_trajectory(&a.est).with_context(|| format!("cannot load {}", a.est.display()))?;
    let gt = load_trajectory(&a.gt).with_context(|| format!("cannot load {}", a.gt.display()))?;
    let report = ate(&est, &gt)?;
    print!("{}\n{}", report.table(), report.to_kv());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Drift(a) => drift(a),
        Command::Anchor(a) => anchor(a),
        Command::Diff(a) => diff(a),
        Command::Eval(a) => eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Some errors already print their source; skip causes that repeat.
            let mut msg = String::new();
            for cause in e.chain().map(|c| c.to_string()) {
                if !msg.ends_with(&cause) {
                    if !msg.is_empty() {
                        msg.push_str(": ");
                    }
                    msg.push_str(&cause);
                }
            }
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
