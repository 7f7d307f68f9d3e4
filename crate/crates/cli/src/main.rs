//! `plivox` command line.
//!
//! Failures print `error[<category>]: <message>` on stderr and exit with
//! the category's code (see [`Category`]). Worker threads follow
//! `RAYON_NUM_THREADS`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use plivox::bench::{
    evaluate_ate, evaluate_surface, load_tum_sequence, render_synthetic, write_tum_sequence, BenchError, GroundTruth, SyntheticScene,
    Trajectory,
};
use plivox::engine::{run_fusion, EngineConfig, EngineError};
use plivox::grid::{GridError, VoxelGrid};
use plivox::mesh::{extract_mesh, read_ply, sigma_filter, write_obj, write_ply, MeshIoError, MeshRequest, TriangleMesh};
use plivox::net::{bundled_prior, load_weights, save_weights, NetError, NetWeights};
use plivox::prior::{calibration_report, train_from, write_loss_curve, PriorError, ShapeCorpus, TrainConfig};

#[derive(Parser)]
#[command(name = "plivox", version, about = "Online RGB-D reconstruction with probabilistic local implicit voxels")]
struct Cli {
    /// Log progress (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Track and fuse a sequence into a map.
    Fuse(FuseArgs),
    /// Train the encoder/decoder prior on a shape corpus.
    Train(TrainArgs),
    /// Extract a mesh from a map snapshot.
    Mesh(MeshArgs),
    /// Absolute trajectory error of an estimate against ground truth.
    EvalAte(EvalAteArgs),
    /// Mean distance from mesh vertices to a reference surface.
    EvalSurface(EvalSurfaceArgs),
    /// Render a scene file into a TUM-layout sequence.
    RenderSynthetic(RenderArgs),
}

#[derive(Args)]
struct FuseArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Network weights (defaults to the bundled prior).
    #[arg(long)]
    weights: Option<PathBuf>,
    /// TUM-layout sequence directory.
    #[arg(long, conflicts_with = "scene")]
    input: Option<PathBuf>,
    /// Scene file rendered on the fly.
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override a configuration key, `key=value`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Print the effective configuration and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Corpus manifest (shape lines, `procedural COUNT SEED`, `extent R`).
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Start from these weights instead of a fresh initialization.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 25)]
    steps_per_epoch: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 1.0)]
    lr_decay: f64,
    /// Decoder samples per voxel.
    #[arg(long, default_value_t = 4096)]
    samples: usize,
    /// Half-width of the decoder sampling cube, voxel units.
    #[arg(long, default_value_t = 0.5)]
    domain: f64,
    #[arg(long, default_value_t = 1e-2)]
    delta: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write `epoch,loss,nll,reg,abs_err` rows here.
    #[arg(long)]
    loss_curve: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    /// Report coverage on this many held-out procedural voxels.
    #[arg(long, default_value_t = 0)]
    calibrate: usize,
}

#[derive(Args)]
struct MeshArgs {
    #[arg(long)]
    map: PathBuf,
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Lattice points per voxel edge.
    #[arg(long, default_value_t = 8)]
    res: usize,
    #[arg(long, default_value_t = 0.0)]
    iso: f64,
    /// Drop vertices whose σ exceeds this (voxel units).
    #[arg(long)]
    sigma_threshold: Option<f64>,
    /// `.ply` or `.obj`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalAteArgs {
    estimate: PathBuf,
    groundtruth: PathBuf,
    /// Per-pose errors as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct EvalSurfaceArgs {
    mesh: PathBuf,
    /// Scene file (analytic) or reference `.ply`.
    reference: PathBuf,
    #[arg(long, default_value_t = plivox::mesh::DEFAULT_SIGMA_THRESHOLD)]
    sigma_threshold: f64,
    /// Map mesh vertices by the first pose of this trajectory (mesh built
    /// in the first camera's frame).
    #[arg(long)]
    first_pose: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Camera poses; defaults to the scene's orbit.
    #[arg(long)]
    traj: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

/// Error category and its exit code.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Category {
    Usage = 2,
    Config = 3,
    Io = 4,
    Input = 5,
    Weights = 6,
    Training = 7,
    Evaluation = 8,
}

impl Category {
    fn name(self) -> &'static str {
        match self {
            Category::Usage => "usage",
            Category::Config => "config",
            Category::Io => "io",
            Category::Input => "input",
            Category::Weights => "weights",
            Category::Training => "training",
            Category::Evaluation => "evaluation",
        }
    }
}

struct Failure {
    category: Category,
    message: String,
}

impl Failure {
    fn new(category: Category, message: impl ToString) -> Self {
        Self {
            category,
            message: message.to_string(),
        }
    }
}

impl From<EngineError> for Failure {
    fn from(e: EngineError) -> Self {
        let c = match &e {
            EngineError::Config(_) => Category::Config,
            EngineError::Weights(_) => Category::Weights,
            EngineError::Input(_) => Category::Input,
            EngineError::Map(_) => Category::Config,
            EngineError::Snapshot(_) | EngineError::Mesh(_) | EngineError::Io(_) => Category::Io,
        };
        Failure::new(c, e)
    }
}

impl From<BenchError> for Failure {
    fn from(e: BenchError) -> Self {
        let c = match &e {
            BenchError::Io(_) => Category::Io,
            BenchError::TooFewAssociations { .. } | BenchError::EmptyMesh => Category::Evaluation,
            _ => Category::Input,
        };
        Failure::new(c, e)
    }
}

impl From<NetError> for Failure {
    fn from(e: NetError) -> Self {
        match e {
            NetError::Io(_) => Failure::new(Category::Io, e),
            _ => Failure::new(Category::Weights, e),
        }
    }
}

impl From<GridError> for Failure {
    fn from(e: GridError) -> Self {
        match e {
            GridError::Io(_) => Failure::new(Category::Io, e),
            _ => Failure::new(Category::Input, e),
        }
    }
}

impl From<MeshIoError> for Failure {
    fn from(e: MeshIoError) -> Self {
        match e {
            MeshIoError::Io(_) => Failure::new(Category::Io, e),
            _ => Failure::new(Category::Input, e),
        }
    }
}

impl From<PriorError> for Failure {
    fn from(e: PriorError) -> Self {
        let c = match &e {
            PriorError::Io(_) => Category::Io,
            PriorError::InvalidConfig(_) | PriorError::Manifest { .. } | PriorError::EmptyCorpus => Category::Config,
            PriorError::Net(_) => Category::Weights,
            _ => Category::Training,
        };
        Failure::new(c, e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::new(Category::Io, e)
    }
}

fn weights_or_bundled(path: Option<&Path>) -> Result<NetWeights, Failure> {
    Ok(match path {
        Some(p) => load_weights(p, None)?,
        None => bundled_prior(),
    })
}

fn fuse(args: FuseArgs) -> Result<(), Failure> {
    let mut overrides = Vec::new();
    for (flag, value) in [("weights", &args.weights), ("input", &args.input), ("scene", &args.scene), ("out", &args.out)] {
        if let Some(v) = value {
            overrides.push(format!("{flag} = {}", v.display()));
        }
    }
    for s in &args.set {
        if !s.contains('=') {
            return Err(Failure::new(Category::Usage, format!("--set expects KEY=VALUE, got '{s}'")));
        }
        overrides.push(s.clone());
    }
    let cfg = match &args.config {
        Some(path) => EngineConfig::from_file(path, &overrides)?,
        None => EngineConfig::default().apply(overrides.iter().map(String::as_str))?,
    };
    if args.print_config {
        print!("{}", cfg.to_text());
        return Ok(());
    }
    let outcome = run_fusion(&cfg)?;
    let failures = outcome.frames.iter().filter(|f| f.failure.is_some()).count();
    println!(
        "frames {}  tracking failures {}  voxels {}",
        outcome.frames.len(),
        failures,
        outcome.grid.len()
    );
    if let Some(m) = &outcome.mesh {
        println!("mesh {} vertices {} triangles", m.vertices.len(), m.triangles.len());
    }
    let gt = match (&cfg.input, &cfg.scene) {
        (Some(dir), _) => load_tum_sequence(dir)?.groundtruth,
        (_, Some(scene)) => read_scene(scene)?.path.map(|p| p.trajectory()),
        _ => None,
    };
    if let Some(gt) = gt {
        match evaluate_ate(&outcome.trajectory, &gt) {
            Ok(r) => println!("ATE RMSE {:.4} m", r.rmse),
            Err(e) => log::warn!("ATE not computed: {e}"),
        }
    }
    if let Some(out) = &cfg.out {
        println!("wrote {}", out.display());
    }
    Ok(())
}

fn train(args: TrainArgs) -> Result<(), Failure> {
    let corpus = ShapeCorpus::parse_manifest(&std::fs::read_to_string(&args.corpus)?)?;
    let cfg = TrainConfig {
        delta: args.delta,
        lr: args.lr,
        lr_decay: args.lr_decay,
        batch: args.batch,
        epochs: args.epochs,
        steps_per_epoch: args.steps_per_epoch,
        n_d: args.samples,
        decoder_domain: args.domain,
        seed: args.seed,
        checkpoint_every: args.checkpoint_every,
        checkpoint_dir: args.checkpoint_dir.clone(),
        ..Default::default()
    };
    let init = match &args.init {
        Some(p) => load_weights(p, None)?,
        None => NetWeights::init(args.seed),
    };
    let outcome = train_from(&corpus, &cfg, init)?;
    for s in &outcome.curve {
        log::info!("epoch {}: loss {:.4}, |s-mu| {:.4}", s.epoch, s.mean_loss, s.mean_abs_err);
    }
    if let Some(last) = outcome.curve.last() {
        println!("epoch {} loss {:.6} mean |s-mu| {:.6}", last.epoch, last.mean_loss, last.mean_abs_err);
    }
    save_weights(&outcome.weights, &args.out)?;
    if let Some(path) = &args.loss_curve {
        write_loss_curve(path, &outcome.curve)?;
    }
    if args.calibrate > 0 {
        let held_out = ShapeCorpus::procedural(args.calibrate.min(100), args.seed.wrapping_add(99));
        print!("{}", calibration_report(&outcome.weights, &held_out, &cfg, args.calibrate, args.seed)?);
    }
    println!("wrote {}", args.out.display());
    Ok(())
}

fn write_mesh_file(mesh: &TriangleMesh, path: &Path) -> Result<(), Failure> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("obj") => write_obj(mesh, path)?,
        Some("ply") => write_ply(mesh, path)?,
        _ => return Err(Failure::new(Category::Usage, format!("{}: expected a .ply or .obj path", path.display()))),
    }
    Ok(())
}

fn mesh(args: MeshArgs) -> Result<(), Failure> {
    if args.res < 2 {
        return Err(Failure::new(Category::Usage, format!("--res must be at least 2, got {}", args.res)));
    }
    let grid = VoxelGrid::load(&args.map)?;
    let net = weights_or_bundled(args.weights.as_deref())?;
    if net.latent_dim() != grid.latent_dim() {
        return Err(Failure::new(
            Category::Weights,
            format!("map latent dimension {} does not match weights ({})", grid.latent_dim(), net.latent_dim()),
        ));
    }
    let mut mesh = extract_mesh(
        &grid,
        &net,
        &MeshRequest {
            resolution: args.res,
            iso: args.iso,
        },
    );
    if let Some(t) = args.sigma_threshold {
        mesh = sigma_filter(&mesh, t);
    }
    if mesh.is_empty() {
        log::warn!("{} has no surface; writing an empty mesh", args.map.display());
        eprintln!("warning: empty mesh");
    }
    write_mesh_file(&mesh, &args.out)?;
    println!("{} vertices {} triangles -> {}", mesh.vertices.len(), mesh.triangles.len(), args.out.display());
    Ok(())
}

fn eval_ate(args: EvalAteArgs) -> Result<(), Failure> {
    let est = Trajectory::load(&args.estimate)?;
    let gt = Trajectory::load(&args.groundtruth)?;
    let report = evaluate_ate(&est, &gt)?;
    println!("ATE RMSE {:.3} m over {} poses", report.rmse, report.errors.len());
    println!("{report}");
    if let Some(path) = &args.csv {
        std::fs::write(path, report.to_csv())?;
    }
    Ok(())
}

fn read_scene(path: &Path) -> Result<SyntheticScene, Failure> {
    let text = std::fs::read_to_string(path)?;
    text.parse::<SyntheticScene>().map_err(|e| match e {
        BenchError::Parse { line, message, .. } => Failure::new(Category::Input, format!("{}:{line}: {message}", path.display())),
        other => other.into(),
    })
}

fn eval_surface(args: EvalSurfaceArgs) -> Result<(), Failure> {
    let mut mesh = sigma_filter(&read_ply(&args.mesh)?, args.sigma_threshold);
    if let Some(path) = &args.first_pose {
        let traj = Trajectory::load(path)?;
        let first = traj
            .poses
            .first()
            .ok_or_else(|| Failure::new(Category::Input, format!("{}: empty trajectory", path.display())))?
            .1;
        mesh.vertices.iter_mut().for_each(|v| *v = first.transform_point(v));
    }
    let report = if args.reference.extension().and_then(|e| e.to_str()) == Some("ply") {
        let reference = read_ply(&args.reference)?;
        evaluate_surface(&mesh, &GroundTruth::Mesh(&reference))?
    } else {
        let scene = read_scene(&args.reference)?;
        evaluate_surface(&mesh, &GroundTruth::Analytic(&scene.shape))?
    };
    println!("surface error mean {:.6} m  median {:.6} m  max {:.6} m  ({} vertices)", report.mean, report.median, report.max, report.samples);
    Ok(())
}

fn render(args: RenderArgs) -> Result<(), Failure> {
    let scene = read_scene(&args.scene)?;
    let traj = match (&args.traj, &scene.path) {
        (Some(p), _) => Trajectory::load(p)?,
        (None, Some(path)) => path.trajectory(),
        (None, None) => return Err(Failure::new(Category::Usage, "scene has no orbit; pass --traj")),
    };
    let frames = render_synthetic(&scene, &traj)?;
    write_tum_sequence(&args.out, &frames, Some(&traj))?;
    println!("{} frames -> {}", frames.len(), args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("error[{}]: {}", Category::Usage.name(), e.to_string().trim_end());
            return ExitCode::from(Category::Usage as u8);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Fuse(a) => fuse(a),
        Command::Train(a) => train(a),
        Command::Mesh(a) => mesh(a),
        Command::EvalAte(a) => eval_ate(a),
        Command::EvalSurface(a) => eval_surface(a),
        Command::RenderSynthetic(a) => render(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error[{}]: {}", f.category.name(), f.message);
            ExitCode::from(f.category as u8)
        }
    }
}
