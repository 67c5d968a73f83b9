use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use planar_refine::config::{ConfigError, RunConfig};
use planar_refine::eval::{binarize_confidence, evaluate, EvalError};
use planar_refine::geometry::{
    disparity_to_inverse_depth, inverse_depth_to_disparity, normals_from_depth_gradient,
    normals_from_slopes, GeometryError,
};
use planar_refine::graph::{build_graph, GraphError};
use planar_refine::image_io::{
    colorize_normals, load_confidence, load_guide, read_u_map, save_guide, write_normal_map,
    write_traces_csv, write_u_map, ImageIoError,
};
use planar_refine::pfm::{read_pfm_scalar, write_pfm_scalar, write_pfm_vec3, PfmError};
use planar_refine::synth::{generate_synthetic, SceneKind, SceneSpec, SynthError};
use planar_refine::{refine, Grid, InverseDepthMap, NormalMap, Preset, Regularizer, SolveError};
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "planar-refine",
    version,
    about = "Piecewise-planar refinement of inverse depth maps"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Refine an inverse depth (or disparity) map and estimate normals.
    Refine(Box<RefineArgs>),
    /// Compare a predicted map against ground truth.
    Eval(EvalArgs),
    /// Write a synthetic piecewise-planar scene.
    Synth(SynthArgs),
    /// Compute unit normals from an inverse depth map.
    Normals(NormalsArgs),
}

#[derive(Args)]
struct Intrinsics {
    #[arg(long)]
    fx: Option<f64>,
    #[arg(long)]
    fy: Option<f64>,
    #[arg(long)]
    cx: Option<f64>,
    #[arg(long)]
    cy: Option<f64>,
}

#[derive(Args)]
struct RefineArgs {
    /// TOML run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<Preset>,
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    guide: Option<PathBuf>,
    #[arg(long = "conf")]
    confidence: Option<PathBuf>,
    #[arg(long = "conf-threshold")]
    confidence_threshold: Option<f64>,
    /// Input holds disparity; converted with `--baseline` and `--fx` when given.
    #[arg(long)]
    disparity: bool,
    #[arg(long)]
    baseline: Option<f64>,
    #[command(flatten)]
    intrinsics: Intrinsics,
    /// Per-scale λ, coarsest first.
    #[arg(long, value_delimiter = ',')]
    lambda: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    alpha: Option<Vec<f64>>,
    #[arg(long)]
    scales: Option<usize>,
    #[arg(long)]
    factor: Option<usize>,
    #[arg(long)]
    regularizer: Option<Regularizer>,
    /// ADAM iterations per scale.
    #[arg(long)]
    iters: Option<usize>,
    /// Initial ADAM step.
    #[arg(long)]
    step: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    u_out: Option<PathBuf>,
    #[arg(long)]
    normals_out: Option<PathBuf>,
    #[arg(long)]
    normals_png: Option<PathBuf>,
    /// Per-iteration energies as CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Edge list of the full-resolution graph.
    #[arg(long)]
    graph_dump: Option<PathBuf>,
    /// Worker threads, 0 for one per core. Results do not depend on it.
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Bad-pixel thresholds.
    #[arg(long, value_delimiter = ',', default_values_t = [0.5, 1.0, 2.0, 4.0])]
    bad: Vec<f64>,
    /// Compare depth (1/value) instead of the stored values.
    #[arg(long)]
    depth: bool,
    /// Print a CSV header and row labelled with this name.
    #[arg(long)]
    csv: Option<String>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value = "two-planes")]
    scene: SceneKind,
    #[arg(long, default_value_t = 128)]
    width: usize,
    #[arg(long, default_value_t = 96)]
    height: usize,
    /// Noise standard deviation as a fraction of the inverse depth range.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0.0)]
    holes: f64,
    #[arg(long, default_value_t = 0.0)]
    outliers: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct NormalsArgs {
    /// Inverse depth PFM.
    #[arg(long)]
    input: PathBuf,
    /// Slope map from `refine --u-out`; without it normals come from smoothed depth gradients.
    #[arg(long)]
    u: Option<PathBuf>,
    /// Gradient kernel scale, used without `--u`.
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[command(flatten)]
    intrinsics: Intrinsics,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    png: Option<PathBuf>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Io(String),
    Solve(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Io(_) => 2,
            CliError::Solve(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Io(m) | CliError::Solve(m) => m,
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io(_) => CliError::Io(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<SolveError> for CliError {
    fn from(e: SolveError) -> Self {
        match e {
            SolveError::InvalidConfig(_) | SolveError::Graph(GraphError::InvalidParams(_)) => {
                CliError::Usage(e.to_string())
            }
            _ => CliError::Solve(e.to_string()),
        }
    }
}

impl From<GeometryError> for CliError {
    fn from(e: GeometryError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Usage(e.to_string())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Refine(args) => run_refine(*args),
        Command::Eval(args) => run_eval(args),
        Command::Synth(args) => run_synth(args),
        Command::Normals(args) => run_normals(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn read_scalar(path: &Path) -> Result<(Grid<f64>, Grid<bool>), CliError> {
    read_pfm_scalar(path).map_err(|e| io_err(path, e))
}

fn write_scalar(path: &Path, values: &Grid<f64>) -> Result<(), CliError> {
    write_pfm_scalar(path, values).map_err(|e: PfmError| io_err(path, e))
}

fn image_err(path: &Path, e: ImageIoError) -> CliError {
    match e {
        ImageIoError::ConfidenceOutOfRange(_) => {
            CliError::Usage(format!("{}: {e}", path.display()))
        }
        _ => io_err(path, e),
    }
}

fn merge_flags(args: &RefineArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path).map_err(|e| match e {
            ConfigError::Io(_) => io_err(path, e),
            _ => CliError::Usage(format!("{}: {e}", path.display())),
        })?,
        None => RunConfig::default(),
    };
    macro_rules! set {
        ($($field:ident),*) => {
            $(if let Some(v) = &args.$field {
                cfg.$field = Some(v.clone());
            })*
        };
    }
    set!(
        input,
        guide,
        confidence,
        confidence_threshold,
        baseline,
        preset,
        lambda,
        alpha,
        scales,
        factor,
        out
    );
    set!(u_out, normals_out, normals_png, trace);
    let Intrinsics { fx, fy, cx, cy } = args.intrinsics;
    cfg.fx = fx.or(cfg.fx);
    cfg.fy = fy.or(cfg.fy);
    cfg.cx = cx.or(cfg.cx);
    cfg.cy = cy.or(cfg.cy);
    cfg.disparity |= args.disparity;
    if let Some(r) = args.regularizer {
        cfg.regularizer = r;
    }
    if let Some(n) = args.iters {
        cfg.adam.iters_per_scale = n;
    }
    if let Some(s) = args.step {
        cfg.adam.step = s;
    }
    if let Some(e) = args.eps {
        cfg.eps = e;
    }
    Ok(cfg)
}

fn thread_pool(threads: usize) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Solve(format!("cannot start thread pool: {e}")))
}

fn run_refine(args: RefineArgs) -> Result<(), CliError> {
    let cfg = merge_flags(&args)?;
    let refine_cfg = cfg.refine_config()?;
    let input_path = cfg.input.clone().ok_or(ConfigError::Missing("input"))?;
    let guide_path = cfg.guide.clone().ok_or(ConfigError::Missing("guide"))?;
    if cfg.out.is_none()
        && cfg.u_out.is_none()
        && cfg.normals_out.is_none()
        && cfg.normals_png.is_none()
    {
        warn!("no output path given; results are discarded");
    }

    let (raw, raw_valid) = read_scalar(&input_path)?;
    let (w, h) = raw.dims();
    let guide = load_guide(&guide_path).map_err(|e| image_err(&guide_path, e))?;
    let (cam, defaulted) = cfg.intrinsics(w, h)?;
    if defaulted && (cfg.normals_out.is_some() || cfg.normals_png.is_some()) {
        warn!(
            "intrinsics not fully specified; using fx={} fy={} cx={} cy={}",
            cam.fx(),
            cam.fy(),
            cam.cx(),
            cam.cy()
        );
    }

    // Calibrated disparity is converted to metric inverse depth and back on output.
    let calibration = match (cfg.disparity, cfg.baseline) {
        (true, Some(b)) => {
            if cfg.fx.is_none() {
                return Err(CliError::Usage(
                    "--disparity with --baseline also needs --fx".into(),
                ));
            }
            Some((cam.fx(), b))
        }
        (true, None) => {
            info!("no baseline given; treating disparity as inverse depth");
            None
        }
        (false, Some(_)) => {
            return Err(CliError::Usage(
                "--baseline only applies with --disparity".into(),
            ))
        }
        (false, None) => None,
    };
    let input = match calibration {
        Some((f, b)) => {
            let disp = Grid::from_fn(w, h, |x, y| {
                if *raw_valid.get(x, y) {
                    *raw.get(x, y)
                } else {
                    f64::NAN
                }
            });
            disparity_to_inverse_depth(&disp, f, b)?
        }
        None => {
            let valid = Grid::from_fn(w, h, |x, y| *raw_valid.get(x, y) && *raw.get(x, y) > 0.0);
            InverseDepthMap::new(raw, valid)?
        }
    };

    let mut mask = match &cfg.confidence {
        Some(path) => load_confidence(path).map_err(|e| image_err(path, e))?,
        None => Grid::filled(w, h, 1.0),
    };
    if let Some(t) = cfg.confidence_threshold {
        mask = binarize_confidence(&mask, t);
    }

    let pool = thread_pool(args.threads)?;
    if let Some(path) = &args.graph_dump {
        let graph = pool
            .install(|| build_graph(&guide, &refine_cfg.graph))
            .map_err(SolveError::from)?;
        let file = File::create(path).map_err(|e| io_err(path, e))?;
        graph
            .write_edge_list(BufWriter::new(file))
            .map_err(|e| io_err(path, e))?;
    }
    let out = pool.install(|| refine(&input, &mask, &guide, &refine_cfg))?;
    info!(
        "energy {:.6e} (naive start {:.6e})",
        out.final_energy, out.naive_energy
    );

    if let Some(path) = &cfg.out {
        let values = match calibration {
            Some((f, b)) => inverse_depth_to_disparity(&out.depth, f, b)?,
            None => out.depth.to_raw(),
        };
        write_scalar(path, &values)?;
    }
    if let Some(path) = &cfg.u_out {
        let scale = calibration.map_or(1.0, |(f, b)| f * b);
        let u = out.u.map(|v| [v[0] * scale, v[1] * scale]);
        write_u_map(path, &u).map_err(|e| io_err(path, e))?;
    }
    if cfg.normals_out.is_some() || cfg.normals_png.is_some() {
        let normals = normals_from_slopes(&out.depth, &out.u, &cam)?;
        write_normals(
            &normals,
            cfg.normals_out.as_deref(),
            cfg.normals_png.as_deref(),
        )?;
    }
    if let Some(path) = &cfg.trace {
        let file = File::create(path).map_err(|e| io_err(path, e))?;
        let mut w = BufWriter::new(file);
        write_traces_csv(&mut w, &out.traces)
            .and_then(|_| w.flush())
            .map_err(|e| io_err(path, e))?;
    }
    Ok(())
}

fn write_normals(
    normals: &NormalMap,
    pfm: Option<&Path>,
    png: Option<&Path>,
) -> Result<(), CliError> {
    if let Some(path) = pfm {
        write_normal_map(path, normals).map_err(|e| io_err(path, e))?;
    }
    if let Some(path) = png {
        colorize_normals(normals)
            .save(path)
            .map_err(|e| io_err(path, e))?;
    }
    Ok(())
}

fn run_eval(args: EvalArgs) -> Result<(), CliError> {
    let (pred, pred_valid) = read_scalar(&args.pred)?;
    let (gt, gt_valid) = read_scalar(&args.gt)?;
    if !pred.same_dims(&gt) {
        return Err(EvalError::DimensionMismatch.into());
    }
    let pred = Grid::from_fn(pred.width(), pred.height(), |x, y| {
        if *pred_valid.get(x, y) {
            *pred.get(x, y)
        } else {
            f64::NAN
        }
    });
    let (pred, gt) = if args.depth {
        (pred.map(|&v| 1.0 / v), gt.map(|&v| 1.0 / v))
    } else {
        (pred, gt)
    };
    let report = evaluate(&pred, &gt, &gt_valid, &args.bad)?;
    let mut stdout = io::stdout().lock();
    let text = match &args.csv {
        Some(name) => format!("{}\n{}\n", report.csv_header(), report.csv_row(name)),
        None => report.to_key_value(),
    };
    stdout
        .write_all(text.as_bytes())
        .map_err(|e| CliError::Io(format!("stdout: {e}")))
}

fn run_synth(args: SynthArgs) -> Result<(), CliError> {
    for (name, v) in [
        ("noise", args.noise),
        ("holes", args.holes),
        ("outliers", args.outliers),
    ] {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(CliError::Usage(format!("--{name} must be non-negative")));
        }
    }
    if args.holes + args.outliers > 1.0 {
        return Err(CliError::Usage(
            "--holes plus --outliers must not exceed 1".into(),
        ));
    }
    let spec = SceneSpec::builtin(args.scene, args.width, args.height)?.with_corruption(
        args.noise,
        args.holes,
        args.outliers,
        args.seed,
    );
    let scene = generate_synthetic(&spec)?;
    let dir = &args.out_dir;
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;

    write_scalar(&dir.join("gt.pfm"), &scene.gt.to_raw())?;
    let normals = dir.join("gt_normals.pfm");
    write_pfm_vec3(&normals, &scene.gt_normals.normals).map_err(|e| io_err(&normals, e))?;
    let guide = dir.join("guide.png");
    save_guide(&guide, &scene.guide).map_err(|e| io_err(&guide, e))?;
    write_scalar(&dir.join("input.pfm"), &scene.input.to_raw())?;
    write_scalar(&dir.join("conf.pfm"), &scene.confidence)?;

    let cam = scene.intrinsics;
    println!(
        "fx={} fy={} cx={} cy={}",
        cam.fx(),
        cam.fy(),
        cam.cx(),
        cam.cy()
    );
    Ok(())
}

fn run_normals(args: NormalsArgs) -> Result<(), CliError> {
    if args.out.is_none() && args.png.is_none() {
        return Err(CliError::Usage("give --out and/or --png".into()));
    }
    let (values, valid) = read_scalar(&args.input)?;
    let (w, h) = values.dims();
    let depth = InverseDepthMap::new(values, valid)?;
    let Intrinsics { fx, fy, cx, cy } = args.intrinsics;
    let (cam, defaulted) = RunConfig {
        fx,
        fy,
        cx,
        cy,
        ..RunConfig::default()
    }
    .intrinsics(w, h)?;
    if defaulted {
        warn!(
            "intrinsics not fully specified; using fx={} fy={} cx={} cy={}",
            cam.fx(),
            cam.fy(),
            cam.cx(),
            cam.cy()
        );
    }
    let normals = match &args.u {
        Some(path) => {
            let u = read_u_map(path).map_err(|e| io_err(path, e))?;
            normals_from_slopes(&depth, &u, &cam)?
        }
        None => {
            if !(args.sigma > 0.0 && args.sigma.is_finite()) {
                return Err(CliError::Usage("--sigma must be positive".into()));
            }
            normals_from_depth_gradient(&depth, &cam, args.sigma)
        }
    };
    write_normals(&normals, args.out.as_deref(), args.png.as_deref())
}
