use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sidegan::ablate::run_ablation;
use sidegan::camera::{pose_from_angles, sample_pose, PoseDistribution, DEFAULT_FOCAL, DEFAULT_RADIUS};
use sidegan::data::{generate_dataset, load_dataset, write_png, DEFAULT_PITCH_STD_DEG};
use sidegan::eval::{evaluate_state, render_images, strip, write_eval_outputs, depth_to_gray, yaw_sweep_with_depth, EvalOptions, DEFAULT_N_PER_BIN};
use sidegan::fields::LatentPair;
use sidegan::plot::{bar_chart, histogram};
use sidegan::render::seeded_stream;
use sidegan::report::{emit_report, ReportSources};
use sidegan::stats::chi_square;
use sidegan::train::{checkpoint_config, default_run_name, load_checkpoint, run, RunOptions, TrainConfig, TrainContext, TrainState};

const RUN_ROOT_ENV: &str = "SIDEGAN_RUN_ROOT";

/// Desk-scale pose-aware 3D-aware GAN: data, training, evaluation.
#[derive(Parser, Debug)]
#[command(name = "sidegan", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic head dataset with known camera poses.
    GenData(GenDataArgs),
    /// Train one configuration.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write metrics, plots and a report.
    Eval(EvalArgs),
    /// Render random samples from a checkpoint.
    Sample(SampleArgs),
    /// Render one latent across yaw angles into a single strip image.
    RenderSweep(SweepArgs),
    /// Compare dataset and mixture pose distributions.
    AnalyzePoses(AnalyzeArgs),
    /// Train and evaluate the five ablation configurations in sequence.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Number of images.
    #[arg(long, default_value_t = 2000)]
    n: usize,
    /// Yaw standard deviation in degrees.
    #[arg(long, default_value_t = 15.0)]
    yaw_std: f64,
    /// Pitch standard deviation in degrees.
    #[arg(long, default_value_t = DEFAULT_PITCH_STD_DEG)]
    pitch_std: f64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// TOML run configuration; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key, `key=value` in TOML syntax. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Dataset directory or manifest (overrides the config).
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Total training steps (overrides the config).
    #[arg(long)]
    steps: Option<u64>,
    /// Run seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Parent directory of run directories [env: SIDEGAN_RUN_ROOT, default: runs].
    #[arg(long)]
    run_root: Option<PathBuf>,
    /// Run directory name; defaults to a timestamp plus the config hash.
    #[arg(long)]
    run_name: Option<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Start from the network weights of this checkpoint with fresh optimizers.
    #[arg(long)]
    init_from: Option<PathBuf>,
    /// Continue this checkpoint's run; the config must hash equal.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Skip the report after training.
    #[arg(long)]
    no_report: bool,
}

#[derive(Args, Debug)]
struct MetricArgs {
    /// Images per yaw bin for the quality distance.
    #[arg(long, default_value_t = DEFAULT_N_PER_BIN)]
    n_per_bin: usize,
    /// Matched and mismatched pairs for the pose-consistency AUC.
    #[arg(long, default_value_t = 2000)]
    n_pairs: usize,
    /// Poses for the depth error.
    #[arg(long, default_value_t = 64)]
    depth_poses: usize,
}

impl MetricArgs {
    fn options(&self, seed: u64) -> EvalOptions {
        EvalOptions { n_per_bin: self.n_per_bin, n_pairs: self.n_pairs, depth_poses: self.depth_poses, seed, ..Default::default() }
    }
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset directory or manifest.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    metrics: MetricArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 16)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
    /// Fixed yaw in degrees; random over ±50 when omitted.
    #[arg(long, allow_negative_numbers = true)]
    yaw: Option<f64>,
    /// Fixed pitch in degrees; random over ±15 when omitted.
    #[arg(long, allow_negative_numbers = true)]
    pitch: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Comma-separated yaw angles in degrees.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "-45,0,45")]
    yaws: Vec<f64>,
    /// Output PNG.
    #[arg(long, default_value = "sweep.png")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    /// Dataset directory or manifest.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Probability of the uniform component.
    #[arg(long, default_value_t = 0.5)]
    mixture_ratio: f64,
    /// Half-width of the uniform yaw range in degrees.
    #[arg(long, default_value_t = 50.0)]
    uniform_yaw: f64,
    /// Half-width of the uniform pitch range in degrees.
    #[arg(long, default_value_t = 15.0)]
    uniform_pitch: f64,
    /// Mixture samples drawn.
    #[arg(long, default_value_t = 10_000)]
    n: usize,
    /// Histogram cells over the uniform yaw range.
    #[arg(long, default_value_t = 20)]
    cells: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    metrics: MetricArgs,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(sidegan::Error),
}

impl From<sidegan::Error> for Failure {
    fn from(e: sidegan::Error) -> Self {
        Failure::Runtime(e)
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn require_exists(flag: &str, path: &Path) -> CliResult {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{flag}: no such file or directory: {}", path.display())))
    }
}

fn parse_override(item: &str) -> CliResult<(String, toml::Value)> {
    let (key, raw) = item.split_once('=').ok_or_else(|| Failure::Usage(format!("--set {item}: expected KEY=VALUE")))?;
    let key = key.trim().to_string();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((key, value))
}

impl ConfigArgs {
    /// Config file, then `--set`, then the dedicated flags.
    fn resolve(&self, fallback: Option<TrainConfig>) -> CliResult<TrainConfig> {
        let mut table = match (&self.config, fallback) {
            (Some(path), _) => {
                require_exists("--config", path)?;
                let text = fs::read_to_string(path).map_err(|e| Failure::Runtime(sidegan::Error::io(path, e)))?;
                toml::from_str::<toml::Table>(&text).map_err(|e| Failure::Usage(format!("--config {}: {e}", path.display())))?
            }
            (None, Some(cfg)) => toml::from_str::<toml::Table>(&cfg.to_toml_string()).expect("serialized config parses"),
            (None, None) => toml::Table::new(),
        };
        for item in &self.overrides {
            let (k, v) = parse_override(item)?;
            table.insert(k, v);
        }
        let mut cfg: TrainConfig =
            toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Failure::Usage(format!("configuration: {e}")))?;
        if let Some(d) = &self.dataset {
            cfg.dataset = d.clone();
        }
        if let Some(s) = self.steps {
            cfg.total_steps = s;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
        Ok(cfg)
    }

    fn run_root(&self) -> PathBuf {
        self.run_root.clone().or_else(|| std::env::var_os(RUN_ROOT_ENV).map(PathBuf::from)).unwrap_or_else(|| PathBuf::from("runs"))
    }
}

fn gen_data(a: &GenDataArgs) -> CliResult {
    let m = generate_dataset(a.n, a.yaw_std.to_radians(), a.pitch_std.to_radians(), &a.out, a.seed)?;
    println!("wrote {} images to {}", m.count, a.out.display());
    Ok(())
}

fn train(a: &TrainArgs) -> CliResult {
    if let Some(p) = &a.resume {
        require_exists("--resume", p)?;
    }
    if let Some(p) = &a.init_from {
        require_exists("--init-from", p)?;
    }
    let saved = a.resume.as_deref().map(checkpoint_config).transpose()?;
    let cfg = a.config.resolve(saved)?;
    require_exists("dataset", &cfg.dataset)?;
    let run_dir = match (&a.config.run_name, &a.resume) {
        (Some(name), _) => a.config.run_root().join(name),
        // checkpoints live in <run>/checkpoints/
        (None, Some(ckpt)) => ckpt.parent().and_then(Path::parent).map(Path::to_path_buf).unwrap_or_default(),
        (None, None) => a.config.run_root().join(default_run_name(&cfg)),
    };
    let ctx = TrainContext::from_dataset(cfg.clone())?;
    let eval_opts = EvalOptions { seed: cfg.seed, ..Default::default() };
    let mut hook = |state: &TrainState, ctx: &TrainContext| -> sidegan::Result<Vec<(String, f64)>> {
        Ok(evaluate_state(state, &ctx.samples, &eval_opts)?.metrics())
    };
    let opts = RunOptions { run_dir: run_dir.clone(), resume: a.resume.clone(), init_from: a.init_from.clone() };
    let outcome = run(&cfg, &ctx, &opts, Some(&mut hook))?;
    if !a.no_report {
        let sources = ReportSources { run_dir: Some(run_dir.clone()), dataset: Some(cfg.dataset.clone()), seed: cfg.seed, ..Default::default() };
        emit_report(&run_dir.join("report"), &sources)?;
    }
    println!("{}", run_dir.display());
    println!("final checkpoint {}", outcome.final_checkpoint.display());
    Ok(())
}

fn eval(a: &EvalArgs) -> CliResult {
    require_exists("--ckpt", &a.ckpt)?;
    require_exists("--dataset", &a.dataset)?;
    let (_, state) = load_checkpoint(&a.ckpt)?;
    let samples = load_dataset(&a.dataset)?.load_all()?;
    let summary = evaluate_state(&state, &samples, &a.metrics.options(a.seed))?;
    write_eval_outputs(&a.out, &summary)?;
    let run_dir = a.ckpt.parent().and_then(Path::parent).filter(|d| d.join("losses.csv").exists()).map(Path::to_path_buf);
    let sources = ReportSources {
        checkpoints: if run_dir.is_some() { Vec::new() } else { vec![a.ckpt.clone()] },
        run_dir,
        dataset: Some(a.dataset.clone()),
        seed: a.seed,
        ..Default::default()
    };
    emit_report(&a.out, &sources)?;
    for (k, v) in summary.metrics() {
        println!("{k} {v:.6}");
    }
    Ok(())
}

fn sample(a: &SampleArgs) -> CliResult {
    require_exists("--ckpt", &a.ckpt)?;
    let (_, state) = load_checkpoint(&a.ckpt)?;
    let gen = &state.gen;
    let mut rng = seeded_stream(a.seed, 40);
    let dist = PoseDistribution::uniform((-50f64.to_radians(), 50f64.to_radians()), (-15f64.to_radians(), 15f64.to_radians()));
    let mut poses = Vec::with_capacity(a.n);
    for _ in 0..a.n {
        let drawn = sample_pose(&dist, &mut rng)?;
        let yaw = a.yaw.map_or(drawn.yaw, f64::to_radians);
        let pitch = a.pitch.map_or(drawn.pitch, f64::to_radians);
        poses.push(pose_from_angles(yaw, pitch, DEFAULT_RADIUS, DEFAULT_FOCAL).map_err(|e| Failure::Usage(format!("--yaw/--pitch: {e}")))?);
    }
    let latents: Vec<LatentPair> = (0..a.n).map(|_| LatentPair::sample(&gen.cfg.field, &mut rng)).collect();
    fs::create_dir_all(&a.out).map_err(|e| sidegan::Error::io(&a.out, e))?;
    let mut records = Vec::with_capacity(a.n);
    for (chunk, (lat, pos)) in latents.chunks(16).zip(poses.chunks(16)).enumerate() {
        for (k, img) in render_images(gen, lat, pos).iter().enumerate() {
            let id = format!("{:06}", chunk * 16 + k);
            write_png(&a.out.join(format!("{id}.png")), img)?;
            records.push((id, pos[k]));
        }
    }
    sidegan::camera::write_pose_csv(&a.out.join("poses.csv"), &records)?;
    println!("wrote {} samples to {}", a.n, a.out.display());
    Ok(())
}

fn render_sweep(a: &SweepArgs) -> CliResult {
    require_exists("--ckpt", &a.ckpt)?;
    if a.yaws.is_empty() {
        return Err(Failure::Usage("--yaws: at least one angle is required".into()));
    }
    let (_, state) = load_checkpoint(&a.ckpt)?;
    let (panels, depths) = yaw_sweep_with_depth(&state.gen, &a.yaws, a.seed).map_err(|e| Failure::Usage(format!("--yaws: {e}")))?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| sidegan::Error::io(dir, e))?;
    }
    write_png(&a.out, &strip(&panels)?)?;
    let rc = &state.gen.cfg.render;
    let gray: Vec<_> = depths.iter().map(|d| depth_to_gray(d, rc.near, rc.far)).collect();
    let depth_path = a.out.with_file_name(format!("{}_depth.png", a.out.file_stem().and_then(|s| s.to_str()).unwrap_or("sweep")));
    write_png(&depth_path, &strip(&gray)?)?;
    println!("wrote {} panels to {} and {}", panels.len(), a.out.display(), depth_path.display());
    Ok(())
}

fn analyze_poses(a: &AnalyzeArgs) -> CliResult {
    require_exists("--dataset", &a.dataset)?;
    if a.cells < 2 {
        return Err(Failure::Usage("--cells: need at least 2".into()));
    }
    let poses = std::sync::Arc::new(load_dataset(&a.dataset)?.poses());
    let (yh, ph) = (a.uniform_yaw.to_radians(), a.uniform_pitch.to_radians());
    let dist = PoseDistribution::aups(poses.clone(), a.mixture_ratio, (-yh, yh), (-ph, ph));
    dist.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let mut rng = seeded_stream(a.seed, 50);
    let drawn: Vec<f64> = (0..a.n).map(|_| sample_pose(&dist, &mut rng).map(|p| p.yaw)).collect::<sidegan::Result<_>>()?;
    let edges: Vec<f64> = (0..=a.cells).map(|k| -yh + 2.0 * yh * k as f64 / a.cells as f64).collect();
    let expected_p = dist.yaw_cell_probabilities(&edges);
    let observed = histogram(&drawn, -yh, yh, a.cells);
    let dataset_counts = histogram(&poses.iter().map(|p| p.yaw).collect::<Vec<_>>(), -yh, yh, a.cells);
    // cells the mixture cannot reach are dropped from the test
    let (obs, exp): (Vec<u64>, Vec<f64>) =
        observed.iter().zip(&expected_p).filter(|(_, &p)| p > 0.0).map(|(&o, &p)| (o, p * a.n as f64)).unzip();
    let test = chi_square(&obs, &exp)?;

    fs::create_dir_all(&a.out).map_err(|e| sidegan::Error::io(&a.out, e))?;
    let path = a.out.join("pose_analysis.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| sidegan::Error::format(&path, e))?;
    w.write_record(["yaw_lo_deg", "yaw_hi_deg", "dataset_count", "mixture_count", "mixture_expected"]).map_err(|e| sidegan::Error::format(&path, e))?;
    for k in 0..a.cells {
        w.write_record([
            edges[k].to_degrees().to_string(),
            edges[k + 1].to_degrees().to_string(),
            dataset_counts[k].to_string(),
            observed[k].to_string(),
            (expected_p[k] * a.n as f64).to_string(),
        ])
        .map_err(|e| sidegan::Error::format(&path, e))?;
    }
    w.flush().map_err(|e| sidegan::Error::io(&path, e))?;
    let n_data = poses.len().max(1) as f64;
    let groups: Vec<Vec<f64>> =
        (0..a.cells).map(|k| vec![dataset_counts[k] as f64 / n_data, observed[k] as f64 / a.n.max(1) as f64]).collect();
    let png = a.out.join("pose_analysis.png");
    bar_chart(&groups, 480, 300).save(&png).map_err(|e| sidegan::Error::format(&png, e))?;
    let summary = format!(
        "mixture_ratio {}\nsamples {}\nchi_square {:.4}\ndof {}\np_value {:.6}\n",
        a.mixture_ratio, a.n, test.statistic, test.dof, test.p_value
    );
    let path = a.out.join("pose_analysis.txt");
    fs::write(&path, &summary).map_err(|e| sidegan::Error::io(&path, e))?;
    print!("{summary}");
    Ok(())
}

fn ablate(a: &AblateArgs) -> CliResult {
    let base = a.config.resolve(None)?;
    require_exists("dataset", &base.dataset)?;
    let name = a.config.run_name.clone().unwrap_or_else(|| format!("ablate-{}", default_run_name(&base)));
    let root = a.config.run_root().join(name);
    let results = run_ablation(&base, &root, &a.metrics.options(base.seed))?;
    print!("{}", fs::read_to_string(root.join("comparison.md")).map_err(|e| sidegan::Error::io(&root, e))?);
    println!("{} configurations under {}", results.len(), root.display());
    Ok(())
}

fn dispatch(cli: &Cli) -> CliResult {
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Sample(a) => sample(a),
        Command::RenderSweep(a) => render_sweep(a),
        Command::AnalyzePoses(a) => analyze_poses(a),
        Command::Ablate(a) => ablate(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("run `sidegan --help` for usage");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
