use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use vitscale::cost::{cost_report, load_table2, shapefind, GridSpec, MemoryModel, GIB};
use vitscale::laws::{fit_law, pareto_frontier, FitOptions, Objective};
use vitscale::optim::{DecayType, OptimizerMode, ScheduleConfig};
use vitscale::par::{self, Exec};
use vitscale::probe::{kshot_sample, load_features, save_features, Probe, ProbeOptions};
use vitscale::runs::{attach_compute, emit_plot, parse_runs_csv, CurvePoint, FitJson, PlotFormat, REFERENCE_BATCH};
use vitscale::train::{
    accuracy, extract_features, gen_synthetic, load_idx, train, Dataset, SyntheticSpec, TrainConfig,
};
use vitscale::vit::{load_checkpoint, save_checkpoint, HeadType, ShapeConfig};

#[derive(Parser)]
#[command(name = "vitscale", version, about = "ViT scaling toolkit")]
struct Cli {
    /// Print machine-readable JSON instead of tables.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parameters, FLOPs, token padding and memory of one shape.
    Cost(CostArgs),
    /// Evaluate every shape of a grid against a memory budget.
    Shapefind(ShapefindArgs),
    /// Fit a saturating power law to a run table.
    FitLaw(FitLawArgs),
    /// Dump a learning-rate schedule as `step,lr` CSV.
    Schedule(ScheduleArgs),
    /// Train a small ViT and write a checkpoint.
    Train(TrainArgs),
    /// Extract pre-logit features from a checkpoint.
    Features(FeaturesArgs),
    /// Few-shot ridge probe on a feature file.
    Probe(ProbeArgs),
}

#[derive(Args)]
struct CostArgs {
    #[arg(long)]
    width: usize,
    #[arg(long)]
    depth: usize,
    #[arg(long)]
    mlp: usize,
    #[arg(long)]
    heads: usize,
    #[arg(long)]
    patch: usize,
    #[arg(long, default_value_t = 224)]
    res: usize,
    #[arg(long, default_value_t = 1000)]
    classes: usize,
    #[arg(long, default_value = "map")]
    head_type: HeadType,
    /// Repeatable; all modes when omitted.
    #[arg(long)]
    optimizer: Vec<OptimizerMode>,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long, default_value_t = 16.0)]
    budget_gib: f64,
    /// Count gradients as resident alongside optimizer state.
    #[arg(long)]
    grads_resident: bool,
}

#[derive(Args)]
struct ShapefindArgs {
    #[arg(long, value_delimiter = ',', required = true)]
    widths: Vec<usize>,
    #[arg(long, value_delimiter = ',', required = true)]
    depths: Vec<usize>,
    #[arg(long, value_delimiter = ',', required = true)]
    heads: Vec<usize>,
    #[arg(long, value_delimiter = ',', required = true)]
    mlps: Vec<usize>,
    #[arg(long, default_value_t = 14)]
    patch: usize,
    #[arg(long, default_value_t = 224)]
    res: usize,
    #[arg(long, default_value_t = 1000)]
    classes: usize,
    #[arg(long, default_value = "map")]
    head_type: HeadType,
    #[arg(long)]
    optimizer: Vec<OptimizerMode>,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long, default_value_t = 16.0)]
    budget_gib: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum ObjectiveArg {
    Log,
    Linear,
}

#[derive(Args)]
struct FitLawArgs {
    #[arg(long)]
    runs: PathBuf,
    #[arg(long)]
    metric: String,
    /// Shape table used to turn steps into a FLOPs compute proxy.
    #[arg(long)]
    shapes: PathBuf,
    #[arg(long, default_value_t = REFERENCE_BATCH)]
    batch: u64,
    /// Fit every run rather than the Pareto frontier.
    #[arg(long)]
    all_points: bool,
    #[arg(long, value_enum, default_value = "log")]
    objective: ObjectiveArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "fit.json")]
    out: PathBuf,
    /// Curve of observed and predicted error; format from the extension
    /// unless --plot-format is given.
    #[arg(long)]
    plot: Option<PathBuf>,
    #[arg(long)]
    plot_format: Option<PlotFormat>,
}

#[derive(Args)]
struct ScheduleArgs {
    #[arg(long)]
    base: f64,
    #[arg(long, default_value_t = 0)]
    warmup: u64,
    #[arg(long, default_value = "rsqrt")]
    decay: DecayType,
    #[arg(long, default_value_t = 10_000)]
    timescale: u64,
    #[arg(long)]
    total: Option<u64>,
    #[arg(long, default_value_t = 0)]
    cooldown: u64,
    /// Last step to dump; defaults to --total.
    #[arg(long)]
    last: Option<u64>,
    #[arg(long, default_value_t = 1)]
    every: u64,
}

#[derive(Args)]
struct DataArgs {
    /// IDX image file; synthetic data is generated when omitted.
    #[arg(long, requires = "labels")]
    images: Option<PathBuf>,
    #[arg(long, requires = "images")]
    labels: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 64)]
    n_per_class: usize,
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON training config; the micro model is used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "gap")]
    head_type: HeadType,
    #[arg(long, default_value = "adafactor-mod")]
    optimizer: OptimizerMode,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "model.vtsk")]
    out: PathBuf,
    #[arg(long, default_value = "train_log.csv")]
    log: PathBuf,
}

#[derive(Args)]
struct FeaturesArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "features.vtsf")]
    out: PathBuf,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    features: PathBuf,
    /// Evaluation features; the probe is scored on --features when omitted.
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    shots: usize,
    #[arg(long)]
    l2: Option<f64>,
    #[arg(long)]
    bias: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Average over this many consecutive seeds.
    #[arg(long, default_value_t = 1)]
    repeats: u64,
}

enum Failure {
    Usage(String),
    Data(String),
}

impl From<vitscale::Error> for Failure {
    fn from(e: vitscale::Error) -> Self {
        match e {
            vitscale::Error::Config(_) => Failure::Usage(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

type Outcome = Result<String, Failure>;

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    std::fs::write(path, contents).map_err(|e| Failure::Data(format!("cannot write {}: {e}", path.display())))
}

fn read_file(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::Data(format!("cannot read {}: {e}", path.display())))
}

fn modes_or_all(modes: &[OptimizerMode]) -> Vec<OptimizerMode> {
    if modes.is_empty() {
        OptimizerMode::ALL.to_vec()
    } else {
        modes.to_vec()
    }
}

fn budget(gib: f64) -> Result<f64, Failure> {
    if gib > 0.0 && gib.is_finite() {
        Ok(gib * GIB)
    } else {
        Err(Failure::Usage(format!("--budget-gib must be positive, got {gib}")))
    }
}

fn to_json(v: &impl Serialize) -> Outcome {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

fn cost(a: CostArgs, json: bool) -> Outcome {
    let shape = ShapeConfig {
        width: a.width,
        depth: a.depth,
        mlp_width: a.mlp,
        heads: a.heads,
        patch_size: a.patch,
        image_res: a.res,
        channels: 3,
        num_classes: a.classes,
        head_type: a.head_type,
        map_mlp: false,
    };
    let model =
        MemoryModel { budget_bytes: budget(a.budget_gib)?, grads_resident: a.grads_resident, ..MemoryModel::default() };
    let r = cost_report(&shape, a.res, a.batch, &modes_or_all(&a.optimizer), &model)?;
    if json {
        return to_json(&r);
    }
    let mut s = String::new();
    writeln!(s, "params      {:.1}M body + {:.2}M head", r.body_params as f64 / 1e6, r.head_params as f64 / 1e6)
        .unwrap();
    writeln!(s, "GFLOPs      {:.1} at {}px", r.flops as f64 / 1e9, r.res).unwrap();
    writeln!(s, "tokens      {} (padded {})", r.tokens, r.padded_tokens).unwrap();
    writeln!(s, "memory      batch {}, budget {} GiB", a.batch, a.budget_gib).unwrap();
    for (mode, m) in &r.memory {
        writeln!(
            s,
            "  {mode:<14} params {:6.2} GiB  optimizer {:6.2} GiB  activations {:6.2} GiB  total {:6.2} GiB  {}",
            m.params_bytes / GIB,
            m.optimizer_bytes / GIB,
            m.activation_bytes / GIB,
            m.total_bytes / GIB,
            if m.fits { "fits" } else { "exceeds" }
        )
        .unwrap();
    }
    Ok(s)
}

fn shapefind_cmd(a: ShapefindArgs, json: bool) -> Outcome {
    let grid = GridSpec {
        patch_size: a.patch,
        num_classes: a.classes,
        head_type: a.head_type,
        ..GridSpec::new(a.widths, a.depths, a.heads, a.mlps)
    };
    let modes = modes_or_all(&a.optimizer);
    let rows = shapefind(&grid, a.res, a.batch, budget(a.budget_gib)?, &modes, Exec::Parallel)?;
    if json {
        return to_json(&rows);
    }
    let mut s =
        format!("{:>5} {:>6} {:>5} {:>6} {:>10} {:>9}", "depth", "width", "heads", "mlp", "params(M)", "GFLOPs");
    for m in &modes {
        write!(s, " {:>13}", m.as_str()).unwrap();
    }
    s.push('\n');
    for r in &rows {
        write!(
            s,
            "{:>5} {:>6} {:>5} {:>6} {:>10.1} {:>9.1}",
            r.depth,
            r.width,
            r.heads,
            r.mlp_width,
            r.params as f64 / 1e6,
            r.flops as f64 / 1e9
        )
        .unwrap();
        for (_, fits) in &r.fits {
            write!(s, " {:>13}", if *fits { "yes" } else { "no" }).unwrap();
        }
        s.push('\n');
    }
    Ok(s)
}

fn plot_format(path: &Path, explicit: Option<PlotFormat>) -> PlotFormat {
    explicit.unwrap_or_else(|| match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("svg") => PlotFormat::Svg,
        _ => PlotFormat::Csv,
    })
}

fn fit_law_cmd(a: FitLawArgs, json: bool) -> Outcome {
    let shapes = load_table2(&a.shapes)?;
    let table = parse_runs_csv(&a.runs)?.filter_metric(&a.metric);
    if table.is_empty() {
        return Err(Failure::Data(format!("no runs for metric `{}` in {}", a.metric, a.runs.display())));
    }
    let points = attach_compute(&table, &shapes, a.batch)?.points()?;
    let fitted = if a.all_points { points.clone() } else { pareto_frontier(&points) };
    let opts = FitOptions {
        objective: match a.objective {
            ObjectiveArg::Log => Objective::Log,
            ObjectiveArg::Linear => Objective::Linear,
        },
        seed: a.seed,
        ..FitOptions::default()
    };
    let report = fit_law(&fitted, &opts)?;
    let out = FitJson::new(&report, &points);
    let text = serde_json::to_string_pretty(&out)? + "\n";
    write_file(&a.out, &text)?;

    if let Some(path) = &a.plot {
        let mut curve: Vec<CurvePoint> = points
            .iter()
            .map(|p| CurvePoint {
                compute: p.compute,
                observed: p.error,
                predicted: Some(report.params.predict(p.compute)),
            })
            .collect();
        curve.sort_by(|x, y| x.compute.total_cmp(&y.compute));
        emit_plot(&curve, path, plot_format(path, a.plot_format))?;
    }
    if json {
        return Ok(text);
    }
    let p = report.params;
    let mut s = format!(
        "{} runs, {} fitted ({}), {} on the frontier\n",
        points.len(),
        report.n_points,
        if a.all_points { "all" } else { "frontier" },
        out.frontier.len()
    );
    writeln!(s, "E = {:.4} (C + {:.4})^-{:.4} + {:.4}", p.a, p.d, p.b, p.c).unwrap();
    writeln!(s, "rms {:.4} (nested {:.4}), wrote {}", report.rms_residual, report.nested_rms, a.out.display()).unwrap();
    Ok(s)
}

#[derive(Serialize)]
struct LrPoint {
    step: u64,
    lr: f64,
}

fn schedule_cmd(a: ScheduleArgs, json: bool) -> Outcome {
    let cfg = ScheduleConfig {
        base_lr: a.base,
        warmup_steps: a.warmup,
        decay_type: a.decay,
        timescale: a.timescale,
        total_steps: a.total,
        cooldown_steps: a.cooldown,
    };
    cfg.validate()?;
    let last = a.last.or(a.total).ok_or_else(|| Failure::Usage("--last is required without --total".into()))?;
    if a.every == 0 {
        return Err(Failure::Usage("--every must be >= 1".into()));
    }
    if json {
        let pts: Vec<LrPoint> =
            (0..=last).step_by(a.every as usize).map(|step| LrPoint { step, lr: cfg.lr_at(step) }).collect();
        return to_json(&pts);
    }
    Ok(cfg.to_csv(last, a.every))
}

fn load_data(d: &DataArgs, shape: &ShapeConfig) -> Result<Dataset, Failure> {
    match (&d.images, &d.labels) {
        (Some(x), Some(y)) => Ok(load_idx(x, y)?),
        _ => Ok(gen_synthetic(&SyntheticSpec {
            res: shape.image_res,
            channels: shape.channels,
            classes: shape.num_classes,
            n_per_class: d.n_per_class,
            noise: d.noise,
            contrast: 0.1,
            seed: d.data_seed,
        })?),
    }
}

#[derive(Serialize)]
struct TrainSummary {
    steps_run: u64,
    final_loss: Option<f64>,
    train_accuracy: f64,
    polyak: bool,
    checkpoint: PathBuf,
    log: PathBuf,
}

fn train_cmd(a: TrainArgs, json: bool) -> Outcome {
    let mut cfg = match &a.config {
        Some(path) => serde_json::from_str::<TrainConfig>(&read_file(path)?)
            .map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?,
        None => TrainConfig::micro(ShapeConfig::micro(a.head_type), a.optimizer, 300),
    };
    if let Some(steps) = a.steps {
        cfg.total_steps = steps;
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let data = load_data(&a.data, &cfg.model)?;
    let out = train(&cfg, &data)?;
    let params = out.averaged.as_ref().unwrap_or(&out.params);
    save_checkpoint(&a.out, &cfg.model, params)?;
    write_file(&a.log, out.log.to_csv())?;
    let summary = TrainSummary {
        steps_run: out.steps_run,
        final_loss: out.log.final_loss(),
        train_accuracy: accuracy(params, &cfg.model, &data, Exec::Parallel)?,
        polyak: out.averaged.is_some(),
        checkpoint: a.out,
        log: a.log,
    };
    if json {
        return to_json(&summary);
    }
    Ok(format!(
        "trained {} steps, final loss {:.4}, train accuracy {:.1}%\nwrote {}{} and {}\n",
        summary.steps_run,
        summary.final_loss.unwrap_or(f64::NAN),
        summary.train_accuracy * 100.0,
        summary.checkpoint.display(),
        if summary.polyak { " (Polyak average)" } else { "" },
        summary.log.display()
    ))
}

#[derive(Serialize)]
struct FeaturesSummary {
    n: usize,
    dim: usize,
    out: PathBuf,
}

fn features_cmd(a: FeaturesArgs, json: bool) -> Outcome {
    let (shape, params) = load_checkpoint(&a.checkpoint)?;
    let data = load_data(&a.data, &shape)?;
    let feats = extract_features(&params, &shape, &data, Exec::Parallel)?;
    save_features(&a.out, &feats)?;
    let summary = FeaturesSummary { n: feats.len(), dim: feats.dim(), out: a.out };
    if json {
        return to_json(&summary);
    }
    Ok(format!("wrote {} features of dim {} to {}\n", summary.n, summary.dim, summary.out.display()))
}

#[derive(Serialize)]
struct ProbeSummary {
    shots: usize,
    l2: f64,
    accuracy: f64,
    per_seed: Vec<f64>,
}

fn probe_cmd(a: ProbeArgs, json: bool) -> Outcome {
    if a.repeats == 0 {
        return Err(Failure::Usage("--repeats must be >= 1".into()));
    }
    let set = load_features(&a.features)?;
    let test = match &a.test {
        Some(p) => load_features(p)?,
        None => set.clone(),
    };
    let opts = ProbeOptions { l2: a.l2, bias: a.bias };
    let mut per_seed = Vec::new();
    let mut l2 = 0.0;
    for seed in a.seed..a.seed + a.repeats {
        let probe = Probe::fit(&kshot_sample(&set, a.shots, seed)?, &opts)?;
        l2 = probe.l2;
        per_seed.push(probe.accuracy(&test)?);
    }
    let summary =
        ProbeSummary { shots: a.shots, l2, accuracy: per_seed.iter().sum::<f64>() / per_seed.len() as f64, per_seed };
    if json {
        return to_json(&summary);
    }
    Ok(format!(
        "{}-shot accuracy {:.2}% over {} seed(s), l2 {}\n",
        summary.shots,
        summary.accuracy * 100.0,
        summary.per_seed.len(),
        summary.l2
    ))
}

fn threads_from_env() -> Result<Option<usize>, Failure> {
    match std::env::var("VTSK_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map(Some)
            .map_err(|_| Failure::Usage(format!("VTSK_THREADS must be a positive integer, got `{v}`"))),
        Err(_) => Ok(None),
    }
}

fn run(cli: Cli) -> Outcome {
    par::init_threads(threads_from_env()?);
    let json = cli.json;
    match cli.cmd {
        Command::Cost(a) => cost(a, json),
        Command::Shapefind(a) => shapefind_cmd(a, json),
        Command::FitLaw(a) => fit_law_cmd(a, json),
        Command::Schedule(a) => schedule_cmd(a, json),
        Command::Train(a) => train_cmd(a, json),
        Command::Features(a) => features_cmd(a, json),
        Command::Probe(a) => probe_cmd(a, json),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Data(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
