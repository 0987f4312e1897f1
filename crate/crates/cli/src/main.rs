use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use fmg_audit::audit::{self, AuditConfig};
use fmg_audit::frameio::{self, DEFAULT_MAX_DIM};
use fmg_audit::optflow::{self, flow_mean_magnitude, FlowParams};
use fmg_audit::predictor::BackendSpec;
use fmg_audit::qa_eval;
use fmg_audit::sampler::{self, SamplerParams, SamplingMode, ScoreStat};
use fmg_audit::synthgen::{self, FixtureKind, FixtureSpec};
use fmg_audit::taxonomy::{load_taxonomy, Taxonomy};
use serde_json::{json, Value};

const EXIT_PARTIAL: u8 = 2;
const EXIT_CONFIG: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "fmg-audit", version, about = "Flow-guided frame sampling and video artifact auditing")]
#[command(args_override_self = true)]
struct Cli {
    /// JSON file whose keys mirror the command-line flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker count for audit and for parallel flow.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[arg(long, global = true, default_value = "warn")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Dense optical flow between two images.
    Flow(FlowCmd),
    /// Per-transition instability profile of a frame sequence.
    Score(ScoreCmd),
    /// FMG-DFS frame sampling.
    Sample(SampleCmd),
    /// Synthetic fixture sequences with ground truth.
    Synth(SynthCmd),
    /// One yes/no question per video and category, as JSONL.
    QaGen(QaGenCmd),
    /// Per-axis accuracy of predictions against annotations.
    Evaluate(EvaluateCmd),
    /// Sample, ask and report for every video under the input roots.
    Audit(AuditCmd),
}

#[derive(Args, Debug, Clone)]
struct FlowArgs {
    #[arg(long, default_value_t = 3)]
    levels: usize,
    #[arg(long, default_value_t = 0.5)]
    pyr_scale: f64,
    #[arg(long, default_value_t = 15)]
    winsize: usize,
    #[arg(long, default_value_t = 3)]
    iterations: usize,
    #[arg(long, default_value_t = 5)]
    poly_n: usize,
    #[arg(long, default_value_t = 1.1)]
    poly_sigma: f64,
}

impl FlowArgs {
    fn params(&self) -> FlowParams {
        FlowParams {
            pyramid_levels: self.levels,
            pyramid_scale: self.pyr_scale,
            window_size: self.winsize,
            iterations: self.iterations,
            poly_n: self.poly_n,
            poly_sigma: self.poly_sigma,
        }
    }
}

#[derive(Args, Debug, Clone)]
struct SamplerArgs {
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, default_value_t = 5)]
    w: usize,
    #[arg(long, default_value_t = 10)]
    m: usize,
    #[arg(long, default_value_t = 3)]
    ws: usize,
}

impl SamplerArgs {
    fn params(&self) -> SamplerParams {
        SamplerParams {
            k: self.k,
            w: self.w,
            m: self.m,
            ws: self.ws,
        }
    }
}

#[derive(Args, Debug, Clone)]
#[group(required = true, multiple = false)]
struct SourceArgs {
    /// Directory of PNG/PGM frames.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Text file listing one frame path per line.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

impl SourceArgs {
    fn path(&self) -> &Path {
        self.input.as_deref().or(self.manifest.as_deref()).expect("clap enforces one source")
    }
}

#[derive(Args, Debug)]
struct FlowCmd {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    /// Binary flow dump.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print mean and max magnitude as JSON.
    #[arg(long)]
    stats: bool,
    /// Downscale both images so the longer side is at most this.
    #[arg(long)]
    max_dim: Option<usize>,
    #[command(flatten)]
    flow: FlowArgs,
}

#[derive(Args, Debug)]
struct ScoreCmd {
    #[command(flatten)]
    source: SourceArgs,
    #[arg(long, default_value_t = DEFAULT_MAX_DIM)]
    max_dim: usize,
    #[arg(long, default_value = "mean")]
    stat: ScoreStat,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    flow: FlowArgs,
}

#[derive(Args, Debug)]
struct SampleCmd {
    #[command(flatten)]
    source: SourceArgs,
    #[command(flatten)]
    sampler: SamplerArgs,
    #[arg(long, default_value_t = DEFAULT_MAX_DIM)]
    max_dim: usize,
    #[arg(long, default_value = "mean")]
    stat: ScoreStat,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Copy the selected frames here as idx_NNNNN.png.
    #[arg(long)]
    export_frames: Option<PathBuf>,
    #[command(flatten)]
    flow: FlowArgs,
}

#[derive(Args, Debug)]
struct SynthCmd {
    /// translate, burst, flicker or constant.
    #[arg(long)]
    kind: String,
    #[arg(long)]
    n: usize,
    /// WIDTHxHEIGHT.
    #[arg(long, default_value = "256x256")]
    size: String,
    /// Inclusive transition ranges for burst, frame ranges for flicker: a:b,c:d.
    #[arg(long)]
    bursts: Option<String>,
    /// dx,dy.
    #[arg(long, default_value = "1,0", allow_hyphen_values = true)]
    shift: String,
    /// Transition that carries the shift for translate.
    #[arg(long, default_value_t = 0)]
    at: usize,
    /// Flicker amplitude.
    #[arg(long, default_value_t = 0.05)]
    amplitude: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct QaGenCmd {
    /// Root whose subdirectories are videos.
    #[arg(long)]
    input: Vec<PathBuf>,
    #[arg(long)]
    video_id: Vec<String>,
    #[arg(long)]
    taxonomy: Option<PathBuf>,
    /// Attach labels from this annotation file.
    #[arg(long)]
    annotations: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateCmd {
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long)]
    taxonomy: Option<PathBuf>,
    #[arg(long, default_value = "json", value_parser = ["json", "table"])]
    format: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AuditCmd {
    /// Root whose subdirectories are videos; repeatable.
    #[arg(long, required = true)]
    input: Vec<PathBuf>,
    #[arg(long)]
    taxonomy: Option<PathBuf>,
    /// always_no, threshold:<value> or "cmd:<program> [args]".
    #[arg(long, default_value = "always_no")]
    predictor: String,
    /// Per-request timeout for command predictors.
    #[arg(long, default_value_t = 120)]
    timeout_secs: u64,
    #[arg(long, default_value = "fmg")]
    sampling: SamplingMode,
    /// Seed for random sampling.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    annotations: Option<PathBuf>,
    /// Sampled frames are exported here, one directory per video.
    #[arg(long)]
    scratch: Option<PathBuf>,
    /// Full JSON report.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-video JSONL; stdout when neither this nor --out is given.
    #[arg(long)]
    jsonl: Option<PathBuf>,
    /// Predictions JSONL for the evaluate command.
    #[arg(long)]
    predictions_out: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_MAX_DIM)]
    max_dim: usize,
    #[arg(long, default_value = "mean")]
    stat: ScoreStat,
    #[command(flatten)]
    sampler: SamplerArgs,
    #[command(flatten)]
    flow: FlowArgs,
}

/// Error raised before any work starts.
#[derive(Debug)]
struct ConfigError(anyhow::Error);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_err(e: impl Into<anyhow::Error>) -> anyhow::Error {
    anyhow::Error::new(ConfigError(e.into()))
}

/// Splices `--config` values in right after the subcommand name so that
/// explicit flags, which come later, take precedence.
fn expand_config(args: Vec<OsString>) -> anyhow::Result<Vec<OsString>> {
    let strs: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let mut config = None;
    for (i, a) in strs.iter().enumerate() {
        if let Some(p) = a.strip_prefix("--config=") {
            config = Some(PathBuf::from(p));
        } else if a == "--config" {
            config = strs.get(i + 1).map(PathBuf::from);
        }
    }
    let Some(path) = config else {
        return Ok(args);
    };
    let text = fs::read_to_string(&path).with_context(|| format!("reading config {}", path.display()))?;
    let value: Value =
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    let Value::Object(map) = value else {
        bail!("config {}: top level must be an object", path.display());
    };
    const SUBCOMMANDS: [&str; 7] = ["flow", "score", "sample", "synth", "qa-gen", "evaluate", "audit"];
    let Some(pos) = strs.iter().position(|a| SUBCOMMANDS.contains(&a.as_str())) else {
        return Ok(args);
    };
    let sub = strs[pos].as_str();
    let mut injected = Vec::new();
    for (key, val) in &map {
        let flag = key.replace('_', "-");
        if flag == "config" {
            continue;
        }
        if SUBCOMMANDS.contains(&flag.as_str()) {
            if flag == sub {
                let Value::Object(inner) = val else {
                    bail!("config key \"{key}\" must be an object");
                };
                for (k, v) in inner {
                    push_flag(&mut injected, &k.replace('_', "-"), v)?;
                }
            }
            continue;
        }
        push_flag(&mut injected, &flag, val)?;
    }
    let mut out: Vec<OsString> = args[..=pos].to_vec();
    out.extend(injected.into_iter().map(OsString::from));
    out.extend_from_slice(&args[pos + 1..]);
    Ok(out)
}

fn push_flag(out: &mut Vec<String>, flag: &str, val: &Value) -> anyhow::Result<()> {
    match val {
        Value::Bool(true) => out.push(format!("--{flag}")),
        Value::Bool(false) | Value::Null => {}
        Value::String(s) => out.push(format!("--{flag}={s}")),
        Value::Number(n) => out.push(format!("--{flag}={n}")),
        Value::Array(items) => {
            for item in items {
                push_flag(out, flag, item)?;
            }
        }
        Value::Object(_) => bail!("config key \"{flag}\" cannot be an object"),
    }
    Ok(())
}

fn write_output(path: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
            fs::write(p, text).with_context(|| format!("writing {}", p.display()))
        }
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn taxonomy_from(path: Option<&Path>) -> anyhow::Result<Taxonomy> {
    match path {
        Some(p) => load_taxonomy(p).map_err(config_err),
        None => Ok(Taxonomy::default_six()),
    }
}

fn parse_pair<T: std::str::FromStr>(s: &str, sep: char, what: &str) -> anyhow::Result<(T, T)> {
    let (a, b) = s.split_once(sep).ok_or_else(|| anyhow!("{what} \"{s}\": expected a{sep}b"))?;
    let parse = |v: &str| v.trim().parse::<T>().map_err(|_| anyhow!("{what} \"{s}\": bad number \"{v}\""));
    Ok((parse(a)?, parse(b)?))
}

fn run_flow(cmd: FlowCmd) -> anyhow::Result<u8> {
    let params = cmd.flow.params();
    params.validate().map_err(config_err)?;
    let mut a = frameio::load_image(&cmd.a)?;
    let mut b = frameio::load_image(&cmd.b)?;
    if let Some(d) = cmd.max_dim {
        a = frameio::downscale(&a, d);
        b = frameio::downscale(&b, d);
    }
    let field = optflow::flow_two_frame(&a, &b, &params)?;
    if let Some(out) = &cmd.out {
        field.save(out)?;
    }
    if cmd.stats || cmd.out.is_none() {
        let stats = json!({
            "width": field.width,
            "height": field.height,
            "mean": flow_mean_magnitude(&field),
            "max": field.max_magnitude(),
        });
        println!("{stats}");
    }
    Ok(0)
}

fn run_score(cmd: ScoreCmd) -> anyhow::Result<u8> {
    let params = cmd.flow.params();
    params.validate().map_err(config_err)?;
    let seq = frameio::load_sequence(cmd.source.path())?.downscaled(cmd.max_dim);
    let profile = sampler::instability_profile_with(&seq, &params, cmd.stat)?;
    let report = json!({
        "video": seq.source_id(),
        "n": profile.n,
        "stat": cmd.stat,
        "flow": profile.params_digest,
        "scores": profile.scores,
    });
    write_output(cmd.out.as_deref(), &(serde_json::to_string_pretty(&report)? + "\n"))?;
    Ok(0)
}

fn run_sample(cmd: SampleCmd) -> anyhow::Result<u8> {
    let (sp, fp) = (cmd.sampler.params(), cmd.flow.params());
    sp.validate().map_err(config_err)?;
    fp.validate().map_err(config_err)?;
    let seq = frameio::load_sequence(cmd.source.path())?;
    let working = seq.downscaled(cmd.max_dim);
    let (profile, trace) = sampler::fmg_dfs(&working, &sp, &fp, cmd.stat)?;
    if let Some(dir) = &cmd.export_frames {
        audit::export_frames(&seq, &trace.sampled.indices, dir)?;
    }
    let report = json!({
        "video": seq.source_id(),
        "n": seq.len(),
        "params": sp,
        "scores": profile.scores,
        "scores_smooth": trace.scores_smooth,
        "peaks": trace.top_peaks,
        "indices": trace.sampled.indices,
        "provenance": trace.sampled.provenance,
    });
    write_output(cmd.out.as_deref(), &(serde_json::to_string_pretty(&report)? + "\n"))?;
    Ok(0)
}

fn parse_intervals(s: &str) -> anyhow::Result<Vec<(usize, usize)>> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| parse_pair(p, ':', "interval"))
        .collect()
}

fn run_synth(cmd: SynthCmd) -> anyhow::Result<u8> {
    let (width, height) = parse_pair::<usize>(&cmd.size.to_lowercase(), 'x', "size").map_err(config_err)?;
    let shift = parse_pair::<i32>(&cmd.shift, ',', "shift").map_err(config_err)?;
    let intervals = || -> anyhow::Result<Vec<(usize, usize)>> {
        let s = cmd.bursts.as_deref().ok_or_else(|| anyhow!("--bursts is required for --kind {}", cmd.kind))?;
        parse_intervals(s)
    };
    let kind = match cmd.kind.as_str() {
        "translate" => FixtureKind::Translate { shift, at: cmd.at },
        "burst" => FixtureKind::Burst {
            bursts: intervals().map_err(config_err)?,
            shift,
        },
        "flicker" => FixtureKind::Flicker {
            intervals: intervals().map_err(config_err)?,
            amplitude: cmd.amplitude,
        },
        "constant" => FixtureKind::Constant,
        other => return Err(config_err(anyhow!("unknown fixture kind \"{other}\""))),
    };
    let spec = FixtureSpec {
        kind,
        n: cmd.n,
        width,
        height,
        seed: cmd.seed,
    };
    spec.validate().map_err(config_err)?;
    let (seq, _) = synthgen::generate(&spec, &cmd.out)?;
    log::info!("wrote {} frames to {}", seq.len(), cmd.out.display());
    Ok(0)
}

fn run_qa_gen(cmd: QaGenCmd) -> anyhow::Result<u8> {
    let tax = taxonomy_from(cmd.taxonomy.as_deref())?;
    let mut ids = cmd.video_id.clone();
    for root in &cmd.input {
        for dir in audit::discover_videos(root).map_err(config_err)? {
            ids.push(dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
        }
    }
    if ids.is_empty() {
        return Err(config_err(anyhow!("no videos found")));
    }
    let annotations = match &cmd.annotations {
        Some(p) => qa_eval::load_annotations(p, &tax).map_err(config_err)?,
        None => Vec::new(),
    };
    let mut out = String::new();
    for id in &ids {
        let pairs = if cmd.annotations.is_some() {
            let ann = annotations.iter().find(|a| &a.video_id == id);
            qa_eval::generate_labeled_qa(id, &tax, ann)
        } else {
            qa_eval::generate_qa(id, &tax)
        };
        for p in pairs {
            out.push_str(&serde_json::to_string(&p)?);
            out.push('\n');
        }
    }
    write_output(cmd.out.as_deref(), &out)?;
    Ok(0)
}

fn run_evaluate(cmd: EvaluateCmd) -> anyhow::Result<u8> {
    let tax = taxonomy_from(cmd.taxonomy.as_deref())?;
    let report = qa_eval::evaluate(&cmd.predictions, &cmd.annotations, &tax).map_err(config_err)?;
    let text = if cmd.format == "table" {
        report.to_table()
    } else {
        serde_json::to_string_pretty(&report)? + "\n"
    };
    write_output(cmd.out.as_deref(), &text)?;
    Ok(0)
}

fn run_audit(cmd: AuditCmd, jobs: usize) -> anyhow::Result<u8> {
    let tax = taxonomy_from(cmd.taxonomy.as_deref())?;
    let backend: BackendSpec = cmd.predictor.parse().map_err(config_err)?;
    let backend = backend.with_timeout(Duration::from_secs(cmd.timeout_secs));
    let mut videos = Vec::new();
    for root in &cmd.input {
        if !root.is_dir() {
            return Err(config_err(anyhow!("input root {} is not a directory", root.display())));
        }
        videos.extend(audit::discover_videos(root).map_err(config_err)?);
    }
    let scratch = match &cmd.scratch {
        Some(p) => p.clone(),
        None => std::env::temp_dir().join(format!("fmg-audit-{}", std::process::id())),
    };
    let mut cfg = AuditConfig::new(tax, backend, videos, scratch);
    cfg.sampler = cmd.sampler.params();
    cfg.flow = cmd.flow.params();
    cfg.stat = cmd.stat;
    cfg.max_dim = cmd.max_dim;
    cfg.sampling = cmd.sampling;
    cfg.seed = cmd.seed;
    cfg.jobs = jobs;
    if let Some(p) = &cmd.annotations {
        cfg.annotations = Some(qa_eval::load_annotations(p, &cfg.taxonomy).map_err(config_err)?);
    }
    cfg.validate().map_err(config_err)?;

    let report = audit::audit(&cfg)?;
    if let Some(p) = &cmd.out {
        write_output(Some(p), &(report.to_json() + "\n"))?;
    }
    if cmd.jsonl.is_some() || cmd.out.is_none() {
        write_output(cmd.jsonl.as_deref(), &report.to_jsonl())?;
    }
    if let Some(p) = &cmd.predictions_out {
        let lines: String = report
            .predictions()
            .iter()
            .map(|r| serde_json::to_string(r).map(|s| s + "\n"))
            .collect::<Result<_, _>>()?;
        write_output(Some(p), &lines)?;
    }
    if let Some(e) = &report.eval {
        eprint!("{}", e.to_table());
    }
    for v in report.videos.iter().filter(|v| v.error.is_some()) {
        log::error!("{}: {}", v.video_id, v.error.as_deref().unwrap_or_default());
    }
    if let Some(e) = &report.eval_error {
        log::error!("evaluation: {e}");
    }
    Ok(if report.errors > 0 || report.eval_error.is_some() {
        EXIT_PARTIAL
    } else {
        0
    })
}

fn run(cli: Cli) -> anyhow::Result<u8> {
    if cli.jobs == Some(0) {
        return Err(config_err(anyhow!("--jobs must be >= 1")));
    }
    if let Some(j) = cli.jobs {
        std::env::set_var("RAYON_NUM_THREADS", j.to_string());
    }
    match cli.command {
        Command::Flow(c) => run_flow(c),
        Command::Score(c) => run_score(c),
        Command::Sample(c) => run_sample(c),
        Command::Synth(c) => run_synth(c),
        Command::QaGen(c) => run_qa_gen(c),
        Command::Evaluate(c) => run_evaluate(c),
        Command::Audit(c) => run_audit(c, cli.jobs.unwrap_or(1)),
    }
}

fn main() -> ExitCode {
    let args = match expand_config(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::new().parse_filters(&cli.log_level).init();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
