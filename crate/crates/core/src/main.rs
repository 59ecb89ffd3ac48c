use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use domainness::adaptation::fit_second_order;
use domainness::classifier::{train_multiclass, LinearModel, MulticlassModel};
use domainness::extractor::{serve_fex0, BuiltinExtractor, Extractor, SubprocessExtractor};
use domainness::fusion::{evaluate_fused, DescriptorSet, SecondOrderAdapter};
use domainness::levels::Level;
use domainness::manifest::parse_manifest;
use domainness::occlusion::{Fill, Weighting};
use domainness::pipeline::{
    analyze, compute_levels, compute_maps, extract_all, load_set, match_maps, read_levels, read_maps, run_pipeline,
    single_domain, train_domain, with_jobs, write_evaluation, write_levels, write_maps, DomainSummary, LoadedImage,
    PipelineConfig, Renderings, Side,
};
use domainness::synth::{generate, Shift, SynthConfig};
use domainness::{Error, FeatureVector};

const ENV_EXTRACTOR: &str = "DOMAINNESS_EXTRACTOR";

/// Domainness maps: where in an image does domain shift live?
#[derive(Parser)]
#[command(name = "domainness", version)]
struct Cli {
    /// Worker threads (outputs do not depend on it).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// FEX0 extractor command line, or `builtin`. Defaults to $DOMAINNESS_EXTRACTOR, then builtin.
    #[arg(long, global = true)]
    extractor: Option<String>,

    /// Seconds to wait for each extractor reply.
    #[arg(long, global = true, default_value_t = 30)]
    extractor_timeout: u64,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic two-domain dataset with masks.
    Synth(SynthArgs),
    /// Train the binary domain discriminator.
    TrainDomain(TrainDomainArgs),
    /// Build domainness maps for a manifest.
    Map(MapArgs),
    /// Mean domainness inside vs. outside object masks.
    Analyze(AnalyzeArgs),
    /// Low/mid/high domainness descriptors.
    Levels(LevelsArgs),
    /// Train a one-vs-rest object classifier on cached descriptors.
    TrainObject(TrainObjectArgs),
    /// Fit a second-order alignment between descriptor sets.
    Adapt(AdaptArgs),
    /// Full accuracy table and fused predictions from cached descriptors.
    Evaluate(EvaluateArgs),
    /// All stages for a source/target manifest pair.
    Pipeline(PipelineArgs),
    /// Serve the built-in extractor over FEX0 on stdin/stdout.
    ServeBuiltin,
}

/// Settings shared by the stages. Flags override `--config`, which
/// overrides the defaults.
#[derive(Args, Default)]
struct Settings {
    /// JSON file with pipeline settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Canonical image side.
    #[arg(long)]
    side: Option<usize>,
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
    /// Occluder colour: auto | r,g,b
    #[arg(long)]
    fill: Option<String>,
    /// none | abs-w
    #[arg(long)]
    weighting: Option<String>,
    /// Share of each domain used to train the discriminator.
    #[arg(long)]
    train_fraction: Option<f64>,
    #[arg(long)]
    crop: Option<usize>,
    /// Overlay threshold for low-domainness graying.
    #[arg(long)]
    threshold: Option<f32>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    l2: Option<f64>,
    /// Alignment ridge, relative to the mean eigenvalue.
    #[arg(long)]
    eps: Option<f64>,
}

impl Settings {
    fn resolve(&self) -> Result<PipelineConfig, Failure> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Failure::Data(format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| Failure::Data(format!("{}: {e}", p.display())))?
            }
            None => PipelineConfig::default(),
        };
        macro_rules! set {
            ($flag:ident => $($field:ident).+) => {
                if let Some(v) = self.$flag {
                    cfg.$($field).+ = v;
                }
            };
        }
        set!(seed => seed);
        set!(side => side);
        set!(patch => patch);
        set!(stride => stride);
        set!(train_fraction => domain_train_fraction);
        set!(crop => crop);
        set!(threshold => overlay_threshold);
        set!(epochs => train.epochs);
        set!(learning_rate => train.learning_rate);
        set!(l2 => train.l2_lambda);
        set!(eps => adapt_eps);
        if let Some(f) = &self.fill {
            cfg.fill = match f.parse::<Fill>().map_err(usage)? {
                Fill::Auto => None,
                Fill::Rgb(rgb) => Some(rgb),
            };
        }
        if let Some(w) = &self.weighting {
            cfg.weighting = w.parse::<Weighting>().map_err(usage)?;
        }
        cfg.validate().map_err(usage)?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    classes: usize,
    #[arg(long, default_value_t = 100)]
    per_domain: usize,
    /// background | foreground | both
    #[arg(long, default_value = "both")]
    shift: String,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 256)]
    side: usize,
}

#[derive(Args)]
struct TrainDomainArgs {
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    tgt: PathBuf,
    /// Model file; a JSON summary is written next to it.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    settings: Settings,
}

#[derive(Args)]
struct MapArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Write a grayscale heatmap PNG per map.
    #[arg(long)]
    heatmap: bool,
    /// Write an overlay PNG per map.
    #[arg(long)]
    overlay: bool,
    #[command(flatten)]
    settings: Settings,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Repeat together with --maps, once per domain.
    #[arg(long, required = true)]
    manifest: Vec<PathBuf>,
    #[arg(long, required = true)]
    maps: Vec<PathBuf>,
    /// Report path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    settings: Settings,
}

#[derive(Args)]
struct LevelsArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    maps: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// src | tgt; selects the seed stream.
    #[arg(long, default_value = "src")]
    role: String,
    #[arg(long, default_value_t = 0)]
    repeat: usize,
    #[command(flatten)]
    settings: Settings,
}

#[derive(Args)]
struct TrainObjectArgs {
    /// Directory written by `levels`.
    #[arg(long)]
    levels: PathBuf,
    /// L | M | H | G (whole image)
    #[arg(long)]
    level: String,
    /// Optional alignment applied to the descriptors before training.
    #[arg(long)]
    transform: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    settings: Settings,
}

#[derive(Args)]
struct AdaptArgs {
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    tgt: PathBuf,
    /// L | M | H | G
    #[arg(long, default_value = "G")]
    src_level: String,
    #[arg(long, default_value = "G")]
    tgt_level: String,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    settings: Settings,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    tgt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Pair label in the report.
    #[arg(long, default_value = "src->tgt")]
    pair: String,
    #[command(flatten)]
    settings: Settings,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    tgt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Recompute every stage even when cached outputs match.
    #[arg(long)]
    force: bool,
    #[arg(long)]
    repeats: Option<usize>,
    /// Write heatmap and overlay PNGs next to the maps.
    #[arg(long)]
    heatmaps: bool,
    #[command(flatten)]
    settings: Settings,
}

enum Failure {
    Usage(String),
    Data(String),
    Extractor(String),
}

fn usage(e: Error) -> Failure {
    Failure::Usage(e.to_string())
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Extractor(_) => Failure::Extractor(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let jobs = cli.jobs;
    match with_jobs(jobs, || run(cli)).map_err(Failure::from).and_then(|r| r) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Extractor(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}

fn open_extractor(cli: &Cli) -> Result<Box<dyn Extractor>, Failure> {
    let cmd = cli.extractor.clone().or_else(|| std::env::var(ENV_EXTRACTOR).ok());
    match cmd.as_deref().map(str::trim) {
        None | Some("") | Some("builtin") => Ok(Box::new(BuiltinExtractor::new())),
        Some(cmd) => {
            let workers = cli.jobs.unwrap_or_else(rayon::current_num_threads);
            info!("spawning {workers} extractor process(es): {cmd}");
            let ext = SubprocessExtractor::spawn(cmd, workers, Duration::from_secs(cli.extractor_timeout))?;
            Ok(Box::new(ext))
        }
    }
}

fn run(cli: Cli) -> Outcome {
    match &cli.command {
        Command::Synth(a) => synth(a),
        Command::TrainDomain(a) => train_domain_cmd(&cli, a),
        Command::Map(a) => map_cmd(&cli, a),
        Command::Analyze(a) => analyze_cmd(a),
        Command::Levels(a) => levels_cmd(&cli, a),
        Command::TrainObject(a) => train_object_cmd(a),
        Command::Adapt(a) => adapt_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Pipeline(a) => pipeline_cmd(&cli, a),
        Command::ServeBuiltin => {
            let ext = BuiltinExtractor::new();
            serve_fex0(&ext, &mut io::stdin().lock(), &mut io::stdout().lock())?;
            Ok(())
        }
    }
}

fn synth(a: &SynthArgs) -> Outcome {
    let cfg = SynthConfig {
        classes: a.classes,
        per_domain: a.per_domain,
        shift: a.shift.parse::<Shift>().map_err(usage)?,
        seed: a.seed,
        side: a.side,
    };
    cfg.validate().map_err(usage)?;
    let m = generate(&cfg, &a.out)?;
    info!("wrote {} images to {}", m.entries.len(), a.out.display());
    Ok(())
}

fn sidecar(model: &Path) -> PathBuf {
    model.with_extension("json")
}

fn write_text(path: &Path, text: &str) -> Outcome {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::Data(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, text).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn load_manifest_set(path: &Path, side: usize) -> Result<(String, Vec<LoadedImage>), Failure> {
    let m = parse_manifest(path)?;
    let domain = single_domain(&m, &path.display().to_string())?;
    Ok((domain, load_set(&m, side)?))
}

fn train_domain_cmd(cli: &Cli, a: &TrainDomainArgs) -> Outcome {
    let cfg = a.settings.resolve()?;
    let ext = open_extractor(cli)?;
    let (da, ia) = load_manifest_set(&a.src, cfg.side)?;
    let (db, ib) = load_manifest_set(&a.tgt, cfg.side)?;
    let (fa, fb) = (extract_all(&ia, ext.as_ref())?, extract_all(&ib, ext.as_ref())?);
    let stage = train_domain([(&da, &ia, &fa), (&db, &ib, &fb)], &cfg)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::Data(format!("{}: {e}", dir.display())))?;
    }
    stage.model.save(&a.out)?;
    write_text(&sidecar(&a.out), &(serde_json::to_string_pretty(&stage.summary).unwrap() + "\n"))?;
    if let Some(acc) = stage.summary.heldout_accuracy {
        info!("held-out domain accuracy {:.3}", acc);
    }
    Ok(())
}

/// Explicit `--fill` wins; otherwise the model's sidecar, otherwise the
/// mean colour of the images being mapped.
fn resolve_fill(cfg: &PipelineConfig, model: &Path, images: &[LoadedImage]) -> [f32; 3] {
    if let Some(f) = cfg.fill {
        return f;
    }
    if let Ok(text) = fs::read_to_string(sidecar(model)) {
        if let Ok(s) = serde_json::from_str::<DomainSummary>(&text) {
            return s.fill;
        }
        warn!("ignoring unreadable model summary {}", sidecar(model).display());
    }
    let mut sum = [0.0f64; 3];
    for i in images {
        let m = i.image.channel_means();
        for c in 0..3 {
            sum[c] += m[c];
        }
    }
    sum.map(|s| (s / images.len().max(1) as f64) as f32)
}

fn map_cmd(cli: &Cli, a: &MapArgs) -> Outcome {
    let cfg = a.settings.resolve()?;
    let ext = open_extractor(cli)?;
    let model = LinearModel::load(&a.model)?;
    let images = load_set(&parse_manifest(&a.manifest)?, cfg.side)?;
    let map_cfg = cfg.map_config(resolve_fill(&cfg, &a.model, &images));
    let maps = compute_maps(&images, ext.as_ref(), &model, &map_cfg)?;
    let render = Renderings {
        heatmap: a.heatmap,
        overlay: a.overlay,
        threshold: cfg.overlay_threshold,
    };
    write_maps(&a.out, &images, &maps, render)?;
    info!("wrote {} maps to {}", maps.len(), a.out.display());
    Ok(())
}

fn analyze_cmd(a: &AnalyzeArgs) -> Outcome {
    let cfg = a.settings.resolve()?;
    cfg.check_crop().map_err(usage)?;
    if a.manifest.len() != a.maps.len() {
        return Err(Failure::Usage("give one --maps directory per --manifest".into()));
    }
    let mut images = Vec::new();
    let mut maps = Vec::new();
    let mut domains = Vec::new();
    for (m, d) in a.manifest.iter().zip(&a.maps) {
        let manifest = parse_manifest(m)?;
        let set = load_set(&manifest, cfg.side)?;
        maps.extend(match_maps(&set, read_maps(d)?)?);
        domains.extend(manifest.domains().into_iter().map(String::from));
        images.extend(set);
    }
    let report = analyze(&domains.join("->"), &images, &maps, cfg.crop)?;
    let text = serde_json::to_string_pretty(&report).unwrap() + "\n";
    match &a.out {
        Some(p) => write_text(p, &text),
        None => io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| Failure::Data(format!("stdout: {e}"))),
    }
}

fn levels_cmd(cli: &Cli, a: &LevelsArgs) -> Outcome {
    let cfg = a.settings.resolve()?;
    let role = match a.role.as_str() {
        "src" => Side::Src,
        "tgt" => Side::Tgt,
        other => return Err(Failure::Usage(format!("unknown role `{other}` (src|tgt)"))),
    };
    let ext = open_extractor(cli)?;
    let images = load_set(&parse_manifest(&a.manifest)?, cfg.side)?;
    let maps = match_maps(&images, read_maps(&a.maps)?)?;
    let global = extract_all(&images, ext.as_ref())?;
    let set = compute_levels(&images, &maps, global, ext.as_ref(), cfg.seed, role, a.repeat)?;
    write_levels(&a.out, &set)?;
    Ok(())
}

fn select(set: &DescriptorSet, level: &str) -> Result<Vec<FeatureVector>, Failure> {
    if level == "G" {
        return Ok(set.global.clone());
    }
    let l: Level = level.parse().map_err(usage)?;
    Ok(set.levels[l.index()].clone())
}

fn train_object_cmd(a: &TrainObjectArgs) -> Outcome {
    let cfg = a.settings.resolve()?;
    let set = read_levels(&a.levels)?;
    let mut features = select(&set, &a.level)?;
    if let Some(t) = &a.transform {
        let tf = domainness::adaptation::AlignmentTransform::load(t)?;
        features = features.iter().map(|f| tf.apply(f)).collect::<Result<_, _>>()?;
    }
    let labels: Vec<&str> = set
        .classes
        .iter()
        .zip(&set.paths)
        .map(|(c, p)| c.as_deref().ok_or_else(|| Failure::Data(format!("{p} has no class label"))))
        .collect::<Result<_, _>>()?;
    let model: MulticlassModel = train_multiclass(&features, &labels, &cfg.train)?;
    model.save(&a.out)?;
    Ok(())
}

fn adapt_cmd(a: &AdaptArgs) -> Outcome {
    let cfg = a.settings.resolve()?;
    let src = select(&read_levels(&a.src)?, &a.src_level)?;
    let tgt = select(&read_levels(&a.tgt)?, &a.tgt_level)?;
    fit_second_order(&src, &tgt, cfg.adapt_eps)?.save(&a.out)?;
    Ok(())
}

fn evaluate_cmd(a: &EvaluateArgs) -> Outcome {
    let cfg = a.settings.resolve()?;
    let src = read_levels(&a.src)?;
    let tgt = read_levels(&a.tgt)?;
    let eval = evaluate_fused(&a.pair, &src, &tgt, &SecondOrderAdapter { eps: cfg.adapt_eps }, &cfg.train)?;
    fs::create_dir_all(&a.out).map_err(|e| Failure::Data(format!("{}: {e}", a.out.display())))?;
    write_evaluation(&a.out, &eval.report, &eval)?;
    Ok(())
}

fn pipeline_cmd(cli: &Cli, a: &PipelineArgs) -> Outcome {
    let mut cfg = a.settings.resolve()?;
    if let Some(r) = a.repeats {
        cfg.repeats = r;
    }
    if a.heatmaps {
        cfg.heatmaps = true;
    }
    cfg.validate().map_err(usage)?;
    cfg.check_crop().map_err(usage)?;
    let ext = open_extractor(cli)?;
    let out = run_pipeline(&a.src, &a.tgt, &a.out, &cfg, ext.as_ref(), a.force)?;
    if !out.reused.is_empty() {
        info!("reused cached stages: {}", out.reused.join(", "));
    }
    for row in &out.report.rows {
        match row.accuracy {
            Some(acc) => info!("{:<16} {:.3}", row.name, acc),
            None => info!("{:<16} n/a", row.name),
        }
    }
    Ok(())
}
