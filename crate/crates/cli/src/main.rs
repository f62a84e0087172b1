use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use actloc_core::cluster::{
    centroid_tensor, cluster_videos, load_features, write_assignments, KChoice, DEFAULT_K_RANGE,
};
use actloc_core::evaluate::cmd_eval;
use actloc_core::metrics::{load_ground_truth, write_metric_records};
use actloc_core::pipeline::{cmd_run, run_videos, RunSummary};
use actloc_core::synth::{make_benchmark_suite, subset_scenes, write_suite, Subset, SuiteManifest};
use actloc_core::tensor::write_stf1;
use actloc_core::{Category, Error, EvalConfig, Mode, Result, RunConfig, CONFIG_ENV};

#[derive(Parser)]
#[command(name = "actloc", version, about = "Streaming action localization from prediction errors")]
struct Cli {
    /// Configuration file (TOML, optionally naming a `preset`).
    #[arg(long, global = true, env = CONFIG_ENV)]
    config: Option<PathBuf>,

    /// Override a configuration value, e.g. `--set energy.k=5`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Stream one video, or every video of a suite, writing frame records.
    Run(RunArgs),
    /// Same as `run` in gaze mode.
    Gaze(RunArgs),
    /// Score stored records against ground truth.
    Eval(EvalArgs),
    /// Write synthetic sequences with ground truth.
    Synth(SynthArgs),
    /// Cluster pooled video features.
    Cluster(ClusterArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Pixmap directory or STF1 video tensor.
    #[arg(long, conflicts_with_all = ["features", "suite"])]
    input: Option<PathBuf>,
    /// Precomputed STF1 feature sequence.
    #[arg(long, conflicts_with = "suite")]
    features: Option<PathBuf>,
    /// Frame records (standard output when omitted).
    #[arg(long, short)]
    output: Option<PathBuf>,
    #[arg(long)]
    saliency: Option<PathBuf>,
    /// Pooled video feature.
    #[arg(long)]
    feature: Option<PathBuf>,
    /// Checkpoint directory written at the end.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Start from the parameters learned in another run's checkpoint.
    #[arg(long)]
    warm_start: Option<PathBuf>,
    #[arg(long)]
    video_id: Option<String>,
    #[arg(long)]
    max_frames: Option<usize>,

    /// Suite index (`suite.json`) to run every sequence of.
    #[arg(long, requires = "out_dir")]
    suite: Option<PathBuf>,
    /// Only sequences of this subset.
    #[arg(long, requires = "suite", value_parser = parse_subset)]
    subset: Option<Subset>,
    /// Directory for per-video outputs of a suite run.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Carry what each video learned into the next one.
    #[arg(long, requires = "suite")]
    continual: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory holding `<video>.jsonl` (and `<video>.saliency.stf1`).
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    ground_truth: PathBuf,
    /// Cluster assignments; detections then take their cluster's label.
    #[arg(long)]
    assignments: Option<PathBuf>,
    /// Also report gaze AUC and angular error.
    #[arg(long)]
    gaze: bool,
    /// Comma-separated overlap thresholds.
    #[arg(long, value_delimiter = ',')]
    sigmas: Option<Vec<f64>>,
    #[arg(long)]
    viewing_distance: Option<f64>,
    #[arg(long)]
    screen_width: Option<f64>,
    /// Metric records (standard output when omitted).
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// The 60-sequence benchmark corpus (default).
    #[arg(long, conflicts_with_all = ["temporal", "subset"])]
    suite: bool,
    /// The 20 sequences with an action interval inside a static clip.
    #[arg(long, conflicts_with = "subset")]
    temporal: bool,
    #[arg(long, value_parser = parse_subset)]
    subset: Option<Subset>,
}

#[derive(Args)]
struct ClusterArgs {
    /// Directory of `<video>.feature.stf1` files.
    #[arg(long)]
    features: PathBuf,
    #[arg(long, conflicts_with = "elbow")]
    k: Option<usize>,
    /// Pick k by the elbow of the inertia curve.
    #[arg(long)]
    elbow: bool,
    /// Inclusive k search range for `--elbow`, as `LO..HI`.
    #[arg(long, value_parser = parse_range)]
    k_range: Option<(usize, usize)>,
    /// Labels for homogeneity; also sets k to the number of classes when
    /// neither `--k` nor `--elbow` is given.
    #[arg(long)]
    ground_truth: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    /// Assignment records (`{"video", "cluster"}` lines).
    #[arg(long)]
    assignments: Option<PathBuf>,
    /// Centroids as a `k × d` STF1 tensor.
    #[arg(long)]
    centroids: Option<PathBuf>,
}

fn parse_subset(s: &str) -> std::result::Result<Subset, String> {
    [Subset::Localization, Subset::Clustering, Subset::Gaze, Subset::Temporal]
        .into_iter()
        .find(|v| v.name() == s)
        .ok_or_else(|| format!("unknown subset {s:?} (localization, clustering, gaze, temporal)"))
}

fn parse_range(s: &str) -> std::result::Result<(usize, usize), String> {
    let (lo, hi) = s.split_once("..").ok_or("expected LO..HI")?;
    let lo = lo.trim().parse().map_err(|e| format!("{e}"))?;
    let hi = hi.trim().parse().map_err(|e| format!("{e}"))?;
    Ok((lo, hi))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::at_path(parent, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::at_path(path, e))?))
}

/// Writes to `path`, or standard output when it is `None`.
fn with_output(path: Option<&Path>, f: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    match path {
        Some(p) => {
            let mut w = create(p)?;
            f(&mut w)?;
            w.flush()?;
        }
        None => {
            let mut out = io::stdout().lock();
            f(&mut out)?;
            out.flush()?;
        }
    }
    Ok(())
}

fn report(summary: &RunSummary) {
    eprintln!(
        "{} frames, {} records, peak state {} bytes",
        summary.frames_consumed, summary.records, summary.peak_footprint
    );
}

fn run(cli: &Cli, args: &RunArgs, mode: Option<Mode>) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    if let Some(m) = mode {
        cfg.mode = m;
    }
    let io = &mut cfg.io;
    let set = |slot: &mut Option<PathBuf>, v: &Option<PathBuf>| {
        if v.is_some() {
            *slot = v.clone();
        }
    };
    set(&mut io.input, &args.input);
    set(&mut io.features_input, &args.features);
    if args.input.is_some() {
        io.features_input = None;
    } else if args.features.is_some() {
        io.input = None;
    }
    set(&mut io.output, &args.output);
    set(&mut io.saliency, &args.saliency);
    set(&mut io.feature, &args.feature);
    set(&mut io.checkpoint, &args.checkpoint);
    set(&mut io.resume, &args.resume);
    set(&mut io.warm_start, &args.warm_start);
    if let Some(n) = args.max_frames {
        io.max_frames = n;
    }
    if let Some(id) = &args.video_id {
        cfg.video_id = id.clone();
    }
    let Some(index) = &args.suite else {
        report(&cmd_run(&cfg)?);
        return Ok(());
    };
    cfg.validate()?;
    let manifest = SuiteManifest::load(index)?;
    let root = index.parent().unwrap_or(Path::new("."));
    let videos: Vec<(String, PathBuf)> = manifest
        .sequences
        .iter()
        .filter(|s| args.subset.is_none_or(|sub| s.subset == sub))
        .map(|s| (s.id.clone(), root.join(&s.frames)))
        .collect();
    if videos.is_empty() {
        return Err(Error::validation("no sequences selected from the suite"));
    }
    let out_dir = args.out_dir.as_deref().expect("clap requires --out-dir");
    for (s, (id, _)) in run_videos(&cfg, &videos, out_dir, args.continual)?.iter().zip(&videos) {
        eprint!("{id}: ");
        report(s);
    }
    Ok(())
}

fn eval(args: &EvalArgs) -> Result<()> {
    let mut cfg = EvalConfig {
        gaze: args.gaze,
        ..EvalConfig::default()
    };
    if let Some(s) = &args.sigmas {
        cfg.sigmas = s.clone();
    }
    if let Some(d) = args.viewing_distance {
        cfg.geometry.viewing_distance = d;
    }
    if let Some(w) = args.screen_width {
        cfg.geometry.screen_width = w;
    }
    let records = cmd_eval(&args.predictions, &args.ground_truth, args.assignments.as_deref(), &cfg)?;
    with_output(args.output.as_deref(), |w| write_metric_records(w, &records))
}

fn synth(args: &SynthArgs) -> Result<()> {
    let manifest = match (args.temporal, args.subset) {
        (true, _) => write_suite(&args.out, &subset_scenes(Subset::Temporal))?,
        (false, Some(s)) => write_suite(&args.out, &subset_scenes(s))?,
        (false, None) => make_benchmark_suite(&args.out)?,
    };
    eprintln!("{} sequences written to {}", manifest.sequences.len(), args.out.display());
    Ok(())
}

fn cluster(args: &ClusterArgs) -> Result<()> {
    let features = load_features(&args.features)?;
    let labels: Option<BTreeMap<String, String>> = match &args.ground_truth {
        Some(p) => {
            let gts = load_ground_truth(p)?;
            let all: BTreeMap<String, String> = gts.into_iter().map(|g| (g.video, g.label)).collect();
            let missing: Vec<&str> = features
                .iter()
                .filter(|f| !all.contains_key(&f.video_id))
                .map(|f| f.video_id.as_str())
                .collect();
            if !missing.is_empty() {
                return Err(Error::validation(format!("no ground truth for videos: {}", missing.join(", "))));
            }
            Some(features.iter().map(|f| (f.video_id.clone(), all[&f.video_id].clone())).collect())
        }
        None => None,
    };
    let choice = match (args.k, args.elbow, &labels) {
        (Some(k), _, _) => KChoice::Fixed(k),
        (None, true, _) => {
            let (lo, hi) = args.k_range.unwrap_or(DEFAULT_K_RANGE);
            KChoice::Elbow(lo, hi)
        }
        (None, false, Some(l)) => {
            let classes: std::collections::BTreeSet<&String> = l.values().collect();
            KChoice::Fixed(classes.len())
        }
        (None, false, None) => return Err(Error::config("give --k, --elbow or --ground-truth")),
    };
    let seeds: Vec<u64> = (0..args.seeds).collect();
    let report = cluster_videos(&features, choice, &seeds, labels.as_ref())?;
    if let Some(p) = &args.assignments {
        let mut w = create(p)?;
        write_assignments(&mut w, &features, &report.best)?;
        w.flush()?;
    }
    if let Some(p) = &args.centroids {
        let mut w = create(p)?;
        write_stf1(&mut w, &centroid_tensor(&report.best)?)?;
        w.flush()?;
    }
    let summary = serde_json::json!({
        "k": report.k,
        "videos": features.len(),
        "seeds": report.runs,
        "median_homogeneity": report.median_homogeneity,
    });
    println!("{summary}");
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e.category() {
        Category::Config => 2,
        Category::Io => 3,
        Category::Validation => 4,
        Category::Internal => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(a) => run(&cli, a, None),
        Command::Gaze(a) => run(&cli, a, Some(Mode::Gaze)),
        Command::Eval(a) => eval(a),
        Command::Synth(a) => synth(a),
        Command::Cluster(a) => cluster(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("actloc: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
