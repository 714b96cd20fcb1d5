//! `earthmatch` command-line entry point.
//!
//! Exit codes: 0 success (or a localized query), 2 no confident prediction,
//! 1 any error including bad flags.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use earthmatch::bench::{emit_report, load_manifest, run_benchmark, ManifestCandidate, ReportFormat};
use earthmatch::bridge::create_matcher;
use earthmatch::calibrate::{
    calibrate_from_run, read_outcomes_csv, write_outcomes_csv, CalibratedConfig, LabeledOutcome, ThresholdFile,
};
use earthmatch::engine::{localize, EngineConfig, QueryImage, QueryMetadata, RunMode, Status};
use earthmatch::geo::TileGeom;
use earthmatch::raster::{Image, Neighbor};
use earthmatch::synth::{make_negative, make_pair, write_manifest, write_pair, SynthSpec};
use serde::Deserialize;

#[derive(Parser)]
#[command(
    name = "earthmatch",
    version,
    about = "Footprint estimation of oblique photographs against ranked satellite tiles"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Localize one query image against a candidate list.
    Localize(LocalizeArgs),
    /// Run a benchmark manifest and report the centerpoint metric.
    Bench(BenchArgs),
    /// Derive the inlier threshold from labeled outcomes.
    Calibrate(CalibrateArgs),
    /// Generate a synthetic benchmark dataset.
    SynthGen(SynthArgs),
}

#[derive(Args, Clone)]
struct EngineFlags {
    /// Matcher id: `builtin`, an executable path, or a name in $EARTHMATCH_BRIDGE_PATH.
    #[arg(long, default_value = "builtin")]
    matcher: String,
    /// Canonical square side in pixels.
    #[arg(long, default_value_t = 768)]
    image_side: u32,
    /// Keypoint budget per image.
    #[arg(long, default_value_t = 2048)]
    max_keypoints: usize,
    /// Root seed for every random choice.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Threshold JSON written by `calibrate`.
    #[arg(long)]
    threshold_file: Option<PathBuf>,
    /// Candidate processing mode.
    #[arg(long, value_enum, default_value_t = Mode::FirstAccept)]
    mode: Mode,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    FirstAccept,
    ExhaustAll,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Json,
    Csv,
}

#[derive(Args)]
struct LocalizeArgs {
    /// Query image (PNG or JPEG).
    #[arg(long)]
    query: PathBuf,
    /// JSON file `{"candidates": [...]}` in the manifest candidate schema.
    #[arg(long)]
    candidates: PathBuf,
    #[command(flatten)]
    engine: EngineFlags,
    /// Also write the result JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Benchmark manifest JSON.
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    engine: EngineFlags,
    /// Report format.
    #[arg(long, value_enum, default_value_t = Format::Table)]
    format: Format,
    /// Parallel query workers, each with its own matcher.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Write the report here (stdout then shows the summary table).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write labeled outcomes for `calibrate` here.
    #[arg(long)]
    outcomes: Option<PathBuf>,
}

#[derive(Args)]
struct CalibrateArgs {
    /// CSV with columns query_id, candidate_rank, inlier_count, is_true_positive.
    #[arg(long)]
    outcomes: PathBuf,
    /// Matcher the outcomes were produced with.
    #[arg(long, default_value = "builtin")]
    matcher: String,
    #[arg(long, default_value_t = 768)]
    image_side: u32,
    #[arg(long, default_value_t = 2048)]
    max_keypoints: usize,
    /// Also write the threshold JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Number of positive pairs.
    #[arg(long, default_value_t = 10)]
    n: usize,
    /// Number of zero-overlap negative pairs.
    #[arg(long, default_value_t = 0)]
    negatives: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = SynthSpec::default().base_side)]
    base_side: u32,
    #[arg(long, default_value_t = SynthSpec::default().rotation_range_deg)]
    rotation_range: f64,
    #[arg(long, default_value_t = SynthSpec::default().scale_range.0)]
    scale_min: f64,
    #[arg(long, default_value_t = SynthSpec::default().scale_range.1)]
    scale_max: f64,
    #[arg(long, default_value_t = SynthSpec::default().perspective_jitter)]
    perspective_jitter: f64,
    #[arg(long, default_value_t = SynthSpec::default().max_offset)]
    max_offset: f64,
    #[arg(long, default_value_t = SynthSpec::default().noise_sigma)]
    noise_sigma: f64,
}

type Fallible<T> = Result<T, String>;

fn engine_config(f: &EngineFlags) -> Fallible<EngineConfig> {
    let mut cfg = EngineConfig {
        matcher: f.matcher.clone(),
        ..EngineConfig::default()
    };
    cfg.matcher_cfg.image_side = f.image_side;
    cfg.matcher_cfg.max_keypoints = f.max_keypoints;
    if let Some(p) = &f.threshold_file {
        let tf = ThresholdFile::load(p).map_err(|e| e.to_string())?;
        let here = CalibratedConfig {
            image_side: f.image_side,
            max_keypoints: f.max_keypoints,
        };
        if tf.matcher != f.matcher || tf.config != here {
            eprintln!(
                "warning: threshold calibrated for {} at {:?}, running {} at {:?}",
                tf.matcher, tf.config, f.matcher, here
            );
        }
        cfg.inlier_threshold = tf.decision.t_inl.map(|t| t as usize);
    }
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

fn run_mode(m: Mode) -> RunMode {
    match m {
        Mode::FirstAccept => RunMode::FirstAccept,
        Mode::ExhaustAll => RunMode::ExhaustAll,
    }
}

fn write_file(path: &Path, text: &str) -> Fallible<()> {
    std::fs::write(path, text).map_err(|e| format!("{}: {e}", path.display()))
}

#[derive(Deserialize)]
struct CandidateList {
    candidates: Vec<ManifestCandidate>,
}

fn cmd_localize(a: &LocalizeArgs) -> Fallible<ExitCode> {
    let cfg = engine_config(&a.engine)?;
    let image = Image::load(&a.query).map_err(|e| e.to_string())?;
    let text = std::fs::read_to_string(&a.candidates).map_err(|e| format!("{}: {e}", a.candidates.display()))?;
    let list: CandidateList = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", a.candidates.display()))?;
    let base = a.candidates.parent().unwrap_or(Path::new(""));
    let mut tiles = Vec::new();
    for c in &list.candidates {
        let load = |p: &Path| Image::load(&base.join(p)).map_err(|e| e.to_string());
        let img = load(&c.image_path)?;
        let geom = TileGeom::new(c.footprint, img.width(), img.height())
            .map_err(|e| format!("candidate rank {}: {e}", c.rank))?;
        let mut neighbors: [Option<Image>; 8] = Default::default();
        for (k, p) in &c.neighbors {
            let n = Neighbor::from_name(k).ok_or_else(|| format!("unknown neighbor key {k:?}"))?;
            neighbors[n.index()] = Some(load(p)?);
        }
        tiles.push(earthmatch::engine::CandidateTile {
            image: img,
            geom,
            neighbors,
            rank: c.rank,
        });
    }
    let id = a
        .query
        .file_stem()
        .map_or("query".into(), |s| s.to_string_lossy().into_owned());
    let query = QueryImage {
        id,
        image,
        metadata: QueryMetadata::default(),
    };
    let mut matcher = create_matcher(&cfg.matcher).map_err(|e| e.to_string())?;
    let result = localize(
        matcher.as_mut(),
        &query,
        &tiles,
        &cfg,
        run_mode(a.engine.mode),
        a.engine.seed,
    )
    .map_err(|e| e.to_string())?;
    let json = serde_json::to_string_pretty(&result).expect("result serializes") + "\n";
    print!("{json}");
    if let Some(out) = &a.out {
        write_file(out, &json)?;
    }
    Ok(if result.status == Status::Localized {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    })
}

fn cmd_bench(a: &BenchArgs) -> Fallible<ExitCode> {
    let cfg = engine_config(&a.engine)?;
    let manifest = load_manifest(&a.manifest).map_err(|e| e.to_string())?;
    let id = cfg.matcher.clone();
    let factory = move || create_matcher(&id);
    let report = run_benchmark(
        &manifest,
        &cfg,
        run_mode(a.engine.mode),
        a.engine.seed,
        a.workers,
        &factory,
    )
    .map_err(|e| e.to_string())?;
    let format = match a.format {
        Format::Table => ReportFormat::Table,
        Format::Json => ReportFormat::Json,
        Format::Csv => ReportFormat::Csv,
    };
    let rendered = emit_report(&report, format);
    match &a.out {
        Some(out) => {
            write_file(out, &rendered)?;
            print!("{}", emit_report(&report, ReportFormat::Table));
        }
        None => print!("{rendered}"),
    }
    if let Some(p) = &a.outcomes {
        let f = std::fs::File::create(p).map_err(|e| format!("{}: {e}", p.display()))?;
        write_outcomes_csv(&report.outcome_rows(), f).map_err(|e| format!("{}: {e}", p.display()))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_calibrate(a: &CalibrateArgs) -> Fallible<ExitCode> {
    let rows = read_outcomes_csv(&a.outcomes).map_err(|e| e.to_string())?;
    let outcomes: Vec<LabeledOutcome> = rows.iter().map(LabeledOutcome::from).collect();
    let decision = calibrate_from_run(&outcomes).map_err(|e| e.to_string())?;
    let tf = ThresholdFile {
        matcher: a.matcher.clone(),
        config: CalibratedConfig {
            image_side: a.image_side,
            max_keypoints: a.max_keypoints,
        },
        decision,
    };
    let json = serde_json::to_string_pretty(&tf).expect("threshold serializes") + "\n";
    print!("{json}");
    if let Some(out) = &a.out {
        write_file(out, &json)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_synth_gen(a: &SynthArgs) -> Fallible<ExitCode> {
    let spec = SynthSpec {
        base_side: a.base_side,
        rotation_range_deg: a.rotation_range,
        scale_range: (a.scale_min, a.scale_max),
        perspective_jitter: a.perspective_jitter,
        max_offset: a.max_offset,
        noise_sigma: a.noise_sigma,
        seed: a.seed,
        flat_texture: false,
    };
    spec.validate().map_err(|e| e.to_string())?;
    std::fs::create_dir_all(&a.out).map_err(|e| format!("{}: {e}", a.out.display()))?;
    // Pairs are written as they are generated; full-size pairs with their
    // neighbor tiles are too large to hold in memory by the hundred.
    let mut queries = Vec::with_capacity(a.n + a.negatives);
    for i in 0..a.n as u64 {
        let pair = make_pair(&spec.with_seed(a.seed.wrapping_add(i))).map_err(|e| e.to_string())?;
        queries.push(write_pair(&pair, &a.out).map_err(|e| e.to_string())?);
    }
    for j in 0..a.negatives as u64 {
        let pair = make_negative(&spec, a.seed.wrapping_add(j)).map_err(|e| e.to_string())?;
        queries.push(write_pair(&pair, &a.out).map_err(|e| e.to_string())?);
    }
    let path = write_manifest(queries, &a.out).map_err(|e| e.to_string())?;
    println!("{}", path.display());
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::FAILURE
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let r = match &cli.command {
        Command::Localize(a) => cmd_localize(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::SynthGen(a) => cmd_synth_gen(a),
    };
    r.unwrap_or_else(|e| {
        eprintln!("error: {e}");
        ExitCode::FAILURE
    })
}
