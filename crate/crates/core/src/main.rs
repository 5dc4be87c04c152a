use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use log::{info, warn};
use rayon::prelude::*;

use masktext::dataset::{self, BuildOptions, DatasetManifest};
use masktext::metrics::{self, PrecisionMode};
use masktext::numerics::{grad_check, GradCheckConfig, GradOp};
use masktext::overlay::{self, OverlayInput};
use masktext::{AttributeSelection, ScdConfusion};

#[derive(Parser)]
#[command(
    name = "masktext",
    version,
    about = "Turn change-detection masks into text descriptions"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build `<split>.mm.jsonl` and `<split>.report.json` from a dataset config.
    Transcribe {
        config: PathBuf,
        /// Output directory.
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Template-selection seed; overrides `templates.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Attributes to render: `all`, `none` or a list such as `type,category`.
        #[arg(long)]
        attrs: Option<String>,
        /// Stop at the first unreadable entry instead of reporting it.
        #[arg(long)]
        fail_fast: bool,
        /// Worker threads (0 = one per core).
        #[arg(long, default_value_t = 0)]
        jobs: usize,
    },
    /// Decode every mask and check it against the palette and image pairs.
    Validate {
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        jobs: usize,
    },
    /// Print split statistics as JSON.
    Stats {
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        jobs: usize,
    },
    /// Render pre | post | mask composites with grid, centroids and caption.
    Overlay {
        config: PathBuf,
        /// Comma-separated image ids (default: all).
        #[arg(long)]
        ids: Option<String>,
        #[arg(long, default_value = "overlays")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        attrs: Option<String>,
    },
    /// Finite-difference gradient checks; prints a JSON report.
    Losscheck {
        /// Comma-separated operations (default: all).
        #[arg(long)]
        ops: Option<String>,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Score predicted masks against ground truth (matched by file name).
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Number of semantic change classes (labels 1..=N).
        #[arg(long, default_value_t = 1)]
        classes: usize,
        #[arg(long, value_enum, default_value_t = Mode::Scd)]
        mode: Mode,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
        /// Report change-vs-no-change precision/recall instead of class averages.
        #[arg(long)]
        micro: bool,
        #[arg(long, default_value_t = 0)]
        jobs: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Scd,
    Bcd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    /// JSON on stdout, table on stderr.
    Json,
    /// Table on stdout only.
    Table,
}

/// Exit status for a run that completed but found bad data or failed checks.
const DATA_FAILURE: u8 = 2;

fn load(config: &Path, seed: Option<u64>, attrs: Option<&str>) -> anyhow::Result<DatasetManifest> {
    if !config.is_file() {
        return Err(UsageError(format!("config file {} not found", config.display())).into());
    }
    let mut manifest = dataset::load_manifest(config)?;
    if let Some(seed) = seed {
        manifest.seed = seed;
    }
    if let Some(list) = attrs {
        manifest.attrs = AttributeSelection::parse_list(list)?;
    }
    Ok(manifest)
}

#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn print_json<T: serde::Serialize>(value: &T) -> anyhow::Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn transcribe(
    config: &Path,
    out: &Path,
    seed: Option<u64>,
    attrs: Option<&str>,
    fail_fast: bool,
    jobs: usize,
) -> anyhow::Result<u8> {
    let start = Instant::now();
    let manifest = load(config, seed, attrs)?;
    let output = dataset::build_multimodal_dataset(&manifest, BuildOptions { jobs, fail_fast })?;
    let files = dataset::write_dataset(out, &output)?;
    let r = &output.report;
    info!(
        "{} of {} entries transcribed in {:.2}s -> {}",
        r.succeeded,
        r.entries,
        start.elapsed().as_secs_f64(),
        files.jsonl.display()
    );
    for e in &r.errors {
        warn!("{}: {}", e.image_id, e.error);
    }
    Ok(if r.failed > 0 { DATA_FAILURE } else { 0 })
}

fn validate(config: &Path, jobs: usize) -> anyhow::Result<u8> {
    let manifest = load(config, None, None)?;
    let issues = dataset::validate_dataset(&manifest, jobs)?;
    let mut out = std::io::stdout().lock();
    for issue in &issues {
        serde_json::to_writer(&mut out, issue)?;
        writeln!(out)?;
    }
    info!(
        "{} entries checked, {} issues",
        manifest.entries.len(),
        issues.len()
    );
    Ok(if issues.is_empty() { 0 } else { DATA_FAILURE })
}

fn stats(config: &Path, jobs: usize) -> anyhow::Result<u8> {
    let manifest = load(config, None, None)?;
    print_json(&dataset::dataset_stats(&manifest, jobs)?)?;
    Ok(0)
}

fn render_overlays(
    config: &Path,
    ids: Option<&str>,
    out: &Path,
    seed: Option<u64>,
    attrs: Option<&str>,
) -> anyhow::Result<u8> {
    let manifest = load(config, seed, attrs)?;
    let wanted: Option<Vec<&str>> = ids.map(|s| s.split(',').map(str::trim).collect());
    if let Some(wanted) = &wanted {
        for id in wanted {
            if !manifest.entries.iter().any(|e| e.image_id == *id) {
                return Err(UsageError(format!("unknown image id {id:?}")).into());
            }
        }
    }
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let colours: Vec<(u16, [u8; 3])> = manifest
        .palette
        .classes
        .iter()
        .filter_map(|c| c.rgb.map(|rgb| (c.value, rgb)))
        .collect();
    let mut written = 0;
    for entry in &manifest.entries {
        if wanted
            .as_ref()
            .is_some_and(|w| !w.contains(&entry.image_id.as_str()))
        {
            continue;
        }
        let mask = dataset::read_mask(&entry.mask, &manifest.palette)?;
        let (quads, _, description) = dataset::describe_mask(
            &entry.image_id,
            &mask,
            &manifest.thresholds,
            &manifest.attrs,
            manifest.seed,
        );
        let centroids: Vec<_> = quads
            .iter()
            .map(|(i, q)| (*i, q.location, q.centroid))
            .collect();
        let composite = overlay::render_overlay(&OverlayInput {
            mask: &mask,
            pre: entry.pre_image.as_deref(),
            post: entry.post_image.as_deref(),
            class_colours: &colours,
            centroids: &centroids,
            caption: &description,
        })?;
        let path = out.join(format!("{}.png", entry.image_id));
        overlay::save_overlay(&composite, &path)?;
        written += 1;
    }
    info!("{written} overlays written to {}", out.display());
    Ok(0)
}

fn losscheck(
    ops: Option<&str>,
    trials: usize,
    tolerance: f64,
    step: f64,
    seed: u64,
) -> anyhow::Result<u8> {
    let ops: Vec<GradOp> = match ops {
        None => GradOp::ALL.to_vec(),
        Some(list) => list
            .split(',')
            .map(|s| s.trim().parse::<GradOp>())
            .collect::<Result<_, _>>()
            .map_err(|e| UsageError(e.to_string()))?,
    };
    if trials == 0 || step.is_nan() || step <= 0.0 || tolerance.is_nan() || tolerance <= 0.0 {
        return Err(UsageError("trials, step and tolerance must be positive".into()).into());
    }
    let cfg = GradCheckConfig {
        trials,
        tolerance,
        step,
        seed,
        ..GradCheckConfig::default()
    };
    let start = Instant::now();
    let reports = ops
        .iter()
        .map(|&op| grad_check(op, &cfg))
        .collect::<Result<Vec<_>, _>>()?;
    print_json(&reports)?;
    let failed: Vec<&str> = reports
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.op.name())
        .collect();
    info!(
        "{} operations checked in {:.2}s",
        reports.len(),
        start.elapsed().as_secs_f64()
    );
    if failed.is_empty() {
        Ok(0)
    } else {
        warn!("gradient check failed for: {}", failed.join(", "));
        Ok(DATA_FAILURE)
    }
}

fn png_files(dir: &Path) -> anyhow::Result<Vec<String>> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.to_ascii_lowercase().ends_with(".png"))
        .collect();
    names.sort();
    Ok(names)
}

fn score_pair(
    pred: &Path,
    gt: &Path,
    name: &str,
    mode: Mode,
    n_classes: usize,
) -> anyhow::Result<ScdConfusion> {
    let pred_path = pred.join(name);
    if !pred_path.is_file() {
        bail!(masktext::Error::MissingFile(pred_path));
    }
    let (gw, gh, mut g) = dataset::read_label_raster(&gt.join(name))?;
    let (pw, ph, mut p) = dataset::read_label_raster(&pred_path)?;
    if (gw, gh) != (pw, ph) {
        bail!(masktext::Error::ShapeMismatch(format!(
            "{name}: prediction {pw}x{ph} vs ground truth {gw}x{gh}"
        )));
    }
    if let Mode::Bcd = mode {
        g.iter_mut()
            .chain(p.iter_mut())
            .for_each(|v| *v = (*v != 0) as u16);
    }
    let mut conf = ScdConfusion::new(n_classes);
    metrics::accumulate_labels(&p, &g, &mut conf).with_context(|| name.to_string())?;
    Ok(conf)
}

fn eval(args: EvalArgs) -> anyhow::Result<u8> {
    let EvalArgs {
        pred,
        gt,
        classes,
        mode,
        format,
        micro,
        jobs,
    } = args;
    if !pred.is_dir() || !gt.is_dir() {
        return Err(UsageError("--pred and --gt must be directories".into()).into());
    }
    let gt_names = png_files(&gt)?;
    if gt_names.is_empty() {
        return Err(UsageError(format!("no masks in {}", gt.display())).into());
    }
    let n_classes = match mode {
        Mode::Scd if classes == 0 => bail!(UsageError("--classes must be at least 1".into())),
        Mode::Scd => classes,
        Mode::Bcd => 1,
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build()?;
    let parts: Vec<ScdConfusion> = pool.install(|| {
        gt_names
            .par_iter()
            .map(|name| score_pair(&pred, &gt, name, mode, n_classes))
            .collect::<anyhow::Result<_>>()
    })?;
    let mut conf = ScdConfusion::new(n_classes);
    for part in &parts {
        conf.merge(part)?;
    }

    let precision = if micro {
        PrecisionMode::ChangeMicro
    } else {
        PrecisionMode::ClassAveraged
    };
    let (json, table) = match mode {
        Mode::Scd => {
            let m = metrics::scd_metrics(&conf, precision)?;
            (serde_json::to_value(m)?, metrics::format_scd_table(&m))
        }
        Mode::Bcd => {
            let m = metrics::binary_metrics(&conf)?;
            (serde_json::to_value(m)?, metrics::format_binary_table(&m))
        }
    };
    match format {
        Format::Json => {
            print_json(&json)?;
            eprint!("{table}");
        }
        Format::Table => print!("{table}"),
    }
    info!("{} mask pairs scored", gt_names.len());
    Ok(0)
}

struct EvalArgs {
    pred: PathBuf,
    gt: PathBuf,
    classes: usize,
    mode: Mode,
    format: Format,
    micro: bool,
    jobs: usize,
}

fn run(cli: Cli) -> anyhow::Result<u8> {
    match cli.command {
        Command::Transcribe {
            config,
            out,
            seed,
            attrs,
            fail_fast,
            jobs,
        } => transcribe(&config, &out, seed, attrs.as_deref(), fail_fast, jobs),
        Command::Validate { config, jobs } => validate(&config, jobs),
        Command::Stats { config, jobs } => stats(&config, jobs),
        Command::Overlay {
            config,
            ids,
            out,
            seed,
            attrs,
        } => render_overlays(&config, ids.as_deref(), &out, seed, attrs.as_deref()),
        Command::Losscheck {
            ops,
            trials,
            tolerance,
            step,
            seed,
        } => losscheck(ops.as_deref(), trials, tolerance, step, seed),
        Command::Eval {
            pred,
            gt,
            classes,
            mode,
            format,
            micro,
            jobs,
        } => eval(EvalArgs {
            pred,
            gt,
            classes,
            mode,
            format,
            micro,
            jobs,
        }),
    }
}

/// Configuration and argument problems exit with 1; problems with the data
/// itself exit with 2.
fn exit_code(err: &anyhow::Error) -> u8 {
    use masktext::Error as E;
    if err.downcast_ref::<UsageError>().is_some() {
        return 1;
    }
    match err.downcast_ref::<E>() {
        Some(
            E::Config(_)
            | E::InvalidThresholds(_)
            | E::InvalidVocabulary(_)
            | E::InvalidWeight(_)
            | E::UnknownOp(_)
            | E::NonPositiveTau(_),
        ) => 1,
        _ => DATA_FAILURE,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
