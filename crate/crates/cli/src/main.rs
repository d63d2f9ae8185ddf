use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use roadscan::audit::{format_table, run_suite, AuditOptions, Suite};
use roadscan::data::{gen_synthetic_dataset, load_dataset_directory, DatasetListing};
use roadscan::evaluation::{classify_image, plot_svg, write_curves};
use roadscan::imaging::read_image;
use roadscan::network::{load_checkpoint, save_checkpoint, PRESETS};
use roadscan::pipeline::{evaluate_pipeline, model_gallery, train_pipeline, ModelMeta};
use roadscan::training::{preprocess_image, InputMode, TrainConfig};
use roadscan::Error;

const SEED_VAR: &str = "ROADSCAN_SEED";

#[derive(Parser)]
#[command(name = "roadscan", version, about = "Pothole verification with Siamese embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Raw,
    Otsu,
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    Gradcheck,
    Otsu,
    Metrics,
    Pairs,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset in the normal/ + potholes/ layout
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        per_class: usize,
        #[arg(long, default_value_t = 64)]
        side: usize,
        /// Defaults to $ROADSCAN_SEED, then 42
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model and save a checkpoint
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        input_mode: Option<ModeArg>,
        #[arg(long)]
        preset: Option<String>,
    },
    /// Evaluate a checkpoint on its test split
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Writes PREFIX_roc.csv, PREFIX_pr.csv and PREFIX_scores.csv
        #[arg(long)]
        curves: PathBuf,
        #[arg(long)]
        plot: Option<PathBuf>,
    },
    /// Classify one image against a reference gallery
    Classify {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        gallery: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, allow_negative_numbers = true)]
        threshold: Option<f64>,
    },
    /// Run the built-in verification suites
    Verify {
        #[arg(long, value_enum, default_value = "all")]
        suite: SuiteArg,
        /// Scale one gradient case's analytic gradient (fault injection)
        #[arg(long, hide = true)]
        perturb_gradient: Option<String>,
    },
}

/// A failure with its exit code.
struct Fail {
    code: u8,
    message: String,
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Io { .. } => 1,
            Error::Divergence { .. } => 3,
            _ => 2,
        };
        Fail {
            code,
            message: e.to_string(),
        }
    }
}

fn io_fail(path: &Path, e: std::io::Error) -> Fail {
    Fail {
        code: 1,
        message: format!("i/o error on {}: {e}", path.display()),
    }
}

#[derive(Serialize)]
struct RunManifest {
    command: &'static str,
    argv: Vec<String>,
    config: Value,
    seed: Option<u64>,
    seed_from_env: bool,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    version: &'static str,
    seconds: f64,
    warnings: Vec<String>,
}

impl RunManifest {
    fn new(command: &'static str) -> Self {
        RunManifest {
            command,
            argv: std::env::args().collect(),
            config: Value::Null,
            seed: None,
            seed_from_env: false,
            inputs: Vec::new(),
            outputs: Vec::new(),
            version: env!("CARGO_PKG_VERSION"),
            seconds: 0.0,
            warnings: Vec::new(),
        }
    }

    fn finish(mut self, started: Instant) -> Self {
        self.seconds = started.elapsed().as_secs_f64();
        self
    }

    fn write(&self, path: &Path) -> Result<(), Fail> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text + "\n").map_err(|e| io_fail(path, e))
    }

    fn to_line(&self) -> String {
        serde_json::to_string(self).expect("manifest serializes")
    }
}

/// `path` with `suffix` appended to its file name.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    path.with_file_name(name)
}

fn env_seed() -> Result<Option<u64>, Fail> {
    match std::env::var(SEED_VAR) {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| Fail {
            code: 2,
            message: format!("{SEED_VAR}={v} is not an unsigned integer"),
        }),
        Err(_) => Ok(None),
    }
}

fn load_listing(dir: &Path, manifest: &mut RunManifest) -> Result<DatasetListing, Fail> {
    let listing = load_dataset_directory(dir)?;
    for (id, msg) in &listing.failures {
        let w = format!("skipped {id}: {msg}");
        eprintln!("warning: {w}");
        manifest.warnings.push(w);
    }
    for w in &listing.warnings {
        eprintln!("warning: {w}");
        manifest.warnings.push(w.clone());
    }
    Ok(listing)
}

fn cmd_synth(out: &Path, per_class: usize, side: usize, seed: Option<u64>) -> Result<(), Fail> {
    let started = Instant::now();
    let mut m = RunManifest::new("synth");
    let env = env_seed()?;
    let seed = match (seed, env) {
        (Some(s), _) => s,
        (None, Some(s)) => {
            m.seed_from_env = true;
            s
        }
        (None, None) => 42,
    };
    let files = gen_synthetic_dataset(per_class, side, seed, out)?;
    m.seed = Some(seed);
    m.config = json!({ "per_class": per_class, "side": side });
    m.outputs = files.iter().map(|f| out.join(f)).collect();
    let path = out.join("manifest.json");
    m.outputs.push(path.clone());
    m.finish(started).write(&path)?;
    println!("wrote {} images to {}", files.len(), out.display());
    Ok(())
}

fn cmd_train(
    data: &Path,
    config: &Path,
    out: &Path,
    input_mode: Option<ModeArg>,
    preset: Option<String>,
) -> Result<(), Fail> {
    let started = Instant::now();
    let mut m = RunManifest::new("train");
    let mut cfg = TrainConfig::load(config)?;
    if let Some(seed) = env_seed()? {
        cfg.seed = seed;
        m.seed_from_env = true;
    }
    if let Some(mode) = input_mode {
        cfg.input_mode = match mode {
            ModeArg::Raw => InputMode::Raw,
            ModeArg::Otsu => InputMode::OtsuBinary,
        };
    }
    if let Some(p) = preset {
        if !PRESETS.contains(&p.as_str()) {
            return Err(Error::UnknownPreset {
                name: p,
                valid: PRESETS.join(", "),
            }
            .into());
        }
        cfg.preset = p;
    }
    let listing = load_listing(data, &mut m)?;
    let outcome = train_pipeline(&listing.samples, &cfg)?;
    save_checkpoint(&outcome.state, out)?;
    let history = sibling(out, ".history.csv");
    outcome.history.write_csv(&history)?;
    let last = outcome.history.epochs.last().expect("at least one epoch");
    println!(
        "trained {} epochs (best {}), final val loss {:.4}; checkpoint {}",
        outcome.history.stopped_epoch,
        outcome.history.best_epoch,
        last.val_loss,
        out.display()
    );
    m.seed = Some(cfg.seed);
    m.config = serde_json::to_value(&cfg).expect("config serializes");
    m.inputs = vec![data.to_path_buf(), config.to_path_buf()];
    let manifest = sibling(out, ".manifest.json");
    m.outputs = vec![out.to_path_buf(), history, manifest.clone()];
    m.finish(started).write(&manifest)
}

fn cmd_eval(model: &Path, data: &Path, report: &Path, curves: &Path, plot: Option<&Path>) -> Result<(), Fail> {
    let started = Instant::now();
    let mut m = RunManifest::new("eval");
    let state = load_checkpoint(model)?;
    let meta = ModelMeta::of(&state)?;
    let listing = load_listing(data, &mut m)?;
    let bundle = evaluate_pipeline(&state, &listing.samples, None)?;
    for w in &bundle.warnings {
        eprintln!("warning: {w}");
        m.warnings.push(w.clone());
    }
    let text = serde_json::to_string_pretty(&bundle.report).expect("report serializes") + "\n";
    std::fs::write(report, text).map_err(|e| io_fail(report, e))?;
    m.outputs.push(report.to_path_buf());
    m.outputs.extend(write_curves(&bundle, curves)?);
    if let Some(p) = plot {
        std::fs::write(p, plot_svg(&bundle)).map_err(|e| io_fail(p, e))?;
        m.outputs.push(p.to_path_buf());
    }
    let r = &bundle.report;
    println!(
        "eer {:.4}  auroc {:.4}  aupr {:.4}  accuracy {:.4}  ({} genuine, {} imposter)",
        r.eer, r.auroc, r.aupr, r.accuracy, r.n_genuine, r.n_imposter
    );
    m.seed = Some(meta.seed);
    m.config = serde_json::to_value(&meta.config).expect("config serializes");
    m.inputs = vec![model.to_path_buf(), data.to_path_buf()];
    let manifest = sibling(report, ".manifest.json");
    m.outputs.push(manifest.clone());
    m.finish(started).write(&manifest)
}

fn cmd_classify(model: &Path, gallery: &Path, image: &Path, threshold: Option<f64>) -> Result<(), Fail> {
    let started = Instant::now();
    let mut m = RunManifest::new("classify");
    let state = load_checkpoint(model)?;
    let meta = ModelMeta::of(&state)?;
    let listing = load_listing(gallery, &mut m)?;
    let refs = model_gallery(&state, &listing.samples)?;
    let img = read_image(image).map_err(|e| match e {
        // an unreadable query is a validation failure, not an environment one
        Error::Io { .. } => Fail {
            code: 2,
            message: e.to_string(),
        },
        other => other.into(),
    })?;
    let input = preprocess_image(&img, meta.config.input_mode, meta.config.image_side)?;
    let threshold = threshold.unwrap_or(meta.eer_threshold);
    let (label, evidence) = classify_image(&state, &refs, &input, meta.config.score_mode, threshold)?;
    println!("{}", json!({ "label": label.as_str(), "evidence": evidence }));
    m.seed = Some(meta.seed);
    m.inputs = vec![model.to_path_buf(), gallery.to_path_buf(), image.to_path_buf()];
    m.config = json!({ "threshold": threshold, "score_mode": meta.config.score_mode });
    eprintln!("manifest: {}", m.finish(started).to_line());
    Ok(())
}

fn cmd_verify(suite: SuiteArg, perturb: Option<String>) -> Result<(), Fail> {
    let started = Instant::now();
    let suite = match suite {
        SuiteArg::Gradcheck => Suite::Gradcheck,
        SuiteArg::Otsu => Suite::Otsu,
        SuiteArg::Metrics => Suite::Metrics,
        SuiteArg::Pairs => Suite::Pairs,
        SuiteArg::All => Suite::All,
    };
    let mut opts = AuditOptions {
        perturb,
        ..AuditOptions::default()
    };
    if let Some(seed) = env_seed()? {
        opts.seed = seed;
    }
    let results = run_suite(suite, &opts)?;
    print!("{}", format_table(&results));
    let mut m = RunManifest::new("verify");
    m.seed = Some(opts.seed);
    m.config = json!({ "suite": suite });
    eprintln!("manifest: {}", m.finish(started).to_line());
    if let Some((r, f)) = results.iter().find_map(|r| r.failure.as_ref().map(|f| (r, f))) {
        return Err(Fail {
            code: 4,
            message: format!("{} / {}: {}\ninputs: {}", r.suite, r.case, f.message, f.inputs),
        });
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Synth {
            out,
            per_class,
            side,
            seed,
        } => cmd_synth(&out, per_class, side, seed),
        Command::Train {
            data,
            config,
            out,
            input_mode,
            preset,
        } => cmd_train(&data, &config, &out, input_mode, preset),
        Command::Eval {
            model,
            data,
            report,
            curves,
            plot,
        } => cmd_eval(&model, &data, &report, &curves, plot.as_deref()),
        Command::Classify {
            model,
            gallery,
            image,
            threshold,
        } => cmd_classify(&model, &gallery, &image, threshold),
        Command::Verify {
            suite,
            perturb_gradient,
        } => cmd_verify(suite, perturb_gradient),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
