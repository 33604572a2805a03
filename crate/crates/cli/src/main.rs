use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use heartseg::pipeline::{self, PipelineConfig, SegmentMethod};
use heartseg::Error;

#[derive(Parser)]
#[command(name = "heartseg", version, about = "Heart-sound segmentation and classification")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Dotted-key configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set hmm.n_mix=8`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Worker threads across manifest entries (0 = all cores).
    #[arg(long, default_value_t = 0, global = true)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Resample recordings to the working rate and copy them as CSV.
    Ingest {
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Ingest plus band-pass filtering, spike removal and normalization.
    Preprocess {
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the segmenter or the classifier bank on the training split.
    Train {
        manifest: PathBuf,
        #[arg(long, value_enum)]
        target: Target,
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment the test split and score it against any annotations.
    Segment {
        manifest: PathBuf,
        #[arg(long, value_enum)]
        method: Option<Method>,
        /// Directory holding a trained segmenter; trained on the fly if absent.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Classify beats and recordings of the test split.
    Classify {
        manifest: PathBuf,
        /// Add the X-Factor class and report the weighted metrics.
        #[arg(long)]
        xfactor: bool,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score saved segmentations against the manifest's annotations.
    Evaluate {
        manifest: PathBuf,
        /// Directory of `<id>.seg.csv` files.
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write synthetic heart-like recordings with annotations and a manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Target {
    Segmenter,
    Classifier,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Skf,
    Sks,
    SkfViterbi,
}

impl From<Method> for SegmentMethod {
    fn from(m: Method) -> Self {
        match m {
            Method::Skf => SegmentMethod::Skf,
            Method::Sks => SegmentMethod::Sks,
            Method::SkfViterbi => SegmentMethod::SkfViterbi,
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } => 1,
        e if e.is_numerical() => 3,
        _ => 2,
    }
}

fn run(cli: Cli) -> heartseg::Result<String> {
    let mut cfg = PipelineConfig::load(cli.common.config.as_deref(), &cli.common.overrides)?;
    match cli.command {
        Command::Ingest { manifest, out } => pipeline::cmd_ingest(&manifest, &cfg, &out),
        Command::Preprocess { manifest, out } => pipeline::cmd_preprocess(&manifest, &cfg, &out),
        Command::Train { manifest, target: Target::Segmenter, out } => pipeline::cmd_train_segmenter(&manifest, &cfg, &out),
        Command::Train { manifest, target: Target::Classifier, out } => pipeline::cmd_train_classifier(&manifest, &cfg, &out),
        Command::Segment { manifest, method, model, out } => {
            if let Some(m) = method {
                cfg.segment.method = m.into();
            }
            let method = cfg.segment.method;
            pipeline::cmd_segment(&manifest, &cfg, method, model.as_deref(), &out).map(|o| o.summary)
        }
        Command::Classify { manifest, xfactor, model, out } => {
            cfg.classify.xfactor |= xfactor;
            pipeline::cmd_classify(&manifest, &cfg, model.as_deref(), &out).map(|o| o.summary)
        }
        Command::Evaluate { manifest, predictions, out } => pipeline::cmd_evaluate(&manifest, &predictions, &cfg, &out),
        Command::Synth { out } => pipeline::cmd_synth(&cfg, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if cli.common.jobs > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.common.jobs).build_global() {
            log::warn!("could not size the worker pool: {e}");
        }
    }
    match run(cli) {
        Ok(summary) => {
            print!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
