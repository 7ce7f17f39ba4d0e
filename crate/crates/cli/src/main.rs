use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use omg_fuser::app::{self, EvalArgs, ExpandArgs, GenDataArgs, InferArgs, Settings, TrainArgs};
use omg_fuser::error::Error;
use omg_fuser::train::ExpandMode;

#[derive(Parser)]
#[command(name = "omg-fuser", version, about = "Object-guided fusion of forensic signals for forgery localization")]
struct Cli {
    /// Seed for every random draw.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Single-threaded, reproducible numerics.
    #[arg(long, global = true)]
    deterministic: bool,
    /// JSON file with `data`, `model` and `train` sections; flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    Fidelity,
    Tiny,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    StreamOnly,
    FineTune,
    Scratch,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic forgery dataset.
    GenData {
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        /// Signal names and target reliabilities, e.g. "a:0.75,b:0.65".
        #[arg(long)]
        profiles: Option<String>,
        #[arg(long)]
        forged_ratio: Option<f64>,
        /// Image size as HxW.
        #[arg(long)]
        geometry: Option<String>,
        /// Jitter radius applied to instance maps.
        #[arg(long)]
        seg_noise: Option<usize>,
    },
    /// Train a model; writes log.csv, last.omgf and best.omgf.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "desk")]
        preset: Preset,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        p_drop: Option<f64>,
        /// Continue from a checkpoint written with optimizer state.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Comma-separated signal names; all signals by default.
        #[arg(long, value_delimiter = ',')]
        streams: Option<Vec<String>>,
        #[arg(long)]
        quiet: bool,
    },
    /// Score a checkpoint or a baseline on one or more datasets.
    Eval {
        #[arg(long, required = true, num_args = 1..)]
        data: Vec<PathBuf>,
        #[arg(long, conflicts_with = "baseline", required_unless_present = "baseline")]
        checkpoint: Option<PathBuf>,
        /// avg, signal:NAME or oracle.
        #[arg(long)]
        baseline: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
    },
    /// Predict a mask and a score for one sample directory.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write a side-by-side overlay.png.
        #[arg(long)]
        overlay: bool,
    },
    /// Add a signal stream to a trained model.
    Expand {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        stream: String,
        #[arg(long, value_enum, default_value = "stream-only")]
        mode: Mode,
        /// Epochs of the original run; read from the checkpoint by default.
        #[arg(long)]
        base_epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        quiet: bool,
    },
    /// Verify the mask builder and gradients.
    Check {
        /// Mask oracle and three gradient probes only.
        #[arg(long)]
        quick: bool,
        /// Corrupt one op's backward pass, e.g. layer_norm.
        #[arg(long)]
        inject_fault: Option<String>,
    },
}

fn run(cli: Cli) -> Result<bool, Error> {
    let mut s = Settings { seed: cli.seed, deterministic: cli.deterministic, config: None };
    if let Some(p) = &cli.config {
        s.load_config(p)?;
    }
    match cli.cmd {
        Cmd::GenData { count, out, profiles, forged_ratio, geometry, seg_noise } => {
            let geometry = geometry.as_deref().map(app::parse_geometry).transpose()?;
            let m = app::gen_data(&s, &GenDataArgs { count, out: out.clone(), profiles, forged_ratio, geometry, seg_noise })?;
            println!("wrote {} samples ({}x{}, signals {}) to {}", m.count, m.height, m.width, m.signals.join(","), out.display());
        }
        Cmd::Train { data, preset, epochs, p_drop, resume, out, lr, batch_size, streams, quiet } => {
            let preset = match preset {
                Preset::Desk => "desk",
                Preset::Fidelity => "fidelity",
                Preset::Tiny => "tiny",
            };
            let o = app::train(&s, &TrainArgs { data, preset: preset.into(), epochs, p_drop, resume, out, lr, batch_size, streams, quiet })?;
            println!(
                "trained {} epochs; best val pixel-F1 {} at epoch {}; checkpoints in {}",
                o.epochs,
                o.best_val_f1.map_or("n/a".into(), |f| format!("{f:.4}")),
                o.best_epoch.map_or("n/a".into(), |e| e.to_string()),
                o.files.dir.display()
            );
        }
        Cmd::Eval { data, checkpoint, baseline, out, batch_size } => {
            let r = app::eval(&s, &EvalArgs { data, checkpoint, baseline, out, batch_size })?;
            println!("{}", serde_json::to_string_pretty(&serde_json::json!({ "method": r.method, "datasets": r.datasets, "overall": r.overall }))?);
        }
        Cmd::Infer { checkpoint, input, out, overlay } => {
            let r = app::infer(&s, &InferArgs { checkpoint, input, out, overlay })?;
            println!("{}", serde_json::to_string(&r)?);
        }
        Cmd::Expand { checkpoint, data, stream, mode, base_epochs, out, quiet } => {
            let mode = match mode {
                Mode::StreamOnly => ExpandMode::StreamOnly,
                Mode::FineTune => ExpandMode::FineTune,
                Mode::Scratch => ExpandMode::FromScratch,
            };
            let o = app::expand(&s, &ExpandArgs { checkpoint, data, stream, mode, base_epochs, out, quiet })?;
            println!(
                "expanded in {} of {} base epochs, {} parameters carried over; checkpoints in {}",
                o.epochs,
                o.base_epochs,
                o.copied,
                o.files.dir.display()
            );
        }
        Cmd::Check { quick, inject_fault } => {
            let r = app::check(&s, quick, inject_fault.as_deref())?;
            print!("{r}");
            return Ok(r.passed());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
