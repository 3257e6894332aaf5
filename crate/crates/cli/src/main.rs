//! `facesr`: corpus generation, training, inference, evaluation, ablation
//! sweeps and gradient checks.
//!
//! Settings resolve in order: built-in defaults (or `--paper-scale`), the
//! `--config` file, `--set key=value` pairs, then command flags.
//! Exit codes: 0 success, 2 usage, 3 data, 4 numerical failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "facesr", version, about = "Prior-guided face super-resolution")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Start from full-size defaults (128 x 128 outputs, batch 14).
    #[arg(long, global = true)]
    pub paper_scale: bool,
    /// Flat JSON config with dotted keys.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set net.base_channels=32`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a synthetic face corpus.
    GenData(GenData),
    /// Train a generator (and discriminator in fsrgan mode).
    Train(Train),
    /// Super-resolve one image with a checkpoint.
    Infer(Infer),
    /// Score checkpoints or baselines on a corpus split.
    Eval(Eval),
    /// Run a named ablation sweep over several seeds.
    Ablate(Ablate),
    /// Finite-difference gradient checks of every op and network piece.
    Gradcheck(Gradcheck),
}

#[derive(Args, Debug)]
pub struct GenData {
    /// Output directory (default: data.corpus).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_test: Option<usize>,
    #[arg(long)]
    pub hr: Option<usize>,
    #[arg(long)]
    pub scale: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Parsing channel grouping: global5, global4, local9 or global10.
    #[arg(long)]
    pub layout: Option<String>,
    /// Replace an existing corpus.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct Train {
    /// Corpus directory (default: data.corpus).
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Run directory (default: out_dir).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// fsrnet, fsrgan, baseline_v1, baseline_v2, gt_prior or gt_prior_baseline.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub gamma_c: Option<f64>,
    #[arg(long)]
    pub gamma_p: Option<f64>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Initialize the generator from this checkpoint (directory or generator file).
    #[arg(long)]
    pub warm_start: Option<PathBuf>,
    /// Continue from a checkpoint directory of the same run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Print a loss line every N steps (0 = quiet).
    #[arg(long, default_value_t = 50)]
    pub log_every: u64,
}

#[derive(Args, Debug)]
pub struct Infer {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// PPM image, either low-resolution or already upscaled to hr x hr.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Average over the eight flips and rotations of the input.
    #[arg(long)]
    pub tta: bool,
}

#[derive(Args, Debug)]
pub struct Eval {
    /// Corpus directory (default: data.corpus).
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, conflicts_with_all = ["baseline", "compare"])]
    pub checkpoint: Option<PathBuf>,
    /// Checkpoint-free estimator: bicubic or target.
    #[arg(long, conflicts_with = "compare")]
    pub baseline: Option<String>,
    /// Several checkpoints scored into one table keyed by run name.
    #[arg(long, num_args = 1..)]
    pub compare: Vec<PathBuf>,
    #[arg(long)]
    pub tta: bool,
    /// Write `{id}_grid.ppm` panels (bicubic | coarse | fine | target) here.
    #[arg(long)]
    pub grids: Option<PathBuf>,
    /// Report file (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct Ablate {
    /// priors, supervision, hourglass or gt-prior.
    #[arg(long)]
    pub sweep: String,
    /// Number of seeds; seeds run 1..=N.
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Directory for runs and the sweep report (default: out_dir).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<u64>,
}

#[derive(Args, Debug)]
pub struct Gradcheck {
    /// 64-bit mode, tolerance 1e-6.
    #[arg(long)]
    pub f64: bool,
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    /// Restrict to these cases (default: all).
    #[arg(long = "case")]
    pub cases: Vec<String>,
    /// Write the result table as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
    /// Corrupt one op's backward rule to exercise the checker.
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.global.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot size the thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    match commands::dispatch(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
