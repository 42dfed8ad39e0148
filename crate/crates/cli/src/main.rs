//! `reconnet`: dataset construction, training, fine-tuning, reconstruction,
//! evaluation and benchmarking from the command line.
//!
//! Exit codes: 0 success, 2 input error, 3 numerical divergence, 64 usage
//! error.

// `!(x > 0.0)` style guards deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity)]

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "reconnet", version, about = "ReconNet block compressive sensing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Variant {
    Euc,
    EucAdv,
    EucLearnphi,
    EucAdvLearnphi,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Euc => "euc",
            Variant::EucAdv => "euc-adv",
            Variant::EucLearnphi => "euc-learnphi",
            Variant::EucAdvLearnphi => "euc-adv-learnphi",
        }
    }

    pub fn adversarial(self) -> bool {
        matches!(self, Variant::EucAdv | Variant::EucAdvLearnphi)
    }

    pub fn learns_phi(self) -> bool {
        matches!(self, Variant::EucLearnphi | Variant::EucAdvLearnphi)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FcInitArg {
    /// Gaussian weights.
    Random,
    /// W = Φᵀ.
    Phit,
    /// Train both and keep the lower validation loss.
    Select,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OptimizerArg {
    Sgd,
    Adam,
}

#[derive(clap::Args, Debug, Clone)]
pub struct OptArgs {
    /// Mini-batch size.
    #[arg(long, default_value_t = 128, value_parser = clap::value_parser!(u64).range(1..))]
    pub batch: u64,
    /// Optimizer for Euclidean training.
    #[arg(long, value_enum, default_value_t = OptimizerArg::Sgd)]
    pub optimizer: OptimizerArg,
    /// Learning rate [default: 1e-6 for sgd, 1e-3 for adam].
    #[arg(long)]
    pub lr: Option<f64>,
    /// Momentum of SGD.
    #[arg(long, default_value_t = reconnet::training::DEFAULT_MOMENTUM)]
    pub momentum: f64,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Extract 33×33 luminance patches from every image in a directory.
    MakeDataset {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 14, value_parser = clap::value_parser!(u64).range(1..))]
        stride: u64,
        #[arg(long, default_value_t = 0.1)]
        val_frac: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a ReconNet variant and write a checkpoint with its Φ.
    Train {
        #[arg(long, value_enum)]
        variant: Variant,
        #[arg(long)]
        mr: f64,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Replace the FC first stage by this many circulant layers.
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        circulant: Option<u64>,
        #[arg(long, default_value_t = 1000)]
        iters: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = FcInitArg::Select)]
        fc_init: FcInitArg,
        /// Pick the learning rate from a fixed grid by validation loss.
        #[arg(long)]
        lr_search: bool,
        #[command(flatten)]
        opt: OptArgs,
        /// Weight of the adversarial term.
        #[arg(long, default_value_t = 1e-4)]
        lambda_adv: f64,
        /// Weight of the reconstruction term.
        #[arg(long, default_value_t = 1.0)]
        lambda_rec: f64,
        /// Generator updates per discriminator update.
        #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u64).range(1..))]
        g_steps: u64,
        /// Discriminator learning rate.
        #[arg(long, default_value_t = 1e-5)]
        lr_d: f64,
        /// Loss-history CSV [default: <out>.loss.csv].
        #[arg(long)]
        loss_csv: Option<PathBuf>,
    },
    /// Retrain only the FC layer of a checkpoint for a new Φ.
    FinetuneFc {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        mr: f64,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        iters: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        opt: OptArgs,
        #[arg(long)]
        loss_csv: Option<PathBuf>,
    },
    /// Sense, reconstruct and stitch one image.
    Reconstruct {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Measurement noise standard deviation on the 0–255 scale.
        #[arg(long, default_value_t = 0.0)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// PSNR sweep over models, test images and noise levels.
    Eval {
        #[arg(long, num_args = 1.., required = true)]
        models: Vec<PathBuf>,
        #[arg(long)]
        testdir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 10.0, 20.0, 30.0])]
        sigmas: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Median forward-phase time for one side×side image.
    Bench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 256, value_parser = clap::value_parser!(u64).range(1..))]
        side: u64,
        #[arg(long, default_value_t = 11, value_parser = clap::value_parser!(u64).range(3..))]
        repeats: u64,
    },
    /// Write deterministic synthetic grayscale scenes as PGM files.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
        count: u64,
        #[arg(long, default_value_t = 256, value_parser = clap::value_parser!(u64).range(1..))]
        side: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { commands::EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::MakeDataset {
            images,
            out,
            stride,
            val_frac,
            seed,
        } => commands::make_dataset(&images, &out, stride as usize, val_frac, seed),
        Command::Train {
            variant,
            mr,
            dataset,
            out,
            circulant,
            iters,
            seed,
            fc_init,
            lr_search,
            opt,
            lambda_adv,
            lambda_rec,
            g_steps,
            lr_d,
            loss_csv,
        } => commands::train(commands::TrainArgs {
            variant,
            mr,
            dataset,
            out,
            circulant: circulant.map(|g| g as usize),
            iters: iters as usize,
            seed,
            fc_init,
            lr_search,
            opt,
            lambda_adv,
            lambda_rec,
            g_steps: g_steps as usize,
            lr_d,
            loss_csv,
        }),
        Command::FinetuneFc {
            base,
            mr,
            dataset,
            out,
            iters,
            seed,
            opt,
            loss_csv,
        } => commands::finetune(&base, mr, &dataset, &out, iters as usize, seed, &opt, loss_csv),
        Command::Reconstruct {
            model,
            input,
            output,
            sigma,
            seed,
        } => commands::reconstruct(&model, &input, &output, sigma, seed),
        Command::Eval {
            models,
            testdir,
            out,
            sigmas,
            seed,
        } => commands::eval(&models, &testdir, &out, &sigmas, seed),
        Command::Bench { model, side, repeats } => commands::bench(&model, side as usize, repeats as usize),
        Command::Synth { out, count, side, seed } => commands::synth(&out, count, side as usize, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
