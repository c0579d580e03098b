//! `ciisod` command-line driver.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "ciisod", version, about = "Salient object detection with shared cross-scale interactors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Preset {
    /// ResNet-18 at 352x352, 32 epochs.
    Paper,
    /// Tiny encoder at 64x64, 20 epochs.
    Desk,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Stage {
    /// Encoder outputs.
    Before,
    /// Interactor outputs.
    After,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic image/mask dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 256)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a preset training config as JSON.
    InitConfig {
        #[arg(long, value_enum, default_value = "desk")]
        preset: Preset,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes CKPT, CKPT.best, CKPT.log.csv and CKPT.epochs.csv.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Validation dataset; without it the last `--holdout` fraction of
        /// the training data is held out.
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long, default_value_t = 0.2)]
        holdout: f64,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config epoch count.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score a checkpoint or a directory of predicted maps.
    Eval {
        #[arg(long, conflicts_with = "preds", required_unless_present = "preds")]
        ckpt: Option<PathBuf>,
        /// Directory of `<id>.pgm` maps named after the dataset images.
        #[arg(long)]
        preds: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        pr: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        /// Pool pixel counts over the dataset instead of averaging per image.
        #[arg(long)]
        pooled: bool,
    },
    /// Write the saliency map of one image.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate every interactor configuration of the ablation matrix.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        /// JSON array of rows; defaults to the 4 sharing rows and 5 interactor rows.
        #[arg(long)]
        rows: Option<PathBuf>,
        /// Base training config; defaults to the desk preset.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long, default_value_t = 0.2)]
        holdout: f64,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, default_value = "ablation.csv")]
        out: PathBuf,
        /// Directory for per-row checkpoints; defaults to OUT's directory.
        #[arg(long)]
        work_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Per-component parameter counts.
    CountParams {
        #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        preset: Option<Preset>,
        /// Use a ResNet-50 encoder with the config's other settings.
        #[arg(long)]
        resnet50: bool,
    },
    /// Analytic FLOPs (2 x multiply-accumulates) per component.
    Flops {
        #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        preset: Option<Preset>,
        #[arg(long, default_value_t = 224)]
        size: usize,
    },
    /// Finite-difference gradient checks in double precision.
    Gradcheck {
        /// One case of the suite; all cases when omitted.
        #[arg(long)]
        module: Option<String>,
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
    /// Bilinear up/down round trips of an image and their differences.
    InterpDemo {
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 4)]
        rate: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Write per-stage feature maps of one image.
    DumpFeatures {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, value_enum, default_value = "after")]
        stage: Stage,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::GenData { out, count, size, seed } => commands::gen_data(&out, count, size, seed),
        Command::InitConfig { preset, out } => commands::init_config(preset, &out),
        Command::Train {
            config,
            data,
            out,
            val,
            holdout,
            seed,
            epochs,
        } => commands::train(&config, &data, &out, val.as_deref(), holdout, seed, epochs),
        Command::Eval {
            ckpt,
            preds,
            data,
            report,
            pr,
            threads,
            pooled,
        } => commands::eval(
            ckpt.as_deref(),
            preds.as_deref(),
            &data,
            report.as_deref(),
            pr.as_deref(),
            threads,
            pooled,
        ),
        Command::Predict { ckpt, image, out } => commands::predict(&ckpt, &image, &out),
        Command::Ablate {
            data,
            rows,
            config,
            val,
            holdout,
            epochs,
            out,
            work_dir,
            threads,
        } => commands::ablate(commands::AblateArgs {
            data: &data,
            rows: rows.as_deref(),
            config: config.as_deref(),
            val: val.as_deref(),
            holdout,
            epochs,
            out: &out,
            work_dir: work_dir.as_deref(),
            threads,
        }),
        Command::CountParams {
            config,
            preset,
            resnet50,
        } => commands::count_params(config.as_deref(), preset, resnet50),
        Command::Flops { config, preset, size } => commands::flops(config.as_deref(), preset, size),
        Command::Gradcheck { module, seeds } => commands::gradcheck(module.as_deref(), seeds),
        Command::InterpDemo { image, rate, out_dir } => commands::interp_demo(&image, rate, &out_dir),
        Command::DumpFeatures {
            ckpt,
            image,
            out_dir,
            stage,
        } => commands::dump_features(&ckpt, &image, &out_dir, stage),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
