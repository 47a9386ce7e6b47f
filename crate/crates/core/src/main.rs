use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use wsdet::config::{ModelConfig, RunConfig};
use wsdet::dataset::Dataset;
use wsdet::error::{Error, Result};
use wsdet::metrics::{MatchCriterion, DEFAULT_BIN_MM};
use wsdet::model::Detector;
use wsdet::phantom::{self, PhantomConfig};
use wsdet::pipeline::{self, Condition, Subset};
use wsdet::postprocess::DecisionLogic;
use wsdet::preprocess::FrameMode;
use wsdet::unet::SPATIAL_MULTIPLE;
use wsdet::{checkpoint, train};

#[derive(Parser)]
#[command(
    name = "wsdet",
    version,
    about = "Weakly supervised single-target detection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum CriterionArg {
    Iou,
    Distance,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset.
    GenPhantom {
        #[arg(long, default_value_t = 5)]
        subjects: usize,
        #[arg(long, default_value_t = 400)]
        frames: usize,
        /// Square frame side in pixels, a multiple of 16.
        #[arg(long, default_value_t = 96)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.1)]
        mm_per_pixel: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a config file with every default filled in.
    InitConfig {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train backbone, calibrate betas, train the classifier.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// `split.csv` from a training run; needed unless `--subset all`.
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long, default_value = "all")]
        subset: String,
        #[arg(long, value_enum, default_value_t = CriterionArg::Iou)]
        criterion: CriterionArg,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        #[arg(long, default_value_t = 2.5)]
        mm: f64,
        /// Overrides the checkpoint's decision logic.
        #[arg(long)]
        logic: Option<DecisionLogic>,
        #[arg(long, default_value_t = DEFAULT_BIN_MM)]
        bin_mm: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Detect in a directory of PGM frames.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Skip writing overlay images.
        #[arg(long)]
        no_overlay: bool,
    },
    /// Per-frame latency of the full pipeline.
    Bench {
        /// Trained checkpoint; a freshly initialized model otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 192)]
        size: usize,
        /// Used without a checkpoint.
        #[arg(long, default_value_t = 1.0)]
        channel_scale: f64,
        #[arg(long, default_value_t = 20)]
        iterations: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate one model per condition.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Training-split fractions, e.g. `0.2,0.5,1`.
        #[arg(long, value_delimiter = ',')]
        subsets: Vec<f64>,
        /// One fold per held-out sequence.
        #[arg(long)]
        loso: bool,
        /// Compare single- and three-frame inputs.
        #[arg(long)]
        frame_modes: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::GenPhantom {
            subjects,
            frames,
            size,
            seed,
            mm_per_pixel,
            out,
        } => {
            if size == 0 || size % SPATIAL_MULTIPLE != 0 {
                return Err(Error::Config(format!(
                    "--size must be a positive multiple of {SPATIAL_MULTIPLE}, got {size}"
                )));
            }
            let mut cfg = PhantomConfig::new(subjects, frames, size, size, seed);
            cfg.mm_per_pixel = mm_per_pixel;
            cfg.validate()?;
            let manifest = phantom::generate(&cfg, &out)?;
            println!("{}", manifest.display());
        }
        Command::InitConfig { out } => {
            RunConfig::default().save(&out)?;
            println!("{}", out.display());
        }
        Command::Train { config } => {
            let cfg = RunConfig::load(&config)?;
            if cfg.train.threads > 0 {
                // ignore the error when a global pool already exists
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(cfg.train.threads)
                    .build_global();
            }
            let (outcome, files) = train::run(&cfg)?;
            for w in &outcome.warnings {
                eprintln!("warning: {w}");
            }
            println!("best epoch: {}", outcome.best_epoch);
            println!("checkpoint: {}", files.checkpoint.display());
            println!("log: {}", files.log.display());
        }
        Command::Eval {
            checkpoint: ckpt,
            data,
            split,
            subset,
            criterion,
            iou,
            mm,
            logic,
            bin_mm,
            out,
        } => {
            let det = pipeline::with_logic(&checkpoint::load(&ckpt)?, logic);
            let ds = Dataset::load(&data)?;
            let subset: Subset = subset.parse()?;
            let refs = match (&split, subset) {
                (_, Subset::All) => ds.frame_refs(),
                (Some(p), s) => pipeline::read_split(p, &ds, s)?,
                (None, _) => {
                    return Err(Error::Config(
                        "--subset other than all needs --split".into(),
                    ))
                }
            };
            let criterion = match criterion {
                CriterionArg::Iou => MatchCriterion::iou(iou),
                CriterionArg::Distance => MatchCriterion::distance(mm),
            };
            let (report, records) = pipeline::evaluate(&det, &ds, &refs, &criterion)?;
            pipeline::write_eval(&out, &report, &records, bin_mm)?;
            print!("{}", report.summary());
        }
        Command::Infer {
            checkpoint: ckpt,
            input,
            out,
            no_overlay,
        } => {
            let det = checkpoint::load(&ckpt)?;
            let res = pipeline::infer(&det, &input, &out, !no_overlay)?;
            println!(
                "{} frames, {} skipped",
                res.records.len(),
                res.skipped.len()
            );
            if !res.skipped.is_empty() {
                return Ok(ExitCode::from(2));
            }
        }
        Command::Bench {
            checkpoint: ckpt,
            size,
            channel_scale,
            iterations,
            out,
        } => {
            if size == 0 || size % SPATIAL_MULTIPLE != 0 {
                return Err(Error::Config(format!(
                    "--size must be a positive multiple of {SPATIAL_MULTIPLE}, got {size}"
                )));
            }
            let mut det = match ckpt {
                Some(p) => checkpoint::load(&p)?,
                None => {
                    let model = ModelConfig {
                        channel_scale,
                        ..ModelConfig::default()
                    };
                    Detector::new(
                        model,
                        [size, size],
                        FrameMode::Three,
                        &mut ChaCha8Rng::seed_from_u64(0),
                    )?
                }
            };
            // the network is fully convolutional up to the pooled head
            det.image_size = [size, size];
            let report = pipeline::bench(&det, iterations, 0)?;
            let text = report.to_toml();
            if let Some(p) = out {
                std::fs::write(&p, &text).map_err(|e| Error::io(&p, e))?;
            }
            print!("{text}");
        }
        Command::Ablate {
            config,
            subsets,
            loso,
            frame_modes,
            out,
        } => {
            let cfg = RunConfig::load(&config)?;
            let ds = Dataset::load(&cfg.data.path)?;
            let mut conditions: Vec<Condition> =
                subsets.into_iter().map(Condition::Subset).collect();
            if loso {
                conditions.extend((0..ds.sequences.len()).map(Condition::Fold));
            }
            if frame_modes {
                conditions.extend([
                    Condition::Frames(FrameMode::Single),
                    Condition::Frames(FrameMode::Three),
                ]);
            }
            if conditions.is_empty() {
                return Err(Error::Config(
                    "choose --subsets, --loso or --frame-modes".into(),
                ));
            }
            let rows =
                pipeline::ablation_run(&cfg, &ds, &conditions, |r| println!("{}", r.csv_row()))?;
            pipeline::write_ablation(&out, &rows)?;
        }
    }
    Ok(ExitCode::SUCCESS)
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
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
