use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dlf::config::{KvMap, TrainConfig, Variant};
use dlf::dataset::Dataset;
use dlf::error::{DlfError, Result};
use dlf::eval::{evaluate, mean_point, points_csv, report_markdown, RdCurve};
use dlf::imageio::{read_image, write_atomic, write_image};
use dlf::network::Model;
use dlf::params::Checkpoint;
use dlf::training::Trainer;
use dlf_core::BitContainer;

#[derive(Parser)]
#[command(name = "dlf", version, about = "Dual-branch extreme image codec")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Compress a PNG/PPM image into a container.
    Encode {
        input: PathBuf,
        /// Semantic tokens kept per window (no_detail checkpoints only).
        #[arg(long)]
        tokens: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Reconstruct an image from a container.
    Decode {
        input: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run the training stage named in the config.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Rate-distortion report over the test split; one checkpoint per point.
    Eval {
        /// Label of the curve in the report.
        #[arg(long, default_value = "model")]
        label: String,
        #[command(flatten)]
        common: Common,
    },
}

fn one_checkpoint(common: &Common) -> Result<Model> {
    match common.checkpoint.as_slice() {
        [path] => load_model(path),
        _ => Err(DlfError::InvalidInput("exactly one --checkpoint is required".into())),
    }
}

fn load_model(path: &Path) -> Result<Model> {
    Model::from_checkpoint(&Checkpoint::read(path, &candle_core::Device::Cpu)?)
}

fn out_path(common: &Common) -> Result<&Path> {
    common
        .out
        .as_deref()
        .ok_or_else(|| DlfError::InvalidInput("--out is required".into()))
}

fn train_config(common: &Common) -> Result<TrainConfig> {
    let text = match &common.config {
        Some(p) => std::fs::read_to_string(p).map_err(|e| DlfError::io(p, e))?,
        None => String::new(),
    };
    let mut kv = KvMap::parse(&text)?;
    if let Some(v) = common.variant {
        kv.set("variant", v);
    }
    if let Some(s) = common.seed {
        kv.set("seed", s);
    }
    if let Some(o) = &common.out {
        kv.set("out_dir", o.display());
    }
    let cfg = TrainConfig::from_kv(&mut kv)?;
    kv.finish()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Encode { input, tokens, common } => {
            let model = one_checkpoint(&common)?;
            let img = read_image(&input)?;
            let c = model.encode_image(&img, tokens.unwrap_or(model.cfg.tokens_per_window))?;
            let bytes = c.to_bytes()?;
            write_atomic(out_path(&common)?, &bytes)?;
            println!(
                "{} bytes, {:.5} bpp",
                bytes.len(),
                dlf::eval::compute_bpp(&c)
            );
        }
        Command::Decode { input, common } => {
            let model = one_checkpoint(&common)?;
            let bytes = std::fs::read(&input).map_err(|e| DlfError::io(&input, e))?;
            let img = model.decode_container(&BitContainer::from_bytes(&bytes)?)?;
            write_image(out_path(&common)?, &img)?;
        }
        Command::Train { common } => {
            let cfg = train_config(&common)?;
            print!("{}", cfg.to_kv());
            let data = Dataset::load(&cfg.data)?;
            let mut trainer = Trainer::new(cfg)?;
            let total = trainer.total_steps();
            trainer.run(&data, |r| {
                if r.step % 50 == 0 || r.step + 1 == total {
                    eprintln!(
                        "step {} {} total {:.5} distortion {:.5} bpp {:.5}",
                        r.step, r.phase, r.total, r.distortion, r.bpp
                    );
                }
            })?;
            println!("{}", dlf::training::checkpoint_path(&trainer.cfg).display());
        }
        Command::Eval { label, common } => {
            let cfg = train_config(&common)?;
            let data = Dataset::load(&cfg.data)?;
            let images = if data.test.is_empty() { &data.train } else { &data.test };
            if common.checkpoint.is_empty() {
                return Err(DlfError::InvalidInput("at least one --checkpoint is required".into()));
            }
            let mut points = Vec::new();
            for path in &common.checkpoint {
                let model = load_model(path)?;
                let t = model.cfg.tokens_per_window;
                // A semantic-only model traces its curve by token truncation.
                let kept: Vec<usize> = if model.cfg.variant == Variant::NoDetail {
                    (1..=4).map(|q| t * q / 4).filter(|&k| k > 0).collect()
                } else {
                    vec![t]
                };
                for k in kept {
                    let results = evaluate(&model, images, k, common.workers)?;
                    points.push(mean_point(
                        format!("lambda{}-tokens{k}", model.cfg.lambda_index),
                        &results,
                    ));
                }
            }
            let curves = [RdCurve { label, points }];
            let out = common.out.clone().unwrap_or_else(|| PathBuf::from("."));
            write_atomic(&out.join("points.csv"), points_csv(&curves).as_bytes())?;
            let md = report_markdown(&curves);
            write_atomic(&out.join("report.md"), md.as_bytes())?;
            print!("{md}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dlf: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
