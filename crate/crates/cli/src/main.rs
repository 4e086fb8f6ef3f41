use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tivode::error::{Error, Result};
use tivode::shapesdata::Split;
use tivode_cli as cli;

#[derive(Parser)]
#[command(name = "tivode", version, about = "Text-and-image to video with a latent neural ODE")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic moving-shapes dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        samples: usize,
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=cli::MAX_SHAPES as i64))]
        shapes: u8,
        #[arg(long, default_value_t = 8)]
        frames: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// train, val or test; each split draws from its own seed range.
        #[arg(long, default_value = "train")]
        split: String,
    },
    /// Pretrain the VQ-VAE on every frame of a dataset.
    PretrainVqvae {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from the latest epoch checkpoint in --out.
        #[arg(long)]
        resume: bool,
    },
    /// Train the full model (or a baseline, via train.baseline).
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: bool,
    },
    /// Generate frames at arbitrary times from a first frame and a caption.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        /// First frame as a binary PGM.
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        caption: String,
        /// Comma list of increasing times in [0, 1], or fps:<n>.
        #[arg(long)]
        times: String,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Score a checkpoint on a dataset.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Train all three dynamics variants at equal budget and compare them.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Held-out dataset for scoring; defaults to --data.
        #[arg(long)]
        eval_data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData {
            out,
            samples,
            shapes,
            frames,
            size,
            seed,
            split,
        } => {
            let args = cli::GenDataArgs {
                split: Split::parse(&split)?,
                samples,
                shapes: shapes as usize,
                frames,
                size,
                seed,
            };
            let info = cli::gen_data(&out, &args)?;
            print!("{}", info.manifest());
        }
        Command::PretrainVqvae {
            config,
            data,
            out,
            resume,
        } => {
            let cfg = cli::load_config(config.as_deref())?;
            let summary = cli::pretrain(&cfg, &data, &out, resume)?;
            for (i, r) in summary.epoch_recon.iter().enumerate() {
                println!("epoch {i} recon {r:.6}");
            }
            println!("checkpoint {}", summary.checkpoint.display());
        }
        Command::Train {
            config,
            data,
            out,
            resume,
        } => {
            let cfg = cli::load_config(config.as_deref())?;
            let summary = cli::train(&cfg, &data, &out, resume)?;
            println!("steps {}", summary.steps);
            println!("checkpoint {}", summary.checkpoint.display());
        }
        Command::Generate {
            ckpt,
            image,
            caption,
            times,
            out_dir,
        } => {
            for path in cli::generate_to_dir(&ckpt, &image, &caption, &times, &out_dir)? {
                println!("{}", path.display());
            }
        }
        Command::Evaluate { ckpt, data, report } => {
            let r = cli::evaluate(&ckpt, &data, &report)?;
            let all = r.overall();
            println!("ssim {:.6} psnr {:.4} mse {:.6}", all.ssim, all.psnr, all.mse);
        }
        Command::Ablate {
            config,
            data,
            eval_data,
            out,
        } => {
            let cfg = cli::load_config(config.as_deref())?;
            let eval = eval_data.unwrap_or_else(|| data.clone());
            let rows = cli::ablate(&cfg, &data, &eval, &out)?;
            print!("{}", cli::ablation_table(&rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let parsed = match Cli::try_parse() {
        Ok(p) => p,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(parsed.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::NonFiniteLoss { seed, .. } = &e {
                eprintln!("replay with seed={seed}");
            }
            ExitCode::from(cli::exit_code(&e) as u8)
        }
    }
}
