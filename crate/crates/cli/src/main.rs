use std::path::PathBuf;

use anyhow::Result;
use auxcount::config::{check_device, RunConfig};
use auxcount::synth::{make_synthetic, SynthConfig};
use auxcount::{evaluate, predict, train};
use auxcount_core::annotation::Split;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "auxcount", version, about = "Crowd counting with auxiliary segmentation tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dotted overrides such as `optim.lr=0.001`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Score a checkpoint on a manifest split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Manifest to use instead of the one stored in the checkpoint.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Writes the report as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict density maps for every image in a directory.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic dataset with a manifest.
    Synth {
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        count_min: usize,
        #[arg(long, default_value_t = 50)]
        count_max: usize,
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long, default_value_t = 0.0)]
        val_fraction: f64,
    },
}

fn run(cli: Cli) -> Result<()> {
    check_device()?;
    match cli.command {
        Command::Train { config, set } => {
            let config = RunConfig::load(&config, &set)?;
            let out = train::train::<f32>(&config)?;
            if let Some(last) = out.history.last() {
                println!("final epoch {}: loss {:.5}", last.epoch, last.loss_total);
            }
            if let Some(b) = out.best_val_mae {
                println!("best val MAE {b:.3}");
            }
            if let Some(p) = out.best_checkpoint.or(out.last_checkpoint) {
                println!("checkpoint {}", p.display());
            }
        }
        Command::Eval { ckpt, split, manifest, out } => {
            let report = evaluate::evaluate(&ckpt, split, manifest.as_deref())?;
            println!("{}", report.table());
            if let Some(p) = out {
                report.save(&p)?;
            }
        }
        Command::Predict { ckpt, images, out } => {
            let rows = predict::predict(&ckpt, &images, &out)?;
            for r in rows {
                println!("{}\t{:.2}", r.image_id, r.count);
            }
        }
        Command::Synth { n, seed, out, count_min, count_max, size, val_fraction } => {
            let cfg = SynthConfig { n, seed, count_min, count_max, size, val_fraction, ..Default::default() };
            let m = make_synthetic(&cfg, &out)?;
            println!("wrote {} scenes to {}", m.len(), out.join("manifest.jsonl").display());
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
