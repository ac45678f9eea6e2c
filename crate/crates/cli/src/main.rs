use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use cvqn::checkpoint::Checkpoint;
use cvqn::codec::{compress, decompress};
use cvqn::config::Config;
use cvqn::controller::{entropy_upper_bound, GroupSpec};
use cvqn::image_io::{read_ppm, read_ppm_dir, write_ppm};
use cvqn::train::{channel_influence_experiment, influence_csv, log_csv, synthetic_dataset, train_with};
use cvqn::verify;

#[derive(Parser)]
#[command(name = "cvqn", version, about = "Channel-level variable quantization image codec")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model on a directory of PPM images.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch CSV log.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Compress a PPM image to a .cvqn bitstream.
    Compress {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decompress a .cvqn bitstream to a PPM image.
    Decompress {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-channel pruning loss over a directory of PPM images.
    AnalyzeChannels {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare the grouped and single-quantizer entropy upper bounds.
    CheckBound {
        /// Group ratios, comma separated.
        #[arg(long = "r", value_delimiter = ',', required = true)]
        ratios: Vec<f64>,
        /// Group quantization levels, comma separated.
        #[arg(long = "q", value_delimiter = ',', required = true)]
        levels: Vec<usize>,
        /// Levels of the single-group reference.
        #[arg(long = "Q")]
        single: usize,
    },
    /// Finite-difference gradient suites.
    GradCheck {
        /// One suite; all when omitted.
        #[arg(long)]
        module: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a config file with every key.
    InitConfig {
        /// Desk-scale model and schedule instead of the full-size defaults.
        #[arg(long)]
        toy: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write seeded synthetic PPM images.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_model(path: &Path) -> Result<cvqn::model::Model> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(ck.model()?)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.cmd {
        Cmd::Train { config, data, out, log } => {
            let text = fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?;
            let cfg = Config::parse(&text)?;
            let images = read_ppm_dir(&data)?;
            let outcome = train_with(&images, &cfg, |r| {
                eprintln!(
                    "epoch {:>4}  loss {:.4}  ms-ssim {:.4}  bits {:.2}  est bpp {:.4}",
                    r.epoch, r.loss, r.ms_ssim, r.ent_bits, r.est_bpp
                )
            })?;
            outcome.checkpoint.save(&out)?;
            if let Some(log) = log {
                fs::write(&log, log_csv(&outcome.log))?;
            }
        }
        Cmd::Compress { ckpt, input, out } => {
            let model = load_model(&ckpt)?;
            let image = read_ppm(&input)?;
            let c = compress(&model, &image)?;
            fs::write(&out, &c.bytes)?;
            print!("{}", c.report.to_text());
        }
        Cmd::Decompress { ckpt, input, out } => {
            let model = load_model(&ckpt)?;
            let bytes = fs::read(&input).with_context(|| format!("reading {}", input.display()))?;
            let d = decompress(&model, &bytes)?;
            write_ppm(&out, &d.image)?;
        }
        Cmd::AnalyzeChannels { ckpt, data, out } => {
            let model = load_model(&ckpt)?;
            let images = read_ppm_dir(&data)?;
            fs::write(&out, influence_csv(&channel_influence_experiment(&model, &images)?))?;
        }
        Cmd::CheckBound { ratios, levels, single } => {
            let spec = GroupSpec::new(ratios, levels)?;
            if single == 0 {
                bail!("--Q must be positive");
            }
            let b = entropy_upper_bound(&spec, 1, 1, 1, single);
            println!("grouped bits/symbol: {:.4}", b.grouped_per_symbol);
            println!("single bits/symbol: {:.4}", b.single_per_symbol);
            println!("{}", b.verdict());
        }
        Cmd::GradCheck { module, seed } => {
            let results = verify::run(module.as_deref(), seed)?;
            print!("{}", verify::report_text(&results));
            return Ok(results.iter().all(|r| r.passed));
        }
        Cmd::InitConfig { toy, out } => {
            let text = if toy { Config::toy() } else { Config::default() }.to_text();
            match out {
                Some(p) => fs::write(p, text)?,
                None => print!("{text}"),
            }
        }
        Cmd::SynthData { out, count, size, seed } => {
            fs::create_dir_all(&out)?;
            for (i, img) in synthetic_dataset(count, size, size, seed).iter().enumerate() {
                write_ppm(&out.join(format!("img{i:03}.ppm")), img)?;
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
