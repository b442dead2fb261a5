use std::io::Write;
use std::path::PathBuf;
use std::time::Duration;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use semlink::commands;
use semlink::config::{parse_override, RunConfig, SEED_ENV};
use semlink::csvio::read_csv;
use semlink::report::render;
use semlink_emu::EmuConfig;

#[derive(Parser)]
#[command(name = "semlink", version, about = "Adaptive semantic image transmission over a simulated OFDM link")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Run configuration file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `-s snrs=-5,0,5`. Repeatable.
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// `local` or `udp://host:port`.
    #[arg(long)]
    transport: Option<String>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut ov: Vec<(String, String)> = self.set.iter().map(|s| parse_override(s)).collect::<Result<_>>()?;
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                ov.push((k.to_string(), v));
            }
        };
        push("seed", self.seed.map(|s| s.to_string()));
        push("out_dir", self.out_dir.as_ref().map(|p| p.display().to_string()));
        push("transport", self.transport.clone());
        push("checkpoint", self.checkpoint.as_ref().map(|p| p.display().to_string()));
        push("dataset", self.dataset.as_ref().map(|p| p.display().to_string()));
        RunConfig::load(self.config.as_deref(), &ov)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic dataset of scenes with detection sidecars.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, env = SEED_ENV, default_value_t = 0)]
        seed: u64,
        /// Image side in pixels.
        #[arg(long, default_value_t = 32)]
        size: usize,
    },
    /// Run one training stage (1, 2 or 3).
    Train {
        #[arg(long)]
        stage: u8,
        #[command(flatten)]
        common: Common,
    },
    /// Metrics over the (SNR, MR) grid; writes mr_sweep.csv.
    MrSweep {
        #[command(flatten)]
        common: Common,
    },
    /// Adaptive scheme against the baselines over SNR; writes snr_sweep.csv.
    SnrSweep {
        #[command(flatten)]
        common: Common,
    },
    /// Send one image end to end.
    Transmit {
        image: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Serve the UDP channel emulator.
    Emulate {
        #[arg(long, default_value = "127.0.0.1:5600")]
        bind: String,
        /// Emulator configuration file (`key=value` lines).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        channel: Option<String>,
        #[arg(long, allow_hyphen_values = true)]
        snr_db: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Stop after this many seconds.
        #[arg(long)]
        duration: Option<f64>,
    },
    /// Aggregate repeated-run CSVs into means and 95% confidence intervals.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn emu_config(
    config: Option<PathBuf>,
    channel: Option<String>,
    snr_db: Option<f64>,
    seed: Option<u64>,
) -> Result<EmuConfig> {
    let mut cfg = match config {
        Some(p) => {
            let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
            text.parse::<EmuConfig>().with_context(|| format!("parsing {}", p.display()))?
        }
        None => EmuConfig::default(),
    };
    if let Some(c) = channel {
        cfg.channel = c.parse()?;
    }
    if let Some(s) = snr_db {
        cfg.snr_db = s;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::SynthData { out, n, seed, size } => {
            let paths = commands::cmd_synth_data(&out, n, seed, size)?;
            println!("wrote {} images to {}", paths.len(), out.display());
        }
        Cmd::Train { stage, common } => {
            let o = commands::cmd_train(stage, &common.load()?)?;
            if let Some(last) = o.records.last() {
                println!("epoch {} loss {:.6} psnr {:.3}", last.epoch, last.loss, last.psnr);
            }
            println!("checkpoint {}", o.checkpoint.display());
            println!("log {}", o.log.display());
            println!("hash {}", o.hash);
        }
        Cmd::MrSweep { common } => {
            let rc = common.load()?;
            commands::cmd_mr_sweep(&rc)?;
            let path = rc.out_dir.join("mr_sweep.csv");
            print!("{}", render(&read_csv(&path)?));
            if let Some(p) = &rc.policy_out {
                println!("policy {}", p.display());
            }
        }
        Cmd::SnrSweep { common } => {
            let rc = common.load()?;
            commands::cmd_snr_sweep(&rc)?;
            print!("{}", render(&read_csv(&rc.out_dir.join("snr_sweep.csv"))?));
        }
        Cmd::Transmit { image, common } => {
            let o = commands::cmd_transmit(&image, &common.load()?)?;
            let m = &o.transmission.metrics;
            println!("mr {:.3} psnr {:.3} ssim {:.4} cs {:.4}", m.mr, m.psnr, m.ssim, m.cs);
            println!("restored {}", o.image.display());
            println!("metrics {}", o.metrics_json.display());
        }
        Cmd::Emulate { bind, config, channel, snr_db, seed, duration } => {
            let cfg = emu_config(config, channel, snr_db, seed)?;
            let duration = duration.map(Duration::from_secs_f64);
            commands::cmd_emulate(&bind, cfg, duration, |addr| {
                println!("listening on {addr}");
                std::io::stdout().flush().ok();
            })?;
        }
        Cmd::Report { inputs, out } => {
            let r = commands::cmd_report(&inputs, &out)?;
            print!("{}", r.summary);
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
