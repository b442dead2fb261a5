use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use serde::Serialize;
use semlink_core::codec::{Codec, CodecConfig, EpochRecord, Sample, Stage, TrainConfig, Variant};
use semlink_core::dataset::{load_dataset, write_synth_dataset};
use semlink_core::masking::{fit_mr_policy, FitMode, MrPolicy, SweepRecord};
use semlink_core::phy::{ChannelBackend, LinkConfig, LocalChannel};
use semlink_core::pipeline::{derive_seed, evaluate, transmit_sample, MeanMetrics, Metrics, MrChoice, Transmission};
use semlink_core::vision::save_image;
use semlink_emu::{EmuChannel, EmuClient, EmuConfig, EmuServer};

use crate::config::{MrSetting, RunConfig, Transport};
use crate::csvio::{fmt_f, write_csv};
use crate::report::{aggregate, write_report, Report};

pub const MR_SWEEP_HEADER: &[&str] = &["snr_db", "mr", "n", "psnr_cs", "ssim_cs", "psnr", "ssim", "cs"];
pub const SNR_SWEEP_HEADER: &[&str] = &["snr_db", "scheme", "n", "mean_mr", "psnr_cs", "ssim_cs", "psnr", "ssim", "cs"];

pub fn stage_checkpoint(out_dir: &Path, stage: u8) -> PathBuf {
    out_dir.join(format!("stage{stage}.slnn"))
}

pub fn load_codec(cfg: CodecConfig, path: &Path) -> Result<Codec> {
    if !path.exists() {
        bail!("checkpoint {} does not exist", path.display());
    }
    Codec::load(cfg, path).with_context(|| format!("loading {}", path.display()))
}

/// Images of `dir` as samples, at most `limit` of them, in file-name order.
pub fn load_samples(dir: &Path, cfg: &CodecConfig, limit: Option<usize>) -> Result<Vec<Sample>> {
    let items = load_dataset(dir, Some((cfg.height, cfg.width, cfg.channels)))?;
    let n = limit.unwrap_or(items.len()).min(items.len());
    items.into_iter().take(n).map(|it| Ok(Sample::new(it.image, it.det, cfg.patch)?)).collect()
}

pub fn open_backend(t: &Transport) -> Result<Box<dyn ChannelBackend>> {
    match t {
        Transport::Local => Ok(Box::new(LocalChannel)),
        Transport::Emulator(addr) => {
            let mut client = EmuClient::connect(addr.as_str()).with_context(|| format!("resolving {addr}"))?;
            client.ping().with_context(|| format!("emulator at {addr} does not answer"))?;
            Ok(Box::new(EmuChannel::new(client)))
        }
    }
}

fn policy(rc: &RunConfig) -> Result<MrPolicy> {
    match &rc.mr_policy {
        Some(p) => MrPolicy::load_csv(p).with_context(|| format!("loading MR policy {}", p.display())),
        None => Ok(MrPolicy::default()),
    }
}

fn eval_checkpoint(rc: &RunConfig) -> PathBuf {
    rc.checkpoint.clone().unwrap_or_else(|| stage_checkpoint(&rc.out_dir, 3))
}

/// Seed shared by every cell at one SNR, so MR and scheme comparisons see the
/// same channel realizations.
fn snr_seed(seed: u64, snr: f64) -> u64 {
    derive_seed(seed, &[snr.to_bits()])
}

pub fn cmd_synth_data(dir: &Path, n: usize, seed: u64, size: usize) -> Result<Vec<PathBuf>> {
    if n == 0 {
        bail!("image count must be positive");
    }
    Ok(write_synth_dataset(dir, n, seed, size, size)?)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub hash: String,
    pub records: Vec<EpochRecord>,
}

/// Stage 1 starts from fresh weights (or `checkpoint` to resume); stages 2
/// and 3 start from `checkpoint`, defaulting to the previous stage's output
/// in `out_dir`.
pub fn cmd_train(stage_no: u8, rc: &RunConfig) -> Result<TrainOutcome> {
    let stage = Stage::from_number(stage_no).with_context(|| format!("stage must be 1, 2 or 3, got {stage_no}"))?;
    let cfg = rc.codec_config()?;
    let mut codec = match (stage_no, &rc.checkpoint) {
        (_, Some(p)) => load_codec(cfg.clone(), p)?,
        (1, None) => Codec::new(cfg.clone(), rc.seed)?,
        (n, None) => {
            let prev = stage_checkpoint(&rc.out_dir, n - 1);
            if !prev.exists() {
                bail!("stage {n} needs the stage {} checkpoint, expected at {}", n - 1, prev.display());
            }
            load_codec(cfg.clone(), &prev)?
        }
    };
    let data = load_samples(rc.train_dir()?, &cfg, rc.limit)?;
    std::fs::create_dir_all(&rc.out_dir)?;
    let log = rc.out_dir.join(format!("train_stage{stage_no}.csv"));
    if rc.start_epoch == 0 && log.exists() {
        std::fs::remove_file(&log)?;
    }
    let tc = TrainConfig {
        epochs: rc.epochs,
        batch: rc.batch,
        lr: rc.lr,
        seed: rc.seed,
        channel: rc.link.channel,
        snr: rc.train_snr,
        mask_prob: rc.mask_prob,
        link: rc.link.clone(),
        checkpoint_dir: Some(rc.out_dir.clone()),
        log_path: Some(log.clone()),
        start_epoch: rc.start_epoch,
    };
    let records = semlink_core::codec::train_stage(&mut codec, &data, stage, &tc)?;
    Ok(TrainOutcome { checkpoint: stage_checkpoint(&rc.out_dir, stage_no), log, hash: codec.hash(), records })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MrRow {
    pub snr_db: f64,
    pub mr: f64,
    pub mean: MeanMetrics,
}

fn metric_cells(m: &MeanMetrics) -> Vec<String> {
    vec![m.n.to_string(), fmt_f(m.psnr_cs), fmt_f(m.ssim_cs), fmt_f(m.psnr), fmt_f(m.ssim), fmt_f(m.cs)]
}

/// Mean metrics over the evaluation set for every (SNR, MR) pair; writes
/// `mr_sweep.csv` and, when `policy_out` is set, the policy fitted to it.
pub fn cmd_mr_sweep(rc: &RunConfig) -> Result<Vec<MrRow>> {
    rc.require_sweeps()?;
    let cfg = rc.codec_config()?;
    let codec = load_codec(cfg.clone(), &eval_checkpoint(rc))?;
    let samples = load_samples(rc.eval_dir()?, &cfg, rc.limit)?;
    let mut backend = open_backend(&rc.transport)?;
    let mut rows = Vec::new();
    for &snr in &rc.snrs {
        let link = rc.link.clone().with_channel(rc.link.channel, snr);
        for &mr in &rc.mrs {
            let mean = evaluate(&codec, &samples, &MrChoice::Fixed(mr), &link, snr_seed(rc.seed, snr), backend.as_mut())?;
            log::info!("snr {snr} mr {mr}: psnr+cs {:.4}", mean.psnr_cs);
            rows.push(MrRow { snr_db: snr, mr, mean });
        }
    }
    let csv: Vec<Vec<String>> = rows
        .iter()
        .map(|r| [vec![fmt_f(r.snr_db), fmt_f(r.mr)], metric_cells(&r.mean)].concat())
        .collect();
    write_csv(&rc.out_dir.join("mr_sweep.csv"), MR_SWEEP_HEADER, &csv)?;
    if let Some(out) = &rc.policy_out {
        let sweep: Vec<SweepRecord> =
            rows.iter().map(|r| SweepRecord { snr_db: r.snr_db, mr: r.mr, metric: r.mean.psnr_cs }).collect();
        fit_mr_policy(&sweep, FitMode::Table)?.save_csv(out)?;
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SnrRow {
    pub snr_db: f64,
    pub scheme: String,
    pub mean: MeanMetrics,
}

/// Schemes per SNR: `adaptive` (ViT, MR from the policy per image), `mr0`
/// (ViT, no masking) and, when `cnn_checkpoint` is set, `cnn-only`. Writes
/// `snr_sweep.csv`.
pub fn cmd_snr_sweep(rc: &RunConfig) -> Result<Vec<SnrRow>> {
    if rc.snrs.is_empty() {
        bail!("`snrs` is empty");
    }
    let cfg = rc.codec_config()?.with_variant(Variant::Vit);
    let vit = load_codec(cfg.clone(), &eval_checkpoint(rc))?;
    let cnn = match &rc.cnn_checkpoint {
        Some(p) => Some(load_codec(cfg.clone().with_variant(Variant::CnnOnly), p)?),
        None => None,
    };
    let samples = load_samples(rc.eval_dir()?, &cfg, rc.limit)?;
    let policy = policy(rc)?;
    let mut backend = open_backend(&rc.transport)?;
    let mut schemes: Vec<(&str, &Codec, MrChoice)> =
        vec![("adaptive", &vit, MrChoice::Policy(policy)), ("mr0", &vit, MrChoice::Fixed(0.0))];
    if let Some(c) = &cnn {
        schemes.push(("cnn-only", c, MrChoice::Fixed(0.0)));
    }
    let mut rows = Vec::new();
    for &snr in &rc.snrs {
        let link = rc.link.clone().with_channel(rc.link.channel, snr);
        for (name, codec, mr) in &schemes {
            let mean = evaluate(codec, &samples, mr, &link, snr_seed(rc.seed, snr), backend.as_mut())?;
            if [mean.psnr_cs, mean.ssim_cs].iter().any(|v| !v.is_finite()) {
                bail!("{name} at {snr} dB produced a non-finite metric");
            }
            log::info!("snr {snr} {name}: psnr+cs {:.4}", mean.psnr_cs);
            rows.push(SnrRow { snr_db: snr, scheme: name.to_string(), mean });
        }
    }
    let csv: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut row = vec![fmt_f(r.snr_db), r.scheme.clone()];
            let cells = metric_cells(&r.mean);
            row.push(cells[0].clone());
            row.push(fmt_f(r.mean.mr));
            row.extend_from_slice(&cells[1..]);
            row
        })
        .collect();
    write_csv(&rc.out_dir.join("snr_sweep.csv"), SNR_SWEEP_HEADER, &csv)?;
    Ok(rows)
}

#[derive(Serialize)]
struct TransmitRecord<'a> {
    image: String,
    transport: String,
    checkpoint: String,
    codec_hash: String,
    channel: String,
    #[serde(flatten)]
    metrics: &'a Metrics,
}

#[derive(Clone, Debug)]
pub struct TransmitOutcome {
    pub image: PathBuf,
    pub metrics_json: PathBuf,
    pub transmission: Transmission,
}

/// One image end to end. Writes `<stem>.recon.ppm` and `<stem>.metrics.json`
/// to `out_dir`.
pub fn cmd_transmit(image: &Path, rc: &RunConfig) -> Result<TransmitOutcome> {
    let cfg = rc.codec_config()?;
    let ckpt = eval_checkpoint(rc);
    let codec = load_codec(cfg.clone(), &ckpt)?;
    let item = semlink_core::dataset::load_item(image, Some((cfg.height, cfg.width, cfg.channels)))?;
    let sample = Sample::new(item.image, item.det, cfg.patch)?;
    let mr = match rc.mr {
        MrSetting::Fixed(m) => MrChoice::Fixed(m),
        MrSetting::Policy => MrChoice::Policy(policy(rc)?),
    };
    let link: LinkConfig = rc.link.clone().with_seed(rc.seed);
    let mut backend = open_backend(&rc.transport)?;
    let t = transmit_sample(&codec, &sample, &mr, &link, backend.as_mut())?;
    let stem = image.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    std::fs::create_dir_all(&rc.out_dir)?;
    let recon = rc.out_dir.join(format!("{stem}.recon.ppm"));
    save_image(&t.restored, &recon)?;
    let record = TransmitRecord {
        image: image.display().to_string(),
        transport: rc.transport.to_string(),
        checkpoint: ckpt.display().to_string(),
        codec_hash: codec.hash(),
        channel: rc.link.channel.to_string(),
        metrics: &t.metrics,
    };
    let metrics_json = rc.out_dir.join(format!("{stem}.metrics.json"));
    std::fs::write(&metrics_json, serde_json::to_string_pretty(&record)? + "\n")?;
    Ok(TransmitOutcome { image: recon, metrics_json, transmission: t })
}

/// Aggregates `inputs` into `out` and returns the report.
pub fn cmd_report(inputs: &[PathBuf], out: &Path) -> Result<Report> {
    let report = aggregate(inputs)?;
    write_report(&report, out)?;
    Ok(report)
}

/// Runs the emulator service; stops after `duration` when given. `on_bind`
/// receives the bound address (useful with port 0).
pub fn cmd_emulate(bind: &str, cfg: EmuConfig, duration: Option<Duration>, on_bind: impl FnOnce(std::net::SocketAddr)) -> Result<()> {
    let server = EmuServer::spawn(bind, cfg).with_context(|| format!("binding {bind}"))?;
    on_bind(server.addr());
    match duration {
        Some(d) => {
            std::thread::sleep(d);
            let stats = server.stats();
            server.stop()?;
            log::info!("{}", stats.to_text().replace('\n', "; "));
        }
        None => server.wait()?,
    }
    Ok(())
}
