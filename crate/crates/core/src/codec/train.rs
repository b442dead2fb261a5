use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::{decode_graph, encode_graph, groups, Codec, ForwardMode, SQUASH};
use super::{CodecConfig, CodecError, GROUP_CC_DEC, GROUP_CC_ENC};
use crate::detector::DetectionSet;
use crate::masking::{apply_mask, build_mask_plan, importance_order, MaskPlan, MR_MAX};
use crate::nncore::{adam_step, AdamState, Grads, Graph, NnError, ParamStore, QuantMode, Tensor};
use crate::phy::{transmit_link, ChannelModel, LinkConfig};
use crate::vision::{dog_keypoints, keypoints_per_patch, DogParams, ImageTensor, PatchGrid};

pub const TRAIN_LOG_HEADER: &str = "epoch,stage,channel,snr_db,loss,psnr";

/// An image with its detections and precomputed importance order.
#[derive(Clone, Debug)]
pub struct Sample {
    pub image: ImageTensor,
    pub det: DetectionSet,
    pub order: Vec<usize>,
}

impl Sample {
    pub fn new(image: ImageTensor, det: DetectionSet, patch: usize) -> Result<Self, CodecError> {
        let grid = PatchGrid::new(image.height(), image.width(), patch)?;
        let kps = dog_keypoints(&image, &DogParams::default());
        let counts = keypoints_per_patch(&kps, &grid);
        let order = importance_order(&det, &counts, &grid)?;
        Ok(Self { image, det, order })
    }

    pub fn plan(&self, cfg: &CodecConfig, mr: f64) -> Result<MaskPlan, CodecError> {
        let grid = PatchGrid::new(cfg.height, cfg.width, cfg.patch)?;
        Ok(build_mask_plan(&self.order, mr, &self.det, &grid, cfg.channels)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SnrSpec {
    Fixed(f64),
    Uniform(f64, f64),
}

impl SnrSpec {
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            SnrSpec::Fixed(s) => s,
            SnrSpec::Uniform(lo, hi) => rng.random_range(lo..=hi),
        }
    }
}

impl fmt::Display for SnrSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SnrSpec::Fixed(s) => write!(f, "{s}"),
            SnrSpec::Uniform(lo, hi) => write!(f, "{lo}..{hi}"),
        }
    }
}

impl FromStr for SnrSpec {
    type Err = CodecError;

    /// `10` or `-5..15`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || CodecError::Config(format!("bad SNR spec `{s}`"));
        let s = s.trim();
        // Split on the `..` that is not part of a leading minus sign.
        if let Some(i) = s.get(1..).and_then(|t| t.find("..")).map(|i| i + 1) {
            let lo: f64 = s[..i].trim().parse().map_err(|_| bad())?;
            let hi: f64 = s[i + 2..].trim().parse().map_err(|_| bad())?;
            if !(lo <= hi) {
                return Err(bad());
            }
            return Ok(SnrSpec::Uniform(lo, hi));
        }
        s.parse().map(SnrSpec::Fixed).map_err(|_| bad())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    One,
    Two,
    Three,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
            Stage::Three => 3,
        }
    }

    pub fn from_number(n: u8) -> Option<Self> {
        match n {
            1 => Some(Stage::One),
            2 => Some(Stage::Two),
            3 => Some(Stage::Three),
            _ => None,
        }
    }

    fn frozen(self, cfg: &CodecConfig) -> Vec<String> {
        let all = groups(cfg.variant);
        let cc = [GROUP_CC_ENC, GROUP_CC_DEC];
        match self {
            Stage::One => cc.iter().map(|s| s.to_string()).collect(),
            Stage::Two => all.iter().filter(|g| !cc.contains(g)).map(|s| s.to_string()).collect(),
            Stage::Three => Vec::new(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub channel: ChannelModel,
    pub snr: SnrSpec,
    /// Share of samples drawn with a random MR in [0, 0.7]; the rest use MR 0.
    pub mask_prob: f64,
    /// OFDM parameters of the training channel.
    pub link: LinkConfig,
    pub checkpoint_dir: Option<PathBuf>,
    pub log_path: Option<PathBuf>,
    /// First epoch number, for runs resumed from a checkpoint.
    pub start_epoch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch: 8,
            lr: 2e-4,
            seed: 0,
            channel: ChannelModel::Awgn,
            snr: SnrSpec::Fixed(10.0),
            mask_prob: 0.5,
            link: LinkConfig::default(),
            checkpoint_dir: None,
            log_path: None,
            start_epoch: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: u8,
    pub channel: String,
    pub snr: String,
    pub loss: f64,
    pub psnr: f64,
}

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{:.6},{:.4}", self.epoch, self.stage, self.channel, self.snr, self.loss, self.psnr)
    }
}

/// Linearised channel for one transmission: `x̂ = g·x + r` per complex symbol,
/// with `g = H/Ĥ` and residual `r` both held constant.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelDraw {
    pub gains: Vec<(f32, f32)>,
    pub residual: Vec<f32>,
}

impl ChannelDraw {
    /// Runs the OFDM link on `levels` and linearises the result.
    pub fn from_link(levels: &[f32], link: &LinkConfig) -> Result<Option<Self>, CodecError> {
        if !link.channel.is_noisy() {
            return Ok(None);
        }
        let out = transmit_link(levels, link)?;
        let eff = out.effective_gain.ok_or_else(|| CodecError::Config("link reports no channel gains".into()))?;
        let mut residual = Vec::with_capacity(levels.len());
        let mut gains = Vec::with_capacity(eff.len());
        for ((x, y), h) in levels.chunks(2).zip(out.levels.chunks(2)).zip(&eff) {
            let (gr, gi) = (h.re as f32, h.im as f32);
            residual.push(y[0] - (gr * x[0] - gi * x[1]));
            residual.push(y[1] - (gi * x[0] + gr * x[1]));
            gains.push((gr, gi));
        }
        Ok(Some(Self { gains, residual }))
    }
}

struct Draw {
    mr: f64,
    snr: f64,
    link_seed: u64,
}

struct StepOut {
    loss: f64,
    psnr: f64,
    grads: Grads<f32>,
}

fn psnr_of(pred: &[f32], target: &[f32]) -> f64 {
    let mse = pred.iter().zip(target).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / pred.len() as f64;
    if mse <= 0.0 {
        100.0
    } else {
        (10.0 * (1.0 / mse).log10()).min(100.0)
    }
}

/// Forward + backward of one sample; plain MSE unless `masked_loss`.
fn sample_step(
    codec: &Codec,
    frozen: &[String],
    use_cc: bool,
    sample: &Sample,
    draw: &Draw,
    channel: ChannelModel,
    link: &LinkConfig,
    masked_loss: bool,
    backward: bool,
) -> Result<StepOut, CodecError> {
    let cfg = &codec.cfg;
    let plan = sample.plan(cfg, draw.mr)?;
    let p = apply_mask(&sample.image, &plan)?;
    let shape = vec![cfg.height, cfg.width, cfg.channels];
    let mut g = Graph::new(&codec.params).with_frozen(frozen);
    let img = g.input(Tensor::new(shape.clone(), p.data().to_vec())?);
    let lv = encode_graph(&mut g, cfg, img, &plan, ForwardMode { use_cc, quant: QuantMode::Hard })?;
    let link = link.clone().with_channel(channel, draw.snr).with_seed(draw.link_seed);
    let rx = match ChannelDraw::from_link(g.value(lv), &link)? {
        None => lv,
        Some(d) => {
            let a = g.complex_gain(lv, d.gains)?;
            let r = g.input(Tensor::new(g.shape(lv).to_vec(), d.residual)?);
            g.add(a, r)?
        }
    };
    let latent = g.scale(rx, 1.0 / SQUASH)?;
    let out = decode_graph(&mut g, cfg, latent, &plan, use_cc)?;
    let target = g.input(Tensor::new(shape, p.data().to_vec())?);
    let loss = if masked_loss {
        g.masked_mse_loss(out, target, &plan.mask_matrix(), plan.n_total, plan.n_unmasked)?
    } else {
        g.mse_loss(out, target)?
    };
    let m = plan.mask_matrix();
    let pred: Vec<f32> = g.value(out).iter().zip(&m).map(|(a, b)| a * b).collect();
    let psnr = psnr_of(&pred, p.data());
    let lval = g.scalar(loss) as f64;
    let grads = if backward && lval.is_finite() { g.backward(loss)?.params } else { Grads::new(codec.params.len()) };
    Ok(StepOut { loss: lval, psnr, grads })
}

fn draw_for<R: Rng>(rng: &mut R, cfg: &TrainConfig, stage: Stage) -> Draw {
    let masked = rng.random::<f64>() < cfg.mask_prob;
    let mr = if masked { rng.random_range(0.0..=MR_MAX) } else { 0.0 };
    let snr = cfg.snr.draw(rng);
    let link_seed = rng.random();
    let snr = if stage == Stage::One { f64::INFINITY } else { snr };
    Draw { mr, snr, link_seed }
}

fn append_log(path: &Path, records: &[EpochRecord]) -> Result<(), CodecError> {
    let fresh = !path.exists();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "# semlink-csv v1")?;
        writeln!(f, "{TRAIN_LOG_HEADER}")?;
    }
    for r in records {
        writeln!(f, "{}", r.csv_row())?;
    }
    Ok(())
}

/// Runs one training stage in place. Stage 1 trains the ViT/compression groups
/// over a noiseless link with the channel-coding CNNs bypassed (MSE loss);
/// stage 2 trains only the channel-coding CNNs over the configured channel
/// (masked loss); stage 3 trains everything with the masked loss.
pub fn train_stage(
    codec: &mut Codec,
    data: &[Sample],
    stage: Stage,
    cfg: &TrainConfig,
) -> Result<Vec<EpochRecord>, CodecError> {
    if data.is_empty() {
        return Err(CodecError::EmptyDataset);
    }
    if cfg.batch == 0 {
        return Err(CodecError::Config("batch size must be positive".into()));
    }
    let frozen = stage.frozen(&codec.cfg);
    let use_cc = stage != Stage::One;
    codec.set_cc_active(use_cc);
    let channel = if stage == Stage::One { ChannelModel::Noiseless } else { cfg.channel };
    let masked_loss = stage != Stage::One;
    let mut adam = AdamState::new(&codec.params, cfg.lr);
    let trainable: Vec<bool> = codec
        .params
        .ids()
        .map(|id| {
            let g = codec.params.group(id);
            g != "meta" && !frozen.iter().any(|f| f == g)
        })
        .collect();
    let snr_label = if stage == Stage::One { "inf".to_string() } else { cfg.snr.to_string() };
    let mut records = Vec::new();
    for epoch in cfg.start_epoch..cfg.start_epoch + cfg.epochs {
        let snapshot: ParamStore<f32> = codec.params.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(((stage.number() as u64) << 32) | epoch as u64);
        let mut idx: Vec<usize> = (0..data.len()).collect();
        idx.shuffle(&mut rng);
        let (mut loss_sum, mut psnr_sum) = (0.0, 0.0);
        let mut diverged = false;
        for batch in idx.chunks(cfg.batch) {
            let mut grads = Grads::new(codec.params.len());
            for &i in batch {
                let d = draw_for(&mut rng, cfg, stage);
                let out = sample_step(codec, &frozen, use_cc, &data[i], &d, channel, &cfg.link, masked_loss, true)?;
                if !out.loss.is_finite() {
                    diverged = true;
                    break;
                }
                loss_sum += out.loss;
                psnr_sum += out.psnr;
                grads.merge(&out.grads);
            }
            if diverged {
                break;
            }
            grads.scale(1.0 / batch.len() as f32);
            match adam_step(&mut codec.params, &grads, &mut adam, |id| trainable[id.0]) {
                Ok(()) => {}
                Err(NnError::NonFinite { .. }) => {
                    diverged = true;
                    break;
                }
                Err(e) => return Err(e.into()),
            }
        }
        if diverged {
            codec.params = snapshot;
            let checkpoint = match &cfg.checkpoint_dir {
                Some(dir) => {
                    std::fs::create_dir_all(dir)?;
                    let p = dir.join(format!("stage{}_last_good.slnn", stage.number()));
                    codec.save(&p)?;
                    Some(p)
                }
                None => None,
            };
            return Err(CodecError::Diverged { stage: stage.number(), epoch, checkpoint });
        }
        let rec = EpochRecord {
            epoch,
            stage: stage.number(),
            channel: channel.to_string(),
            snr: snr_label.clone(),
            loss: loss_sum / data.len() as f64,
            psnr: psnr_sum / data.len() as f64,
        };
        log::info!("{}", rec.csv_row());
        if let Some(dir) = &cfg.checkpoint_dir {
            std::fs::create_dir_all(dir)?;
            codec.save(&dir.join(format!("stage{}_epoch{epoch:03}.slnn", stage.number())))?;
        }
        if let Some(path) = &cfg.log_path {
            append_log(path, std::slice::from_ref(&rec))?;
        }
        records.push(rec);
    }
    if let Some(dir) = &cfg.checkpoint_dir {
        codec.save(&dir.join(format!("stage{}.slnn", stage.number())))?;
    }
    Ok(records)
}

pub fn train_stage1(codec: &mut Codec, data: &[Sample], cfg: &TrainConfig) -> Result<Vec<EpochRecord>, CodecError> {
    train_stage(codec, data, Stage::One, cfg)
}

pub fn train_stage2(codec: &mut Codec, data: &[Sample], cfg: &TrainConfig) -> Result<Vec<EpochRecord>, CodecError> {
    train_stage(codec, data, Stage::Two, cfg)
}

pub fn finetune(codec: &mut Codec, data: &[Sample], cfg: &TrainConfig) -> Result<Vec<EpochRecord>, CodecError> {
    train_stage(codec, data, Stage::Three, cfg)
}

/// Mean masked loss over `data` with the codec as it stands. Each sample gets a
/// seed-derived MR (or `mr` when given) and channel realization.
pub fn eval_loss(
    codec: &Codec,
    data: &[Sample],
    channel: ChannelModel,
    snr: f64,
    mr: Option<f64>,
    seed: u64,
    link: &LinkConfig,
) -> Result<f64, CodecError> {
    if data.is_empty() {
        return Err(CodecError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for s in data {
        let m = rng.random_range(0.0..=MR_MAX);
        let d = Draw { mr: mr.unwrap_or(m), snr, link_seed: rng.random() };
        total += sample_step(codec, &[], codec.cc_active(), s, &d, channel, link, true, false)?.loss;
    }
    Ok(total / data.len() as f64)
}
