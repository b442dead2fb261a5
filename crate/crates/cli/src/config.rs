//! Flat `key = value` run configuration. Lists are comma-separated; `#` starts
//! a comment. Command-line overrides are applied after the file.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use semlink_core::codec::{CodecConfig, SnrSpec, Variant};
use semlink_core::phy::LinkConfig;

pub const SEED_ENV: &str = "SEMLINK_SEED";

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Transport {
    Local,
    /// UDP emulator at `host:port`.
    Emulator(String),
}

impl FromStr for Transport {
    type Err = anyhow::Error;

    /// `local`, or `udp://host:port`.
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "local" => Ok(Transport::Local),
            other => match other.strip_prefix("udp://") {
                Some(addr) if !addr.is_empty() => Ok(Transport::Emulator(addr.to_string())),
                _ => bail!("transport must be `local` or `udp://host:port`, got `{other}`"),
            },
        }
    }
}

impl fmt::Display for Transport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Transport::Local => f.write_str("local"),
            Transport::Emulator(a) => write!(f, "udp://{a}"),
        }
    }
}

/// MR used by `transmit`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MrSetting {
    Fixed(f64),
    Policy,
}

impl FromStr for MrSetting {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "policy" => Ok(MrSetting::Policy),
            v => {
                let mr: f64 = v.parse().with_context(|| format!("mr must be `policy` or a number, got `{v}`"))?;
                if !(0.0..=1.0).contains(&mr) {
                    bail!("mr {mr} outside [0, 1]");
                }
                Ok(MrSetting::Fixed(mr))
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    /// Training images (`.ppm` with optional `.det.json` sidecars).
    pub dataset: Option<PathBuf>,
    /// Evaluation images; falls back to `dataset`.
    pub eval_dataset: Option<PathBuf>,
    /// Evaluate at most this many images.
    pub limit: Option<usize>,
    pub preset: String,
    pub variant: Variant,
    pub link: LinkConfig,
    /// MR policy table CSV; the built-in table when unset.
    pub mr_policy: Option<PathBuf>,
    /// Where `mr-sweep` writes the policy fitted to its sweep.
    pub policy_out: Option<PathBuf>,
    pub snrs: Vec<f64>,
    pub mrs: Vec<f64>,
    pub mr: MrSetting,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub transport: Transport,
    /// Codec weights to start from or evaluate.
    pub checkpoint: Option<PathBuf>,
    /// Weights of the CNN-only baseline for `snr-sweep`.
    pub cnn_checkpoint: Option<PathBuf>,
    pub epochs: usize,
    pub start_epoch: usize,
    pub batch: usize,
    pub lr: f64,
    pub train_snr: SnrSpec,
    pub mask_prob: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            eval_dataset: None,
            limit: None,
            preset: "toy".into(),
            variant: Variant::Vit,
            link: LinkConfig::default(),
            mr_policy: None,
            policy_out: None,
            snrs: vec![-5.0, 0.0, 5.0, 10.0, 15.0],
            mrs: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7],
            mr: MrSetting::Policy,
            seed: 0,
            out_dir: PathBuf::from("runs"),
            transport: Transport::Local,
            checkpoint: None,
            cnn_checkpoint: None,
            epochs: 20,
            start_epoch: 0,
            batch: 8,
            lr: 2e-4,
            train_snr: SnrSpec::Fixed(10.0),
            mask_prob: 0.5,
        }
    }
}

fn list(v: &str) -> Result<Vec<f64>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().with_context(|| format!("bad number `{s}`")))
        .collect()
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

impl RunConfig {
    /// Sets one key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let num = || format!("bad value `{v}` for `{key}`");
        match key.trim() {
            "dataset" => self.dataset = opt_path(v),
            "eval_dataset" => self.eval_dataset = opt_path(v),
            "limit" => self.limit = if v.is_empty() { None } else { Some(v.parse().with_context(num)?) },
            "preset" => {
                CodecConfig::preset(v)?;
                self.preset = v.to_string();
            }
            "variant" => self.variant = v.parse()?,
            "channel" => self.link.channel = v.parse()?,
            "snr_db" => self.link.snr_db = v.parse().with_context(num)?,
            "fft_size" => self.link.fft_size = v.parse().with_context(num)?,
            "n_data" => self.link.n_data = v.parse().with_context(num)?,
            "cp_len" => self.link.cp_len = v.parse().with_context(num)?,
            "pilots" => {
                self.link.pilots = list(v)?.into_iter().map(|p| p as usize).collect();
            }
            "fading_block" => self.link.fading_block = v.parse().with_context(num)?,
            "perfect_csi" => self.link.perfect_csi = v.parse().with_context(num)?,
            "mr_policy" => self.mr_policy = opt_path(v),
            "policy_out" => self.policy_out = opt_path(v),
            "snrs" => self.snrs = list(v)?,
            "mrs" => self.mrs = list(v)?,
            "mr" => self.mr = v.parse()?,
            "seed" => self.seed = v.parse().with_context(num)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "transport" => self.transport = v.parse()?,
            "checkpoint" => self.checkpoint = opt_path(v),
            "cnn_checkpoint" => self.cnn_checkpoint = opt_path(v),
            "epochs" => self.epochs = v.parse().with_context(num)?,
            "start_epoch" => self.start_epoch = v.parse().with_context(num)?,
            "batch" => self.batch = v.parse().with_context(num)?,
            "lr" => self.lr = v.parse().with_context(num)?,
            "train_snr" => self.train_snr = v.parse()?,
            "mask_prob" => self.mask_prob = v.parse().with_context(num)?,
            other => bail!("unknown config key `{other}`"),
        }
        Ok(())
    }

    /// File, then overrides. The seed falls back to `$SEMLINK_SEED` when
    /// neither sets it.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut rc = RunConfig::default();
        let mut seed_given = false;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            for (n, line) in text.lines().enumerate() {
                let line = line.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (k, v) = line
                    .split_once('=')
                    .with_context(|| format!("{}:{}: expected key = value", path.display(), n + 1))?;
                rc.set(k, v).with_context(|| format!("{}:{}", path.display(), n + 1))?;
                seed_given |= k.trim() == "seed";
            }
        }
        for (k, v) in overrides {
            rc.set(k, v)?;
            seed_given |= k.trim() == "seed";
        }
        if !seed_given {
            if let Ok(s) = std::env::var(SEED_ENV) {
                rc.seed = s.trim().parse().with_context(|| format!("{SEED_ENV}=`{s}` is not an integer"))?;
            }
        }
        rc.link.validate()?;
        Ok(rc)
    }

    pub fn codec_config(&self) -> Result<CodecConfig> {
        Ok(CodecConfig::preset(&self.preset)?.with_variant(self.variant))
    }

    pub fn train_dir(&self) -> Result<&Path> {
        self.dataset.as_deref().context("no `dataset` configured")
    }

    pub fn eval_dir(&self) -> Result<&Path> {
        self.eval_dataset.as_deref().or(self.dataset.as_deref()).context("no `eval_dataset` or `dataset` configured")
    }

    pub fn require_sweeps(&self) -> Result<()> {
        if self.snrs.is_empty() {
            bail!("`snrs` is empty");
        }
        if self.mrs.is_empty() {
            bail!("`mrs` is empty");
        }
        if let Some(bad) = self.mrs.iter().find(|m| !(0.0..=1.0).contains(*m)) {
            bail!("mr {bad} outside [0, 1]");
        }
        Ok(())
    }
}

/// Parses `key=value` override strings.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s.split_once('=').with_context(|| format!("override `{s}` is not key=value"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use semlink_core::phy::ChannelModel;

    #[test]
    fn file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.cfg");
        std::fs::write(&p, "# demo\nseed = 4\nsnrs = -5, 10\nchannel = rayleigh\ntransport = udp://127.0.0.1:9 # inline\n")
            .unwrap();
        let rc = RunConfig::load(Some(&p), &[("snrs".into(), "0".into())]).unwrap();
        assert_eq!(rc.seed, 4);
        assert_eq!(rc.snrs, vec![0.0]);
        assert_eq!(rc.link.channel, ChannelModel::RayleighMultipath { taps: 8 });
        assert_eq!(rc.transport, Transport::Emulator("127.0.0.1:9".into()));
    }

    #[test]
    fn errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.cfg");
        std::fs::write(&p, "seed = 1\nspeed = 3\n").unwrap();
        let e = format!("{:#}", RunConfig::load(Some(&p), &[]).unwrap_err());
        assert!(e.contains("bad.cfg:2") && e.contains("speed"), "{e}");
        assert!(RunConfig::load(None, &[("mr".into(), "1.5".into())]).is_err());
        assert!(RunConfig::load(None, &[("transport".into(), "tcp://x".into())]).is_err());
        assert!(RunConfig::load(None, &[("channel".into(), "rayleigh-multipath:32".into())]).is_err());
    }

    #[test]
    fn empty_sweep_lists_are_rejected() {
        let rc = RunConfig::load(None, &[("mrs".into(), "".into())]).unwrap();
        assert!(rc.require_sweeps().is_err());
    }
}
