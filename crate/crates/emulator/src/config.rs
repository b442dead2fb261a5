use std::fmt;
use std::str::FromStr;

use semlink_core::phy::{ChannelModel, LinkConfig, PhyError};

/// Radio frame preset of the hardware testbed. Carried for reference only;
/// the emulator works on baseband samples and ignores these.
#[derive(Clone, Debug, PartialEq)]
pub struct FramePreset {
    pub fft_size: usize,
    pub symbols_per_frame: usize,
    pub carrier_hz: f64,
    pub bandwidth_hz: f64,
}

impl Default for FramePreset {
    fn default() -> Self {
        Self { fft_size: 256, symbols_per_frame: 41, carrier_hz: 2.0e9, bandwidth_hz: 0.364e6 }
    }
}

/// Channel applied by the service. The OFDM geometry fields only matter for
/// fading, where taps are redrawn every `fading_block` OFDM symbols.
#[derive(Clone, Debug, PartialEq)]
pub struct EmuConfig {
    pub channel: ChannelModel,
    pub snr_db: f64,
    /// Seed of the first frame after this config is applied; frame `k` uses `seed + k`.
    pub seed: u64,
    pub fft_size: usize,
    pub cp_len: usize,
    pub fading_block: usize,
    pub preset: FramePreset,
}

impl Default for EmuConfig {
    fn default() -> Self {
        Self::from_link(&LinkConfig::default().with_channel(ChannelModel::Noiseless, f64::INFINITY))
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("emulator config: {0}")]
pub struct ConfigError(pub String);

impl From<PhyError> for ConfigError {
    fn from(e: PhyError) -> Self {
        ConfigError(e.to_string())
    }
}

impl EmuConfig {
    pub fn from_link(link: &LinkConfig) -> Self {
        Self {
            channel: link.channel,
            snr_db: link.snr_db,
            seed: link.seed,
            fft_size: link.fft_size,
            cp_len: link.cp_len,
            fading_block: link.fading_block,
            preset: FramePreset::default(),
        }
    }

    /// The link configuration the service runs a frame under. Pilot layout
    /// is irrelevant to the channel, so a single pilot stands in for it.
    pub fn link(&self, seed: u64) -> LinkConfig {
        LinkConfig {
            fft_size: self.fft_size,
            n_data: 1,
            pilots: vec![0],
            cp_len: self.cp_len,
            channel: self.channel,
            snr_db: self.snr_db,
            seed,
            perfect_csi: false,
            fading_block: self.fading_block,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.fft_size < 2 {
            return Err(ConfigError(format!("fft size {} is too small", self.fft_size)));
        }
        Ok(self.link(self.seed).validate()?)
    }

    /// `key=value` lines, the body of a config datagram.
    pub fn to_text(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for EmuConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "channel={}", self.channel)?;
        writeln!(f, "snr_db={}", self.snr_db)?;
        writeln!(f, "seed={}", self.seed)?;
        writeln!(f, "fft_size={}", self.fft_size)?;
        writeln!(f, "cp_len={}", self.cp_len)?;
        writeln!(f, "fading_block={}", self.fading_block)?;
        writeln!(f, "preset_fft_size={}", self.preset.fft_size)?;
        writeln!(f, "preset_symbols_per_frame={}", self.preset.symbols_per_frame)?;
        writeln!(f, "preset_carrier_hz={}", self.preset.carrier_hz)?;
        writeln!(f, "preset_bandwidth_hz={}", self.preset.bandwidth_hz)
    }
}

impl FromStr for EmuConfig {
    type Err = ConfigError;

    /// Missing keys keep their defaults; unknown keys are an error.
    fn from_str(s: &str) -> Result<Self, ConfigError> {
        let mut c = EmuConfig::default();
        for line in s.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError(format!("`{line}` is not key=value")))?;
            let (k, v) = (k.trim(), v.trim());
            let num = |what: &str| ConfigError(format!("bad {what} `{v}`"));
            match k {
                "channel" => c.channel = v.parse()?,
                "snr_db" => c.snr_db = v.parse().map_err(|_| num(k))?,
                "seed" => c.seed = v.parse().map_err(|_| num(k))?,
                "fft_size" => c.fft_size = v.parse().map_err(|_| num(k))?,
                "cp_len" => c.cp_len = v.parse().map_err(|_| num(k))?,
                "fading_block" => c.fading_block = v.parse().map_err(|_| num(k))?,
                "preset_fft_size" => c.preset.fft_size = v.parse().map_err(|_| num(k))?,
                "preset_symbols_per_frame" => c.preset.symbols_per_frame = v.parse().map_err(|_| num(k))?,
                "preset_carrier_hz" => c.preset.carrier_hz = v.parse().map_err(|_| num(k))?,
                "preset_bandwidth_hz" => c.preset.bandwidth_hz = v.parse().map_err(|_| num(k))?,
                _ => return Err(ConfigError(format!("unknown key `{k}`"))),
            }
        }
        c.validate()?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let c = EmuConfig {
            channel: ChannelModel::RayleighMultipath { taps: 4 },
            snr_db: -2.5,
            seed: 99,
            fading_block: 3,
            ..EmuConfig::default()
        };
        assert_eq!(c.to_text().parse::<EmuConfig>().unwrap(), c);
        let inf: EmuConfig = "channel=noiseless\nsnr_db=inf".parse().unwrap();
        assert_eq!(inf.snr_db, f64::INFINITY);
    }

    #[test]
    fn rejects_bad_text() {
        assert!("channel=laser".parse::<EmuConfig>().is_err());
        assert!("snr=3".parse::<EmuConfig>().is_err());
        assert!("seed".parse::<EmuConfig>().is_err());
        assert!("channel=rayleigh-multipath:20".parse::<EmuConfig>().is_err());
        assert!("fft_size=0".parse::<EmuConfig>().is_err());
    }
}
