//! OFDM baseband link: 16QAM, comb pilots, IFFT with cyclic prefix, AWGN and
//! Rayleigh channels, LS estimation and ZF equalization.

mod channel;
mod link;
mod ofdm;

use std::fmt;
use std::str::FromStr;

use num_complex::Complex;

pub use channel::{add_awgn, apply_taps, awgn, draw_taps, rayleigh_apply, tap_gains, FadedSignal};
pub use link::{
    ls_estimate, read_iq, ser_oracle, transmit_link, transmit_link_with, write_iq, zf_equalize, ChannelBackend,
    ChannelOutput, CsiEstimate, CsiMethod, LinkOutput, LocalChannel, ZF_EPS,
};
pub use ofdm::{ofdm_demodulate, ofdm_modulate, pilot_symbols, qam16_demap, qam16_map, OfdmFrame, PAD_LEVEL};

pub type C64 = Complex<f64>;

#[derive(Debug, thiserror::Error)]
pub enum PhyError {
    #[error("invalid link configuration: {0}")]
    Config(String),
    #[error("odd level count {0}; 16QAM needs I/Q pairs")]
    OddLevels(usize),
    #[error("empty input")]
    Empty,
    #[error("length mismatch: {0}")]
    Length(String),
    #[error("zero transmitted pilot at bin {0}")]
    ZeroPilot(usize),
    #[error("channel backend: {0}")]
    Backend(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChannelModel {
    Noiseless,
    Awgn,
    RayleighFlat,
    RayleighMultipath { taps: usize },
}

impl ChannelModel {
    pub fn taps(&self) -> usize {
        match self {
            ChannelModel::RayleighMultipath { taps } => *taps,
            _ => 1,
        }
    }

    pub fn is_fading(&self) -> bool {
        matches!(self, ChannelModel::RayleighFlat | ChannelModel::RayleighMultipath { .. })
    }

    pub fn is_noisy(&self) -> bool {
        !matches!(self, ChannelModel::Noiseless)
    }
}

impl fmt::Display for ChannelModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ChannelModel::Noiseless => f.write_str("noiseless"),
            ChannelModel::Awgn => f.write_str("awgn"),
            ChannelModel::RayleighFlat => f.write_str("rayleigh-flat"),
            ChannelModel::RayleighMultipath { taps } => write!(f, "rayleigh-multipath:{taps}"),
        }
    }
}

impl FromStr for ChannelModel {
    type Err = PhyError;

    /// `noiseless | awgn | rayleigh | rayleigh-flat | rayleigh-multipath[:L]`.
    /// Plain `rayleigh` means the 8-tap multipath model.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim().to_ascii_lowercase();
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s.as_str(), None),
        };
        let model = match (name, arg) {
            ("noiseless", None) => ChannelModel::Noiseless,
            ("awgn", None) => ChannelModel::Awgn,
            ("rayleigh-flat", None) => ChannelModel::RayleighFlat,
            ("rayleigh" | "rayleigh-multipath", None) => ChannelModel::RayleighMultipath { taps: 8 },
            ("rayleigh-multipath", Some(l)) => ChannelModel::RayleighMultipath {
                taps: l.parse().map_err(|_| PhyError::Config(format!("bad tap count `{l}`")))?,
            },
            _ => return Err(PhyError::Config(format!("unknown channel model `{s}`"))),
        };
        Ok(model)
    }
}

/// Parameters of the OFDM link.
#[derive(Clone, Debug, PartialEq)]
pub struct LinkConfig {
    pub fft_size: usize,
    pub n_data: usize,
    pub pilots: Vec<usize>,
    pub cp_len: usize,
    pub channel: ChannelModel,
    pub snr_db: f64,
    pub seed: u64,
    /// Use the true channel instead of the LS estimate.
    pub perfect_csi: bool,
    /// OFDM symbols sharing one fading realization.
    pub fading_block: usize,
}

impl Default for LinkConfig {
    fn default() -> Self {
        Self {
            fft_size: 64,
            n_data: 55,
            pilots: (0..9).map(|i| i * 7).collect(),
            cp_len: 16,
            channel: ChannelModel::Awgn,
            snr_db: 10.0,
            seed: 0,
            perfect_csi: false,
            fading_block: 1,
        }
    }
}

impl LinkConfig {
    pub fn with_channel(mut self, channel: ChannelModel, snr_db: f64) -> Self {
        self.channel = channel;
        self.snr_db = snr_db;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn symbol_len(&self) -> usize {
        self.fft_size + self.cp_len
    }

    /// Data subcarriers: the first `n_data` non-pilot bins in ascending order.
    pub fn data_bins(&self) -> Vec<usize> {
        (0..self.fft_size).filter(|k| !self.pilots.contains(k)).take(self.n_data).collect()
    }

    pub fn validate(&self) -> Result<(), PhyError> {
        let err = |m: String| Err(PhyError::Config(m));
        if self.fft_size == 0 || self.n_data == 0 {
            return err("fft size and data subcarrier count must be positive".into());
        }
        if self.pilots.is_empty() {
            return err("at least one pilot is required".into());
        }
        if self.pilots.windows(2).any(|w| w[0] >= w[1]) {
            return err("pilot indices must be strictly increasing".into());
        }
        if *self.pilots.last().expect("non-empty") >= self.fft_size {
            return err(format!("pilot index outside {} bins", self.fft_size));
        }
        if self.n_data + self.pilots.len() > self.fft_size {
            return err(format!("{} data + {} pilots exceed {} bins", self.n_data, self.pilots.len(), self.fft_size));
        }
        if self.channel.taps() == 0 {
            return err("tap count must be positive".into());
        }
        if self.channel.taps() > self.cp_len {
            return err(format!("{} taps exceed the cyclic prefix of {}", self.channel.taps(), self.cp_len));
        }
        if self.snr_db.is_nan() {
            return err("snr is NaN".into());
        }
        if self.fading_block == 0 {
            return err("fading block must be at least one OFDM symbol".into());
        }
        Ok(())
    }
}
