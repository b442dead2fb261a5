use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{ChannelModel, LinkConfig, PhyError, C64};

/// Adds circular complex Gaussian noise of variance `es / 10^(snr/10)`.
/// An infinite SNR leaves the samples untouched.
pub fn add_awgn<R: Rng + ?Sized>(samples: &mut [C64], snr_db: f64, es: f64, rng: &mut R) {
    if snr_db == f64::INFINITY {
        return;
    }
    let sigma = (es / 10f64.powf(snr_db / 10.0) / 2.0).sqrt();
    for v in samples.iter_mut() {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        *v += C64::new(re * sigma, im * sigma);
    }
}

/// Seeded AWGN against a unit symbol energy.
pub fn awgn(samples: &[C64], snr_db: f64, seed: u64) -> Vec<C64> {
    let mut out = samples.to_vec();
    add_awgn(&mut out, snr_db, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    out
}

/// Complex Gaussian taps with a 3 dB/tap exponential power-delay profile,
/// scaled to unit expected total power.
pub fn draw_taps<R: Rng + ?Sized>(taps: usize, rng: &mut R) -> Vec<C64> {
    let profile: Vec<f64> = (0..taps).map(|l| 10f64.powf(-0.3 * l as f64)).collect();
    let total: f64 = profile.iter().sum();
    profile
        .iter()
        .map(|p| {
            let s = (p / total / 2.0).sqrt();
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            C64::new(re * s, im * s)
        })
        .collect()
}

/// Per-subcarrier gains `H_k = Σ_l h_l e^{−j2πkl/N}`.
pub fn tap_gains(taps: &[C64], fft_size: usize) -> Vec<C64> {
    (0..fft_size)
        .map(|k| {
            taps.iter()
                .enumerate()
                .map(|(l, &h)| h * C64::from_polar(1.0, -2.0 * std::f64::consts::PI * (k * l) as f64 / fft_size as f64))
                .sum()
        })
        .collect()
}

/// Convolves each block of `block_len` samples with its own taps; the tail of
/// a block spills into the next block's leading samples (its cyclic prefix).
pub fn apply_taps(samples: &[C64], block_len: usize, block_taps: &[Vec<C64>]) -> Vec<C64> {
    let mut out = vec![C64::new(0.0, 0.0); samples.len()];
    for (b, block) in samples.chunks(block_len).enumerate() {
        let taps = &block_taps[b];
        let start = b * block_len;
        for (i, &x) in block.iter().enumerate() {
            for (l, &h) in taps.iter().enumerate() {
                if let Some(o) = out.get_mut(start + i + l) {
                    *o += h * x;
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct FadedSignal {
    pub samples: Vec<C64>,
    /// True per-subcarrier gains, one vector per fading block.
    pub gains: Vec<Vec<C64>>,
    pub taps: Vec<Vec<C64>>,
}

/// Block fading: every `fading_block` OFDM symbols draw a fresh tap vector.
/// No noise is added here.
pub fn rayleigh_apply(samples: &[C64], cfg: &LinkConfig, seed: u64) -> Result<FadedSignal, PhyError> {
    cfg.validate()?;
    let taps = match cfg.channel {
        ChannelModel::RayleighFlat => 1,
        ChannelModel::RayleighMultipath { taps } => taps,
        other => return Err(PhyError::Config(format!("{other} is not a fading model"))),
    };
    let block_len = cfg.symbol_len() * cfg.fading_block;
    let n_blocks = samples.len().div_ceil(block_len).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let block_taps: Vec<Vec<C64>> = (0..n_blocks).map(|_| draw_taps(taps, &mut rng)).collect();
    Ok(FadedSignal {
        samples: apply_taps(samples, block_len, &block_taps),
        gains: block_taps.iter().map(|t| tap_gains(t, cfg.fft_size)).collect(),
        taps: block_taps,
    })
}
