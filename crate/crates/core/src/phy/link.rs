use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::channel::{add_awgn, rayleigh_apply};
use super::ofdm::{ofdm_demodulate, ofdm_modulate, pilot_symbols, qam16_map};
use super::{LinkConfig, PhyError, C64};

/// Gains at or below this magnitude are treated as erased by ZF.
pub const ZF_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CsiMethod {
    Ls,
    Perfect,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CsiEstimate {
    /// One gain per FFT bin.
    pub gains: Vec<C64>,
    pub method: CsiMethod,
}

/// `Ĥ = Y/X` at pilot bins, linear interpolation in between, nearest pilot
/// beyond either end.
pub fn ls_estimate(rx_pilots: &[C64], tx_pilots: &[C64], cfg: &LinkConfig) -> Result<CsiEstimate, PhyError> {
    let np = cfg.pilots.len();
    if rx_pilots.len() != np || tx_pilots.len() != np {
        return Err(PhyError::Length(format!(
            "{} received / {} transmitted pilots for {np} pilot bins",
            rx_pilots.len(),
            tx_pilots.len()
        )));
    }
    let mut at = Vec::with_capacity(np);
    for ((&k, &y), &x) in cfg.pilots.iter().zip(rx_pilots).zip(tx_pilots) {
        if x.norm() == 0.0 {
            return Err(PhyError::ZeroPilot(k));
        }
        at.push((k, y / x));
    }
    let gains = (0..cfg.fft_size)
        .map(|k| {
            let i = at.partition_point(|&(p, _)| p <= k);
            if i == 0 {
                at[0].1
            } else if i == np {
                at[np - 1].1
            } else {
                let (k0, h0) = at[i - 1];
                let (k1, h1) = at[i];
                let t = (k - k0) as f64 / (k1 - k0) as f64;
                h0 * (1.0 - t) + h1 * t
            }
        })
        .collect();
    Ok(CsiEstimate { gains, method: CsiMethod::Ls })
}

/// `X̂ = Y/Ĥ`; bins with `|Ĥ| ≤ 1e-12` are erased to 0. Returns the erasure count.
pub fn zf_equalize(rx: &[C64], gains: &[C64]) -> Result<(Vec<C64>, usize), PhyError> {
    if rx.len() != gains.len() {
        return Err(PhyError::Length(format!("{} symbols vs {} gains", rx.len(), gains.len())));
    }
    let mut erased = 0;
    let out = rx
        .iter()
        .zip(gains)
        .map(|(&y, &h)| {
            if h.norm() <= ZF_EPS {
                erased += 1;
                C64::new(0.0, 0.0)
            } else {
                y / h
            }
        })
        .collect();
    Ok((out, erased))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelOutput {
    pub samples: Vec<C64>,
    /// True per-subcarrier gains per fading block, when the backend knows them.
    pub gains: Option<Vec<Vec<C64>>>,
}

/// Something that impairs a stream of time-domain samples.
pub trait ChannelBackend {
    fn apply(&mut self, samples: &[C64], cfg: &LinkConfig) -> Result<ChannelOutput, PhyError>;
}

/// In-process channel driven by the configuration's model, SNR and seed.
#[derive(Clone, Copy, Debug, Default)]
pub struct LocalChannel;

impl ChannelBackend for LocalChannel {
    fn apply(&mut self, samples: &[C64], cfg: &LinkConfig) -> Result<ChannelOutput, PhyError> {
        let (mut out, gains) = if cfg.channel.is_fading() {
            let f = rayleigh_apply(samples, cfg, cfg.seed)?;
            (f.samples, Some(f.gains))
        } else {
            (samples.to_vec(), None)
        };
        if cfg.channel.is_noisy() {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(1);
            add_awgn(&mut out, cfg.snr_db, 1.0, &mut rng);
        }
        Ok(ChannelOutput { samples: out, gains })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinkOutput {
    /// Soft received levels, same length as the input.
    pub levels: Vec<f32>,
    pub symbols: Vec<C64>,
    pub erasures: usize,
    pub n_ofdm_symbols: usize,
    pub n_pad: usize,
    /// `H/Ĥ` per data symbol when the true channel is known.
    pub effective_gain: Option<Vec<C64>>,
    pub tx_samples: Vec<C64>,
    pub rx_samples: Vec<C64>,
}

pub fn transmit_link(levels: &[f32], cfg: &LinkConfig) -> Result<LinkOutput, PhyError> {
    transmit_link_with(levels, cfg, &mut LocalChannel)
}

/// map → OFDM → channel → demodulate → estimate → ZF → soft levels.
pub fn transmit_link_with(
    levels: &[f32],
    cfg: &LinkConfig,
    channel: &mut dyn ChannelBackend,
) -> Result<LinkOutput, PhyError> {
    cfg.validate()?;
    let symbols = qam16_map(levels)?;
    let mut frame = ofdm_modulate(&symbols, cfg)?;
    // Samples cross the channel as 32-bit I/Q, whichever backend carries them.
    round_to_f32(&mut frame.time);
    let mut out = channel.apply(&frame.time, cfg)?;
    if out.samples.len() != frame.time.len() {
        return Err(PhyError::Length(format!("channel returned {} of {} samples", out.samples.len(), frame.time.len())));
    }
    round_to_f32(&mut out.samples);
    let true_gains = match out.gains {
        Some(g) => Some(g),
        None if !cfg.channel.is_fading() => Some(vec![vec![C64::new(1.0, 0.0); cfg.fft_size]]),
        None => None,
    };
    if cfg.perfect_csi && true_gains.is_none() {
        return Err(PhyError::Config("perfect CSI requested but the channel backend reports no gains".into()));
    }
    let gain_of = |s: usize| -> Option<&Vec<C64>> {
        true_gains.as_ref().map(|g| &g[(s / cfg.fading_block).min(g.len() - 1)])
    };

    let grids = ofdm_demodulate(&out.samples, cfg)?;
    let data_bins = cfg.data_bins();
    let tx_pilots = pilot_symbols(cfg);
    let mut eq = Vec::with_capacity(symbols.len());
    let mut eff = true_gains.as_ref().map(|_| Vec::with_capacity(symbols.len()));
    let mut erasures = 0;
    for (s, grid) in grids.iter().enumerate() {
        let est = if cfg.perfect_csi {
            gain_of(s).expect("checked above").clone()
        } else {
            let rx_p: Vec<C64> = cfg.pilots.iter().map(|&k| grid[k]).collect();
            ls_estimate(&rx_p, &tx_pilots, cfg)?.gains
        };
        let take = (symbols.len() - eq.len()).min(cfg.n_data);
        let bins = &data_bins[..take];
        let rx: Vec<C64> = bins.iter().map(|&k| grid[k]).collect();
        let h: Vec<C64> = bins.iter().map(|&k| est[k]).collect();
        let (x, e) = zf_equalize(&rx, &h)?;
        erasures += e;
        eq.extend(x);
        if let (Some(eff), Some(g)) = (eff.as_mut(), gain_of(s)) {
            eff.extend(bins.iter().map(|&k| if est[k].norm() <= ZF_EPS { C64::new(0.0, 0.0) } else { g[k] / est[k] }));
        }
    }
    let s10 = 10f64.sqrt();
    let soft = eq.iter().flat_map(|z| [(z.re * s10) as f32, (z.im * s10) as f32]).collect();
    Ok(LinkOutput {
        levels: soft,
        symbols: eq,
        erasures,
        n_ofdm_symbols: frame.n_symbols,
        n_pad: frame.n_pad,
        effective_gain: eff,
        tx_samples: frame.time,
        rx_samples: out.samples,
    })
}

fn round_to_f32(samples: &mut [C64]) {
    for z in samples {
        *z = C64::new(z.re as f32 as f64, z.im as f32 as f64);
    }
}

/// 16QAM symbol error rate over AWGN at the given Es/N0.
pub fn ser_oracle(es_n0_db: f64) -> f64 {
    let snr = 10f64.powf(es_n0_db / 10.0);
    let q = 0.5 * libm::erfc((snr / 5.0).sqrt() / std::f64::consts::SQRT_2);
    let p = 1.5 * q;
    1.0 - (1.0 - p) * (1.0 - p)
}

/// Interleaved little-endian f32 I/Q.
pub fn write_iq<W: Write>(mut w: W, samples: &[C64]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(samples.len() * 8);
    for s in samples {
        buf.extend_from_slice(&(s.re as f32).to_le_bytes());
        buf.extend_from_slice(&(s.im as f32).to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn read_iq<R: Read>(mut r: R) -> Result<Vec<C64>, PhyError> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    if buf.len() % 8 != 0 {
        return Err(PhyError::Length(format!("{} bytes is not a whole number of I/Q pairs", buf.len())));
    }
    Ok(buf
        .chunks_exact(8)
        .map(|c| {
            let re = f32::from_le_bytes(c[..4].try_into().expect("4 bytes"));
            let im = f32::from_le_bytes(c[4..].try_into().expect("4 bytes"));
            C64::new(re as f64, im as f64)
        })
        .collect())
}
