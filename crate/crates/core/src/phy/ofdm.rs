use std::f64::consts::FRAC_1_SQRT_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::FftPlanner;

use super::{LinkConfig, PhyError, C64};

/// Level used for filler symbols completing the last OFDM symbol.
pub const PAD_LEVEL: f32 = 1.0;

const PILOT_SEED: u64 = 0x7069_6c6f_7473;

fn qam_scale() -> f64 {
    10f64.sqrt()
}

/// Level pairs `(I, Q)` to `(I + jQ)/√10`.
pub fn qam16_map(levels: &[f32]) -> Result<Vec<C64>, PhyError> {
    if levels.len() % 2 != 0 {
        return Err(PhyError::OddLevels(levels.len()));
    }
    let s = qam_scale();
    Ok(levels.chunks_exact(2).map(|p| C64::new(p[0] as f64 / s, p[1] as f64 / s)).collect())
}

fn nearest_level(v: f64) -> f32 {
    if v < -2.0 {
        -3.0
    } else if v < 0.0 {
        -1.0
    } else if v < 2.0 {
        1.0
    } else {
        3.0
    }
}

/// Nearest constellation point per axis, returned as interleaved levels.
pub fn qam16_demap(symbols: &[C64]) -> Vec<f32> {
    let s = qam_scale();
    symbols.iter().flat_map(|z| [nearest_level(z.re * s), nearest_level(z.im * s)]).collect()
}

/// Fixed unit-power QPSK pilot values, one per pilot bin.
pub fn pilot_symbols(cfg: &LinkConfig) -> Vec<C64> {
    let mut rng = ChaCha8Rng::seed_from_u64(PILOT_SEED);
    cfg.pilots
        .iter()
        .map(|_| {
            let re = if rng.random::<bool>() { FRAC_1_SQRT_2 } else { -FRAC_1_SQRT_2 };
            let im = if rng.random::<bool>() { FRAC_1_SQRT_2 } else { -FRAC_1_SQRT_2 };
            C64::new(re, im)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct OfdmFrame {
    /// Frequency-domain grid, one `fft_size` vector per OFDM symbol.
    pub freq: Vec<Vec<C64>>,
    /// Time samples, `fft_size + cp_len` per OFDM symbol.
    pub time: Vec<C64>,
    pub n_symbols: usize,
    /// Filler data symbols appended to the last OFDM symbol.
    pub n_pad: usize,
}

// Both transforms are scaled by 1/√N so time- and frequency-domain power agree.
pub fn ofdm_modulate(symbols: &[C64], cfg: &LinkConfig) -> Result<OfdmFrame, PhyError> {
    cfg.validate()?;
    if symbols.is_empty() {
        return Err(PhyError::Empty);
    }
    let n = cfg.fft_size;
    let data_bins = cfg.data_bins();
    let pilots = pilot_symbols(cfg);
    let n_symbols = symbols.len().div_ceil(cfg.n_data);
    let n_pad = n_symbols * cfg.n_data - symbols.len();
    let pad = qam16_map(&[PAD_LEVEL, PAD_LEVEL])?[0];

    let mut planner = FftPlanner::new();
    let ifft = planner.plan_fft_inverse(n);
    let scale = 1.0 / (n as f64).sqrt();
    let mut freq = Vec::with_capacity(n_symbols);
    let mut time = Vec::with_capacity(n_symbols * cfg.symbol_len());
    for s in 0..n_symbols {
        let mut grid = vec![C64::new(0.0, 0.0); n];
        for (&k, &p) in cfg.pilots.iter().zip(&pilots) {
            grid[k] = p;
        }
        for (i, &k) in data_bins.iter().enumerate() {
            grid[k] = symbols.get(s * cfg.n_data + i).copied().unwrap_or(pad);
        }
        let mut t = grid.clone();
        ifft.process(&mut t);
        t.iter_mut().for_each(|v| *v *= scale);
        time.extend_from_slice(&t[n - cfg.cp_len..]);
        time.extend_from_slice(&t);
        freq.push(grid);
    }
    Ok(OfdmFrame { freq, time, n_symbols, n_pad })
}

/// Strip cyclic prefixes and FFT each OFDM symbol back to its full bin grid.
pub fn ofdm_demodulate(time: &[C64], cfg: &LinkConfig) -> Result<Vec<Vec<C64>>, PhyError> {
    cfg.validate()?;
    let len = cfg.symbol_len();
    if time.is_empty() {
        return Err(PhyError::Empty);
    }
    if time.len() % len != 0 {
        return Err(PhyError::Length(format!("{} samples is not a multiple of {len}", time.len())));
    }
    let n = cfg.fft_size;
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(n);
    let scale = 1.0 / (n as f64).sqrt();
    Ok(time
        .chunks_exact(len)
        .map(|sym| {
            let mut g = sym[cfg.cp_len..].to_vec();
            fft.process(&mut g);
            g.iter_mut().for_each(|v| *v *= scale);
            g
        })
        .collect())
}
