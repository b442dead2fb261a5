use super::{ImageTensor, VisionError};

/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;

const SSIM_WIN: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

/// Luma plane (0.299 R + 0.587 G + 0.114 B); single-channel images pass through.
pub fn luma(img: &ImageTensor) -> Vec<f64> {
    match img.channels() {
        1 => img.data().iter().map(|&v| v as f64).collect(),
        c => img
            .data()
            .chunks(c)
            .map(|px| 0.299 * px[0] as f64 + 0.587 * px[1] as f64 + 0.114 * px[2] as f64)
            .collect(),
    }
}

fn check_shapes(a: &ImageTensor, b: &ImageTensor) -> Result<(), VisionError> {
    if !a.same_shape(b) {
        return Err(VisionError::Shape(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// `10·log10(1/MSE)` over all samples, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64, VisionError> {
    check_shapes(a, b)?;
    let n = a.data().len().max(1) as f64;
    let mse = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / n;
    if mse <= 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WIN / 2) as f64;
    let mut w: Vec<f64> = (0..SSIM_WIN * SSIM_WIN)
        .map(|i| {
            let (y, x) = ((i / SSIM_WIN) as f64 - half, (i % SSIM_WIN) as f64 - half);
            (-(x * x + y * y) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Mean SSIM over all fully-contained 11×11 Gaussian windows of the luma planes.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64, VisionError> {
    check_shapes(a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WIN || w < SSIM_WIN {
        return Err(VisionError::Shape(format!("{h}x{w} is smaller than the {SSIM_WIN}x{SSIM_WIN} window")));
    }
    let (la, lb) = (luma(a), luma(b));
    let win = gaussian_window();
    let c1 = K1 * K1;
    let c2 = K2 * K2;
    let mut total = 0.0;
    let mut count = 0usize;
    for y in 0..=h - SSIM_WIN {
        for x in 0..=w - SSIM_WIN {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..SSIM_WIN {
                for dx in 0..SSIM_WIN {
                    let g = win[dy * SSIM_WIN + dx];
                    let i = (y + dy) * w + x + dx;
                    let (u, v) = (la[i], lb[i]);
                    ma += g * u;
                    mb += g * v;
                    saa += g * u * u;
                    sbb += g * v * v;
                    sab += g * u * v;
                }
            }
            let va = saa - ma * ma;
            let vb = sbb - mb * mb;
            let cov = sab - ma * mb;
            let s = ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            total += s;
            count += 1;
        }
    }
    Ok((total / count as f64).clamp(-1.0, 1.0))
}
