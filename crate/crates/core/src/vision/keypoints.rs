//! Difference-of-Gaussians keypoint detection (the detection stage of SIFT).

use std::io::Write;

use super::{luma, ImageTensor, PatchGrid};

#[derive(Clone, Debug)]
pub struct DogParams {
    pub octaves: usize,
    pub scales_per_octave: usize,
    pub sigma: f64,
    pub contrast_threshold: f64,
    pub edge_ratio: f64,
    /// Blur already present in the input image.
    pub assumed_blur: f64,
    pub min_size: usize,
}

impl Default for DogParams {
    fn default() -> Self {
        Self {
            octaves: 3,
            scales_per_octave: 3,
            sigma: 1.6,
            contrast_threshold: 0.03,
            edge_ratio: 10.0,
            assumed_blur: 0.5,
            min_size: 16,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub scale: f64,
    pub response: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeypointList {
    pub points: Vec<Keypoint>,
    /// Set when the image was below the minimum size and detection was skipped.
    pub too_small: bool,
}

#[derive(Clone)]
struct Plane {
    w: usize,
    h: usize,
    v: Vec<f64>,
}

impl Plane {
    fn at(&self, x: usize, y: usize) -> f64 {
        self.v[y * self.w + x]
    }
}

fn kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur with replicated borders.
fn blur(p: &Plane, sigma: f64) -> Plane {
    let k = kernel(sigma);
    let r = (k.len() / 2) as isize;
    let clampi = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; p.v.len()];
    for y in 0..p.h {
        for x in 0..p.w {
            tmp[y * p.w + x] =
                k.iter().enumerate().map(|(j, &c)| c * p.at(clampi(x as isize + j as isize - r, p.w), y)).sum();
        }
    }
    let mut out = vec![0.0; p.v.len()];
    for y in 0..p.h {
        for x in 0..p.w {
            out[y * p.w + x] =
                k.iter().enumerate().map(|(j, &c)| c * tmp[clampi(y as isize + j as isize - r, p.h) * p.w + x]).sum();
        }
    }
    Plane { w: p.w, h: p.h, v: out }
}

fn downsample(p: &Plane) -> Plane {
    let (w, h) = (p.w / 2, p.h / 2);
    let v = (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).map(|(x, y)| p.at(2 * x, 2 * y)).collect();
    Plane { w, h, v }
}

fn is_extremum(dog: &[Plane], i: usize, x: usize, y: usize) -> bool {
    let v = dog[i].at(x, y);
    let mut greater = true;
    let mut less = true;
    for layer in &dog[i - 1..=i + 1] {
        for ny in y - 1..=y + 1 {
            for nx in x - 1..=x + 1 {
                if std::ptr::eq(layer, &dog[i]) && nx == x && ny == y {
                    continue;
                }
                let n = layer.at(nx, ny);
                greater &= v > n;
                less &= v < n;
                if !greater && !less {
                    return false;
                }
            }
        }
    }
    greater || less
}

/// Principal-curvature ratio test on the 2×2 spatial Hessian.
fn passes_edge_test(d: &Plane, x: usize, y: usize, r: f64) -> bool {
    let c = d.at(x, y);
    let dxx = d.at(x + 1, y) + d.at(x - 1, y) - 2.0 * c;
    let dyy = d.at(x, y + 1) + d.at(x, y - 1) - 2.0 * c;
    let dxy = (d.at(x + 1, y + 1) - d.at(x + 1, y - 1) - d.at(x - 1, y + 1) + d.at(x - 1, y - 1)) / 4.0;
    let tr = dxx + dyy;
    let det = dxx * dyy - dxy * dxy;
    det > 0.0 && tr * tr / det < (r + 1.0).powi(2) / r
}

/// Scale-space extrema of the DoG pyramid of the image's luma.
pub fn dog_keypoints(img: &ImageTensor, params: &DogParams) -> KeypointList {
    if img.height() < params.min_size || img.width() < params.min_size {
        return KeypointList { points: Vec::new(), too_small: true };
    }
    let s = params.scales_per_octave;
    let k = 2f64.powf(1.0 / s as f64);
    let gray = Plane { w: img.width(), h: img.height(), v: luma(img) };
    let init = (params.sigma.powi(2) - params.assumed_blur.powi(2)).max(0.01).sqrt();
    let mut base = blur(&gray, init);
    let mut points = Vec::new();
    for octave in 0..params.octaves {
        if base.w < 3 || base.h < 3 {
            break;
        }
        let mut gauss = vec![base.clone()];
        for i in 1..s + 3 {
            let prev = params.sigma * k.powi(i as i32 - 1);
            let step = (prev * k).powi(2) - prev.powi(2);
            gauss.push(blur(&gauss[i - 1], step.sqrt()));
        }
        let dog: Vec<Plane> = gauss
            .windows(2)
            .map(|p| Plane { w: p[0].w, h: p[0].h, v: p[1].v.iter().zip(&p[0].v).map(|(a, b)| a - b).collect() })
            .collect();
        let factor = (1usize << octave) as f64;
        for i in 1..=s {
            let d = &dog[i];
            for y in 1..d.h - 1 {
                for x in 1..d.w - 1 {
                    let v = d.at(x, y);
                    if v.abs() < params.contrast_threshold
                        || !is_extremum(&dog, i, x, y)
                        || !passes_edge_test(d, x, y, params.edge_ratio)
                    {
                        continue;
                    }
                    points.push(Keypoint {
                        x: x as f64 * factor,
                        y: y as f64 * factor,
                        scale: params.sigma * k.powi(i as i32) * factor,
                        response: v.abs(),
                    });
                }
            }
        }
        base = downsample(&gauss[s]);
    }
    KeypointList { points, too_small: false }
}

/// Number of keypoints falling in each patch (half-open cells, out-of-bounds ignored).
pub fn keypoints_per_patch(kps: &KeypointList, grid: &PatchGrid) -> Vec<usize> {
    let mut counts = vec![0; grid.n_total()];
    for kp in &kps.points {
        if let Some(k) = grid.patch_at(kp.x, kp.y) {
            counts[k] += 1;
        }
    }
    counts
}

/// CSV dump with header `x,y,scale,response`.
pub fn write_keypoints_csv<W: Write>(kps: &KeypointList, mut w: W) -> std::io::Result<()> {
    writeln!(w, "x,y,scale,response")?;
    for k in &kps.points {
        writeln!(w, "{},{},{},{}", k.x, k.y, k.scale, k.response)?;
    }
    Ok(())
}
