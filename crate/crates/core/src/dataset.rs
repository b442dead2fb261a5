//! Synthetic scenes with known object boxes, and PPM directory datasets.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::detector::{load_detections, sidecar_path, to_json, Detection, DetectionSet, DetectionSource};
use crate::vision::{load_image, save_image, ImageTensor};

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("no .ppm images in {0}")]
    Empty(PathBuf),
    #[error("{path}: image is {got:?}, expected {want:?}")]
    Dims { path: PathBuf, got: (usize, usize, usize), want: (usize, usize, usize) },
    #[error("{path}: {source}")]
    Vision { path: PathBuf, source: crate::vision::VisionError },
    #[error("{path}: {source}")]
    Detector { path: PathBuf, source: crate::detector::DetectorError },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug)]
pub struct Item {
    pub path: PathBuf,
    pub image: ImageTensor,
    pub det: DetectionSet,
}

fn color<R: Rng>(rng: &mut R, lo: f32, hi: f32) -> [f32; 3] {
    [rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi)]
}

/// One scene: a smooth two-colour gradient background with one or two
/// high-contrast spotted objects. Returns the image and its object boxes.
pub fn synth_scene(seed: u64, height: usize, width: usize) -> (ImageTensor, DetectionSet) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = ImageTensor::filled(height, width, 3, 0.0);
    let c0 = color(&mut rng, 0.15, 0.85);
    let c1 = color(&mut rng, 0.15, 0.85);
    let angle: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let diag = ((height * height + width * width) as f32).sqrt();
    for y in 0..height {
        for x in 0..width {
            let t = 0.5 + ((x as f32 - width as f32 / 2.0) * dx + (y as f32 - height as f32 / 2.0) * dy) / diag;
            for c in 0..3 {
                img.set(y, x, c, c0[c] + (c1[c] - c0[c]) * t);
            }
        }
    }

    let side = height.min(width) as f64;
    let n_obj = rng.random_range(1..=2);
    let mut dets = Vec::new();
    for _ in 0..n_obj {
        let bw = rng.random_range(0.25 * side..0.5 * side).round();
        let bh = rng.random_range(0.25 * side..0.5 * side).round();
        let x0 = rng.random_range(0.0..=(width as f64 - bw)).floor();
        let y0 = rng.random_range(0.0..=(height as f64 - bh)).floor();
        let disk = rng.random_bool(0.5);
        let (mut fg, mut bg) = (color(&mut rng, 0.0, 0.35), color(&mut rng, 0.65, 1.0));
        if rng.random_bool(0.5) {
            std::mem::swap(&mut fg, &mut bg);
        }
        // Pixel-centred spots, large enough to be DoG extrema inside the
        // first octave.
        let spots: Vec<(f64, f64, f64)> = (0..rng.random_range(1..=3))
            .map(|_| {
                let r: f64 = rng.random_range(2.8..3.8);
                let sx = rng.random_range(x0 + 2.0..(x0 + bw - 2.0).max(x0 + 2.5)).floor();
                let sy = rng.random_range(y0 + 2.0..(y0 + bh - 2.0).max(y0 + 2.5)).floor();
                (sx, sy, r)
            })
            .collect();
        let (cx, cy) = (x0 + bw / 2.0, y0 + bh / 2.0);
        for y in y0 as usize..(y0 + bh) as usize {
            for x in x0 as usize..(x0 + bw) as usize {
                if disk {
                    let u = (x as f64 + 0.5 - cx) / (bw / 2.0);
                    let v = (y as f64 + 0.5 - cy) / (bh / 2.0);
                    if u * u + v * v > 1.0 {
                        continue;
                    }
                }
                let on = spots.iter().any(|&(sx, sy, r)| (x as f64 - sx).powi(2) + (y as f64 - sy).powi(2) <= r * r);
                let col = if on { fg } else { bg };
                for c in 0..3 {
                    img.set(y, x, c, col[c]);
                }
            }
        }
        dets.push(Detection {
            class: if disk { "disk" } else { "box" }.into(),
            conf: 1.0,
            bbox: [x0, y0, x0 + bw, y0 + bh],
        });
    }
    (img, DetectionSet::new(dets, DetectionSource::Sidecar))
}

/// Writes `n` scenes as `img_0000.ppm` plus `img_0000.det.json` sidecars.
pub fn write_synth_dataset(dir: &Path, n: usize, seed: u64, height: usize, width: usize) -> Result<Vec<PathBuf>, DatasetError> {
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(n);
    for i in 0..n {
        let (img, det) = synth_scene(seed.wrapping_mul(1_000_003).wrapping_add(i as u64), height, width);
        let path = dir.join(format!("img_{i:04}.ppm"));
        save_image(&img, &path).map_err(|source| DatasetError::Vision { path: path.clone(), source })?;
        std::fs::write(sidecar_path(&path), to_json(&det))?;
        paths.push(path);
    }
    Ok(paths)
}

/// All `.ppm` files in `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>, DatasetError> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(DatasetError::Empty(dir.to_path_buf()));
    }
    Ok(paths)
}

pub fn load_item(path: &Path, dims: Option<(usize, usize, usize)>) -> Result<Item, DatasetError> {
    let image = load_image(path).map_err(|source| DatasetError::Vision { path: path.to_path_buf(), source })?;
    if let Some(want) = dims.filter(|&d| d != image.dims()) {
        return Err(DatasetError::Dims { path: path.to_path_buf(), got: image.dims(), want });
    }
    let det = load_detections(path, image.width(), image.height())
        .map_err(|source| DatasetError::Detector { path: path.to_path_buf(), source })?;
    Ok(Item { path: path.to_path_buf(), image, det })
}

/// Loads every image of `dir` with its sidecar detections (or an empty stub set).
pub fn load_dataset(dir: &Path, dims: Option<(usize, usize, usize)>) -> Result<Vec<Item>, DatasetError> {
    list_images(dir)?.iter().map(|p| load_item(p, dims)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vision::{dog_keypoints, DogParams};

    #[test]
    fn scenes_are_deterministic_and_in_range() {
        let (a, da) = synth_scene(7, 32, 32);
        let (b, db) = synth_scene(7, 32, 32);
        assert_eq!(a.data(), b.data());
        assert_eq!(da, db);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        da.validate(32, 32).unwrap();
        assert!(!da.is_empty());
    }

    #[test]
    fn objects_carry_keypoints() {
        let mut with = 0;
        for s in 0..20 {
            let (img, _) = synth_scene(s, 32, 32);
            if !dog_keypoints(&img, &DogParams::default()).points.is_empty() {
                with += 1;
            }
        }
        assert!(with >= 15, "{with}/20 scenes with keypoints");
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let paths = write_synth_dataset(dir.path(), 3, 0, 32, 32).unwrap();
        assert!(sidecar_path(&paths[0]).exists());
        let items = load_dataset(dir.path(), Some((32, 32, 3))).unwrap();
        assert_eq!(items.len(), 3);
        let (img, det) = synth_scene(1, 32, 32);
        assert_eq!(items[1].det, det);
        let err = items[1].image.data().iter().zip(img.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(err <= 0.5 / 255.0 + 1e-6);
        assert!(matches!(load_dataset(dir.path(), Some((16, 16, 3))), Err(DatasetError::Dims { .. })));
        let empty = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(empty.path(), None), Err(DatasetError::Empty(_))));
    }
}
