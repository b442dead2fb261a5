use super::VisionError;

/// `H × W × C` image, channel-interleaved, values in `[0,1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self, VisionError> {
        if data.len() != height * width * channels {
            return Err(VisionError::Shape(format!(
                "{height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self { height, width, channels, data: vec![value; height * width * channels] }
    }

    /// Build from 8-bit samples, normalising to `[0,1]`.
    pub fn from_u8(height: usize, width: usize, channels: usize, bytes: &[u8]) -> Result<Self, VisionError> {
        Self::new(height, width, channels, bytes.iter().map(|&b| b as f32 / 255.0).collect())
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Clamp every value into `[0,1]`.
    pub fn normalize(&mut self) {
        self.data.iter_mut().for_each(|v| *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
    }

    pub fn same_shape(&self, other: &ImageTensor) -> bool {
        self.dims() == other.dims()
    }

    /// Mean of each channel.
    pub fn channel_means(&self) -> Vec<f32> {
        let mut sums = vec![0.0f64; self.channels];
        for px in self.data.chunks(self.channels) {
            for (s, &v) in sums.iter_mut().zip(px) {
                *s += v as f64;
            }
        }
        let n = (self.height * self.width).max(1) as f64;
        sums.into_iter().map(|s| (s / n) as f32).collect()
    }

    /// Split into row-major `P×P×C` patches, each stored `(py, px, c)`.
    pub fn patchify(&self, p: usize) -> Result<Vec<Vec<f32>>, VisionError> {
        let grid = PatchGrid::new(self.height, self.width, p)?;
        let c = self.channels;
        let mut out = Vec::with_capacity(grid.n_total());
        for k in 0..grid.n_total() {
            let (y0, x0) = grid.origin(k);
            let mut patch = Vec::with_capacity(p * p * c);
            for y in y0..y0 + p {
                let row = (y * self.width + x0) * c;
                patch.extend_from_slice(&self.data[row..row + p * c]);
            }
            out.push(patch);
        }
        Ok(out)
    }

    pub fn unpatchify(patches: &[Vec<f32>], grid: &PatchGrid, channels: usize) -> Result<Self, VisionError> {
        let p = grid.patch_size();
        if patches.len() != grid.n_total() || patches.iter().any(|q| q.len() != p * p * channels) {
            return Err(VisionError::Shape(format!("{} patches do not fill {grid:?}", patches.len())));
        }
        let (h, w) = (grid.rows() * p, grid.cols() * p);
        let mut img = Self::filled(h, w, channels, 0.0);
        for (k, patch) in patches.iter().enumerate() {
            let (y0, x0) = grid.origin(k);
            for (dy, src) in patch.chunks(p * channels).enumerate() {
                let row = ((y0 + dy) * w + x0) * channels;
                img.data[row..row + p * channels].copy_from_slice(src);
            }
        }
        Ok(img)
    }
}

/// Square patch tiling of an image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    p: usize,
    rows: usize,
    cols: usize,
}

impl PatchGrid {
    pub fn new(height: usize, width: usize, p: usize) -> Result<Self, VisionError> {
        if p == 0 || height % p != 0 || width % p != 0 || height == 0 || width == 0 {
            return Err(VisionError::Shape(format!("{height}x{width} is not divisible into {p}x{p} patches")));
        }
        Ok(Self { p, rows: height / p, cols: width / p })
    }

    pub fn patch_size(&self) -> usize {
        self.p
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn n_total(&self) -> usize {
        self.rows * self.cols
    }

    /// Top-left pixel `(y, x)` of patch `k`.
    pub fn origin(&self, k: usize) -> (usize, usize) {
        ((k / self.cols) * self.p, (k % self.cols) * self.p)
    }

    /// Patch containing pixel coordinate `(x, y)`; cells are half-open.
    pub fn patch_at(&self, x: f64, y: f64) -> Option<usize> {
        if !(x >= 0.0 && y >= 0.0) {
            return None;
        }
        let (c, r) = ((x / self.p as f64).floor() as usize, (y / self.p as f64).floor() as usize);
        (r < self.rows && c < self.cols).then_some(r * self.cols + c)
    }

    /// 4-neighbours of patch `k` (up, down, left, right) that exist.
    pub fn neighbors(&self, k: usize) -> impl Iterator<Item = (Side, usize)> {
        let (r, c) = (k / self.cols, k % self.cols);
        let (rows, cols) = (self.rows, self.cols);
        [
            (Side::Up, r.checked_sub(1).map(|r| r * cols + c)),
            (Side::Down, (r + 1 < rows).then(|| (r + 1) * cols + c)),
            (Side::Left, c.checked_sub(1).map(|c| r * cols + c)),
            (Side::Right, (c + 1 < cols).then(|| r * cols + c + 1)),
        ]
        .into_iter()
        .filter_map(|(s, n)| n.map(|n| (s, n)))
    }
}

/// Where a neighbouring patch sits relative to the current one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Up,
    Down,
    Left,
    Right,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn full_scale_and_toy_grids() {
        assert_eq!(PatchGrid::new(224, 224, 16).unwrap().n_total(), 196);
        assert_eq!(PatchGrid::new(32, 32, 8).unwrap().n_total(), 16);
        assert!(PatchGrid::new(30, 32, 8).is_err());
    }

    #[test]
    fn full_scale_patchify_shapes() {
        let img = ImageTensor::filled(224, 224, 3, 0.5);
        let patches = img.patchify(16).unwrap();
        assert_eq!(patches.len(), 196);
        assert!(patches.iter().all(|p| p.len() == 16 * 16 * 3));
    }

    #[test]
    fn patch_k_covers_expected_cell() {
        let mut img = ImageTensor::filled(16, 24, 1, 0.0);
        // mark pixel (y=9, x=17): row 1, col 2 of an 8-px grid -> patch 1*3+2 = 5
        img.set(9, 17, 0, 1.0);
        let patches = img.patchify(8).unwrap();
        assert_eq!(patches[5][8 + 1], 1.0);
        assert_eq!(patches.iter().flatten().filter(|&&v| v == 1.0).count(), 1);
    }

    #[test]
    fn half_open_cells() {
        let g = PatchGrid::new(32, 32, 8).unwrap();
        assert_eq!(g.patch_at(0.0, 0.0), Some(0));
        assert_eq!(g.patch_at(8.0, 0.0), Some(1));
        assert_eq!(g.patch_at(7.999, 8.0), Some(4));
        assert_eq!(g.patch_at(32.0, 0.0), None);
    }

    proptest! {
        #[test]
        fn patchify_round_trip(rows in 1usize..4, cols in 1usize..4, p in 1usize..6, c in 1usize..4, seed in 0u64..1000) {
            let (h, w) = (rows * p, cols * p);
            let data: Vec<f32> = (0..h * w * c).map(|i| ((i as u64 * 2654435761 + seed) % 997) as f32 / 997.0).collect();
            let img = ImageTensor::new(h, w, c, data).unwrap();
            let grid = PatchGrid::new(h, w, p).unwrap();
            let back = ImageTensor::unpatchify(&img.patchify(p).unwrap(), &grid, c).unwrap();
            prop_assert_eq!(back, img);
        }
    }
}
