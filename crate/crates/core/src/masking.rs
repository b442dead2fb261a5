//! Adaptive preprocessing: importance ordering of patches, the mask-ratio
//! policy, mask plans and background restoration.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::detector::DetectionSet;
use crate::nncore::{adam_step, AdamState, Graph, ParamId, ParamStore, Tensor};
use crate::vision::{ImageTensor, PatchGrid, Side};

pub const MR_MAX: f64 = 0.7;

#[derive(Debug, thiserror::Error)]
pub enum MaskingError {
    #[error("shape: {0}")]
    Shape(String),
    #[error("invalid: {0}")]
    Invalid(String),
    #[error("every patch is masked; nothing to restore from")]
    AllMasked,
    #[error("policy file line {line}: {msg}")]
    PolicyFile { line: usize, msg: String },
    #[error(transparent)]
    Nn(#[from] crate::nncore::NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Patches whose cell intersects any detection box with positive area.
pub fn object_patches(det: &DetectionSet, grid: &PatchGrid) -> Vec<bool> {
    let p = grid.patch_size() as f64;
    let mut obj = vec![false; grid.n_total()];
    for d in &det.detections {
        let [x0, y0, x1, y1] = d.bbox;
        let c0 = (x0 / p).floor().max(0.0) as usize;
        let r0 = (y0 / p).floor().max(0.0) as usize;
        let c1 = ((x1 / p).ceil() as usize).min(grid.cols());
        let r1 = ((y1 / p).ceil() as usize).min(grid.rows());
        for r in r0..r1 {
            for c in c0..c1 {
                obj[r * grid.cols() + c] = true;
            }
        }
    }
    obj
}

/// Fraction of patches that intersect a detection.
pub fn object_area_frac(det: &DetectionSet, grid: &PatchGrid) -> f64 {
    let obj = object_patches(det, grid);
    obj.iter().filter(|&&o| o).count() as f64 / grid.n_total() as f64
}

/// Object patches first, then the rest; each part by descending keypoint
/// count, ties by ascending index.
pub fn importance_order(det: &DetectionSet, counts: &[usize], grid: &PatchGrid) -> Result<Vec<usize>, MaskingError> {
    if counts.len() != grid.n_total() {
        return Err(MaskingError::Shape(format!("{} counts for {} patches", counts.len(), grid.n_total())));
    }
    let obj = object_patches(det, grid);
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by_key(|&k| (!obj[k], std::cmp::Reverse(counts[k]), k));
    Ok(order)
}

/// `min(⌊mr·n_total⌋, n_total − n_object)`.
///
/// The floor carries a 1e-9 guard so that e.g. `0.29·100` counts as 29.
pub fn masked_count(mr: f64, n_total: usize, n_object: usize) -> usize {
    let want = (mr.clamp(0.0, MR_MAX) * n_total as f64 + 1e-9).floor() as usize;
    want.min(n_total - n_object.min(n_total))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    pub order: Vec<usize>,
    pub mr: f64,
    pub grid: PatchGrid,
    pub channels: usize,
    /// Per patch, row-major.
    pub masked: Vec<bool>,
    pub object: Vec<bool>,
    pub n_total: usize,
    pub n_unmasked: usize,
}

impl MaskPlan {
    /// A plan that masks nothing.
    pub fn unmasked(grid: PatchGrid, channels: usize) -> Self {
        let n = grid.n_total();
        Self {
            order: (0..n).collect(),
            mr: 0.0,
            grid,
            channels,
            masked: vec![false; n],
            object: vec![false; n],
            n_total: n,
            n_unmasked: n,
        }
    }

    pub fn height(&self) -> usize {
        self.grid.rows() * self.grid.patch_size()
    }

    pub fn width(&self) -> usize {
        self.grid.cols() * self.grid.patch_size()
    }

    pub fn masked_count(&self) -> usize {
        self.n_total - self.n_unmasked
    }

    /// 1 for kept patches, 0 for masked ones.
    pub fn patch_mask(&self) -> Vec<f32> {
        self.masked.iter().map(|&m| if m { 0.0 } else { 1.0 }).collect()
    }

    /// `m ∈ {0,1}^{H×W×C}`, HWC interleaved.
    pub fn mask_matrix(&self) -> Vec<f32> {
        let (h, w, c, p) = (self.height(), self.width(), self.channels, self.grid.patch_size());
        let mut m = vec![1.0f32; h * w * c];
        for (k, _) in self.masked.iter().enumerate().filter(|(_, &m)| m) {
            let (y0, x0) = self.grid.origin(k);
            for y in y0..y0 + p {
                m[(y * w + x0) * c..(y * w + x0 + p) * c].fill(0.0);
            }
        }
        m
    }
}

/// Mask the tail of `order`, skipping object patches.
pub fn build_mask_plan(
    order: &[usize],
    mr: f64,
    det: &DetectionSet,
    grid: &PatchGrid,
    channels: usize,
) -> Result<MaskPlan, MaskingError> {
    let n = grid.n_total();
    let mut seen = vec![false; n];
    if order.len() != n || !order.iter().all(|&k| k < n && !std::mem::replace(&mut seen[k], true)) {
        return Err(MaskingError::Invalid(format!("order is not a permutation of 0..{n}")));
    }
    if !mr.is_finite() {
        return Err(MaskingError::Invalid(format!("mask ratio {mr}")));
    }
    let mr = mr.clamp(0.0, MR_MAX);
    let object = object_patches(det, grid);
    let n_obj = object.iter().filter(|&&o| o).count();
    let count = masked_count(mr, n, n_obj);
    let mut masked = vec![false; n];
    for &k in order.iter().rev().filter(|&&k| !object[k]).take(count) {
        masked[k] = true;
    }
    Ok(MaskPlan { order: order.to_vec(), mr, grid: *grid, channels, masked, object, n_total: n, n_unmasked: n - count })
}

fn check_plan(img: &ImageTensor, plan: &MaskPlan) -> Result<(), MaskingError> {
    if img.dims() != (plan.height(), plan.width(), plan.channels) {
        return Err(MaskingError::Shape(format!(
            "image {:?} vs plan {}x{}x{}",
            img.dims(),
            plan.height(),
            plan.width(),
            plan.channels
        )));
    }
    Ok(())
}

/// `p = s ⊙ m`.
pub fn apply_mask(s: &ImageTensor, plan: &MaskPlan) -> Result<ImageTensor, MaskingError> {
    check_plan(s, plan)?;
    let mut out = s.clone();
    for (v, m) in out.data_mut().iter_mut().zip(plan.mask_matrix()) {
        *v *= m;
    }
    Ok(out)
}

/// Fills masked regions of a decoded image.
pub trait Restorer {
    fn restore(&self, decoded: &ImageTensor, plan: &MaskPlan) -> Result<ImageTensor, MaskingError>;
}

/// Fills each masked patch with the mean colour of the adjacent border pixels
/// of its unmasked 4-neighbours, or the global unmasked mean when it has none.
#[derive(Clone, Copy, Debug, Default)]
pub struct NeighborMeanRestorer;

impl Restorer for NeighborMeanRestorer {
    fn restore(&self, decoded: &ImageTensor, plan: &MaskPlan) -> Result<ImageTensor, MaskingError> {
        check_plan(decoded, plan)?;
        if plan.n_unmasked == 0 {
            return Err(MaskingError::AllMasked);
        }
        let (c, p, grid) = (plan.channels, plan.grid.patch_size(), plan.grid);
        let mut global = vec![0.0f64; c];
        let mut n_global = 0usize;
        for k in (0..plan.n_total).filter(|&k| !plan.masked[k]) {
            let (y0, x0) = grid.origin(k);
            for y in y0..y0 + p {
                for x in x0..x0 + p {
                    for (ch, g) in global.iter_mut().enumerate() {
                        *g += decoded.get(y, x, ch) as f64;
                    }
                }
            }
            n_global += p * p;
        }
        global.iter_mut().for_each(|g| *g /= n_global as f64);

        let mut out = decoded.clone();
        for k in (0..plan.n_total).filter(|&k| plan.masked[k]) {
            let (y0, x0) = grid.origin(k);
            let mut sum = vec![0.0f64; c];
            let mut n = 0usize;
            for (side, nb) in grid.neighbors(k) {
                if plan.masked[nb] {
                    continue;
                }
                let pixels: Vec<(usize, usize)> = match side {
                    Side::Up => (x0..x0 + p).map(|x| (y0 - 1, x)).collect(),
                    Side::Down => (x0..x0 + p).map(|x| (y0 + p, x)).collect(),
                    Side::Left => (y0..y0 + p).map(|y| (y, x0 - 1)).collect(),
                    Side::Right => (y0..y0 + p).map(|y| (y, x0 + p)).collect(),
                };
                for (y, x) in pixels {
                    for (ch, s) in sum.iter_mut().enumerate() {
                        *s += decoded.get(y, x, ch) as f64;
                    }
                    n += 1;
                }
            }
            let fill: Vec<f32> = if n == 0 {
                global.iter().map(|&g| g as f32).collect()
            } else {
                sum.iter().map(|&s| (s / n as f64) as f32).collect()
            };
            for y in y0..y0 + p {
                for x in x0..x0 + p {
                    for (ch, &f) in fill.iter().enumerate() {
                        out.set(y, x, ch, f);
                    }
                }
            }
        }
        Ok(out)
    }
}

pub fn restore_background(decoded: &ImageTensor, plan: &MaskPlan) -> Result<ImageTensor, MaskingError> {
    NeighborMeanRestorer.restore(decoded, plan)
}

// ---- MR policy ----

/// Bilinear lookup over (SNR dB, object-area fraction), clamped at the edges.
#[derive(Clone, Debug, PartialEq)]
pub struct MrTable {
    snrs: Vec<f64>,
    areas: Vec<f64>,
    /// `values[i * areas.len() + j]` for `snrs[i]`, `areas[j]`.
    values: Vec<f64>,
}

impl MrTable {
    /// Values are clipped to [0, 0.7] and projected to be non-increasing in SNR.
    pub fn new(snrs: Vec<f64>, areas: Vec<f64>, values: Vec<f64>) -> Result<Self, MaskingError> {
        let strictly_increasing = |v: &[f64]| v.windows(2).all(|w| w[0] < w[1]) && v.iter().all(|x| x.is_finite());
        if snrs.is_empty() || areas.is_empty() || !strictly_increasing(&snrs) || !strictly_increasing(&areas) {
            return Err(MaskingError::Invalid("table axes must be non-empty, finite and increasing".into()));
        }
        if values.len() != snrs.len() * areas.len() || values.iter().any(|v| !v.is_finite()) {
            return Err(MaskingError::Invalid(format!(
                "{} values for a {}x{} table",
                values.len(),
                snrs.len(),
                areas.len()
            )));
        }
        let mut t = Self { snrs, areas, values };
        t.values.iter_mut().for_each(|v| *v = v.clamp(0.0, MR_MAX));
        let na = t.areas.len();
        for i in 1..t.snrs.len() {
            for j in 0..na {
                t.values[i * na + j] = t.values[i * na + j].min(t.values[(i - 1) * na + j]);
            }
        }
        Ok(t)
    }

    /// One MR per SNR, independent of area.
    pub fn from_snr_points(points: &[(f64, f64)]) -> Result<Self, MaskingError> {
        let mut pts = points.to_vec();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let snrs = pts.iter().map(|p| p.0).collect();
        let values = pts.iter().flat_map(|p| [p.1, p.1]).collect();
        Self::new(snrs, vec![0.0, 1.0], values)
    }

    pub fn snrs(&self) -> &[f64] {
        &self.snrs
    }

    pub fn areas(&self) -> &[f64] {
        &self.areas
    }

    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.areas.len() + j]
    }

    pub fn eval(&self, snr: f64, area: f64) -> f64 {
        let (i0, i1, ti) = bracket(&self.snrs, snr);
        let (j0, j1, tj) = bracket(&self.areas, area);
        let v = |i, j| self.value(i, j);
        let top = v(i0, j0) * (1.0 - tj) + v(i0, j1) * tj;
        let bottom = v(i1, j0) * (1.0 - tj) + v(i1, j1) * tj;
        (top * (1.0 - ti) + bottom * ti).clamp(0.0, MR_MAX)
    }
}

fn bracket(axis: &[f64], x: f64) -> (usize, usize, f64) {
    let last = axis.len() - 1;
    if x.is_nan() || x <= axis[0] {
        return (0, 0, 0.0);
    }
    if x >= axis[last] {
        return (last, last, 0.0);
    }
    let i = axis.partition_point(|&a| a <= x) - 1;
    (i, i + 1, (x - axis[i]) / (axis[i + 1] - axis[i]))
}

/// 2→16→1 perceptron, tanh hidden layer, output `0.7·sigmoid`.
#[derive(Clone, Debug)]
pub struct MrPerceptron {
    params: ParamStore<f64>,
    snr_center: f64,
    snr_scale: f64,
    /// Monotone tabulation of the network used for evaluation.
    table: MrTable,
}

const HIDDEN: usize = 16;

impl MrPerceptron {
    fn ids(&self) -> [ParamId; 4] {
        ["mrnet.w1", "mrnet.b1", "mrnet.w2", "mrnet.b2"].map(|n| self.params.find(n).expect("mrnet param"))
    }

    /// Raw network output before monotone projection.
    pub fn forward(&self, snr: f64, area: f64) -> f64 {
        let [w1, b1, w2, b2] = self.ids().map(|id| self.params.get(id).data());
        let x = [(snr - self.snr_center) / self.snr_scale, area];
        let mut z = b2[0];
        for h in 0..HIDDEN {
            let a = (x[0] * w1[h] + x[1] * w1[HIDDEN + h] + b1[h]).tanh();
            z += a * w2[h];
        }
        MR_MAX / (1.0 + (-z).exp())
    }

    pub fn table(&self) -> &MrTable {
        &self.table
    }

    pub fn params(&self) -> &ParamStore<f64> {
        &self.params
    }
}

#[derive(Clone, Debug)]
pub enum MrPolicy {
    Table(MrTable),
    Perceptron(MrPerceptron),
}

impl Default for MrPolicy {
    /// MR 0.7 at and below 0 dB, 0 from 5 dB up.
    fn default() -> Self {
        MrPolicy::Table(
            MrTable::from_snr_points(&[(-5.0, 0.7), (0.0, 0.7), (5.0, 0.0), (10.0, 0.0), (15.0, 0.0)])
                .expect("static table"),
        )
    }
}

impl MrPolicy {
    pub fn table(&self) -> &MrTable {
        match self {
            MrPolicy::Table(t) => t,
            MrPolicy::Perceptron(p) => p.table(),
        }
    }

    pub fn eval(&self, snr: f64, area: f64) -> f64 {
        self.table().eval(snr, area.clamp(0.0, 1.0))
    }

    /// Policy output capped at `1 − area`.
    pub fn effective(&self, snr: f64, area: f64) -> f64 {
        self.eval(snr, area).min(1.0 - area.clamp(0.0, 1.0))
    }

    pub fn save_csv(&self, path: &Path) -> Result<(), MaskingError> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "snr_db,area_frac,mr")?;
        let t = self.table();
        for (i, s) in t.snrs.iter().enumerate() {
            for (j, a) in t.areas.iter().enumerate() {
                writeln!(w, "{s},{a},{}", t.value(i, j))?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load_csv(path: &Path) -> Result<Self, MaskingError> {
        let r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut rows = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || (n == 0 && line.starts_with("snr_db")) {
                continue;
            }
            let f: Vec<f64> = line
                .split(',')
                .map(|x| x.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| MaskingError::PolicyFile { line: n + 1, msg: e.to_string() })?;
            if f.len() != 3 {
                return Err(MaskingError::PolicyFile { line: n + 1, msg: format!("expected 3 fields, got {}", f.len()) });
            }
            rows.push((f[0], f[1], f[2]));
        }
        let mut snrs: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let mut areas: Vec<f64> = rows.iter().map(|r| r.1).collect();
        for v in [&mut snrs, &mut areas] {
            v.sort_by(f64::total_cmp);
            v.dedup();
        }
        if rows.len() != snrs.len() * areas.len() {
            return Err(MaskingError::PolicyFile { line: 0, msg: "rows do not form a full snr x area grid".into() });
        }
        let mut values = vec![f64::NAN; rows.len()];
        for (s, a, m) in rows {
            let i = snrs.iter().position(|&x| x == s).expect("present");
            let j = areas.iter().position(|&x| x == a).expect("present");
            values[i * areas.len() + j] = m;
        }
        if values.iter().any(|v| v.is_nan()) {
            return Err(MaskingError::PolicyFile { line: 0, msg: "duplicate grid point".into() });
        }
        Ok(MrPolicy::Table(MrTable::new(snrs, areas, values)?))
    }
}

pub fn mr_policy_eval(policy: &MrPolicy, snr: f64, area: f64) -> f64 {
    policy.eval(snr, area)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepRecord {
    pub snr_db: f64,
    pub mr: f64,
    pub metric: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FitMode {
    Table,
    Perceptron,
}

const PLATEAU_TOL: f64 = 1e-9;

/// For every SNR, the MR maximizing the mean metric; ties go to the smaller MR.
pub fn sweep_argmax(sweep: &[SweepRecord]) -> Result<Vec<(f64, f64)>, MaskingError> {
    if sweep.is_empty() {
        return Err(MaskingError::Invalid("empty sweep".into()));
    }
    if sweep.iter().any(|r| !(r.snr_db.is_finite() && r.mr.is_finite() && r.metric.is_finite())) {
        return Err(MaskingError::Invalid("non-finite sweep record".into()));
    }
    let mut snrs: Vec<f64> = sweep.iter().map(|r| r.snr_db).collect();
    snrs.sort_by(f64::total_cmp);
    snrs.dedup();
    let mut out = Vec::with_capacity(snrs.len());
    for s in snrs {
        let mut mrs: Vec<f64> = sweep.iter().filter(|r| r.snr_db == s).map(|r| r.mr).collect();
        mrs.sort_by(f64::total_cmp);
        mrs.dedup();
        let mut best: Option<(f64, f64)> = None;
        for mr in mrs {
            let vals: Vec<f64> = sweep.iter().filter(|r| r.snr_db == s && r.mr == mr).map(|r| r.metric).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            if best.is_none_or(|(_, b)| mean > b + PLATEAU_TOL) {
                best = Some((mr, mean));
            }
        }
        out.push((s, best.expect("at least one mr").0));
    }
    Ok(out)
}

pub fn fit_mr_policy(sweep: &[SweepRecord], mode: FitMode) -> Result<MrPolicy, MaskingError> {
    let targets = sweep_argmax(sweep)?;
    match mode {
        FitMode::Table => Ok(MrPolicy::Table(MrTable::from_snr_points(&targets)?)),
        FitMode::Perceptron => Ok(MrPolicy::Perceptron(fit_perceptron(&targets)?)),
    }
}

const FIT_AREAS: [f64; 3] = [0.0, 0.25, 0.5];
pub const PERCEPTRON_MSE_TARGET: f64 = 0.01;

fn fit_perceptron(targets: &[(f64, f64)]) -> Result<MrPerceptron, MaskingError> {
    let lo = targets.first().expect("non-empty").0;
    let hi = targets.last().expect("non-empty").0;
    let snr_center = 0.5 * (lo + hi);
    let snr_scale = (0.5 * (hi - lo)).max(1.0);

    let mut rng = ChaCha8Rng::seed_from_u64(0x4d52);
    let mut params = ParamStore::<f64>::new();
    let w1 = params.normal(&mut rng, "mrnet", "mrnet.w1", vec![2, HIDDEN], 1.0);
    let b1 = params.normal(&mut rng, "mrnet", "mrnet.b1", vec![HIDDEN], 0.5);
    let w2 = params.normal(&mut rng, "mrnet", "mrnet.w2", vec![HIDDEN, 1], 0.5);
    let b2 = params.constant("mrnet", "mrnet.b2", vec![1], 0.0);

    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for &(s, m) in targets {
        for a in FIT_AREAS {
            xs.extend([(s - snr_center) / snr_scale, a]);
            ys.push(m);
        }
    }
    let n = ys.len();
    let x = Tensor::new(vec![n, 2], xs)?;
    let y = Tensor::new(vec![n, 1], ys)?;
    let half = Tensor::full(vec![n, 1], MR_MAX / 2.0);
    let mut adam = AdamState::new(&params, 0.03);
    let mut mse = f64::INFINITY;
    for _ in 0..4000 {
        let mut g = Graph::new(&params);
        let xi = g.input(x.clone());
        let h = g.linear(xi, w1, b1)?;
        let h = g.tanh(h)?;
        let z = g.linear(h, w2, b2)?;
        // 0.7·sigmoid(z) = 0.35·tanh(z/2) + 0.35
        let z = g.scale(z, 0.5)?;
        let t = g.tanh(z)?;
        let t = g.scale(t, MR_MAX / 2.0)?;
        let c = g.input(half.clone());
        let out = g.add(t, c)?;
        let yi = g.input(y.clone());
        let loss = g.mse_loss(out, yi)?;
        mse = g.scalar(loss);
        if mse < PERCEPTRON_MSE_TARGET * 0.05 {
            break;
        }
        let grads = g.backward(loss)?.params;
        adam_step(&mut params, &grads, &mut adam, |_| true)?;
    }
    if !(mse < PERCEPTRON_MSE_TARGET) {
        return Err(MaskingError::Invalid(format!("perceptron fit stalled at mse {mse:.4}")));
    }
    let mut net = MrPerceptron {
        params,
        snr_center,
        snr_scale,
        table: MrTable::from_snr_points(&[(0.0, 0.0)])?,
    };
    let step = 0.25;
    let n_s = (((hi - lo) / step).ceil() as usize).max(1) + 1;
    let snrs: Vec<f64> = (0..n_s).map(|i| lo + i as f64 * step).collect();
    let areas: Vec<f64> = (0..=10).map(|j| j as f64 / 10.0).collect();
    let values = snrs.iter().flat_map(|&s| areas.iter().map(move |&a| (s, a))).map(|(s, a)| net.forward(s, a)).collect();
    net.table = MrTable::new(snrs, areas, values)?;
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{Detection, DetectionSource};
    use proptest::prelude::*;
    use rand::Rng;

    fn dets(boxes: &[[f64; 4]]) -> DetectionSet {
        DetectionSet::new(
            boxes.iter().map(|&b| Detection { class: "obj".into(), conf: 1.0, bbox: b }).collect(),
            DetectionSource::Sidecar,
        )
    }

    fn grid2() -> PatchGrid {
        PatchGrid::new(16, 16, 8).unwrap()
    }

    #[test]
    fn importance_order_examples() {
        let g = grid2();
        let d = dets(&[[9.0, 9.0, 15.0, 15.0]]);
        assert_eq!(importance_order(&d, &[5, 2, 7, 1], &g).unwrap(), vec![3, 2, 0, 1]);
        assert_eq!(importance_order(&DetectionSet::default(), &[1, 1, 1, 1], &g).unwrap(), vec![0, 1, 2, 3]);
        let all = dets(&[[0.0, 0.0, 16.0, 16.0]]);
        assert_eq!(importance_order(&all, &[0, 3, 1, 2], &g).unwrap(), vec![1, 3, 2, 0]);
        let plan = build_mask_plan(&[1, 3, 2, 0], 0.7, &all, &g, 3).unwrap();
        assert_eq!(plan.n_unmasked, 4);
        assert!(importance_order(&all, &[0, 3], &g).is_err());
    }

    #[test]
    fn partial_overlap_counts_as_object() {
        let g = grid2();
        let obj = object_patches(&dets(&[[7.5, 0.0, 8.5, 1.0]]), &g);
        assert_eq!(obj, vec![true, true, false, false]);
        // Touching an edge without overlap is not an intersection.
        let obj = object_patches(&dets(&[[0.0, 0.0, 8.0, 8.0]]), &g);
        assert_eq!(obj, vec![true, false, false, false]);
        assert_eq!(object_area_frac(&dets(&[[0.0, 0.0, 8.0, 8.0]]), &g), 0.25);
    }

    #[test]
    fn mask_plan_examples() {
        let g = grid2();
        let plan = build_mask_plan(&[3, 2, 0, 1], 0.5, &DetectionSet::default(), &g, 3).unwrap();
        assert_eq!(plan.masked, vec![true, true, false, false]);
        assert_eq!(plan.n_unmasked, 2);

        let plan = build_mask_plan(&[3, 2, 0, 1], 0.0, &DetectionSet::default(), &g, 3).unwrap();
        assert!(plan.mask_matrix().iter().all(|&v| v == 1.0));
        assert_eq!(plan.n_unmasked, 4);

        let big = PatchGrid::new(224, 224, 16).unwrap();
        let order: Vec<usize> = (0..196).collect();
        let plan = build_mask_plan(&order, 0.7, &DetectionSet::default(), &big, 3).unwrap();
        assert_eq!(plan.masked_count(), 137);
        assert_eq!(masked_count(0.29, 100, 0), 29);

        assert!(build_mask_plan(&[0, 0, 1, 2], 0.5, &DetectionSet::default(), &g, 3).is_err());
    }

    #[test]
    fn apply_mask_examples() {
        let g = grid2();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f32> = (0..16 * 16 * 3).map(|_| rng.random()).collect();
        let s = ImageTensor::new(16, 16, 3, data).unwrap();
        let none = MaskPlan::unmasked(g, 3);
        assert_eq!(apply_mask(&s, &none).unwrap(), s);

        let mut all = none.clone();
        all.masked = vec![true; 4];
        all.n_unmasked = 0;
        assert!(apply_mask(&s, &all).unwrap().data().iter().all(|&v| v == 0.0));

        let mut checker = none.clone();
        checker.masked = vec![true, false, false, true];
        checker.n_unmasked = 2;
        let p = apply_mask(&s, &checker).unwrap();
        for (i, (&a, &b)) in p.data().iter().zip(s.data()).enumerate() {
            let (y, x) = ((i / 3) / 16, (i / 3) % 16);
            let k = (y / 8) * 2 + x / 8;
            assert_eq!(a, if checker.masked[k] { 0.0 } else { b });
        }
        assert!(apply_mask(&ImageTensor::filled(8, 8, 3, 0.0), &checker).is_err());
    }

    #[test]
    fn restore_examples() {
        let g = grid2();
        let img = ImageTensor::filled(16, 16, 3, 0.3);
        let none = MaskPlan::unmasked(g, 3);
        assert_eq!(restore_background(&img, &none).unwrap(), img);

        // One unmasked patch (0) but diagonal patch 3 has no unmasked neighbour.
        let mut p = ImageTensor::filled(16, 16, 3, 0.0);
        for y in 0..8 {
            for x in 0..8 {
                p.set(y, x, 0, 0.25);
                p.set(y, x, 1, 0.5);
            }
        }
        let mut plan = none.clone();
        plan.masked = vec![false, true, true, true];
        plan.n_unmasked = 1;
        let r = restore_background(&p, &plan).unwrap();
        assert_eq!((r.get(12, 12, 0), r.get(12, 12, 1), r.get(12, 12, 2)), (0.25, 0.5, 0.0));

        // Masked middle patch of a 1x3 strip between constants 0.2 and 0.6.
        let strip = PatchGrid::new(8, 24, 8).unwrap();
        let mut s = ImageTensor::filled(8, 24, 1, 0.0);
        for y in 0..8 {
            for x in 0..8 {
                s.set(y, x, 0, 0.2);
                s.set(y, x + 16, 0, 0.6);
            }
        }
        let mut plan = MaskPlan::unmasked(strip, 1);
        plan.masked = vec![false, true, false];
        plan.n_unmasked = 2;
        let r = restore_background(&s, &plan).unwrap();
        assert!((r.get(4, 12, 0) - 0.4).abs() < 1e-6);

        let mut all = MaskPlan::unmasked(strip, 1);
        all.masked = vec![true; 3];
        all.n_unmasked = 0;
        assert!(matches!(restore_background(&s, &all), Err(MaskingError::AllMasked)));
    }

    #[test]
    fn default_policy_examples() {
        let p = MrPolicy::default();
        assert_eq!(mr_policy_eval(&p, 10.0, 0.05), 0.0);
        assert_eq!(mr_policy_eval(&p, 0.0, 0.05), 0.7);
        assert_eq!(mr_policy_eval(&p, -5.0, 0.05), 0.7);
        assert_eq!(mr_policy_eval(&p, -30.0, 0.0), 0.7);
        assert!((mr_policy_eval(&p, 2.5, 0.0) - 0.35).abs() < 1e-12);
        assert_eq!(p.effective(-5.0, 0.5), 0.5);
    }

    fn synthetic_sweep() -> Vec<SweepRecord> {
        let mut v = Vec::new();
        for snr in [-5.0, 0.0, 5.0, 10.0, 15.0] {
            let peak = if snr <= 0.0 { 0.7 } else { 0.0 };
            for mr in [0.0, 0.2, 0.4, 0.6, 0.7] {
                v.push(SweepRecord { snr_db: snr, mr, metric: 1.0 - (mr - peak).abs() });
            }
        }
        v
    }

    #[test]
    fn fit_examples() {
        let t = fit_mr_policy(&synthetic_sweep(), FitMode::Table).unwrap();
        assert_eq!(t.eval(-5.0, 0.0), 0.7);
        assert_eq!(t.eval(15.0, 0.0), 0.0);

        let single: Vec<_> = synthetic_sweep().into_iter().filter(|r| r.snr_db == 10.0).collect();
        let c = fit_mr_policy(&single, FitMode::Table).unwrap();
        for s in [-20.0, 0.0, 10.0, 40.0] {
            assert_eq!(c.eval(s, 0.3), 0.0);
        }

        let plateau: Vec<_> = [0.0, 0.2, 0.4, 0.6]
            .iter()
            .map(|&mr| SweepRecord { snr_db: 0.0, mr, metric: if mr >= 0.2 { 0.9 } else { 0.5 } })
            .collect();
        assert_eq!(sweep_argmax(&plateau).unwrap(), vec![(0.0, 0.2)]);
        assert!(fit_mr_policy(&[], FitMode::Table).is_err());
    }

    #[test]
    fn table_projection_makes_policy_monotone() {
        let t = MrTable::from_snr_points(&[(-5.0, 0.2), (0.0, 0.7), (5.0, 0.0)]).unwrap();
        assert_eq!(t.eval(0.0, 0.0), 0.2);
    }

    #[test]
    fn perceptron_fit_matches_table() {
        let p = fit_mr_policy(&synthetic_sweep(), FitMode::Perceptron).unwrap();
        let MrPolicy::Perceptron(net) = &p else { panic!() };
        let targets = sweep_argmax(&synthetic_sweep()).unwrap();
        let mse: f64 = targets.iter().map(|&(s, m)| (net.forward(s, 0.0) - m).powi(2)).sum::<f64>() / 5.0;
        assert!(mse < PERCEPTRON_MSE_TARGET, "{mse}");
        assert!(p.eval(-5.0, 0.0) > 0.6 && p.eval(15.0, 0.0) < 0.1);
        let mut last = f64::INFINITY;
        for i in 0..200 {
            let v = p.eval(-10.0 + i as f64 * 0.15, 0.2);
            assert!((0.0..=MR_MAX).contains(&v) && v <= last + 1e-12);
            last = v;
        }
    }

    #[test]
    fn policy_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        let p = MrPolicy::default();
        p.save_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("snr_db,area_frac,mr\n"));
        let q = MrPolicy::load_csv(&path).unwrap();
        assert_eq!(q.table(), p.table());
        std::fs::write(&path, "snr_db,area_frac,mr\n0,0,abc\n").unwrap();
        assert!(matches!(MrPolicy::load_csv(&path), Err(MaskingError::PolicyFile { line: 2, .. })));
    }

    fn random_case(rng: &mut ChaCha8Rng) -> (PatchGrid, DetectionSet, Vec<usize>, f64) {
        let p = 4;
        let (rows, cols) = (rng.random_range(1..8), rng.random_range(1..8));
        let grid = PatchGrid::new(rows * p, cols * p, p).unwrap();
        let (w, h) = ((cols * p) as f64, (rows * p) as f64);
        let n_boxes = rng.random_range(0..3);
        let boxes: Vec<[f64; 4]> = (0..n_boxes)
            .map(|_| {
                let x0 = rng.random_range(0.0..w - 0.5);
                let y0 = rng.random_range(0.0..h - 0.5);
                [x0, y0, rng.random_range(x0 + 0.1..=w), rng.random_range(y0 + 0.1..=h)]
            })
            .collect();
        let counts = (0..grid.n_total()).map(|_| rng.random_range(0..6)).collect();
        (grid, dets(&boxes), counts, rng.random_range(0.0..=MR_MAX))
    }

    #[test]
    fn randomized_masking_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10_000 {
            let (grid, det, counts, mr) = random_case(&mut rng);
            let order = importance_order(&det, &counts, &grid).unwrap();
            let mut sorted = order.clone();
            sorted.sort();
            assert_eq!(sorted, (0..grid.n_total()).collect::<Vec<_>>());
            let plan = build_mask_plan(&order, mr, &det, &grid, 3).unwrap();
            let n_obj = plan.object.iter().filter(|&&o| o).count();
            let rest: Vec<usize> = order.iter().filter(|&&k| !plan.object[k]).map(|&k| counts[k]).collect();
            assert!(rest.windows(2).all(|w| w[0] >= w[1]));
            assert!(order[..n_obj].iter().all(|&k| plan.object[k]));
            assert!(plan.masked.iter().zip(&plan.object).all(|(&m, &o)| !(m && o)));
            let want = ((mr * grid.n_total() as f64 + 1e-9).floor() as usize).min(grid.n_total() - n_obj);
            assert_eq!(plan.masked_count(), want);
            assert_eq!(plan.masked.iter().filter(|&&m| m).count(), want);
        }
    }

    proptest! {
        #[test]
        fn policy_bounded_and_monotone(s1 in -40.0f64..60.0, ds in 0.0f64..30.0, area in 0.0f64..=1.0) {
            let p = MrPolicy::default();
            let (a, b) = (p.eval(s1, area), p.eval(s1 + ds, area));
            prop_assert!((0.0..=MR_MAX).contains(&a));
            prop_assert!(b <= a);
        }

        #[test]
        fn restore_keeps_unmasked_pixels(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (grid, det, counts, mr) = random_case(&mut rng);
            let order = importance_order(&det, &counts, &grid).unwrap();
            let plan = build_mask_plan(&order, mr, &det, &grid, 3).unwrap();
            let h = grid.rows() * 4;
            let w = grid.cols() * 4;
            let img = ImageTensor::new(h, w, 3, (0..h * w * 3).map(|_| rng.random()).collect()).unwrap();
            let r = restore_background(&img, &plan).unwrap();
            let m = plan.mask_matrix();
            for i in 0..m.len() {
                if m[i] == 1.0 {
                    prop_assert_eq!(r.data()[i], img.data()[i]);
                }
            }
        }
    }
}
