//! Object detections: sidecar files, an external-command hook, a reference
//! stand-in detector, plus the confidence score and the combined metrics.

use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::vision::ImageTensor;

pub const EXTERNAL_TIMEOUT: Duration = Duration::from_secs(30);
pub const IOU_MATCH: f64 = 0.5;

#[derive(Debug, thiserror::Error)]
pub enum DetectorError {
    #[error("malformed detection JSON at line {line}, column {column}: {msg}")]
    Json { line: usize, column: usize, msg: String },
    #[error("invalid detection {index}: {msg}")]
    Invalid { index: usize, msg: String },
    #[error("failed to spawn detector `{command}`: {source}")]
    Spawn { command: String, source: std::io::Error },
    #[error("detector exited with status {status}: {stderr}")]
    Exit { status: String, stderr: String },
    #[error("detector timeout after {0:?}")]
    Timeout(Duration),
    #[error("empty detector command template")]
    EmptyCommand,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class: String,
    pub conf: f64,
    /// `[x0, y0, x1, y1]` in pixels.
    pub bbox: [f64; 4],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum DetectionSource {
    Sidecar,
    External,
    #[default]
    Stub,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DetectionSet {
    pub detections: Vec<Detection>,
    pub source: DetectionSource,
}

impl DetectionSet {
    pub fn new(detections: Vec<Detection>, source: DetectionSource) -> Self {
        Self { detections, source }
    }

    pub fn empty_stub() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }

    /// Checks `0 ≤ x0 < x1 ≤ W`, `0 ≤ y0 < y1 ≤ H` and `conf ∈ [0,1]`.
    pub fn validate(&self, width: usize, height: usize) -> Result<(), DetectorError> {
        for (index, d) in self.detections.iter().enumerate() {
            let [x0, y0, x1, y1] = d.bbox;
            let inside = 0.0 <= x0 && x0 < x1 && x1 <= width as f64 && 0.0 <= y0 && y0 < y1 && y1 <= height as f64;
            if !inside {
                return Err(DetectorError::Invalid {
                    index,
                    msg: format!("bbox {:?} outside {width}x{height}", d.bbox),
                });
            }
            if !(0.0..=1.0).contains(&d.conf) {
                return Err(DetectorError::Invalid { index, msg: format!("confidence {} outside [0,1]", d.conf) });
            }
        }
        Ok(())
    }
}

/// Parse the sidecar schema: `[{"class": .., "conf": .., "bbox": [x0,y0,x1,y1]}, ..]`.
pub fn parse_detections(
    json: &str,
    width: usize,
    height: usize,
    source: DetectionSource,
) -> Result<DetectionSet, DetectorError> {
    let detections: Vec<Detection> = serde_json::from_str(json)
        .map_err(|e| DetectorError::Json { line: e.line(), column: e.column(), msg: e.to_string() })?;
    let set = DetectionSet::new(detections, source);
    set.validate(width, height)?;
    Ok(set)
}

pub fn to_json(set: &DetectionSet) -> String {
    serde_json::to_string(&set.detections).expect("detections serialise")
}

/// `dir/name.ppm` → `dir/name.det.json`.
pub fn sidecar_path(image: &Path) -> PathBuf {
    image.with_extension("det.json")
}

/// Read the image's sidecar; a missing file yields an empty stub set.
pub fn load_detections(image: &Path, width: usize, height: usize) -> Result<DetectionSet, DetectorError> {
    let path = sidecar_path(image);
    match std::fs::read_to_string(&path) {
        Ok(s) => parse_detections(&s, width, height, DetectionSource::Sidecar),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(DetectionSet::empty_stub()),
        Err(e) => Err(e.into()),
    }
}

/// Run `template` (whitespace-separated argv, `{image}` substituted) and parse its stdout.
pub fn run_external_detector(
    template: &str,
    image: &Path,
    width: usize,
    height: usize,
    timeout: Duration,
) -> Result<DetectionSet, DetectorError> {
    let image_str = image.to_string_lossy();
    let argv: Vec<String> = template.split_whitespace().map(|a| a.replace("{image}", &image_str)).collect();
    let (prog, args) = argv.split_first().ok_or(DetectorError::EmptyCommand)?;
    let mut child = Command::new(prog)
        .args(args)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|source| DetectorError::Spawn { command: template.to_string(), source })?;
    let mut stdout = child.stdout.take().expect("piped");
    let mut stderr = child.stderr.take().expect("piped");
    let out_reader = std::thread::spawn(move || {
        let mut s = String::new();
        stdout.read_to_string(&mut s).map(|_| s)
    });
    let err_reader = std::thread::spawn(move || {
        let mut s = String::new();
        let _ = stderr.read_to_string(&mut s);
        s
    });
    let start = Instant::now();
    let status = loop {
        if let Some(status) = child.try_wait()? {
            break status;
        }
        if start.elapsed() >= timeout {
            let _ = child.kill();
            let _ = child.wait();
            return Err(DetectorError::Timeout(timeout));
        }
        std::thread::sleep(Duration::from_millis(5));
    };
    let out = out_reader.join().expect("reader thread")?;
    let err = err_reader.join().expect("reader thread");
    if !status.success() {
        return Err(DetectorError::Exit { status: status.to_string(), stderr: err.trim().to_string() });
    }
    parse_detections(&out, width, height, DetectionSource::External)
}

pub fn iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let ix = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let iy = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = ix * iy;
    let area = |r: &[f64; 4]| (r[2] - r[0]).max(0.0) * (r[3] - r[1]).max(0.0);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CsResult {
    pub cs: f64,
    pub matched: usize,
    pub unmatched: usize,
}

/// Mean over ground-truth objects of the best same-class prediction confidence
/// with IoU ≥ 0.5 (0 when nothing matches). Empty ground truth scores 1.
pub fn confidence_score(gt: &DetectionSet, pred: &DetectionSet) -> CsResult {
    if gt.is_empty() {
        return CsResult { cs: 1.0, matched: 0, unmatched: 0 };
    }
    let mut total = 0.0;
    let mut matched = 0;
    for g in &gt.detections {
        let best = pred
            .detections
            .iter()
            .filter(|p| p.class == g.class && iou(&p.bbox, &g.bbox) >= IOU_MATCH)
            .map(|p| p.conf)
            .fold(None, |acc: Option<f64>, c| Some(acc.map_or(c, |a| a.max(c))));
        if let Some(c) = best {
            matched += 1;
            total += c;
        }
    }
    let cs = (total / gt.len() as f64).clamp(0.0, 1.0);
    CsResult { cs, matched, unmatched: gt.len() - matched }
}

/// `(PSNR+CS, SSIM+CS)` with PSNR clamped to [0,40] and SSIM to [0,1].
pub fn combined_metrics(psnr_db: f64, ssim: f64, cs: f64) -> (f64, f64) {
    let p = psnr_db.clamp(0.0, 40.0) / 40.0;
    let s = ssim.clamp(0.0, 1.0);
    let cs = cs.clamp(0.0, 1.0);
    (p * 0.5 + cs * 0.5, s * 0.5 + cs * 0.5)
}

/// Parse a `PSNR+CS/SSIM+CS` record such as `0.911/0.936`.
pub fn parse_metric_record(s: &str) -> Option<(f64, f64)> {
    let (a, b) = s.trim().split_once('/')?;
    let (a, b) = (a.trim().parse::<f64>().ok()?, b.trim().parse::<f64>().ok()?);
    ((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b)).then_some((a, b))
}

pub fn format_metric_record(psnr_cs: f64, ssim_cs: f64) -> String {
    format!("{psnr_cs:.3}/{ssim_cs:.3}")
}

/// Stand-in for a detector run on reconstructed images: re-detects each
/// ground-truth object at its known box, with confidence `exp(−MSE/τ)` of the
/// box region against the original image.
#[derive(Clone, Copy, Debug)]
pub struct ReferenceDetector {
    pub tau: f64,
}

impl Default for ReferenceDetector {
    fn default() -> Self {
        Self { tau: 0.05 }
    }
}

impl ReferenceDetector {
    pub fn detect(&self, gt: &DetectionSet, original: &ImageTensor, reconstructed: &ImageTensor) -> DetectionSet {
        let detections = gt
            .detections
            .iter()
            .map(|g| {
                let mse = region_mse(original, reconstructed, &g.bbox);
                Detection { class: g.class.clone(), conf: (-mse / self.tau).exp(), bbox: g.bbox }
            })
            .collect();
        DetectionSet::new(detections, DetectionSource::Stub)
    }
}

fn region_mse(a: &ImageTensor, b: &ImageTensor, bbox: &[f64; 4]) -> f64 {
    let (h, w, c) = a.dims();
    let x0 = bbox[0].floor().max(0.0) as usize;
    let y0 = bbox[1].floor().max(0.0) as usize;
    let x1 = (bbox[2].ceil() as usize).min(w);
    let y1 = (bbox[3].ceil() as usize).min(h);
    let mut sum = 0.0;
    let mut n = 0usize;
    for y in y0..y1 {
        for x in x0..x1 {
            for ch in 0..c {
                let d = a.get(y, x, ch) as f64 - b.get(y, x, ch) as f64;
                sum += d * d;
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}
