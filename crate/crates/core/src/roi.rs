//! Landmark-driven patellofemoral ROI extraction.
//!
//! Pipeline per knee: align the patellar principal axis with the vertical,
//! place a square box of side `h + 2 * margin` around the patella that
//! extends toward the femur, crop (mirroring right knees), clamp the
//! histogram to percentiles and standardize, then resize and crop for the
//! network.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rotate_about, LesionBox, Point};
use crate::raster::GrayImage;
use crate::rng::rng_for;
use crate::synth::{render_knee_image, CohortRecord, Side, SynthConfig};

/// Minimum ratio between the two eigenvalues of the landmark covariance
/// for the principal axis to count as defined.
const MIN_EIGEN_RATIO: f64 = 1.01;
const MIN_ROI_SIDE: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    points: Vec<Point>,
}

impl LandmarkSet {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.len() < 3 {
            return Err(Error::Geometry(format!(
                "need at least 3 landmarks, got {}",
                points.len()
            )));
        }
        if points.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
            return Err(Error::Geometry("landmark coordinates must be finite".into()));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn check_bounds(&self, width: usize, height: usize) -> Result<()> {
        for p in &self.points {
            if p[0] < 0.0 || p[1] < 0.0 || p[0] > (width - 1) as f64 || p[1] > (height - 1) as f64 {
                return Err(Error::Geometry(format!(
                    "landmark ({}, {}) outside {width}x{height} image",
                    p[0], p[1]
                )));
            }
        }
        Ok(())
    }

    pub fn centroid(&self) -> Point {
        let n = self.points.len() as f64;
        let (sx, sy) = self
            .points
            .iter()
            .fold((0.0, 0.0), |(a, b), p| (a + p[0], b + p[1]));
        [sx / n, sy / n]
    }

    pub fn map(&self, f: impl Fn(Point) -> Point) -> Self {
        Self {
            points: self.points.iter().map(|&p| f(p)).collect(),
        }
    }

    /// `(min_x, min_y, max_x, max_y)`.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        self.points.iter().fold(
            (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
            |(a, b, c, d), p| (a.min(p[0]), b.min(p[1]), c.max(p[0]), d.max(p[1])),
        )
    }
}

/// Signed angle in degrees, in `(-90, 90]`, between the principal axis of
/// the landmark cloud and the vertical image axis. Positive angles match a
/// rotation by [`rotate_about`] with a positive argument.
pub fn patellar_axis_angle(landmarks: &LandmarkSet) -> Result<f64> {
    let c = landmarks.centroid();
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for p in landmarks.points() {
        let dx = p[0] - c[0];
        let dy = p[1] - c[1];
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    let half_trace = 0.5 * (sxx + syy);
    let disc = (0.25 * (sxx - syy).powi(2) + sxy * sxy).sqrt();
    let major = half_trace + disc;
    let minor = half_trace - disc;
    let scale = sxx + syy;
    if !(major > 1e-12 * scale.max(1.0)) || major <= 1e-18 {
        return Err(Error::Geometry("landmarks have no spatial extent".into()));
    }
    if minor > 0.0 && major / minor <= MIN_EIGEN_RATIO {
        return Err(Error::Geometry(format!(
            "principal axis undefined: eigenvalue ratio {:.4} <= {MIN_EIGEN_RATIO}",
            major / minor
        )));
    }
    let phi = 0.5 * (2.0 * sxy).atan2(sxx - syy);
    let mut angle = phi.to_degrees() - 90.0;
    while angle <= -90.0 {
        angle += 180.0;
    }
    while angle > 90.0 {
        angle -= 180.0;
    }
    Ok(angle)
}

/// Rigid motion applied by [`align_rotation`]: rotation by `-angle_deg`
/// about `center`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub angle_deg: f64,
    pub center: Point,
}

impl Alignment {
    pub fn apply(&self, p: Point) -> Point {
        if self.angle_deg == 0.0 {
            return p;
        }
        rotate_about(p, self.center, -self.angle_deg)
    }
}

#[derive(Debug, Clone)]
pub struct Aligned {
    pub image: GrayImage,
    pub landmarks: LandmarkSet,
    pub alignment: Alignment,
}

/// Rotate image and landmarks so the patellar axis is vertical. Bilinear
/// resampling with edge-replicate padding; the rotation center is the
/// landmark centroid.
pub fn align_rotation(image: &GrayImage, landmarks: &LandmarkSet) -> Result<Aligned> {
    let angle = patellar_axis_angle(landmarks)?;
    let center = landmarks.centroid();
    let alignment = Alignment {
        angle_deg: angle,
        center,
    };
    if angle == 0.0 {
        return Ok(Aligned {
            image: image.clone(),
            landmarks: landmarks.clone(),
            alignment,
        });
    }
    let mut out = GrayImage::new(image.width(), image.height());
    for y in 0..image.height() {
        for x in 0..image.width() {
            let src = rotate_about([x as f64, y as f64], center, angle);
            out.set(x, y, image.sample_bilinear(src[0], src[1]));
        }
    }
    Ok(Aligned {
        image: out,
        landmarks: landmarks.map(|p| alignment.apply(p)),
        alignment,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    /// Padding around the patella, i.e. half of the total margin.
    pub margin_px: f64,
    pub p_low: f64,
    pub p_high: f64,
    pub resize_to: usize,
    pub crop_to: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            margin_px: 20.0,
            p_low: 5.0,
            p_high: 99.0,
            resize_to: 256,
            crop_to: 224,
        }
    }
}

impl PreprocessConfig {
    /// Thin preset used for CPU-scale experiments: 72 px resize, 64 px crop.
    pub fn desk() -> Self {
        Self {
            resize_to: 72,
            crop_to: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.margin_px >= 0.0) {
            return Err(Error::config("margin_px", "must be >= 0"));
        }
        if !(0.0 <= self.p_low && self.p_low < self.p_high && self.p_high <= 100.0) {
            return Err(Error::config(
                "p_low",
                format!("need 0 <= p_low < p_high <= 100, got {} / {}", self.p_low, self.p_high),
            ));
        }
        if self.crop_to == 0 || self.crop_to > self.resize_to {
            return Err(Error::config(
                "crop_to",
                format!("must lie in [1, resize_to={}], got {}", self.resize_to, self.crop_to),
            ));
        }
        Ok(())
    }
}

/// Square source rectangle; the origin may be fractional and may extend
/// past the image border.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoiBox {
    pub x0: f64,
    pub y0: f64,
    pub size: usize,
}

impl RoiBox {
    /// Map a source-image point into ROI pixel coordinates, mirroring for
    /// right knees the same way [`extract_roi`] does.
    pub fn to_roi(&self, p: Point, knee_side: Side) -> Point {
        let x = p[0] - self.x0;
        let y = p[1] - self.y0;
        match knee_side {
            Side::Left => [x, y],
            Side::Right => [(self.size - 1) as f64 - x, y],
        }
    }
}

/// Square box with side `h + 2 * margin`, vertically centered on the
/// patella and anchored at its anterior edge; it extends toward the femur,
/// which lies to the right of the patella for left knees and to the left
/// for right knees.
pub fn compute_roi_box(landmarks: &LandmarkSet, knee_side: Side, cfg: &PreprocessConfig) -> Result<RoiBox> {
    let (min_x, min_y, max_x, max_y) = landmarks.bounds();
    let h = max_y - min_y;
    let side = (h + 2.0 * cfg.margin_px).round();
    if !(side >= MIN_ROI_SIDE as f64) {
        return Err(Error::Geometry(format!(
            "ROI side {side} px below the {MIN_ROI_SIDE} px minimum"
        )));
    }
    let size = side as usize;
    let y0 = min_y - cfg.margin_px;
    let x0 = match knee_side {
        Side::Left => min_x - cfg.margin_px,
        Side::Right => max_x + cfg.margin_px - (size - 1) as f64,
    };
    Ok(RoiBox { x0, y0, size })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiImage {
    pub pixels: GrayImageData,
    /// Original side of the knee; right knees are mirrored into the left frame.
    pub side: Side,
    pub flipped: bool,
    pub roi_box: RoiBox,
    pub rotation_applied: f64,
}

/// Serializable square pixel block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrayImageData {
    pub size: usize,
    pub values: Vec<f64>,
}

impl GrayImageData {
    pub fn to_image(&self) -> GrayImage {
        GrayImage::from_vec(self.size, self.size, self.values.clone()).expect("square block")
    }

    pub fn from_image(img: &GrayImage) -> Self {
        assert_eq!(img.width(), img.height(), "ROI must be square");
        Self {
            size: img.width(),
            values: img.data().to_vec(),
        }
    }
}

/// Crop the box (bilinear, edge-replicate) and mirror right knees.
pub fn extract_roi(image: &GrayImage, roi_box: &RoiBox, knee_side: Side) -> RoiImage {
    let n = roi_box.size;
    let mut out = GrayImage::new(n, n);
    for i in 0..n {
        for j in 0..n {
            let v = image.sample_bilinear(roi_box.x0 + j as f64, roi_box.y0 + i as f64);
            out.set(j, i, v);
        }
    }
    let flipped = knee_side == Side::Right;
    if flipped {
        out = out.flip_horizontal();
    }
    RoiImage {
        pixels: GrayImageData::from_image(&out),
        side: knee_side,
        flipped,
        roi_box: *roi_box,
        rotation_applied: 0.0,
    }
}

/// Percentile of `sorted` with linear interpolation between order statistics.
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of an empty slice");
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = rank - lo as f64;
    if frac == 0.0 {
        sorted[lo]
    } else {
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

/// Clamp to the `[p_low, p_high]` percentiles of the input, then shift and
/// scale to zero mean and unit (population) standard deviation. A constant
/// input, before or after clamping, maps to zeros.
pub fn normalize_intensity(pixels: &[f64], cfg: &PreprocessConfig) -> Result<Vec<f64>> {
    if pixels.is_empty() {
        return Err(Error::Validation("cannot normalize an empty image".into()));
    }
    let mut sorted = pixels.to_vec();
    sorted.sort_by(f64::total_cmp);
    let lo = percentile_sorted(&sorted, cfg.p_low);
    let hi = percentile_sorted(&sorted, cfg.p_high);
    if hi <= lo {
        return Ok(vec![0.0; pixels.len()]);
    }
    let clamped: Vec<f64> = pixels.iter().map(|v| v.clamp(lo, hi)).collect();
    let n = clamped.len() as f64;
    let mean = clamped.iter().sum::<f64>() / n;
    let var = clamped.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std == 0.0 {
        return Ok(vec![0.0; pixels.len()]);
    }
    Ok(clamped.iter().map(|v| (v - mean) / std).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CropMode {
    /// Uniform random offset drawn from the seed.
    Train { seed: u64 },
    /// Center crop.
    Eval,
}

/// Top-left offset `(x, y)` of the crop inside the resized ROI.
pub fn crop_offset(cfg: &PreprocessConfig, mode: CropMode) -> (usize, usize) {
    let slack = cfg.resize_to - cfg.crop_to;
    match mode {
        CropMode::Eval => (slack / 2, slack / 2),
        CropMode::Train { seed } => {
            let mut rng = rng_for(seed, 0x0C40_9000);
            (rng.random_range(0..=slack), rng.random_range(0..=slack))
        }
    }
}

pub fn resize_roi(roi: &RoiImage, cfg: &PreprocessConfig) -> GrayImage {
    roi.pixels.to_image().resize_bilinear(cfg.resize_to, cfg.resize_to)
}

pub fn crop_square(img: &GrayImage, size: usize, offset: (usize, usize)) -> GrayImage {
    let mut out = GrayImage::new(size, size);
    for y in 0..size {
        for x in 0..size {
            out.set(x, y, img.get(x + offset.0, y + offset.1));
        }
    }
    out
}

/// Bilinear resize to `resize_to`, then a `crop_to` square crop.
pub fn resize_and_crop(roi: &RoiImage, cfg: &PreprocessConfig, mode: CropMode) -> GrayImage {
    let resized = resize_roi(roi, cfg);
    crop_square(&resized, cfg.crop_to, crop_offset(cfg, mode))
}

/// A fully preprocessed knee together with its planted-lesion boxes in ROI
/// pixel coordinates.
#[derive(Debug, Clone)]
pub struct ProcessedKnee {
    pub roi: RoiImage,
    pub lesion_boxes: Vec<LesionBox>,
}

/// Align, box, crop, flip and normalize one knee.
pub fn preprocess_knee(
    image: &GrayImage,
    landmarks: &LandmarkSet,
    knee_side: Side,
    lesion_boxes: &[LesionBox],
    cfg: &PreprocessConfig,
) -> Result<ProcessedKnee> {
    cfg.validate()?;
    let aligned = align_rotation(image, landmarks)?;
    let roi_box = compute_roi_box(&aligned.landmarks, knee_side, cfg)?;
    let mut roi = extract_roi(&aligned.image, &roi_box, knee_side);
    roi.rotation_applied = -aligned.alignment.angle_deg;
    roi.pixels.values = normalize_intensity(&roi.pixels.values, cfg)?;
    let boxes = lesion_boxes
        .iter()
        .map(|b| b.map(|p| roi_box.to_roi(aligned.alignment.apply(p), knee_side)))
        .collect();
    Ok(ProcessedKnee {
        roi,
        lesion_boxes: boxes,
    })
}

/// Render a cohort record and run it through [`preprocess_knee`].
pub fn preprocess_record(record: &CohortRecord, synth: &SynthConfig, cfg: &PreprocessConfig) -> Result<ProcessedKnee> {
    let knee = render_knee_image(record, synth)?;
    let landmarks = LandmarkSet::new(knee.landmarks)?;
    preprocess_knee(&knee.image, &landmarks, record.side, &knee.lesion_boxes, cfg)
}

/// Sidecar header written next to each raw ROI tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiTensorHeader {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub side: Side,
    pub flipped: bool,
    #[serde(rename = "box")]
    pub roi_box: RoiBox,
    pub rotation_applied: f64,
}

/// Write `<stem>.f32` (little-endian) and `<stem>.json`.
pub fn write_roi_tensor(dir: &Path, stem: &str, roi: &RoiImage) -> Result<()> {
    let bin = dir.join(format!("{stem}.f32"));
    let bytes: Vec<u8> = roi
        .pixels
        .values
        .iter()
        .flat_map(|&v| (v as f32).to_le_bytes())
        .collect();
    fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
    let header = RoiTensorHeader {
        dtype: "f32".into(),
        shape: vec![roi.pixels.size, roi.pixels.size],
        side: roi.side,
        flipped: roi.flipped,
        roi_box: roi.roi_box,
        rotation_applied: roi.rotation_applied,
    };
    let json = dir.join(format!("{stem}.json"));
    fs::write(&json, serde_json::to_vec_pretty(&header)?).map_err(|e| Error::io(&json, e))?;
    Ok(())
}

pub fn read_roi_tensor(dir: &Path, stem: &str) -> Result<RoiImage> {
    let json = dir.join(format!("{stem}.json"));
    let text = fs::read(&json).map_err(|e| Error::io(&json, e))?;
    let header: RoiTensorHeader = serde_json::from_slice(&text)?;
    if header.dtype != "f32" || header.shape.len() != 2 || header.shape[0] != header.shape[1] {
        return Err(Error::Load(format!(
            "{}: expected a square f32 tensor, got {} {:?}",
            json.display(),
            header.dtype,
            header.shape
        )));
    }
    let bin = dir.join(format!("{stem}.f32"));
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let n = header.shape[0];
    if bytes.len() != n * n * 4 {
        return Err(Error::Load(format!(
            "{}: expected {} bytes, found {}",
            bin.display(),
            n * n * 4,
            bytes.len()
        )));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(RoiImage {
        pixels: GrayImageData { size: n, values },
        side: header.side,
        flipped: header.flipped,
        roi_box: header.roi_box,
        rotation_applied: header.rotation_applied,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vertical_segment() -> Vec<Point> {
        (0..7).map(|i| [50.0, 20.0 + 10.0 * i as f64]).collect()
    }

    #[test]
    fn vertical_points_have_zero_angle() {
        let lm = LandmarkSet::new(vertical_segment()).unwrap();
        assert_eq!(patellar_axis_angle(&lm).unwrap(), 0.0);
    }

    #[test]
    fn rotated_segment_reports_its_rotation() {
        let pts = vertical_segment()
            .into_iter()
            .map(|p| rotate_about(p, [50.0, 50.0], 10.0))
            .collect();
        let a = patellar_axis_angle(&LandmarkSet::new(pts).unwrap()).unwrap();
        assert!((a - 10.0).abs() < 1e-6, "{a}");
    }

    #[test]
    fn degenerate_landmarks_are_rejected() {
        let same = LandmarkSet::new(vec![[3.0, 3.0]; 5]).unwrap();
        assert!(matches!(patellar_axis_angle(&same), Err(Error::Geometry(_))));
        assert!(LandmarkSet::new(vec![[0.0, 0.0], [1.0, 1.0]]).is_err());
        let square = LandmarkSet::new(vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]).unwrap();
        assert!(matches!(patellar_axis_angle(&square), Err(Error::Geometry(_))));
    }

    fn ramp(w: usize, h: usize) -> GrayImage {
        GrayImage::from_vec(w, h, (0..w * h).map(|i| (i % 17) as f64 / 17.0).collect()).unwrap()
    }

    #[test]
    fn zero_angle_alignment_is_identity() {
        let img = ramp(40, 40);
        let lm = LandmarkSet::new(vertical_segment().iter().map(|p| [p[0] / 3.0, p[1] / 3.0]).collect()).unwrap();
        let out = align_rotation(&img, &lm).unwrap();
        assert_eq!(out.image, img);
        assert_eq!(out.landmarks, lm);
    }

    #[test]
    fn alignment_removes_tilt_and_is_idempotent() {
        let pts: Vec<Point> = (0..10)
            .map(|k| {
                let t = std::f64::consts::TAU * k as f64 / 10.0;
                rotate_about([60.0 + 15.0 * t.cos(), 60.0 + 35.0 * t.sin()], [64.0, 64.0], 10.0)
            })
            .collect();
        let lm = LandmarkSet::new(pts).unwrap();
        let img = ramp(128, 128);
        let once = align_rotation(&img, &lm).unwrap();
        let residual = patellar_axis_angle(&once.landmarks).unwrap();
        assert!(residual.abs() < 0.01, "{residual}");
        let twice = align_rotation(&once.image, &once.landmarks).unwrap();
        assert!(twice.alignment.angle_deg.abs() < 0.01);
    }

    #[test]
    fn roi_side_follows_patella_height() {
        let cfg = PreprocessConfig::default();
        let lm = |h: f64| LandmarkSet::new(vec![[100.0, 50.0], [110.0, 50.0 + h / 2.0], [100.0, 50.0 + h]]).unwrap();
        assert_eq!(compute_roi_box(&lm(100.0), Side::Left, &cfg).unwrap().size, 140);
        assert_eq!(compute_roi_box(&lm(200.0), Side::Left, &cfg).unwrap().size, 240);
        let b = compute_roi_box(&lm(100.0), Side::Left, &cfg).unwrap();
        assert_eq!((b.x0, b.y0), (80.0, 30.0));
        let r = compute_roi_box(&lm(100.0), Side::Right, &cfg).unwrap();
        assert_eq!(r.x0 + (r.size - 1) as f64, 130.0);
    }

    #[test]
    fn tiny_patella_is_rejected() {
        let cfg = PreprocessConfig {
            margin_px: 2.0,
            ..Default::default()
        };
        let lm = LandmarkSet::new(vec![[10.0, 10.0], [11.0, 15.0], [10.0, 20.0]]).unwrap();
        assert!(matches!(compute_roi_box(&lm, Side::Left, &cfg), Err(Error::Geometry(_))));
    }

    #[test]
    fn border_roi_stays_square() {
        let img = ramp(64, 64);
        let lm = LandmarkSet::new(vec![[1.0, 0.0], [4.0, 20.0], [1.0, 40.0]]).unwrap();
        let b = compute_roi_box(&lm, Side::Left, &PreprocessConfig::default()).unwrap();
        let roi = extract_roi(&img, &b, Side::Left);
        assert_eq!(roi.pixels.values.len(), b.size * b.size);
        assert_eq!(b.size, 80);
        // edge replicate: the first column is outside the image and copies column 0
        assert_eq!(roi.pixels.values[0], img.get(0, 0));
    }

    #[test]
    fn left_crop_is_raw_subimage_and_right_is_mirrored() {
        let img = ramp(50, 50);
        let b = RoiBox { x0: 5.0, y0: 7.0, size: 32 };
        let left = extract_roi(&img, &b, Side::Left).pixels.to_image();
        let right = extract_roi(&img, &b, Side::Right).pixels.to_image();
        for i in 0..32 {
            for j in 0..32 {
                assert_eq!(left.get(j, i), img.get(5 + j, 7 + i));
                assert_eq!(right.get(j, i), left.get(31 - j, i));
            }
        }
        assert_eq!(right.flip_horizontal(), left);
    }

    #[test]
    fn constant_image_normalizes_to_zero() {
        let out = normalize_intensity(&[0.3; 100], &PreprocessConfig::default()).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    fn sort_percentile_oracle(values: &[f64], p: f64) -> f64 {
        let mut s = values.to_vec();
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let pos = p / 100.0 * (s.len() as f64 - 1.0);
        let i = pos as usize;
        if i + 1 >= s.len() {
            return s[s.len() - 1];
        }
        s[i] * (1.0 - (pos - i as f64)) + s[i + 1] * (pos - i as f64)
    }

    #[test]
    fn uniform_ramp_is_clamped_and_standardized() {
        let vals: Vec<f64> = (0..=100).map(|v| v as f64).collect();
        assert_eq!(sort_percentile_oracle(&vals, 5.0), 5.0);
        assert_eq!(sort_percentile_oracle(&vals, 99.0), 99.0);
        let out = normalize_intensity(&vals, &PreprocessConfig::default()).unwrap();
        let n = out.len() as f64;
        let mean = out.iter().sum::<f64>() / n;
        let std = (out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 1e-9 && (std - 1.0).abs() < 1e-9);
        // clamped ends collapse to the same normalized value
        assert_eq!(out[0], out[5]);
        assert_eq!(out[99], out[100]);
    }

    #[test]
    fn outlier_is_clamped() {
        let mut vals: Vec<f64> = (0..999).map(|i| i as f64 / 998.0).collect();
        vals.push(1e6);
        let out = normalize_intensity(&vals, &PreprocessConfig::default()).unwrap();
        let max = out.iter().cloned().fold(f64::MIN, f64::max);
        assert!(max < 5.0, "{max}");
    }

    #[test]
    fn crops_are_deterministic_and_centered() {
        let cfg = PreprocessConfig::default();
        assert_eq!(crop_offset(&cfg, CropMode::Eval), (16, 16));
        let a = crop_offset(&cfg, CropMode::Train { seed: 9 });
        assert_eq!(a, crop_offset(&cfg, CropMode::Train { seed: 9 }));
        assert!(a.0 <= 32 && a.1 <= 32);
        let roi = RoiImage {
            pixels: GrayImageData { size: 100, values: vec![0.7; 10_000] },
            side: Side::Left,
            flipped: false,
            roi_box: RoiBox { x0: 0.0, y0: 0.0, size: 100 },
            rotation_applied: 0.0,
        };
        let c = resize_and_crop(&roi, &cfg, CropMode::Train { seed: 3 });
        assert_eq!((c.width(), c.height()), (224, 224));
        assert!(c.data().iter().all(|&v| (v - 0.7).abs() < 1e-12));
        assert_eq!(
            resize_and_crop(&roi, &cfg, CropMode::Eval),
            resize_and_crop(&roi, &cfg, CropMode::Eval)
        );
    }

    #[test]
    fn roi_tensor_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let roi = RoiImage {
            pixels: GrayImageData { size: 3, values: vec![0.5, -1.0, 2.0, 0.0, 1.0, 3.0, -2.0, 0.25, 0.125] },
            side: Side::Right,
            flipped: true,
            roi_box: RoiBox { x0: 1.5, y0: 2.0, size: 3 },
            rotation_applied: 4.0,
        };
        write_roi_tensor(dir.path(), "k", &roi).unwrap();
        assert_eq!(read_roi_tensor(dir.path(), "k").unwrap(), roi);
    }

    proptest! {
        #[test]
        fn percentile_matches_sort_oracle(vals in proptest::collection::vec(-1e3f64..1e3, 1..400), p in 0.0f64..=100.0) {
            let mut s = vals.clone();
            s.sort_by(f64::total_cmp);
            let got = percentile_sorted(&s, p);
            let want = sort_percentile_oracle(&vals, p);
            prop_assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0));
        }

        #[test]
        fn normalization_moments(vals in proptest::collection::vec(0.0f64..1.0, 20..500)) {
            let out = normalize_intensity(&vals, &PreprocessConfig::default()).unwrap();
            let n = out.len() as f64;
            let mean = out.iter().sum::<f64>() / n;
            let std = (out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            if out.iter().any(|&v| v != 0.0) {
                prop_assert!(mean.abs() < 1e-6 && (std - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn flip_is_an_involution(size in 2usize..20, seed in 0u64..1000) {
            let vals: Vec<f64> = (0..size * size).map(|i| ((i as u64 * 2654435761 + seed) % 1000) as f64).collect();
            let img = GrayImage::from_vec(size, size, vals).unwrap();
            prop_assert_eq!(img.flip_horizontal().flip_horizontal(), img);
        }
    }
}
