//! Synthetic knee cohort with planted, recoverable signal.
//!
//! Clinical covariates drive a latent risk through a logistic link; the
//! progression label is derived from latent radiographic grades by the
//! composite osteophyte/JSN rule, and the rendered lateral view shows the
//! grades as joint-space narrowing and bright polar osteophytes.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rotate_about, LesionBox, LesionKind, Point};
use crate::raster::GrayImage;
use crate::rng::{derive_seed, rng_for};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn as_str(self) -> &'static str {
        match self {
            Side::Left => "left",
            Side::Right => "right",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "left" | "L" | "l" => Ok(Side::Left),
            "right" | "R" | "r" => Ok(Side::Right),
            other => Err(Error::Validation(format!("unknown side `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    NonProgressor,
    Progressor,
}

impl Label {
    pub fn as_u8(self) -> u8 {
        match self {
            Label::NonProgressor => 0,
            Label::Progressor => 1,
        }
    }

    pub fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Label::NonProgressor),
            1 => Ok(Label::Progressor),
            other => Err(Error::Validation(format!("label must be 0 or 1, got {other}"))),
        }
    }
}

/// Semi-quantitative patellofemoral grades, each 0 (normal) to 3 (severe).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LatentSeverity {
    pub osteophyte: u8,
    pub jsn: u8,
    pub sclerosis: u8,
    pub cysts: u8,
}

impl LatentSeverity {
    pub fn new(osteophyte: u8, jsn: u8, sclerosis: u8, cysts: u8) -> Result<Self> {
        let s = Self {
            osteophyte,
            jsn,
            sclerosis,
            cysts,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, g) in [
            ("osteophyte", self.osteophyte),
            ("jsn", self.jsn),
            ("sclerosis", self.sclerosis),
            ("cysts", self.cysts),
        ] {
            if g > 3 {
                return Err(Error::Validation(format!("{name} grade {g} outside [0,3]")));
            }
        }
        Ok(())
    }
}

/// Radiographic PFOA: osteophyte >= 2, or JSN >= 1 together with any
/// osteophyte, sclerosis or cyst grade >= 1.
pub fn assign_label(latent: &LatentSeverity) -> Result<Label> {
    latent.validate()?;
    let l = latent;
    let progressed =
        l.osteophyte >= 2 || (l.jsn >= 1 && (l.osteophyte >= 1 || l.sclerosis >= 1 || l.cysts >= 1));
    Ok(if progressed {
        Label::Progressor
    } else {
        Label::NonProgressor
    })
}

/// Monotone risk weights on standardized covariates. BMI, WOMAC and KL
/// weights must be non-negative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectStrengths {
    pub age: f64,
    pub sex: f64,
    pub bmi: f64,
    pub womac: f64,
    pub kl: f64,
}

impl Default for EffectStrengths {
    fn default() -> Self {
        Self {
            age: 0.2,
            sex: 0.2,
            bmi: 0.6,
            womac: 0.7,
            kl: 1.2,
        }
    }
}

impl EffectStrengths {
    pub fn zero() -> Self {
        Self {
            age: 0.0,
            sex: 0.0,
            bmi: 0.0,
            womac: 0.0,
            kl: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_subjects: usize,
    pub knees_per_subject: usize,
    pub target_prevalence: f64,
    pub image_size: usize,
    pub effect_strengths: EffectStrengths,
    /// Additive brightness of osteophyte blobs at grade 1.
    pub lesion_contrast: f64,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise_sigma: f64,
    pub max_rotation_deg: f64,
    pub n_landmarks: usize,
    /// Standard deviation of landmark placement jitter in pixels.
    pub landmark_jitter: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_subjects: 500,
            knees_per_subject: 2,
            target_prevalence: 0.12,
            image_size: 256,
            effect_strengths: EffectStrengths::default(),
            lesion_contrast: 0.25,
            noise_sigma: 0.03,
            max_rotation_deg: 15.0,
            n_landmarks: 10,
            landmark_jitter: 0.2,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects < 2 {
            return Err(Error::config("n_subjects", "must be at least 2"));
        }
        if !(1..=2).contains(&self.knees_per_subject) {
            return Err(Error::config("knees_per_subject", "must be 1 or 2"));
        }
        if !(self.target_prevalence > 0.0 && self.target_prevalence < 1.0) {
            return Err(Error::config(
                "target_prevalence",
                format!("must lie in (0, 1), got {}", self.target_prevalence),
            ));
        }
        if self.image_size < 64 {
            return Err(Error::config(
                "image_size",
                format!("must be at least 64 pixels, got {}", self.image_size),
            ));
        }
        let e = &self.effect_strengths;
        for (field, w) in [("effect_bmi", e.bmi), ("effect_womac", e.womac), ("effect_kl", e.kl)] {
            if !(w >= 0.0) {
                return Err(Error::config(field, format!("must be >= 0, got {w}")));
            }
        }
        for (field, w) in [("effect_age", e.age), ("effect_sex", e.sex)] {
            if !w.is_finite() {
                return Err(Error::config(field, "must be finite"));
            }
        }
        if !(self.lesion_contrast >= 0.0) {
            return Err(Error::config("lesion_contrast", "must be >= 0"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::config("noise_sigma", "must be >= 0"));
        }
        if !(0.0..=45.0).contains(&self.max_rotation_deg) {
            return Err(Error::config("max_rotation_deg", "must lie in [0, 45]"));
        }
        if self.n_landmarks < 3 {
            return Err(Error::config("n_landmarks", "need at least 3 landmarks"));
        }
        if !(self.landmark_jitter >= 0.0) {
            return Err(Error::config("landmark_jitter", "must be >= 0"));
        }
        Ok(())
    }
}

/// Everything the renderer needs to redraw a knee deterministically, in
/// the canonical left-knee frame before mirroring and rotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KneeGeometry {
    pub center: Point,
    /// Horizontal patellar semi-axis.
    pub semi_axis_x: f64,
    /// Vertical patellar semi-axis (half the patellar height).
    pub semi_axis_y: f64,
    pub joint_gap: f64,
    pub femur_radius: f64,
    pub rotation_deg: f64,
    pub render_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortRecord {
    pub subject_id: String,
    pub side: Side,
    pub age: f64,
    pub sex: u8,
    pub bmi: f64,
    pub womac: f64,
    pub kl: u8,
    pub label: Label,
    pub latent: LatentSeverity,
    pub geometry: KneeGeometry,
}

impl CohortRecord {
    pub fn knee_id(&self) -> String {
        knee_id(&self.subject_id, self.side)
    }
}

pub fn knee_id(subject_id: &str, side: Side) -> String {
    let s = match side {
        Side::Left => "L",
        Side::Right => "R",
    };
    format!("{subject_id}_{s}")
}

#[derive(Debug, Clone)]
pub struct RenderedKnee {
    pub image: GrayImage,
    pub landmarks: Vec<Point>,
    pub lesion_boxes: Vec<LesionBox>,
}

fn truncated_normal<R: Rng>(rng: &mut R, mean: f64, sd: f64, lo: f64, hi: f64) -> f64 {
    let dist = Normal::new(mean, sd).expect("valid normal parameters");
    loop {
        let v = dist.sample(rng);
        if (lo..=hi).contains(&v) {
            return v;
        }
    }
}

fn sample_kl<R: Rng>(rng: &mut R) -> u8 {
    const CUM: [f64; 5] = [0.30, 0.55, 0.78, 0.94, 1.0];
    let u: f64 = rng.random();
    CUM.iter().position(|&c| u < c).unwrap_or(4) as u8
}

fn logistic_noise<R: Rng>(rng: &mut R) -> f64 {
    let u: f64 = rng.random_range(1e-12..1.0 - 1e-12);
    (u / (1.0 - u)).ln()
}

struct Draft {
    subject_index: usize,
    subject_id: String,
    side: Side,
    age: f64,
    sex: u8,
    bmi: f64,
    womac: f64,
    kl: u8,
    propensity: f64,
}

/// Generate a labeled cohort. Covariates and latent grades are fully
/// determined by `config.seed`; images are produced on demand by
/// [`render_knee_image`] from the stored [`KneeGeometry`].
pub fn generate_cohort(config: &SynthConfig) -> Result<Vec<CohortRecord>> {
    config.validate()?;
    let e = &config.effect_strengths;
    let mut drafts = Vec::with_capacity(config.n_subjects * config.knees_per_subject);
    for s in 0..config.n_subjects {
        let mut rng = rng_for(config.seed, s as u64);
        let subject_id = format!("S{:05}", s + 1);
        let age = truncated_normal(&mut rng, 61.0, 8.0, 45.0, 80.0);
        let sex = u8::from(rng.random_bool(0.6));
        let bmi = truncated_normal(&mut rng, 30.0, 5.0, 18.0, 50.0);
        let sides: Vec<Side> = if config.knees_per_subject == 2 {
            vec![Side::Left, Side::Right]
        } else if rng.random_bool(0.5) {
            vec![Side::Left]
        } else {
            vec![Side::Right]
        };
        for side in sides {
            let womac = truncated_normal(&mut rng, 15.0, 15.0, 0.0, 96.0);
            let kl = sample_kl(&mut rng);
            let risk = e.age * (age - 61.0) / 8.0
                + e.sex * (sex as f64 - 0.5)
                + e.bmi * (bmi - 30.0) / 5.0
                + e.womac * (womac - 15.0) / 15.0
                + e.kl * (kl as f64 - 1.5) / 1.2;
            let propensity = risk + logistic_noise(&mut rng);
            drafts.push(Draft {
                subject_index: s,
                subject_id: subject_id.clone(),
                side,
                age,
                sex,
                bmi,
                womac,
                kl,
                propensity,
            });
        }
    }

    let n = drafts.len();
    let n_pos = (config.target_prevalence * n as f64).round() as usize;
    if n_pos == 0 || n_pos >= n {
        return Err(Error::config(
            "target_prevalence",
            format!(
                "prevalence {} over {n} knees yields {n_pos} progressors; need between 1 and {}",
                config.target_prevalence,
                n - 1
            ),
        ));
    }

    // Threshold the logistic latent variable at its empirical quantile so the
    // realized prevalence is exact.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        drafts[b]
            .propensity
            .total_cmp(&drafts[a].propensity)
            .then(a.cmp(&b))
    });
    let mut severity_rank = vec![None; n];
    for (rank, &i) in order.iter().take(n_pos).enumerate() {
        // 1 for the most severe progressor, approaching 0 at the threshold.
        severity_rank[i] = Some(1.0 - rank as f64 / n_pos as f64);
    }

    let size = config.image_size as f64;
    drafts
        .into_iter()
        .enumerate()
        .map(|(i, d)| {
            let stream = 1_000_000 + (d.subject_index as u64) * 2 + (d.side == Side::Right) as u64;
            let mut rng = rng_for(config.seed, stream);
            let latent = match severity_rank[i] {
                Some(q) => progressor_grades(&mut rng, q),
                None => non_progressor_grades(&mut rng),
            };
            let label = assign_label(&latent)?;
            debug_assert_eq!(label == Label::Progressor, severity_rank[i].is_some());

            let b = size * 0.17 * rng.random_range(0.9..1.1);
            let a = b * rng.random_range(0.42..0.5);
            let center = [
                size * (0.42 + rng.random_range(-0.03..0.03)),
                size * (0.5 + rng.random_range(-0.03..0.03)),
            ];
            let base_gap = 0.22 * b;
            let rotation_deg = if config.max_rotation_deg > 0.0 {
                rng.random_range(-config.max_rotation_deg..=config.max_rotation_deg)
            } else {
                0.0
            };
            let geometry = KneeGeometry {
                center,
                semi_axis_x: a,
                semi_axis_y: b,
                joint_gap: base_gap * (1.0 - 0.22 * latent.jsn as f64),
                femur_radius: 2.2 * b,
                rotation_deg,
                render_seed: derive_seed(config.seed, stream ^ 0xA5A5_0000),
            };
            Ok(CohortRecord {
                subject_id: d.subject_id,
                side: d.side,
                age: d.age,
                sex: d.sex,
                bmi: d.bmi,
                womac: d.womac,
                kl: d.kl,
                label,
                latent,
                geometry,
            })
        })
        .collect()
}

fn progressor_grades<R: Rng>(rng: &mut R, severity: f64) -> LatentSeverity {
    let route: f64 = rng.random();
    let grade = |rng: &mut R, lo: u8, hi: u8| rng.random_range(lo..=hi);
    if route < 0.7 {
        let osteophyte = if rng.random::<f64>() < severity { 3 } else { 2 };
        LatentSeverity {
            osteophyte,
            jsn: grade(rng, 0, 2),
            sclerosis: grade(rng, 0, 1),
            cysts: grade(rng, 0, 1),
        }
    } else if route < 0.9 {
        LatentSeverity {
            osteophyte: 1,
            jsn: grade(rng, 1, 3),
            sclerosis: grade(rng, 0, 1),
            cysts: grade(rng, 0, 1),
        }
    } else {
        let sclerosis_route = rng.random_bool(0.5);
        LatentSeverity {
            osteophyte: 0,
            jsn: grade(rng, 1, 2),
            sclerosis: if sclerosis_route { grade(rng, 1, 2) } else { 0 },
            cysts: if sclerosis_route { 0 } else { grade(rng, 1, 2) },
        }
    }
}

fn non_progressor_grades<R: Rng>(rng: &mut R) -> LatentSeverity {
    let route: f64 = rng.random();
    if route < 0.6 {
        LatentSeverity::default()
    } else if route < 0.85 {
        LatentSeverity {
            osteophyte: 1,
            jsn: 0,
            sclerosis: rng.random_range(0..=1),
            cysts: rng.random_range(0..=1),
        }
    } else {
        LatentSeverity {
            osteophyte: 0,
            jsn: 1,
            sclerosis: 0,
            cysts: 0,
        }
    }
}

fn smooth_inside(signed_distance: f64) -> f64 {
    // Logistic edge about half a pixel wide keeps the scene band-limited.
    1.0 / (1.0 + (signed_distance / 0.5).exp())
}

fn ellipse_distance(dx: f64, dy: f64, a: f64, b: f64) -> f64 {
    let f = (dx / a).powi(2) + (dy / b).powi(2) - 1.0;
    let gx = 2.0 * dx / (a * a);
    let gy = 2.0 * dy / (b * b);
    let g = (gx * gx + gy * gy).sqrt();
    if g < 1e-9 {
        -a.min(b)
    } else {
        f / g
    }
}

struct Scene {
    center: Point,
    a: f64,
    b: f64,
    femur_center: Point,
    femur_radius: f64,
    blobs: Vec<(Point, f64, f64)>,
}

impl Scene {
    fn new(record: &CohortRecord, config: &SynthConfig) -> Self {
        let g = &record.geometry;
        let [cx, cy] = g.center;
        let (a, b) = (g.semi_axis_x, g.semi_axis_y);
        let femur_center = [cx + a + g.joint_gap + g.femur_radius, cy];
        let mut blobs = Vec::new();
        let ost = record.latent.osteophyte;
        if ost > 0 {
            let radius = b * (0.05 + 0.045 * ost as f64);
            let brightness = config.lesion_contrast * (0.6 + 0.2 * ost as f64);
            for pole in [-1.0, 1.0] {
                blobs.push(([cx + 0.35 * a, cy + pole * 0.95 * b], radius, brightness));
            }
        }
        Self {
            center: g.center,
            a,
            b,
            femur_center,
            femur_radius: g.femur_radius,
            blobs,
        }
    }

    fn intensity(&self, p: Point) -> f64 {
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        let patella = smooth_inside(ellipse_distance(dx, dy, self.a, self.b));
        let fd = ((p[0] - self.femur_center[0]).powi(2) + (p[1] - self.femur_center[1]).powi(2))
            .sqrt()
            - self.femur_radius;
        let femur = smooth_inside(fd);
        let mut v = 0.18 + 0.42 * femur + 0.54 * patella * (1.0 - femur);
        for &(c, r, bright) in &self.blobs {
            let d = ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sqrt() - r;
            v += bright * smooth_inside(d);
        }
        v
    }

    fn lesion_boxes(&self, gap: f64) -> Vec<LesionBox> {
        let [cx, cy] = self.center;
        let mut boxes = vec![LesionBox::axis_aligned(
            LesionKind::JointSpace,
            cx + 0.85 * self.a,
            cy - 0.5 * self.b,
            cx + self.a + gap + 1.0,
            cy + 0.5 * self.b,
        )];
        for &(c, r, _) in &self.blobs {
            boxes.push(LesionBox::axis_aligned(
                LesionKind::Osteophyte,
                c[0] - r,
                c[1] - r,
                c[0] + r,
                c[1] + r,
            ));
        }
        boxes
    }
}

/// Draw a lateral-view knee: patella ellipse, femoral condyle, polar
/// osteophytes scaled by grade, and a joint gap narrowed by JSN grade.
/// Right knees are mirrored; the whole view is rotated about the image
/// center by the record's rotation with landmarks and boxes moved alike.
pub fn render_knee_image(record: &CohortRecord, config: &SynthConfig) -> Result<RenderedKnee> {
    if config.image_size < 64 {
        return Err(Error::config(
            "image_size",
            format!("must be at least 64 pixels, got {}", config.image_size),
        ));
    }
    record.latent.validate()?;
    let size = config.image_size;
    let s = size as f64;
    let mid = [(s - 1.0) / 2.0, (s - 1.0) / 2.0];
    let g = &record.geometry;
    let mirror = record.side == Side::Right;
    let to_image = |p: Point| -> Point {
        let p = if mirror { [s - 1.0 - p[0], p[1]] } else { p };
        rotate_about(p, mid, g.rotation_deg)
    };

    let scene = Scene::new(record, config);
    let mut rng = rng_for(g.render_seed, 0);
    let noise = Normal::new(0.0, config.noise_sigma.max(1e-300)).expect("valid sigma");
    let mut image = GrayImage::new(size, size);
    for y in 0..size {
        for x in 0..size {
            let mut q = rotate_about([x as f64, y as f64], mid, -g.rotation_deg);
            if mirror {
                q[0] = s - 1.0 - q[0];
            }
            let mut v = scene.intensity(q);
            if config.noise_sigma > 0.0 {
                v += noise.sample(&mut rng);
            }
            image.set(x, y, v.clamp(0.0, 1.0));
        }
    }

    let jitter = Normal::new(0.0, config.landmark_jitter.max(1e-300)).expect("valid jitter");
    let n = config.n_landmarks;
    let landmarks = (0..n)
        .map(|k| {
            let t = std::f64::consts::TAU * k as f64 / n as f64;
            let mut p = [
                g.center[0] + g.semi_axis_x * t.cos(),
                g.center[1] + g.semi_axis_y * t.sin(),
            ];
            if config.landmark_jitter > 0.0 {
                p[0] += jitter.sample(&mut rng);
                p[1] += jitter.sample(&mut rng);
            }
            to_image(p)
        })
        .collect();
    let lesion_boxes = scene
        .lesion_boxes(g.joint_gap)
        .into_iter()
        .map(|b| b.map(to_image))
        .collect();
    Ok(RenderedKnee {
        image,
        landmarks,
        lesion_boxes,
    })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LandmarkFile {
    pub points: Vec<Point>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LesionFile {
    pub boxes: Vec<LesionBox>,
}

pub const CLINICAL_HEADER: [&str; 8] = ["subject_id", "side", "age", "sex", "bmi", "womac", "kl", "label"];

/// Write the clinical table. Floats use the shortest round-trip
/// representation so reruns are byte-identical.
pub fn write_clinical_csv(records: &[CohortRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(CLINICAL_HEADER)?;
    for r in records {
        w.write_record([
            r.subject_id.clone(),
            r.side.as_str().to_string(),
            r.age.to_string(),
            r.sex.to_string(),
            r.bmi.to_string(),
            r.womac.to_string(),
            r.kl.to_string(),
            r.label.as_u8().to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// One row of the clinical CSV.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct ClinicalRow {
    pub subject_id: String,
    pub side: Side,
    pub age: f64,
    pub sex: u8,
    pub bmi: f64,
    pub womac: f64,
    pub kl: u8,
    pub label: u8,
}

impl ClinicalRow {
    pub fn knee_id(&self) -> String {
        knee_id(&self.subject_id, self.side)
    }
}

impl From<&CohortRecord> for ClinicalRow {
    fn from(r: &CohortRecord) -> Self {
        Self {
            subject_id: r.subject_id.clone(),
            side: r.side,
            age: r.age,
            sex: r.sex,
            bmi: r.bmi,
            womac: r.womac,
            kl: r.kl,
            label: r.label.as_u8(),
        }
    }
}

pub fn read_clinical_csv(path: &Path) -> Result<Vec<ClinicalRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    for col in CLINICAL_HEADER {
        if !headers.iter().any(|h| h == col) {
            return Err(Error::Validation(format!(
                "{} is missing column `{col}`",
                path.display()
            )));
        }
    }
    let rows = r.deserialize().collect::<std::result::Result<Vec<ClinicalRow>, _>>()?;
    for row in &rows {
        Label::from_u8(row.label)?;
        if row.kl > 4 {
            return Err(Error::Validation(format!("kl {} outside [0,4]", row.kl)));
        }
    }
    Ok(rows)
}

/// Cohort directory layout shared by the writer and the preprocessing stage.
pub struct CohortLayout<'a> {
    pub root: &'a Path,
}

impl CohortLayout<'_> {
    pub fn clinical_csv(&self) -> std::path::PathBuf {
        self.root.join("clinical.csv")
    }
    pub fn image(&self, knee: &str) -> std::path::PathBuf {
        self.root.join("images").join(format!("{knee}.png"))
    }
    pub fn landmarks(&self, knee: &str) -> std::path::PathBuf {
        self.root.join("landmarks").join(format!("{knee}.json"))
    }
    pub fn lesions(&self, knee: &str) -> std::path::PathBuf {
        self.root.join("lesions").join(format!("{knee}.json"))
    }

    pub fn create_dirs(&self) -> Result<()> {
        for sub in ["images", "landmarks", "lesions"] {
            let p = self.root.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

/// Render one knee and write its PNG, landmark JSON and lesion-box JSON.
pub fn write_knee_files(
    record: &CohortRecord,
    config: &SynthConfig,
    layout: &CohortLayout<'_>,
) -> Result<()> {
    let knee = record.knee_id();
    let rendered = render_knee_image(record, config)?;
    rendered.image.save_png16(&layout.image(&knee))?;
    let lm = serde_json::to_vec(&LandmarkFile {
        points: rendered.landmarks,
    })?;
    let path = layout.landmarks(&knee);
    fs::write(&path, lm).map_err(|e| Error::io(&path, e))?;
    let boxes = serde_json::to_vec(&LesionFile {
        boxes: rendered.lesion_boxes,
    })?;
    let path = layout.lesions(&knee);
    fs::write(&path, boxes).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_force_label(o: u8, j: u8, s: u8, c: u8) -> bool {
        // Enumerate the rule's two clauses literally.
        let clause_a = o >= 2;
        let mut clause_b = false;
        if j >= 1 {
            for g in [o, s, c] {
                if g >= 1 {
                    clause_b = true;
                }
            }
        }
        clause_a || clause_b
    }

    #[test]
    fn label_examples() {
        let l = |o, j, s, c| assign_label(&LatentSeverity::new(o, j, s, c).unwrap()).unwrap();
        assert_eq!(l(2, 0, 0, 0), Label::Progressor);
        assert_eq!(l(1, 0, 0, 0), Label::NonProgressor);
        assert_eq!(l(0, 1, 1, 0), Label::Progressor);
        assert_eq!(l(0, 0, 0, 0), Label::NonProgressor);
    }

    #[test]
    fn label_matches_enumeration_over_all_grades() {
        for o in 0..4 {
            for j in 0..4 {
                for s in 0..4 {
                    for c in 0..4 {
                        let lat = LatentSeverity::new(o, j, s, c).unwrap();
                        let got = assign_label(&lat).unwrap() == Label::Progressor;
                        assert_eq!(got, brute_force_label(o, j, s, c), "{lat:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn out_of_range_grade_is_rejected() {
        let bad = LatentSeverity {
            osteophyte: 4,
            ..Default::default()
        };
        assert!(matches!(assign_label(&bad), Err(Error::Validation(_))));
    }

    #[test]
    fn prevalence_is_hit() {
        let cfg = SynthConfig {
            n_subjects: 1000,
            seed: 7,
            ..Default::default()
        };
        let cohort = generate_cohort(&cfg).unwrap();
        let pos = cohort.iter().filter(|r| r.label == Label::Progressor).count();
        let frac = pos as f64 / cohort.len() as f64;
        assert!((0.10..=0.14).contains(&frac), "{frac}");
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SynthConfig {
            n_subjects: 50,
            ..Default::default()
        };
        let a = serde_json::to_vec(&generate_cohort(&cfg).unwrap()).unwrap();
        let b = serde_json::to_vec(&generate_cohort(&cfg).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    fn point_biserial(cohort: &[CohortRecord]) -> f64 {
        let n = cohort.len() as f64;
        let x: Vec<f64> = cohort.iter().map(|r| r.bmi).collect();
        let y: Vec<f64> = cohort.iter().map(|r| r.label.as_u8() as f64).collect();
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let cov: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
        let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
        cov / (vx * vy).sqrt()
    }

    #[test]
    fn zero_effects_decouple_label_from_bmi() {
        let cfg = SynthConfig {
            n_subjects: 2000,
            knees_per_subject: 1,
            effect_strengths: EffectStrengths::zero(),
            ..Default::default()
        };
        let r = point_biserial(&generate_cohort(&cfg).unwrap());
        assert!(r.abs() < 0.05, "r = {r}");
    }

    #[test]
    fn positive_effects_raise_progressor_bmi() {
        let cfg = SynthConfig {
            n_subjects: 2000,
            knees_per_subject: 1,
            ..Default::default()
        };
        let cohort = generate_cohort(&cfg).unwrap();
        let mean = |lab: Label| {
            let v: Vec<f64> = cohort.iter().filter(|r| r.label == lab).map(|r| r.bmi).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!(mean(Label::Progressor) > mean(Label::NonProgressor));
    }

    #[test]
    fn invalid_configs_name_the_field() {
        let bad = SynthConfig {
            target_prevalence: 1.5,
            ..Default::default()
        };
        match generate_cohort(&bad) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "target_prevalence"),
            other => panic!("unexpected {other:?}"),
        }
        let tiny = SynthConfig {
            image_size: 32,
            ..Default::default()
        };
        assert!(matches!(tiny.validate(), Err(Error::Config { .. })));
        let infeasible = SynthConfig {
            n_subjects: 2,
            knees_per_subject: 1,
            target_prevalence: 0.1,
            ..Default::default()
        };
        assert!(matches!(generate_cohort(&infeasible), Err(Error::Config { .. })));
    }

    fn record_with(latent: LatentSeverity, rotation: f64) -> (CohortRecord, SynthConfig) {
        let cfg = SynthConfig {
            n_subjects: 4,
            ..Default::default()
        };
        let mut r = generate_cohort(&cfg).unwrap().remove(0);
        r.latent = latent;
        r.label = assign_label(&latent).unwrap();
        r.geometry.rotation_deg = rotation;
        r.geometry.joint_gap = 0.22 * r.geometry.semi_axis_y * (1.0 - 0.22 * latent.jsn as f64);
        (r, cfg)
    }

    #[test]
    fn normal_knee_has_only_the_joint_band() {
        let (r, cfg) = record_with(LatentSeverity::default(), 0.0);
        let k = render_knee_image(&r, &cfg).unwrap();
        assert_eq!(k.lesion_boxes.len(), 1);
        assert_eq!(k.lesion_boxes[0].kind, LesionKind::JointSpace);
        assert_eq!(k.landmarks.len(), 10);
    }

    fn mean_in_osteophyte_boxes(k: &RenderedKnee) -> f64 {
        let (mut sum, mut n) = (0.0, 0usize);
        for b in k.lesion_boxes.iter().filter(|b| b.kind == LesionKind::Osteophyte) {
            for y in 0..k.image.height() {
                for x in 0..k.image.width() {
                    if b.contains([x as f64, y as f64]) {
                        sum += k.image.get(x, y);
                        n += 1;
                    }
                }
            }
        }
        sum / n as f64
    }

    #[test]
    fn higher_osteophyte_grade_is_brighter() {
        let (r3, cfg) = record_with(LatentSeverity::new(3, 0, 0, 0).unwrap(), 0.0);
        let (r1, _) = record_with(LatentSeverity::new(1, 0, 0, 0).unwrap(), 0.0);
        let m3 = mean_in_osteophyte_boxes(&render_knee_image(&r3, &cfg).unwrap());
        let m1 = mean_in_osteophyte_boxes(&render_knee_image(&r1, &cfg).unwrap());
        assert!(m3 > m1, "{m3} vs {m1}");
    }

    #[test]
    fn rotation_tilts_the_landmark_axis() {
        let (r, cfg) = record_with(LatentSeverity::default(), 10.0);
        let k = render_knee_image(&r, &cfg).unwrap();
        // principal-axis fit on the generated landmarks
        let n = k.landmarks.len() as f64;
        let mx = k.landmarks.iter().map(|p| p[0]).sum::<f64>() / n;
        let my = k.landmarks.iter().map(|p| p[1]).sum::<f64>() / n;
        let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
        for p in &k.landmarks {
            sxx += (p[0] - mx).powi(2);
            syy += (p[1] - my).powi(2);
            sxy += (p[0] - mx) * (p[1] - my);
        }
        // angle of the major axis from the x axis, then from vertical
        let phi = 0.5 * (2.0 * sxy).atan2(sxx - syy);
        let mut tilt = phi.to_degrees() - 90.0;
        if tilt <= -90.0 {
            tilt += 180.0;
        }
        assert!((tilt - 10.0).abs() < 0.5, "tilt {tilt}");
    }

    #[test]
    fn rendering_is_reproducible() {
        let (r, cfg) = record_with(LatentSeverity::new(2, 1, 0, 0).unwrap(), 5.0);
        let a = render_knee_image(&r, &cfg).unwrap();
        let b = render_knee_image(&r, &cfg).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.landmarks, b.landmarks);
    }
}
