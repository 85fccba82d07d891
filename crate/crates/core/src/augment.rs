//! Training-time image corruption.
//!
//! Ten kinds: ink morphology (dilate/erode), perspective, blur, five weather
//! overlays (fog, frost, rain, snow, shadow) and JPEG recompression. Weather
//! kinds draw their geometry from the RNG independently of severity and
//! blend with a strictly increasing per-severity weight, so for a fixed seed
//! the mean pixel delta is non-decreasing in severity by construction.
//!
//! Everything operates on 8-bit RGB images, preserves shape, and is
//! deterministic given the RNG state. Severities run 1..=5.

use std::sync::atomic::{AtomicU64, Ordering};

use image::{Rgb, RgbImage};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("morphology kernel must be odd and >= 1, got {0}")]
    InvalidKernel(usize),
    #[error("unknown augmentation kind {0:?}")]
    UnknownKind(String),
    #[error("invalid augmentation config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Dilate,
    Erode,
    Fog,
    Frost,
    Rain,
    Snow,
    Shadow,
    Blur,
    Jpeg,
    Perspective,
}

/// Application order of the pipeline; morphology first, compression last.
pub const ALL_KINDS: [Kind; 10] = [
    Kind::Dilate,
    Kind::Erode,
    Kind::Perspective,
    Kind::Blur,
    Kind::Fog,
    Kind::Frost,
    Kind::Rain,
    Kind::Snow,
    Kind::Shadow,
    Kind::Jpeg,
];

impl Kind {
    pub fn parse(name: &str) -> Result<Kind, AugmentError> {
        ALL_KINDS
            .iter()
            .copied()
            .find(|k| k.name() == name)
            .ok_or_else(|| AugmentError::UnknownKind(name.to_string()))
    }

    pub fn name(&self) -> &'static str {
        match self {
            Kind::Dilate => "dilate",
            Kind::Erode => "erode",
            Kind::Fog => "fog",
            Kind::Frost => "frost",
            Kind::Rain => "rain",
            Kind::Snow => "snow",
            Kind::Shadow => "shadow",
            Kind::Blur => "blur",
            Kind::Jpeg => "jpeg",
            Kind::Perspective => "perspective",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KindSetting {
    pub kind: Kind,
    pub probability: f64,
    pub min_severity: u8,
    pub max_severity: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct AugmentConfig {
    pub kinds: Vec<KindSetting>,
}

impl AugmentConfig {
    /// All ten kinds at probability 0.15, the full severity range.
    pub fn default_training() -> Self {
        AugmentConfig {
            kinds: ALL_KINDS
                .iter()
                .map(|&kind| KindSetting {
                    kind,
                    probability: 0.15,
                    min_severity: 1,
                    max_severity: 5,
                })
                .collect(),
        }
    }

    pub fn disabled() -> Self {
        AugmentConfig { kinds: Vec::new() }
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        let mut morph_p = 0.0;
        for s in &self.kinds {
            if !(0.0..=1.0).contains(&s.probability) {
                return Err(AugmentError::InvalidConfig(format!(
                    "probability {} for {} outside [0, 1]",
                    s.probability,
                    s.kind.name()
                )));
            }
            if s.min_severity < 1 || s.max_severity > 5 || s.min_severity > s.max_severity {
                return Err(AugmentError::InvalidConfig(format!(
                    "severity range {}..{} for {} outside 1..=5",
                    s.min_severity,
                    s.max_severity,
                    s.kind.name()
                )));
            }
            if matches!(s.kind, Kind::Dilate | Kind::Erode) {
                morph_p += s.probability;
            }
        }
        if morph_p > 1.0 {
            return Err(AugmentError::InvalidConfig(
                "dilate and erode probabilities exceed 1 combined; they are mutually exclusive"
                    .into(),
            ));
        }
        Ok(())
    }

    fn setting(&self, kind: Kind) -> Option<&KindSetting> {
        self.kinds.iter().find(|s| s.kind == kind)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MorphKind {
    Dilate,
    Erode,
}

/// Grayscale morphology per channel with ink (dark) as foreground: dilate
/// thickens dark strokes (min filter), erode thins them (max filter).
pub fn morphological(
    img: &RgbImage,
    kind: MorphKind,
    kernel: usize,
) -> Result<RgbImage, AugmentError> {
    if kernel == 0 || kernel % 2 == 0 {
        return Err(AugmentError::InvalidKernel(kernel));
    }
    let (w, h) = img.dimensions();
    let r = (kernel / 2) as i64;
    let mut out = RgbImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut acc = [match kind {
                MorphKind::Dilate => 255u8,
                MorphKind::Erode => 0u8,
            }; 3];
            for dy in -r..=r {
                for dx in -r..=r {
                    let sy = (y as i64 + dy).clamp(0, h as i64 - 1) as u32;
                    let sx = (x as i64 + dx).clamp(0, w as i64 - 1) as u32;
                    let p = img.get_pixel(sx, sy);
                    for c in 0..3 {
                        acc[c] = match kind {
                            MorphKind::Dilate => acc[c].min(p[c]),
                            MorphKind::Erode => acc[c].max(p[c]),
                        };
                    }
                }
            }
            out.put_pixel(x, y, Rgb(acc));
        }
    }
    Ok(out)
}

fn severity_weight(severity: u8, table: [f64; 5]) -> Result<f64, AugmentError> {
    if !(1..=5).contains(&severity) {
        return Err(AugmentError::InvalidConfig(format!(
            "severity {severity} outside 1..=5"
        )));
    }
    Ok(table[severity as usize - 1])
}

fn blend(px: u8, target: f64, alpha: f64) -> u8 {
    (px as f64 + alpha * (target - px as f64)).clamp(0.0, 255.0) as u8
}

/// Smooth field in [0, 1]: coarse uniform noise, bilinearly upsampled.
fn low_frequency_field(w: u32, h: u32, cells: u32, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (cw, ch) = (cells.max(2), cells.max(2));
    let coarse: Vec<f64> = (0..(cw * ch)).map(|_| rng.gen::<f64>()).collect();
    let mut field = vec![0.0; (w * h) as usize];
    for y in 0..h {
        let fy = y as f64 / h as f64 * (ch - 1) as f64;
        let y0 = fy.floor() as u32;
        let y1 = (y0 + 1).min(ch - 1);
        let ty = fy - y0 as f64;
        for x in 0..w {
            let fx = x as f64 / w as f64 * (cw - 1) as f64;
            let x0 = fx.floor() as u32;
            let x1 = (x0 + 1).min(cw - 1);
            let tx = fx - x0 as f64;
            let p00 = coarse[(y0 * cw + x0) as usize];
            let p01 = coarse[(y0 * cw + x1) as usize];
            let p10 = coarse[(y1 * cw + x0) as usize];
            let p11 = coarse[(y1 * cw + x1) as usize];
            field[(y * w + x) as usize] = p00 * (1.0 - tx) * (1.0 - ty)
                + p01 * tx * (1.0 - ty)
                + p10 * (1.0 - tx) * ty
                + p11 * tx * ty;
        }
    }
    field
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeatherKind {
    Fog,
    Frost,
    Rain,
    Snow,
    Shadow,
}

/// Parametric weather corruption; geometry comes from `rng`, intensity from
/// `severity` alone.
pub fn weather_noise(
    img: &RgbImage,
    kind: WeatherKind,
    severity: u8,
    rng: &mut ChaCha8Rng,
) -> Result<RgbImage, AugmentError> {
    let (w, h) = img.dimensions();
    let mut out = img.clone();
    match kind {
        WeatherKind::Fog => {
            // additive low-frequency brightness toward white
            let wgt = severity_weight(severity, [0.12, 0.24, 0.38, 0.52, 0.68])?;
            let field = low_frequency_field(w, h, 5, rng);
            for y in 0..h {
                for x in 0..w {
                    let a = wgt * field[(y * w + x) as usize];
                    let p = out.get_pixel_mut(x, y);
                    for c in 0..3 {
                        p[c] = blend(p[c], 255.0, a);
                    }
                }
            }
        }
        WeatherKind::Frost => {
            // crystalline speckle: thresholded smooth noise blended toward
            // a pale blue-gray
            let wgt = severity_weight(severity, [0.15, 0.3, 0.45, 0.6, 0.75])?;
            let field = low_frequency_field(w, h, (w / 6).clamp(4, 48), rng);
            for y in 0..h {
                for x in 0..w {
                    let f = field[(y * w + x) as usize];
                    if f < 0.55 {
                        continue;
                    }
                    let p = out.get_pixel_mut(x, y);
                    let target = [205.0, 215.0, 225.0];
                    for c in 0..3 {
                        p[c] = blend(p[c], target[c], wgt);
                    }
                }
            }
        }
        WeatherKind::Rain => {
            // oriented gray streaks
            let alpha = severity_weight(severity, [0.25, 0.4, 0.55, 0.7, 0.85])?;
            let count = ((w * h) / 300).clamp(12, 400);
            for _ in 0..count {
                let x0 = rng.gen_range(0.0..w as f64);
                let y0 = rng.gen_range(0.0..h as f64);
                let angle: f64 = rng.gen_range(1.0..1.35); // radians, roughly 60-77 deg
                let len: f64 = rng.gen_range(6.0..16.0);
                let (dx, dy) = (angle.cos(), angle.sin());
                let mut t = 0.0;
                while t < len {
                    let x = (x0 + t * dx) as i64;
                    let y = (y0 + t * dy) as i64;
                    if x >= 0 && y >= 0 && (x as u32) < w && (y as u32) < h {
                        let p = out.get_pixel_mut(x as u32, y as u32);
                        for c in 0..3 {
                            p[c] = blend(p[c], 110.0, alpha);
                        }
                    }
                    t += 1.0;
                }
            }
        }
        WeatherKind::Snow => {
            // scattered round flakes
            let alpha = severity_weight(severity, [0.25, 0.4, 0.55, 0.7, 0.85])?;
            let count = ((w * h) / 400).clamp(10, 300);
            for _ in 0..count {
                let cx = rng.gen_range(0.0..w as f64);
                let cy = rng.gen_range(0.0..h as f64);
                let radius: f64 = rng.gen_range(0.8..2.2);
                let r = radius.ceil() as i64;
                for dy in -r..=r {
                    for dx in -r..=r {
                        if (dx * dx + dy * dy) as f64 > radius * radius {
                            continue;
                        }
                        let x = cx as i64 + dx;
                        let y = cy as i64 + dy;
                        if x >= 0 && y >= 0 && (x as u32) < w && (y as u32) < h {
                            let p = out.get_pixel_mut(x as u32, y as u32);
                            for c in 0..3 {
                                p[c] = blend(p[c], 178.0, alpha);
                            }
                        }
                    }
                }
            }
        }
        WeatherKind::Shadow => {
            // multiplicative darkening inside a random convex quad
            let wgt = severity_weight(severity, [0.2, 0.35, 0.5, 0.65, 0.8])?;
            let cx = rng.gen_range(0.2..0.8) * w as f64;
            let cy = rng.gen_range(0.2..0.8) * h as f64;
            let rad = rng.gen_range(0.3..0.6) * w.max(h) as f64;
            let mut angles: Vec<f64> = (0..4)
                .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
                .collect();
            angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let quad: Vec<(f64, f64)> = angles
                .iter()
                .map(|a| (cx + rad * a.cos(), cy + rad * a.sin()))
                .collect();
            for y in 0..h {
                for x in 0..w {
                    if point_in_convex(&quad, x as f64 + 0.5, y as f64 + 0.5) {
                        let p = out.get_pixel_mut(x, y);
                        for c in 0..3 {
                            p[c] = (p[c] as f64 * (1.0 - 0.5 * wgt)).round() as u8;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

fn point_in_convex(poly: &[(f64, f64)], px: f64, py: f64) -> bool {
    let n = poly.len();
    let mut sign = 0.0f64;
    for i in 0..n {
        let (x1, y1) = poly[i];
        let (x2, y2) = poly[(i + 1) % n];
        let cross = (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1);
        if cross.abs() < 1e-12 {
            continue;
        }
        if sign == 0.0 {
            sign = cross.signum();
        } else if sign != cross.signum() {
            return false;
        }
    }
    true
}

/// Separable Gaussian blur; sigma grows with severity.
pub fn blur(img: &RgbImage, severity: u8) -> Result<RgbImage, AugmentError> {
    let sigma = severity_weight(severity, [0.6, 0.9, 1.3, 1.8, 2.4])?;
    let radius = (2.5 * sigma).ceil() as i64;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let ksum: f64 = kernel.iter().sum();
    let (w, h) = img.dimensions();
    let mut horiz = vec![[0.0f64; 3]; (w * h) as usize];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 3];
            for (ki, kv) in kernel.iter().enumerate() {
                let sx = (x as i64 + ki as i64 - radius).clamp(0, w as i64 - 1) as u32;
                let p = img.get_pixel(sx, y);
                for c in 0..3 {
                    acc[c] += kv * p[c] as f64;
                }
            }
            horiz[(y * w + x) as usize] = [acc[0] / ksum, acc[1] / ksum, acc[2] / ksum];
        }
    }
    let mut out = RgbImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 3];
            for (ki, kv) in kernel.iter().enumerate() {
                let sy = (y as i64 + ki as i64 - radius).clamp(0, h as i64 - 1) as u32;
                let p = horiz[(sy * w + x) as usize];
                for c in 0..3 {
                    acc[c] += kv * p[c];
                }
            }
            out.put_pixel(
                x,
                y,
                Rgb([
                    (acc[0] / ksum).clamp(0.0, 255.0).round() as u8,
                    (acc[1] / ksum).clamp(0.0, 255.0).round() as u8,
                    (acc[2] / ksum).clamp(0.0, 255.0).round() as u8,
                ]),
            );
        }
    }
    Ok(out)
}

/// One JPEG encode/decode round at a severity-dependent quality.
pub fn jpeg_recompress(img: &RgbImage, severity: u8) -> Result<RgbImage, AugmentError> {
    let quality = [30u8, 24, 18, 12, 7][severity_index(severity)?];
    let mut buf = Vec::new();
    let mut enc = image::codecs::jpeg::JpegEncoder::new_with_quality(&mut buf, quality);
    enc.encode_image(img)
        .map_err(|e| AugmentError::InvalidConfig(format!("jpeg encode failed: {e}")))?;
    let decoded = image::load_from_memory(&buf)
        .map_err(|e| AugmentError::InvalidConfig(format!("jpeg decode failed: {e}")))?;
    Ok(decoded.to_rgb8())
}

fn severity_index(severity: u8) -> Result<usize, AugmentError> {
    if !(1..=5).contains(&severity) {
        return Err(AugmentError::InvalidConfig(format!(
            "severity {severity} outside 1..=5"
        )));
    }
    Ok(severity as usize - 1)
}

/// Mild perspective warp: corners move inward/outward by a small
/// severity-scaled fraction; background fills white.
pub fn perspective(
    img: &RgbImage,
    severity: u8,
    rng: &mut ChaCha8Rng,
) -> Result<RgbImage, AugmentError> {
    let (w, h) = img.dimensions();
    let d = severity_weight(severity, [0.01, 0.02, 0.03, 0.045, 0.06])? * w.min(h) as f64;
    let dst = [
        (0.0, 0.0),
        (w as f64 - 1.0, 0.0),
        (w as f64 - 1.0, h as f64 - 1.0),
        (0.0, h as f64 - 1.0),
    ];
    let src: Vec<(f64, f64)> = dst
        .iter()
        .map(|&(x, y)| {
            (
                x + rng.gen_range(-d..=d),
                y + rng.gen_range(-d..=d),
            )
        })
        .collect();
    let hmat = homography(&dst, &src).ok_or_else(|| {
        AugmentError::InvalidConfig("degenerate perspective transform".into())
    })?;
    let mut out = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = apply_homography(&hmat, x as f64, y as f64);
            if fx < 0.0 || fy < 0.0 || fx > (w - 1) as f64 || fy > (h - 1) as f64 {
                continue;
            }
            let x0 = fx.floor() as u32;
            let y0 = fy.floor() as u32;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
            let mut px = [0u8; 3];
            for (c, slot) in px.iter_mut().enumerate() {
                let p00 = img.get_pixel(x0, y0)[c] as f64;
                let p01 = img.get_pixel(x1, y0)[c] as f64;
                let p10 = img.get_pixel(x0, y1)[c] as f64;
                let p11 = img.get_pixel(x1, y1)[c] as f64;
                let v = p00 * (1.0 - tx) * (1.0 - ty)
                    + p01 * tx * (1.0 - ty)
                    + p10 * (1.0 - tx) * ty
                    + p11 * tx * ty;
                *slot = v.clamp(0.0, 255.0).round() as u8;
            }
            out.put_pixel(x, y, Rgb(px));
        }
    }
    Ok(out)
}

/// 3x3 homography mapping each `from[i]` onto `to[i]`, solved by Gaussian
/// elimination with partial pivoting. `None` for degenerate quadrilaterals.
fn homography(from: &[(f64, f64); 4], to: &[(f64, f64)]) -> Option<[f64; 9]> {
    let mut a = [[0.0f64; 9]; 8];
    for i in 0..4 {
        let (x, y) = from[i];
        let (u, v) = to[i];
        a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, u];
        a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y, v];
    }
    // solve the 8x8 system with the last column as RHS
    for col in 0..8 {
        let pivot = (col..8).max_by(|&r1, &r2| {
            a[r1][col].abs().partial_cmp(&a[r2][col].abs()).unwrap()
        })?;
        if a[pivot][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, pivot);
        let pv = a[col][col];
        for r in 0..8 {
            if r == col {
                continue;
            }
            let f = a[r][col] / pv;
            for c in col..9 {
                a[r][c] -= f * a[col][c];
            }
        }
    }
    let mut hm = [0.0f64; 9];
    for i in 0..8 {
        hm[i] = a[i][8] / a[i][i];
    }
    hm[8] = 1.0;
    Some(hm)
}

fn apply_homography(h: &[f64; 9], x: f64, y: f64) -> (f64, f64) {
    let wz = h[6] * x + h[7] * y + h[8];
    (
        (h[0] * x + h[1] * y + h[2]) / wz,
        (h[3] * x + h[4] * y + h[5]) / wz,
    )
}

/// Pipeline with an instrumentation counter; the evaluation path never
/// constructs one.
pub struct Augmenter {
    config: AugmentConfig,
    calls: AtomicU64,
}

impl Augmenter {
    pub fn new(config: AugmentConfig) -> Result<Self, AugmentError> {
        config.validate()?;
        Ok(Augmenter {
            config,
            calls: AtomicU64::new(0),
        })
    }

    /// Number of pipeline invocations so far.
    pub fn applications(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    /// Applies each enabled kind independently with its probability, in the
    /// fixed [`ALL_KINDS`] order; dilate and erode are a mutually exclusive
    /// draw.
    pub fn augment(&self, img: &RgbImage, rng: &mut ChaCha8Rng) -> RgbImage {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let mut out = img.clone();
        // one draw decides between the mutually exclusive morphology kinds
        let p_dilate = self.config.setting(Kind::Dilate).map_or(0.0, |s| s.probability);
        let p_erode = self.config.setting(Kind::Erode).map_or(0.0, |s| s.probability);
        if p_dilate > 0.0 || p_erode > 0.0 {
            let u: f64 = rng.gen();
            if u < p_dilate {
                let s = self.config.setting(Kind::Dilate).unwrap();
                let sev = draw_severity(s, rng);
                out = morphological(&out, MorphKind::Dilate, kernel_for(sev)).unwrap();
            } else if u < p_dilate + p_erode {
                let s = self.config.setting(Kind::Erode).unwrap();
                let sev = draw_severity(s, rng);
                out = morphological(&out, MorphKind::Erode, kernel_for(sev)).unwrap();
            }
        }
        for kind in [
            Kind::Perspective,
            Kind::Blur,
            Kind::Fog,
            Kind::Frost,
            Kind::Rain,
            Kind::Snow,
            Kind::Shadow,
            Kind::Jpeg,
        ] {
            let Some(s) = self.config.setting(kind) else {
                continue;
            };
            if s.probability <= 0.0 || rng.gen::<f64>() >= s.probability {
                continue;
            }
            let sev = draw_severity(s, rng);
            out = match kind {
                Kind::Perspective => perspective(&out, sev, rng).unwrap(),
                Kind::Blur => blur(&out, sev).unwrap(),
                Kind::Fog => weather_noise(&out, WeatherKind::Fog, sev, rng).unwrap(),
                Kind::Frost => weather_noise(&out, WeatherKind::Frost, sev, rng).unwrap(),
                Kind::Rain => weather_noise(&out, WeatherKind::Rain, sev, rng).unwrap(),
                Kind::Snow => weather_noise(&out, WeatherKind::Snow, sev, rng).unwrap(),
                Kind::Shadow => weather_noise(&out, WeatherKind::Shadow, sev, rng).unwrap(),
                Kind::Jpeg => jpeg_recompress(&out, sev).unwrap(),
                Kind::Dilate | Kind::Erode => unreachable!(),
            };
        }
        out
    }
}

fn draw_severity(s: &KindSetting, rng: &mut ChaCha8Rng) -> u8 {
    if s.min_severity == s.max_severity {
        s.min_severity
    } else {
        rng.gen_range(s.min_severity..=s.max_severity)
    }
}

/// Severity to morphology kernel: 3, 5, 7, 9, 11.
pub fn kernel_for(severity: u8) -> usize {
    2 * severity as usize + 1
}
