//! Deterministic image degradations used to build probe conditions.
//!
//! All arithmetic is f32 and every quantization back to 8 bits rounds half
//! to even, so outputs are bit-identical across runs and platforms.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::manifest::{ConditionBase, ConditionTag, ImageRecord, Manifest, ManifestError};
use crate::rng::{derive_seed, SeededRng};

pub const MIN_SIDE: u32 = 16;

/// Sunglasses lens-scale jitter as a fraction of the nominal scale.
pub const LENS_JITTER: f64 = 0.10;
/// Sunglasses color jitter in 8-bit levels.
pub const COLOR_JITTER: i32 = 8;

const BRIDGE_HALF_THICKNESS: f32 = 0.06;
const TEMPLE_HALF_THICKNESS: f32 = 0.04;
const LENS_ASPECT: f32 = 0.75;

#[derive(Debug, Error)]
pub enum DegradeError {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("side {side} larger than image {width}x{height}")]
    SideTooLarge { side: u32, width: u32, height: u32 },
    #[error("missing landmarks{}", .0.as_deref().map(|id| format!(" for `{id}`")).unwrap_or_default())]
    MissingLandmarks(Option<String>),
    #[error("image `{0}` has no source_path")]
    NoSource(String),
    #[error("image io: {0}")]
    Image(#[from] image::ImageError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("landmarks line {line}: {message}")]
    Landmarks { line: u64, message: String },
    #[error(transparent)]
    Manifest(#[from] ManifestError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f32,
    pub y: f32,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Landmarks {
    pub left_eye: Point,
    pub right_eye: Point,
    pub nose_tip: Point,
}

/// An aligned 8-bit RGB face crop, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedFace {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
    landmarks: Option<Landmarks>,
}

impl AlignedFace {
    pub fn new(
        width: u32,
        height: u32,
        pixels: Vec<u8>,
        landmarks: Option<Landmarks>,
    ) -> Result<Self, DegradeError> {
        if width < MIN_SIDE || height < MIN_SIDE {
            return Err(DegradeError::InvalidImage(format!(
                "{width}x{height} is below the {MIN_SIDE}px minimum"
            )));
        }
        if pixels.len() != width as usize * height as usize * 3 {
            return Err(DegradeError::InvalidImage(format!(
                "{} bytes for {width}x{height} RGB",
                pixels.len()
            )));
        }
        if let Some(l) = &landmarks {
            for (name, p) in [("left_eye", l.left_eye), ("right_eye", l.right_eye), ("nose_tip", l.nose_tip)] {
                let inside = p.x >= 0.0 && p.y >= 0.0 && p.x < width as f32 && p.y < height as f32;
                if !inside {
                    return Err(DegradeError::InvalidImage(format!(
                        "{name} ({}, {}) outside {width}x{height}",
                        p.x, p.y
                    )));
                }
            }
        }
        Ok(Self {
            width,
            height,
            pixels,
            landmarks,
        })
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3], landmarks: Option<Landmarks>) -> Result<Self, DegradeError> {
        let pixels = rgb
            .iter()
            .copied()
            .cycle()
            .take(width as usize * height as usize * 3)
            .collect();
        Self::new(width, height, pixels, landmarks)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn landmarks(&self) -> Option<&Landmarks> {
        self.landmarks.as_ref()
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn load_png(path: impl AsRef<Path>, landmarks: Option<Landmarks>) -> Result<Self, DegradeError> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        Self::new(w, h, img.into_raw(), landmarks)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<(), DegradeError> {
        image::save_buffer_with_format(
            path,
            &self.pixels,
            self.width,
            self.height,
            image::ColorType::Rgb8,
            image::ImageFormat::Png,
        )?;
        Ok(())
    }
}

#[inline]
fn quantize(v: f32) -> u8 {
    v.round_ties_even().clamp(0.0, 255.0) as u8
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlurSpec {
    pub sigma: f32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resample {
    Bilinear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LowResSpec {
    pub side: u32,
    pub resample: Resample,
}

impl LowResSpec {
    pub fn bilinear(side: u32) -> Self {
        Self {
            side,
            resample: Resample::Bilinear,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SunglassesSpec {
    /// Lens semi-axis along the eye line, as a fraction of eye distance.
    pub lens_scale: f32,
    pub opacity: f32,
    pub color: [u8; 3],
    pub style_seed: u64,
}

impl Default for SunglassesSpec {
    fn default() -> Self {
        Self {
            lens_scale: 0.62,
            opacity: 1.0,
            color: [12, 12, 12],
            style_seed: 0,
        }
    }
}

/// Lens scale and color after the seed-driven style perturbation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SunglassesStyle {
    pub lens_scale: f32,
    pub color: [u8; 3],
}

impl SunglassesSpec {
    pub fn validate(&self) -> Result<(), DegradeError> {
        if !(self.lens_scale > 0.0) || !self.lens_scale.is_finite() {
            return Err(DegradeError::InvalidSpec(format!("lens_scale {}", self.lens_scale)));
        }
        if !(self.opacity > 0.0 && self.opacity <= 1.0) {
            return Err(DegradeError::InvalidSpec(format!("opacity {} not in (0, 1]", self.opacity)));
        }
        Ok(())
    }

    pub fn resolve(&self) -> SunglassesStyle {
        let mut rng = SeededRng::new(self.style_seed);
        let factor = 1.0 + LENS_JITTER * (2.0 * rng.unit_f64() - 1.0);
        let mut color = self.color;
        for c in &mut color {
            let offset = rng.below(2 * COLOR_JITTER as u64 + 1) as i32 - COLOR_JITTER;
            *c = (*c as i32 + offset).clamp(0, 255) as u8;
        }
        SunglassesStyle {
            lens_scale: (self.lens_scale as f64 * factor) as f32,
            color,
        }
    }
}

fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let radius = (3.0 * sigma as f64).ceil() as i64;
    let s2 = 2.0 * (sigma as f64) * (sigma as f64);
    let raw: Vec<f64> = (-radius..=radius).map(|i| (-((i * i) as f64) / s2).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| (w / total) as f32).collect()
}

/// Separable Gaussian blur with clamp-to-edge borders.
pub fn gaussian_blur(img: &AlignedFace, spec: BlurSpec) -> Result<AlignedFace, DegradeError> {
    if !(spec.sigma > 0.0) || !spec.sigma.is_finite() {
        return Err(DegradeError::InvalidSpec(format!("sigma {}", spec.sigma)));
    }
    let kernel = gaussian_kernel(spec.sigma);
    let r = (kernel.len() / 2) as i64;
    let (w, h) = (img.width as i64, img.height as i64);
    let at = |x: i64, y: i64| ((y * w + x) * 3) as usize;

    let mut tmp = vec![0.0f32; img.pixels.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f32; 3];
            for (k, &wk) in kernel.iter().enumerate() {
                let sx = (x + k as i64 - r).clamp(0, w - 1);
                let i = at(sx, y);
                for c in 0..3 {
                    acc[c] += wk * img.pixels[i + c] as f32;
                }
            }
            tmp[at(x, y)..at(x, y) + 3].copy_from_slice(&acc);
        }
    }

    let mut out = vec![0u8; img.pixels.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f32; 3];
            for (k, &wk) in kernel.iter().enumerate() {
                let sy = (y + k as i64 - r).clamp(0, h - 1);
                let i = at(x, sy);
                for c in 0..3 {
                    acc[c] += wk * tmp[i + c];
                }
            }
            let o = at(x, y);
            for c in 0..3 {
                out[o + c] = quantize(acc[c]);
            }
        }
    }
    Ok(AlignedFace { pixels: out, ..img.clone() })
}

/// Bilinear resize with pixel-center alignment:
/// `src = (dst + 0.5) * src_len / dst_len - 0.5`, clamped to the image.
/// `pixels` is packed RGB; results are rounded half to even.
pub fn resize_bilinear(pixels: &[u8], w: u32, h: u32, dw: u32, dh: u32) -> Vec<u8> {
    let axis = |src_len: u32, dst_len: u32| -> Vec<(usize, usize, f32)> {
        let scale = src_len as f32 / dst_len as f32;
        (0..dst_len)
            .map(|d| {
                let s = ((d as f32 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f32);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(src_len as usize - 1);
                (i0, i1, s - i0 as f32)
            })
            .collect()
    };
    let xs = axis(w, dw);
    let ys = axis(h, dh);
    let w = w as usize;
    let mut out = Vec::with_capacity(dw as usize * dh as usize * 3);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for c in 0..3 {
                let p = |x: usize, y: usize| pixels[(y * w + x) * 3 + c] as f32;
                let top = (1.0 - fx) * p(x0, y0) + fx * p(x1, y0);
                let bottom = (1.0 - fx) * p(x0, y1) + fx * p(x1, y1);
                out.push(quantize((1.0 - fy) * top + fy * bottom));
            }
        }
    }
    out
}

/// Bilinear downsample to `side x side`, then back up to the input size.
pub fn reduce_resolution(img: &AlignedFace, spec: LowResSpec) -> Result<AlignedFace, DegradeError> {
    let (w, h) = (img.width, img.height);
    if spec.side == 0 {
        return Err(DegradeError::InvalidSpec("side must be >= 1".into()));
    }
    if spec.side > w.min(h) {
        return Err(DegradeError::SideTooLarge {
            side: spec.side,
            width: w,
            height: h,
        });
    }
    let small = resize_bilinear(&img.pixels, w, h, spec.side, spec.side);
    let pixels = resize_bilinear(&small, spec.side, spec.side, w, h);
    Ok(AlignedFace { pixels, ..img.clone() })
}

/// Downsample only; exposed for inspecting the intermediate image.
pub fn downsample(img: &AlignedFace, side: u32) -> Result<Vec<u8>, DegradeError> {
    if side == 0 || side > img.width.min(img.height) {
        return Err(DegradeError::SideTooLarge {
            side,
            width: img.width,
            height: img.height,
        });
    }
    Ok(resize_bilinear(&img.pixels, img.width, img.height, side, side))
}

/// Pixels covered by the sunglasses, row-major. Pixel `(x, y)` is tested at
/// its integer coordinates, the same frame as the landmarks.
pub fn sunglasses_mask(img: &AlignedFace, spec: &SunglassesSpec) -> Result<Vec<bool>, DegradeError> {
    spec.validate()?;
    let l = img.landmarks.as_ref().ok_or(DegradeError::MissingLandmarks(None))?;
    let (le, re) = (l.left_eye, l.right_eye);
    let (dx, dy) = (re.x - le.x, re.y - le.y);
    let d = (dx * dx + dy * dy).sqrt();
    if d == 0.0 {
        return Err(DegradeError::InvalidSpec("eye landmarks coincide".into()));
    }
    let style = spec.resolve();
    let (ex, ey) = (dx / d, dy / d);
    let a = style.lens_scale * d;
    let b = LENS_ASPECT * a;
    let bridge = BRIDGE_HALF_THICKNESS * d;
    let temple = TEMPLE_HALF_THICKNESS * d;

    let mut mask = Vec::with_capacity(img.width as usize * img.height as usize);
    for y in 0..img.height {
        for x in 0..img.width {
            let (px, py) = (x as f32 - le.x, y as f32 - le.y);
            // eye-line coordinates relative to the left eye
            let u = px * ex + py * ey;
            let v = -px * ey + py * ex;
            let ur = u - d;
            let in_lens = |u: f32| (u / a) * (u / a) + (v / b) * (v / b) <= 1.0;
            let covered = in_lens(u)
                || in_lens(ur)
                || (v.abs() <= bridge && (0.0..=d).contains(&u))
                || (v.abs() <= temple && (u <= 0.0 || ur >= 0.0));
            mask.push(covered);
        }
    }
    Ok(mask)
}

/// Composites dark lenses, bridge and temple bars over the eye region.
/// Pixels outside [`sunglasses_mask`] are left untouched.
pub fn add_sunglasses(img: &AlignedFace, spec: &SunglassesSpec) -> Result<AlignedFace, DegradeError> {
    let mask = sunglasses_mask(img, spec)?;
    let color = spec.resolve().color;
    let alpha = spec.opacity;
    let mut out = img.clone();
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        for c in 0..3 {
            let v = &mut out.pixels[i * 3 + c];
            *v = quantize(alpha * color[c] as f32 + (1.0 - alpha) * *v as f32);
        }
    }
    Ok(out)
}

/// Applies the degradation chain for a probe condition: sunglasses first,
/// then blur or resolution reduction.
pub fn apply_condition(
    img: &AlignedFace,
    condition: ConditionBase,
    blur: Option<BlurSpec>,
    lowres: Option<LowResSpec>,
    sunglasses: &SunglassesSpec,
) -> Result<AlignedFace, DegradeError> {
    let mut out = if condition.has_sunglasses() {
        add_sunglasses(img, sunglasses)?
    } else {
        img.clone()
    };
    if condition.has_blur() {
        let spec = blur.ok_or_else(|| DegradeError::InvalidSpec("blur condition needs sigma".into()))?;
        out = gaussian_blur(&out, spec)?;
    }
    if condition.has_lowres() {
        let spec = lowres.ok_or_else(|| DegradeError::InvalidSpec("lowres condition needs side".into()))?;
        out = reduce_resolution(&out, spec)?;
    }
    Ok(out)
}

pub const LANDMARK_HEADER: [&str; 7] = [
    "image_id",
    "left_eye_x",
    "left_eye_y",
    "right_eye_x",
    "right_eye_y",
    "nose_x",
    "nose_y",
];

pub fn read_landmarks(path: impl AsRef<Path>) -> Result<HashMap<String, Landmarks>, DegradeError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| DegradeError::Landmarks {
        line: 0,
        message: e.to_string(),
    })?;
    let header = rdr.headers().map_err(|e| DegradeError::Landmarks {
        line: 1,
        message: e.to_string(),
    })?;
    if header.iter().ne(LANDMARK_HEADER.iter().copied()) {
        return Err(DegradeError::Landmarks {
            line: 1,
            message: format!("expected header `{}`", LANDMARK_HEADER.join(",")),
        });
    }
    let mut out = HashMap::new();
    for row in rdr.records() {
        let row = row.map_err(|e| DegradeError::Landmarks { line: 0, message: e.to_string() })?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let mut v = [0.0f32; 6];
        for (k, slot) in v.iter_mut().enumerate() {
            *slot = row
                .get(k + 1)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| DegradeError::Landmarks {
                    line,
                    message: format!("bad `{}`", LANDMARK_HEADER[k + 1]),
                })?;
        }
        out.insert(
            row[0].to_string(),
            Landmarks {
                left_eye: Point { x: v[0], y: v[1] },
                right_eye: Point { x: v[2], y: v[3] },
                nose_tip: Point { x: v[4], y: v[5] },
            },
        );
    }
    Ok(out)
}

/// Options for degrading every original image of a manifest.
#[derive(Clone, Debug)]
pub struct CorpusJob {
    pub condition: ConditionBase,
    pub sigma: Option<f32>,
    pub side: Option<u32>,
    pub seed: u64,
    pub input_dir: PathBuf,
    pub output_dir: PathBuf,
    pub landmarks: HashMap<String, Landmarks>,
    pub sunglasses: SunglassesSpec,
}

/// Per-image sunglasses style seed: the job seed mixed with the image id.
pub fn style_seed_for(seed: u64, image_id: &str) -> u64 {
    let digest = Sha256::digest(image_id.as_bytes());
    derive_seed(seed, u64::from_le_bytes(digest[..8].try_into().unwrap()))
}

pub fn variant_id(image_id: &str, condition: ConditionBase) -> String {
    format!("{image_id}__{condition}")
}

/// Writes one PNG per original image into `output_dir` and returns the
/// input manifest extended with the new variant records.
pub fn degrade_corpus(m: &Manifest, job: &CorpusJob) -> Result<Manifest, DegradeError> {
    if job.condition == ConditionBase::Original {
        return Err(DegradeError::InvalidSpec("nothing to do for `original`".into()));
    }
    let blur = job.sigma.map(|sigma| BlurSpec { sigma });
    let lowres = job.side.map(LowResSpec::bilinear);
    std::fs::create_dir_all(&job.output_dir)?;

    let originals: Vec<&ImageRecord> = m.records().iter().filter(|r| r.is_original()).collect();
    let made = originals
        .par_iter()
        .map(|r| -> Result<ImageRecord, DegradeError> {
            let src = r
                .source_path
                .as_ref()
                .ok_or_else(|| DegradeError::NoSource(r.image_id.clone()))?;
            let landmarks = job.landmarks.get(&r.image_id).copied();
            if job.condition.has_sunglasses() && landmarks.is_none() {
                return Err(DegradeError::MissingLandmarks(Some(r.image_id.clone())));
            }
            let img = AlignedFace::load_png(job.input_dir.join(src), landmarks)?;
            let spec = SunglassesSpec {
                style_seed: style_seed_for(job.seed, &r.image_id),
                ..job.sunglasses
            };
            let out = apply_condition(&img, job.condition, blur, lowres, &spec)?;
            let id = variant_id(&r.image_id, job.condition);
            let file = format!("{id}.png");
            out.save_png(job.output_dir.join(&file))?;

            let mut params = std::collections::BTreeMap::new();
            if job.condition.has_blur() {
                params.insert("sigma".to_string(), job.sigma.unwrap_or_default() as f64);
            }
            if job.condition.has_lowres() {
                params.insert("side".to_string(), job.side.unwrap_or_default() as f64);
            }
            Ok(ImageRecord {
                image_id: id,
                condition: ConditionTag {
                    base: job.condition,
                    params,
                    variant_of: Some(r.image_id.clone()),
                },
                source_path: Some(file),
                ..(*r).clone()
            })
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut records = m.records().to_vec();
    records.extend(made);
    Ok(Manifest::new(records)?)
}
