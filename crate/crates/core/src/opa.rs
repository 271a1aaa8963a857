//! Object-perceptual views of a training image.
//!
//! From one detector box per image this module derives the discriminative
//! view (the box cropped and padded to a square) and, when the object is
//! small enough, a background view in which the box region is blurred away.
//! Background views all share one extra class whose id equals the number of
//! original classes.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::manifest::{Manifest, ManifestRow, Role, Split};

/// Pixel box, inclusive-exclusive: columns `x0..x1`, rows `y0..y1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        BBox { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> usize {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> usize {
        self.y1.saturating_sub(self.y0)
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    /// Checks the box against image dimensions.
    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        if self.area() == 0 {
            return Err(Error::Degenerate(format!("empty box {self:?}")));
        }
        if self.x1 > width || self.y1 > height {
            return Err(Error::Contract(format!(
                "box {self:?} exceeds image {width}x{height}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub image_id: String,
    pub bbox: BBox,
    pub confidence: f64,
    pub superclass: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectionRecord {
    image_id: String,
    bbox: [f64; 4],
    confidence: f64,
    superclass: String,
}

impl DetectionRecord {
    fn into_detection(self) -> std::result::Result<Detection, String> {
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(format!("confidence {} outside [0, 1]", self.confidence));
        }
        let [x0, y0, x1, y1] = self.bbox;
        if [x0, y0, x1, y1].iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(format!(
                "bbox {:?} must be finite and non-negative",
                self.bbox
            ));
        }
        // fractional detector boxes are widened to whole pixels
        let bbox = BBox::new(
            x0.floor() as usize,
            y0.floor() as usize,
            x1.ceil() as usize,
            y1.ceil() as usize,
        );
        if bbox.area() == 0 {
            return Err(format!("bbox {:?} is empty", self.bbox));
        }
        Ok(Detection {
            image_id: self.image_id,
            bbox,
            confidence: self.confidence,
            superclass: self.superclass,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OpaConfig {
    /// Background views are made only for boxes covering less than this
    /// percentage of the image.
    pub alpha_pct: f64,
    pub conf_threshold: f64,
    /// Side of the square mean filter (odd).
    pub blur_kernel: usize,
    pub pad_value: f32,
    /// Side of the square discriminative view after resizing.
    pub output_size: usize,
}

impl Default for OpaConfig {
    fn default() -> Self {
        OpaConfig {
            alpha_pct: 50.0,
            conf_threshold: 0.35,
            blur_kernel: 31,
            pad_value: 0.0,
            output_size: 256,
        }
    }
}

impl OpaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_pct > 0.0 && self.alpha_pct <= 100.0) {
            return Err(Error::Config(format!(
                "alpha_pct {} outside (0, 100]",
                self.alpha_pct
            )));
        }
        if self.blur_kernel < 3 || self.blur_kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "blur_kernel {} must be odd and at least 3",
                self.blur_kernel
            )));
        }
        if !(0.0..=1.0).contains(&self.conf_threshold) {
            return Err(Error::Config(format!(
                "conf_threshold {} outside [0, 1]",
                self.conf_threshold
            )));
        }
        if self.output_size == 0 {
            return Err(Error::Config("output_size must be positive".into()));
        }
        Ok(())
    }
}

/// Reads a JSON-lines detection file. Records below the confidence
/// threshold are dropped; among duplicates of one image id the most
/// confident record wins (the earlier one on ties).
pub fn load_detections(path: &Path, cfg: &OpaConfig) -> Result<BTreeMap<String, Detection>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out: BTreeMap<String, Detection> = BTreeMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let rec: DetectionRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let det = rec.into_detection().map_err(parse_err)?;
        if det.confidence < cfg.conf_threshold {
            continue;
        }
        match out.get(&det.image_id) {
            Some(prev) if prev.confidence >= det.confidence => {}
            _ => {
                out.insert(det.image_id.clone(), det);
            }
        }
    }
    Ok(out)
}

pub fn write_detections(path: &Path, dets: &[Detection]) -> Result<()> {
    let mut buf = Vec::new();
    for d in dets {
        let rec = DetectionRecord {
            image_id: d.image_id.clone(),
            bbox: [
                d.bbox.x0 as f64,
                d.bbox.y0 as f64,
                d.bbox.x1 as f64,
                d.bbox.y1 as f64,
            ],
            confidence: d.confidence,
            superclass: d.superclass.clone(),
        };
        serde_json::to_writer(&mut buf, &rec).map_err(|e| Error::Format(e.to_string()))?;
        buf.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Pads the short side symmetrically with `pad` until the image is square.
/// An odd difference puts the extra row (column) at the bottom (right).
pub fn pad_to_square(image: &Image, pad: f32) -> Image {
    let (w, h) = (image.width(), image.height());
    let side = w.max(h);
    if w == h {
        return image.clone();
    }
    let (ox, oy) = ((side - w) / 2, (side - h) / 2);
    let mut out = Image::filled(side, side, [pad; 3]);
    for y in 0..h {
        for x in 0..w {
            out.set(x + ox, y + oy, image.get(x, y));
        }
    }
    out
}

/// Discriminative view: box crop, square padding, resize to `output_size`.
pub fn crop_discriminative(image: &Image, det: &Detection, cfg: &OpaConfig) -> Result<Image> {
    let b = det.bbox;
    b.validate(image.width(), image.height())?;
    let crop = image.crop(b.x0, b.y0, b.width(), b.height())?;
    pad_to_square(&crop, cfg.pad_value).resize(cfg.output_size, cfg.output_size)
}

/// Fallback discriminative view when no detection survives: the whole
/// image, padded and resized the same way.
pub fn full_image_view(image: &Image, cfg: &OpaConfig) -> Result<Image> {
    pad_to_square(image, cfg.pad_value).resize(cfg.output_size, cfg.output_size)
}

/// Half-sample symmetric reflection of `p` into `0..n`.
#[inline]
fn reflect(p: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = p.rem_euclid(period) as usize;
    if m < n {
        m
    } else {
        2 * n - 1 - m
    }
}

/// One separable box-filter pass along a line of `n` samples with `stride`.
fn box_pass(buf: &mut [f64], n: usize, count: usize, step: usize, stride: usize, k: usize) {
    let r = (k / 2) as isize;
    let inv = 1.0 / k as f64;
    let mut line = vec![0.0; n];
    for c in 0..count {
        let base = c * step;
        for (i, v) in line.iter_mut().enumerate() {
            *v = buf[base + i * stride];
        }
        for i in 0..n {
            let mut s = 0.0;
            for t in -r..=r {
                s += line[reflect(i as isize + t, n)];
            }
            buf[base + i * stride] = s * inv;
        }
    }
}

/// Background view: the box region is replaced by its `blur_kernel` mean
/// filter. The filter only reads pixels inside the box and reflects at the
/// box edges, so the region mean is preserved. Pixels outside the box are
/// copied untouched.
pub fn blur_background(image: &Image, det: &Detection, cfg: &OpaConfig) -> Result<Image> {
    let b = det.bbox;
    b.validate(image.width(), image.height())?;
    let (w, h) = (b.width(), b.height());
    let mut out = image.clone();
    for ch in 0..3 {
        let mut buf: Vec<f64> = Vec::with_capacity(w * h);
        for y in b.y0..b.y1 {
            for x in b.x0..b.x1 {
                buf.push(image.get(x, y)[ch] as f64);
            }
        }
        // rows: w samples each, h lines; then columns: h samples, w lines
        box_pass(&mut buf, w, h, w, 1, cfg.blur_kernel);
        box_pass(&mut buf, h, w, 1, w, cfg.blur_kernel);
        for (j, y) in (b.y0..b.y1).enumerate() {
            for (i, x) in (b.x0..b.x1).enumerate() {
                let mut px = out.get(x, y);
                px[ch] = buf[j * w + i] as f32;
                out.set(x, y, px);
            }
        }
    }
    Ok(out)
}

/// True iff the box covers strictly less than `alpha_pct` percent of the image.
pub fn background_eligible(width: usize, height: usize, det: &Detection, cfg: &OpaConfig) -> bool {
    let area = det.bbox.area() as f64;
    let total = (width * height) as f64;
    area * 100.0 < cfg.alpha_pct * total
}

/// The views derived from one original image.
#[derive(Clone, Debug)]
pub struct OpaViews {
    pub disc: Image,
    pub bg: Option<Image>,
    /// No detection was available; `disc` is the whole image.
    pub fallback: bool,
}

pub fn opa_views(image: &Image, det: Option<&Detection>, cfg: &OpaConfig) -> Result<OpaViews> {
    match det {
        None => Ok(OpaViews {
            disc: full_image_view(image, cfg)?,
            bg: None,
            fallback: true,
        }),
        Some(d) => {
            let disc = crop_discriminative(image, d, cfg)?;
            let bg = if background_eligible(image.width(), image.height(), d, cfg) {
                Some(blur_background(image, d, cfg)?)
            } else {
                None
            };
            Ok(OpaViews {
                disc,
                bg,
                fallback: false,
            })
        }
    }
}

#[derive(Clone, Debug)]
pub struct OpaDataset {
    pub manifest: Manifest,
    /// Ids of images that had no usable detection.
    pub fallbacks: Vec<String>,
    /// Class id shared by every background view.
    pub background_id: usize,
}

/// Writes discriminative and background views of every `orig` row of
/// `train` into `out_dir/images` and returns the manifest of derived views.
///
/// `num_classes` is the number of original categories; background views are
/// labeled `num_classes`.
pub fn build_opa_dataset(
    train: &Manifest,
    detections: &BTreeMap<String, Detection>,
    num_classes: usize,
    cfg: &OpaConfig,
    out_dir: &Path,
) -> Result<OpaDataset> {
    cfg.validate()?;
    let img_dir = out_dir.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut rows = Vec::new();
    let mut fallbacks = Vec::new();
    for row in train.rows.iter().filter(|r| r.role == Role::Orig) {
        if row.label_id >= num_classes {
            return Err(Error::Contract(format!(
                "label {} of {} outside the {num_classes} training classes",
                row.label_id, row.image_path
            )));
        }
        let id = row.id();
        let image = Image::read_ppm(&train.resolve(row))?;
        let views = opa_views(&image, detections.get(&id), cfg)?;
        if views.fallback {
            fallbacks.push(id.clone());
        }
        let mut emit = |img: &Image, role: Role, label: usize| -> Result<()> {
            let rel = PathBuf::from("images").join(format!("{id}.{role}.ppm"));
            img.write_ppm(&out_dir.join(&rel))?;
            rows.push(ManifestRow {
                image_path: rel.to_string_lossy().into_owned(),
                label_id: label,
                split: Split::Train,
                role,
            });
            Ok(())
        };
        emit(&views.disc, Role::Disc, row.label_id)?;
        if let Some(bg) = &views.bg {
            emit(bg, Role::Bg, num_classes)?;
        }
    }
    let manifest = Manifest::new(out_dir, rows);
    manifest.write(&out_dir.join("manifest.csv"))?;
    let fb_path = out_dir.join("fallbacks.txt");
    let mut text = fallbacks.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    std::fs::write(&fb_path, text).map_err(|e| Error::io(&fb_path, e))?;
    Ok(OpaDataset {
        manifest,
        fallbacks,
        background_id: num_classes,
    })
}
