//! Procedural fine-grained dataset with exact object boxes.
//!
//! Every class shares one object template: an elliptical body, a head disc
//! at one end and a pale stripe across the body. Classes differ only in the
//! head hue and the stripe width, both scaled by `subtlety`. The object is
//! drawn at a random pose and scale over one of four background textures.
//! Class `c` belongs to group `c % 4`, and with probability 0.7 it gets
//! the texture family of its group, so context is informative but never
//! decisive.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::manifest::{Manifest, ManifestRow, Role, Split};
use crate::opa::{write_detections, BBox, Detection};
use crate::rng::{self, stream, SeededRng};

pub const NUM_FAMILIES: usize = 4;
pub const FAMILY_MATCH_PROB: f64 = 0.7;
pub const SUPERCLASS: &str = "bird";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    /// Filled from the run seed; not part of the config file.
    #[serde(skip)]
    pub seed: u64,
    pub n_classes: usize,
    pub n_per_class: usize,
    pub image_size: usize,
    /// Allowed box area as a fraction of the image area.
    pub fg_area_range: [f64; 2],
    /// Scale of the per-class feature deltas, in `(0, 1]`.
    pub subtlety: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seed: 0,
            n_classes: 20,
            n_per_class: 40,
            image_size: 256,
            fg_area_range: [0.2, 0.45],
            subtlety: 1.0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.fg_area_range;
        if !(lo > 0.0 && lo < hi && hi < 1.0) {
            return Err(Error::Config(format!(
                "fg_area_range {:?} must satisfy 0 < lo < hi < 1",
                self.fg_area_range
            )));
        }
        if self.n_classes < 2 {
            return Err(Error::Config("n_classes must be at least 2".into()));
        }
        if self.n_per_class == 0 {
            return Err(Error::Config("n_per_class must be positive".into()));
        }
        if self.image_size < 16 {
            return Err(Error::Config("image_size must be at least 16".into()));
        }
        if !(self.subtlety > 0.0 && self.subtlety <= 1.0) {
            return Err(Error::Config(format!(
                "subtlety {} outside (0, 1]",
                self.subtlety
            )));
        }
        Ok(())
    }
}

/// One rendered image with its object mask.
#[derive(Clone, Debug)]
pub struct Rendered {
    pub image: Image,
    pub bbox: BBox,
    /// Row-major object mask.
    pub mask: Vec<bool>,
    pub family: usize,
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Head hue of class `c`: evenly spaced over 80% of the hue circle.
pub fn class_head_hue(c: usize, cfg: &GenConfig) -> f64 {
    0.02 + cfg.subtlety * 0.8 * c as f64 / cfg.n_classes as f64
}

/// Stripe half-width of class `c` as a fraction of the body semi-axis.
/// The order is permuted so hue and width are not ranked alike.
pub fn class_stripe_width(c: usize, cfg: &GenConfig) -> f64 {
    let n = cfg.n_classes;
    let mut step = 7 % n;
    while gcd(step.max(1), n) != 1 {
        step += 1;
    }
    let rank = (c * step.max(1)) % n;
    0.06 + cfg.subtlety * 0.3 * rank as f64 / (n - 1) as f64
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn jitter(rng: &mut SeededRng, c: [f64; 3], amount: f64) -> [f64; 3] {
    c.map(|v| (v + rng.random_range(-amount..=amount)).clamp(0.0, 1.0))
}

/// Fills `buf` (f64 RGB) with a texture of family `fam`.
fn paint_background(buf: &mut [[f64; 3]], s: usize, fam: usize, rng: &mut SeededRng) {
    let sf = s as f64;
    match fam {
        0 => {
            // slanted stripes in greens
            let a = jitter(rng, [0.25, 0.55, 0.25], 0.08);
            let b = jitter(rng, [0.45, 0.7, 0.35], 0.08);
            let period = rng.random_range(sf / 16.0..sf / 6.0);
            let slant = rng.random_range(-0.3..0.3);
            for y in 0..s {
                for x in 0..s {
                    let t = (y as f64 + slant * x as f64) / period;
                    buf[y * s + x] = if t.rem_euclid(1.0) < 0.5 { a } else { b };
                }
            }
        }
        1 => {
            // checkerboard in blues
            let a = jitter(rng, [0.2, 0.3, 0.6], 0.08);
            let b = jitter(rng, [0.5, 0.6, 0.85], 0.08);
            let cell = rng.random_range(sf / 12.0..sf / 5.0);
            let (ox, oy) = (rng.random_range(0.0..cell), rng.random_range(0.0..cell));
            for y in 0..s {
                for x in 0..s {
                    let i = ((x as f64 + ox) / cell).floor() as i64
                        + ((y as f64 + oy) / cell).floor() as i64;
                    buf[y * s + x] = if i.rem_euclid(2) == 0 { a } else { b };
                }
            }
        }
        2 => {
            // warm gradient with ripples
            let a = jitter(rng, [0.75, 0.55, 0.3], 0.08);
            let b = jitter(rng, [0.45, 0.3, 0.15], 0.08);
            let ang = rng.random_range(0.0..2.0 * PI);
            let (dx, dy) = (ang.cos(), ang.sin());
            let freq = rng.random_range(2.0..5.0);
            for y in 0..s {
                for x in 0..s {
                    let u = ((x as f64 / sf - 0.5) * dx + (y as f64 / sf - 0.5) * dy + 0.71) / 1.42;
                    let t = (u + 0.08 * (2.0 * PI * freq * u).sin()).clamp(0.0, 1.0);
                    buf[y * s + x] = [0, 1, 2].map(|c| a[c] * (1.0 - t) + b[c] * t);
                }
            }
        }
        _ => {
            // grey speckle
            let base = jitter(rng, [0.55, 0.55, 0.55], 0.1);
            for px in buf.iter_mut() {
                let n = rng.random_range(-0.18..0.18);
                *px = base.map(|v| (v + n).clamp(0.0, 1.0));
            }
        }
    }
}

struct Pose {
    cx: f64,
    cy: f64,
    cos: f64,
    sin: f64,
    a: f64,
    b: f64,
    head_r: f64,
    head_u: f64,
}

impl Pose {
    /// Local coordinates `(u, v)` of a pixel center, `u` along the body axis.
    fn local(&self, x: usize, y: usize) -> (f64, f64) {
        let (px, py) = (x as f64 + 0.5 - self.cx, y as f64 + 0.5 - self.cy);
        (
            px * self.cos + py * self.sin,
            -px * self.sin + py * self.cos,
        )
    }

    fn in_body(&self, u: f64, v: f64) -> bool {
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }

    fn in_head(&self, u: f64, v: f64) -> bool {
        (u - self.head_u).powi(2) + v * v <= self.head_r * self.head_r
    }

    /// Continuous half-extents of the object around the body center plus
    /// the offset of the head.
    fn extent(&self) -> (f64, f64, f64, f64) {
        let hx =
            (self.a * self.a * self.cos * self.cos + self.b * self.b * self.sin * self.sin).sqrt();
        let hy =
            (self.a * self.a * self.sin * self.sin + self.b * self.b * self.cos * self.cos).sqrt();
        let (hcx, hcy) = (self.head_u * self.cos, self.head_u * self.sin);
        let x0 = (-hx).min(hcx - self.head_r);
        let x1 = hx.max(hcx + self.head_r);
        let y0 = (-hy).min(hcy - self.head_r);
        let y1 = hy.max(hcy + self.head_r);
        (x0, x1, y0, y1)
    }
}

fn tight_bbox(mask: &[bool], s: usize) -> Option<BBox> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..s {
        for x in 0..s {
            if mask[y * s + x] {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    (x0 != usize::MAX).then(|| BBox::new(x0, y0, x1, y1))
}

/// Renders one sample of class `class`.
pub fn render(cfg: &GenConfig, class: usize, rng: &mut SeededRng) -> Result<Rendered> {
    let s = cfg.image_size;
    let sf = s as f64;
    let [lo, hi] = cfg.fg_area_range;
    let group = class % NUM_FAMILIES;
    let family = if rng.random_bool(FAMILY_MATCH_PROB) {
        group
    } else {
        (group + rng.random_range(1..NUM_FAMILIES)) % NUM_FAMILIES
    };

    for _attempt in 0..200 {
        let margin = (hi - lo) * 0.05;
        let target = rng.random_range(lo + margin..hi - margin);
        let theta = rng.random_range(0.0..2.0 * PI);
        let ratio = rng.random_range(0.5..0.65);
        let mut pose = Pose {
            cx: 0.0,
            cy: 0.0,
            cos: theta.cos(),
            sin: theta.sin(),
            a: 1.0,
            b: ratio,
            head_r: 0.55 * ratio,
            head_u: 0.95,
        };
        let (x0, x1, y0, y1) = pose.extent();
        let unit_area = (x1 - x0) * (y1 - y0);
        let k = (target * sf * sf / unit_area).sqrt();
        pose.a *= k;
        pose.b *= k;
        pose.head_r *= k;
        pose.head_u *= k;
        let (x0, x1, y0, y1) = (x0 * k, x1 * k, y0 * k, y1 * k);
        let (bw, bh) = (x1 - x0, y1 - y0);
        if bw > sf - 2.0 || bh > sf - 2.0 {
            continue;
        }
        pose.cx = rng.random_range(1.0 - x0..sf - 1.0 - x1);
        pose.cy = rng.random_range(1.0 - y0..sf - 1.0 - y1);

        let mut mask = vec![false; s * s];
        for y in 0..s {
            for x in 0..s {
                let (u, v) = pose.local(x, y);
                mask[y * s + x] = pose.in_body(u, v) || pose.in_head(u, v);
            }
        }
        let Some(bbox) = tight_bbox(&mask, s) else {
            continue;
        };
        let frac = bbox.area() as f64 / (sf * sf);
        if frac < lo || frac > hi {
            continue;
        }

        let mut buf = vec![[0.0f64; 3]; s * s];
        paint_background(&mut buf, s, family, rng);
        let body = jitter(rng, [0.55, 0.45, 0.35], 0.05);
        let stripe = jitter(rng, [0.92, 0.9, 0.82], 0.03);
        let head = hsv(
            class_head_hue(class, cfg) + rng.random_range(-0.01..0.01),
            0.85,
            0.9,
        );
        let half_w = class_stripe_width(class, cfg) * pose.a;
        let stripe_u = -0.25 * pose.a;
        for y in 0..s {
            for x in 0..s {
                let (u, v) = pose.local(x, y);
                let px = &mut buf[y * s + x];
                if pose.in_head(u, v) {
                    *px = head;
                } else if pose.in_body(u, v) {
                    *px = if (u - stripe_u).abs() <= half_w {
                        stripe
                    } else {
                        body
                    };
                }
            }
        }
        let data = buf
            .iter()
            .flat_map(|p| p.map(|v| v.clamp(0.0, 1.0) as f32))
            .collect();
        return Ok(Rendered {
            image: Image::new(s, s, data)?,
            bbox,
            mask,
            family,
        });
    }
    Err(Error::Degenerate(format!(
        "could not place an object with area in {:?} on a {s}px canvas",
        cfg.fg_area_range
    )))
}

/// Id of the `i`-th sample of class `c`.
pub fn sample_id(c: usize, i: usize) -> String {
    format!("c{c:03}_{i:04}")
}

#[derive(Clone, Debug)]
pub struct GenOutput {
    pub manifest: Manifest,
    pub detections: Vec<Detection>,
}

/// Writes `images/*.ppm`, `manifest.csv` and `detections.jsonl` into
/// `out_dir`. The first half of each class is `train`, the rest `test`.
pub fn gen_dataset(cfg: &GenConfig, out_dir: &Path) -> Result<GenOutput> {
    cfg.validate()?;
    let img_dir = out_dir.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut r = rng::seeded(rng::derive_seed(cfg.seed, &[stream::DATASET]));
    let mut rows = Vec::with_capacity(cfg.n_classes * cfg.n_per_class);
    let mut dets = Vec::with_capacity(rows.capacity());
    let n_train = cfg.n_per_class.div_ceil(2);
    for c in 0..cfg.n_classes {
        for i in 0..cfg.n_per_class {
            let id = sample_id(c, i);
            let s = render(cfg, c, &mut r)?;
            let rel = PathBuf::from("images").join(format!("{id}.ppm"));
            s.image.write_ppm(&out_dir.join(&rel))?;
            rows.push(ManifestRow {
                image_path: rel.to_string_lossy().into_owned(),
                label_id: c,
                split: if i < n_train {
                    Split::Train
                } else {
                    Split::Test
                },
                role: Role::Orig,
            });
            dets.push(Detection {
                image_id: id,
                bbox: s.bbox,
                confidence: 1.0,
                superclass: SUPERCLASS.into(),
            });
        }
    }
    let manifest = Manifest::new(out_dir, rows);
    manifest.write(&out_dir.join("manifest.csv"))?;
    write_detections(&out_dir.join("detections.jsonl"), &dets)?;
    Ok(GenOutput {
        manifest,
        detections: dets,
    })
}
