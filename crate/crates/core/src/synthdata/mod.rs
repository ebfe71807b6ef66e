//! Deterministic paired-domain scenes.
//!
//! A static scene (sky band, ground band, structures) is rendered on a canvas
//! larger than the view. The clear source view and the adverse target view
//! crop that canvas at offsets that differ by a small integer shift, mobile
//! objects are pasted at independently displaced positions in each view, and
//! the target is corrupted afterwards so geometry and labels stay exact.

mod store;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{apply_warp, WarpField};
use crate::types::Image;

pub use store::{write_dataset, Dataset, Manifest, ManifestEntry, Split};

/// Confidence assigned to pixels whose content moved between the views.
pub const MOVED_CONFIDENCE: f32 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    Darken,
    FogBlend,
    Noise,
    Desaturate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Corruption {
    pub kind: CorruptionKind,
    pub strength: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    /// `(h, w)` of both views.
    pub image_size: (usize, usize),
    pub num_classes: usize,
    pub mobile_class_ids: Vec<u8>,
    pub corruption: Corruption,
    pub max_shift_px: usize,
    pub mobile_object_count: usize,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            image_size: (96, 96),
            num_classes: 6,
            mobile_class_ids: vec![4, 5],
            corruption: Corruption {
                kind: CorruptionKind::FogBlend,
                strength: 0.6,
            },
            max_shift_px: 4,
            mobile_object_count: 2,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        if h < 8 || w < 8 {
            return Err(Error::Config(format!("image size {h}x{w} is too small")));
        }
        if !(0.0..=1.0).contains(&self.corruption.strength) {
            return Err(Error::Config(format!(
                "corruption strength {} outside [0, 1]",
                self.corruption.strength
            )));
        }
        if 4 * self.max_shift_px >= h.min(w) {
            return Err(Error::Config(format!(
                "max_shift_px {} must stay below a quarter of the image side",
                self.max_shift_px
            )));
        }
        if self.num_classes > 64 {
            return Err(Error::Config("at most 64 classes are supported".into()));
        }
        if let Some(&c) = self.mobile_class_ids.iter().find(|&&c| c as usize >= self.num_classes) {
            return Err(Error::Config(format!("mobile class {c} exceeds num_classes")));
        }
        if self.static_classes().len() < 2 {
            return Err(Error::Config("need at least two static classes".into()));
        }
        if self.mobile_object_count > 0 && self.mobile_class_ids.is_empty() {
            return Err(Error::Config("mobile objects requested without mobile classes".into()));
        }
        Ok(())
    }

    /// Static classes in id order: the first is the sky band, the second the
    /// ground band, the rest are structures.
    pub fn static_classes(&self) -> Vec<u8> {
        (0..self.num_classes as u8)
            .filter(|c| !self.mobile_class_ids.contains(c))
            .collect()
    }
}

/// One clear/adverse pair with everything needed to align and supervise it.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub index: usize,
    pub source: Image,
    pub target: Image,
    pub source_labels: Array2<u8>,
    /// Warp aligning the target into the source frame.
    pub warp: WarpField,
    /// Alignment confidence in the source frame.
    pub confidence: Array2<f32>,
    /// Target-frame labels; evaluation only.
    pub adverse_labels_heldout: Array2<u8>,
}

impl PairedSample {
    /// Target warped into the source frame, with its valid mask.
    pub fn aligned_target(&self) -> Result<(Image, Array2<bool>)> {
        apply_warp(&self.target, &self.warp)
    }

    pub fn confidence_f64(&self) -> Array2<f64> {
        self.confidence.mapv(f64::from)
    }
}

#[derive(Debug, Clone, Copy)]
struct MobileObject {
    class: u8,
    id: u16,
    top: i64,
    left: i64,
    height: i64,
    width: i64,
    dy: i64,
    dx: i64,
    color: [f64; 3],
}

/// Deterministic function of `(spec.seed, index)`.
pub fn generate_pair(spec: &SceneSpec, index: usize) -> Result<PairedSample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let (h, w) = spec.image_size;
    let margin = spec.max_shift_px as i64;
    let (ch, cw) = (h + 2 * spec.max_shift_px, w + 2 * spec.max_shift_px);

    let canvas_labels = layout_static(spec, &mut rng, (ch, cw));
    let tint = class_tints(spec.num_classes, &mut rng);
    let texture_seed: u64 = rng.gen();

    let shift = if margin > 0 {
        (rng.gen_range(-margin..=margin), rng.gen_range(-margin..=margin))
    } else {
        (0, 0)
    };
    let objects = place_mobile(spec, &mut rng, (h as i64, w as i64), margin);

    let render = |oy: i64, ox: i64, displaced: bool| {
        let mut labels = Array2::zeros((h, w));
        let mut ids = Array2::<u16>::zeros((h, w));
        let mut img = Array3::zeros((3, h, w));
        for i in 0..h {
            for j in 0..w {
                let (ci, cj) = ((i as i64 + oy) as usize, (j as i64 + ox) as usize);
                let class = canvas_labels[[ci, cj]];
                labels[[i, j]] = class;
                let rgb = static_color(class, ci, cj, ch, tint[class as usize], texture_seed);
                for c in 0..3 {
                    img[[c, i, j]] = rgb[c];
                }
            }
        }
        for obj in &objects {
            let (dy, dx) = if displaced { (obj.dy, obj.dx) } else { (0, 0) };
            // objects live in canvas coordinates
            let top = obj.top + margin + dy - oy;
            let left = obj.left + margin + dx - ox;
            for i in top.max(0)..(top + obj.height).min(h as i64) {
                for j in left.max(0)..(left + obj.width).min(w as i64) {
                    let (li, lj) = (i - top, j - left);
                    labels[[i as usize, j as usize]] = obj.class;
                    ids[[i as usize, j as usize]] = obj.id;
                    let rgb = mobile_color(obj, li, lj);
                    for c in 0..3 {
                        img[[c, i as usize, j as usize]] = rgb[c];
                    }
                }
            }
        }
        (labels, ids, img)
    };

    let (source_labels, source_ids, source) = render(margin, margin, false);
    let (target_labels, target_ids, target_clear) = render(margin + shift.0, margin + shift.1, true);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9e37_79b9_7f4a_7c15);
    noise_rng.set_stream(index as u64);
    let target = quantize(&corrupt(&target_clear, spec.corruption, &mut noise_rng));
    let source = quantize(&source);

    // source pixel (i, j) shows the same static point as target (i - dy, j - dx)
    let warp = WarpField::from_shift(h, w, -shift.0, -shift.1);
    let valid = warp.valid_mask();
    let mut confidence = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            if !valid[[i, j]] {
                continue;
            }
            let ti = (i as i64 - shift.0) as usize;
            let tj = (j as i64 - shift.1) as usize;
            let (a, b) = (source_ids[[i, j]], target_ids[[ti, tj]]);
            let still = a == b
                && (a == 0
                    || objects
                        .iter()
                        .any(|o| o.id == a && o.dy == 0 && o.dx == 0));
            confidence[[i, j]] = if still { 1.0 } else { MOVED_CONFIDENCE };
        }
    }

    Ok(PairedSample {
        index,
        source,
        target,
        source_labels,
        warp,
        confidence,
        adverse_labels_heldout: target_labels,
    })
}

fn layout_static(spec: &SceneSpec, rng: &mut ChaCha8Rng, (ch, cw): (usize, usize)) -> Array2<u8> {
    let classes = spec.static_classes();
    let (sky, ground) = (classes[0], classes[1]);
    let horizon = (ch as f64 * rng.gen_range(0.35..0.5)) as usize;
    let mut labels = Array2::from_shape_fn((ch, cw), |(i, _)| if i < horizon { sky } else { ground });
    for (k, &class) in classes[2..].iter().enumerate() {
        let count = rng.gen_range(1..=3);
        for _ in 0..count {
            if k % 2 == 0 {
                // block standing on the horizon
                let width = rng.gen_range(cw / 8..cw / 3);
                let left = rng.gen_range(0..cw - width);
                let top = rng.gen_range(horizon / 5..horizon * 4 / 5);
                let bottom = (horizon + rng.gen_range(2..ch / 8)).min(ch);
                labels.slice_mut(ndarray::s![top..bottom, left..left + width]).fill(class);
            } else {
                // blob around the horizon
                let cy = rng.gen_range(horizon as f64 * 0.6..horizon as f64 * 1.1);
                let cx = rng.gen_range(0.0..cw as f64);
                let ry = rng.gen_range(ch as f64 / 14.0..ch as f64 / 6.0);
                let rx = rng.gen_range(cw as f64 / 12.0..cw as f64 / 5.0);
                for i in 0..ch {
                    for j in 0..cw {
                        let d = ((i as f64 - cy) / ry).powi(2) + ((j as f64 - cx) / rx).powi(2);
                        if d <= 1.0 {
                            labels[[i, j]] = class;
                        }
                    }
                }
            }
        }
    }
    labels
}

fn place_mobile(spec: &SceneSpec, rng: &mut ChaCha8Rng, (h, w): (i64, i64), margin: i64) -> Vec<MobileObject> {
    let reach = 2 * margin;
    (0..spec.mobile_object_count)
        .map(|n| {
            let class = spec.mobile_class_ids[rng.gen_range(0..spec.mobile_class_ids.len())];
            let wide = class % 2 == 0;
            let (height, width) = if wide {
                (rng.gen_range(h / 12..=h / 8), rng.gen_range(w / 7..=w / 4))
            } else {
                (rng.gen_range(h / 8..=h / 5), rng.gen_range(w / 24..=w / 14).max(2))
            };
            let top = rng.gen_range(h / 2..h - height);
            let left = rng.gen_range(0..w - width);
            let (mut dy, mut dx) = (0, 0);
            if reach > 0 {
                while dy == 0 && dx == 0 {
                    dy = rng.gen_range(-reach..=reach) / 2;
                    dx = rng.gen_range(-reach..=reach);
                }
            }
            let color = [rng.gen_range(0.1..0.95), rng.gen_range(0.1..0.95), rng.gen_range(0.1..0.95)];
            MobileObject {
                class,
                id: n as u16 + 1,
                top,
                left,
                height,
                width,
                dy,
                dx,
                color,
            }
        })
        .collect()
}

fn class_tints(num_classes: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..num_classes).map(|_| rng.gen_range(0.85..1.15)).collect()
}

fn base_color(class: u8) -> [f64; 3] {
    match class {
        0 => [0.55, 0.72, 0.95],
        1 => [0.33, 0.33, 0.36],
        2 => [0.62, 0.45, 0.35],
        3 => [0.22, 0.55, 0.22],
        c => {
            let h = hash3(c as u64, 17, 29);
            [
                0.2 + 0.6 * (h & 0xff) as f64 / 255.0,
                0.2 + 0.6 * ((h >> 8) & 0xff) as f64 / 255.0,
                0.2 + 0.6 * ((h >> 16) & 0xff) as f64 / 255.0,
            ]
        }
    }
}

fn static_color(class: u8, i: usize, j: usize, canvas_h: usize, tint: f64, seed: u64) -> [f64; 3] {
    let base = base_color(class);
    let noise = (hash3(seed, i as u64, j as u64) & 0xffff) as f64 / 65535.0 - 0.5;
    let scale = match class {
        // sky brightens toward the horizon
        0 => tint * (0.9 + 0.2 * i as f64 / canvas_h as f64),
        // window grid
        2 if i % 6 < 3 && j % 6 < 3 => 0.45 * tint,
        3 => tint * (1.0 + 0.25 * ((i as f64 * 0.7).sin() * (j as f64 * 0.9).cos())),
        _ => tint * (1.0 + 0.15 * noise),
    };
    base.map(|v| (v * scale).clamp(0.0, 1.0))
}

fn mobile_color(obj: &MobileObject, li: i64, lj: i64) -> [f64; 3] {
    let window = obj.class % 2 == 0 && li < obj.height / 3 && lj > obj.width / 5 && lj < obj.width * 4 / 5;
    if window {
        [0.15, 0.18, 0.22]
    } else {
        obj.color
    }
}

fn hash3(a: u64, b: u64, c: u64) -> u64 {
    let mut x = a
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(b.wrapping_mul(0xc2b2_ae3d_27d4_eb4f))
        .wrapping_add(c.wrapping_mul(0x1656_67b1_9e37_79f9));
    x ^= x >> 33;
    x = x.wrapping_mul(0xff51_afd7_ed55_8ccd);
    x ^= x >> 33;
    x
}

/// Appearance-only degradation of a rendered view.
fn corrupt(img: &Image, corruption: Corruption, rng: &mut ChaCha8Rng) -> Image {
    let s = corruption.strength;
    let (_, h, _) = img.dim();
    let mut out = img.clone();
    match corruption.kind {
        CorruptionKind::Darken => {
            out.mapv_inplace(|v| v.powf(1.0 + 2.0 * s) * (1.0 - 0.6 * s));
        }
        CorruptionKind::FogBlend => {
            const VEIL: f64 = 0.85;
            for ((_, i, _), v) in out.indexed_iter_mut() {
                // farther (higher up) is foggier
                let depth = 1.0 - i as f64 / (h - 1) as f64;
                let a = (s * (0.5 + 0.5 * depth)).min(1.0);
                *v = (1.0 - a) * *v + a * VEIL;
            }
        }
        CorruptionKind::Noise => {
            if s > 0.0 {
                let normal = Normal::new(0.0, 0.25 * s).expect("finite std");
                out.mapv_inplace(|v| (v + normal.sample(rng)).clamp(0.0, 1.0));
            }
        }
        CorruptionKind::Desaturate => {
            let (_, h, w) = out.dim();
            for i in 0..h {
                for j in 0..w {
                    let gray = (img[[0, i, j]] + img[[1, i, j]] + img[[2, i, j]]) / 3.0;
                    for c in 0..3 {
                        out[[c, i, j]] = (1.0 - s) * img[[c, i, j]] + s * gray;
                    }
                }
            }
        }
    }
    out
}

/// Rounds to 8-bit levels so the on-disk PNG holds exactly these values.
fn quantize(img: &Image) -> Image {
    img.mapv(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}
