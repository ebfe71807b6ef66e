//! Dataset directory layout:
//!
//! ```text
//! <root>/manifest.json
//! <root>/{train,val}/<index>/source.png          RGB8
//! <root>/{train,val}/<index>/target.png          RGB8
//! <root>/{train,val}/<index>/labels.png          L8, source frame
//! <root>/{train,val}/<index>/adverse_labels.png  L8, target frame, evaluation only
//! <root>/{train,val}/<index>/warp.f32            h*w*2 little-endian f32 (x, y)
//! <root>/{train,val}/<index>/conf.f32            h*w little-endian f32
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{generate_pair, PairedSample, SceneSpec};
use crate::error::{Error, Result};
use crate::geometry::WarpField;
use crate::types::Image;

const FILES: [&str; 6] = [
    "source.png",
    "target.png",
    "labels.png",
    "adverse_labels.png",
    "warp.f32",
    "conf.f32",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: usize,
    pub split: Split,
    /// Directory relative to the dataset root.
    pub dir: String,
    /// File name to hex sha256.
    pub sha256: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_fingerprint: String,
    pub spec: SceneSpec,
    pub count: usize,
    pub train_fraction: f64,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn split_len(&self, split: Split) -> usize {
        self.entries.iter().filter(|e| e.split == split).count()
    }
}

/// Number of leading indices that go to the train split.
pub fn train_count(count: usize, train_fraction: f64) -> usize {
    ((count as f64 * train_fraction).round() as usize).min(count)
}

/// Generates `count` pairs under `root` and writes `manifest.json` last.
pub fn write_dataset(
    spec: &SceneSpec,
    count: usize,
    train_fraction: f64,
    root: &Path,
    config_fingerprint: &str,
) -> Result<Manifest> {
    spec.validate()?;
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::Config(format!("train_fraction {train_fraction} outside [0, 1]")));
    }
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let n_train = train_count(count, train_fraction);
    let mut entries = Vec::with_capacity(count);
    for index in 0..count {
        let split = if index < n_train { Split::Train } else { Split::Val };
        let rel = format!("{}/{index:05}", split.dir_name());
        let dir = root.join(&rel);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let sample = generate_pair(spec, index)?;
        let mut sha256 = BTreeMap::new();
        for (name, bytes) in encode_sample(&sample, &dir)? {
            let path = dir.join(name);
            fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
            sha256.insert(name.to_string(), hex::encode(Sha256::digest(&bytes)));
        }
        entries.push(ManifestEntry {
            index,
            split,
            dir: rel,
            sha256,
        });
    }
    let manifest = Manifest {
        config_fingerprint: config_fingerprint.to_string(),
        spec: spec.clone(),
        count,
        train_fraction,
        entries,
    };
    let path = root.join("manifest.json");
    let mut json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    json.push(b'\n');
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

fn encode_sample(s: &PairedSample, dir: &Path) -> Result<Vec<(&'static str, Vec<u8>)>> {
    let png = |img: image::DynamicImage, name: &str| -> Result<Vec<u8>> {
        let mut buf = std::io::Cursor::new(Vec::new());
        img.write_to(&mut buf, image::ImageFormat::Png)
            .map_err(|source| Error::Image {
                path: dir.join(name),
                source,
            })?;
        Ok(buf.into_inner())
    };
    let warp: Vec<u8> = s.warp.coords().iter().flat_map(|v| v.to_le_bytes()).collect();
    let conf: Vec<u8> = s.confidence.iter().flat_map(|v| v.to_le_bytes()).collect();
    Ok(vec![
        ("source.png", png(rgb_image(&s.source).into(), "source.png")?),
        ("target.png", png(rgb_image(&s.target).into(), "target.png")?),
        ("labels.png", png(gray_image(&s.source_labels).into(), "labels.png")?),
        (
            "adverse_labels.png",
            png(gray_image(&s.adverse_labels_heldout).into(), "adverse_labels.png")?,
        ),
        ("warp.f32", warp),
        ("conf.f32", conf),
    ])
}

fn rgb_image(img: &Image) -> RgbImage {
    let (_, h, w) = img.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (img[[c, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

fn gray_image(labels: &Array2<u8>) -> GrayImage {
    let (h, w) = labels.dim();
    GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([labels[[y as usize, x as usize]]]))
}

/// A loaded dataset: the manifest plus every sample, split by split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub train: Vec<PairedSample>,
    pub val: Vec<PairedSample>,
}

impl Dataset {
    /// Reads the manifest and every sample, verifying checksums.
    pub fn load(root: &Path) -> Result<Self> {
        let mpath = root.join("manifest.json");
        let raw = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: Manifest = serde_json::from_slice(&raw).map_err(|e| Error::Format {
            path: mpath.clone(),
            msg: e.to_string(),
        })?;
        let (h, w) = manifest.spec.image_size;
        let (mut train, mut val) = (Vec::new(), Vec::new());
        for entry in &manifest.entries {
            let dir = root.join(&entry.dir);
            let mut blobs = BTreeMap::new();
            for name in FILES {
                let path = dir.join(name);
                let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
                let digest = hex::encode(Sha256::digest(&bytes));
                if entry.sha256.get(name) != Some(&digest) {
                    return Err(Error::Format {
                        path,
                        msg: "checksum does not match the manifest".into(),
                    });
                }
                blobs.insert(name, (path, bytes));
            }
            let sample = decode_sample(entry.index, &blobs, (h, w))?;
            match entry.split {
                Split::Train => train.push(sample),
                Split::Val => val.push(sample),
            }
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
            train,
            val,
        })
    }

    pub fn split(&self, split: Split) -> &[PairedSample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.spec.num_classes
    }
}

type Blobs<'a> = BTreeMap<&'a str, (PathBuf, Vec<u8>)>;

fn decode_sample(index: usize, blobs: &Blobs, (h, w): (usize, usize)) -> Result<PairedSample> {
    let image_of = |name: &str| -> Result<image::DynamicImage> {
        let (path, bytes) = &blobs[name];
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png).map_err(|source| {
            Error::Image {
                path: path.clone(),
                source,
            }
        })?;
        if (img.height() as usize, img.width() as usize) != (h, w) {
            return Err(Error::Format {
                path: path.clone(),
                msg: format!("expected {h}x{w}, found {}x{}", img.height(), img.width()),
            });
        }
        Ok(img)
    };
    let rgb = |name: &str| -> Result<Image> {
        let img = image_of(name)?.to_rgb8();
        Ok(Array3::from_shape_fn((3, h, w), |(c, i, j)| {
            img.get_pixel(j as u32, i as u32)[c] as f64 / 255.0
        }))
    };
    let gray = |name: &str| -> Result<Array2<u8>> {
        let img = image_of(name)?.to_luma8();
        Ok(Array2::from_shape_fn((h, w), |(i, j)| img.get_pixel(j as u32, i as u32)[0]))
    };
    let floats = |name: &str, len: usize| -> Result<Vec<f32>> {
        let (path, bytes) = &blobs[name];
        if bytes.len() != len * 4 {
            return Err(Error::Format {
                path: path.clone(),
                msg: format!("expected {} bytes, found {}", len * 4, bytes.len()),
            });
        }
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    };
    let warp = Array3::from_shape_vec((h, w, 2), floats("warp.f32", h * w * 2)?).expect("length checked");
    let confidence = Array2::from_shape_vec((h, w), floats("conf.f32", h * w)?).expect("length checked");
    Ok(PairedSample {
        index,
        source: rgb("source.png")?,
        target: rgb("target.png")?,
        source_labels: gray("labels.png")?,
        warp: WarpField::new(warp)?,
        confidence,
        adverse_labels_heldout: gray("adverse_labels.png")?,
    })
}
