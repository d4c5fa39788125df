//! On-disk dataset format:
//! `root/{train,query,gallery}/PID_CAMID_SEQ.png` plus `manifest.jsonl`,
//! `captions.jsonl`, `vocab.txt`, and `meta.json` with a format tag.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use reid_core::synth::{ReidData, ReidItem, Split, SyntheticDataset};
use reid_core::tensor::Tensor;
use reid_core::vocab::Vocabulary;

use crate::error::{CliError, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
pub struct ManifestRow {
    pub path: String,
    pub pid: usize,
    pub camid: usize,
    pub split: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CaptionRow {
    pub path: String,
    pub caption: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub image_hw: usize,
    pub n_train_ids: usize,
    pub n_test_ids: usize,
    pub n_cameras: usize,
    pub images_per_id: usize,
    pub seed: u64,
}

fn split_dir(split: Split) -> &'static str {
    split.as_str()
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "query" => Ok(Split::Query),
        "gallery" => Ok(Split::Gallery),
        other => Err(CliError::config(format!("unknown split '{other}' in manifest"))),
    }
}

fn to_rgb8(pixels: &Tensor, hw: usize) -> image::RgbImage {
    image::RgbImage::from_fn(hw as u32, hw as u32, |x, y| {
        let r = y as usize * hw + x as usize;
        let q = |c: usize| (pixels.at(r, c).clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([q(0), q(1), q(2)])
    })
}

fn from_rgb8(img: &image::RgbImage) -> Tensor {
    let (w, h) = img.dimensions();
    let mut t = Tensor::zeros((w * h) as usize, 3);
    for y in 0..h {
        for x in 0..w {
            let p = img.get_pixel(x, y);
            let r = (y * w + x) as usize;
            for c in 0..3 {
                *t.at_mut(r, c) = p.0[c] as f64 / 255.0;
            }
        }
    }
    t
}

/// Write a generated dataset to a fresh directory. Fails if the directory
/// already exists: runs never mutate existing outputs.
pub fn write_dataset(data: &SyntheticDataset, root: &Path) -> Result<()> {
    fs::create_dir(root).map_err(|e| {
        CliError::Io(std::io::Error::new(
            e.kind(),
            format!("cannot create dataset dir {}: {e}", root.display()),
        ))
    })?;
    for split in [Split::Train, Split::Query, Split::Gallery] {
        fs::create_dir(root.join(split_dir(split)))?;
    }

    let hw = data.spec.image_hw;
    let mut manifest = String::new();
    let mut captions = String::new();
    for im in &data.images {
        let rel = format!(
            "{}/{:04}_{:02}_{:04}.png",
            split_dir(im.split),
            im.pid,
            im.camid,
            im.seq
        );
        to_rgb8(&im.pixels, hw)
            .save(root.join(&rel))
            .map_err(|e| CliError::Io(std::io::Error::other(format!("png write: {e}"))))?;
        let row = ManifestRow {
            path: rel.clone(),
            pid: im.pid,
            camid: im.camid,
            split: im.split.as_str().to_string(),
        };
        manifest.push_str(&serde_json::to_string(&row)?);
        manifest.push('\n');
        if im.split == Split::Train {
            let cap = CaptionRow { path: rel, caption: data.identities[im.pid].caption() };
            captions.push_str(&serde_json::to_string(&cap)?);
            captions.push('\n');
        }
    }
    fs::write(root.join("manifest.jsonl"), manifest)?;
    fs::write(root.join("captions.jsonl"), captions)?;

    let vocab = Vocabulary::from_words(reid_core::synth::vocabulary_words())
        .map_err(|e| CliError::config(format!("{e}")))?;
    let mut vocab_text = String::new();
    for i in 0..vocab.len() {
        vocab_text.push_str(vocab.token(i));
        vocab_text.push('\n');
    }
    fs::write(root.join("vocab.txt"), vocab_text)?;

    let meta = DatasetMeta {
        format_version: FORMAT_VERSION,
        image_hw: hw,
        n_train_ids: data.spec.n_train_ids,
        n_test_ids: data.spec.n_test_ids,
        n_cameras: data.spec.n_cameras,
        images_per_id: data.spec.images_per_id,
        seed: data.spec.seed,
    };
    fs::write(root.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

/// A dataset loaded back from disk.
pub struct LoadedDataset {
    pub data: ReidData,
    pub meta: DatasetMeta,
    pub vocab: Vocabulary,
    /// Relative image path per item, aligned with `data.items`.
    pub paths: Vec<String>,
}

pub fn load_dataset(root: &Path) -> Result<LoadedDataset> {
    let meta_path = root.join("meta.json");
    if !meta_path.exists() {
        return Err(CliError::missing(format!(
            "no dataset at {} (meta.json missing); run gen-data first",
            root.display()
        )));
    }
    let meta: DatasetMeta = serde_json::from_str(&fs::read_to_string(meta_path)?)?;
    if meta.format_version != FORMAT_VERSION {
        return Err(CliError::config(format!(
            "dataset format {} unsupported (expected {})",
            meta.format_version, FORMAT_VERSION
        )));
    }
    let vocab_lines = fs::read_to_string(root.join("vocab.txt"))?;
    let vocab = Vocabulary::from_lines(vocab_lines.lines())
        .map_err(|e| CliError::config(format!("{e}")))?;

    let mut caption_of: std::collections::HashMap<String, String> = Default::default();
    for line in fs::read_to_string(root.join("captions.jsonl"))?.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let row: CaptionRow = serde_json::from_str(line)?;
        caption_of.insert(row.path, row.caption);
    }

    let mut items = Vec::new();
    let mut paths = Vec::new();
    for line in fs::read_to_string(root.join("manifest.jsonl"))?.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let row: ManifestRow = serde_json::from_str(line)?;
        let split = parse_split(&row.split)?;
        let img = image::open(root.join(&row.path))
            .map_err(|e| CliError::Io(std::io::Error::other(format!("{}: {e}", row.path))))?
            .to_rgb8();
        let pixels = from_rgb8(&img);
        if pixels.rows != meta.image_hw * meta.image_hw {
            return Err(CliError::config(format!(
                "{}: image size does not match meta.json image_hw={}",
                row.path, meta.image_hw
            )));
        }
        items.push(ReidItem {
            pixels,
            pid: row.pid,
            camid: row.camid,
            split,
            caption: caption_of.get(&row.path).cloned(),
        });
        paths.push(row.path);
    }
    if items.is_empty() {
        return Err(CliError::config("manifest lists no images"));
    }
    Ok(LoadedDataset { data: ReidData { image_hw: meta.image_hw, items }, meta, vocab, paths })
}

/// Resolve an output directory that must not exist yet.
pub fn fresh_dir(path: &Path) -> Result<PathBuf> {
    if path.exists() {
        return Err(CliError::config(format!(
            "output directory {} already exists; runs never overwrite",
            path.display()
        )));
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() && !parent.exists() {
            return Err(CliError::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("parent directory {} does not exist", parent.display()),
            )));
        }
    }
    Ok(path.to_path_buf())
}
