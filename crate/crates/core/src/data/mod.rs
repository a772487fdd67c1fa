//! Dataset ingestion and on-disk layout.
//!
//! A dataset root holds `train/`, `query/`, and `gallery/` image folders.
//! Filenames follow the common re-ID convention `<personid>_c<camid>_*.<ext>`;
//! a `manifest.txt` (tab-separated `path  id  cam  split`) overrides the
//! folder convention for nonconforming collections. PNG and binary PPM are
//! accepted. Ground-truth occlusion masks, when present, live in sibling
//! `<split>_masks/` folders under the same filename.

pub mod sampler;
pub mod synthetic;

use std::path::{Path, PathBuf};

use image::imageops::FilterType;

use crate::error::{Error, Result};

/// Channel-major float image, values in `[0, 1]`, layout `3 x H x W`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuf {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl ImageBuf {
    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut pixels = Vec::with_capacity(3 * height * width);
        for c in rgb {
            pixels.extend(std::iter::repeat(c).take(height * width));
        }
        ImageBuf { height, width, pixels }
    }

    #[inline]
    pub fn get(&self, channel: usize, y: usize, x: usize) -> f32 {
        self.pixels[(channel * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, channel: usize, y: usize, x: usize, v: f32) {
        self.pixels[(channel * self.height + y) * self.width + x] = v;
    }

    /// Values normalized per channel with the dataset statistics, ready to
    /// become a model input leaf.
    pub fn normalized(&self, stats: &ChannelStats) -> Vec<f32> {
        let hw = self.height * self.width;
        let mut out = Vec::with_capacity(3 * hw);
        for c in 0..3 {
            let mean = stats.mean[c];
            let inv_std = 1.0 / stats.std[c];
            out.extend(self.pixels[c * hw..(c + 1) * hw].iter().map(|&v| (v - mean) * inv_std));
        }
        out
    }

    fn from_dynamic(img: image::DynamicImage, height: usize, width: usize) -> Self {
        let resized = if img.height() as usize == height && img.width() as usize == width {
            img
        } else {
            img.resize_exact(width as u32, height as u32, FilterType::Triangle)
        };
        let rgb = resized.to_rgb8();
        let mut pixels = vec![0.0f32; 3 * height * width];
        for (x, y, p) in rgb.enumerate_pixels() {
            let (x, y) = (x as usize, y as usize);
            for c in 0..3 {
                pixels[(c * height + y) * width + x] = p.0[c] as f32 / 255.0;
            }
        }
        ImageBuf { height, width, pixels }
    }

    pub fn load(path: &Path, height: usize, width: usize) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Data(format!("cannot decode {}: {e}", path.display())))?;
        Ok(Self::from_dynamic(img, height, width))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut out = image::RgbImage::new(self.width as u32, self.height as u32);
        for y in 0..self.height {
            for x in 0..self.width {
                let px = [
                    (self.get(0, y, x).clamp(0.0, 1.0) * 255.0).round() as u8,
                    (self.get(1, y, x).clamp(0.0, 1.0) * 255.0).round() as u8,
                    (self.get(2, y, x).clamp(0.0, 1.0) * 255.0).round() as u8,
                ];
                out.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        out.save(path)
            .map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "query" => Ok(Split::Query),
            "gallery" => Ok(Split::Gallery),
            other => Err(Error::Data(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PersonImage {
    pub image: ImageBuf,
    pub person_id: u32,
    pub camera_id: u32,
    /// Ground-truth occlusion mask (row-major H x W), synthetic data only.
    pub mask: Option<Vec<bool>>,
    /// File stem, used in rank-list exports.
    pub name: String,
}

/// Per-channel mean and standard deviation of the train split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelStats {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl ChannelStats {
    pub fn identity() -> Self {
        ChannelStats { mean: [0.0; 3], std: [1.0; 3] }
    }

    pub fn compute(images: &[PersonImage]) -> Self {
        let mut mean = [0.0f64; 3];
        let mut count = 0usize;
        for img in images {
            let hw = img.image.height * img.image.width;
            for c in 0..3 {
                mean[c] += img.image.pixels[c * hw..(c + 1) * hw]
                    .iter()
                    .map(|&v| v as f64)
                    .sum::<f64>();
            }
            count += hw;
        }
        for m in mean.iter_mut() {
            *m /= count.max(1) as f64;
        }
        let mut var = [0.0f64; 3];
        for img in images {
            let hw = img.image.height * img.image.width;
            for c in 0..3 {
                var[c] += img.image.pixels[c * hw..(c + 1) * hw]
                    .iter()
                    .map(|&v| (v as f64 - mean[c]).powi(2))
                    .sum::<f64>();
            }
        }
        let mut std = [0.0f32; 3];
        for c in 0..3 {
            std[c] = ((var[c] / count.max(1) as f64).sqrt() as f32).max(1e-3);
        }
        ChannelStats {
            mean: [mean[0] as f32, mean[1] as f32, mean[2] as f32],
            std,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<PersonImage>,
    pub query: Vec<PersonImage>,
    pub gallery: Vec<PersonImage>,
    pub stats: ChannelStats,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[PersonImage] {
        match split {
            Split::Train => &self.train,
            Split::Query => &self.query,
            Split::Gallery => &self.gallery,
        }
    }

    /// Distinct train identities in ascending order.
    pub fn train_identities(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.train.iter().map(|p| p.person_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Maps raw person ids onto contiguous classifier labels.
    pub fn label_map(&self) -> std::collections::HashMap<u32, usize> {
        self.train_identities()
            .into_iter()
            .enumerate()
            .map(|(i, id)| (id, i))
            .collect()
    }
}

/// `0002_c1_000451` -> (2, 1)
pub fn parse_name(stem: &str) -> Option<(u32, u32)> {
    let mut parts = stem.split('_');
    let pid: u32 = parts.next()?.parse().ok()?;
    let cam = parts.next()?;
    let cam: u32 = cam.strip_prefix('c')?.parse().ok()?;
    Some((pid, cam))
}

#[derive(Debug)]
pub struct LoadReport {
    pub dataset: Dataset,
    pub skipped: Vec<String>,
}

fn is_image_file(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png") | Some("ppm") | Some("pnm")
    )
}

fn load_mask(path: &Path, height: usize, width: usize) -> Result<Vec<bool>> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("cannot decode mask {}: {e}", path.display())))?;
    let gray = img
        .resize_exact(width as u32, height as u32, FilterType::Nearest)
        .to_luma8();
    Ok(gray.pixels().map(|p| p.0[0] > 127).collect())
}

fn load_split(
    root: &Path,
    split: Split,
    height: usize,
    width: usize,
    skipped: &mut Vec<String>,
) -> Result<Vec<PersonImage>> {
    let dir = root.join(split.dir_name());
    if !dir.is_dir() {
        return Err(Error::Data(format!(
            "missing `{}` directory under {}",
            split.dir_name(),
            root.display()
        )));
    }
    let mask_dir = root.join(format!("{}_masks", split.dir_name()));
    let mut entries: Vec<PathBuf> = std::fs::read_dir(&dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| is_image_file(p))
        .collect();
    entries.sort();
    let mut out = Vec::with_capacity(entries.len());
    for path in entries {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("").to_string();
        let Some((person_id, camera_id)) = parse_name(&stem) else {
            skipped.push(format!("{}: filename does not match <id>_c<cam>_*", path.display()));
            continue;
        };
        let image = ImageBuf::load(&path, height, width)?;
        let mask_path = mask_dir.join(path.file_name().unwrap());
        let mask = if mask_path.is_file() {
            Some(load_mask(&mask_path, height, width)?)
        } else {
            None
        };
        out.push(PersonImage { image, person_id, camera_id, mask, name: stem });
    }
    if out.is_empty() {
        return Err(Error::Data(format!(
            "split `{}` under {} contains no usable images",
            split.dir_name(),
            root.display()
        )));
    }
    Ok(out)
}

fn load_manifest(root: &Path, height: usize, width: usize, skipped: &mut Vec<String>) -> Result<Dataset> {
    let text = std::fs::read_to_string(root.join("manifest.txt"))?;
    let mut splits: [Vec<PersonImage>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            skipped.push(format!("manifest line {}: expected 4 tab-separated fields", lineno + 1));
            continue;
        }
        let person_id: u32 = fields[1]
            .parse()
            .map_err(|_| Error::Data(format!("manifest line {}: bad id", lineno + 1)))?;
        let camera_id: u32 = fields[2]
            .parse()
            .map_err(|_| Error::Data(format!("manifest line {}: bad camera", lineno + 1)))?;
        let split = Split::parse(fields[3])?;
        let path = root.join(fields[0]);
        let image = ImageBuf::load(&path, height, width)?;
        let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("").to_string();
        let entry = PersonImage { image, person_id, camera_id, mask: None, name };
        splits[match split {
            Split::Train => 0,
            Split::Query => 1,
            Split::Gallery => 2,
        }]
        .push(entry);
    }
    for (i, name) in ["train", "query", "gallery"].iter().enumerate() {
        if splits[i].is_empty() {
            return Err(Error::Data(format!("manifest has no `{name}` entries")));
        }
    }
    let [train, query, gallery] = splits;
    let stats = ChannelStats::compute(&train);
    Ok(Dataset { train, query, gallery, stats })
}

/// Loads a dataset root, resizing every image to `height x width` and
/// computing channel statistics on the train split.
pub fn load_dataset(root: &Path, height: usize, width: usize) -> Result<LoadReport> {
    let mut skipped = Vec::new();
    let dataset = if root.join("manifest.txt").is_file() {
        load_manifest(root, height, width, &mut skipped)?
    } else {
        let train = load_split(root, Split::Train, height, width, &mut skipped)?;
        let query = load_split(root, Split::Query, height, width, &mut skipped)?;
        let gallery = load_split(root, Split::Gallery, height, width, &mut skipped)?;
        let stats = ChannelStats::compute(&train);
        Dataset { train, query, gallery, stats }
    };
    Ok(LoadReport { dataset, skipped })
}

/// Writes the dataset in the canonical directory layout (PNG), including
/// mask folders for entries that carry ground truth.
pub fn write_dataset(dataset: &Dataset, root: &Path) -> Result<()> {
    for (split, images) in [
        (Split::Train, &dataset.train),
        (Split::Query, &dataset.query),
        (Split::Gallery, &dataset.gallery),
    ] {
        let dir = root.join(split.dir_name());
        std::fs::create_dir_all(&dir)?;
        let mask_dir = root.join(format!("{}_masks", split.dir_name()));
        for person in images.iter() {
            let file = format!("{}.png", person.name);
            person.image.save_png(&dir.join(&file))?;
            if let Some(mask) = &person.mask {
                std::fs::create_dir_all(&mask_dir)?;
                let mut img = image::GrayImage::new(person.image.width as u32, person.image.height as u32);
                for y in 0..person.image.height {
                    for x in 0..person.image.width {
                        let v = if mask[y * person.image.width + x] { 255 } else { 0 };
                        img.put_pixel(x as u32, y as u32, image::Luma([v]));
                    }
                }
                img.save(mask_dir.join(&file))
                    .map_err(|e| Error::Data(format!("cannot write mask: {e}")))?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn filename_convention_parses() {
        assert_eq!(parse_name("0002_c1_000451"), Some((2, 1)));
        assert_eq!(parse_name("0123_c12_whatever_else"), Some((123, 12)));
        assert_eq!(parse_name("no_camera_here"), None);
        assert_eq!(parse_name("0002_x1_oops"), None);
    }

    #[test]
    fn stats_have_sane_values() {
        let img = ImageBuf::filled(4, 4, [0.5, 0.25, 1.0]);
        let person = PersonImage {
            image: img,
            person_id: 0,
            camera_id: 0,
            mask: None,
            name: "p".into(),
        };
        let stats = ChannelStats::compute(&[person]);
        assert!((stats.mean[0] - 0.5).abs() < 1e-6);
        assert!((stats.mean[1] - 0.25).abs() < 1e-6);
        assert!((stats.mean[2] - 1.0).abs() < 1e-6);
        // constant channels fall back to the std floor
        assert!(stats.std.iter().all(|&s| s >= 1e-3));
    }

    #[test]
    fn empty_split_is_an_error_naming_the_split() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("train")).unwrap();
        let err = load_dataset(dir.path(), 32, 16).unwrap_err();
        assert!(err.to_string().contains("train"), "{err}");
    }
}
