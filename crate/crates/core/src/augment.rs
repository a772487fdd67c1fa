//! Occlusion augmentation and contrast-triplet mining.
//!
//! A training batch is expanded by compositing `k` obstacles (shared across
//! the batch) onto every image, keeping the identity labels. Triplets then
//! pair each anchor with a same-identity/different-obstacle positive and a
//! different-identity/same-obstacle negative, batch-hard within the eligible
//! candidates.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::ImageBuf;
use crate::error::{Error, Result};

/// RGBA patch with an occupancy alpha channel. Layout `4 x H x W`.
#[derive(Debug, Clone)]
pub struct Obstacle {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub rgba: Vec<f32>,
}

impl Obstacle {
    #[inline]
    fn sample(&self, channel: usize, y: f32, x: f32) -> f32 {
        // bilinear with zero (transparent) outside the patch
        if y <= -1.0 || x <= -1.0 || y >= self.height as f32 || x >= self.width as f32 {
            return 0.0;
        }
        let y0 = y.floor();
        let x0 = x.floor();
        let dy = y - y0;
        let dx = x - x0;
        let mut acc = 0.0;
        for (oy, wy) in [(0, 1.0 - dy), (1, dy)] {
            for (ox, wx) in [(0, 1.0 - dx), (1, dx)] {
                let yy = y0 as i64 + oy;
                let xx = x0 as i64 + ox;
                if yy < 0 || xx < 0 || yy >= self.height as i64 || xx >= self.width as i64 {
                    continue;
                }
                acc += wy * wx * self.rgba[(channel * self.height + yy as usize) * self.width + xx as usize];
            }
        }
        acc
    }
}

/// Where and how an obstacle lands on an image.
#[derive(Debug, Clone, Copy)]
pub struct Placement {
    /// Center as a fraction of image width/height.
    pub center_x: f64,
    pub center_y: f64,
    /// Target obstacle height as a fraction of image height.
    pub scale: f64,
    /// Rotation in radians.
    pub rotation: f64,
}

/// Default placement distribution: lower two thirds of the frame, scale
/// 0.25..0.6 of image height, rotation within +/-15 degrees.
pub fn sample_placement(rng: &mut ChaCha8Rng) -> Placement {
    Placement {
        center_x: rng.gen_range(0.15..0.85),
        center_y: rng.gen_range(0.40..0.90),
        scale: rng.gen_range(0.25..0.6),
        rotation: rng.gen_range(-15.0f64..15.0).to_radians(),
    }
}

/// Smallest admissible obstacle scale; requests below this (after fitting)
/// are placement errors rather than invisible slivers.
pub const MIN_OBSTACLE_SCALE: f64 = 0.25;

/// Alpha-blends an obstacle onto a copy of the image.
///
/// Returns the composited image and the occupancy mask (alpha > 0.5). The
/// scale is reduced when the rotated bounding box would not fit the frame
/// and the center is clamped inside it; an obstacle that cannot fit even at
/// the minimum scale is a placement error.
pub fn composite(
    image: &ImageBuf,
    obstacle: &Obstacle,
    placement: Placement,
) -> Result<(ImageBuf, Vec<bool>)> {
    let (h, w) = (image.height, image.width);
    let aspect = obstacle.width as f64 / obstacle.height as f64;
    let (sin, cos) = placement.rotation.sin_cos();

    // bounding box extents per unit of scale
    let unit_w = h as f64 * (aspect * cos.abs() + sin.abs());
    let unit_h = h as f64 * (aspect * sin.abs() + cos.abs());
    let fit_scale = (w as f64 / unit_w).min(h as f64 / unit_h) * 0.999;
    let scale = placement.scale.min(fit_scale);
    if scale < MIN_OBSTACLE_SCALE {
        return Err(Error::Placement(format!(
            "obstacle `{}` only fits {h}x{w} at scale {fit_scale:.3}, below the minimum {MIN_OBSTACLE_SCALE}",
            obstacle.name,
        )));
    }
    let target_h = scale * h as f64;
    let target_w = target_h * aspect;
    let half_bbox_w = 0.5 * (target_w * cos.abs() + target_h * sin.abs());
    let half_bbox_h = 0.5 * (target_w * sin.abs() + target_h * cos.abs());
    let cx = (placement.center_x * w as f64).clamp(half_bbox_w, w as f64 - half_bbox_w);
    let cy = (placement.center_y * h as f64).clamp(half_bbox_h, h as f64 - half_bbox_h);

    // inverse map: image pixel -> obstacle coordinates
    let sy = obstacle.height as f64 / target_h;
    let sx = obstacle.width as f64 / target_w;
    let mut out = image.clone();
    let mut mask = vec![false; h * w];
    let y_lo = (cy - half_bbox_h).floor().max(0.0) as usize;
    let y_hi = ((cy + half_bbox_h).ceil() as usize).min(h);
    let x_lo = (cx - half_bbox_w).floor().max(0.0) as usize;
    let x_hi = ((cx + half_bbox_w).ceil() as usize).min(w);
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            let rel_x = (x as f64 + 0.5) - cx;
            let rel_y = (y as f64 + 0.5) - cy;
            // rotate by -rotation, then scale into patch coordinates
            let ox = (rel_x * cos + rel_y * sin) * sx + obstacle.width as f64 * 0.5 - 0.5;
            let oy = (-rel_x * sin + rel_y * cos) * sy + obstacle.height as f64 * 0.5 - 0.5;
            let alpha = obstacle.sample(3, oy as f32, ox as f32).clamp(0.0, 1.0);
            if alpha <= 0.0 {
                continue;
            }
            for c in 0..3 {
                let src = out.get(c, y, x);
                let obs = obstacle.sample(c, oy as f32, ox as f32);
                out.set(c, y, x, alpha * obs + (1.0 - alpha) * src);
            }
            if alpha > 0.5 {
                mask[y * w + x] = true;
            }
        }
    }
    Ok((out, mask))
}

/// One sample of the expanded batch.
#[derive(Debug, Clone)]
pub struct AugmentedSample {
    pub image: ImageBuf,
    pub person_id: u32,
    pub camera_id: u32,
    /// Index into the obstacle bank; `None` for originals.
    pub obstacle: Option<usize>,
    pub mask: Vec<bool>,
    pub source_index: usize,
}

/// A source image entering occluded-sample augmentation.
#[derive(Debug, Clone)]
pub struct SourceSample {
    pub image: ImageBuf,
    pub person_id: u32,
    pub camera_id: u32,
}

/// Expands a batch to `|B| * (k + 1)` samples: each original followed by
/// `k` copies, each occluded by one of the `k` obstacles shared batch-wide.
pub fn augment_batch(
    batch: &[SourceSample],
    bank: &[Obstacle],
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<AugmentedSample>> {
    if bank.is_empty() {
        return Err(Error::Config("obstacle bank is empty".into()));
    }
    if k == 0 {
        return Err(Error::Config("need at least one obstacle per batch".into()));
    }
    if k > bank.len() {
        return Err(Error::Config(format!(
            "asked for {k} distinct obstacles, bank holds {}",
            bank.len()
        )));
    }
    let mut indices: Vec<usize> = (0..bank.len()).collect();
    indices.shuffle(rng);
    indices.truncate(k);

    let mut out = Vec::with_capacity(batch.len() * (k + 1));
    for (source_index, src) in batch.iter().enumerate() {
        let hw = src.image.height * src.image.width;
        out.push(AugmentedSample {
            image: src.image.clone(),
            person_id: src.person_id,
            camera_id: src.camera_id,
            obstacle: None,
            mask: vec![false; hw],
            source_index,
        });
        for &oi in &indices {
            let placement = sample_placement(rng);
            let (image, mask) = composite(&src.image, &bank[oi], placement)?;
            out.push(AugmentedSample {
                image,
                person_id: src.person_id,
                camera_id: src.camera_id,
                obstacle: Some(oi),
                mask,
                source_index,
            });
        }
    }
    Ok(out)
}

/// Anchor/positive/negative indices into the expanded batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContrastTriplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Result of mining: the emitted triplets plus the number of anchors skipped
/// for lack of an eligible positive or negative.
#[derive(Debug, Clone)]
pub struct MiningOutcome {
    pub triplets: Vec<ContrastTriplet>,
    pub skipped: usize,
}

fn euclidean(a: &[f32], b: &[f32]) -> f32 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f32>()
        .sqrt()
}

/// Batch-hard contrast triplets over an expanded batch.
///
/// Positives share the anchor's identity under a different obstacle;
/// negatives carry a different identity under the same obstacle (originals
/// count as obstacle "none"). Within the eligible candidates the hardest are
/// chosen: the farthest positive and the closest negative under the provided
/// features. Anchors without candidates are skipped, never fabricated.
pub fn mine_contrast_triplets(
    samples: &[AugmentedSample],
    features: &[Vec<f32>],
) -> Result<MiningOutcome> {
    if samples.len() != features.len() {
        return Err(Error::Contract(format!(
            "{} samples but {} feature rows",
            samples.len(),
            features.len()
        )));
    }
    let mut triplets = Vec::new();
    let mut skipped = 0usize;
    for (a, anchor) in samples.iter().enumerate() {
        let mut best_pos: Option<(usize, f32)> = None;
        let mut best_neg: Option<(usize, f32)> = None;
        for (j, other) in samples.iter().enumerate() {
            if j == a {
                continue;
            }
            let same_id = other.person_id == anchor.person_id;
            let same_obstacle = other.obstacle == anchor.obstacle;
            if same_id && !same_obstacle {
                let d = euclidean(&features[a], &features[j]);
                if best_pos.map_or(true, |(_, cur)| d > cur) {
                    best_pos = Some((j, d));
                }
            } else if !same_id && same_obstacle {
                let d = euclidean(&features[a], &features[j]);
                if best_neg.map_or(true, |(_, cur)| d < cur) {
                    best_neg = Some((j, d));
                }
            }
        }
        match (best_pos, best_neg) {
            (Some((p, _)), Some((n, _))) => triplets.push(ContrastTriplet {
                anchor: a,
                positive: p,
                negative: n,
            }),
            _ => skipped += 1,
        }
    }
    Ok(MiningOutcome { triplets, skipped })
}

/// Batch-hard triplets on identity alone (the conventional scheme, used by
/// the ablations that train without occlusion augmentation).
pub fn mine_standard_triplets(person_ids: &[u32], features: &[Vec<f32>]) -> Result<MiningOutcome> {
    if person_ids.len() != features.len() {
        return Err(Error::Contract(format!(
            "{} ids but {} feature rows",
            person_ids.len(),
            features.len()
        )));
    }
    let mut triplets = Vec::new();
    let mut skipped = 0usize;
    for a in 0..person_ids.len() {
        let mut best_pos: Option<(usize, f32)> = None;
        let mut best_neg: Option<(usize, f32)> = None;
        for j in 0..person_ids.len() {
            if j == a {
                continue;
            }
            let d = euclidean(&features[a], &features[j]);
            if person_ids[j] == person_ids[a] {
                if best_pos.map_or(true, |(_, cur)| d > cur) {
                    best_pos = Some((j, d));
                }
            } else if best_neg.map_or(true, |(_, cur)| d < cur) {
                best_neg = Some((j, d));
            }
        }
        match (best_pos, best_neg) {
            (Some((p, _)), Some((n, _))) => triplets.push(ContrastTriplet {
                anchor: a,
                positive: p,
                negative: n,
            }),
            _ => skipped += 1,
        }
    }
    Ok(MiningOutcome { triplets, skipped })
}

// ── Standard photometric/geometric augmentation ─────────────────────────

/// Mirrors columns.
pub fn flip_horizontal(image: &ImageBuf) -> ImageBuf {
    let mut out = image.clone();
    for c in 0..3 {
        for y in 0..image.height {
            for x in 0..image.width {
                out.set(c, y, x, image.get(c, y, image.width - 1 - x));
            }
        }
    }
    out
}

/// Zero-pads by `pad` and crops back to the original size at the offset.
pub fn shift_crop(image: &ImageBuf, pad: usize, dy: usize, dx: usize) -> ImageBuf {
    let mut out = ImageBuf::filled(image.height, image.width, [0.0; 3]);
    for c in 0..3 {
        for y in 0..image.height {
            for x in 0..image.width {
                let sy = y as i64 + dy as i64 - pad as i64;
                let sx = x as i64 + dx as i64 - pad as i64;
                if sy >= 0 && sx >= 0 && (sy as usize) < image.height && (sx as usize) < image.width {
                    out.set(c, y, x, image.get(c, sy as usize, sx as usize));
                }
            }
        }
    }
    out
}

/// Replaces a rectangle with uniform noise. Zero-area rectangles are a no-op.
pub fn erase_rect(
    image: &mut ImageBuf,
    top: usize,
    left: usize,
    height: usize,
    width: usize,
    rng: &mut ChaCha8Rng,
) {
    for y in top..(top + height).min(image.height) {
        for x in left..(left + width).min(image.width) {
            for c in 0..3 {
                image.set(c, y, x, rng.gen_range(0.0..1.0));
            }
        }
    }
}

/// Random horizontal flip, random shifted crop, and random erasing, each
/// applied with probability 0.5.
pub fn standard_augment(image: &ImageBuf, rng: &mut ChaCha8Rng) -> ImageBuf {
    let mut out = image.clone();
    if rng.gen_bool(0.5) {
        out = flip_horizontal(&out);
    }
    if rng.gen_bool(0.5) {
        let pad = (image.height / 32).max(2);
        let dy = rng.gen_range(0..=2 * pad);
        let dx = rng.gen_range(0..=2 * pad);
        out = shift_crop(&out, pad, dy, dx);
    }
    if rng.gen_bool(0.5) {
        let area = (image.height * image.width) as f64;
        for _ in 0..32 {
            let target = rng.gen_range(0.02..0.2) * area;
            let aspect = rng.gen_range(0.3..3.33);
            let eh = (target * aspect).sqrt().round() as usize;
            let ew = (target / aspect).sqrt().round() as usize;
            if eh == 0 || ew == 0 || eh >= image.height || ew >= image.width {
                continue;
            }
            let top = rng.gen_range(0..image.height - eh);
            let left = rng.gen_range(0..image.width - ew);
            erase_rect(&mut out, top, left, eh, ew, rng);
            break;
        }
    }
    out
}

// ── Obstacle sources ─────────────────────────────────────────────────────

/// Loads RGBA obstacle patches from a directory; the filename stem is the
/// obstacle identifier.
pub fn load_obstacles(dir: &std::path::Path) -> Result<Vec<Obstacle>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map_or(false, |e| e == "png"))
        .collect();
    paths.sort();
    let mut out = Vec::new();
    for path in paths {
        let img = image::open(&path)
            .map_err(|e| Error::Data(format!("cannot decode obstacle {}: {e}", path.display())))?
            .to_rgba8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut rgba = vec![0.0f32; 4 * h * w];
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..4 {
                rgba[(c * h + y as usize) * w + x as usize] = p.0[c] as f32 / 255.0;
            }
        }
        let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("").to_string();
        if rgba[3 * h * w..].iter().all(|&a| a == 0.0) {
            return Err(Error::Data(format!("obstacle `{name}` has empty support")));
        }
        out.push(Obstacle { name, height: h, width: w, rgba });
    }
    if out.is_empty() {
        return Err(Error::Data(format!("no .png obstacles under {}", dir.display())));
    }
    Ok(out)
}

/// Deterministic bank of synthetic obstacle patches: geometric shapes with
/// distinct colors and simple texture (bands, checker, rings), a stand-in
/// for street furniture and carried objects.
pub fn synthetic_obstacles(count: usize, seed: u64) -> Vec<Obstacle> {
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = crate::rng::stream(seed, crate::rng::Purpose::Obstacles, &[i as u64]);
        let h = rng.gen_range(20..34);
        let w = rng.gen_range(20..34);
        let base = [
            rng.gen_range(0.1f32..0.9),
            rng.gen_range(0.1f32..0.9),
            rng.gen_range(0.1f32..0.9),
        ];
        let accent = [
            rng.gen_range(0.0f32..1.0),
            rng.gen_range(0.0f32..1.0),
            rng.gen_range(0.0f32..1.0),
        ];
        let period = rng.gen_range(3usize..7);
        let shape = i % 6;
        let mut rgba = vec![0.0f32; 4 * h * w];
        for y in 0..h {
            for x in 0..w {
                let ny = (y as f32 + 0.5) / h as f32 * 2.0 - 1.0;
                let nx = (x as f32 + 0.5) / w as f32 * 2.0 - 1.0;
                let inside = match shape {
                    0 => ny * ny + nx * nx <= 1.0,                       // ellipse
                    1 => true,                                           // bar
                    2 => (ny - nx).abs() <= 0.7,                         // diagonal stripe
                    3 => ny * ny + nx * nx <= 1.0 && ny * ny + nx * nx >= 0.25, // ring
                    4 => nx.abs() + ny.abs() <= 1.0,                     // diamond
                    _ => ny >= nx.abs() - 1.0 && ny <= 0.9,              // triangle
                };
                if !inside {
                    continue;
                }
                let textured = match shape % 3 {
                    0 => (y / period) % 2 == 0,
                    1 => ((y / period) + (x / period)) % 2 == 0,
                    _ => (x / period) % 2 == 0,
                };
                for c in 0..3 {
                    let v = if textured { base[c] } else { 0.55 * base[c] + 0.45 * accent[c] };
                    rgba[(c * h + y) * w + x] = v;
                }
                rgba[(3 * h + y) * w + x] = 1.0;
            }
        }
        out.push(Obstacle {
            name: format!("synthetic_{i:02}"),
            height: h,
            width: w,
            rgba,
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn checker_image(h: usize, w: usize) -> ImageBuf {
        let mut img = ImageBuf::filled(h, w, [0.0; 3]);
        for y in 0..h {
            for x in 0..w {
                let v = ((y + x) % 2) as f32;
                for c in 0..3 {
                    img.set(c, y, x, v * 0.8);
                }
            }
        }
        img
    }

    fn solid_obstacle(h: usize, w: usize, color: [f32; 3], alpha: f32) -> Obstacle {
        let mut rgba = vec![0.0; 4 * h * w];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    rgba[(c * h + y) * w + x] = color[c];
                }
                rgba[(3 * h + y) * w + x] = alpha;
            }
        }
        Obstacle { name: "solid".into(), height: h, width: w, rgba }
    }

    fn centered_placement(scale: f64) -> Placement {
        Placement { center_x: 0.5, center_y: 0.5, scale, rotation: 0.0 }
    }

    #[test]
    fn transparent_obstacle_is_identity_with_empty_mask() {
        let img = checker_image(16, 12);
        let obs = solid_obstacle(8, 8, [1.0, 0.0, 0.0], 0.0);
        let (out, mask) = composite(&img, &obs, centered_placement(0.4)).unwrap();
        assert_eq!(out, img);
        assert!(mask.iter().all(|&m| !m));
    }

    #[test]
    fn opaque_obstacle_pixels_equal_obstacle_colors() {
        let img = checker_image(20, 12);
        let obs = solid_obstacle(10, 6, [0.2, 0.5, 0.9], 1.0);
        let (out, mask) = composite(&img, &obs, centered_placement(0.5)).unwrap();
        assert!(mask.iter().any(|&m| m));
        for y in 0..20 {
            for x in 0..12 {
                if mask[y * 12 + x] {
                    // interior pixels sample the solid color exactly
                    let interior = (6..14).contains(&y) && (4..8).contains(&x);
                    if interior {
                        assert!((out.get(0, y, x) - 0.2).abs() < 1e-5);
                        assert!((out.get(1, y, x) - 0.5).abs() < 1e-5);
                        assert!((out.get(2, y, x) - 0.9).abs() < 1e-5);
                    }
                }
            }
        }
    }

    #[test]
    fn half_alpha_blends_evenly() {
        let img = ImageBuf::filled(16, 8, [0.4, 0.4, 0.4]);
        let obs = solid_obstacle(8, 4, [1.0, 0.0, 0.6], 0.5);
        let (out, mask) = composite(&img, &obs, centered_placement(0.4)).unwrap();
        // alpha 0.5 never crosses the mask threshold
        assert!(mask.iter().all(|&m| !m));
        let y = 8;
        let x = 4;
        assert!((out.get(0, y, x) - (0.5 * 1.0 + 0.5 * 0.4)).abs() < 1e-5);
        assert!((out.get(2, y, x) - (0.5 * 0.6 + 0.5 * 0.4)).abs() < 1e-5);
    }

    #[test]
    fn oversized_obstacle_is_a_placement_error() {
        let img = checker_image(16, 8);
        let obs = solid_obstacle(10, 40, [0.1; 3], 1.0); // 4:1 aspect
        let err = composite(&img, &obs, centered_placement(0.5)).unwrap_err();
        assert!(matches!(err, Error::Placement(_)));
    }

    fn tiny_batch(ids: &[u32]) -> Vec<SourceSample> {
        ids.iter()
            .enumerate()
            .map(|(i, &id)| SourceSample {
                image: checker_image(16, 8),
                person_id: id,
                camera_id: i as u32 % 2,
            })
            .collect()
    }

    #[test]
    fn batch_expansion_counts_and_labels() {
        let batch = tiny_batch(&[1, 1, 2, 2]);
        let bank = synthetic_obstacles(4, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let expanded = augment_batch(&batch, &bank, 2, &mut rng).unwrap();
        assert_eq!(expanded.len(), 4 * 3);
        for s in &expanded {
            assert_eq!(s.person_id, batch[s.source_index].person_id);
            assert_eq!(s.mask.iter().any(|&m| m), s.obstacle.is_some());
        }
        // each copy occluded by exactly one of the shared obstacles
        let used: std::collections::BTreeSet<usize> =
            expanded.iter().filter_map(|s| s.obstacle).collect();
        assert_eq!(used.len(), 2);
    }

    #[test]
    fn transparent_obstacle_duplicates_the_batch() {
        let batch = tiny_batch(&[3, 4]);
        let bank = vec![solid_obstacle(6, 6, [0.5; 3], 0.0)];
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let expanded = augment_batch(&batch, &bank, 1, &mut rng).unwrap();
        assert_eq!(expanded.len(), 4);
        assert_eq!(expanded[0].image, expanded[1].image);
        assert_eq!(expanded[2].image, expanded[3].image);
    }

    #[test]
    fn empty_bank_is_a_configuration_error() {
        let batch = tiny_batch(&[1, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        assert!(matches!(
            augment_batch(&batch, &[], 1, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn seeded_expansion_is_reproducible() {
        let batch = tiny_batch(&[1, 1, 2, 2]);
        let bank = synthetic_obstacles(5, 11);
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            augment_batch(&batch, &bank, 2, &mut rng).unwrap()
        };
        let a = run();
        let b = run();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image.pixels, y.image.pixels);
            assert_eq!(x.obstacle, y.obstacle);
        }
    }

    fn mining_setup(ids: &[u32], k: usize) -> Vec<AugmentedSample> {
        let batch = tiny_batch(ids);
        let bank = synthetic_obstacles(4, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        augment_batch(&batch, &bank, k, &mut rng).unwrap()
    }

    fn random_features(n: usize, dim: usize, seed: u64) -> Vec<Vec<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect()
    }

    #[test]
    fn well_formed_batches_give_every_anchor_a_triplet() {
        let expanded = mining_setup(&[1, 1, 2, 2], 1);
        let feats = random_features(expanded.len(), 4, 1);
        let outcome = mine_contrast_triplets(&expanded, &feats).unwrap();
        assert_eq!(outcome.skipped, 0);
        assert_eq!(outcome.triplets.len(), expanded.len());
    }

    #[test]
    fn single_identity_batches_skip_every_anchor() {
        let expanded = mining_setup(&[5, 5, 5], 2);
        let feats = random_features(expanded.len(), 4, 2);
        let outcome = mine_contrast_triplets(&expanded, &feats).unwrap();
        assert!(outcome.triplets.is_empty());
        assert_eq!(outcome.skipped, expanded.len());
    }

    #[test]
    fn emitted_triplets_satisfy_membership_predicates() {
        for seed in 0..5u64 {
            let expanded = mining_setup(&[1, 1, 2, 2, 3, 3], 2);
            let feats = random_features(expanded.len(), 6, seed);
            let outcome = mine_contrast_triplets(&expanded, &feats).unwrap();
            assert!(!outcome.triplets.is_empty());
            for t in &outcome.triplets {
                let (a, p, n) = (&expanded[t.anchor], &expanded[t.positive], &expanded[t.negative]);
                assert_eq!(a.person_id, p.person_id);
                assert_ne!(a.person_id, n.person_id);
                assert_ne!(a.obstacle, p.obstacle);
                assert_eq!(a.obstacle, n.obstacle);

                // brute-force hardness check over all eligible pairs
                for (j, other) in expanded.iter().enumerate() {
                    if j == t.anchor {
                        continue;
                    }
                    let d = euclidean(&feats[t.anchor], &feats[j]);
                    if other.person_id == a.person_id && other.obstacle != a.obstacle {
                        assert!(d <= euclidean(&feats[t.anchor], &feats[t.positive]) + 1e-6);
                    }
                    if other.person_id != a.person_id && other.obstacle == a.obstacle {
                        assert!(d >= euclidean(&feats[t.anchor], &feats[t.negative]) - 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn double_flip_is_identity() {
        let img = checker_image(12, 10);
        assert_eq!(flip_horizontal(&flip_horizontal(&img)), img);
    }

    #[test]
    fn zero_area_erase_is_identity() {
        let img = checker_image(12, 10);
        let mut out = img.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        erase_rect(&mut out, 4, 4, 0, 5, &mut rng);
        erase_rect(&mut out, 4, 4, 5, 0, &mut rng);
        assert_eq!(out, img);
    }

    #[test]
    fn erased_region_matches_fill_distribution() {
        // sample mean over many draws approaches the uniform mean 0.5
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut total = 0.0f64;
        let mut count = 0usize;
        for _ in 0..1000 {
            let mut img = ImageBuf::filled(8, 8, [0.0; 3]);
            erase_rect(&mut img, 2, 2, 4, 4, &mut rng);
            for y in 2..6 {
                for x in 2..6 {
                    total += img.get(0, y, x) as f64;
                    count += 1;
                }
            }
        }
        let mean = total / count as f64;
        assert!((mean - 0.5).abs() < 0.01, "sample mean {mean}");
    }

    #[test]
    fn synthetic_obstacles_are_deterministic_with_nonempty_support() {
        let a = synthetic_obstacles(6, 42);
        let b = synthetic_obstacles(6, 42);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.rgba, y.rgba);
            let alpha = &x.rgba[3 * x.height * x.width..];
            assert!(alpha.iter().any(|&v| v > 0.0));
        }
    }

    proptest! {
        #[test]
        fn expansion_cardinality_is_exact(
            n_ids in 2usize..5,
            k in 1usize..4,
            seed in 0u64..50,
        ) {
            let ids: Vec<u32> = (0..n_ids as u32).flat_map(|i| [i, i]).collect();
            let batch = tiny_batch(&ids);
            let bank = synthetic_obstacles(4, 99);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let expanded = augment_batch(&batch, &bank, k, &mut rng).unwrap();
            prop_assert_eq!(expanded.len(), batch.len() * (k + 1));
            for s in &expanded {
                prop_assert_eq!(s.person_id, batch[s.source_index].person_id);
            }
        }
    }
}
