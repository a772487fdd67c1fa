//! Deterministic sprite dataset generator.
//!
//! Each identity is a block-figure sprite (head, torso with a trim stripe,
//! legs) with a palette derived from the identity index. Per-image pose and
//! photometric jitter keep images of one identity pixel-different while the
//! palette stays fixed. Query/gallery images use disjoint camera pools and
//! are composited with held-out obstacles at the configured rates, recording
//! ground-truth occlusion masks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{ChannelStats, Dataset, ImageBuf, PersonImage};
use crate::augment::{composite, sample_placement, synthetic_obstacles, Obstacle};
use crate::config::SyntheticSpec;
use crate::error::Result;
use crate::rng::{stream, Purpose};

/// Identity-determined sprite colors and build.
#[derive(Debug, Clone, PartialEq)]
pub struct Palette {
    pub hair: [f32; 3],
    pub skin: [f32; 3],
    pub torso: [f32; 3],
    pub trim: [f32; 3],
    pub legs: [f32; 3],
    /// Torso width factor.
    pub build: f32,
}

impl Palette {
    /// Stable content hash, used to assert identity consistency in tests.
    pub fn hash(&self) -> u64 {
        let mut h = 0xcbf29ce484222325u64;
        for v in self
            .hair
            .iter()
            .chain(&self.skin)
            .chain(&self.torso)
            .chain(&self.trim)
            .chain(&self.legs)
            .chain(std::iter::once(&self.build))
        {
            h = (h ^ v.to_bits() as u64).wrapping_mul(0x100000001b3);
        }
        h
    }
}

fn saturated_color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    // one dominant channel keeps identities visually distinct
    let hi = rng.gen_range(0.55f32..0.95);
    let mid = rng.gen_range(0.1f32..0.5);
    let lo = rng.gen_range(0.0f32..0.25);
    let mut c = [hi, mid, lo];
    let rot = rng.gen_range(0..3);
    c.rotate_left(rot);
    if rng.gen_bool(0.5) {
        c.swap(1, 2);
    }
    c
}

pub fn identity_palette(seed: u64, person_id: u32) -> Palette {
    let mut rng = stream(seed, Purpose::Synthetic, &[0x11d, person_id as u64]);
    Palette {
        hair: [
            rng.gen_range(0.05f32..0.4),
            rng.gen_range(0.05f32..0.3),
            rng.gen_range(0.02f32..0.25),
        ],
        skin: [
            rng.gen_range(0.6f32..0.95),
            rng.gen_range(0.45f32..0.8),
            rng.gen_range(0.35f32..0.7),
        ],
        torso: saturated_color(&mut rng),
        trim: saturated_color(&mut rng),
        legs: saturated_color(&mut rng),
        build: rng.gen_range(0.75f32..1.0),
    }
}

fn fill_rect(img: &mut ImageBuf, y0: f32, y1: f32, x0: f32, x1: f32, color: [f32; 3], jitter: &[f32; 3]) {
    let h = img.height as f32;
    let w = img.width as f32;
    let ys = (y0 * h).round().max(0.0) as usize;
    let ye = ((y1 * h).round() as usize).min(img.height);
    let xs = (x0 * w).round().max(0.0) as usize;
    let xe = ((x1 * w).round() as usize).min(img.width);
    for y in ys..ye {
        for x in xs..xe {
            for c in 0..3 {
                img.set(c, y, x, (color[c] + jitter[c]).clamp(0.0, 1.0));
            }
        }
    }
}

fn camera_tint(seed: u64, camera: u32) -> [f32; 3] {
    let mut rng = stream(seed, Purpose::Synthetic, &[0xca3, camera as u64]);
    [
        rng.gen_range(0.42f32..0.60),
        rng.gen_range(0.42f32..0.60),
        rng.gen_range(0.42f32..0.60),
    ]
}

fn render(spec: &SyntheticSpec, person_id: u32, camera: u32, salt: u64, index: u64) -> ImageBuf {
    let mut rng = stream(spec.seed, Purpose::Synthetic, &[person_id as u64, salt, index]);
    let palette = identity_palette(spec.seed, person_id);
    let (h, w) = (spec.height, spec.width);

    let tint = camera_tint(spec.seed, camera);
    let brightness = rng.gen_range(-0.03f32..0.03);
    let mut img = ImageBuf::filled(h, w, [
        (tint[0] + brightness).clamp(0.0, 1.0),
        (tint[1] + brightness).clamp(0.0, 1.0),
        (tint[2] + brightness).clamp(0.0, 1.0),
    ]);

    // pose jitter: horizontal shift and slight height scaling
    let cx = 0.5 + rng.gen_range(-0.10f64..0.10) as f32;
    let top = 0.06 + rng.gen_range(0.0f32..0.04);
    let scale = rng.gen_range(0.92f32..1.0);
    let mut jitters: Vec<[f32; 3]> = Vec::with_capacity(6);
    for _ in 0..6 {
        jitters.push([
            rng.gen_range(-0.04f32..0.04),
            rng.gen_range(-0.04f32..0.04),
            rng.gen_range(-0.04f32..0.04),
        ]);
    }

    let head_h = 0.13 * scale;
    let torso_h = 0.34 * scale;
    let legs_h = 0.38 * scale;
    let torso_w = 0.42 * palette.build;
    let head_w = 0.22 * palette.build;
    let leg_w = 0.13 * palette.build;

    // hair cap, face, torso with trim stripe, two legs
    let y = top;
    fill_rect(&mut img, y, y + head_h * 0.45, cx - head_w / 2.0, cx + head_w / 2.0, palette.hair, &jitters[0]);
    fill_rect(&mut img, y + head_h * 0.45, y + head_h, cx - head_w / 2.0, cx + head_w / 2.0, palette.skin, &jitters[1]);
    let ty = y + head_h + 0.01;
    fill_rect(&mut img, ty, ty + torso_h, cx - torso_w / 2.0, cx + torso_w / 2.0, palette.torso, &jitters[2]);
    let stripe_y = ty + torso_h * 0.35;
    fill_rect(&mut img, stripe_y, stripe_y + torso_h * 0.2, cx - torso_w / 2.0, cx + torso_w / 2.0, palette.trim, &jitters[3]);
    let ly = ty + torso_h + 0.01;
    fill_rect(&mut img, ly, ly + legs_h, cx - torso_w / 2.0, cx - torso_w / 2.0 + leg_w, palette.legs, &jitters[4]);
    fill_rect(&mut img, ly, ly + legs_h, cx + torso_w / 2.0 - leg_w, cx + torso_w / 2.0, palette.legs, &jitters[5]);

    // low-amplitude pixel noise so repeated renders differ everywhere
    let mut noise = stream(spec.seed, Purpose::Synthetic, &[person_id as u64, salt, index, 0x707]);
    for v in img.pixels.iter_mut() {
        *v = (*v + noise.gen_range(-0.015f32..0.015)).clamp(0.0, 1.0);
    }
    img
}

/// The obstacle world is split in two: instances that occlude train images
/// (and feed the occluded-sample augmentation, which draws its bank "from
/// the train set") and held-out instances that occlude test images. Same
/// generative family, disjoint instances.
pub fn train_obstacles(spec: &SyntheticSpec) -> Vec<Obstacle> {
    let world = synthetic_obstacles(20, spec.seed ^ 0x7e57_0b57);
    world[..12].to_vec()
}

pub fn test_obstacles(spec: &SyntheticSpec) -> Vec<Obstacle> {
    let world = synthetic_obstacles(20, spec.seed ^ 0x7e57_0b57);
    world[12..].to_vec()
}

struct SplitPlan {
    salt: u64,
    per_id: usize,
    cameras: Vec<u32>,
    occlusion_rate: f64,
    held_out_obstacles: bool,
}

/// Generates the full dataset; a pure function of the spec.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let train_pool = train_obstacles(spec);
    let test_pool = test_obstacles(spec);

    let all_cams: Vec<u32> = (0..spec.cameras as u32).collect();
    let half = (spec.cameras / 2).max(1);
    let query_cams: Vec<u32> = all_cams[..half].to_vec();
    let gallery_cams: Vec<u32> = all_cams[half..].to_vec();

    let train_plan = SplitPlan {
        salt: 1,
        per_id: spec.images_per_id,
        cameras: all_cams,
        occlusion_rate: spec.train_occlusion_rate,
        held_out_obstacles: false,
    };
    let query_plan = SplitPlan {
        salt: 2,
        per_id: spec.query_per_id,
        cameras: query_cams,
        occlusion_rate: spec.query_occlusion_rate,
        held_out_obstacles: true,
    };
    let gallery_plan = SplitPlan {
        salt: 3,
        per_id: spec.gallery_per_id,
        cameras: gallery_cams,
        occlusion_rate: spec.gallery_occlusion_rate,
        held_out_obstacles: true,
    };

    let build_split = |plan: &SplitPlan| -> Result<Vec<PersonImage>> {
        let mut out = Vec::with_capacity(spec.num_ids * plan.per_id);
        for pid in 0..spec.num_ids as u32 {
            for idx in 0..plan.per_id as u64 {
                let camera = plan.cameras[(idx as usize) % plan.cameras.len()];
                let mut image = render(spec, pid, camera, plan.salt, idx);
                let mut mask = None;
                if plan.occlusion_rate > 0.0 {
                    let pool = if plan.held_out_obstacles { &test_pool } else { &train_pool };
                    let mut rng =
                        stream(spec.seed, Purpose::Synthetic, &[0x0cc, pid as u64, plan.salt, idx]);
                    if rng.gen_bool(plan.occlusion_rate) {
                        let which = rng.gen_range(0..pool.len());
                        let placement = sample_placement(&mut rng);
                        let (occluded, m) = composite(&image, &pool[which], placement)?;
                        image = occluded;
                        mask = Some(m);
                    }
                }
                out.push(PersonImage {
                    image,
                    person_id: pid,
                    camera_id: camera,
                    mask,
                    name: format!("{pid:04}_c{camera}_{:05}", plan.salt * 10_000 + idx),
                });
            }
        }
        Ok(out)
    };

    let train = build_split(&train_plan)?;
    let query = build_split(&query_plan)?;
    let gallery = build_split(&gallery_plan)?;
    let stats = ChannelStats::compute(&train);
    Ok(Dataset { train, query, gallery, stats })
}
