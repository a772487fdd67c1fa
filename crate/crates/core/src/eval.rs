//! Inference-time embedding, cosine ranking, and retrieval metrics.
//!
//! Queries and galleries embed without augmentation; ranking uses cosine
//! distance on unit feature rows. Gallery entries sharing both identity and
//! camera with the query are excluded (the standard protocol), ties break on
//! ascending gallery index, and queries without any valid relevant entry are
//! excluded from averages but reported.

use crate::autodiff::Tape;
use crate::data::{Dataset, PersonImage};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::transformer::Dropout;

/// Unit-normalized retrieval features plus the labels needed for ranking.
#[derive(Debug, Clone)]
pub struct EmbeddedSet {
    pub features: Vec<Vec<f32>>,
    pub person_ids: Vec<u32>,
    pub camera_ids: Vec<u32>,
    pub names: Vec<String>,
}

impl EmbeddedSet {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

/// Images per forward tape; bounds graph memory during embedding.
const EMBED_CHUNK: usize = 16;

/// Extracts the identity-relevant feature of every image (occlusion feature
/// discarded), L2-normalized for cosine ranking.
pub fn embed(model: &Model, images: &[PersonImage]) -> Result<EmbeddedSet> {
    let mut set = EmbeddedSet {
        features: Vec::with_capacity(images.len()),
        person_ids: Vec::with_capacity(images.len()),
        camera_ids: Vec::with_capacity(images.len()),
        names: Vec::with_capacity(images.len()),
    };
    for chunk in images.chunks(EMBED_CHUNK) {
        let mut tape = Tape::<f32>::new();
        let bound = model.bind(&mut tape, false)?;
        for person in chunk {
            let fwd = model.forward_image(&mut tape, &bound, &person.image, &mut Dropout::Off)?;
            let unit = tape.l2_normalize(fwd.id_feature)?;
            set.features.push(tape.value(unit).to_vec());
            set.person_ids.push(person.person_id);
            set.camera_ids.push(person.camera_id);
            set.names.push(person.name.clone());
        }
    }
    Ok(set)
}

/// Cosine distance matrix: entry (i, j) = 1 - <q_i, g_j>, in [0, 2] for unit
/// rows.
pub fn distance_matrix(query: &EmbeddedSet, gallery: &EmbeddedSet) -> Vec<f32> {
    let mut out = Vec::with_capacity(query.len() * gallery.len());
    for q in &query.features {
        for g in &gallery.features {
            let dot: f32 = q.iter().zip(g).map(|(a, b)| a * b).sum();
            out.push(1.0 - dot);
        }
    }
    out
}

/// Distance matrix plus per-query sorted valid gallery lists.
#[derive(Debug, Clone)]
pub struct RankingResult {
    pub query_ids: Vec<u32>,
    pub query_cams: Vec<u32>,
    pub gallery_ids: Vec<u32>,
    pub gallery_cams: Vec<u32>,
    pub gallery_names: Vec<String>,
    /// Row-major |Q| x |G|.
    pub distances: Vec<f32>,
    /// Per query: valid gallery indices sorted by (distance, index).
    pub sorted: Vec<Vec<usize>>,
    /// Valid relevant entries per query.
    pub relevant_counts: Vec<usize>,
}

impl RankingResult {
    /// Builds the ranking from an explicit distance matrix.
    pub fn from_distances(
        distances: Vec<f32>,
        query_ids: Vec<u32>,
        query_cams: Vec<u32>,
        gallery_ids: Vec<u32>,
        gallery_cams: Vec<u32>,
        gallery_names: Vec<String>,
    ) -> Result<Self> {
        let (nq, ng) = (query_ids.len(), gallery_ids.len());
        if distances.len() != nq * ng {
            return Err(Error::Contract(format!(
                "distance matrix has {} entries for {nq}x{ng}",
                distances.len()
            )));
        }
        if let Some(bad) = distances.iter().find(|d| !d.is_finite()) {
            return Err(Error::Numeric(format!("non-finite distance {bad}")));
        }
        let mut sorted = Vec::with_capacity(nq);
        let mut relevant_counts = Vec::with_capacity(nq);
        for q in 0..nq {
            let row = &distances[q * ng..(q + 1) * ng];
            let mut valid: Vec<usize> = (0..ng)
                .filter(|&g| !(gallery_ids[g] == query_ids[q] && gallery_cams[g] == query_cams[q]))
                .collect();
            valid.sort_unstable_by(|&a, &b| {
                row[a]
                    .partial_cmp(&row[b])
                    .expect("distances checked finite")
                    .then(a.cmp(&b))
            });
            relevant_counts.push(valid.iter().filter(|&&g| gallery_ids[g] == query_ids[q]).count());
            sorted.push(valid);
        }
        Ok(RankingResult {
            query_ids,
            query_cams,
            gallery_ids,
            gallery_cams,
            gallery_names,
            distances,
            sorted,
            relevant_counts,
        })
    }

    pub fn num_queries(&self) -> usize {
        self.query_ids.len()
    }
}

/// Ranks a query set against a gallery with cosine distance.
pub fn rank(query: &EmbeddedSet, gallery: &EmbeddedSet) -> Result<RankingResult> {
    if query.is_empty() || gallery.is_empty() {
        return Err(Error::Contract("empty query or gallery set".into()));
    }
    RankingResult::from_distances(
        distance_matrix(query, gallery),
        query.person_ids.clone(),
        query.camera_ids.clone(),
        gallery.person_ids.clone(),
        gallery.camera_ids.clone(),
        gallery.names.clone(),
    )
}

fn first_relevant_position(r: &RankingResult, q: usize) -> Option<usize> {
    r.sorted[q]
        .iter()
        .position(|&g| r.gallery_ids[g] == r.query_ids[q])
}

/// CMC at the requested ranks: the fraction of counted queries whose first
/// valid relevant entry appears within the top `r`.
pub fn compute_cmc(r: &RankingResult, ranks: &[usize]) -> Result<Vec<f64>> {
    let mut counted = 0usize;
    let mut hits = vec![0usize; ranks.len()];
    for q in 0..r.num_queries() {
        if r.relevant_counts[q] == 0 {
            continue;
        }
        counted += 1;
        let pos = first_relevant_position(r, q).expect("relevant entry exists");
        for (i, &rk) in ranks.iter().enumerate() {
            if pos < rk {
                hits[i] += 1;
            }
        }
    }
    if counted == 0 {
        return Err(Error::Metrics("every query lacks a valid relevant gallery entry".into()));
    }
    Ok(hits.into_iter().map(|h| h as f64 / counted as f64).collect())
}

#[derive(Debug, Clone)]
pub struct ApReport {
    pub map: f64,
    /// Per-query average precision; `None` marks excluded queries.
    pub per_query: Vec<Option<f64>>,
    pub excluded: usize,
}

/// Mean average precision over the validity-masked ranking.
pub fn compute_map(r: &RankingResult) -> Result<ApReport> {
    let mut per_query = Vec::with_capacity(r.num_queries());
    let mut total = 0.0;
    let mut counted = 0usize;
    for q in 0..r.num_queries() {
        if r.relevant_counts[q] == 0 {
            per_query.push(None);
            continue;
        }
        let mut hits = 0usize;
        let mut precision_sum = 0.0;
        for (pos, &g) in r.sorted[q].iter().enumerate() {
            if r.gallery_ids[g] == r.query_ids[q] {
                hits += 1;
                precision_sum += hits as f64 / (pos + 1) as f64;
            }
        }
        let ap = precision_sum / r.relevant_counts[q] as f64;
        per_query.push(Some(ap));
        total += ap;
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::Metrics("every query lacks a valid relevant gallery entry".into()));
    }
    Ok(ApReport {
        map: total / counted as f64,
        excluded: per_query.iter().filter(|ap| ap.is_none()).count(),
        per_query,
    })
}

#[derive(Debug, Clone)]
pub struct RankEntry {
    pub gallery_index: usize,
    pub name: String,
    pub distance: f32,
    pub correct: bool,
}

/// Top-n gallery entries for one query with match flags (rank-strip export).
pub fn rank_list(r: &RankingResult, query: usize, top_n: usize) -> Result<Vec<RankEntry>> {
    if query >= r.num_queries() {
        return Err(Error::Contract(format!(
            "query {query} out of range ({} queries)",
            r.num_queries()
        )));
    }
    if top_n > r.sorted[query].len() {
        return Err(Error::Contract(format!(
            "top_n {top_n} exceeds the {} valid gallery entries",
            r.sorted[query].len()
        )));
    }
    let ng = r.gallery_ids.len();
    Ok(r.sorted[query][..top_n]
        .iter()
        .map(|&g| RankEntry {
            gallery_index: g,
            name: r.gallery_names[g].clone(),
            distance: r.distances[query * ng + g],
            correct: r.gallery_ids[g] == r.query_ids[query],
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub ranks: Vec<usize>,
    pub cmc: Vec<f64>,
    pub map: f64,
    pub per_query_ap: Vec<Option<f64>>,
    pub excluded_queries: usize,
    pub num_queries: usize,
    pub num_gallery: usize,
}

impl MetricsReport {
    /// `key: value` lines, one metric per line.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (rk, v) in self.ranks.iter().zip(&self.cmc) {
            out.push_str(&format!("rank-{rk}: {v:.6}\n"));
        }
        out.push_str(&format!("mAP: {:.6}\n", self.map));
        out.push_str(&format!("queries: {}\n", self.num_queries));
        out.push_str(&format!("gallery: {}\n", self.num_gallery));
        out.push_str(&format!("excluded_queries: {}\n", self.excluded_queries));
        out
    }
}

/// Embeds query and gallery splits and computes the retrieval metrics.
pub fn evaluate(model: &Model, dataset: &Dataset, ranks: &[usize]) -> Result<MetricsReport> {
    let query = embed(model, &dataset.query)?;
    let gallery = embed(model, &dataset.gallery)?;
    let ranking = rank(&query, &gallery)?;
    metrics_from_ranking(&ranking, ranks)
}

pub fn metrics_from_ranking(ranking: &RankingResult, ranks: &[usize]) -> Result<MetricsReport> {
    let cmc = compute_cmc(ranking, ranks)?;
    let ap = compute_map(ranking)?;
    Ok(MetricsReport {
        ranks: ranks.to_vec(),
        cmc,
        map: ap.map,
        per_query_ap: ap.per_query,
        excluded_queries: ap.excluded,
        num_queries: ranking.num_queries(),
        num_gallery: ranking.gallery_ids.len(),
    })
}

/// Attention mass falling inside a pixel-level occlusion mask.
///
/// The token grid is mapped onto the mask by area: each token cell covers
/// `[ty*H/gh, (ty+1)*H/gh) x [tx*W/gw, (tx+1)*W/gw)` pixels and contributes
/// its attention weight scaled by the masked fraction of that cell.
pub fn attention_mass_in_mask(
    map: &[f64],
    grid: (usize, usize),
    mask: &[bool],
    mask_height: usize,
    mask_width: usize,
) -> Result<f64> {
    let (gh, gw) = grid;
    if map.len() != gh * gw {
        return Err(Error::Contract(format!(
            "attention map of {} entries does not fit grid {gh}x{gw}",
            map.len()
        )));
    }
    if mask.len() != mask_height * mask_width {
        return Err(Error::Contract(format!(
            "mask of {} entries is not {mask_height}x{mask_width}",
            mask.len()
        )));
    }
    let mut total = 0.0;
    for ty in 0..gh {
        let y0 = ty * mask_height / gh;
        let y1 = ((ty + 1) * mask_height / gh).max(y0 + 1).min(mask_height);
        for tx in 0..gw {
            let x0 = tx * mask_width / gw;
            let x1 = ((tx + 1) * mask_width / gw).max(x0 + 1).min(mask_width);
            let mut masked = 0usize;
            for y in y0..y1 {
                for x in x0..x1 {
                    if mask[y * mask_width + x] {
                        masked += 1;
                    }
                }
            }
            let cell = (y1 - y0) * (x1 - x0);
            total += map[ty * gw + tx] * masked as f64 / cell as f64;
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelVariant;
    use crate::data::{ChannelStats, ImageBuf};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_set(rows: Vec<Vec<f32>>, ids: Vec<u32>, cams: Vec<u32>) -> EmbeddedSet {
        let names = (0..rows.len()).map(|i| format!("g{i}")).collect();
        EmbeddedSet {
            features: rows,
            person_ids: ids,
            camera_ids: cams,
            names,
        }
    }

    #[test]
    fn distance_matrix_trivial_geometry() {
        let q = unit_set(vec![vec![1.0, 0.0]], vec![0], vec![0]);
        let g = unit_set(
            vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0]],
            vec![0, 1, 2],
            vec![1, 1, 1],
        );
        let d = distance_matrix(&q, &g);
        assert_relative_eq!(d[0], 0.0, epsilon = 1e-7);
        assert_relative_eq!(d[1], 2.0, epsilon = 1e-7);
        assert_relative_eq!(d[2], 1.0, epsilon = 1e-7);
    }

    /// Independent naive metrics: selection-sort ranking with the documented
    /// tie rule and per-position precision scans.
    fn naive_metrics(
        dist: &[f32],
        qids: &[u32],
        qcams: &[u32],
        gids: &[u32],
        gcams: &[u32],
        ranks: &[usize],
    ) -> (Vec<f64>, f64) {
        let ng = gids.len();
        let mut cmc_hits = vec![0usize; ranks.len()];
        let mut ap_sum = 0.0;
        let mut counted = 0usize;
        for q in 0..qids.len() {
            let mut pool: Vec<usize> = (0..ng)
                .filter(|&g| !(gids[g] == qids[q] && gcams[g] == qcams[q]))
                .collect();
            // selection sort, smallest (distance, index) first
            let mut order = Vec::with_capacity(pool.len());
            while !pool.is_empty() {
                let mut best = 0;
                for i in 1..pool.len() {
                    let (a, b) = (pool[i], pool[best]);
                    let da = dist[q * ng + a];
                    let db = dist[q * ng + b];
                    if da < db || (da == db && a < b) {
                        best = i;
                    }
                }
                order.push(pool.remove(best));
            }
            let total_relevant = order.iter().filter(|&&g| gids[g] == qids[q]).count();
            if total_relevant == 0 {
                continue;
            }
            counted += 1;
            let mut first = None;
            let mut hits = 0usize;
            let mut psum = 0.0;
            for (pos, &g) in order.iter().enumerate() {
                if gids[g] == qids[q] {
                    hits += 1;
                    psum += hits as f64 / (pos + 1) as f64;
                    if first.is_none() {
                        first = Some(pos);
                    }
                }
            }
            let first = first.unwrap();
            for (i, &rk) in ranks.iter().enumerate() {
                if first < rk {
                    cmc_hits[i] += 1;
                }
            }
            ap_sum += psum / total_relevant as f64;
        }
        (
            cmc_hits.iter().map(|&h| h as f64 / counted as f64).collect(),
            ap_sum / counted as f64,
        )
    }

    #[test]
    fn ap_formula_direct_example() {
        // 2 relevants at valid positions 1 and 3 -> AP = (1/1 + 2/3)/2
        let distances = vec![0.1, 0.2, 0.3, 0.4];
        let r = RankingResult::from_distances(
            distances,
            vec![7],
            vec![0],
            vec![7, 9, 7, 9],
            vec![1, 1, 1, 1],
            (0..4).map(|i| format!("g{i}")).collect(),
        )
        .unwrap();
        let ap = compute_map(&r).unwrap();
        assert_relative_eq!(ap.map, (1.0 + 2.0 / 3.0) / 2.0, max_relative = 1e-12);
        // both relevants first -> AP = 1
        let r = RankingResult::from_distances(
            vec![0.1, 0.2, 0.9, 0.9],
            vec![7],
            vec![0],
            vec![7, 7, 9, 9],
            vec![1, 1, 1, 1],
            (0..4).map(|i| format!("g{i}")).collect(),
        )
        .unwrap();
        assert_relative_eq!(compute_map(&r).unwrap().map, 1.0, max_relative = 1e-12);
    }

    #[test]
    fn cmc_counts_first_match_positions() {
        // first match at position 3 (0-based 2): counted at ranks >= 3 only
        let r = RankingResult::from_distances(
            vec![0.1, 0.2, 0.3],
            vec![1],
            vec![0],
            vec![2, 3, 1],
            vec![1, 1, 1],
            (0..3).map(|i| format!("g{i}")).collect(),
        )
        .unwrap();
        let cmc = compute_cmc(&r, &[1, 2, 3]).unwrap();
        assert_eq!(cmc, vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn matches_naive_oracle_on_random_matrices_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..40 {
            let nq = rng.gen_range(2..6);
            let ng = rng.gen_range(4..12);
            let qids: Vec<u32> = (0..nq).map(|_| rng.gen_range(0..4)).collect();
            let qcams: Vec<u32> = (0..nq).map(|_| rng.gen_range(0..3)).collect();
            let gids: Vec<u32> = (0..ng).map(|_| rng.gen_range(0..4)).collect();
            let gcams: Vec<u32> = (0..ng).map(|_| rng.gen_range(0..3)).collect();
            // quantized distances force ties
            let dist: Vec<f32> = (0..nq * ng).map(|_| rng.gen_range(0..8) as f32 / 8.0).collect();
            let ranks = [1usize, 5, 10];

            let Ok(r) = RankingResult::from_distances(
                dist.clone(),
                qids.clone(),
                qcams.clone(),
                gids.clone(),
                gcams.clone(),
                (0..ng).map(|i| format!("g{i}")).collect(),
            ) else {
                continue;
            };
            let (Ok(cmc), Ok(ap)) = (compute_cmc(&r, &ranks), compute_map(&r)) else {
                continue;
            };
            let (naive_cmc, naive_map) = naive_metrics(&dist, &qids, &qcams, &gids, &gcams, &ranks);
            for (a, b) in cmc.iter().zip(&naive_cmc) {
                assert!((a - b).abs() <= 1e-10, "cmc {a} vs {b}");
            }
            assert!((ap.map - naive_map).abs() <= 1e-10, "map {} vs {naive_map}", ap.map);
        }
    }

    #[test]
    fn same_id_same_camera_entries_never_contribute() {
        // the only same-id entry shares the camera: query has no relevant
        let r = RankingResult::from_distances(
            vec![0.0, 0.5],
            vec![1],
            vec![2],
            vec![1, 3],
            vec![2, 0],
            vec!["a".into(), "b".into()],
        )
        .unwrap();
        assert_eq!(r.relevant_counts, vec![0]);
        assert!(compute_cmc(&r, &[1]).is_err());
        assert!(compute_map(&r).is_err());
    }

    #[test]
    fn cmc_is_nondecreasing_in_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (nq, ng) = (6, 20);
        let dist: Vec<f32> = (0..nq * ng).map(|_| rng.gen_range(0.0..2.0)).collect();
        let r = RankingResult::from_distances(
            dist,
            (0..nq as u32).collect(),
            vec![0; nq],
            (0..ng as u32).map(|g| g % 6).collect(),
            vec![1; ng],
            (0..ng).map(|i| format!("g{i}")).collect(),
        )
        .unwrap();
        let ranks: Vec<usize> = (1..=ng).collect();
        let cmc = compute_cmc(&r, &ranks).unwrap();
        for w in cmc.windows(2) {
            assert!(w[0] <= w[1] + 1e-12);
        }
        assert!(cmc.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn ties_break_on_ascending_gallery_index() {
        let r = RankingResult::from_distances(
            vec![0.5, 0.5, 0.5],
            vec![1],
            vec![0],
            vec![9, 1, 9],
            vec![1, 1, 1],
            vec!["a".into(), "b".into(), "c".into()],
        )
        .unwrap();
        assert_eq!(r.sorted[0], vec![0, 1, 2]);
    }

    #[test]
    fn rank_list_flags_follow_identity_and_aggregate_to_cmc() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (nq, ng) = (5, 14);
        let dist: Vec<f32> = (0..nq * ng).map(|_| rng.gen_range(0.0..2.0)).collect();
        let r = RankingResult::from_distances(
            dist,
            (0..nq as u32).collect(),
            vec![0; nq],
            (0..ng as u32).map(|g| g % 5).collect(),
            vec![1; ng],
            (0..ng).map(|i| format!("g{i}")).collect(),
        )
        .unwrap();
        let top = 10;
        let mut hits = 0usize;
        for q in 0..nq {
            let list = rank_list(&r, q, top).unwrap();
            assert_eq!(list.len(), top);
            for e in &list {
                assert_eq!(e.correct, r.gallery_ids[e.gallery_index] == r.query_ids[q]);
            }
            if list.iter().any(|e| e.correct) {
                hits += 1;
            }
        }
        let cmc10 = compute_cmc(&r, &[top]).unwrap()[0];
        assert_relative_eq!(cmc10, hits as f64 / nq as f64, max_relative = 1e-12);
    }

    fn smoke_model() -> Model {
        let cfg = crate::model::tests::tiny_config(ModelVariant::Full);
        Model::init(cfg, 4, ChannelStats::identity(), 9).unwrap()
    }

    fn noisy_image(seed: u64) -> ImageBuf {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = ImageBuf::filled(16, 8, [0.5; 3]);
        for v in img.pixels.iter_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
        img
    }

    fn person(seed: u64, id: u32, cam: u32) -> PersonImage {
        PersonImage {
            image: noisy_image(seed),
            person_id: id,
            camera_id: cam,
            mask: None,
            name: format!("p{seed}"),
        }
    }

    #[test]
    fn duplicate_images_embed_identically_with_unit_norm() {
        let model = smoke_model();
        let images = vec![person(1, 0, 0), person(1, 1, 1), person(2, 2, 0)];
        let set = embed(&model, &images).unwrap();
        assert_eq!(set.features[0], set.features[1]);
        for row in &set.features {
            let norm: f32 = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6, "norm {norm}");
        }
    }

    #[test]
    fn embedding_matches_training_time_features() {
        let model = smoke_model();
        let images = vec![person(3, 0, 0)];
        let set = embed(&model, &images).unwrap();

        // training-style forward with dropout off, manually normalized
        let mut tape = Tape::<f32>::new();
        let bound = model.bind(&mut tape, true).unwrap();
        let fwd = model
            .forward_image(&mut tape, &bound, &images[0].image, &mut Dropout::Off)
            .unwrap();
        let raw = tape.value(fwd.id_feature);
        let norm: f32 = raw.iter().map(|v| v * v).sum::<f32>().sqrt();
        for (a, b) in set.features[0].iter().zip(raw) {
            assert_relative_eq!(*a, b / norm, max_relative = 1e-5, epsilon = 1e-7);
        }
    }

    #[test]
    fn attention_mass_weights_cells_by_masked_fraction() {
        // 2x2 grid over a 4x4 mask whose top-left quadrant is fully masked
        let mut mask = vec![false; 16];
        for y in 0..2 {
            for x in 0..2 {
                mask[y * 4 + x] = true;
            }
        }
        let map = vec![0.4, 0.2, 0.3, 0.1];
        let mass = attention_mass_in_mask(&map, (2, 2), &mask, 4, 4).unwrap();
        assert_relative_eq!(mass, 0.4, max_relative = 1e-12);

        // half-masked cell contributes half its weight
        let mut half = vec![false; 16];
        half[0] = true;
        half[1] = true;
        let mass = attention_mass_in_mask(&map, (2, 2), &half, 4, 4).unwrap();
        assert_relative_eq!(mass, 0.4 * 0.5, max_relative = 1e-12);
    }

    #[test]
    fn evaluate_produces_a_complete_report() {
        let model = smoke_model();
        let dataset = Dataset {
            train: vec![person(1, 0, 0), person(2, 1, 0)],
            query: vec![person(10, 0, 0), person(11, 1, 0)],
            gallery: vec![person(20, 0, 1), person(21, 1, 1), person(22, 0, 1)],
            stats: ChannelStats::identity(),
        };
        let report = evaluate(&model, &dataset, &[1, 5, 10]).unwrap();
        assert_eq!(report.cmc.len(), 3);
        assert!(report.map >= 0.0 && report.map <= 1.0);
        let text = report.render();
        for key in ["rank-1:", "rank-5:", "rank-10:", "mAP:"] {
            assert!(text.contains(key), "missing {key} in {text}");
        }
    }
}
