//! Ablation-trend exploration harness: trains the three schemes on the
//! synthetic benchmark and prints retrieval metrics plus the
//! occlusion-query localization ratio. Knobs come from CLI args:
//!   trendlab [seeds] [epochs] [k] [nq] [dim] [lambda] [alpha] [per_id] [lr]

use qreid::augment::synthetic_obstacles;
use qreid::config::{DataSource, RunConfig, SyntheticSpec, TrainScheme};
use qreid::data::synthetic::generate;
use qreid::data::Dataset;
use qreid::eval::{self, attention_mass_in_mask};
use qreid::model::Model;
use qreid::train::{fit, FitOptions};
use qreid::transformer::Dropout;

fn build_config(seed: u64, epochs: usize, k: usize, nq: usize, dim: usize, lambda: f64, alpha: f64, per_id: usize, lr: f64, scheme: &str) -> RunConfig {
    let channels = std::env::var("TREND_CHANNELS").unwrap_or("12,24,48,96".into());
    let heads = std::env::var("TREND_HEADS").unwrap_or("4".into());
    let mut cfg = RunConfig::default();
    for (key, value) in [
        ("input_height", "48".to_string()),
        ("input_width", "24".to_string()),
        ("channels", channels),
        ("strides", "2,2,2,1".to_string()),
        ("dim", dim.to_string()),
        ("heads", heads),
        ("layers", "2".to_string()),
        ("nq", nq.to_string()),
        ("epochs", epochs.to_string()),
        ("warmup_epochs", "3".to_string()),
        ("decay_epochs", format!("{}", (epochs * 3) / 4)),
        ("base_lr", lr.to_string()),
        ("start_lr", (lr / 10.0).to_string()),
        ("k", k.to_string()),
        ("lambda", lambda.to_string()),
        ("alpha", alpha.to_string()),
        ("seed", seed.to_string()),
        ("variant", scheme.to_string()),
        ("checkpoint_every", "1000".to_string()),
    ] {
        cfg.apply(key, &value).unwrap();
    }
    cfg.data = Some(DataSource::Synthetic(SyntheticSpec {
        num_ids: 50,
        images_per_id: per_id,
        cameras: 4,
        query_per_id: 3,
        gallery_per_id: 4,
        height: 48,
        width: 24,
        train_occlusion_rate: std::env::var("TREND_TRAIN_OCC").map(|v| v.parse().unwrap()).unwrap_or(0.1),
        query_occlusion_rate: 1.0,
        gallery_occlusion_rate: 0.1,
        seed: 1234,
    }));
    cfg
}

fn localization_ratio(model: &Model, dataset: &Dataset) -> (f64, f64, f64) {
    let mut occ_mass = 0.0;
    let mut id_mass = 0.0;
    let mut count = 0usize;
    for person in dataset.query.iter() {
        let Some(mask) = &person.mask else { continue };
        let mut tape = qreid::autodiff::Tape::<f32>::new();
        let bound = model.bind(&mut tape, false).unwrap();
        let fwd = model
            .forward_image(&mut tape, &bound, &person.image, &mut Dropout::Off)
            .unwrap();
        let maps = fwd.attention.unwrap();
        let layer = maps.layers() - 1;
        let nq = maps.num_queries;
        let (h, w) = (person.image.height, person.image.width);
        let occ = attention_mass_in_mask(&maps.map(nq - 1, layer).unwrap(), maps.grid, mask, h, w).unwrap();
        let mut id_sum = 0.0;
        for q in 0..nq - 1 {
            id_sum += attention_mass_in_mask(&maps.map(q, layer).unwrap(), maps.grid, mask, h, w).unwrap();
        }
        occ_mass += occ;
        id_mass += id_sum / (nq - 1) as f64;
        count += 1;
    }
    let occ = occ_mass / count as f64;
    let id = id_mass / count as f64;
    (occ, id, occ / id)
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let get = |i: usize, default: &str| -> String { args.get(i).cloned().unwrap_or(default.to_string()) };
    let seeds: u64 = get(1, "1").parse().unwrap();
    let epochs: usize = get(2, "18").parse().unwrap();
    let k: usize = get(3, "1").parse().unwrap();
    let nq: usize = get(4, "5").parse().unwrap();
    let dim: usize = get(5, "48").parse().unwrap();
    let lambda: f64 = get(6, "1.0").parse().unwrap();
    let alpha: f64 = get(7, "1.0").parse().unwrap();
    let per_id: usize = get(8, "12").parse().unwrap();
    let lr: f64 = get(9, "0.00035").parse().unwrap();
    let query_occ: f64 = get(10, "1.0").parse().unwrap();
    let share_bank: bool = get(11, "0") == "1";

    println!("epochs={epochs} k={k} nq={nq} dim={dim} lambda={lambda} alpha={alpha} per_id={per_id} lr={lr}");
    for seed in 0..seeds {
        for scheme in ["full", "transformer", "cnn"] {
            let cfg = build_config(seed, epochs, k, nq, dim, lambda, alpha, per_id, lr, scheme);
            let spec = match &cfg.data {
                Some(DataSource::Synthetic(s)) => {
                    let mut s = s.clone();
                    s.query_occlusion_rate = query_occ;
                    s
                }
                _ => unreachable!(),
            };
            let dataset = generate(&spec).unwrap();
            let bank = if share_bank {
                qreid::data::synthetic::test_obstacles(&spec)
            } else {
                qreid::data::synthetic::train_obstacles(&spec)
            };
            let _ = synthetic_obstacles;
            let t0 = std::time::Instant::now();
            let verbose = std::env::var("TREND_VERBOSE").is_ok();
            let mut on_step = |line: &qreid::train::TraceLine| {
                if verbose && line.step % 70 == 0 {
                    eprintln!("  step {}: ce {:.1} deco {:.1} tri {:.1} rtri {:.1}", line.step, line.ce, line.decorrelation, line.triplet, line.reverse_triplet);
                }
            };
            let result = fit(&dataset, &cfg, &bank, FitOptions { on_step: Some(&mut on_step), ..Default::default() }).unwrap();
            let train_secs = t0.elapsed().as_secs_f64();
            let report = eval::evaluate(&result.model, &dataset, &[1, 5, 10]).unwrap();

            // train-split retrieval: every train image as query against the others
            let train_set = eval::embed(&result.model, &dataset.train).unwrap();
            let train_rank1 = {
                let ranking = eval::rank(&train_set, &train_set).unwrap();
                // same-camera masking removes the self-match
                eval::compute_cmc(&ranking, &[1]).unwrap()[0]
            };

            let loc = if cfg.scheme == TrainScheme::CnnBaseline {
                (0.0, 0.0, 0.0)
            } else {
                localization_ratio(&result.model, &dataset)
            };
            let last = result.trace.last().unwrap();
            println!(
                "seed {seed} {scheme:<11} rank1 {:.3} rank5 {:.3} mAP {:.3} | train-rank1 {:.3} | occ {:.3} id {:.3} ratio {:.2} | loss {:.2} | {:.0}s",
                report.cmc[0], report.cmc[1], report.map, train_rank1, loc.0, loc.1, loc.2, last.total, train_secs
            );
        }
    }
}
