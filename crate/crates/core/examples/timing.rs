use std::time::Instant;

use qreid::augment::{augment_batch, standard_augment, synthetic_obstacles, SourceSample};
use qreid::autodiff::Tape;
use qreid::config::{RunConfig, TrainScheme};
use qreid::data::sampler::epoch_batches;
use qreid::data::synthetic::generate;
use qreid::losses::LossConfig;
use qreid::model::Model;
use qreid::train::{build_step_loss, MiningMode};
use qreid::transformer::Dropout;

fn main() {
    let mut cfg = RunConfig::default();
    for (k, v) in [
        ("dim", "16"),
        ("nq", "3"),
        ("heads", "2"),
        ("layers", "1"),
        ("input_height", "32"),
        ("input_width", "16"),
        ("k", "1"),
        ("epochs", "2"),
    ] {
        cfg.apply(k, v).unwrap();
    }
    for (k, v) in [("ids", "8"), ("per_id", "4"), ("height", "32"), ("width", "16")] {
        cfg.apply(&format!("synthetic.{k}"), v).unwrap();
    }

    let t0 = Instant::now();
    let spec = match &cfg.data {
        Some(qreid::config::DataSource::Synthetic(s)) => s.clone(),
        _ => unreachable!(),
    };
    let dataset = generate(&spec).unwrap();
    println!("dataset: {:.2}s", t0.elapsed().as_secs_f64());

    let t0 = Instant::now();
    let model = Model::init(cfg.model.clone(), 8, dataset.stats, 1).unwrap();
    println!("init: {:.2}s ({} params)", t0.elapsed().as_secs_f64(), model.store.total_values());

    let bank = synthetic_obstacles(8, 1);
    let batches = epoch_batches(&dataset.train, 8, 4, 1, 0).unwrap();
    let mut rng = qreid::rng::stream(1, qreid::rng::Purpose::Augment, &[0]);
    let t0 = Instant::now();
    let sources: Vec<SourceSample> = batches[0]
        .iter()
        .map(|&i| SourceSample {
            image: standard_augment(&dataset.train[i].image, &mut rng),
            person_id: dataset.train[i].person_id,
            camera_id: dataset.train[i].camera_id,
        })
        .collect();
    let samples = augment_batch(&sources, &bank, 1, &mut rng).unwrap();
    println!("augment ({} samples): {:.2}s", samples.len(), t0.elapsed().as_secs_f64());
    let labels: Vec<usize> = samples.iter().map(|s| s.person_id as usize).collect();

    let t0 = Instant::now();
    let mut tape = Tape::<f32>::new();
    let bound = model.bind(&mut tape, true).unwrap();
    println!("bind: {:.2}s", t0.elapsed().as_secs_f64());

    let t0 = Instant::now();
    let graph = build_step_loss(
        &mut tape,
        &model,
        &bound,
        TrainScheme::Full,
        &samples,
        &labels,
        &LossConfig::default(),
        &mut Dropout::Off,
        MiningMode::Online,
    )
    .unwrap();
    println!("forward+loss ({} nodes): {:.2}s", tape.len(), t0.elapsed().as_secs_f64());

    let t0 = Instant::now();
    tape.backward(graph.total).unwrap();
    println!("backward: {:.2}s", t0.elapsed().as_secs_f64());

    let t0 = Instant::now();
    let grads = bound.grads(&model.store, &tape);
    println!("collect grads: {:.2}s ({} buffers)", t0.elapsed().as_secs_f64(), grads.len());

    drop(tape);
    let t0 = Instant::now();
    let result = qreid::train::fit(&dataset, &cfg, &bank, qreid::train::FitOptions::default()).unwrap();
    println!(
        "fit ({} steps): {:.2}s",
        result.completed_steps,
        t0.elapsed().as_secs_f64()
    );
}
