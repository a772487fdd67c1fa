//! The training loop: identity-balanced batches, standard then occlusion
//! augmentation, a forward pass over the expanded batch, the four losses,
//! backward, and an optimizer step — with per-step loss traces and periodic
//! checkpoints.
//!
//! Every random decision derives from `(seed, step)` so a run is a pure
//! function of dataset + configuration, and resuming from a checkpoint at
//! step `t` continues the exact same trajectory.

use std::path::Path;

use crate::augment::{
    augment_batch, mine_contrast_triplets, mine_standard_triplets, standard_augment,
    AugmentedSample, ContrastTriplet, MiningOutcome, Obstacle, SourceSample,
};
use crate::autodiff::{Scalar, Tape, TensorId};
use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, TrainScheme};
use crate::data::{sampler::epoch_batches, Dataset};
use crate::error::{Error, Result};
use crate::losses::{
    decorrelation_loss, decorrelation_loss_per_image, id_loss, reverse_triplet_loss, total_loss,
    triplet_loss, DecorrelationTarget, LossComponents, LossConfig, TripletFeatures,
};
use crate::model::Model;
use crate::optim::{lr_at, Adam};
use crate::params::BoundParams;
use crate::rng::{stream, Purpose};
use crate::transformer::Dropout;

/// One line of the tab-separated loss trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceLine {
    pub step: u64,
    pub ce: f32,
    pub decorrelation: f32,
    pub triplet: f32,
    pub reverse_triplet: f32,
    pub total: f32,
}

impl TraceLine {
    pub fn header() -> &'static str {
        "step\tce\tdecorrelation\ttriplet\treverse_triplet\ttotal"
    }

    pub fn render(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.step, self.ce, self.decorrelation, self.triplet, self.reverse_triplet, self.total
        )
    }
}

/// How triplets are chosen when building the step loss.
pub enum MiningMode<'a> {
    /// Batch-hard mining on the current features.
    Online,
    /// Caller-supplied triplets (the verification path freezes them so the
    /// loss stays differentiable around the evaluation point).
    Fixed(&'a [ContrastTriplet]),
}

pub struct StepGraph {
    pub components: LossComponents,
    pub total: TensorId,
    pub mining: MiningOutcome,
}

/// Wraps unaugmented sources as an expanded batch of originals.
pub fn wrap_originals(batch: &[SourceSample]) -> Vec<AugmentedSample> {
    batch
        .iter()
        .enumerate()
        .map(|(i, s)| AugmentedSample {
            image: s.image.clone(),
            person_id: s.person_id,
            camera_id: s.camera_id,
            obstacle: None,
            mask: vec![false; s.image.height * s.image.width],
            source_index: i,
        })
        .collect()
}

fn unit_rows_for_mining<E: Scalar>(tape: &Tape<E>, ids: &[TensorId]) -> Vec<Vec<f32>> {
    ids.iter()
        .map(|&id| {
            let row: Vec<f64> = tape.value(id).iter().map(|v| v.to_f64()).collect();
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row.into_iter().map(|v| (v / norm) as f32).collect()
        })
        .collect()
}

/// Builds the full training objective for one expanded batch on the tape.
/// This is the exact graph the optimizer sees; the gradient verification
/// battery calls it too.
#[allow(clippy::too_many_arguments)]
pub fn build_step_loss<E: Scalar>(
    tape: &mut Tape<E>,
    model: &Model,
    bound: &BoundParams,
    scheme: TrainScheme,
    samples: &[AugmentedSample],
    labels: &[usize],
    loss_cfg: &LossConfig,
    dropout: &mut Dropout<'_>,
    mining: MiningMode<'_>,
) -> Result<StepGraph> {
    if samples.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    if samples.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} samples with {} labels",
            samples.len(),
            labels.len()
        )));
    }

    let mut id_features = Vec::with_capacity(samples.len());
    let mut occlusion_features = Vec::with_capacity(samples.len());
    let mut decoder_outputs = Vec::with_capacity(samples.len());
    for sample in samples {
        let fwd = model.forward_image(tape, bound, &sample.image, dropout)?;
        id_features.push(fwd.id_feature);
        if let Some(occ) = fwd.occlusion_feature {
            occlusion_features.push(occ);
        }
        if let Some(dec) = fwd.decoder_output {
            decoder_outputs.push(dec);
        }
    }

    // identity loss over the expanded batch
    let feat_len = model.config.id_feature_len();
    let rows: Vec<TensorId> = id_features
        .iter()
        .map(|&f| tape.reshape(f, &[1, feat_len]))
        .collect::<Result<_>>()?;
    let stacked = tape.concat(&rows, 0)?;
    let logits = model.classify(tape, bound, stacked)?;
    let ce = id_loss(tape, logits, labels, loss_cfg.epsilon, loss_cfg.reduction)?;

    // query decorrelation
    let deco = if scheme.uses_decorrelation() {
        match loss_cfg.decorrelation_target {
            DecorrelationTarget::SharedQueries => {
                let queries = model.query_embeddings(bound);
                decorrelation_loss(tape, queries, loss_cfg.alpha, samples.len())?
            }
            DecorrelationTarget::DecoderOutputs => {
                decorrelation_loss_per_image(tape, &decoder_outputs, loss_cfg.alpha)?
            }
        }
    } else {
        tape.scalar(E::zero())
    };

    // triplets on the current features
    let outcome = match mining {
        MiningMode::Fixed(triplets) => MiningOutcome {
            triplets: triplets.to_vec(),
            skipped: 0,
        },
        MiningMode::Online => {
            let feats = unit_rows_for_mining(tape, &id_features);
            if scheme.uses_contrast_feature_learning() {
                mine_contrast_triplets(samples, &feats)?
            } else {
                let ids: Vec<u32> = samples.iter().map(|s| s.person_id).collect();
                mine_standard_triplets(&ids, &feats)?
            }
        }
    };
    let id_trios: Vec<TripletFeatures> = outcome
        .triplets
        .iter()
        .map(|t| TripletFeatures {
            anchor: id_features[t.anchor],
            positive: id_features[t.positive],
            negative: id_features[t.negative],
        })
        .collect();
    let tri = triplet_loss(tape, &id_trios, loss_cfg.margin, loss_cfg.reduction)?;

    // reverse triplets in the occlusion embedding space
    let rtri = if scheme.uses_contrast_feature_learning() && !occlusion_features.is_empty() {
        let occ_trios: Vec<TripletFeatures> = outcome
            .triplets
            .iter()
            .map(|t| TripletFeatures {
                anchor: occlusion_features[t.anchor],
                positive: occlusion_features[t.positive],
                negative: occlusion_features[t.negative],
            })
            .collect();
        reverse_triplet_loss(tape, &occ_trios, loss_cfg.margin, loss_cfg.reduction)?
    } else {
        tape.scalar(E::zero())
    };

    let components = LossComponents {
        id: ce,
        decorrelation: deco,
        triplet: tri,
        reverse_triplet: rtri,
    };
    let total = total_loss(tape, components, loss_cfg.lambda)?;
    Ok(StepGraph {
        components,
        total,
        mining: outcome,
    })
}

#[derive(Default)]
pub struct FitOptions<'a> {
    pub resume: Option<&'a Checkpoint>,
    /// Stop after this many completed steps (for mid-run checkpoint tests
    /// and smoke runs); `None` trains the configured epochs.
    pub stop_after_steps: Option<u64>,
    /// Directory that receives `checkpoint.bin` periodically and at the end.
    pub checkpoint_dir: Option<&'a Path>,
    pub on_step: Option<&'a mut dyn FnMut(&TraceLine)>,
}

pub struct FitResult {
    pub model: Model,
    pub adam: Adam,
    /// Trace lines for the steps executed by this call.
    pub trace: Vec<TraceLine>,
    pub completed_steps: u64,
    pub steps_per_epoch: usize,
    pub skipped_anchors: u64,
}

/// Trains per the configured scheme. Resuming from a checkpoint at step `t`
/// and running to the end reproduces the uninterrupted run bit-exactly.
pub fn fit(
    dataset: &Dataset,
    config: &RunConfig,
    bank: &[Obstacle],
    mut options: FitOptions<'_>,
) -> Result<FitResult> {
    config.validate()?;
    let label_map = dataset.label_map();
    let num_identities = label_map.len();

    let (mut model, mut adam) = match options.resume {
        Some(ck) => {
            let model = ck.restore_model()?;
            let adam = ck.restore_adam(&model.store)?;
            (model, adam)
        }
        None => {
            let model = Model::init(
                config.model.clone(),
                num_identities,
                dataset.stats,
                config.seed,
            )?;
            let adam = Adam::new(&model.store, &config.train);
            (model, adam)
        }
    };

    let train_cfg = &config.train;
    let steps_per_epoch = epoch_batches(
        &dataset.train,
        train_cfg.batch_ids,
        train_cfg.images_per_id,
        config.seed,
        0,
    )?
    .len();
    let total_steps = (train_cfg.epochs * steps_per_epoch) as u64;
    let start_step = options.resume.map_or(0, |ck| ck.step);
    let stop_step = options
        .stop_after_steps
        .map_or(total_steps, |n| (start_step + n).min(total_steps));

    let mut trace = Vec::new();
    let mut skipped_anchors = 0u64;
    let mut cached_epoch = u64::MAX;
    let mut batches: Vec<Vec<usize>> = Vec::new();

    let mut step = start_step;
    while step < stop_step {
        let epoch_idx = step / steps_per_epoch as u64;
        let batch_idx = (step % steps_per_epoch as u64) as usize;
        if epoch_idx != cached_epoch {
            batches = epoch_batches(
                &dataset.train,
                train_cfg.batch_ids,
                train_cfg.images_per_id,
                config.seed,
                epoch_idx,
            )?;
            cached_epoch = epoch_idx;
        }
        let lr = lr_at(epoch_idx as usize + 1, train_cfg);

        let mut aug_rng = stream(config.seed, Purpose::Augment, &[step]);
        let sources: Vec<SourceSample> = batches[batch_idx]
            .iter()
            .map(|&i| {
                let person = &dataset.train[i];
                SourceSample {
                    image: standard_augment(&person.image, &mut aug_rng),
                    person_id: person.person_id,
                    camera_id: person.camera_id,
                }
            })
            .collect();
        let samples = if config.scheme.uses_occlusion_augmentation() {
            augment_batch(&sources, bank, train_cfg.obstacles_per_batch, &mut aug_rng)?
        } else {
            wrap_originals(&sources)
        };
        let labels: Vec<usize> = samples.iter().map(|s| label_map[&s.person_id]).collect();

        let mut dropout_rng = stream(config.seed, Purpose::Dropout, &[step]);
        let line = {
            let mut tape = Tape::<f32>::new();
            let bound = model.bind(&mut tape, true)?;
            let mut dropout = if model.config.dropout > 0.0 {
                Dropout::On {
                    p: model.config.dropout,
                    rng: &mut dropout_rng,
                }
            } else {
                Dropout::Off
            };
            let graph = build_step_loss(
                &mut tape,
                &model,
                &bound,
                config.scheme,
                &samples,
                &labels,
                &train_cfg.loss,
                &mut dropout,
                MiningMode::Online,
            )?;
            let total = tape.value(graph.total)[0];
            if !total.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss {total} at step {step}; last checkpoint retained"
                )));
            }
            tape.backward(graph.total)?;
            let grads = bound.grads(&model.store, &tape);
            skipped_anchors += graph.mining.skipped as u64;
            let line = TraceLine {
                step,
                ce: tape.value(graph.components.id)[0],
                decorrelation: tape.value(graph.components.decorrelation)[0],
                triplet: tape.value(graph.components.triplet)[0],
                reverse_triplet: tape.value(graph.components.reverse_triplet)[0],
                total,
            };
            adam.step(&mut model.store, &grads, lr)?;
            line
        };
        if let Some(cb) = options.on_step.as_deref_mut() {
            cb(&line);
        }
        trace.push(line);
        step += 1;

        // checkpoint at epoch boundaries per the configured cadence
        let end_of_epoch = step % steps_per_epoch as u64 == 0;
        if end_of_epoch {
            let finished_epoch = (step / steps_per_epoch as u64) as usize;
            let due = finished_epoch % train_cfg.checkpoint_every.max(1) == 0
                || finished_epoch == train_cfg.epochs;
            if due {
                if let Some(dir) = options.checkpoint_dir {
                    Checkpoint::capture(&model, &adam, config, step).save(&dir.join("checkpoint.bin"))?;
                }
            }
        }
    }

    if let Some(dir) = options.checkpoint_dir {
        Checkpoint::capture(&model, &adam, config, step).save(&dir.join("checkpoint.bin"))?;
    }
    Ok(FitResult {
        model,
        adam,
        trace,
        completed_steps: step,
        steps_per_epoch,
        skipped_anchors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::synthetic_obstacles;
    use crate::config::SyntheticSpec;
    use crate::data::synthetic::generate;

    pub(crate) fn tiny_run_config(epochs: usize) -> RunConfig {
        let mut config = RunConfig::default();
        for (k, v) in [
            ("dim", "6"),
            ("nq", "3"),
            ("heads", "2"),
            ("layers", "1"),
            ("input_height", "16"),
            ("input_width", "8"),
            ("channels", "4,6,8,10"),
            ("strides", "2,2,1,1"),
            ("ffn_multiplier", "2"),
            ("batch_ids", "2"),
            ("images_per_id", "2"),
            ("k", "1"),
            ("warmup_epochs", "2"),
            ("decay_epochs", ""),
            ("seed", "5"),
        ] {
            config.apply(k, v).unwrap();
        }
        config.train.epochs = epochs;
        config
    }

    fn tiny_dataset() -> Dataset {
        let spec = SyntheticSpec {
            num_ids: 4,
            images_per_id: 3,
            cameras: 4,
            query_per_id: 1,
            gallery_per_id: 1,
            height: 16,
            width: 8,
            train_occlusion_rate: 0.1,
            query_occlusion_rate: 1.0,
            gallery_occlusion_rate: 0.0,
            seed: 3,
        };
        generate(&spec).unwrap()
    }

    #[test]
    fn one_epoch_smoke_run_produces_finite_losses() {
        let dataset = tiny_dataset();
        let config = tiny_run_config(1);
        let bank = synthetic_obstacles(4, 17);
        let result = fit(&dataset, &config, &bank, FitOptions::default()).unwrap();
        assert_eq!(result.trace.len(), result.steps_per_epoch);
        for line in &result.trace {
            assert!(line.total.is_finite());
            assert!(line.ce >= 0.0 && line.decorrelation >= 0.0);
            assert!(line.triplet >= 0.0 && line.reverse_triplet >= 0.0);
            assert!(
                (line.ce + line.decorrelation + line.triplet
                    + config.train.loss.lambda as f32 * line.reverse_triplet
                    - line.total)
                    .abs()
                    < 1e-3
            );
        }
    }

    #[test]
    fn traces_are_bit_identical_across_runs() {
        let dataset = tiny_dataset();
        let config = tiny_run_config(2);
        let bank = synthetic_obstacles(4, 17);
        let a = fit(&dataset, &config, &bank, FitOptions::default()).unwrap();
        let b = fit(&dataset, &config, &bank, FitOptions::default()).unwrap();
        let render = |r: &FitResult| {
            r.trace
                .iter()
                .map(TraceLine::render)
                .collect::<Vec<_>>()
                .join("\n")
        };
        assert_eq!(render(&a), render(&b));
        for i in 0..a.model.store.len() {
            assert_eq!(a.model.store.values(i), b.model.store.values(i));
        }
    }

    #[test]
    fn resumed_run_matches_uninterrupted_run_bit_exactly() {
        let dataset = tiny_dataset();
        let config = tiny_run_config(3);
        let bank = synthetic_obstacles(4, 17);

        let full = fit(&dataset, &config, &bank, FitOptions::default()).unwrap();

        let partial = fit(
            &dataset,
            &config,
            &bank,
            FitOptions {
                stop_after_steps: Some(3),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(partial.completed_steps, 3);
        let ck = Checkpoint::capture(&partial.model, &partial.adam, &config, 3);
        let resumed = fit(
            &dataset,
            &config,
            &bank,
            FitOptions {
                resume: Some(&ck),
                ..Default::default()
            },
        )
        .unwrap();

        assert_eq!(
            partial.trace.len() + resumed.trace.len(),
            full.trace.len(),
            "split runs must cover the same steps"
        );
        for (a, b) in full.trace.iter().zip(partial.trace.iter().chain(&resumed.trace)) {
            assert_eq!(a.render(), b.render(), "trace diverged at step {}", a.step);
        }
        for i in 0..full.model.store.len() {
            assert_eq!(
                full.model.store.values(i),
                resumed.model.store.values(i),
                "parameter {} diverged",
                full.model.store.name(i)
            );
        }
        assert_eq!(full.adam.t, resumed.adam.t);
    }

    #[test]
    fn ablation_schemes_build_without_reverse_or_contrast_terms() {
        let dataset = tiny_dataset();
        let bank = synthetic_obstacles(4, 17);
        for (scheme, expect_rtri) in [
            (TrainScheme::TransformerOnly, false),
            (TrainScheme::CnnBaseline, false),
            (TrainScheme::Full, true),
        ] {
            let mut config = tiny_run_config(1);
            config.apply("variant", scheme.name()).unwrap();
            let result = fit(&dataset, &config, &bank, FitOptions::default()).unwrap();
            let has_rtri = result.trace.iter().any(|l| l.reverse_triplet != 0.0);
            assert_eq!(has_rtri, expect_rtri, "scheme {}", scheme.name());
            if scheme == TrainScheme::CnnBaseline {
                assert!(result.trace.iter().all(|l| l.decorrelation == 0.0));
            }
        }
    }
}
