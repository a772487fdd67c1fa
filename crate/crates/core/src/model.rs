//! The full re-identification model: backbone, transformer with object
//! queries, and the identity classifier head, with every parameter held in
//! a named store. The `CnnBaseline` variant swaps the transformer for global
//! average pooling over the final backbone features.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Scalar, Tape, TensorId};
use crate::backbone::{self, BackboneWeights, StageWeights};
use crate::config::{ModelConfig, ModelVariant, BACKBONE_STAGES};
use crate::data::{ChannelStats, ImageBuf};
use crate::error::{Error, Result};
use crate::params::{he_uniform, xavier_uniform, zeros, BoundParams, ParamStore};
use crate::rng::{stream, Purpose};
use crate::transformer::{
    self, AttentionMaps, AttentionParams, DecoderLayerParams, Dropout, EncoderLayerParams,
    FfnParams, LayerNormParams,
};

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub num_identities: usize,
    pub stats: ChannelStats,
    pub store: ParamStore,
}

/// Per-sample forward outputs. `id_feature` is the retrieval feature;
/// the occlusion feature, decoder outputs, and attention maps exist only
/// for the transformer variant.
pub struct SampleForward {
    pub id_feature: TensorId,
    pub occlusion_feature: Option<TensorId>,
    pub decoder_output: Option<TensorId>,
    pub attention: Option<AttentionMaps>,
    pub grid: (usize, usize),
}

impl Model {
    /// Fresh model with fan-based uniform initialization, deterministic in
    /// the seed.
    pub fn init(
        config: ModelConfig,
        num_identities: usize,
        stats: ChannelStats,
        seed: u64,
    ) -> Result<Model> {
        config.validate()?;
        if num_identities < 2 {
            return Err(Error::Config(format!(
                "classifier needs at least 2 identities, got {num_identities}"
            )));
        }
        let mut rng = stream(seed, Purpose::Init, &[]);
        let mut store = ParamStore::new();
        let rngr = &mut rng;

        let mut c_in = 3;
        for (i, (&c_out, _)) in config
            .backbone
            .channels
            .iter()
            .zip(config.backbone.strides.iter())
            .enumerate()
        {
            let fan_in = c_in * 9;
            store.add(
                &format!("backbone.stage{i}.w"),
                &[c_out, c_in, 3, 3],
                he_uniform(rngr, fan_in, c_out * c_in * 9),
            );
            store.add(&format!("backbone.stage{i}.b"), &[c_out], zeros(c_out));
            c_in = c_out;
        }

        match config.variant {
            ModelVariant::Full => {
                let d = config.dim;
                store.add(
                    "backbone.reduce.w",
                    &[d, c_in, 1, 1],
                    xavier_uniform(rngr, c_in, d, d * c_in),
                );
                store.add("backbone.reduce.b", &[d], zeros(d));

                let tokens = config.token_count()?;
                store.add("pos", &[tokens, d], xavier_uniform(rngr, tokens, d, tokens * d));
                store.add(
                    "queries",
                    &[config.num_queries, d],
                    xavier_uniform(rngr, config.num_queries, d, config.num_queries * d),
                );

                let hidden = d * config.ffn_multiplier;
                let add_attention = |store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str| {
                    for w in ["wq", "wk", "wv", "wo"] {
                        store.add(&format!("{prefix}.{w}"), &[d, d], xavier_uniform(rng, d, d, d * d));
                    }
                    for b in ["bq", "bk", "bv", "bo"] {
                        store.add(&format!("{prefix}.{b}"), &[d], zeros(d));
                    }
                };
                let add_norm = |store: &mut ParamStore, prefix: &str| {
                    store.add(&format!("{prefix}.gamma"), &[d], crate::params::ones(d));
                    store.add(&format!("{prefix}.beta"), &[d], zeros(d));
                };
                let add_ffn = |store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str| {
                    store.add(&format!("{prefix}.w1"), &[d, hidden], xavier_uniform(rng, d, hidden, d * hidden));
                    store.add(&format!("{prefix}.b1"), &[hidden], zeros(hidden));
                    store.add(&format!("{prefix}.w2"), &[hidden, d], xavier_uniform(rng, hidden, d, hidden * d));
                    store.add(&format!("{prefix}.b2"), &[d], zeros(d));
                };

                for l in 0..config.encoder_layers {
                    add_attention(&mut store, rngr, &format!("enc{l}.attn"));
                    add_norm(&mut store, &format!("enc{l}.norm1"));
                    add_ffn(&mut store, rngr, &format!("enc{l}.ffn"));
                    add_norm(&mut store, &format!("enc{l}.norm2"));
                }
                for l in 0..config.decoder_layers {
                    add_attention(&mut store, rngr, &format!("dec{l}.self"));
                    add_norm(&mut store, &format!("dec{l}.norm1"));
                    add_attention(&mut store, rngr, &format!("dec{l}.cross"));
                    add_norm(&mut store, &format!("dec{l}.norm2"));
                    add_ffn(&mut store, rngr, &format!("dec{l}.ffn"));
                    add_norm(&mut store, &format!("dec{l}.norm3"));
                }
                add_norm(&mut store, "dec.norm");
            }
            ModelVariant::CnnBaseline => {}
        }

        let feat = config.id_feature_len();
        store.add(
            "head.w",
            &[feat, num_identities],
            xavier_uniform(rngr, feat, num_identities, feat * num_identities),
        );
        store.add("head.b", &[num_identities], zeros(num_identities));

        Ok(Model { config, num_identities, stats, store })
    }

    pub fn bind<E: Scalar>(&self, tape: &mut Tape<E>, requires_grad: bool) -> Result<BoundParams> {
        self.store.bind(tape, requires_grad)
    }

    /// Normalized image as a constant graph input.
    pub fn image_leaf<E: Scalar>(&self, tape: &mut Tape<E>, image: &ImageBuf) -> Result<TensorId> {
        if image.height != self.config.input_height || image.width != self.config.input_width {
            return Err(Error::Contract(format!(
                "image is {}x{}, model expects {}x{}",
                image.height, image.width, self.config.input_height, self.config.input_width
            )));
        }
        let values: Vec<E> = image
            .normalized(&self.stats)
            .into_iter()
            .map(|v| E::from_f64(v as f64))
            .collect();
        tape.constant(&[3, image.height, image.width], values)
    }

    fn backbone_weights(&self, bound: &BoundParams) -> BackboneWeights {
        let stages = (0..BACKBONE_STAGES)
            .map(|i| StageWeights {
                w: bound.id(&self.store, &format!("backbone.stage{i}.w")),
                b: bound.id(&self.store, &format!("backbone.stage{i}.b")),
                stride: self.config.backbone.strides[i],
            })
            .collect();
        match self.config.variant {
            ModelVariant::Full => BackboneWeights {
                stages,
                reduce_w: bound.id(&self.store, "backbone.reduce.w"),
                reduce_b: bound.id(&self.store, "backbone.reduce.b"),
            },
            // the baseline never reduces; reuse stage0 ids as placeholders
            ModelVariant::CnnBaseline => BackboneWeights {
                stages,
                reduce_w: bound.id(&self.store, "backbone.stage0.w"),
                reduce_b: bound.id(&self.store, "backbone.stage0.b"),
            },
        }
    }

    fn attention_params(&self, bound: &BoundParams, prefix: &str) -> AttentionParams {
        AttentionParams {
            wq: bound.id(&self.store, &format!("{prefix}.wq")),
            bq: bound.id(&self.store, &format!("{prefix}.bq")),
            wk: bound.id(&self.store, &format!("{prefix}.wk")),
            bk: bound.id(&self.store, &format!("{prefix}.bk")),
            wv: bound.id(&self.store, &format!("{prefix}.wv")),
            bv: bound.id(&self.store, &format!("{prefix}.bv")),
            wo: bound.id(&self.store, &format!("{prefix}.wo")),
            bo: bound.id(&self.store, &format!("{prefix}.bo")),
        }
    }

    fn norm_params(&self, bound: &BoundParams, prefix: &str) -> LayerNormParams {
        LayerNormParams {
            gamma: bound.id(&self.store, &format!("{prefix}.gamma")),
            beta: bound.id(&self.store, &format!("{prefix}.beta")),
        }
    }

    fn ffn_params(&self, bound: &BoundParams, prefix: &str) -> FfnParams {
        FfnParams {
            w1: bound.id(&self.store, &format!("{prefix}.w1")),
            b1: bound.id(&self.store, &format!("{prefix}.b1")),
            w2: bound.id(&self.store, &format!("{prefix}.w2")),
            b2: bound.id(&self.store, &format!("{prefix}.b2")),
        }
    }

    pub fn query_embeddings(&self, bound: &BoundParams) -> TensorId {
        bound.id(&self.store, "queries")
    }

    /// Forward pass for one normalized image tensor already on the tape.
    pub fn forward_input<E: Scalar>(
        &self,
        tape: &mut Tape<E>,
        bound: &BoundParams,
        image: TensorId,
        dropout: &mut Dropout<'_>,
    ) -> Result<SampleForward> {
        let weights = self.backbone_weights(bound);
        match self.config.variant {
            ModelVariant::Full => {
                let fm = backbone::extract(tape, &weights, image)?;
                let pos = bound.id(&self.store, "pos");
                let queries = bound.id(&self.store, "queries");
                let enc_layers: Vec<EncoderLayerParams> = (0..self.config.encoder_layers)
                    .map(|l| EncoderLayerParams {
                        attn: self.attention_params(bound, &format!("enc{l}.attn")),
                        norm1: self.norm_params(bound, &format!("enc{l}.norm1")),
                        ffn: self.ffn_params(bound, &format!("enc{l}.ffn")),
                        norm2: self.norm_params(bound, &format!("enc{l}.norm2")),
                    })
                    .collect();
                let dec_layers: Vec<DecoderLayerParams> = (0..self.config.decoder_layers)
                    .map(|l| DecoderLayerParams {
                        self_attn: self.attention_params(bound, &format!("dec{l}.self")),
                        norm1: self.norm_params(bound, &format!("dec{l}.norm1")),
                        cross_attn: self.attention_params(bound, &format!("dec{l}.cross")),
                        norm2: self.norm_params(bound, &format!("dec{l}.norm2")),
                        ffn: self.ffn_params(bound, &format!("dec{l}.ffn")),
                        norm3: self.norm_params(bound, &format!("dec{l}.norm3")),
                    })
                    .collect();
                let final_norm = self.norm_params(bound, "dec.norm");

                let memory =
                    transformer::encode(tape, fm.tokens, pos, &enc_layers, self.config.heads, dropout)?;
                let decoded = transformer::decode(
                    tape,
                    memory,
                    pos,
                    queries,
                    &dec_layers,
                    &final_norm,
                    self.config.heads,
                    dropout,
                )?;
                let (id_feature, occlusion_feature) =
                    transformer::split_features(tape, decoded.features)?;
                let attention = AttentionMaps::from_tape(tape, &decoded.cross_attention, fm.grid)?;
                Ok(SampleForward {
                    id_feature,
                    occlusion_feature: Some(occlusion_feature),
                    decoder_output: Some(decoded.features),
                    attention: Some(attention),
                    grid: fm.grid,
                })
            }
            ModelVariant::CnnBaseline => {
                let mut x = image;
                for (i, stage) in weights.stages.iter().enumerate() {
                    x = tape.conv2d(x, stage.w, stage.b, stage.stride, 1)?;
                    if i + 1 < weights.stages.len() {
                        x = tape.relu(x);
                    }
                }
                let activated = tape.relu(x);
                let (c, grid) = match tape.shape(activated) {
                    [c, h, w] => (*c, (*h, *w)),
                    _ => unreachable!("conv output is rank-3"),
                };
                let flat = tape.flatten_spatial(activated)?;
                let hw = grid.0 * grid.1;
                let pool_w =
                    tape.constant(&[hw, 1], vec![E::from_f64(1.0 / hw as f64); hw])?;
                let pooled = tape.matmul(flat, pool_w)?;
                let id_feature = tape.reshape(pooled, &[c])?;
                Ok(SampleForward {
                    id_feature,
                    occlusion_feature: None,
                    decoder_output: None,
                    attention: None,
                    grid,
                })
            }
        }
    }

    /// Convenience: normalize, create the input leaf, and run forward.
    pub fn forward_image<E: Scalar>(
        &self,
        tape: &mut Tape<E>,
        bound: &BoundParams,
        image: &ImageBuf,
        dropout: &mut Dropout<'_>,
    ) -> Result<SampleForward> {
        let input = self.image_leaf(tape, image)?;
        self.forward_input(tape, bound, input, dropout)
    }

    /// Identity logits for a batch of stacked id features (rows).
    pub fn classify<E: Scalar>(
        &self,
        tape: &mut Tape<E>,
        bound: &BoundParams,
        features: TensorId,
    ) -> Result<TensorId> {
        let w = bound.id(&self.store, "head.w");
        let b = bound.id(&self.store, "head.b");
        let proj = tape.matmul(features, w)?;
        tape.add_bias(proj, b)
    }
}
