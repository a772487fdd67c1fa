//! Run configuration: model dimensions, training schedule, synthetic-data
//! parameters, and the plain-text `key=value` config file format.
//!
//! Defaults follow the reference training recipe (hidden dim 256, 2+2
//! transformer layers, 8 heads, 9 object queries, warmup to 3.5e-4 with 0.1x
//! decays at epochs 40 and 70, batches of 8 identities x 4 images).

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::autodiff::conv_out_extent;
use crate::error::{Error, Result};
use crate::losses::{DecorrelationTarget, LossConfig, Reduction};

pub const BACKBONE_STAGES: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    /// Output channels of the four 3x3 conv stages.
    pub channels: [usize; BACKBONE_STAGES],
    /// Stride plan; the final down-sampling is removed by default to keep a
    /// larger token grid.
    pub strides: [usize; BACKBONE_STAGES],
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            // Final width stays above the reduced dim so the 1x1 reduction
            // actually reduces.
            channels: [32, 64, 128, 512],
            strides: [2, 2, 2, 1],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelVariant {
    /// Backbone + transformer with query disentanglement.
    Full,
    /// Backbone + global average pooling (no transformer).
    CnnBaseline,
}

/// Which training pipeline to run. The ablation schemes exist for trend
/// comparisons against the full method.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainScheme {
    /// Occlusion augmentation + contrast feature learning + all four losses.
    Full,
    /// Transformer architecture, identity/triplet/decorrelation losses only
    /// (no occlusion augmentation, no contrast or reverse triplets).
    TransformerOnly,
    /// Pooled CNN baseline with identity + triplet losses.
    CnnBaseline,
}

impl TrainScheme {
    pub fn name(self) -> &'static str {
        match self {
            TrainScheme::Full => "full",
            TrainScheme::TransformerOnly => "transformer",
            TrainScheme::CnnBaseline => "cnn",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(TrainScheme::Full),
            "transformer" => Ok(TrainScheme::TransformerOnly),
            "cnn" => Ok(TrainScheme::CnnBaseline),
            other => Err(Error::Config(format!("unknown training scheme `{other}`"))),
        }
    }

    pub fn model_variant(self) -> ModelVariant {
        match self {
            TrainScheme::CnnBaseline => ModelVariant::CnnBaseline,
            _ => ModelVariant::Full,
        }
    }

    pub fn uses_occlusion_augmentation(self) -> bool {
        matches!(self, TrainScheme::Full)
    }

    pub fn uses_contrast_feature_learning(self) -> bool {
        matches!(self, TrainScheme::Full)
    }

    pub fn uses_decorrelation(self) -> bool {
        !matches!(self, TrainScheme::CnnBaseline)
    }
}

impl ModelVariant {
    pub fn name(self) -> &'static str {
        match self {
            ModelVariant::Full => "full",
            ModelVariant::CnnBaseline => "cnn",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(ModelVariant::Full),
            "cnn" => Ok(ModelVariant::CnnBaseline),
            other => Err(Error::Config(format!("unknown model variant `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub backbone: BackboneConfig,
    /// Token dimension after the 1x1 reduction.
    pub dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    /// Object queries: `num_queries - 1` identity queries plus one occlusion
    /// query.
    pub num_queries: usize,
    /// Feed-forward hidden width as a multiple of `dim`.
    pub ffn_multiplier: usize,
    pub dropout: f64,
    pub variant: ModelVariant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_height: 256,
            input_width: 128,
            backbone: BackboneConfig::default(),
            dim: 256,
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 8,
            num_queries: 9,
            ffn_multiplier: 4,
            dropout: 0.1,
            variant: ModelVariant::Full,
        }
    }
}

impl ModelConfig {
    /// Spatial extents of the token grid produced by the backbone.
    pub fn token_grid(&self) -> Result<(usize, usize)> {
        let mut h = self.input_height;
        let mut w = self.input_width;
        for (i, &s) in self.backbone.strides.iter().enumerate() {
            h = conv_out_extent(h, 3, s, 1).ok_or_else(|| {
                Error::Config(format!("stage {i} collapses height {h} below the 3x3 kernel"))
            })?;
            w = conv_out_extent(w, 3, s, 1).ok_or_else(|| {
                Error::Config(format!("stage {i} collapses width {w} below the 3x3 kernel"))
            })?;
        }
        if h < 2 || w < 2 {
            return Err(Error::Config(format!(
                "token grid {h}x{w} is degenerate; need at least 2x2"
            )));
        }
        Ok((h, w))
    }

    pub fn token_count(&self) -> Result<usize> {
        let (h, w) = self.token_grid()?;
        Ok(h * w)
    }

    pub fn id_feature_len(&self) -> usize {
        match self.variant {
            ModelVariant::Full => (self.num_queries - 1) * self.dim,
            ModelVariant::CnnBaseline => self.backbone.channels[BACKBONE_STAGES - 1],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let final_channels = self.backbone.channels[BACKBONE_STAGES - 1];
        if self.dim >= final_channels {
            return Err(Error::Config(format!(
                "reduced dim {} must be smaller than the final backbone width {final_channels}",
                self.dim
            )));
        }
        if self.backbone.channels.iter().any(|&c| c == 0) || self.backbone.strides.iter().any(|&s| s == 0) {
            return Err(Error::Config("backbone channels and strides must be positive".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.num_queries < 2 {
            return Err(Error::Config(format!(
                "need at least one identity query and one occlusion query, got num_queries {}",
                self.num_queries
            )));
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 {
            return Err(Error::Config("encoder and decoder need at least one layer".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        self.token_grid()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub start_lr: f64,
    pub base_lr: f64,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Identities per batch (P).
    pub batch_ids: usize,
    /// Images per identity (K).
    pub images_per_id: usize,
    /// Obstacles composited per batch (k).
    pub obstacles_per_batch: usize,
    /// Epochs between checkpoints; the final epoch always checkpoints.
    pub checkpoint_every: usize,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 80,
            warmup_epochs: 10,
            start_lr: 3.5e-5,
            base_lr: 3.5e-4,
            decay_epochs: vec![40, 70],
            decay_factor: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            batch_ids: 8,
            images_per_id: 4,
            obstacles_per_batch: 2,
            checkpoint_every: 20,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.start_lr > self.base_lr {
            return Err(Error::Config(format!(
                "start lr {} exceeds base lr {}",
                self.start_lr, self.base_lr
            )));
        }
        for &e in &self.decay_epochs {
            if e < 1 || e > self.epochs {
                return Err(Error::Config(format!(
                    "decay epoch {e} outside 1..={}",
                    self.epochs
                )));
            }
        }
        if self.batch_ids < 2 || self.images_per_id < 1 {
            return Err(Error::Config(format!(
                "PK sampling needs at least 2 identities and 1 image per id, got {}x{}",
                self.batch_ids, self.images_per_id
            )));
        }
        if self.obstacles_per_batch == 0 {
            return Err(Error::Config("obstacles_per_batch must be at least 1".into()));
        }
        self.loss.validate()
    }
}

/// Parameters of the built-in sprite dataset generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_ids: usize,
    pub images_per_id: usize,
    pub cameras: usize,
    pub query_per_id: usize,
    pub gallery_per_id: usize,
    pub height: usize,
    pub width: usize,
    /// Fraction of train images carrying a natural occlusion (drawn from the
    /// train-obstacle pool, the one augmentation also samples from).
    pub train_occlusion_rate: f64,
    /// Fraction of query images composited with a held-out obstacle.
    pub query_occlusion_rate: f64,
    pub gallery_occlusion_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_ids: 16,
            images_per_id: 8,
            cameras: 4,
            query_per_id: 2,
            gallery_per_id: 4,
            height: 256,
            width: 128,
            train_occlusion_rate: 0.1,
            query_occlusion_rate: 1.0,
            gallery_occlusion_rate: 0.1,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_ids < 2 || self.images_per_id < 2 {
            return Err(Error::Config(format!(
                "synthetic spec needs >=2 ids with >=2 images each, got {}x{}",
                self.num_ids, self.images_per_id
            )));
        }
        if self.cameras < 2 {
            return Err(Error::Config("synthetic spec needs >=2 cameras".into()));
        }
        if self.height < 16 || self.width < 8 {
            return Err(Error::Config(format!(
                "synthetic resolution {}x{} is too small",
                self.height, self.width
            )));
        }
        for rate in [self.train_occlusion_rate, self.query_occlusion_rate, self.gallery_occlusion_rate] {
            if !(0.0..=1.0).contains(&rate) {
                return Err(Error::Config(format!("occlusion rate {rate} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// Directory with `train/`, `query/`, `gallery/` subfolders.
    Directory(std::path::PathBuf),
    Synthetic(SyntheticSpec),
}

/// Everything a command needs: merged from defaults, then a config file,
/// then flags.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: Option<DataSource>,
    pub scheme: TrainScheme,
    /// Extra obstacle patches (RGBA files) for the occlusion augmentation;
    /// when empty, a synthetic obstacle bank is generated.
    pub obstacle_dir: Option<std::path::PathBuf>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seed: u64,
    pub eval_ranks: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: None,
            scheme: TrainScheme::Full,
            obstacle_dir: None,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            seed: 0,
            eval_ranks: vec![1, 5, 10],
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|tok| parse_num(key, tok.trim()))
        .collect()
}

impl RunConfig {
    /// Applies one `key=value` assignment. Used both by the config-file
    /// parser and by flag overrides, so precedence is just application order.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "data" => self.data = Some(DataSource::Directory(value.into())),
            "obstacles" => self.obstacle_dir = Some(value.into()),
            "seed" => self.seed = parse_num(key, value)?,
            "eval_ranks" => self.eval_ranks = parse_list(key, value)?,

            "dim" => self.model.dim = parse_num(key, value)?,
            "nq" => self.model.num_queries = parse_num(key, value)?,
            "heads" => self.model.heads = parse_num(key, value)?,
            "layers" => {
                let n = parse_num(key, value)?;
                self.model.encoder_layers = n;
                self.model.decoder_layers = n;
            }
            "encoder_layers" => self.model.encoder_layers = parse_num(key, value)?,
            "decoder_layers" => self.model.decoder_layers = parse_num(key, value)?,
            "input_height" => self.model.input_height = parse_num(key, value)?,
            "input_width" => self.model.input_width = parse_num(key, value)?,
            "dropout" => self.model.dropout = parse_num(key, value)?,
            "ffn_multiplier" => self.model.ffn_multiplier = parse_num(key, value)?,
            "variant" => {
                self.scheme = TrainScheme::parse(value)?;
                self.model.variant = self.scheme.model_variant();
            }
            "channels" => {
                let list = parse_list(key, value)?;
                let arr: [usize; BACKBONE_STAGES] = list.try_into().map_err(|_| {
                    Error::Config(format!("`channels` needs {BACKBONE_STAGES} entries"))
                })?;
                self.model.backbone.channels = arr;
            }
            "strides" => {
                let list = parse_list(key, value)?;
                let arr: [usize; BACKBONE_STAGES] = list.try_into().map_err(|_| {
                    Error::Config(format!("`strides` needs {BACKBONE_STAGES} entries"))
                })?;
                self.model.backbone.strides = arr;
            }

            "epochs" => {
                self.train.epochs = parse_num(key, value)?;
                // decays past the new horizon would never fire
                let epochs = self.train.epochs;
                self.train.decay_epochs.retain(|&e| e <= epochs);
            }
            "warmup_epochs" => self.train.warmup_epochs = parse_num(key, value)?,
            "start_lr" => self.train.start_lr = parse_num(key, value)?,
            "base_lr" => self.train.base_lr = parse_num(key, value)?,
            "decay_epochs" => self.train.decay_epochs = parse_list(key, value)?,
            "decay_factor" => self.train.decay_factor = parse_num(key, value)?,
            "weight_decay" => self.train.weight_decay = parse_num(key, value)?,
            "batch_ids" => self.train.batch_ids = parse_num(key, value)?,
            "images_per_id" => self.train.images_per_id = parse_num(key, value)?,
            "k" => self.train.obstacles_per_batch = parse_num(key, value)?,
            "checkpoint_every" => self.train.checkpoint_every = parse_num(key, value)?,

            "epsilon" => self.train.loss.epsilon = parse_num(key, value)?,
            "alpha" => self.train.loss.alpha = parse_num(key, value)?,
            "margin" => self.train.loss.margin = parse_num(key, value)?,
            "lambda" => self.train.loss.lambda = parse_num(key, value)?,
            "reduction" => {
                self.train.loss.reduction = match value {
                    "sum" => Reduction::Sum,
                    "mean" => Reduction::Mean,
                    other => return Err(Error::Config(format!("unknown reduction `{other}`"))),
                }
            }
            "decorrelation_target" => {
                self.train.loss.decorrelation_target = match value {
                    "shared" => DecorrelationTarget::SharedQueries,
                    "per_image" => DecorrelationTarget::DecoderOutputs,
                    other => {
                        return Err(Error::Config(format!("unknown decorrelation target `{other}`")))
                    }
                }
            }

            _ if key.starts_with("synthetic.") => {
                let spec = match &mut self.data {
                    Some(DataSource::Synthetic(spec)) => spec,
                    _ => {
                        self.data = Some(DataSource::Synthetic(SyntheticSpec::default()));
                        match &mut self.data {
                            Some(DataSource::Synthetic(spec)) => spec,
                            _ => unreachable!(),
                        }
                    }
                };
                apply_synthetic(spec, &key["synthetic.".len()..], value)?;
            }
            other => return Err(Error::Config(format!("unknown configuration key `{other}`"))),
        }
        Ok(())
    }

    /// Parses config-file text: one `key=value` per line, `#` comments.
    pub fn apply_file(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got `{line}`", lineno + 1))
            })?;
            self.apply(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if let Some(DataSource::Synthetic(spec)) = &self.data {
            spec.validate()?;
        }
        if self.eval_ranks.is_empty() {
            return Err(Error::Config("eval_ranks must not be empty".into()));
        }
        Ok(())
    }

    /// Effective configuration as config-file text; written next to run
    /// outputs and echoed by the CLI.
    pub fn render(&self) -> String {
        let mut kv = BTreeMap::new();
        match &self.data {
            Some(DataSource::Directory(p)) => {
                kv.insert("data".to_string(), p.display().to_string());
            }
            Some(DataSource::Synthetic(s)) => {
                kv.insert("synthetic.ids".into(), s.num_ids.to_string());
                kv.insert("synthetic.per_id".into(), s.images_per_id.to_string());
                kv.insert("synthetic.cameras".into(), s.cameras.to_string());
                kv.insert("synthetic.query_per_id".into(), s.query_per_id.to_string());
                kv.insert("synthetic.gallery_per_id".into(), s.gallery_per_id.to_string());
                kv.insert("synthetic.train_occlusion".into(), s.train_occlusion_rate.to_string());
                kv.insert("synthetic.query_occlusion".into(), s.query_occlusion_rate.to_string());
                kv.insert("synthetic.gallery_occlusion".into(), s.gallery_occlusion_rate.to_string());
                kv.insert("synthetic.seed".into(), s.seed.to_string());
            }
            None => {}
        }
        if let Some(dir) = &self.obstacle_dir {
            kv.insert("obstacles".into(), dir.display().to_string());
        }
        kv.insert("seed".into(), self.seed.to_string());
        kv.insert("eval_ranks".into(), join(&self.eval_ranks));

        kv.insert("dim".into(), self.model.dim.to_string());
        kv.insert("nq".into(), self.model.num_queries.to_string());
        kv.insert("heads".into(), self.model.heads.to_string());
        kv.insert("encoder_layers".into(), self.model.encoder_layers.to_string());
        kv.insert("decoder_layers".into(), self.model.decoder_layers.to_string());
        kv.insert("input_height".into(), self.model.input_height.to_string());
        kv.insert("input_width".into(), self.model.input_width.to_string());
        kv.insert("dropout".into(), self.model.dropout.to_string());
        kv.insert("ffn_multiplier".into(), self.model.ffn_multiplier.to_string());
        kv.insert("variant".into(), self.scheme.name().to_string());
        kv.insert("channels".into(), join(&self.model.backbone.channels));
        kv.insert("strides".into(), join(&self.model.backbone.strides));

        kv.insert("epochs".into(), self.train.epochs.to_string());
        kv.insert("warmup_epochs".into(), self.train.warmup_epochs.to_string());
        kv.insert("start_lr".into(), self.train.start_lr.to_string());
        kv.insert("base_lr".into(), self.train.base_lr.to_string());
        kv.insert("decay_epochs".into(), join(&self.train.decay_epochs));
        kv.insert("decay_factor".into(), self.train.decay_factor.to_string());
        kv.insert("weight_decay".into(), self.train.weight_decay.to_string());
        kv.insert("batch_ids".into(), self.train.batch_ids.to_string());
        kv.insert("images_per_id".into(), self.train.images_per_id.to_string());
        kv.insert("k".into(), self.train.obstacles_per_batch.to_string());
        kv.insert("checkpoint_every".into(), self.train.checkpoint_every.to_string());

        kv.insert("epsilon".into(), self.train.loss.epsilon.to_string());
        kv.insert("alpha".into(), self.train.loss.alpha.to_string());
        kv.insert("margin".into(), self.train.loss.margin.to_string());
        kv.insert("lambda".into(), self.train.loss.lambda.to_string());
        kv.insert(
            "reduction".into(),
            match self.train.loss.reduction {
                Reduction::Sum => "sum",
                Reduction::Mean => "mean",
            }
            .to_string(),
        );
        kv.insert(
            "decorrelation_target".into(),
            match self.train.loss.decorrelation_target {
                DecorrelationTarget::SharedQueries => "shared",
                DecorrelationTarget::DecoderOutputs => "per_image",
            }
            .to_string(),
        );

        let mut out = String::new();
        for (k, v) in kv {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }
}

fn apply_synthetic(spec: &mut SyntheticSpec, key: &str, value: &str) -> Result<()> {
    match key {
        "ids" => spec.num_ids = parse_num(key, value)?,
        "per_id" => spec.images_per_id = parse_num(key, value)?,
        "cameras" => spec.cameras = parse_num(key, value)?,
        "query_per_id" => spec.query_per_id = parse_num(key, value)?,
        "gallery_per_id" => spec.gallery_per_id = parse_num(key, value)?,
        "height" | "width" => {
            return Err(Error::Config(
                "the synthetic set renders at the model input resolution; set `input_height`/`input_width`".into(),
            ))
        }
        "train_occlusion" => spec.train_occlusion_rate = parse_num(key, value)?,
        "query_occlusion" => spec.query_occlusion_rate = parse_num(key, value)?,
        "gallery_occlusion" => spec.gallery_occlusion_rate = parse_num(key, value)?,
        "seed" => spec.seed = parse_num(key, value)?,
        other => return Err(Error::Config(format!("unknown synthetic key `{other}`"))),
    }
    Ok(())
}

fn join<T: std::fmt::Display>(items: &[T]) -> String {
    items
        .iter()
        .map(T::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_recipe() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.model.dim, 256);
        assert_eq!(cfg.model.num_queries, 9);
        assert_eq!(cfg.model.heads, 8);
        assert_eq!(cfg.model.encoder_layers, 2);
        assert_eq!(cfg.model.decoder_layers, 2);
        assert_eq!((cfg.model.input_height, cfg.model.input_width), (256, 128));
        assert_eq!(cfg.train.base_lr, 3.5e-4);
        assert_eq!(cfg.train.start_lr, 3.5e-5);
        assert_eq!(cfg.train.decay_epochs, vec![40, 70]);
        assert_eq!(cfg.train.batch_ids * cfg.train.images_per_id, 32);
        assert_eq!(cfg.train.loss.epsilon, 0.1);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn default_token_grid_has_512_tokens() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.token_grid().unwrap(), (32, 16));
    }

    #[test]
    fn kv_round_trip_preserves_config() {
        let mut cfg = RunConfig::default();
        cfg.apply("nq", "5").unwrap();
        cfg.apply("dim", "64").unwrap();
        cfg.apply("heads", "4").unwrap();
        cfg.apply("channels", "8,16,32,96").unwrap();
        cfg.apply("synthetic.ids", "10").unwrap();
        cfg.apply("lambda", "0.5").unwrap();
        let rendered = cfg.render();
        let mut reparsed = RunConfig::default();
        reparsed.apply_file(&rendered).unwrap();
        assert_eq!(reparsed, cfg);
    }

    #[test]
    fn file_parser_handles_comments_and_rejects_garbage() {
        let mut cfg = RunConfig::default();
        cfg.apply_file("# comment\n\nnq=7   # trailing\nheads = 4\n").unwrap();
        assert_eq!(cfg.model.num_queries, 7);
        assert_eq!(cfg.model.heads, 4);
        assert!(cfg.apply_file("nonsense line").is_err());
        assert!(cfg.apply("no_such_key", "1").is_err());
    }

    #[test]
    fn validation_rejects_bad_dimension_combinations() {
        let mut cfg = RunConfig::default();
        cfg.apply("dim", "512").unwrap(); // equals final width: reduction must shrink
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.apply("heads", "7").unwrap();
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.apply("nq", "1").unwrap();
        assert!(cfg.validate().is_err());
    }
}
