//! Transformer encoder-decoder with learnable positional encodings and
//! semantic-preference object queries.
//!
//! Positions and queries travel with the attention inputs: they are added to
//! the query/key projections of every attention sublayer (never to the
//! values), the decoder state starts at zero, and sublayers are post-norm
//! residual blocks. The decoder's `num_queries` outputs split into
//! `num_queries - 1` identity features and one occlusion feature.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Scalar, Tape, TensorId};
use crate::error::{Error, Result};

pub struct AttentionParams {
    pub wq: TensorId,
    pub bq: TensorId,
    pub wk: TensorId,
    pub bk: TensorId,
    pub wv: TensorId,
    pub bv: TensorId,
    pub wo: TensorId,
    pub bo: TensorId,
}

pub struct LayerNormParams {
    pub gamma: TensorId,
    pub beta: TensorId,
}

pub struct FfnParams {
    pub w1: TensorId,
    pub b1: TensorId,
    pub w2: TensorId,
    pub b2: TensorId,
}

pub struct EncoderLayerParams {
    pub attn: AttentionParams,
    pub norm1: LayerNormParams,
    pub ffn: FfnParams,
    pub norm2: LayerNormParams,
}

pub struct DecoderLayerParams {
    pub self_attn: AttentionParams,
    pub norm1: LayerNormParams,
    pub cross_attn: AttentionParams,
    pub norm2: LayerNormParams,
    pub ffn: FfnParams,
    pub norm3: LayerNormParams,
}

/// Inverted dropout; masks are drawn from the supplied stream so training
/// steps stay reproducible. `Off` is the inference mode.
pub enum Dropout<'a> {
    Off,
    On { p: f64, rng: &'a mut ChaCha8Rng },
}

impl Dropout<'_> {
    fn apply<E: Scalar>(&mut self, tape: &mut Tape<E>, x: TensorId) -> Result<TensorId> {
        match self {
            Dropout::Off => Ok(x),
            Dropout::On { p, rng } => {
                if *p == 0.0 {
                    return Ok(x);
                }
                let keep = E::from_f64(1.0 / (1.0 - *p));
                let n = tape.value(x).len();
                let mask: Vec<E> = (0..n)
                    .map(|_| if rng.gen_bool(*p) { E::zero() } else { keep })
                    .collect();
                let shape = tape.shape(x).to_vec();
                let mask = tape.constant(&shape, mask)?;
                tape.mul(x, mask)
            }
        }
    }
}

/// Scaled dot-product attention with `heads` heads.
///
/// `q_input`/`k_input` already carry their additive positional or query
/// embeddings; `v_input` never does. Returns the projected output and the
/// per-head attention matrices (rows sum to one).
pub fn multi_head_attention<E: Scalar>(
    tape: &mut Tape<E>,
    q_input: TensorId,
    k_input: TensorId,
    v_input: TensorId,
    params: &AttentionParams,
    heads: usize,
) -> Result<(TensorId, Vec<TensorId>)> {
    let dim = match tape.shape(q_input) {
        [_, d] => *d,
        s => return Err(Error::Contract(format!("attention expects rank-2 inputs, got {s:?}"))),
    };
    if dim % heads != 0 {
        return Err(Error::Config(format!("dim {dim} is not divisible by {heads} heads")));
    }
    let head_dim = dim / heads;

    let q_proj = tape.matmul(q_input, params.wq)?;
    let q = tape.add_bias(q_proj, params.bq)?;
    let k_proj = tape.matmul(k_input, params.wk)?;
    let k = tape.add_bias(k_proj, params.bk)?;
    let v_proj = tape.matmul(v_input, params.wv)?;
    let v = tape.add_bias(v_proj, params.bv)?;

    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut contexts = Vec::with_capacity(heads);
    let mut attentions = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice(q, 1, h * head_dim, head_dim)?;
        let kh = tape.slice(k, 1, h * head_dim, head_dim)?;
        let vh = tape.slice(v, 1, h * head_dim, head_dim)?;
        let kh_t = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kh_t)?;
        let scaled = tape.scale(scores, scale);
        let attn = tape.softmax(scaled)?;
        let ctx = tape.matmul(attn, vh)?;
        contexts.push(ctx);
        attentions.push(attn);
    }
    let merged = tape.concat(&contexts, 1)?;
    let out_proj = tape.matmul(merged, params.wo)?;
    let out = tape.add_bias(out_proj, params.bo)?;
    Ok((out, attentions))
}

fn feed_forward<E: Scalar>(
    tape: &mut Tape<E>,
    x: TensorId,
    params: &FfnParams,
    dropout: &mut Dropout<'_>,
) -> Result<TensorId> {
    let h_proj = tape.matmul(x, params.w1)?;
    let h_pre = tape.add_bias(h_proj, params.b1)?;
    let h_act = tape.relu(h_pre);
    let h_dropped = dropout.apply(tape, h_act)?;
    let out_proj = tape.matmul(h_dropped, params.w2)?;
    let out = tape.add_bias(out_proj, params.b2)?;
    dropout.apply(tape, out)
}

pub fn encoder_layer<E: Scalar>(
    tape: &mut Tape<E>,
    x: TensorId,
    pos: TensorId,
    params: &EncoderLayerParams,
    heads: usize,
    dropout: &mut Dropout<'_>,
) -> Result<TensorId> {
    let with_pos = tape.add(x, pos)?;
    let (attn_out, _) = multi_head_attention(tape, with_pos, with_pos, x, &params.attn, heads)?;
    let attn_out = dropout.apply(tape, attn_out)?;
    let residual = tape.add(x, attn_out)?;
    let x = tape.layernorm(residual, params.norm1.gamma, params.norm1.beta)?;

    let ffn_out = feed_forward(tape, x, &params.ffn, dropout)?;
    let residual = tape.add(x, ffn_out)?;
    tape.layernorm(residual, params.norm2.gamma, params.norm2.beta)
}

/// Encoder over backbone tokens `g` (dim x tokens). Tokens become rows
/// internally; the returned memory is tokens x dim.
pub fn encode<E: Scalar>(
    tape: &mut Tape<E>,
    tokens: TensorId,
    pos: TensorId,
    layers: &[EncoderLayerParams],
    heads: usize,
    dropout: &mut Dropout<'_>,
) -> Result<TensorId> {
    let (dim, count) = match tape.shape(tokens) {
        [d, t] => (*d, *t),
        s => return Err(Error::Contract(format!("encode expects dim x tokens, got {s:?}"))),
    };
    match tape.shape(pos) {
        [t, d] if *t == count && *d == dim => {}
        s => {
            return Err(Error::Contract(format!(
                "positional encoding {s:?} does not match {count} tokens of dim {dim}"
            )))
        }
    }
    let mut x = tape.transpose(tokens)?;
    for params in layers {
        x = encoder_layer(tape, x, pos, params, heads, dropout)?;
    }
    Ok(x)
}

pub struct DecoderLayerOutput {
    pub state: TensorId,
    /// Head-averaged cross-attention, queries x tokens.
    pub cross_attention: TensorId,
}

pub fn decoder_layer<E: Scalar>(
    tape: &mut Tape<E>,
    state: TensorId,
    queries: TensorId,
    memory: TensorId,
    pos: TensorId,
    params: &DecoderLayerParams,
    heads: usize,
    dropout: &mut Dropout<'_>,
) -> Result<DecoderLayerOutput> {
    let with_q = tape.add(state, queries)?;
    let (self_out, _) = multi_head_attention(tape, with_q, with_q, state, &params.self_attn, heads)?;
    let self_out = dropout.apply(tape, self_out)?;
    let residual = tape.add(state, self_out)?;
    let state = tape.layernorm(residual, params.norm1.gamma, params.norm1.beta)?;

    let cq = tape.add(state, queries)?;
    let ck = tape.add(memory, pos)?;
    let (cross_out, head_attn) =
        multi_head_attention(tape, cq, ck, memory, &params.cross_attn, heads)?;
    let cross_out = dropout.apply(tape, cross_out)?;
    let residual = tape.add(state, cross_out)?;
    let state = tape.layernorm(residual, params.norm2.gamma, params.norm2.beta)?;

    let ffn_out = feed_forward(tape, state, &params.ffn, dropout)?;
    let residual = tape.add(state, ffn_out)?;
    let state = tape.layernorm(residual, params.norm3.gamma, params.norm3.beta)?;

    let mut avg = head_attn[0];
    for &h in &head_attn[1..] {
        avg = tape.add(avg, h)?;
    }
    let cross_attention = tape.scale(avg, 1.0 / head_attn.len() as f64);
    Ok(DecoderLayerOutput { state, cross_attention })
}

pub struct DecodeOutput {
    /// Final decoder states F, queries x dim.
    pub features: TensorId,
    /// Head-averaged cross-attention per decoder layer.
    pub cross_attention: Vec<TensorId>,
}

/// Decoder driven by the learnable query set; the state starts at zero and
/// queries are re-added at every attention sublayer.
pub fn decode<E: Scalar>(
    tape: &mut Tape<E>,
    memory: TensorId,
    pos: TensorId,
    queries: TensorId,
    layers: &[DecoderLayerParams],
    final_norm: &LayerNormParams,
    heads: usize,
    dropout: &mut Dropout<'_>,
) -> Result<DecodeOutput> {
    let (tokens, dim) = match tape.shape(memory) {
        [t, d] => (*t, *d),
        s => return Err(Error::Contract(format!("decode expects tokens x dim memory, got {s:?}"))),
    };
    match tape.shape(pos) {
        [t, d] if *t == tokens && *d == dim => {}
        s => {
            return Err(Error::Contract(format!(
                "positional encoding {s:?} does not match memory {tokens}x{dim}"
            )))
        }
    }
    let num_queries = match tape.shape(queries) {
        [n, d] if *d == dim => *n,
        s => return Err(Error::Contract(format!("queries {s:?} do not match dim {dim}"))),
    };
    if num_queries < 2 {
        return Err(Error::Config(format!(
            "need at least 2 object queries (identity + occlusion), got {num_queries}"
        )));
    }

    let mut state = tape.constant(&[num_queries, dim], vec![E::zero(); num_queries * dim])?;
    let mut cross_attention = Vec::with_capacity(layers.len());
    for params in layers {
        let out = decoder_layer(tape, state, queries, memory, pos, params, heads, dropout)?;
        state = out.state;
        cross_attention.push(out.cross_attention);
    }
    let features = tape.layernorm(state, final_norm.gamma, final_norm.beta)?;
    Ok(DecodeOutput { features, cross_attention })
}

/// Splits decoder outputs into the concatenated identity feature (rows
/// `0..n-1`, flattened row-major) and the occlusion feature (last row).
pub fn split_features<E: Scalar>(
    tape: &mut Tape<E>,
    features: TensorId,
) -> Result<(TensorId, TensorId)> {
    let (n, d) = match tape.shape(features) {
        [n, d] => (*n, *d),
        s => return Err(Error::Contract(format!("split expects queries x dim, got {s:?}"))),
    };
    let id_rows = tape.slice(features, 0, 0, n - 1)?;
    let id_feature = tape.reshape(id_rows, &[(n - 1) * d])?;
    let occ_row = tape.slice(features, 0, n - 1, 1)?;
    let occlusion_feature = tape.reshape(occ_row, &[d])?;
    Ok((id_feature, occlusion_feature))
}

/// Detached head-averaged cross-attention, reshaped onto the backbone's
/// token grid.
#[derive(Debug, Clone)]
pub struct AttentionMaps {
    per_layer: Vec<Vec<f64>>,
    pub num_queries: usize,
    pub grid: (usize, usize),
}

impl AttentionMaps {
    pub fn from_tape<E: Scalar>(
        tape: &Tape<E>,
        layer_ids: &[TensorId],
        grid: (usize, usize),
    ) -> Result<Self> {
        let mut per_layer = Vec::with_capacity(layer_ids.len());
        let mut num_queries = 0;
        for &id in layer_ids {
            let (n, t) = match tape.shape(id) {
                [n, t] => (*n, *t),
                s => return Err(Error::Contract(format!("attention map {s:?} is not rank-2"))),
            };
            if t != grid.0 * grid.1 {
                return Err(Error::Contract(format!(
                    "attention over {t} tokens does not fit grid {}x{}",
                    grid.0, grid.1
                )));
            }
            num_queries = n;
            per_layer.push(tape.value(id).iter().map(|v| v.to_f64()).collect());
        }
        Ok(AttentionMaps { per_layer, num_queries, grid })
    }

    pub fn layers(&self) -> usize {
        self.per_layer.len()
    }

    /// One query's map on the HxW grid (row-major); entries sum to 1.
    pub fn map(&self, query: usize, layer: usize) -> Result<Vec<f64>> {
        if layer >= self.per_layer.len() {
            return Err(Error::Contract(format!(
                "layer {layer} out of range ({} layers)",
                self.per_layer.len()
            )));
        }
        if query >= self.num_queries {
            return Err(Error::Contract(format!(
                "query {query} out of range ({} queries)",
                self.num_queries
            )));
        }
        let hw = self.grid.0 * self.grid.1;
        Ok(self.per_layer[layer][query * hw..(query + 1) * hw].to_vec())
    }
}
