//! Small convolutional feature extractor: four 3x3 stages, a 1x1 channel
//! reduction, and spatial flattening into the token sequence the transformer
//! consumes. Column `j` of the token matrix corresponds to spatial location
//! `(j / W, j % W)` — the learnable positional encoding depends on this
//! row-major order, so it is part of the module contract.

use crate::autodiff::{Scalar, Tape, TensorId};
use crate::error::{Error, Result};

pub struct StageWeights {
    pub w: TensorId,
    pub b: TensorId,
    pub stride: usize,
}

pub struct BackboneWeights {
    pub stages: Vec<StageWeights>,
    pub reduce_w: TensorId,
    pub reduce_b: TensorId,
}

/// Backbone outputs: pre-activation maps `f`, activated maps `a`, and the
/// reduced token matrix `g` (dim x tokens).
pub struct FeatureMap {
    pub raw: TensorId,
    pub activated: TensorId,
    pub tokens: TensorId,
    pub grid: (usize, usize),
}

/// Runs the conv stack on a 3xHxW image tensor (already normalized).
/// ReLU follows every stage except the last; the last stage output is `f`,
/// its activation is `a`, and the 1x1 reduction of `a` flattens into `g`.
pub fn extract<E: Scalar>(
    tape: &mut Tape<E>,
    weights: &BackboneWeights,
    image: TensorId,
) -> Result<FeatureMap> {
    if tape.shape(image).len() != 3 || tape.shape(image)[0] != 3 {
        return Err(Error::Contract(format!(
            "backbone expects a 3xHxW image, got {:?}",
            tape.shape(image)
        )));
    }
    let mut x = image;
    for (i, stage) in weights.stages.iter().enumerate() {
        x = tape.conv2d(x, stage.w, stage.b, stage.stride, 1)?;
        if i + 1 < weights.stages.len() {
            x = tape.relu(x);
        }
    }
    let raw = x;
    let activated = tape.relu(raw);
    let tokens = reduce_and_flatten(tape, weights.reduce_w, weights.reduce_b, activated)?;
    let grid = (tape.shape(activated)[1], tape.shape(activated)[2]);
    Ok(FeatureMap {
        raw,
        activated,
        tokens,
        grid,
    })
}

/// 1x1 convolution from C to d channels (d < C) followed by row-major
/// spatial flattening: CxHxW -> dx(H*W).
pub fn reduce_and_flatten<E: Scalar>(
    tape: &mut Tape<E>,
    reduce_w: TensorId,
    reduce_b: TensorId,
    activated: TensorId,
) -> Result<TensorId> {
    let channels = match tape.shape(activated) {
        [c, _, _] => *c,
        s => {
            return Err(Error::Contract(format!(
                "reduce_and_flatten expects CxHxW, got {s:?}"
            )))
        }
    };
    let dim = match tape.shape(reduce_w) {
        [d, c, 1, 1] if *c == channels => *d,
        s => {
            return Err(Error::Config(format!(
                "reduction weight {s:?} does not match a 1x1 conv over {channels} channels"
            )))
        }
    };
    if dim >= channels {
        return Err(Error::Config(format!(
            "reduced dim {dim} must be smaller than the channel count {channels}"
        )));
    }
    let reduced = tape.conv2d(activated, reduce_w, reduce_b, 1, 0)?;
    tape.flatten_spatial(reduced)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect()
    }

    /// Small backbone wired straight onto a tape from a flat weight vector.
    struct TinyNet {
        channels: Vec<usize>,
        strides: Vec<usize>,
        dim: usize,
    }

    impl TinyNet {
        fn new() -> Self {
            TinyNet {
                channels: vec![4, 6, 8, 10],
                strides: vec![2, 2, 1, 1],
                dim: 4,
            }
        }

        fn weight_len(&self) -> usize {
            let mut total = 0;
            let mut cin = 3;
            for &c in &self.channels {
                total += c * cin * 9 + c;
                cin = c;
            }
            total + self.dim * cin + self.dim
        }

        fn bind(&self, tape: &mut Tape<f64>, theta: &[f64], requires_grad: bool) -> BackboneWeights {
            let mut offset = 0;
            let mut cin = 3;
            let mut stages = Vec::new();
            for (i, &c) in self.channels.iter().enumerate() {
                let wlen = c * cin * 9;
                let w = tape
                    .leaf(&[c, cin, 3, 3], theta[offset..offset + wlen].to_vec(), requires_grad)
                    .unwrap();
                offset += wlen;
                let b = tape
                    .leaf(&[c], theta[offset..offset + c].to_vec(), requires_grad)
                    .unwrap();
                offset += c;
                stages.push(StageWeights { w, b, stride: self.strides[i] });
                cin = c;
            }
            let rlen = self.dim * cin;
            let reduce_w = tape
                .leaf(&[self.dim, cin, 1, 1], theta[offset..offset + rlen].to_vec(), requires_grad)
                .unwrap();
            offset += rlen;
            let reduce_b = tape
                .leaf(&[self.dim], theta[offset..offset + self.dim].to_vec(), requires_grad)
                .unwrap();
            BackboneWeights { stages, reduce_w, reduce_b }
        }
    }

    #[test]
    fn zero_image_gives_finite_tokens_of_the_right_shape() {
        let net = TinyNet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let theta = rand_vec(&mut rng, net.weight_len());
        let mut tape = Tape::<f64>::new();
        let weights = net.bind(&mut tape, &theta, false);
        let image = tape.constant(&[3, 8, 8], vec![0.0; 3 * 64]).unwrap();
        let fm = extract(&mut tape, &weights, image).unwrap();
        let (h, w) = fm.grid;
        assert_eq!(tape.shape(fm.tokens), &[net.dim, h * w]);
        assert!(tape.value(fm.tokens).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn identical_images_yield_identical_tokens() {
        let net = TinyNet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let theta = rand_vec(&mut rng, net.weight_len());
        let image_vals = rand_vec(&mut rng, 3 * 64);
        let run = || {
            let mut tape = Tape::<f64>::new();
            let weights = net.bind(&mut tape, &theta, false);
            let image = tape.constant(&[3, 8, 8], image_vals.clone()).unwrap();
            let fm = extract(&mut tape, &weights, image).unwrap();
            tape.value(fm.tokens).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn token_gradients_match_finite_differences() {
        let net = TinyNet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let theta = rand_vec(&mut rng, net.weight_len());
        let image_vals = rand_vec(&mut rng, 3 * 64);
        let f = |th: &[f64], want: bool| -> crate::Result<(f64, Option<Vec<f64>>)> {
            let mut tape = Tape::<f64>::new();
            let net = TinyNet::new();
            let weights = net.bind(&mut tape, th, true);
            let image = tape.constant(&[3, 8, 8], image_vals.clone())?;
            let fm = extract(&mut tape, &weights, image)?;
            // probe the tokens with a fixed random covector
            let n = tape.value(fm.tokens).len();
            let mut prng = ChaCha8Rng::seed_from_u64(99);
            let shape = tape.shape(fm.tokens).to_vec();
            let probe_vals = rand_vec(&mut prng, n);
            let probe = tape.constant(&shape, probe_vals)?;
            let loss = tape.inner_product(fm.tokens, probe)?;
            let v = tape.value(loss)[0];
            if !want {
                return Ok((v, None));
            }
            tape.backward(loss)?;
            let mut grad = Vec::new();
            for &id in weights
                .stages
                .iter()
                .flat_map(|s| [s.w, s.b].into_iter())
                .collect::<Vec<_>>()
                .iter()
                .chain([weights.reduce_w, weights.reduce_b].iter())
            {
                grad.extend_from_slice(tape.grad(id).unwrap());
            }
            Ok((v, Some(grad)))
        };
        let outcome = grad_check(f, &theta, 1e-4, 200, 4).unwrap();
        assert!(outcome.max_rel_err <= 1e-4, "err {}", outcome.max_rel_err);
    }

    #[test]
    fn one_hot_reduction_selects_a_channel() {
        let mut tape = Tape::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a_vals = rand_vec(&mut rng, 3 * 4 * 2);
        let a = tape.constant(&[3, 4, 2], a_vals.clone()).unwrap();
        // d=1 kernel selecting channel 1
        let w = tape.constant(&[1, 3, 1, 1], vec![0.0, 1.0, 0.0]).unwrap();
        let b = tape.constant(&[1], vec![0.0]).unwrap();
        let g = reduce_and_flatten(&mut tape, w, b, a).unwrap();
        assert_eq!(tape.shape(g), &[1, 8]);
        assert_eq!(tape.value(g), &a_vals[8..16]);
    }

    #[test]
    fn reduction_rejects_non_reducing_dims() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(&[3, 2, 2], vec![0.0; 12]).unwrap();
        let w = tape.constant(&[3, 3, 1, 1], vec![0.0; 9]).unwrap();
        let b = tape.constant(&[3], vec![0.0; 3]).unwrap();
        let err = reduce_and_flatten(&mut tape, w, b, a).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn spatial_permutation_permutes_token_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (c, h, w, d) = (5, 3, 2, 2);
        let a_vals = rand_vec(&mut rng, c * h * w);
        let w_vals = rand_vec(&mut rng, d * c);
        let b_vals = rand_vec(&mut rng, d);
        let run = |vals: &[f64]| {
            let mut tape = Tape::<f64>::new();
            let a = tape.constant(&[c, h, w], vals.to_vec()).unwrap();
            let wt = tape.constant(&[d, c, 1, 1], w_vals.clone()).unwrap();
            let bt = tape.constant(&[d], b_vals.clone()).unwrap();
            let g = reduce_and_flatten(&mut tape, wt, bt, a).unwrap();
            tape.value(g).to_vec()
        };
        let base = run(&a_vals);

        // swap spatial positions 0 and 3 in every channel
        let hw = h * w;
        let mut permuted = a_vals.clone();
        for ch in 0..c {
            permuted.swap(ch * hw, ch * hw + 3);
        }
        let perm = run(&permuted);
        for row in 0..d {
            for col in 0..hw {
                let src = match col {
                    0 => 3,
                    3 => 0,
                    other => other,
                };
                assert_eq!(perm[row * hw + col], base[row * hw + src]);
            }
        }
    }

    #[test]
    fn reduction_matches_per_pixel_matvec_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (c, h, w, d) = (6, 3, 4, 3);
        let a_vals = rand_vec(&mut rng, c * h * w);
        let w_vals = rand_vec(&mut rng, d * c);
        let b_vals = rand_vec(&mut rng, d);
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(&[c, h, w], a_vals.clone()).unwrap();
        let wt = tape.constant(&[d, c, 1, 1], w_vals.clone()).unwrap();
        let bt = tape.constant(&[d], b_vals.clone()).unwrap();
        let g = reduce_and_flatten(&mut tape, wt, bt, a).unwrap();
        let got = tape.value(g);

        // oracle: per-pixel dense matrix-vector product
        let hw = h * w;
        for row in 0..d {
            for p in 0..hw {
                let mut expect = b_vals[row];
                for ch in 0..c {
                    expect += w_vals[row * c + ch] * a_vals[ch * hw + p];
                }
                let diff = (got[row * hw + p] - expect).abs();
                assert!(diff < 1e-12, "pixel {p} row {row}: {diff}");
            }
        }
    }

    #[test]
    fn flattening_round_trips_to_the_spatial_layout() {
        let net = TinyNet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let theta = rand_vec(&mut rng, net.weight_len());
        let image_vals = rand_vec(&mut rng, 3 * 64);
        let mut tape = Tape::<f64>::new();
        let weights = net.bind(&mut tape, &theta, false);
        let image = tape.constant(&[3, 8, 8], image_vals).unwrap();
        let fm = extract(&mut tape, &weights, image).unwrap();
        let (h, w) = fm.grid;
        // un-flattened 1x1 conv output
        let reduced = tape
            .conv2d(fm.activated, weights.reduce_w, weights.reduce_b, 1, 0)
            .unwrap();
        let back = tape.reshape(fm.tokens, &[net.dim, h, w]).unwrap();
        assert_eq!(tape.value(back), tape.value(reduced));
    }

    #[test]
    fn interior_tokens_translate_with_the_input() {
        // strides 2,2,1,1: one token step corresponds to 4 input pixels
        let net = TinyNet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let theta = rand_vec(&mut rng, net.weight_len());
        let (h_in, w_in) = (16, 16);
        let run = |impulse_y: usize, impulse_x: usize| {
            let mut vals = vec![0.0; 3 * h_in * w_in];
            vals[impulse_y * w_in + impulse_x] = 1.0; // channel 0 impulse
            let mut tape = Tape::<f64>::new();
            let weights = net.bind(&mut tape, &theta, false);
            let image = tape.constant(&[3, h_in, w_in], vals).unwrap();
            let fm = extract(&mut tape, &weights, image).unwrap();
            (tape.value(fm.tokens).to_vec(), fm.grid)
        };
        let (base, (gh, gw)) = run(7, 7);
        let (shifted, _) = run(7 + 4, 7);
        // token rows 2..gh-2 of the shifted response equal rows 1..gh-3 of the base
        for row in 0..net.dim {
            for ty in 2..gh - 2 {
                for tx in 2..gw - 2 {
                    let a = shifted[row * gh * gw + ty * gw + tx];
                    let b = base[row * gh * gw + (ty - 1) * gw + tx];
                    assert_eq!(a, b, "token ({ty},{tx}) row {row}");
                }
            }
        }
    }
}
