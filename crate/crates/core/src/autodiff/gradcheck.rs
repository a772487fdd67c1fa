//! Central finite-difference verification of backward rules.
//!
//! The harness is deliberately independent of any specific graph: callers
//! provide a builder that evaluates a scalar function of a flat parameter
//! vector (optionally returning analytic gradients), and the harness compares
//! those gradients against `(f(x+h) - f(x-h)) / 2h` coordinate by coordinate.
//! Run it on an `f64` tape; 32-bit differences drown in rounding error.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{OpKind, Tape, TensorId};
use crate::error::{Error, Result};

/// Relative disagreement between the h and h/2 central-difference estimates
/// above which the oracle itself is invalid at that coordinate (a ReLU,
/// hinge, or abs kink inside the probed interval). Smooth coordinates agree
/// to O(h^2); a kink crossing disagrees at the scale of the slope change.
const ORACLE_STABILITY: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOutcome {
    /// max over checked coordinates of |analytic - numeric| / max(1, |analytic|, |numeric|)
    pub max_rel_err: f64,
    pub worst_coord: usize,
    pub coords_checked: usize,
    /// Coordinates excluded because the finite-difference oracle did not
    /// converge there (non-differentiable point inside the probe interval).
    pub coords_unstable: usize,
}

/// Compares analytic gradients of `f` against central finite differences.
///
/// `f(theta, want_grad)` must deterministically return the scalar value and,
/// when asked, a gradient vector aligned with `theta`. At most `max_coords`
/// coordinates are probed (chosen by `seed` when fewer than `theta.len()`).
///
/// Each coordinate is probed at steps `h` and `h/2`; the Richardson
/// combination is the reference value, and coordinates where the two
/// estimates disagree (the function has a kink inside the interval, so
/// central differences are not a valid oracle there) are excluded and
/// counted. The exclusion test uses function values only, so the oracle
/// stays independent of the analytic path under test.
pub fn grad_check<F>(
    f: F,
    theta: &[f64],
    h: f64,
    max_coords: usize,
    seed: u64,
) -> Result<GradCheckOutcome>
where
    F: Fn(&[f64], bool) -> Result<(f64, Option<Vec<f64>>)>,
{
    let (value, grad) = f(theta, true)?;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("loss is non-finite: {value}")));
    }
    let grad = grad.ok_or_else(|| Error::Contract("builder returned no gradient".into()))?;
    if grad.len() != theta.len() {
        return Err(Error::Contract(format!(
            "gradient length {} does not match parameter length {}",
            grad.len(),
            theta.len()
        )));
    }

    let mut coords: Vec<usize> = (0..theta.len()).collect();
    if coords.len() > max_coords {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        coords.shuffle(&mut rng);
        coords.truncate(max_coords);
    }

    let mut outcome = GradCheckOutcome {
        max_rel_err: 0.0,
        worst_coord: 0,
        coords_checked: coords.len(),
        coords_unstable: 0,
    };
    let mut probe = theta.to_vec();
    let central = |probe: &mut Vec<f64>, i: usize, step: f64| -> Result<f64> {
        probe[i] = theta[i] + step;
        let (up, _) = f(probe, false)?;
        probe[i] = theta[i] - step;
        let (down, _) = f(probe, false)?;
        probe[i] = theta[i];
        Ok((up - down) / (2.0 * step))
    };
    for &i in &coords {
        let fd_full = central(&mut probe, i, h)?;
        let fd_half = central(&mut probe, i, h / 2.0)?;
        let analytic = grad[i];
        if !fd_full.is_finite() || !fd_half.is_finite() || !analytic.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient at coordinate {i}: analytic {analytic}, numeric {fd_full}/{fd_half}"
            )));
        }
        let scale = 1.0_f64.max(fd_full.abs()).max(fd_half.abs());
        if (fd_full - fd_half).abs() / scale > ORACLE_STABILITY {
            outcome.coords_unstable += 1;
            continue;
        }
        let numeric = (4.0 * fd_half - fd_full) / 3.0;
        let rel = (analytic - numeric).abs() / 1.0_f64.max(analytic.abs()).max(numeric.abs());
        if rel > outcome.max_rel_err {
            outcome.max_rel_err = rel;
            outcome.worst_coord = i;
        }
    }
    if outcome.coords_unstable * 5 > outcome.coords_checked {
        return Err(Error::Numeric(format!(
            "{} of {} coordinates sit on non-differentiable points; check inputs",
            outcome.coords_unstable, outcome.coords_checked
        )));
    }
    Ok(outcome)
}

fn rand_values(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Values bounded away from zero, for ops with a kink or pole at the origin.
fn rand_values_off_origin(rng: &mut ChaCha8Rng, n: usize, min_abs: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            sign * rng.gen_range(min_abs..1.0)
        })
        .collect()
}

/// Finite-difference check of one op kind on small random shapes.
///
/// The probe loss is `<op(theta), r>` for a random constant `r`, which
/// exercises the full Jacobian transport rather than just row sums.
pub fn check_op_kind(kind: OpKind, seed: u64) -> Result<GradCheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e3779b97f4a7c15);

    // (theta, builder): builder binds theta as leaves and returns the op output.
    type Builder = Box<dyn Fn(&mut Tape<f64>, &[f64]) -> Result<TensorId>>;
    let (theta, build): (Vec<f64>, Builder) = match kind {
        OpKind::Leaf => return Err(Error::Contract("leaf has no backward rule".into())),
        OpKind::Matmul => {
            let theta = rand_values(&mut rng, 3 * 4 + 4 * 2);
            (
                theta,
                Box::new(|tape, th| {
                    let a = tape.leaf(&[3, 4], th[..12].to_vec(), true)?;
                    let b = tape.leaf(&[4, 2], th[12..].to_vec(), true)?;
                    tape.matmul(a, b)
                }),
            )
        }
        OpKind::Conv2d => {
            let (ci, h, w, co, k) = (2, 5, 4, 3, 3);
            let n = ci * h * w + co * ci * k * k + co;
            let theta = rand_values(&mut rng, n);
            (
                theta,
                Box::new(move |tape, th| {
                    let x_len = ci * h * w;
                    let w_len = co * ci * k * k;
                    let x = tape.leaf(&[ci, h, w], th[..x_len].to_vec(), true)?;
                    let wt = tape.leaf(&[co, ci, k, k], th[x_len..x_len + w_len].to_vec(), true)?;
                    let b = tape.leaf(&[co], th[x_len + w_len..].to_vec(), true)?;
                    tape.conv2d(x, wt, b, 2, 1)
                }),
            )
        }
        OpKind::Relu => {
            let theta = rand_values_off_origin(&mut rng, 10, 0.05);
            (
                theta,
                Box::new(|tape, th| {
                    let x = tape.leaf(&[10], th.to_vec(), true)?;
                    Ok(tape.relu(x))
                }),
            )
        }
        OpKind::Add => {
            let theta = rand_values(&mut rng, 12);
            (
                theta,
                Box::new(|tape, th| {
                    let a = tape.leaf(&[2, 3], th[..6].to_vec(), true)?;
                    let b = tape.leaf(&[2, 3], th[6..].to_vec(), true)?;
                    tape.add(a, b)
                }),
            )
        }
        OpKind::AddBias => {
            let theta = rand_values(&mut rng, 3 * 4 + 4);
            (
                theta,
                Box::new(|tape, th| {
                    let x = tape.leaf(&[3, 4], th[..12].to_vec(), true)?;
                    let b = tape.leaf(&[4], th[12..].to_vec(), true)?;
                    tape.add_bias(x, b)
                }),
            )
        }
        OpKind::Scale => {
            let theta = rand_values(&mut rng, 7);
            (
                theta,
                Box::new(|tape, th| {
                    let x = tape.leaf(&[7], th.to_vec(), true)?;
                    Ok(tape.scale(x, -1.7))
                }),
            )
        }
        OpKind::Offset => {
            let theta = rand_values(&mut rng, 7);
            (
                theta,
                Box::new(|tape, th| {
                    let x = tape.leaf(&[7], th.to_vec(), true)?;
                    Ok(tape.offset(x, 0.42))
                }),
            )
        }
        OpKind::Mul => {
            let theta = rand_values(&mut rng, 16);
            (
                theta,
                Box::new(|tape, th| {
                    let a = tape.leaf(&[2, 4], th[..8].to_vec(), true)?;
                    let b = tape.leaf(&[2, 4], th[8..].to_vec(), true)?;
                    tape.mul(a, b)
                }),
            )
        }
        OpKind::Concat => {
            let theta = rand_values(&mut rng, 2 * 3 + 2 * 2);
            (
                theta,
                Box::new(|tape, th| {
                    let a = tape.leaf(&[2, 3], th[..6].to_vec(), true)?;
                    let b = tape.leaf(&[2, 2], th[6..].to_vec(), true)?;
                    tape.concat(&[a, b], 1)
                }),
            )
        }
        OpKind::Slice => {
            let theta = rand_values(&mut rng, 4 * 5);
            (
                theta,
                Box::new(|tape, th| {
                    let x = tape.leaf(&[4, 5], th.to_vec(), true)?;
                    let rows = tape.slice(x, 0, 1, 2)?;
                    tape.slice(rows, 1, 1, 3)
                }),
            )
        }
        OpKind::Reshape => {
            let theta = rand_values(&mut rng, 12);
            (
                theta,
                Box::new(|tape, th| {
                    let x = tape.leaf(&[2, 2, 3], th.to_vec(), true)?;
                    tape.reshape(x, &[3, 4])
                }),
            )
        }
        OpKind::Softmax => {
            let theta = rand_values(&mut rng, 2 * 5);
            (
                theta,
                Box::new(|tape, th| {
                    let x = tape.leaf(&[2, 5], th.to_vec(), true)?;
                    tape.softmax(x)
                }),
            )
        }
        OpKind::LogSumExp => {
            let theta = rand_values(&mut rng, 3 * 4);
            (
                theta,
                Box::new(|tape, th| {
                    let x = tape.leaf(&[3, 4], th.to_vec(), true)?;
                    tape.logsumexp(x)
                }),
            )
        }
        OpKind::LayerNorm => {
            let n = 2 * 6 + 6 + 6;
            let theta = rand_values(&mut rng, n);
            (
                theta,
                Box::new(|tape, th| {
                    let x = tape.leaf(&[2, 6], th[..12].to_vec(), true)?;
                    let gamma = tape.leaf(&[6], th[12..18].to_vec(), true)?;
                    let beta = tape.leaf(&[6], th[18..].to_vec(), true)?;
                    tape.layernorm(x, gamma, beta)
                }),
            )
        }
        OpKind::L2Normalize => {
            let theta = rand_values_off_origin(&mut rng, 2 * 6, 0.1);
            (
                theta,
                Box::new(|tape, th| {
                    let x = tape.leaf(&[2, 6], th.to_vec(), true)?;
                    tape.l2_normalize(x)
                }),
            )
        }
        OpKind::Mean => {
            let theta = rand_values(&mut rng, 9);
            (
                theta,
                Box::new(|tape, th| {
                    let x = tape.leaf(&[3, 3], th.to_vec(), true)?;
                    Ok(tape.mean(x))
                }),
            )
        }
        OpKind::Sum => {
            let theta = rand_values(&mut rng, 9);
            (
                theta,
                Box::new(|tape, th| {
                    let x = tape.leaf(&[9], th.to_vec(), true)?;
                    Ok(tape.sum(x))
                }),
            )
        }
        OpKind::Abs => {
            let theta = rand_values_off_origin(&mut rng, 10, 0.05);
            (
                theta,
                Box::new(|tape, th| {
                    let x = tape.leaf(&[10], th.to_vec(), true)?;
                    Ok(tape.abs(x))
                }),
            )
        }
        OpKind::Sqrt => {
            let theta: Vec<f64> = (0..10).map(|_| rng.gen_range(0.2..2.0)).collect();
            (
                theta,
                Box::new(|tape, th| {
                    let x = tape.leaf(&[10], th.to_vec(), true)?;
                    Ok(tape.sqrt(x))
                }),
            )
        }
        OpKind::InnerProduct => {
            let theta = rand_values(&mut rng, 14);
            (
                theta,
                Box::new(|tape, th| {
                    let a = tape.leaf(&[7], th[..7].to_vec(), true)?;
                    let b = tape.leaf(&[7], th[7..].to_vec(), true)?;
                    tape.inner_product(a, b)
                }),
            )
        }
        OpKind::Transpose => {
            let theta = rand_values(&mut rng, 3 * 4);
            (
                theta,
                Box::new(|tape, th| {
                    let x = tape.leaf(&[3, 4], th.to_vec(), true)?;
                    tape.transpose(x)
                }),
            )
        }
    };

    // Probe weights are fixed per seed so f is deterministic in theta.
    let probe_seed = seed ^ 0x517cc1b727220a95;
    let f = move |th: &[f64], want_grad: bool| -> Result<(f64, Option<Vec<f64>>)> {
        let mut tape = Tape::<f64>::new();
        let out = build(&mut tape, th)?;
        let out_len = tape.value(out).len();
        let mut prng = ChaCha8Rng::seed_from_u64(probe_seed);
        let probe_vals = rand_values(&mut prng, out_len);
        let shape = tape.shape(out).to_vec();
        let probe = tape.constant(&shape, probe_vals)?;
        let loss = tape.inner_product(out, probe)?;
        let value = tape.value(loss)[0];
        if !want_grad {
            return Ok((value, None));
        }
        tape.backward(loss)?;
        // Leaves were created first and in order, so ids 0..k cover theta.
        let mut grad = Vec::with_capacity(th.len());
        let mut i = 0;
        while grad.len() < th.len() {
            let id = TensorId(i);
            if let Some(g) = tape.grad(id) {
                grad.extend_from_slice(g);
            }
            i += 1;
        }
        Ok((value, Some(grad)))
    };

    grad_check(&f, &theta, 1e-4, 256, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_is_nearly_exact() {
        // f(x) = 0.5 * ||x||^2, grad = x
        let f = |th: &[f64], want_grad: bool| -> Result<(f64, Option<Vec<f64>>)> {
            let mut tape = Tape::<f64>::new();
            let x = tape.leaf(&[th.len()], th.to_vec(), true)?;
            let ip = tape.inner_product(x, x)?;
            let loss = tape.scale(ip, 0.5);
            let v = tape.value(loss)[0];
            if !want_grad {
                return Ok((v, None));
            }
            tape.backward(loss)?;
            Ok((v, Some(tape.grad(x).unwrap().to_vec())))
        };
        let theta: Vec<f64> = (0..12).map(|i| (i as f64) * 0.37 - 2.0).collect();
        let outcome = grad_check(f, &theta, 1e-4, 64, 3).unwrap();
        assert!(outcome.max_rel_err <= 1e-6, "err {}", outcome.max_rel_err);
    }

    #[test]
    fn every_op_kind_matches_finite_differences() {
        for &kind in OpKind::all() {
            for seed in 0..3 {
                let outcome = check_op_kind(kind, seed).unwrap();
                assert!(
                    outcome.max_rel_err <= 1e-4,
                    "{} seed {seed}: max rel err {} at coord {}",
                    kind.name(),
                    outcome.max_rel_err,
                    outcome.worst_coord
                );
            }
        }
    }

    #[test]
    fn harness_detects_a_corrupted_backward_rule() {
        // Same probe as check_op_kind(matmul) but with a scaled backward.
        let f = |th: &[f64], want_grad: bool| -> Result<(f64, Option<Vec<f64>>)> {
            let mut tape = Tape::<f64>::new();
            tape.inject_backward_fault(OpKind::Matmul, 1.05);
            let a = tape.leaf(&[2, 3], th[..6].to_vec(), true)?;
            let b = tape.leaf(&[3, 2], th[6..].to_vec(), true)?;
            let c = tape.matmul(a, b)?;
            let loss = tape.sum(c);
            let v = tape.value(loss)[0];
            if !want_grad {
                return Ok((v, None));
            }
            tape.backward(loss)?;
            let mut g = tape.grad(a).unwrap().to_vec();
            g.extend_from_slice(tape.grad(b).unwrap());
            Ok((v, Some(g)))
        };
        let theta: Vec<f64> = (0..12).map(|i| 0.3 + i as f64 * 0.1).collect();
        let outcome = grad_check(f, &theta, 1e-4, 64, 5).unwrap();
        assert!(
            outcome.max_rel_err > 1e-4,
            "corrupted rule slipped through: {}",
            outcome.max_rel_err
        );
    }
}
