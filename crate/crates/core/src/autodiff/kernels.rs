//! Raw dense kernels shared by the forward pass and the backward rules.
//!
//! All matrices are row-major flat slices. Loops are deliberately
//! sequential so results are bit-reproducible run to run.

use super::Scalar;

/// out[i,j] = sum_p a[i,p] * b[p,j]   (a: m x k, b: k x n)
pub fn matmul_nn<E: Scalar>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o = *o + av * bv;
            }
        }
    }
}

/// out[i,j] = sum_c a[i,c] * b[j,c]   (a: m x k, b: n x k, shared axis k)
pub fn matmul_nt<E: Scalar>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = E::zero();
            for (&av, &bv) in arow.iter().zip(brow.iter()) {
                acc = acc + av * bv;
            }
            out[i * n + j] = out[i * n + j] + acc;
        }
    }
}

/// out[p,j] = sum_i a[i,p] * b[i,j]   (a: m x k, b: m x n, shared axis m)
pub fn matmul_tn<E: Scalar>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o = *o + av * bv;
            }
        }
    }
}

/// Output spatial extent of a convolution along one axis.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// 2-D convolution via column gathering and the matmul kernel.
/// x: [ci, h, w], w: [co, ci, kh, kw], b: [co], out: [co, oh, ow].
///
/// The weight tensor viewed as [co, ci*kh*kw] is already row-major, so the
/// convolution is one matrix product against the gathered patch matrix.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward<E: Scalar>(
    x: &[E],
    w: &[E],
    b: &[E],
    ci: usize,
    h: usize,
    wd: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out: &mut [E],
) {
    let oh = conv_out_extent(h, kh, stride, pad).unwrap();
    let ow = conv_out_extent(wd, kw, stride, pad).unwrap();
    debug_assert_eq!(out.len(), co * oh * ow);
    let cols = gather_columns(x, ci, h, wd, kh, kw, stride, pad, oh, ow);
    let k = ci * kh * kw;
    out.fill(E::zero());
    matmul_nn(w, &cols, co, k, oh * ow, out);
    for o in 0..co {
        let row = &mut out[o * oh * ow..(o + 1) * oh * ow];
        for v in row.iter_mut() {
            *v = *v + b[o];
        }
    }
}

/// Patch matrix: [(ci*kh*kw) x (oh*ow)], zeros where the window leaves the
/// padded input.
#[allow(clippy::too_many_arguments)]
fn gather_columns<E: Scalar>(
    x: &[E],
    ci: usize,
    h: usize,
    wd: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<E> {
    let k = ci * kh * kw;
    let ohw = oh * ow;
    let mut cols = vec![E::zero(); k * ohw];
    for c in 0..ci {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                for oy in 0..oh {
                    let iy = oy * stride + ky;
                    if iy < pad || iy - pad >= h {
                        continue;
                    }
                    let iy = iy - pad;
                    let src_row = &x[(c * h + iy) * wd..(c * h + iy + 1) * wd];
                    for ox in 0..ow {
                        let ix = ox * stride + kx;
                        if ix < pad || ix - pad >= wd {
                            continue;
                        }
                        dst[oy * ow + ox] = src_row[ix - pad];
                    }
                }
            }
        }
    }
    cols
}

/// Accumulates conv2d gradients for input, weights, and bias.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<E: Scalar>(
    x: &[E],
    w: &[E],
    ci: usize,
    h: usize,
    wd: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    gout: &[E],
    gx: &mut [E],
    gw: &mut [E],
    gb: &mut [E],
) {
    let oh = conv_out_extent(h, kh, stride, pad).unwrap();
    let ow = conv_out_extent(wd, kw, stride, pad).unwrap();
    let ohw = oh * ow;
    debug_assert_eq!(gout.len(), co * ohw);
    let k = ci * kh * kw;

    for o in 0..co {
        let mut acc = E::zero();
        for &g in &gout[o * ohw..(o + 1) * ohw] {
            acc = acc + g;
        }
        gb[o] = gb[o] + acc;
    }

    // dW = g . cols^T
    let cols = gather_columns(x, ci, h, wd, kh, kw, stride, pad, oh, ow);
    matmul_nt(gout, &cols, co, ohw, k, gw);

    // d(cols) = W^T . g, scattered back through the gather
    let mut gcols = vec![E::zero(); k * ohw];
    matmul_tn(w, gout, co, k, ohw, &mut gcols);
    for c in 0..ci {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let src = &gcols[row * ohw..(row + 1) * ohw];
                for oy in 0..oh {
                    let iy = oy * stride + ky;
                    if iy < pad || iy - pad >= h {
                        continue;
                    }
                    let iy = iy - pad;
                    for ox in 0..ow {
                        let ix = ox * stride + kx;
                        if ix < pad || ix - pad >= wd {
                            continue;
                        }
                        let xi = (c * h + iy) * wd + ix - pad;
                        gx[xi] = gx[xi] + src[oy * ow + ox];
                    }
                }
            }
        }
    }
}

/// Row-wise softmax with max-subtraction for stability.
pub fn softmax_rows<E: Scalar>(x: &[E], rows: usize, cols: usize, out: &mut [E]) {
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let or = &mut out[r * cols..(r + 1) * cols];
        let mut mx = xr[0];
        for &v in xr.iter() {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = E::zero();
        for (o, &v) in or.iter_mut().zip(xr.iter()) {
            let e = (v - mx).exp();
            *o = e;
            sum = sum + e;
        }
        for o in or.iter_mut() {
            *o = *o / sum;
        }
    }
}

/// Row-wise log(sum(exp(x))) with max-subtraction.
pub fn logsumexp_rows<E: Scalar>(x: &[E], rows: usize, cols: usize, out: &mut [E]) {
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let mut mx = xr[0];
        for &v in xr.iter() {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = E::zero();
        for &v in xr.iter() {
            sum = sum + (v - mx).exp();
        }
        out[r] = mx + sum.ln();
    }
}
