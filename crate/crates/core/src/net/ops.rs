//! Tensor kernels on flat channel-major buffers.

/// 3x3 convolution, stride 1, zero padding 1. `out` is overwritten.
pub fn conv3x3_forward(
    input: &[f64],
    in_ch: usize,
    height: usize,
    width: usize,
    weights: &[f64],
    bias: &[f64],
    out_ch: usize,
    out: &mut [f64],
) {
    let plane = height * width;
    debug_assert_eq!(input.len(), in_ch * plane);
    debug_assert_eq!(weights.len(), out_ch * in_ch * 9);
    debug_assert_eq!(out.len(), out_ch * plane);
    for oc in 0..out_ch {
        let out_plane = &mut out[oc * plane..(oc + 1) * plane];
        out_plane.fill(bias[oc]);
        for ic in 0..in_ch {
            let in_plane = &input[ic * plane..(ic + 1) * plane];
            let w = &weights[(oc * in_ch + ic) * 9..(oc * in_ch + ic + 1) * 9];
            for y in 0..height {
                let out_row = &mut out_plane[y * width..(y + 1) * width];
                for ky in 0..3 {
                    let iy = y as isize + ky as isize - 1;
                    if iy < 0 || iy >= height as isize {
                        continue;
                    }
                    let in_row = &in_plane[iy as usize * width..(iy as usize + 1) * width];
                    let (w0, w1, w2) = (w[ky * 3], w[ky * 3 + 1], w[ky * 3 + 2]);
                    // centre tap covers the full row, side taps skip one edge column
                    for (o, i) in out_row.iter_mut().zip(in_row) {
                        *o += w1 * i;
                    }
                    for (o, i) in out_row[1..].iter_mut().zip(&in_row[..width - 1]) {
                        *o += w0 * i;
                    }
                    for (o, i) in out_row[..width - 1].iter_mut().zip(&in_row[1..]) {
                        *o += w2 * i;
                    }
                }
            }
        }
    }
}

/// Non-overlapping max pooling (kernel == stride, no padding).
///
/// Writes the pooled maxima and the flat input index of each maximum. Ties
/// resolve to the first index in row-major order.
pub fn maxpool_forward(
    input: &[f64],
    channels: usize,
    height: usize,
    width: usize,
    k: usize,
    out: &mut [f64],
    argmax: &mut [u32],
) {
    let (oh, ow) = (height / k, width / k);
    debug_assert_eq!(height % k, 0);
    debug_assert_eq!(width % k, 0);
    for c in 0..channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0usize;
                for dy in 0..k {
                    let row = c * height * width + (oy * k + dy) * width + ox * k;
                    for dx in 0..k {
                        let v = input[row + dx];
                        if v > best {
                            best = v;
                            best_idx = row + dx;
                        }
                    }
                }
                let o = c * oh * ow + oy * ow + ox;
                out[o] = best;
                argmax[o] = best_idx as u32;
            }
        }
    }
}

pub fn relu_in_place(values: &mut [f64]) {
    for v in values {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// `out = W x + b` with `W` stored row-major as `out x in`.
pub fn dense_forward(input: &[f64], weights: &[f64], bias: &[f64], out: &mut [f64]) {
    let n_in = input.len();
    for (o, (row, b)) in out.iter_mut().zip(weights.chunks_exact(n_in).zip(bias)) {
        *o = b + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>();
    }
}

/// Accumulates dense-layer gradients and optionally returns the input gradient.
pub fn dense_backward(
    input: &[f64],
    weights: &[f64],
    grad_out: &[f64],
    grad_w: &mut [f64],
    grad_b: &mut [f64],
    grad_in: Option<&mut [f64]>,
) {
    let n_in = input.len();
    for (o, &g) in grad_out.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        grad_b[o] += g;
        for (gw, x) in grad_w[o * n_in..(o + 1) * n_in].iter_mut().zip(input) {
            *gw += g * x;
        }
    }
    if let Some(grad_in) = grad_in {
        grad_in.fill(0.0);
        for (o, &g) in grad_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            for (gi, w) in grad_in.iter_mut().zip(&weights[o * n_in..(o + 1) * n_in]) {
                *gi += g * w;
            }
        }
    }
}

/// Backward pass of a 3x3/stride 1/pad 1 convolution for a sparse output
/// gradient given as `(flat output index, gradient)` pairs.
///
/// After max pooling only one conv output per pooling window receives
/// gradient, so iterating the non-zeros is far cheaper than a dense pass.
#[allow(clippy::too_many_arguments)]
pub fn conv3x3_backward_sparse(
    input: &[f64],
    in_ch: usize,
    height: usize,
    width: usize,
    weights: &[f64],
    grad_out: &[(u32, f64)],
    grad_w: &mut [f64],
    grad_b: &mut [f64],
    mut grad_in: Option<&mut [f64]>,
) {
    let plane = height * width;
    if let Some(gi) = grad_in.as_deref_mut() {
        gi.fill(0.0);
    }
    for &(idx, g) in grad_out {
        let idx = idx as usize;
        let oc = idx / plane;
        let y = (idx % plane) / width;
        let x = idx % width;
        grad_b[oc] += g;
        for ic in 0..in_ch {
            let wbase = (oc * in_ch + ic) * 9;
            let ibase = ic * plane;
            for ky in 0..3 {
                let iy = y as isize + ky as isize - 1;
                if iy < 0 || iy >= height as isize {
                    continue;
                }
                for kx in 0..3 {
                    let ix = x as isize + kx as isize - 1;
                    if ix < 0 || ix >= width as isize {
                        continue;
                    }
                    let i = ibase + iy as usize * width + ix as usize;
                    grad_w[wbase + ky * 3 + kx] += g * input[i];
                    if let Some(gi) = grad_in.as_deref_mut() {
                        gi[i] += g * weights[wbase + ky * 3 + kx];
                    }
                }
            }
        }
    }
}
