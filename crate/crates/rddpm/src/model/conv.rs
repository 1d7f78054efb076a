//! 3×3 convolution kernels with zero padding, in double precision.
//!
//! Weights are laid out `[c_out][c_in][ky][kx]` flat; images are row-major
//! `[channel][y][x]`. Inner loops run over slices of exactly the output
//! width so the compiler can elide bounds checks and vectorize.

/// Spatial and channel dimensions for one convolution call.
#[derive(Clone, Copy, Debug)]
pub struct ConvShape {
    pub c_in: usize,
    pub c_out: usize,
    pub height: usize,
    pub width: usize,
}

impl ConvShape {
    pub fn input_len(&self) -> usize {
        self.c_in * self.height * self.width
    }

    pub fn output_len(&self) -> usize {
        self.c_out * self.height * self.width
    }

    pub fn weight_len(&self) -> usize {
        self.c_out * self.c_in * 9
    }
}

/// Copies `src` (c×h×w) into a zero-padded c×(h+2)×(w+2) buffer.
fn pad1(src: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (ph, pw) = (h + 2, w + 2);
    let mut out = vec![0.0; c * ph * pw];
    for ch in 0..c {
        for y in 0..h {
            let from = (ch * h + y) * w;
            let to = (ch * ph + y + 1) * pw + 1;
            out[to..to + w].copy_from_slice(&src[from..from + w]);
        }
    }
    out
}

/// Nine length-`w` windows of a padded channel plane around output row `y`:
/// three consecutive input rows, each at column offsets 0, 1, 2.
#[inline]
fn tap_windows(plane: &[f64], y: usize, w: usize, pw: usize) -> [&[f64]; 9] {
    let r0 = &plane[y * pw..];
    let r1 = &plane[(y + 1) * pw..];
    let r2 = &plane[(y + 2) * pw..];
    [
        &r0[0..w],
        &r0[1..1 + w],
        &r0[2..2 + w],
        &r1[0..w],
        &r1[1..1 + w],
        &r1[2..2 + w],
        &r2[0..w],
        &r2[1..1 + w],
        &r2[2..2 + w],
    ]
}

/// Computes `out = conv3x3(input) + bias`, overwriting `out`.
pub fn conv3x3_forward(
    input: &[f64],
    weights: &[f64],
    bias: &[f64],
    shape: &ConvShape,
    out: &mut [f64],
) {
    let ConvShape { c_in, c_out, height: h, width: w } = *shape;
    debug_assert_eq!(input.len(), shape.input_len());
    debug_assert_eq!(weights.len(), shape.weight_len());
    debug_assert_eq!(bias.len(), c_out);
    debug_assert_eq!(out.len(), shape.output_len());

    let (ph, pw) = (h + 2, w + 2);
    let padded = pad1(input, c_in, h, w);
    for co in 0..c_out {
        let out_plane = &mut out[co * h * w..(co + 1) * h * w];
        out_plane.fill(bias[co]);
        for ci in 0..c_in {
            let k = &weights[(co * c_in + ci) * 9..(co * c_in + ci) * 9 + 9];
            let plane = &padded[ci * ph * pw..(ci + 1) * ph * pw];
            for y in 0..h {
                let taps = tap_windows(plane, y, w, pw);
                let out_row = &mut out_plane[y * w..(y + 1) * w];
                for x in 0..w {
                    out_row[x] += k[0] * taps[0][x]
                        + k[1] * taps[1][x]
                        + k[2] * taps[2][x]
                        + k[3] * taps[3][x]
                        + k[4] * taps[4][x]
                        + k[5] * taps[5][x]
                        + k[6] * taps[6][x]
                        + k[7] * taps[7][x]
                        + k[8] * taps[8][x];
                }
            }
        }
    }
}

/// Accumulates dLoss/dInput into `d_input` given dLoss/dOutput.
///
/// This is the padded correlation of `d_out` with the flipped kernel,
/// summed over output channels. `d_input` must be zeroed by the caller.
pub fn conv3x3_backward_input(
    d_out: &[f64],
    weights: &[f64],
    shape: &ConvShape,
    d_input: &mut [f64],
) {
    let ConvShape { c_in, c_out, height: h, width: w } = *shape;
    debug_assert_eq!(d_out.len(), shape.output_len());
    debug_assert_eq!(d_input.len(), shape.input_len());

    let (ph, pw) = (h + 2, w + 2);
    let padded = pad1(d_out, c_out, h, w);
    for ci in 0..c_in {
        let in_plane = &mut d_input[ci * h * w..(ci + 1) * h * w];
        for co in 0..c_out {
            let k = &weights[(co * c_in + ci) * 9..(co * c_in + ci) * 9 + 9];
            let plane = &padded[co * ph * pw..(co + 1) * ph * pw];
            for y in 0..h {
                let taps = tap_windows(plane, y, w, pw);
                let in_row = &mut in_plane[y * w..(y + 1) * w];
                for x in 0..w {
                    // Flipped kernel: tap (ky, kx) pairs with weight (2-ky, 2-kx).
                    in_row[x] += k[8] * taps[0][x]
                        + k[7] * taps[1][x]
                        + k[6] * taps[2][x]
                        + k[5] * taps[3][x]
                        + k[4] * taps[4][x]
                        + k[3] * taps[5][x]
                        + k[2] * taps[6][x]
                        + k[1] * taps[7][x]
                        + k[0] * taps[8][x];
                }
            }
        }
    }
}

/// Accumulates dLoss/dWeights and dLoss/dBias given the convolution input
/// and dLoss/dOutput. Both gradient buffers are added to, not overwritten.
pub fn conv3x3_backward_weights(
    input: &[f64],
    d_out: &[f64],
    shape: &ConvShape,
    d_weights: &mut [f64],
    d_bias: &mut [f64],
) {
    let ConvShape { c_in, c_out, height: h, width: w } = *shape;
    debug_assert_eq!(input.len(), shape.input_len());
    debug_assert_eq!(d_out.len(), shape.output_len());
    debug_assert_eq!(d_weights.len(), shape.weight_len());
    debug_assert_eq!(d_bias.len(), c_out);

    let (ph, pw) = (h + 2, w + 2);
    let padded = pad1(input, c_in, h, w);
    for co in 0..c_out {
        let out_plane = &d_out[co * h * w..(co + 1) * h * w];
        let mut db = 0.0;
        for v in out_plane {
            db += v;
        }
        d_bias[co] += db;

        for ci in 0..c_in {
            let plane = &padded[ci * ph * pw..(ci + 1) * ph * pw];
            let mut dk = [0.0f64; 9];
            for y in 0..h {
                let taps = tap_windows(plane, y, w, pw);
                let out_row = &out_plane[y * w..(y + 1) * w];
                for (tap, acc) in taps.iter().zip(dk.iter_mut()) {
                    let mut dot = 0.0;
                    for x in 0..w {
                        dot += out_row[x] * tap[x];
                    }
                    *acc += dot;
                }
            }
            let base = (co * c_in + ci) * 9;
            for (j, &g) in dk.iter().enumerate() {
                d_weights[base + j] += g;
            }
        }
    }
}
