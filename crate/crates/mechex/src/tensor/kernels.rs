//! Raw numerical kernels behind the tape ops.
//!
//! Convolution is cross-correlation (no kernel flip) with a fixed 3x3 window
//! and 1-pixel zero padding, lowered to GEMM through im2col. All kernels are
//! single-threaded and accumulate in a fixed order, so outputs are
//! bit-reproducible; parallelism happens one level up, across networks.

use super::Real;

/// C[m,n] = alpha * A_eff[m,k] * B_eff[k,n] + beta * C.
///
/// `ta`/`tb` mark the stored matrix as transposed: with `ta` the slice holds
/// a row-major `[k, m]` matrix used as its transpose.
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: Real,
    a: &[Real],
    ta: bool,
    b: &[Real],
    tb: bool,
    beta: Real,
    c: &mut [Real],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };

    #[cfg(not(feature = "f64"))]
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    #[cfg(feature = "f64")]
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfold one `[cin, h, w]` image into `[cin*9, h*w]` columns for a 3x3
/// window with 1-px zero padding.
pub fn im2col3(input: &[Real], cin: usize, h: usize, w: usize, cols: &mut [Real]) {
    debug_assert_eq!(input.len(), cin * h * w);
    debug_assert_eq!(cols.len(), cin * 9 * h * w);
    let hw = h * w;
    for c in 0..cin {
        let plane = &input[c * hw..(c + 1) * hw];
        for ky in 0..3usize {
            for kx in 0..3usize {
                let row = &mut cols[(c * 9 + ky * 3 + kx) * hw..(c * 9 + ky * 3 + kx + 1) * hw];
                for y in 0..h {
                    let iy = y as isize + ky as isize - 1;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    match kx {
                        0 => {
                            dst[0] = 0.0;
                            dst[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => dst.copy_from_slice(src),
                        _ => {
                            dst[..w - 1].copy_from_slice(&src[1..]);
                            dst[w - 1] = 0.0;
                        }
                    }
                }
            }
        }
    }
}

/// Fold `[cin*9, h*w]` column gradients back onto a `[cin, h, w]` image
/// (scatter-add; inverse layout of [`im2col3`]).
pub fn col2im3(cols: &[Real], cin: usize, h: usize, w: usize, out: &mut [Real]) {
    debug_assert_eq!(out.len(), cin * h * w);
    let hw = h * w;
    for c in 0..cin {
        let plane = &mut out[c * hw..(c + 1) * hw];
        for ky in 0..3usize {
            for kx in 0..3usize {
                let row = &cols[(c * 9 + ky * 3 + kx) * hw..(c * 9 + ky * 3 + kx + 1) * hw];
                for y in 0..h {
                    let iy = y as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    match kx {
                        0 => {
                            for x in 1..w {
                                dst[x - 1] += src[x];
                            }
                        }
                        1 => {
                            for x in 0..w {
                                dst[x] += src[x];
                            }
                        }
                        _ => {
                            for x in 0..w - 1 {
                                dst[x + 1] += src[x];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// out[b,co,:,:] = weight[co,:,:,:] * cols(input[b]) + bias[co]
pub fn conv2d_forward(
    input: &[Real],
    weight: &[Real],
    bias: &[Real],
    batch: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    out: &mut [Real],
) {
    let hw = h * w;
    let mut cols = vec![0.0; cin * 9 * hw];
    for b in 0..batch {
        im2col3(&input[b * cin * hw..(b + 1) * cin * hw], cin, h, w, &mut cols);
        let out_b = &mut out[b * cout * hw..(b + 1) * cout * hw];
        gemm(cout, cin * 9, hw, 1.0, weight, false, &cols, false, 0.0, out_b);
        for co in 0..cout {
            let v = bias[co];
            for o in &mut out_b[co * hw..(co + 1) * hw] {
                *o += v;
            }
        }
    }
}

/// Gradients of conv2d. Any of the output slots may be `None` to skip that
/// computation. `d_weight`/`d_bias` are accumulated into.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    input: &[Real],
    weight: &[Real],
    d_out: &[Real],
    batch: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    mut d_input: Option<&mut [Real]>,
    mut d_weight: Option<&mut [Real]>,
    mut d_bias: Option<&mut [Real]>,
) {
    let hw = h * w;
    let mut cols = vec![0.0; cin * 9 * hw];
    let mut dcols = vec![0.0; cin * 9 * hw];
    for b in 0..batch {
        let d_out_b = &d_out[b * cout * hw..(b + 1) * cout * hw];
        if d_weight.is_some() {
            im2col3(&input[b * cin * hw..(b + 1) * cin * hw], cin, h, w, &mut cols);
            // dW[co, ck] += sum_p dOut[co, p] * cols[ck, p]
            gemm(
                cout,
                hw,
                cin * 9,
                1.0,
                d_out_b,
                false,
                &cols,
                true,
                1.0,
                d_weight.as_deref_mut().unwrap(),
            );
        }
        if let Some(d_input) = d_input.as_deref_mut() {
            // dcols = W^T @ dOut, then fold back onto the image
            gemm(cin * 9, cout, hw, 1.0, weight, true, d_out_b, false, 0.0, &mut dcols);
            col2im3(&dcols, cin, h, w, &mut d_input[b * cin * hw..(b + 1) * cin * hw]);
        }
        if let Some(d_bias) = d_bias.as_deref_mut() {
            for co in 0..cout {
                d_bias[co] += d_out_b[co * hw..(co + 1) * hw].iter().sum::<Real>();
            }
        }
    }
}

/// 2x2 average pooling, stride 2.
pub fn avg_pool2_forward(input: &[Real], planes: usize, h: usize, w: usize, out: &mut [Real]) {
    let (oh, ow) = (h / 2, w / 2);
    for p in 0..planes {
        let src = &input[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                let base = 2 * y * w + 2 * x;
                dst[y * ow + x] = 0.25 * (src[base] + src[base + 1] + src[base + w] + src[base + w + 1]);
            }
        }
    }
}

pub fn avg_pool2_backward(d_out: &[Real], planes: usize, h: usize, w: usize, d_input: &mut [Real]) {
    let (oh, ow) = (h / 2, w / 2);
    for p in 0..planes {
        let src = &d_out[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut d_input[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for x in 0..ow {
                let g = 0.25 * src[y * ow + x];
                let base = 2 * y * w + 2 * x;
                dst[base] += g;
                dst[base + 1] += g;
                dst[base + w] += g;
                dst[base + w + 1] += g;
            }
        }
    }
}

/// Nearest-neighbour 2x upsampling (each pixel becomes a 2x2 block).
pub fn upsample2_forward(input: &[Real], planes: usize, h: usize, w: usize, out: &mut [Real]) {
    let ow = 2 * w;
    for p in 0..planes {
        let src = &input[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
        for y in 0..h {
            for x in 0..w {
                let v = src[y * w + x];
                let base = 2 * y * ow + 2 * x;
                dst[base] = v;
                dst[base + 1] = v;
                dst[base + ow] = v;
                dst[base + ow + 1] = v;
            }
        }
    }
}

pub fn upsample2_backward(d_out: &[Real], planes: usize, h: usize, w: usize, d_input: &mut [Real]) {
    let ow = 2 * w;
    for p in 0..planes {
        let src = &d_out[p * 4 * h * w..(p + 1) * 4 * h * w];
        let dst = &mut d_input[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let base = 2 * y * ow + 2 * x;
                dst[y * w + x] += src[base] + src[base + 1] + src[base + ow] + src[base + ow + 1];
            }
        }
    }
}

/// out[b,o] = sum_f input[b,f] * weight[o,f] + bias[o]
pub fn linear_forward(
    input: &[Real],
    weight: &[Real],
    bias: &[Real],
    batch: usize,
    features: usize,
    outputs: usize,
    out: &mut [Real],
) {
    gemm(batch, features, outputs, 1.0, input, false, weight, true, 0.0, out);
    for b in 0..batch {
        for (o, &bv) in bias.iter().enumerate() {
            out[b * outputs + o] += bv;
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn linear_backward(
    input: &[Real],
    weight: &[Real],
    d_out: &[Real],
    batch: usize,
    features: usize,
    outputs: usize,
    d_input: Option<&mut [Real]>,
    d_weight: Option<&mut [Real]>,
    d_bias: Option<&mut [Real]>,
) {
    if let Some(d_input) = d_input {
        gemm(batch, outputs, features, 1.0, d_out, false, weight, false, 1.0, d_input);
    }
    if let Some(d_weight) = d_weight {
        gemm(outputs, batch, features, 1.0, d_out, true, input, false, 1.0, d_weight);
    }
    if let Some(d_bias) = d_bias {
        for b in 0..batch {
            for o in 0..outputs {
                d_bias[o] += d_out[b * outputs + o];
            }
        }
    }
}

/// Per-channel mean and biased variance over batch and spatial dims of a
/// `[b, c, h, w]` tensor.
pub fn channel_stats(input: &[Real], batch: usize, channels: usize, hw: usize) -> (Vec<Real>, Vec<Real>) {
    let n = (batch * hw) as Real;
    let mut mean = vec![0.0; channels];
    let mut var = vec![0.0; channels];
    for b in 0..batch {
        for c in 0..channels {
            let plane = &input[(b * channels + c) * hw..(b * channels + c + 1) * hw];
            mean[c] += plane.iter().sum::<Real>();
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    for b in 0..batch {
        for c in 0..channels {
            let plane = &input[(b * channels + c) * hw..(b * channels + c + 1) * hw];
            let mu = mean[c];
            var[c] += plane.iter().map(|&x| (x - mu) * (x - mu)).sum::<Real>();
        }
    }
    for v in &mut var {
        *v /= n;
    }
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_triple_loop() {
        // 2x3 * 3x2
        let a = [1., 2., 3., 4., 5., 6.];
        let b = [7., 8., 9., 10., 11., 12.];
        let mut c = [0.0; 4];
        gemm(2, 3, 2, 1.0, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [58., 64., 139., 154.]);

        // transposed A: stored [3, 2] used as [2, 3]
        let at = [1., 4., 2., 5., 3., 6.];
        let mut c2 = [0.0; 4];
        gemm(2, 3, 2, 1.0, &at, true, &b, false, 0.0, &mut c2);
        assert_eq!(c2, c);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> for random-ish x, y
        let (cin, h, w) = (2, 4, 5);
        let x: Vec<Real> = (0..cin * h * w).map(|i| (i as Real * 0.37).sin()).collect();
        let y: Vec<Real> = (0..cin * 9 * h * w).map(|i| (i as Real * 0.11).cos()).collect();
        let mut cols = vec![0.0; cin * 9 * h * w];
        im2col3(&x, cin, h, w, &mut cols);
        let lhs: Real = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut folded = vec![0.0; cin * h * w];
        col2im3(&y, cin, h, w, &mut folded);
        let rhs: Real = x.iter().zip(&folded).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-3 * lhs.abs().max(1.0));
    }
}
