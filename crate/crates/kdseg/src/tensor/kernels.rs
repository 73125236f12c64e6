//! Plain (no-grad) compute kernels shared by the tape ops and inference.
//!
//! Every kernel runs its loops in a fixed order so repeated runs produce
//! bit-identical results. The stride-1 convolution paths are written as
//! shifted row axpy/dot loops, which keeps the per-output accumulation
//! order fixed while still autovectorizing.

use crate::scalar::Scalar;
use crate::tensor::{Result, Tensor, TensorError};

/// Offsets of the 8-neighborhood, fixed scan order.
pub const NEIGHBORS_8: [(isize, isize); 8] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

pub fn conv2d_output_size(
    input_hw: (usize, usize),
    kernel_hw: (usize, usize),
    stride: usize,
    padding: usize,
) -> Result<(usize, usize)> {
    let dim = |size: usize, k: usize| -> Result<usize> {
        let padded = size + 2 * padding;
        if padded < k {
            return Err(TensorError::Config(format!(
                "kernel extent {} exceeds padded input extent {}",
                k, padded
            )));
        }
        let span = padded - k;
        if span % stride != 0 {
            return Err(TensorError::Config(format!(
                "output size ({} + 2*{} - {}) / {} + 1 is not an integer",
                size, padding, k, stride
            )));
        }
        Ok(span / stride + 1)
    };
    Ok((dim(input_hw.0, kernel_hw.0)?, dim(input_hw.1, kernel_hw.1)?))
}

fn conv2d_check<S: Scalar>(
    input: &Tensor<S>,
    kernel: &Tensor<S>,
    bias: &Tensor<S>,
    stride: usize,
) -> Result<()> {
    let (_, cin, _, _) = input.dims4()?;
    let (cout, kcin, kh, kw) = kernel.dims4()?;
    if kcin != cin {
        return Err(TensorError::Dimension(format!(
            "kernel expects {} input channels, input has {}",
            kcin, cin
        )));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(TensorError::Config(format!(
            "kernel extents must be odd, got {}x{}",
            kh, kw
        )));
    }
    if bias.shape() != [cout] {
        return Err(TensorError::Dimension(format!(
            "bias shape {:?} does not match {} output channels",
            bias.shape(),
            cout
        )));
    }
    if stride == 0 {
        return Err(TensorError::Config("stride must be positive".into()));
    }
    Ok(())
}

/// Unfold one image into patch-row matrix form: row `k = (ic, ky, kx)` holds
/// the input value each output pixel sees at that tap, zero where the tap
/// falls into padding. Rows are `oh * ow` long, so the matmul loops below
/// run over long contiguous spans.
fn im2col<S: Scalar>(
    image: &[S],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    buf: &mut Vec<S>,
) {
    let n = oh * ow;
    buf.clear();
    buf.resize(cin * kh * kw * n, S::ZERO);
    let mut row_at = 0;
    for ic in 0..cin {
        let plane = &image[ic * h * w..(ic + 1) * h * w];
        for ky in 0..kh {
            let dy = ky as isize - padding as isize;
            let y0 = (-dy).max(0) as usize;
            let y1 = (oh as isize).min(h as isize - dy).max(0) as usize;
            for kx in 0..kw {
                let dx = kx as isize - padding as isize;
                let x0 = (-dx).max(0) as usize;
                let x1 = (ow as isize).min(w as isize - dx).max(0) as usize;
                let row = &mut buf[row_at * n..(row_at + 1) * n];
                if x0 < x1 {
                    for y in y0..y1 {
                        let src = (y as isize + dy) as usize * w + (x0 as isize + dx) as usize;
                        row[y * ow + x0..y * ow + x1]
                            .copy_from_slice(&plane[src..src + (x1 - x0)]);
                    }
                }
                row_at += 1;
            }
        }
    }
}

pub fn conv2d_forward<S: Scalar>(
    input: &Tensor<S>,
    kernel: &Tensor<S>,
    bias: &Tensor<S>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<S>> {
    conv2d_check(input, kernel, bias, stride)?;
    let (bsz, cin, h, w) = input.dims4()?;
    let (cout, _, kh, kw) = kernel.dims4()?;
    let (oh, ow) = conv2d_output_size((h, w), (kh, kw), stride, padding)?;

    let mut out = vec![S::ZERO; bsz * cout * oh * ow];
    let x = input.data();
    let k = kernel.data();
    let b = bias.data();
    let n = oh * ow;
    let taps = cin * kh * kw;

    if stride == 1 {
        let mut cols = Vec::new();
        for bi in 0..bsz {
            im2col(
                &x[bi * cin * h * w..(bi + 1) * cin * h * w],
                cin,
                h,
                w,
                kh,
                kw,
                padding,
                oh,
                ow,
                &mut cols,
            );
            let out_batch = &mut out[bi * cout * n..(bi + 1) * cout * n];
            for (oc, out_plane) in out_batch.chunks_exact_mut(n).enumerate() {
                out_plane.fill(b[oc]);
                // Fixed tap order keeps per-output accumulation deterministic.
                for (ki, wv) in k[oc * taps..(oc + 1) * taps].iter().enumerate() {
                    let wv = *wv;
                    let col_row = &cols[ki * n..(ki + 1) * n];
                    for (o, i) in out_plane.iter_mut().zip(col_row) {
                        *o += wv * *i;
                    }
                }
            }
        }
    } else {
        for bi in 0..bsz {
            for oc in 0..cout {
                let out_plane = &mut out[(bi * cout + oc) * n..(bi * cout + oc + 1) * n];
                out_plane.fill(b[oc]);
                for ic in 0..cin {
                    let in_plane = &x[(bi * cin + ic) * h * w..(bi * cin + ic + 1) * h * w];
                    let k_base = ((oc * cin) + ic) * kh * kw;
                    for y in 0..oh {
                        for xo in 0..ow {
                            let mut acc = S::ZERO;
                            for ky in 0..kh {
                                let iy = (y * stride + ky) as isize - padding as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (xo * stride + kx) as isize - padding as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    acc += k[k_base + ky * kw + kx]
                                        * in_plane[iy as usize * w + ix as usize];
                                }
                            }
                            out_plane[y * ow + xo] += acc;
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[bsz, cout, oh, ow], out)
}

/// Fold patch-row gradients back onto the input plane, adding overlaps in
/// fixed tap order. Inverse of `im2col` up to the padding zeros.
fn col2im_add<S: Scalar>(
    gcols: &[S],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    gin: &mut [S],
) {
    let n = oh * ow;
    let mut row_at = 0;
    for ic in 0..cin {
        let gin_plane = &mut gin[ic * h * w..(ic + 1) * h * w];
        for ky in 0..kh {
            let dy = ky as isize - padding as isize;
            let y0 = (-dy).max(0) as usize;
            let y1 = (oh as isize).min(h as isize - dy).max(0) as usize;
            for kx in 0..kw {
                let dx = kx as isize - padding as isize;
                let x0 = (-dx).max(0) as usize;
                let x1 = (ow as isize).min(w as isize - dx).max(0) as usize;
                let row = &gcols[row_at * n..(row_at + 1) * n];
                if x0 < x1 {
                    for y in y0..y1 {
                        let dst = (y as isize + dy) as usize * w + (x0 as isize + dx) as usize;
                        let gin_row = &mut gin_plane[dst..dst + (x1 - x0)];
                        for (gi, gv) in gin_row.iter_mut().zip(&row[y * ow + x0..y * ow + x1]) {
                            *gi += *gv;
                        }
                    }
                }
                row_at += 1;
            }
        }
    }
}

/// Dot product with a fixed 8-lane chunk layout; deterministic and wide.
fn lane_dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut lanes = [S::ZERO; 8];
    let mut a_chunks = a.chunks_exact(8);
    let mut b_chunks = b.chunks_exact(8);
    for (a8, b8) in (&mut a_chunks).zip(&mut b_chunks) {
        for l in 0..8 {
            lanes[l] += a8[l] * b8[l];
        }
    }
    let mut acc = S::ZERO;
    for (av, bv) in a_chunks.remainder().iter().zip(b_chunks.remainder()) {
        acc += *av * *bv;
    }
    for l in lanes {
        acc += l;
    }
    acc
}

/// Gradients of `conv2d_forward` w.r.t. input, kernel and bias.
pub fn conv2d_backward<S: Scalar>(
    input: &Tensor<S>,
    kernel: &Tensor<S>,
    stride: usize,
    padding: usize,
    grad_out: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    let (bsz, cin, h, w) = input.dims4()?;
    let (cout, _, kh, kw) = kernel.dims4()?;
    let (_, _, oh, ow) = grad_out.dims4()?;

    let x = input.data();
    let k = kernel.data();
    let g = grad_out.data();
    let n = oh * ow;
    let taps = cin * kh * kw;

    let mut gin = vec![S::ZERO; x.len()];
    let mut gk = vec![S::ZERO; k.len()];
    let mut gb = vec![S::ZERO; cout];

    if stride == 1 {
        let mut cols = Vec::new();
        let mut gcols = Vec::new();
        for bi in 0..bsz {
            im2col(
                &x[bi * cin * h * w..(bi + 1) * cin * h * w],
                cin,
                h,
                w,
                kh,
                kw,
                padding,
                oh,
                ow,
                &mut cols,
            );
            gcols.clear();
            gcols.resize(taps * n, S::ZERO);
            for oc in 0..cout {
                let g_plane = &g[(bi * cout + oc) * n..(bi * cout + oc + 1) * n];
                let mut acc = S::ZERO;
                for gv in g_plane {
                    acc += *gv;
                }
                gb[oc] += acc;
                for ki in 0..taps {
                    gk[oc * taps + ki] += lane_dot(g_plane, &cols[ki * n..(ki + 1) * n]);
                    let wv = k[oc * taps + ki];
                    let grow = &mut gcols[ki * n..(ki + 1) * n];
                    for (gc, gv) in grow.iter_mut().zip(g_plane) {
                        *gc += wv * *gv;
                    }
                }
            }
            col2im_add(
                &gcols,
                cin,
                h,
                w,
                kh,
                kw,
                padding,
                oh,
                ow,
                &mut gin[bi * cin * h * w..(bi + 1) * cin * h * w],
            );
        }
    } else {
        for bi in 0..bsz {
            for oc in 0..cout {
                let g_plane = &g[(bi * cout + oc) * n..(bi * cout + oc + 1) * n];
                let mut acc = S::ZERO;
                for gv in g_plane {
                    acc += *gv;
                }
                gb[oc] += acc;

                for ic in 0..cin {
                    let in_plane = &x[(bi * cin + ic) * h * w..(bi * cin + ic + 1) * h * w];
                    let gin_plane =
                        &mut gin[(bi * cin + ic) * h * w..(bi * cin + ic + 1) * h * w];
                    let k_base = ((oc * cin) + ic) * kh * kw;
                    for y in 0..oh {
                        for xo in 0..ow {
                            let gv = g_plane[y * ow + xo];
                            for ky in 0..kh {
                                let iy = (y * stride + ky) as isize - padding as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (xo * stride + kx) as isize - padding as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let idx = iy as usize * w + ix as usize;
                                    gin_plane[idx] += k[k_base + ky * kw + kx] * gv;
                                    gk[k_base + ky * kw + kx] += in_plane[idx] * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    Ok((
        Tensor::from_vec(&[bsz, cin, h, w], gin)?,
        Tensor::from_vec(&[cout, cin, kh, kw], gk)?,
        Tensor::from_vec(&[cout], gb)?,
    ))
}

pub fn relu_forward<S: Scalar>(input: &Tensor<S>) -> Tensor<S> {
    let mut out = input.clone();
    out.clear_grad();
    for v in out.data_mut() {
        if *v < S::ZERO {
            *v = S::ZERO;
        }
    }
    out
}

pub fn relu_backward<S: Scalar>(input: &Tensor<S>, grad_out: &Tensor<S>) -> Tensor<S> {
    let mut gin = vec![S::ZERO; input.numel()];
    for (gi, (x, g)) in gin.iter_mut().zip(input.data().iter().zip(grad_out.data())) {
        if *x > S::ZERO {
            *gi = *g;
        }
    }
    Tensor::from_vec(input.shape(), gin).expect("relu grad shape")
}

/// Per-pixel softmax over the channel dimension, max-subtracted for stability.
pub fn softmax_channels_forward<S: Scalar>(logits: &Tensor<S>) -> Result<Tensor<S>> {
    let (bsz, c, h, w) = logits.dims4()?;
    if c < 2 {
        return Err(TensorError::Config(format!(
            "softmax over channels needs at least 2 classes, got {}",
            c
        )));
    }
    logits.check_finite("softmax_channels input")?;
    let plane = h * w;
    let x = logits.data();
    let mut out = vec![S::ZERO; x.len()];
    for bi in 0..bsz {
        let base = bi * c * plane;
        for p in 0..plane {
            let mut m = x[base + p];
            for ch in 1..c {
                m = m.maximum(x[base + ch * plane + p]);
            }
            let mut denom = S::ZERO;
            for ch in 0..c {
                let e = (x[base + ch * plane + p] - m).exp();
                out[base + ch * plane + p] = e;
                denom += e;
            }
            for ch in 0..c {
                out[base + ch * plane + p] = out[base + ch * plane + p] / denom;
            }
        }
    }
    Tensor::from_vec(logits.shape(), out)
}

pub fn softmax_channels_backward<S: Scalar>(
    softmax_out: &Tensor<S>,
    grad_out: &Tensor<S>,
) -> Tensor<S> {
    let (bsz, c, h, w) = softmax_out.dims4().expect("softmax output is 4-d");
    let plane = h * w;
    let s = softmax_out.data();
    let g = grad_out.data();
    let mut gin = vec![S::ZERO; s.len()];
    for bi in 0..bsz {
        let base = bi * c * plane;
        for p in 0..plane {
            let mut dot = S::ZERO;
            for ch in 0..c {
                let i = base + ch * plane + p;
                dot += g[i] * s[i];
            }
            for ch in 0..c {
                let i = base + ch * plane + p;
                gin[i] = s[i] * (g[i] - dot);
            }
        }
    }
    Tensor::from_vec(softmax_out.shape(), gin).expect("softmax grad shape")
}

pub fn upsample_nearest2x_forward<S: Scalar>(input: &Tensor<S>) -> Result<Tensor<S>> {
    let (bsz, c, h, w) = input.dims4()?;
    let x = input.data();
    let mut out = vec![S::ZERO; bsz * c * 4 * h * w];
    let (oh, ow) = (2 * h, 2 * w);
    for pc in 0..bsz * c {
        let in_plane = &x[pc * h * w..(pc + 1) * h * w];
        let out_plane = &mut out[pc * oh * ow..(pc + 1) * oh * ow];
        for y in 0..h {
            for xo in 0..w {
                let v = in_plane[y * w + xo];
                let r0 = 2 * y * ow + 2 * xo;
                out_plane[r0] = v;
                out_plane[r0 + 1] = v;
                out_plane[r0 + ow] = v;
                out_plane[r0 + ow + 1] = v;
            }
        }
    }
    Tensor::from_vec(&[bsz, c, oh, ow], out)
}

pub fn upsample_nearest2x_backward<S: Scalar>(grad_out: &Tensor<S>) -> Tensor<S> {
    let (bsz, c, oh, ow) = grad_out.dims4().expect("upsample grad is 4-d");
    let (h, w) = (oh / 2, ow / 2);
    let g = grad_out.data();
    let mut gin = vec![S::ZERO; bsz * c * h * w];
    for pc in 0..bsz * c {
        let g_plane = &g[pc * oh * ow..(pc + 1) * oh * ow];
        let gin_plane = &mut gin[pc * h * w..(pc + 1) * h * w];
        for y in 0..h {
            for xo in 0..w {
                let r0 = 2 * y * ow + 2 * xo;
                gin_plane[y * w + xo] =
                    g_plane[r0] + g_plane[r0 + 1] + g_plane[r0 + ow] + g_plane[r0 + ow + 1];
            }
        }
    }
    Tensor::from_vec(&[bsz, c, h, w], gin).expect("upsample grad shape")
}

/// Top-left pick of every 2x2 block. Composed after a stride-1 convolution
/// this equals a floor-semantics stride-2 convolution exactly.
pub fn subsample2x_forward<S: Scalar>(input: &Tensor<S>) -> Result<Tensor<S>> {
    let (bsz, c, h, w) = input.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(TensorError::Dimension(format!(
            "subsample2x needs even spatial extents, got {}x{}",
            h, w
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = vec![S::ZERO; bsz * c * oh * ow];
    for pc in 0..bsz * c {
        let in_plane = &x[pc * h * w..(pc + 1) * h * w];
        let out_plane = &mut out[pc * oh * ow..(pc + 1) * oh * ow];
        for y in 0..oh {
            for xo in 0..ow {
                out_plane[y * ow + xo] = in_plane[2 * y * w + 2 * xo];
            }
        }
    }
    Tensor::from_vec(&[bsz, c, oh, ow], out)
}

pub fn subsample2x_backward<S: Scalar>(input_shape: &[usize], grad_out: &Tensor<S>) -> Tensor<S> {
    let (bsz, c, oh, ow) = grad_out.dims4().expect("subsample grad is 4-d");
    let (h, w) = (input_shape[2], input_shape[3]);
    let g = grad_out.data();
    let mut gin = vec![S::ZERO; bsz * c * h * w];
    for pc in 0..bsz * c {
        let g_plane = &g[pc * oh * ow..(pc + 1) * oh * ow];
        let gin_plane = &mut gin[pc * h * w..(pc + 1) * h * w];
        for y in 0..oh {
            for xo in 0..ow {
                gin_plane[2 * y * w + 2 * xo] = g_plane[y * ow + xo];
            }
        }
    }
    Tensor::from_vec(input_shape, gin).expect("subsample grad shape")
}

/// Per-pixel sum over valid 8-neighbors of the squared logit-vector
/// difference. Border pixels only sum over neighbors inside the image.
pub fn consistency_forward<S: Scalar>(logits: &Tensor<S>) -> Result<Tensor<S>> {
    let (bsz, c, h, w) = logits.dims4()?;
    let plane = h * w;
    let x = logits.data();
    let mut out = vec![S::ZERO; bsz * plane];
    for bi in 0..bsz {
        let base = bi * c * plane;
        for y in 0..h {
            for xo in 0..w {
                let mut acc = S::ZERO;
                for (dy, dx) in NEIGHBORS_8 {
                    let ny = y as isize + dy;
                    let nx = xo as isize + dx;
                    if ny < 0 || ny >= h as isize || nx < 0 || nx >= w as isize {
                        continue;
                    }
                    let p0 = y * w + xo;
                    let p1 = ny as usize * w + nx as usize;
                    for ch in 0..c {
                        let d = x[base + ch * plane + p1] - x[base + ch * plane + p0];
                        acc += d * d;
                    }
                }
                out[bi * plane + y * w + xo] = acc;
            }
        }
    }
    Tensor::from_vec(&[bsz, 1, h, w], out)
}

pub fn consistency_backward<S: Scalar>(logits: &Tensor<S>, grad_out: &Tensor<S>) -> Tensor<S> {
    let (bsz, c, h, w) = logits.dims4().expect("consistency input is 4-d");
    let plane = h * w;
    let x = logits.data();
    let g = grad_out.data();
    let two = S::from_f64(2.0);
    let mut gin = vec![S::ZERO; x.len()];
    for bi in 0..bsz {
        let base = bi * c * plane;
        let gbase = bi * plane;
        for y in 0..h {
            for xo in 0..w {
                let p0 = y * w + xo;
                for (dy, dx) in NEIGHBORS_8 {
                    let ny = y as isize + dy;
                    let nx = xo as isize + dx;
                    if ny < 0 || ny >= h as isize || nx < 0 || nx >= w as isize {
                        continue;
                    }
                    let p1 = ny as usize * w + nx as usize;
                    // d/dl(p0) of both c(p0) and c(p1) terms involving this pair.
                    let gsum = g[gbase + p0] + g[gbase + p1];
                    for ch in 0..c {
                        let d = x[base + ch * plane + p0] - x[base + ch * plane + p1];
                        gin[base + ch * plane + p0] += two * d * gsum;
                    }
                }
            }
        }
    }
    Tensor::from_vec(logits.shape(), gin).expect("consistency grad shape")
}

/// Sum over non-ignored pixels of the negative log softmax probability of
/// the labeled class. Returns the sum and the kept-pixel count.
pub fn cross_entropy_sum_forward<S: Scalar>(
    logits: &Tensor<S>,
    labels: &[u8],
    ignore: u8,
) -> Result<(S, usize)> {
    let (bsz, c, h, w) = logits.dims4()?;
    let plane = h * w;
    if labels.len() != bsz * plane {
        return Err(TensorError::Dimension(format!(
            "labels hold {} entries, logits cover {} pixels",
            labels.len(),
            bsz * plane
        )));
    }
    let x = logits.data();
    let mut total = S::ZERO;
    let mut kept = 0usize;
    for bi in 0..bsz {
        let base = bi * c * plane;
        for p in 0..plane {
            let lab = labels[bi * plane + p];
            if lab == ignore {
                continue;
            }
            if lab as usize >= c {
                return Err(TensorError::Usage(format!(
                    "label {} out of range for {} classes",
                    lab, c
                )));
            }
            let mut m = x[base + p];
            for ch in 1..c {
                m = m.maximum(x[base + ch * plane + p]);
            }
            let mut denom = S::ZERO;
            for ch in 0..c {
                denom += (x[base + ch * plane + p] - m).exp();
            }
            let lse = m + denom.ln();
            total += lse - x[base + lab as usize * plane + p];
            kept += 1;
        }
    }
    Ok((total, kept))
}

pub fn cross_entropy_sum_backward<S: Scalar>(
    logits: &Tensor<S>,
    labels: &[u8],
    ignore: u8,
    upstream: S,
) -> Tensor<S> {
    let (bsz, c, h, w) = logits.dims4().expect("cross-entropy input is 4-d");
    let plane = h * w;
    let x = logits.data();
    let mut gin = vec![S::ZERO; x.len()];
    for bi in 0..bsz {
        let base = bi * c * plane;
        for p in 0..plane {
            let lab = labels[bi * plane + p];
            if lab == ignore {
                continue;
            }
            let mut m = x[base + p];
            for ch in 1..c {
                m = m.maximum(x[base + ch * plane + p]);
            }
            let mut denom = S::ZERO;
            for ch in 0..c {
                denom += (x[base + ch * plane + p] - m).exp();
            }
            for ch in 0..c {
                let prob = (x[base + ch * plane + p] - m).exp() / denom;
                let indicator = if ch == lab as usize { S::ONE } else { S::ZERO };
                gin[base + ch * plane + p] = upstream * (prob - indicator);
            }
        }
    }
    Tensor::from_vec(logits.shape(), gin).expect("cross-entropy grad shape")
}
