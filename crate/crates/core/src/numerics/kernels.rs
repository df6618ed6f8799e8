//! Raw slice kernels behind the tape operations. No shape checking here;
//! callers validate extents first.

/// Spatial offset range `[lo, hi)` of output rows/cols that read a valid
/// input position when shifted by `delta`.
#[inline]
fn valid_range(extent: usize, delta: isize) -> (usize, usize) {
    let lo = ((-delta).max(0) as usize).min(extent);
    let hi = (extent as isize - delta).clamp(0, extent as isize) as usize;
    (lo, hi.max(lo))
}

/// Geometry of a same-padded 2-D convolution over NCHW data.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub rows: usize,
    pub cols: usize,
    pub kernel: usize,
}

impl ConvGeometry {
    fn plane(&self) -> usize {
        self.rows * self.cols
    }

    fn pad(&self) -> isize {
        (self.kernel / 2) as isize
    }
}

/// Unfolds one sample `[in_channels, rows, cols]` into `col`, laid out as
/// `[in_channels * kernel * kernel, rows * cols]`. Only positions inside the
/// image are written, so `col` must start zeroed; the padding positions
/// depend on the geometry alone and stay zero across calls.
fn im2col(g: &ConvGeometry, sample: &[f64], col: &mut [f64]) {
    let plane = g.plane();
    let pad = g.pad();
    for i in 0..g.in_channels {
        let in_plane = &sample[i * plane..][..plane];
        for ky in 0..g.kernel {
            let dy = ky as isize - pad;
            let (y0, y1) = valid_range(g.rows, dy);
            for kx in 0..g.kernel {
                let dx = kx as isize - pad;
                let (x0, x1) = valid_range(g.cols, dx);
                if x0 == x1 {
                    continue;
                }
                let row = &mut col[((i * g.kernel + ky) * g.kernel + kx) * plane..][..plane];
                for y in y0..y1 {
                    let src = ((y as isize + dy) as usize) * g.cols;
                    let src = &in_plane[(src as isize + x0 as isize + dx) as usize..][..x1 - x0];
                    row[y * g.cols + x0..y * g.cols + x1].copy_from_slice(src);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `col` back into `sample`.
fn col2im_add(g: &ConvGeometry, col: &[f64], sample: &mut [f64]) {
    let plane = g.plane();
    let pad = g.pad();
    for i in 0..g.in_channels {
        let in_plane = &mut sample[i * plane..][..plane];
        for ky in 0..g.kernel {
            let dy = ky as isize - pad;
            let (y0, y1) = valid_range(g.rows, dy);
            for kx in 0..g.kernel {
                let dx = kx as isize - pad;
                let (x0, x1) = valid_range(g.cols, dx);
                if x0 == x1 {
                    continue;
                }
                let row = &col[((i * g.kernel + ky) * g.kernel + kx) * plane..][..plane];
                for y in y0..y1 {
                    let dst = ((y as isize + dy) as usize) * g.cols;
                    let dst = &mut in_plane[(dst as isize + x0 as isize + dx) as usize..][..x1 - x0];
                    for (d, s) in dst.iter_mut().zip(&row[y * g.cols + x0..y * g.cols + x1]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Same-padded cross-correlation. `bias` may be omitted.
pub fn conv2d_forward(g: &ConvGeometry, input: &[f64], kernel: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let plane = g.plane();
    let taps = g.in_channels * g.kernel * g.kernel;
    let mut out = vec![0.0; g.batch * g.out_channels * plane];
    let mut col = vec![0.0; taps * plane];
    for b in 0..g.batch {
        im2col(g, &input[b * g.in_channels * plane..][..g.in_channels * plane], &mut col);
        for o in 0..g.out_channels {
            let out_plane = &mut out[(b * g.out_channels + o) * plane..][..plane];
            if let Some(bias) = bias {
                out_plane.fill(bias[o]);
            }
            for (&w, row) in kernel[o * taps..][..taps].iter().zip(col.chunks_exact(plane)) {
                for (d, s) in out_plane.iter_mut().zip(row) {
                    *d += w * s;
                }
            }
        }
    }
    out
}

/// Gradients of [`conv2d_forward`] with respect to input, kernel and bias.
pub fn conv2d_backward(
    g: &ConvGeometry,
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    want_input: bool,
    want_kernel: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Vec<f64>) {
    let plane = g.plane();
    let taps = g.in_channels * g.kernel * g.kernel;
    let sample = g.in_channels * plane;
    let mut d_input = want_input.then(|| vec![0.0; input.len()]);
    let mut d_kernel = want_kernel.then(|| vec![0.0; kernel.len()]);
    let mut d_bias = vec![0.0; g.out_channels];
    let mut col = vec![0.0; taps * plane];
    let mut d_col = vec![0.0; taps * plane];
    for b in 0..g.batch {
        let gout = &grad_out[b * g.out_channels * plane..][..g.out_channels * plane];
        for (db, row) in d_bias.iter_mut().zip(gout.chunks_exact(plane)) {
            *db += row.iter().sum::<f64>();
        }
        if let Some(dk) = d_kernel.as_mut() {
            im2col(g, &input[b * sample..][..sample], &mut col);
            for (dk_row, grow) in dk.chunks_exact_mut(taps).zip(gout.chunks_exact(plane)) {
                for (d, crow) in dk_row.iter_mut().zip(col.chunks_exact(plane)) {
                    *d += dot(crow, grow);
                }
            }
        }
        if let Some(di) = d_input.as_mut() {
            if g.out_channels == 0 {
                d_col.fill(0.0);
            }
            for (o, (w_row, grow)) in kernel.chunks_exact(taps).zip(gout.chunks_exact(plane)).enumerate() {
                for (&w, drow) in w_row.iter().zip(d_col.chunks_exact_mut(plane)) {
                    if o == 0 {
                        for (d, gv) in drow.iter_mut().zip(grow) {
                            *d = w * gv;
                        }
                    } else {
                        for (d, gv) in drow.iter_mut().zip(grow) {
                            *d += w * gv;
                        }
                    }
                }
            }
            col2im_add(g, &d_col, &mut di[b * sample..][..sample]);
        }
    }
    (d_input, d_kernel, d_bias)
}

/// Inner product summed in eight interleaved lanes.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut lanes = [0.0; 8];
    let (a8, b8) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = a8.remainder().iter().zip(b8.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in a8.zip(b8) {
        for l in 0..8 {
            lanes[l] += x[l] * y[l];
        }
    }
    lanes.iter().sum::<f64>() + tail
}

/// Batched `[batch, m, k] x [batch, k, n]` product.
pub fn matmul(a: &[f64], b: &[f64], batch: usize, m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; batch * m * n];
    for bi in 0..batch {
        let a = &a[bi * m * k..][..m * k];
        let b = &b[bi * k * n..][..k * n];
        let c = &mut out[bi * m * n..][..m * n];
        for i in 0..m {
            let crow = &mut c[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * k + p];
                for (cv, bv) in crow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                    *cv += av * bv;
                }
            }
        }
    }
    out
}

/// Swaps the two trailing axes of `[batch, rows, cols]`.
pub fn transpose_last2(x: &[f64], batch: usize, rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for bi in 0..batch {
        let src = &x[bi * rows * cols..][..rows * cols];
        let dst = &mut out[bi * rows * cols..][..rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                dst[c * rows + r] = src[r * cols + c];
            }
        }
    }
    out
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &[f64], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.chunks_exact(width).zip(out.chunks_exact_mut(width)) {
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    out
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
