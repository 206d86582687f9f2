//! Slice-level numeric kernels shared by the tape and the plain operators.
//!
//! Matrices are row-major. A "transposed" operand is read with swapped
//! strides, never materialized.

/// `c = alpha * op(a) * op(b) + beta * c` where `op(a)` is `m x k` and
/// `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m) } else { (k, 1) };
    let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
    // SAFETY: the slices hold exactly m*k, k*n and m*n values (checked
    // above in debug builds and by every caller), and the strides address
    // only those ranges.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
    for r in 0..rows {
        let src = &x[r * cols..(r + 1) * cols];
        let dst = &mut out[r * cols..(r + 1) * cols];
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            sum += *d;
        }
        let inv = 1.0 / sum;
        dst.iter_mut().for_each(|d| *d *= inv);
    }
}

/// Standardizes each row to zero mean and unit population variance
/// (plus `eps`). Returns the per-row `1/sqrt(var + eps)`.
pub fn standardize_rows(x: &[f64], rows: usize, cols: usize, eps: f64, out: &mut [f64]) -> Vec<f64> {
    let n = cols as f64;
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let src = &x[r * cols..(r + 1) * cols];
        // shifted by the first value so constant rows give an exact mean
        let x0 = src[0];
        let mean = x0 + src.iter().map(|v| v - x0).sum::<f64>() / n;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let is = 1.0 / (var + eps).sqrt();
        for (d, &s) in out[r * cols..(r + 1) * cols].iter_mut().zip(src) {
            *d = (s - mean) * is;
        }
        inv_std.push(is);
    }
    inv_std
}

/// Column-wise counterpart of [`standardize_rows`].
pub fn standardize_cols(x: &[f64], rows: usize, cols: usize, eps: f64, out: &mut [f64]) -> Vec<f64> {
    let n = rows as f64;
    let first = &x[..cols];
    let mut mean = vec![0.0; cols];
    for r in 0..rows {
        for ((m, &v), &x0) in mean.iter_mut().zip(&x[r * cols..(r + 1) * cols]).zip(first) {
            *m += v - x0;
        }
    }
    for (m, &x0) in mean.iter_mut().zip(first) {
        *m = x0 + *m / n;
    }
    let mut var = vec![0.0; cols];
    for r in 0..rows {
        for ((s, &v), &m) in var.iter_mut().zip(&x[r * cols..(r + 1) * cols]).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v / n + eps).sqrt()).collect();
    for r in 0..rows {
        let row = r * cols..(r + 1) * cols;
        for (((d, &v), &m), &is) in out[row.clone()]
            .iter_mut()
            .zip(&x[row])
            .zip(&mean)
            .zip(&inv_std)
        {
            *d = (v - m) * is;
        }
    }
    inv_std
}

/// Geometry of a stride-1 zero-padded 2-D correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.pad + 1 - self.kh
    }

    pub fn out_w(&self) -> usize {
        self.w + 2 * self.pad + 1 - self.kw
    }

    pub fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn fits(&self) -> bool {
        self.kh <= self.h + 2 * self.pad && self.kw <= self.w + 2 * self.pad
    }
}

/// Unfolds `x: [c_in, h, w]` into `[c_in*kh*kw, out_h*out_w]`.
pub fn im2col(x: &[f64], g: ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    let mut cols = vec![0.0; g.patch_len() * p];
    for c in 0..g.c_in {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = oy + ky;
                    if iy < g.pad || iy >= g.h + g.pad {
                        continue;
                    }
                    let src_row = &x[(c * g.h + iy - g.pad) * g.w..][..g.w];
                    let x_lo = g.pad.saturating_sub(kx);
                    let x_hi = (g.w + g.pad).saturating_sub(kx).min(ow);
                    for ox in x_lo..x_hi {
                        dst[oy * ow + ox] = src_row[ox + kx - g.pad];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto `dx`.
pub fn col2im_add(cols: &[f64], g: ConvGeom, dx: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    for c in 0..g.c_in {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = oy + ky;
                    if iy < g.pad || iy >= g.h + g.pad {
                        continue;
                    }
                    let dst_row = &mut dx[(c * g.h + iy - g.pad) * g.w..][..g.w];
                    let x_lo = g.pad.saturating_sub(kx);
                    let x_hi = (g.w + g.pad).saturating_sub(kx).min(ow);
                    for ox in x_lo..x_hi {
                        dst_row[ox + kx - g.pad] += src[oy * ow + ox];
                    }
                }
            }
        }
    }
}

/// 2x2 mean pooling of `[c, h, w]`; `h` and `w` must be even.
pub fn avgpool2(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let base = (ch * h + 2 * oy) * w + 2 * ox;
                out[(ch * oh + oy) * ow + ox] =
                    0.25 * (x[base] + x[base + 1] + x[base + w] + x[base + w + 1]);
            }
        }
    }
    out
}
