//! Raw loops behind the graph operators. Everything here works on flat
//! row-major slices; shape validation happens in the graph.

use crate::scalar::Scalar;

/// `out[m×n] = a[m×k] · b[k×n]`
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + a_ip * bv;
            }
        }
    }
    out
}

/// `out[m×k] = a[m×n] · b[k×n]ᵀ`
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, n: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * k];
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            out[i * k + p] = dot(a_row, b_row);
        }
    }
    out
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
pub fn matmul_tn_acc<T: Scalar>(out: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == T::zero() {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + a_ip * bv;
            }
        }
    }
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    // Four partial sums keep the loop vectorizable while staying deterministic.
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] = acc[l] + a[c * 4 + l] * b[c * 4 + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s = s + a[i] * b[i];
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    /// Output extent along one axis, or `None` when the stride does not divide evenly.
    pub fn out_extent(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
        let padded = size + 2 * padding;
        if padded < kernel || stride == 0 || (padded - kernel) % stride != 0 {
            return None;
        }
        Some((padded - kernel) / stride + 1)
    }

    fn patch_len(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfold one sample `[C, H, W]` into `[C·kh·kw, out_h·out_w]`.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeometry) -> Vec<T> {
    let cols = g.out_len();
    let mut out = vec![T::zero(); g.patch_len() * cols];
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[oy * g.out_w + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Fold `[C·kh·kw, out_h·out_w]` back onto `[C, H, W]`, accumulating overlaps.
fn col2im_acc<T: Scalar>(cols_data: &[T], g: &ConvGeometry, dx: &mut [T]) {
    let cols = g.out_len();
    for c in 0..g.channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let src = &cols_data[row * cols..(row + 1) * cols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            let at = iy as usize * g.width + ix as usize;
                            plane[at] = plane[at] + src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `x[N,C,H,W]` with `w[O,C,kh,kw]`.
pub fn conv2d<T: Scalar>(x: &[T], w: &[T], batch: usize, out_ch: usize, g: &ConvGeometry) -> Vec<T> {
    let in_len = g.channels * g.height * g.width;
    let out_len = out_ch * g.out_len();
    let mut out = Vec::with_capacity(batch * out_len);
    for n in 0..batch {
        let cols = im2col(&x[n * in_len..(n + 1) * in_len], g);
        out.extend(matmul(w, &cols, out_ch, g.patch_len(), g.out_len()));
    }
    out
}

/// Gradients of [`conv2d`] with respect to input and kernel.
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    batch: usize,
    out_ch: usize,
    g: &ConvGeometry,
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let in_len = g.channels * g.height * g.width;
    let out_len = out_ch * g.out_len();
    let mut dx = want_dx.then(|| vec![T::zero(); batch * in_len]);
    let mut dw = want_dw.then(|| vec![T::zero(); w.len()]);
    for n in 0..batch {
        let dy_n = &dy[n * out_len..(n + 1) * out_len];
        if let Some(dw) = dw.as_mut() {
            let cols = im2col(&x[n * in_len..(n + 1) * in_len], g);
            let part = matmul_nt(dy_n, &cols, out_ch, g.out_len(), g.patch_len());
            for (a, b) in dw.iter_mut().zip(part) {
                *a = *a + b;
            }
        }
        if let Some(dx) = dx.as_mut() {
            let mut dcols = vec![T::zero(); g.patch_len() * g.out_len()];
            matmul_tn_acc(&mut dcols, w, dy_n, out_ch, g.patch_len(), g.out_len());
            col2im_acc(&dcols, g, &mut dx[n * in_len..(n + 1) * in_len]);
        }
    }
    (dx, dw)
}

/// Nearest-neighbour ×2 upsampling of the last two axes.
pub fn upsample2x<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(planes * h * w * 4);
    for p in 0..planes {
        let plane = &x[p * h * w..(p + 1) * h * w];
        for i in 0..h {
            let row = &plane[i * w..(i + 1) * w];
            for _ in 0..2 {
                for &v in row {
                    out.push(v);
                    out.push(v);
                }
            }
        }
    }
    out
}

pub fn upsample2x_backward<T: Scalar>(dy: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &dy[p * oh * ow..(p + 1) * oh * ow];
        for i in 0..h {
            for j in 0..w {
                let a = src[(2 * i) * ow + 2 * j];
                let b = src[(2 * i) * ow + 2 * j + 1];
                let c = src[(2 * i + 1) * ow + 2 * j];
                let d = src[(2 * i + 1) * ow + 2 * j + 1];
                dx[p * h * w + i * w + j] = (a + b) + (c + d);
            }
        }
    }
    dx
}

/// Per-channel layout of a `[N, C, rest…]` tensor.
#[derive(Debug, Clone, Copy)]
pub struct ChannelLayout {
    pub batch: usize,
    pub channels: usize,
    pub inner: usize,
}

impl ChannelLayout {
    pub fn from_shape(shape: &[usize]) -> Option<Self> {
        if shape.len() < 2 {
            return None;
        }
        Some(Self {
            batch: shape[0],
            channels: shape[1],
            inner: shape[2..].iter().product(),
        })
    }

    /// Elements per channel across the batch.
    pub fn per_channel(&self) -> usize {
        self.batch * self.inner
    }

    #[inline]
    pub fn for_channel(&self, c: usize, mut f: impl FnMut(usize)) {
        for n in 0..self.batch {
            let base = (n * self.channels + c) * self.inner;
            for i in base..base + self.inner {
                f(i);
            }
        }
    }
}

/// Normalized activations and inverse standard deviations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct BatchNormSaved<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub batch_stats: bool,
}

pub fn batchnorm<T: Scalar>(
    x: &[T],
    layout: ChannelLayout,
    gamma: &[T],
    beta: &[T],
    fixed: Option<(&[T], &[T])>,
    eps: T,
) -> (Vec<T>, BatchNormSaved<T>) {
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(layout.channels);
    let count = T::of(layout.per_channel() as f64);
    for c in 0..layout.channels {
        let (mean, var) = match fixed {
            Some((m, v)) => (m[c], v[c]),
            None => {
                let mut s = T::zero();
                layout.for_channel(c, |i| s = s + x[i]);
                let mean = s / count;
                let mut ss = T::zero();
                layout.for_channel(c, |i| ss = ss + (x[i] - mean) * (x[i] - mean));
                (mean, ss / count)
            }
        };
        let inv = T::one() / (var + eps).max(T::variance_floor()).sqrt();
        inv_std.push(inv);
        layout.for_channel(c, |i| {
            let h = (x[i] - mean) * inv;
            xhat[i] = h;
            y[i] = gamma[c] * h + beta[c];
        });
    }
    (
        y,
        BatchNormSaved {
            xhat,
            inv_std,
            batch_stats: fixed.is_none(),
        },
    )
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batchnorm_backward<T: Scalar>(
    dy: &[T],
    layout: ChannelLayout,
    gamma: &[T],
    saved: &BatchNormSaved<T>,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); dy.len()];
    let mut dgamma = vec![T::zero(); layout.channels];
    let mut dbeta = vec![T::zero(); layout.channels];
    let count = T::of(layout.per_channel() as f64);
    for c in 0..layout.channels {
        let (mut sum_dy, mut sum_dy_xhat) = (T::zero(), T::zero());
        layout.for_channel(c, |i| {
            sum_dy = sum_dy + dy[i];
            sum_dy_xhat = sum_dy_xhat + dy[i] * saved.xhat[i];
        });
        dgamma[c] = sum_dy_xhat;
        dbeta[c] = sum_dy;
        let scale = gamma[c] * saved.inv_std[c];
        if saved.batch_stats {
            let mean_dy = sum_dy / count;
            let mean_dy_xhat = sum_dy_xhat / count;
            layout.for_channel(c, |i| {
                dx[i] = scale * (dy[i] - mean_dy - saved.xhat[i] * mean_dy_xhat);
            });
        } else {
            layout.for_channel(c, |i| dx[i] = scale * dy[i]);
        }
    }
    (dx, dgamma, dbeta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2×3
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3×2
        let c = matmul(&a, &b, 2, 3, 2);
        assert_eq!(c, vec![58.0, 64.0, 139.0, 154.0]);
        // bᵀ stored as 2×3
        let bt = [7.0, 9.0, 11.0, 8.0, 10.0, 12.0];
        assert_eq!(matmul_nt(&a, &bt, 2, 3, 2), c);
        // aᵀ stored as 3×2, so aᵀᵀ·b
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let mut out = vec![0.0; 4];
        matmul_tn_acc(&mut out, &at, &b, 3, 2, 2);
        assert_eq!(out, c);
    }

    #[test]
    fn non_integral_conv_extent_rejected() {
        assert_eq!(ConvGeometry::out_extent(5, 3, 2, 0), Some(2));
        assert_eq!(ConvGeometry::out_extent(4, 3, 2, 0), None);
        assert_eq!(ConvGeometry::out_extent(2, 3, 1, 0), None);
    }

    #[test]
    fn zero_variance_channel_stays_finite() {
        let layout = ChannelLayout::from_shape(&[3, 1]).unwrap();
        let (y, _) = batchnorm(&[2.0f64, 2.0, 2.0], layout, &[1.0], &[0.0], None, 0.0);
        assert!(y.iter().all(|v| v.is_finite() && *v == 0.0));
    }
}
