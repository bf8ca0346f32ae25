//! Per-sample kernels for each layer type. Activations are row-major
//! `[channels][height][width]` slices.

use super::tensor::Scalar;

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.in_c * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

pub(crate) fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], col: &mut [T]) {
    let hw = g.col_cols();
    let k = g.kernel;
    for c in 0..g.in_c {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.in_h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.in_w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

pub(crate) fn col2im<T: Scalar>(g: &ConvGeom, col: &[T], dx: &mut [T]) {
    let hw = g.col_cols();
    let k = g.kernel;
    for c in 0..g.in_c {
        let plane = &mut dx[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &col[row * hw..(row + 1) * hw];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            plane[iy as usize * g.in_w + ix as usize] =
                                plane[iy as usize * g.in_w + ix as usize] + src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `y = W·col + b` for one sample; `col` is scratch of size rows×cols.
pub(crate) fn conv_forward<T: Scalar>(g: &ConvGeom, w: &[T], b: &[T], x: &[T], col: &mut [T], y: &mut [T]) {
    let out_c = b.len();
    im2col(g, x, col);
    T::gemm(out_c, g.col_rows(), g.col_cols(), w, false, col, false, y, false);
    let hw = g.col_cols();
    for (o, &bias) in b.iter().enumerate() {
        for v in &mut y[o * hw..(o + 1) * hw] {
            *v = *v + bias;
        }
    }
}

/// Accumulates weight/bias gradients and, if `dx` is given, writes the input
/// gradient for one sample.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward<T: Scalar>(
    g: &ConvGeom,
    w: &[T],
    x: &[T],
    dy: &[T],
    col: &mut [T],
    dw: &mut [T],
    db: &mut [T],
    dx: Option<&mut [T]>,
) {
    let out_c = db.len();
    let (rows, hw) = (g.col_rows(), g.col_cols());
    im2col(g, x, col);
    T::gemm(out_c, hw, rows, dy, false, col, true, dw, true);
    for (o, d) in db.iter_mut().enumerate() {
        *d = *d + dy[o * hw..(o + 1) * hw].iter().copied().sum();
    }
    if let Some(dx) = dx {
        T::gemm(rows, out_c, hw, w, true, dy, false, col, false);
        dx.fill(T::zero());
        col2im(g, col, dx);
    }
}

pub(crate) fn maxpool_forward<T: Scalar>(
    (c, h, w): (usize, usize, usize),
    size: usize,
    stride: usize,
    x: &[T],
    y: &mut [T],
    argmax: &mut [u32],
) {
    let oh = (h - size) / stride + 1;
    let ow = (w - size) / stride + 1;
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                let mut idx = 0;
                for ky in 0..size {
                    for kx in 0..size {
                        let i = ch * h * w + (oy * stride + ky) * w + ox * stride + kx;
                        if x[i] > best {
                            best = x[i];
                            idx = i;
                        }
                    }
                }
                let o = ch * oh * ow + oy * ow + ox;
                y[o] = best;
                argmax[o] = idx as u32;
            }
        }
    }
}

pub(crate) fn maxpool_backward<T: Scalar>(dy: &[T], argmax: &[u32], dx: &mut [T]) {
    dx.fill(T::zero());
    for (&d, &i) in dy.iter().zip(argmax) {
        dx[i as usize] = dx[i as usize] + d;
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LrnParams {
    pub local_size: usize,
    pub alpha: f64,
    pub beta: f64,
    pub k: f64,
}

impl LrnParams {
    /// Channels `[c - size/2, c + (size-1)/2]`, clipped to the valid range.
    fn window(&self, c: usize, channels: usize) -> (usize, usize) {
        let lo = c.saturating_sub(self.local_size / 2);
        let hi = (c + (self.local_size - 1) / 2).min(channels - 1);
        (lo, hi)
    }
}

/// `y_c = x_c · s_c^-β` with `s_c = k + α/n Σ_{window(c)} x²`; stores `s`.
pub(crate) fn lrn_forward<T: Scalar>(p: &LrnParams, c: usize, hw: usize, x: &[T], y: &mut [T], scale: &mut [T]) {
    let a = T::from_f64(p.alpha / p.local_size as f64);
    let k = T::from_f64(p.k);
    let nb = T::from_f64(-p.beta);
    for ch in 0..c {
        let (lo, hi) = p.window(ch, c);
        for i in 0..hw {
            let mut sq = T::zero();
            for j in lo..=hi {
                let v = x[j * hw + i];
                sq = sq + v * v;
            }
            let s = k + a * sq;
            scale[ch * hw + i] = s;
            y[ch * hw + i] = x[ch * hw + i] * s.powf(nb);
        }
    }
}

pub(crate) fn lrn_backward<T: Scalar>(
    p: &LrnParams,
    c: usize,
    hw: usize,
    x: &[T],
    y: &[T],
    scale: &[T],
    dy: &[T],
    dx: &mut [T],
) {
    let coef = T::from_f64(2.0 * p.alpha * p.beta / p.local_size as f64);
    let nb = T::from_f64(-p.beta);
    for ch in 0..c {
        for i in 0..hw {
            // Channels j whose window contains ch.
            let mut acc = T::zero();
            for j in 0..c {
                let (lo, hi) = p.window(j, c);
                if lo <= ch && ch <= hi {
                    let idx = j * hw + i;
                    acc = acc + dy[idx] * y[idx] / scale[idx];
                }
            }
            let idx = ch * hw + i;
            dx[idx] = dy[idx] * scale[idx].powf(nb) - coef * x[idx] * acc;
        }
    }
}

/// Softmax of `logits` into `probs`, returning `-ln p[label]`.
pub(crate) fn softmax_xent<T: Scalar>(logits: &[T], probs: &mut [T], label: Option<usize>) -> T {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for (p, &l) in probs.iter_mut().zip(logits) {
        *p = (l - max).exp();
        total = total + *p;
    }
    for p in probs.iter_mut() {
        *p = *p / total;
    }
    match label {
        Some(l) => -(probs[l].max(T::min_positive_value())).ln(),
        None => T::zero(),
    }
}
