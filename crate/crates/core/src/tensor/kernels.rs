//! Slice-level forward and backward kernels used by the tape.

use super::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.padding - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.padding - self.kw) / self.stride + 1
    }

    /// Rows of the unfolded patch matrix.
    pub fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn out_plane(&self) -> usize {
        self.out_h() * self.out_w()
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Unfold one image `[Cin, H, W]` into `[Cin*kh*kw, Ho*Wo]`.
fn im2col<T: Scalar>(g: &ConvGeom, img: &[T], cols: &mut [T]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let pad = g.padding as isize;
    let mut row = 0;
    for c in 0..g.cin {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.h as isize {
                        drow.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Fold `[Cin*kh*kw, Ho*Wo]` back onto an image, accumulating overlaps.
fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], img: &mut [T]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let pad = g.padding as isize;
    let mut row = 0;
    for c in 0..g.cin {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        if ix >= 0 && ix < g.w as isize {
                            drow[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Returns the output and the unfolded patches (kept for the backward pass).
pub fn conv2d_forward<T: Scalar>(
    g: &ConvGeom,
    input: &[T],
    weight: &[T],
    bias: Option<&[T]>,
) -> (Vec<T>, Vec<T>) {
    let k = g.patch_len();
    let p = g.out_plane();
    let in_img = g.cin * g.h * g.w;
    let mut out = vec![T::zero(); g.n * g.cout * p];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.n * k * p]
    };
    for n in 0..g.n {
        let img = &input[n * in_img..(n + 1) * in_img];
        let patches: &[T] = if g.is_pointwise() {
            img
        } else {
            let c = &mut cols[n * k * p..(n + 1) * k * p];
            im2col(g, img, c);
            c
        };
        let o = &mut out[n * g.cout * p..(n + 1) * g.cout * p];
        if let Some(b) = bias {
            for (co, chunk) in o.chunks_mut(p).enumerate() {
                chunk.iter_mut().for_each(|v| *v = b[co]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(
            g.cout,
            k,
            p,
            T::one(),
            weight,
            (k as isize, 1),
            patches,
            (p as isize, 1),
            beta,
            o,
            p as isize,
        );
    }
    (out, cols)
}

pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    input: &[T],
    cols: &[T],
    weight: &[T],
    grad_out: &[T],
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (need_input, need_weight, need_bias) = need;
    let k = g.patch_len();
    let p = g.out_plane();
    let in_img = g.cin * g.h * g.w;
    let mut gi = need_input.then(|| vec![T::zero(); input.len()]);
    let mut gw = need_weight.then(|| vec![T::zero(); weight.len()]);
    let mut gb = need_bias.then(|| vec![T::zero(); g.cout]);
    let mut dcols = if need_input && !g.is_pointwise() {
        vec![T::zero(); k * p]
    } else {
        Vec::new()
    };
    for n in 0..g.n {
        let go = &grad_out[n * g.cout * p..(n + 1) * g.cout * p];
        let patches: &[T] = if g.is_pointwise() {
            &input[n * in_img..(n + 1) * in_img]
        } else {
            &cols[n * k * p..(n + 1) * k * p]
        };
        if let Some(gw) = gw.as_mut() {
            // dW += dOut (Cout x P) * patches^T (P x K)
            T::gemm(
                g.cout,
                p,
                k,
                T::one(),
                go,
                (p as isize, 1),
                patches,
                (1, p as isize),
                T::one(),
                gw,
                k as isize,
            );
        }
        if let Some(gb) = gb.as_mut() {
            for (co, chunk) in go.chunks(p).enumerate() {
                gb[co] += chunk.iter().copied().sum::<T>();
            }
        }
        if let Some(gi) = gi.as_mut() {
            let gimg = &mut gi[n * in_img..(n + 1) * in_img];
            // dPatches = W^T (K x Cout) * dOut (Cout x P)
            if g.is_pointwise() {
                T::gemm(
                    k,
                    g.cout,
                    p,
                    T::one(),
                    weight,
                    (1, k as isize),
                    go,
                    (p as isize, 1),
                    T::one(),
                    gimg,
                    p as isize,
                );
            } else {
                T::gemm(
                    k,
                    g.cout,
                    p,
                    T::one(),
                    weight,
                    (1, k as isize),
                    go,
                    (p as isize, 1),
                    T::zero(),
                    &mut dcols,
                    p as isize,
                );
                col2im(g, &dcols, gimg);
            }
        }
    }
    ConvGrads {
        input: gi,
        weight: gw,
        bias: gb,
    }
}

/// Per-channel batch statistics: (mean, biased variance).
pub fn channel_stats<T: Scalar>(input: &[T], n: usize, c: usize, plane: usize) -> (Vec<f64>, Vec<f64>) {
    let m = (n * plane) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..n {
            let off = (b * c + ch) * plane;
            s += input[off..off + plane].iter().map(|v| v.as_f64()).sum::<f64>();
        }
        let mu = s / m;
        let mut q = 0.0;
        for b in 0..n {
            let off = (b * c + ch) * plane;
            q += input[off..off + plane]
                .iter()
                .map(|v| {
                    let d = v.as_f64() - mu;
                    d * d
                })
                .sum::<f64>();
        }
        mean[ch] = mu;
        var[ch] = q / m;
    }
    (mean, var)
}

/// Normalise with given per-channel shift and inverse std, then apply the affine map.
/// Returns (output, normalised values).
#[allow(clippy::too_many_arguments)]
pub fn normalize_affine<T: Scalar>(
    input: &[T],
    n: usize,
    c: usize,
    plane: usize,
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
    beta: &[T],
) -> (Vec<T>, Vec<T>) {
    let mut out = vec![T::zero(); input.len()];
    let mut xhat = vec![T::zero(); input.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            for i in off..off + plane {
                let xh = (input[i] - mean[ch]) * inv_std[ch];
                xhat[i] = xh;
                out[i] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    (out, xhat)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Stable `max(x,0) - x*t + ln(1 + exp(-|x|))`.
pub fn bce_with_logit(x: f64, t: f64) -> f64 {
    x.max(0.0) - x * t + (-x.abs()).exp().ln_1p()
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn smooth_l1(d: f64) -> f64 {
    let a = d.abs();
    if a < 1.0 {
        0.5 * d * d
    } else {
        a - 0.5
    }
}

pub fn smooth_l1_grad(d: f64) -> f64 {
    if d.abs() < 1.0 {
        d
    } else {
        d.signum()
    }
}
