//! Channel-first 3x3x3 convolution kernels vectorized along the depth axis.
//!
//! Narrow layers (few channels on either side) leave the channel-last
//! kernels starved of independent accumulators. Here each output channel
//! accumulates whole depth rows, so every FMA is a full vector. Callers pass
//! channel-last data; the transposes are a small fraction of the arithmetic.

use crate::grid::{voxel_count, Shape3};

/// Lanes per depth chunk.
const L: usize = 16;

/// Whether the planar path applies: depth rows must split into full chunks.
pub(crate) fn supported(shape: Shape3) -> bool {
    shape[2] % L == 0
}

/// Channel-first copy of a channel-last block, zero-padded by one voxel.
fn pad_planar(x: &[f32], shape: Shape3, c: usize) -> Vec<f32> {
    let [nh, nw, nd] = shape;
    let (ph, pw, pd) = (nh + 2, nw + 2, nd + 2);
    let mut out = vec![0.0; c * ph * pw * pd];
    for h in 0..nh {
        for w in 0..nw {
            let src = (h * nw + w) * nd * c;
            for d in 0..nd {
                let px = &x[src + d * c..src + (d + 1) * c];
                for (ch, &v) in px.iter().enumerate() {
                    out[((ch * ph + h + 1) * pw + w + 1) * pd + d + 1] = v;
                }
            }
        }
    }
    out
}

/// Transposes channel-first `[c][n]` into channel-last `[n][c]`.
fn to_channel_last(planar: &[f32], n: usize, c: usize, out: &mut [f32]) {
    for ch in 0..c {
        let src = &planar[ch * n..(ch + 1) * n];
        for (v, &x) in src.iter().enumerate() {
            out[v * c + ch] = x;
        }
    }
}

fn to_planar(x: &[f32], n: usize, c: usize) -> Vec<f32> {
    let mut out = vec![0.0; n * c];
    for (v, px) in x.chunks_exact(c).enumerate() {
        for (ch, &val) in px.iter().enumerate() {
            out[ch * n + v] = val;
        }
    }
    out
}

#[inline(always)]
fn load(src: &[f32], at: usize) -> [f32; L] {
    src[at..at + L].try_into().unwrap()
}

/// Output channels `k0..k0+KB` over padded planar input. `w` is `[ci][27][co]`.
fn conv_block<const KB: usize>(
    xp: &[f32],
    shape: Shape3,
    ci: usize,
    w: &[f32],
    bias: &[f32],
    co: usize,
    k0: usize,
    out: &mut [f32],
) {
    let [nh, nw, nd] = shape;
    let (ph, pw, pd) = (nh + 2, nw + 2, nd + 2);
    let n = voxel_count(shape);
    for h in 0..nh {
        for ww in 0..nw {
            for dc in (0..nd).step_by(L) {
                let mut acc = [[0.0f32; L]; KB];
                for (j, a) in acc.iter_mut().enumerate() {
                    *a = [bias[k0 + j]; L];
                }
                for c in 0..ci {
                    let wc = &w[c * 27 * co..(c + 1) * 27 * co];
                    for kh in 0..3 {
                        for kw in 0..3 {
                            let row = ((c * ph + h + kh) * pw + ww + kw) * pd + dc;
                            for kd in 0..3 {
                                let xv = load(xp, row + kd);
                                let wt = &wc[((kh * 3 + kw) * 3 + kd) * co + k0..][..KB];
                                for j in 0..KB {
                                    let wv = wt[j];
                                    for l in 0..L {
                                        acc[j][l] += wv * xv[l];
                                    }
                                }
                            }
                        }
                    }
                }
                let o = (h * nw + ww) * nd + dc;
                for (j, a) in acc.iter().enumerate() {
                    out[(k0 + j) * n + o..(k0 + j) * n + o + L].copy_from_slice(a);
                }
            }
        }
    }
}

/// Convolution of padded planar input; output is planar `[co][n]`.
/// `w` is `[ci][27][co]`.
fn conv_planar(xp: &[f32], shape: Shape3, ci: usize, w: &[f32], bias: &[f32], co: usize) -> Vec<f32> {
    let mut out = vec![0.0; co * voxel_count(shape)];
    #[cfg(target_arch = "x86_64")]
    if avx512::available() {
        avx512::conv_planar(xp, shape, ci, w, bias, co, &mut out);
        return out;
    }
    let mut k0 = 0;
    while k0 < co {
        match co - k0 {
            r if r >= 4 => conv_block::<4>(xp, shape, ci, w, bias, co, k0, &mut out),
            2 | 3 => conv_block::<2>(xp, shape, ci, w, bias, co, k0, &mut out),
            _ => conv_block::<1>(xp, shape, ci, w, bias, co, k0, &mut out),
        }
        k0 += match co - k0 {
            r if r >= 4 => 4,
            2 | 3 => 2,
            _ => 1,
        };
    }
    out
}

/// Reorders `[27][ci][co]` weights into `[ci][27][co]`, optionally flipping
/// taps and swapping channel roles (for the input gradient).
fn arrange(w: &[f32], ci: usize, co: usize, adjoint: bool) -> Vec<f32> {
    let mut out = vec![0.0; w.len()];
    for tap in 0..27 {
        for c in 0..ci {
            for k in 0..co {
                let v = w[(tap * ci + c) * co + k];
                if adjoint {
                    out[(k * 27 + 26 - tap) * ci + c] = v;
                } else {
                    out[(c * 27 + tap) * co + k] = v;
                }
            }
        }
    }
    out
}

pub(crate) fn conv3_forward(x: &[f32], shape: Shape3, ci: usize, w: &[f32], bias: &[f32], co: usize, out: &mut [f32]) {
    let xp = pad_planar(x, shape, ci);
    let planar = conv_planar(&xp, shape, ci, &arrange(w, ci, co, false), bias, co);
    to_channel_last(&planar, voxel_count(shape), co, out);
}

pub(crate) fn conv3_backward_input(g: &[f32], shape: Shape3, ci: usize, w: &[f32], co: usize, dx: &mut [f32]) {
    let gp = pad_planar(g, shape, co);
    let zero = vec![0.0; ci];
    let planar = conv_planar(&gp, shape, co, &arrange(w, ci, co, true), &zero, ci);
    to_channel_last(&planar, voxel_count(shape), ci, dx);
}

/// Weight-gradient contributions of input channel `c` and taps `(kh, kw, *)`
/// for output channels `k0..k0+KB`.
#[allow(clippy::too_many_arguments)]
fn wgrad_block<const KB: usize>(
    xp: &[f32],
    gplanar: &[f32],
    shape: Shape3,
    c: usize,
    kh: usize,
    kw: usize,
    k0: usize,
) -> [[f32; KB]; 3] {
    let [nh, nw, nd] = shape;
    let (ph, pw, pd) = (nh + 2, nw + 2, nd + 2);
    let n = voxel_count(shape);
    let mut acc = [[[0.0f32; L]; KB]; 3];
    for h in 0..nh {
        for ww in 0..nw {
            let row = ((c * ph + h + kh) * pw + ww + kw) * pd;
            let grow = (h * nw + ww) * nd;
            for dc in (0..nd).step_by(L) {
                let mut gv = [[0.0f32; L]; KB];
                for (j, g) in gv.iter_mut().enumerate() {
                    *g = load(gplanar, (k0 + j) * n + grow + dc);
                }
                for (kd, acc_kd) in acc.iter_mut().enumerate() {
                    let xv = load(xp, row + dc + kd);
                    for j in 0..KB {
                        for l in 0..L {
                            acc_kd[j][l] += xv[l] * gv[j][l];
                        }
                    }
                }
            }
        }
    }
    acc.map(|per_kd| per_kd.map(|v| v.iter().sum()))
}

pub(crate) fn conv3_backward_weights(x: &[f32], shape: Shape3, ci: usize, g: &[f32], co: usize, dw: &mut [f32]) {
    let n = voxel_count(shape);
    let xp = pad_planar(x, shape, ci);
    let gp = to_planar(g, n, co);
    #[cfg(target_arch = "x86_64")]
    if avx512::available() {
        avx512::wgrad(&xp, &gp, shape, ci, co, dw);
        return;
    }
    for c in 0..ci {
        for kh in 0..3 {
            for kw in 0..3 {
                let mut k0 = 0;
                while k0 < co {
                    let width = (co - k0).min(2);
                    let mut emit = |sums: &[[f32; 2]; 3]| {
                        for (kd, s) in sums.iter().enumerate() {
                            let tap = (kh * 3 + kw) * 3 + kd;
                            for j in 0..width {
                                dw[(tap * ci + c) * co + k0 + j] += s[j];
                            }
                        }
                    };
                    if width == 2 {
                        emit(&wgrad_block::<2>(&xp, &gp, shape, c, kh, kw, k0));
                    } else {
                        emit(&wgrad_block::<1>(&xp, &gp, shape, c, kh, kw, k0).map(|r| [r[0], 0.0]));
                    }
                    k0 += width;
                }
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
mod avx512 {
    //! The same kernels with explicit 512-bit vectors. The compiler's
    //! auto-vectorizer sticks to 256-bit registers on these cores, which
    //! halves throughput.

    use std::arch::x86_64::*;

    use super::{voxel_count, Shape3, L};

    pub(super) fn available() -> bool {
        is_x86_feature_detected!("avx512f")
    }

    /// Output channels `k0..k0+KB`, `NC` depth chunks per step.
    #[target_feature(enable = "avx512f")]
    #[allow(clippy::too_many_arguments)]
    unsafe fn conv_block<const KB: usize, const NC: usize>(
        xp: &[f32],
        shape: Shape3,
        ci: usize,
        w: &[f32],
        bias: &[f32],
        co: usize,
        k0: usize,
        out: &mut [f32],
    ) {
        let [nh, nw, nd] = shape;
        let (ph, pw, pd) = (nh + 2, nw + 2, nd + 2);
        let n = voxel_count(shape);
        assert!(xp.len() >= ci * ph * pw * pd && w.len() >= ci * 27 * co && out.len() >= co * n);
        assert!(k0 + KB <= co && nd % (L * NC) == 0);
        let (xptr, wptr, optr) = (xp.as_ptr(), w.as_ptr(), out.as_mut_ptr());
        for h in 0..nh {
            for ww in 0..nw {
                for dc in (0..nd).step_by(L * NC) {
                    let mut acc = [[_mm512_setzero_ps(); KB]; NC];
                    for chunk in acc.iter_mut() {
                        for (j, a) in chunk.iter_mut().enumerate() {
                            *a = _mm512_set1_ps(bias[k0 + j]);
                        }
                    }
                    for c in 0..ci {
                        for kh in 0..3 {
                            for kw in 0..3 {
                                let row = ((c * ph + h + kh) * pw + ww + kw) * pd + dc;
                                for kd in 0..3 {
                                    let wt = wptr.add((c * 27 + (kh * 3 + kw) * 3 + kd) * co + k0);
                                    let mut xv = [_mm512_setzero_ps(); NC];
                                    for (u, x) in xv.iter_mut().enumerate() {
                                        *x = _mm512_loadu_ps(xptr.add(row + kd + u * L));
                                    }
                                    for j in 0..KB {
                                        let wv = _mm512_set1_ps(*wt.add(j));
                                        for u in 0..NC {
                                            acc[u][j] = _mm512_fmadd_ps(wv, xv[u], acc[u][j]);
                                        }
                                    }
                                }
                            }
                        }
                    }
                    let o = (h * nw + ww) * nd + dc;
                    for (u, chunk) in acc.iter().enumerate() {
                        for (j, a) in chunk.iter().enumerate() {
                            _mm512_storeu_ps(optr.add((k0 + j) * n + o + u * L), *a);
                        }
                    }
                }
            }
        }
    }

    pub(super) fn conv_planar(xp: &[f32], shape: Shape3, ci: usize, w: &[f32], bias: &[f32], co: usize, out: &mut [f32]) {
        let wide = shape[2] % (2 * L) == 0;
        let mut k0 = 0;
        while k0 < co {
            let kb = match co - k0 {
                r if r >= 4 => 4,
                2 | 3 => 2,
                _ => 1,
            };
            // SAFETY: avx512f was detected by the caller; bounds are asserted inside.
            unsafe {
                match (kb, wide) {
                    (4, true) => conv_block::<4, 2>(xp, shape, ci, w, bias, co, k0, out),
                    (4, false) => conv_block::<4, 1>(xp, shape, ci, w, bias, co, k0, out),
                    (2, true) => conv_block::<2, 2>(xp, shape, ci, w, bias, co, k0, out),
                    (2, false) => conv_block::<2, 1>(xp, shape, ci, w, bias, co, k0, out),
                    (_, true) => conv_block::<1, 2>(xp, shape, ci, w, bias, co, k0, out),
                    (_, false) => conv_block::<1, 1>(xp, shape, ci, w, bias, co, k0, out),
                }
            }
            k0 += kb;
        }
    }

    #[target_feature(enable = "avx512f")]
    #[allow(clippy::too_many_arguments)]
    unsafe fn wgrad_block<const KB: usize>(
        xp: &[f32],
        gp: &[f32],
        shape: Shape3,
        ci: usize,
        co: usize,
        c: usize,
        kh: usize,
        kw: usize,
        k0: usize,
        dw: &mut [f32],
    ) {
        let [nh, nw, nd] = shape;
        let (ph, pw, pd) = (nh + 2, nw + 2, nd + 2);
        let n = voxel_count(shape);
        assert!(xp.len() >= ci * ph * pw * pd && gp.len() >= co * n && k0 + KB <= co && nd % L == 0);
        let (xptr, gptr) = (xp.as_ptr(), gp.as_ptr());
        let mut acc = [[_mm512_setzero_ps(); KB]; 3];
        for h in 0..nh {
            for ww in 0..nw {
                let row = ((c * ph + h + kh) * pw + ww + kw) * pd;
                let grow = (h * nw + ww) * nd;
                for dc in (0..nd).step_by(L) {
                    let mut gv = [_mm512_setzero_ps(); KB];
                    for (j, g) in gv.iter_mut().enumerate() {
                        *g = _mm512_loadu_ps(gptr.add((k0 + j) * n + grow + dc));
                    }
                    for (kd, acc_kd) in acc.iter_mut().enumerate() {
                        let xv = _mm512_loadu_ps(xptr.add(row + dc + kd));
                        for j in 0..KB {
                            acc_kd[j] = _mm512_fmadd_ps(xv, gv[j], acc_kd[j]);
                        }
                    }
                }
            }
        }
        for (kd, acc_kd) in acc.iter().enumerate() {
            let tap = (kh * 3 + kw) * 3 + kd;
            for (j, a) in acc_kd.iter().enumerate() {
                dw[(tap * ci + c) * co + k0 + j] += _mm512_reduce_add_ps(*a);
            }
        }
    }

    pub(super) fn wgrad(xp: &[f32], gp: &[f32], shape: Shape3, ci: usize, co: usize, dw: &mut [f32]) {
        for c in 0..ci {
            for kh in 0..3 {
                for kw in 0..3 {
                    let mut k0 = 0;
                    while k0 < co {
                        let kb = match co - k0 {
                            r if r >= 4 => 4,
                            2 | 3 => 2,
                            _ => 1,
                        };
                        // SAFETY: avx512f was detected by the caller; bounds are asserted inside.
                        unsafe {
                            match kb {
                                4 => wgrad_block::<4>(xp, gp, shape, ci, co, c, kh, kw, k0, dw),
                                2 => wgrad_block::<2>(xp, gp, shape, ci, co, c, kh, kw, k0, dw),
                                _ => wgrad_block::<1>(xp, gp, shape, ci, co, c, kh, kw, k0, dw),
                            }
                        }
                        k0 += kb;
                    }
                }
            }
        }
    }
}
