//! Per-sample channel-last 3D convolution kernels and their adjoints.
//!
//! Weight layouts:
//! - 3x3x3 conv (pad 1): `[27][ci][co]`, taps in (kh, kw, kd) row-major order
//! - 2x2x2 stride-2 down conv and transposed up conv: `[8][ci][co]`
//! - pointwise: `[ci][co]`
//!
//! Output channel counts used by the backbone get a const-generic kernel so
//! the accumulators stay in registers; anything else takes a generic path.

use super::planar;
use crate::grid::{voxel_count, Shape3};

/// Zero-pads a channel-last block by one voxel on every side.
pub fn pad1(x: &[f32], shape: Shape3, c: usize) -> Vec<f32> {
    let [nh, nw, nd] = shape;
    let (pw, pd) = (nw + 2, nd + 2);
    let mut out = vec![0.0; (nh + 2) * pw * pd * c];
    for h in 0..nh {
        for w in 0..nw {
            let src = ((h * nw + w) * nd) * c;
            let dst = (((h + 1) * pw + w + 1) * pd + 1) * c;
            out[dst..dst + nd * c].copy_from_slice(&x[src..src + nd * c]);
        }
    }
    out
}

#[inline(always)]
fn conv3_block<const CO: usize, const B: usize>(
    xp: &[f32],
    pw: usize,
    pd: usize,
    ci: usize,
    w: &[f32],
    init: &[f32; CO],
    h: usize,
    ww: usize,
    d: usize,
) -> [[f32; CO]; B] {
    let mut acc = [*init; B];
    for kh in 0..3 {
        for kw in 0..3 {
            let row = ((h + kh) * pw + ww + kw) * pd;
            for kd in 0..3 {
                let tap = (kh * 3 + kw) * 3 + kd;
                let wt = &w[tap * ci * CO..(tap + 1) * ci * CO];
                let base = (row + d + kd) * ci;
                for c in 0..ci {
                    let wr: &[f32; CO] = wt[c * CO..c * CO + CO].try_into().unwrap();
                    for (b, accb) in acc.iter_mut().enumerate() {
                        let a = xp[base + b * ci + c];
                        for k in 0..CO {
                            accb[k] += a * wr[k];
                        }
                    }
                }
            }
        }
    }
    acc
}

fn conv3_fixed<const CO: usize>(xp: &[f32], shape: Shape3, ci: usize, w: &[f32], bias: &[f32], out: &mut [f32]) {
    let [nh, nw, nd] = shape;
    let (pw, pd) = (nw + 2, nd + 2);
    let mut init = [0.0f32; CO];
    init.copy_from_slice(bias);
    for h in 0..nh {
        for ww in 0..nw {
            let row_out = (h * nw + ww) * nd;
            let mut d = 0;
            while d + 4 <= nd {
                let acc = conv3_block::<CO, 4>(xp, pw, pd, ci, w, &init, h, ww, d);
                for (b, a) in acc.iter().enumerate() {
                    out[(row_out + d + b) * CO..(row_out + d + b + 1) * CO].copy_from_slice(a);
                }
                d += 4;
            }
            while d < nd {
                let acc = conv3_block::<CO, 1>(xp, pw, pd, ci, w, &init, h, ww, d);
                out[(row_out + d) * CO..(row_out + d + 1) * CO].copy_from_slice(&acc[0]);
                d += 1;
            }
        }
    }
}

fn conv3_generic(xp: &[f32], shape: Shape3, ci: usize, w: &[f32], bias: &[f32], co: usize, out: &mut [f32]) {
    let [nh, nw, nd] = shape;
    let (pw, pd) = (nw + 2, nd + 2);
    for h in 0..nh {
        for ww in 0..nw {
            for d in 0..nd {
                let o = &mut out[((h * nw + ww) * nd + d) * co..][..co];
                o.copy_from_slice(bias);
                for kh in 0..3 {
                    for kw in 0..3 {
                        for kd in 0..3 {
                            let tap = (kh * 3 + kw) * 3 + kd;
                            let base = (((h + kh) * pw + ww + kw) * pd + d + kd) * ci;
                            for c in 0..ci {
                                let a = xp[base + c];
                                let wr = &w[(tap * ci + c) * co..][..co];
                                for k in 0..co {
                                    o[k] += a * wr[k];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Convolution over an already padded input (`pad1`).
pub fn conv3_padded(xp: &[f32], shape: Shape3, ci: usize, w: &[f32], bias: &[f32], co: usize, out: &mut [f32]) {
    debug_assert_eq!(w.len(), 27 * ci * co);
    debug_assert_eq!(out.len(), voxel_count(shape) * co);
    match co {
        1 => conv3_fixed::<1>(xp, shape, ci, w, bias, out),
        2 => conv3_fixed::<2>(xp, shape, ci, w, bias, out),
        3 => conv3_fixed::<3>(xp, shape, ci, w, bias, out),
        4 => conv3_fixed::<4>(xp, shape, ci, w, bias, out),
        8 => conv3_fixed::<8>(xp, shape, ci, w, bias, out),
        16 => conv3_fixed::<16>(xp, shape, ci, w, bias, out),
        32 => conv3_fixed::<32>(xp, shape, ci, w, bias, out),
        64 => conv3_fixed::<64>(xp, shape, ci, w, bias, out),
        _ => conv3_generic(xp, shape, ci, w, bias, co, out),
    }
}

/// Narrow layers are faster with depth-vectorized channel-first kernels.
fn prefer_planar(shape: Shape3, ci: usize, co: usize) -> bool {
    planar::supported(shape) && ci.min(co) <= 16
}

/// 3x3x3 convolution, stride 1, zero padding 1.
pub fn conv3_forward(x: &[f32], shape: Shape3, ci: usize, w: &[f32], bias: &[f32], co: usize, out: &mut [f32]) {
    if prefer_planar(shape, ci, co) {
        planar::conv3_forward(x, shape, ci, w, bias, co, out);
    } else {
        conv3_forward_channel_last(x, shape, ci, w, bias, co, out);
    }
}

pub(crate) fn conv3_forward_channel_last(
    x: &[f32],
    shape: Shape3,
    ci: usize,
    w: &[f32],
    bias: &[f32],
    co: usize,
    out: &mut [f32],
) {
    let xp = pad1(x, shape, ci);
    conv3_padded(&xp, shape, ci, w, bias, co, out);
}

/// Input gradient: correlation of the padded output gradient with the
/// tap-flipped, channel-transposed kernel.
pub fn conv3_backward_input(g: &[f32], shape: Shape3, ci: usize, w: &[f32], co: usize, dx: &mut [f32]) {
    if prefer_planar(shape, ci, co) {
        planar::conv3_backward_input(g, shape, ci, w, co, dx);
    } else {
        conv3_backward_input_channel_last(g, shape, ci, w, co, dx);
    }
}

pub(crate) fn conv3_backward_input_channel_last(g: &[f32], shape: Shape3, ci: usize, w: &[f32], co: usize, dx: &mut [f32]) {
    let mut flipped = vec![0.0; w.len()];
    for tap in 0..27 {
        let ft = 26 - tap;
        for c in 0..ci {
            for k in 0..co {
                flipped[(ft * co + k) * ci + c] = w[(tap * ci + c) * co + k];
            }
        }
    }
    let gp = pad1(g, shape, co);
    let zero = vec![0.0; ci];
    conv3_padded(&gp, shape, co, &flipped, &zero, ci, dx);
}

#[inline(always)]
fn wgrad_pass<const CO: usize, const CB: usize>(
    xp: &[f32],
    shape: Shape3,
    ci: usize,
    g: &[f32],
    tap: [usize; 3],
    c0: usize,
) -> [[f32; CO]; CB] {
    let [nh, nw, nd] = shape;
    let (pw, pd) = (nw + 2, nd + 2);
    let mut acc = [[0.0f32; CO]; CB];
    for h in 0..nh {
        for ww in 0..nw {
            let row = ((h + tap[0]) * pw + ww + tap[1]) * pd + tap[2];
            let grow = (h * nw + ww) * nd;
            for d in 0..nd {
                let gv: &[f32; CO] = g[(grow + d) * CO..(grow + d + 1) * CO].try_into().unwrap();
                let xb = (row + d) * ci + c0;
                for (j, accj) in acc.iter_mut().enumerate() {
                    let a = xp[xb + j];
                    for k in 0..CO {
                        accj[k] += a * gv[k];
                    }
                }
            }
        }
    }
    acc
}

fn conv3_wgrad_fixed<const CO: usize>(xp: &[f32], shape: Shape3, ci: usize, g: &[f32], dw: &mut [f32]) {
    for tap in 0..27 {
        let t = [tap / 9, (tap / 3) % 3, tap % 3];
        let mut c0 = 0;
        while c0 < ci {
            let cb = (ci - c0).min(4);
            let mut emit = |rows: &[[f32; CO]]| {
                for (j, r) in rows.iter().enumerate() {
                    let dst = &mut dw[(tap * ci + c0 + j) * CO..][..CO];
                    for k in 0..CO {
                        dst[k] += r[k];
                    }
                }
            };
            match cb {
                4 => emit(&wgrad_pass::<CO, 4>(xp, shape, ci, g, t, c0)),
                3 => emit(&wgrad_pass::<CO, 3>(xp, shape, ci, g, t, c0)),
                2 => emit(&wgrad_pass::<CO, 2>(xp, shape, ci, g, t, c0)),
                _ => emit(&wgrad_pass::<CO, 1>(xp, shape, ci, g, t, c0)),
            }
            c0 += cb;
        }
    }
}

fn conv3_wgrad_generic(xp: &[f32], shape: Shape3, ci: usize, g: &[f32], co: usize, dw: &mut [f32]) {
    let [nh, nw, nd] = shape;
    let (pw, pd) = (nw + 2, nd + 2);
    for tap in 0..27 {
        let (kh, kw, kd) = (tap / 9, (tap / 3) % 3, tap % 3);
        for h in 0..nh {
            for ww in 0..nw {
                for d in 0..nd {
                    let gv = &g[((h * nw + ww) * nd + d) * co..][..co];
                    let xb = (((h + kh) * pw + ww + kw) * pd + d + kd) * ci;
                    for c in 0..ci {
                        let a = xp[xb + c];
                        let dst = &mut dw[(tap * ci + c) * co..][..co];
                        for k in 0..co {
                            dst[k] += a * gv[k];
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates weight and bias gradients of a 3x3x3 conv into `dw`, `db`.
pub fn conv3_backward_params(
    x: &[f32],
    shape: Shape3,
    ci: usize,
    g: &[f32],
    co: usize,
    dw: &mut [f32],
    db: &mut [f32],
) {
    if prefer_planar(shape, ci, co) {
        planar::conv3_backward_weights(x, shape, ci, g, co, dw);
    } else {
        conv3_backward_weights_channel_last(x, shape, ci, g, co, dw);
    }
    bias_grad(g, co, db);
}

pub(crate) fn conv3_backward_weights_channel_last(x: &[f32], shape: Shape3, ci: usize, g: &[f32], co: usize, dw: &mut [f32]) {
    let xp = pad1(x, shape, ci);
    match co {
        1 => conv3_wgrad_fixed::<1>(&xp, shape, ci, g, dw),
        2 => conv3_wgrad_fixed::<2>(&xp, shape, ci, g, dw),
        3 => conv3_wgrad_fixed::<3>(&xp, shape, ci, g, dw),
        4 => conv3_wgrad_fixed::<4>(&xp, shape, ci, g, dw),
        8 => conv3_wgrad_fixed::<8>(&xp, shape, ci, g, dw),
        16 => conv3_wgrad_fixed::<16>(&xp, shape, ci, g, dw),
        32 => conv3_wgrad_fixed::<32>(&xp, shape, ci, g, dw),
        64 => conv3_wgrad_fixed::<64>(&xp, shape, ci, g, dw),
        _ => conv3_wgrad_generic(&xp, shape, ci, g, co, dw),
    }
}

fn bias_grad(g: &[f32], co: usize, db: &mut [f32]) {
    for row in g.chunks_exact(co) {
        for k in 0..co {
            db[k] += row[k];
        }
    }
}

fn half(shape: Shape3) -> Shape3 {
    [shape[0] / 2, shape[1] / 2, shape[2] / 2]
}

fn twice(shape: Shape3) -> Shape3 {
    [shape[0] * 2, shape[1] * 2, shape[2] * 2]
}

/// Maps each coarse voxel and 2x2x2 tap to the fine-grid voxel index.
#[inline]
fn fine_index(coarse: Shape3, h: usize, w: usize, d: usize, tap: usize) -> usize {
    let fine = twice(coarse);
    let (th, tw, td) = (tap / 4, (tap / 2) % 2, tap % 2);
    ((2 * h + th) * fine[1] + 2 * w + tw) * fine[2] + 2 * d + td
}

/// `c += a * b` with row-major `a` (m x k) and `b` (k x n), either of which
/// may be read transposed from its stored layout.
#[allow(clippy::too_many_arguments)]
fn gemm_acc(m: usize, k: usize, n: usize, a: &[f32], a_t: bool, b: &[f32], b_t: bool, c: &mut [f32]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover every element addressed by these strides.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn fill_bias(out: &mut [f32], bias: &[f32]) {
    for row in out.chunks_exact_mut(bias.len()) {
        row.copy_from_slice(bias);
    }
}

/// Gathers the fine-grid 2x2x2 blocks into rows `[coarse voxel][tap][c]`.
fn gather_blocks(x: &[f32], coarse: Shape3, c: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(voxel_count(coarse) * 8 * c);
    for h in 0..coarse[0] {
        for w in 0..coarse[1] {
            for d in 0..coarse[2] {
                for tap in 0..8 {
                    let src = fine_index(coarse, h, w, d, tap) * c;
                    out.extend_from_slice(&x[src..src + c]);
                }
            }
        }
    }
    out
}

/// Inverse of [`gather_blocks`], accumulating into `dst`.
fn scatter_blocks(cols: &[f32], coarse: Shape3, c: usize, dst: &mut [f32]) {
    let mut src = 0;
    for h in 0..coarse[0] {
        for w in 0..coarse[1] {
            for d in 0..coarse[2] {
                for tap in 0..8 {
                    let at = fine_index(coarse, h, w, d, tap) * c;
                    for (o, v) in dst[at..at + c].iter_mut().zip(&cols[src..src + c]) {
                        *o += v;
                    }
                    src += c;
                }
            }
        }
    }
}

/// 2x2x2 stride-2 convolution; `shape` is the input (fine) grid.
pub fn down_forward(x: &[f32], shape: Shape3, ci: usize, w: &[f32], bias: &[f32], co: usize, out: &mut [f32]) {
    let coarse = half(shape);
    let cols = gather_blocks(x, coarse, ci);
    fill_bias(out, bias);
    gemm_acc(voxel_count(coarse), 8 * ci, co, &cols, false, w, false, out);
}

#[allow(clippy::too_many_arguments)]
pub fn down_backward(
    x: &[f32],
    shape: Shape3,
    ci: usize,
    w: &[f32],
    g: &[f32],
    co: usize,
    dx: Option<&mut [f32]>,
    dw: &mut [f32],
    db: &mut [f32],
) {
    let coarse = half(shape);
    let vc = voxel_count(coarse);
    let cols = gather_blocks(x, coarse, ci);
    gemm_acc(8 * ci, vc, co, &cols, true, g, false, dw);
    if let Some(dx) = dx {
        let mut dcols = vec![0.0; vc * 8 * ci];
        gemm_acc(vc, co, 8 * ci, g, false, w, true, &mut dcols);
        scatter_blocks(&dcols, coarse, ci, dx);
    }
    bias_grad(g, co, db);
}

/// `[8][ci][co]` to `[ci][8][co]` so a coarse voxel's 8 outputs form one row.
fn up_matrix(w: &[f32], ci: usize, co: usize) -> Vec<f32> {
    let mut out = vec![0.0; w.len()];
    for tap in 0..8 {
        for c in 0..ci {
            out[(c * 8 + tap) * co..][..co].copy_from_slice(&w[(tap * ci + c) * co..][..co]);
        }
    }
    out
}

/// 2x2x2 stride-2 transposed convolution; `shape` is the input (coarse) grid.
pub fn up_forward(x: &[f32], shape: Shape3, ci: usize, w: &[f32], bias: &[f32], co: usize, out: &mut [f32]) {
    let vc = voxel_count(shape);
    let mut cols = vec![0.0; vc * 8 * co];
    gemm_acc(vc, ci, 8 * co, x, false, &up_matrix(w, ci, co), false, &mut cols);
    fill_bias(out, bias);
    scatter_blocks(&cols, shape, co, out);
}

#[allow(clippy::too_many_arguments)]
pub fn up_backward(
    x: &[f32],
    shape: Shape3,
    ci: usize,
    w: &[f32],
    g: &[f32],
    co: usize,
    dx: Option<&mut [f32]>,
    dw: &mut [f32],
    db: &mut [f32],
) {
    let vc = voxel_count(shape);
    let gcols = gather_blocks(g, shape, co);
    let mut dwm = vec![0.0; w.len()];
    gemm_acc(ci, vc, 8 * co, x, true, &gcols, false, &mut dwm);
    for tap in 0..8 {
        for c in 0..ci {
            let src = &dwm[(c * 8 + tap) * co..][..co];
            for (d, v) in dw[(tap * ci + c) * co..][..co].iter_mut().zip(src) {
                *d += v;
            }
        }
    }
    if let Some(dx) = dx {
        gemm_acc(vc, 8 * co, ci, &gcols, false, &up_matrix(w, ci, co), true, dx);
    }
    bias_grad(g, co, db);
}

fn pointwise_small<const CO: usize>(x: &[f32], ci: usize, w: &[f32], bias: &[f32], out: &mut [f32]) {
    for (xv, o) in x.chunks_exact(ci).zip(out.chunks_exact_mut(CO)) {
        let mut acc: [f32; CO] = bias.try_into().unwrap();
        for (c, &a) in xv.iter().enumerate() {
            let wr: &[f32; CO] = w[c * CO..(c + 1) * CO].try_into().unwrap();
            for k in 0..CO {
                acc[k] += a * wr[k];
            }
        }
        o.copy_from_slice(&acc);
    }
}

pub fn pointwise_forward(x: &[f32], ci: usize, w: &[f32], bias: &[f32], co: usize, out: &mut [f32]) {
    match co {
        1 => return pointwise_small::<1>(x, ci, w, bias, out),
        2 => return pointwise_small::<2>(x, ci, w, bias, out),
        3 => return pointwise_small::<3>(x, ci, w, bias, out),
        4 => return pointwise_small::<4>(x, ci, w, bias, out),
        _ => {}
    }
    fill_bias(out, bias);
    gemm_acc(x.len() / ci, ci, co, x, false, w, false, out);
}

fn pointwise_small_backward<const CO: usize>(
    x: &[f32],
    ci: usize,
    w: &[f32],
    g: &[f32],
    dx: Option<&mut [f32]>,
    dw: &mut [f32],
    db: &mut [f32],
) {
    let mut dx = dx;
    for (v, (xv, gv)) in x.chunks_exact(ci).zip(g.chunks_exact(CO)).enumerate() {
        let gv: &[f32; CO] = gv.try_into().unwrap();
        for (c, &a) in xv.iter().enumerate() {
            let dwr: &mut [f32; CO] = (&mut dw[c * CO..(c + 1) * CO]).try_into().unwrap();
            for k in 0..CO {
                dwr[k] += a * gv[k];
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            for (c, d) in dx[v * ci..(v + 1) * ci].iter_mut().enumerate() {
                let wr: &[f32; CO] = w[c * CO..(c + 1) * CO].try_into().unwrap();
                let mut acc = 0.0;
                for k in 0..CO {
                    acc += wr[k] * gv[k];
                }
                *d += acc;
            }
        }
    }
    bias_grad(g, CO, db);
}

#[allow(clippy::too_many_arguments)]
pub fn pointwise_backward(
    x: &[f32],
    ci: usize,
    w: &[f32],
    g: &[f32],
    co: usize,
    dx: Option<&mut [f32]>,
    dw: &mut [f32],
    db: &mut [f32],
) {
    match co {
        1 => return pointwise_small_backward::<1>(x, ci, w, g, dx, dw, db),
        2 => return pointwise_small_backward::<2>(x, ci, w, g, dx, dw, db),
        3 => return pointwise_small_backward::<3>(x, ci, w, g, dx, dw, db),
        4 => return pointwise_small_backward::<4>(x, ci, w, g, dx, dw, db),
        _ => {}
    }
    let n = x.len() / ci;
    gemm_acc(ci, n, co, x, true, g, false, dw);
    if let Some(dx) = dx {
        gemm_acc(n, co, ci, g, false, w, true, dx);
    }
    bias_grad(g, co, db);
}

/// Linear interpolation taps for upsampling one axis by an integer factor
/// (half-pixel centers, edge clamped).
fn interp_taps(len: usize, factor: usize) -> Vec<(usize, usize, f32)> {
    (0..len * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, (src - i0 as f64) as f32)
        })
        .collect()
}

/// Upsamples one axis of a `[outer][len][inner]` array.
fn upsample_axis(x: &[f32], outer: usize, len: usize, inner: usize, factor: usize) -> Vec<f32> {
    let taps = interp_taps(len, factor);
    let olen = len * factor;
    let mut out = vec![0.0; outer * olen * inner];
    for o in 0..outer {
        let src = &x[o * len * inner..(o + 1) * len * inner];
        let dst = &mut out[o * olen * inner..(o + 1) * olen * inner];
        for (j, &(i0, i1, t)) in taps.iter().enumerate() {
            let row = &mut dst[j * inner..(j + 1) * inner];
            let a = &src[i0 * inner..(i0 + 1) * inner];
            let b = &src[i1 * inner..(i1 + 1) * inner];
            for k in 0..inner {
                row[k] = (1.0 - t) * a[k] + t * b[k];
            }
        }
    }
    out
}

fn upsample_axis_adjoint(g: &[f32], outer: usize, len: usize, inner: usize, factor: usize) -> Vec<f32> {
    let taps = interp_taps(len, factor);
    let olen = len * factor;
    let mut out = vec![0.0; outer * len * inner];
    for o in 0..outer {
        let src = &g[o * olen * inner..(o + 1) * olen * inner];
        let dst = &mut out[o * len * inner..(o + 1) * len * inner];
        for (j, &(i0, i1, t)) in taps.iter().enumerate() {
            for k in 0..inner {
                let v = src[j * inner + k];
                dst[i0 * inner + k] += (1.0 - t) * v;
                dst[i1 * inner + k] += t * v;
            }
        }
    }
    out
}

/// Trilinear upsampling of one channel-last sample by an integer factor.
pub fn upsample_forward(x: &[f32], shape: Shape3, c: usize, factor: usize) -> Vec<f32> {
    if factor == 1 {
        return x.to_vec();
    }
    let [h, w, d] = shape;
    let f = factor;
    let a = upsample_axis(x, h * w, d, c, f);
    let b = upsample_axis(&a, h, w, d * f * c, f);
    upsample_axis(&b, 1, h, w * f * d * f * c, f)
}

pub fn upsample_backward(g: &[f32], shape: Shape3, c: usize, factor: usize) -> Vec<f32> {
    if factor == 1 {
        return g.to_vec();
    }
    let [h, w, d] = shape;
    let f = factor;
    let a = upsample_axis_adjoint(g, 1, h, w * f * d * f * c, f);
    let b = upsample_axis_adjoint(&a, h, w, d * f * c, f);
    upsample_axis_adjoint(&b, h * w, d, c, f)
}
