//! Attention blocks of the future decoder: dense self-attention over a
//! pooled token grid, and single-scale deformable cross-attention against the
//! previous frame's features.

use super::{dot, matvec_acc, matvec_backward};
use crate::grid::Tap;

/// Token pooling geometry: the query grid is average-pooled in
/// `stride x stride` blocks, attention runs densely over the tokens, and the
/// result is broadcast back to the cells of each block.
pub struct PoolGrid {
    pub cells: [usize; 2],
    pub stride: usize,
    pub tokens: [usize; 2],
}

impl PoolGrid {
    pub fn new(cells: [usize; 2], stride: usize) -> Self {
        let tokens = [cells[0].div_ceil(stride), cells[1].div_ceil(stride)];
        Self { cells, stride, tokens }
    }

    pub fn token_count(&self) -> usize {
        self.tokens[0] * self.tokens[1]
    }

    #[inline]
    pub fn token_of(&self, x: usize, y: usize) -> usize {
        (x / self.stride) * self.tokens[1] + y / self.stride
    }

    /// Number of cells pooled into a token.
    pub fn block_size(&self, token: usize) -> usize {
        let tx = token / self.tokens[1];
        let ty = token % self.tokens[1];
        let bx = (self.cells[0] - tx * self.stride).min(self.stride);
        let by = (self.cells[1] - ty * self.stride).min(self.stride);
        bx * by
    }
}

pub struct SelfAttnCache {
    pub pooled: Vec<f64>,
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    pub attn: Vec<f64>,
    pub y: Vec<f64>,
}

pub struct SelfAttnWeights<'a> {
    pub wq: &'a [f64],
    pub wk: &'a [f64],
    pub wv: &'a [f64],
    pub wo: &'a [f64],
    pub bq: &'a [f64],
    pub bk: &'a [f64],
    pub bv: &'a [f64],
    pub bo: &'a [f64],
}

pub struct SelfAttnGrads<'a> {
    pub wq: &'a mut [f64],
    pub wk: &'a mut [f64],
    pub wv: &'a mut [f64],
    pub wo: &'a mut [f64],
    pub bq: &'a mut [f64],
    pub bk: &'a mut [f64],
    pub bv: &'a mut [f64],
    pub bo: &'a mut [f64],
}

fn softmax_rows(scores: &mut [f64], row_len: usize) {
    for row in scores.chunks_mut(row_len) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
}

/// Dense single-head attention over the pooled grid; output broadcast back to
/// cell resolution. `x` is `(cell, channel)`.
pub fn self_attention_forward(
    x: &[f64],
    channels: usize,
    grid: &PoolGrid,
    w: &SelfAttnWeights,
) -> (Vec<f64>, SelfAttnCache) {
    let n_tok = grid.token_count();
    let mut pooled = vec![0.0; n_tok * channels];
    for cx in 0..grid.cells[0] {
        for cy in 0..grid.cells[1] {
            let t = grid.token_of(cx, cy);
            let src = &x[(cx * grid.cells[1] + cy) * channels..][..channels];
            for (d, s) in pooled[t * channels..(t + 1) * channels].iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    for t in 0..n_tok {
        let inv = 1.0 / grid.block_size(t) as f64;
        for v in pooled[t * channels..(t + 1) * channels].iter_mut() {
            *v *= inv;
        }
    }

    let project = |wm: &[f64], b: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; n_tok * channels];
        for t in 0..n_tok {
            let dst = &mut out[t * channels..(t + 1) * channels];
            dst.copy_from_slice(b);
            matvec_acc(wm, &pooled[t * channels..(t + 1) * channels], dst);
        }
        out
    };
    let q = project(w.wq, w.bq);
    let k = project(w.wk, w.bk);
    let v = project(w.wv, w.bv);

    let scale = 1.0 / (channels as f64).sqrt();
    let mut attn = vec![0.0; n_tok * n_tok];
    for a in 0..n_tok {
        for b in 0..n_tok {
            attn[a * n_tok + b] = scale
                * dot(
                    &q[a * channels..(a + 1) * channels],
                    &k[b * channels..(b + 1) * channels],
                );
        }
    }
    softmax_rows(&mut attn, n_tok);

    let mut y = vec![0.0; n_tok * channels];
    for a in 0..n_tok {
        for b in 0..n_tok {
            let wgt = attn[a * n_tok + b];
            if wgt == 0.0 {
                continue;
            }
            for (d, s) in y[a * channels..(a + 1) * channels]
                .iter_mut()
                .zip(&v[b * channels..(b + 1) * channels])
            {
                *d += wgt * s;
            }
        }
    }

    let mut out = vec![0.0; grid.cells[0] * grid.cells[1] * channels];
    let mut o_tok = vec![0.0; n_tok * channels];
    for t in 0..n_tok {
        let dst = &mut o_tok[t * channels..(t + 1) * channels];
        dst.copy_from_slice(w.bo);
        matvec_acc(w.wo, &y[t * channels..(t + 1) * channels], dst);
    }
    for cx in 0..grid.cells[0] {
        for cy in 0..grid.cells[1] {
            let t = grid.token_of(cx, cy);
            out[(cx * grid.cells[1] + cy) * channels..][..channels]
                .copy_from_slice(&o_tok[t * channels..(t + 1) * channels]);
        }
    }
    (out, SelfAttnCache { pooled, q, k, v, attn, y })
}

#[allow(clippy::too_many_arguments)]
pub fn self_attention_backward(
    channels: usize,
    grid: &PoolGrid,
    w: &SelfAttnWeights,
    cache: &SelfAttnCache,
    upstream: &[f64],
    g_x: &mut [f64],
    g: &mut SelfAttnGrads,
) {
    let n_tok = grid.token_count();
    // Broadcast backward: token gradient is the sum over its block's cells.
    let mut g_o = vec![0.0; n_tok * channels];
    for cx in 0..grid.cells[0] {
        for cy in 0..grid.cells[1] {
            let t = grid.token_of(cx, cy);
            let src = &upstream[(cx * grid.cells[1] + cy) * channels..][..channels];
            for (d, s) in g_o[t * channels..(t + 1) * channels].iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    let mut g_y = vec![0.0; n_tok * channels];
    for t in 0..n_tok {
        let gy = &g_o[t * channels..(t + 1) * channels];
        for (d, s) in g.bo.iter_mut().zip(gy) {
            *d += s;
        }
        matvec_backward(
            w.wo,
            &cache.y[t * channels..(t + 1) * channels],
            gy,
            &mut g_y[t * channels..(t + 1) * channels],
            g.wo,
        );
    }

    let mut g_attn = vec![0.0; n_tok * n_tok];
    let mut g_v = vec![0.0; n_tok * channels];
    for a in 0..n_tok {
        for b in 0..n_tok {
            let wgt = cache.attn[a * n_tok + b];
            let gy = &g_y[a * channels..(a + 1) * channels];
            g_attn[a * n_tok + b] = dot(gy, &cache.v[b * channels..(b + 1) * channels]);
            if wgt != 0.0 {
                for (d, s) in g_v[b * channels..(b + 1) * channels].iter_mut().zip(gy) {
                    *d += wgt * s;
                }
            }
        }
    }
    // Softmax backward per row.
    let mut g_scores = vec![0.0; n_tok * n_tok];
    for a in 0..n_tok {
        let row = &cache.attn[a * n_tok..(a + 1) * n_tok];
        let grow = &g_attn[a * n_tok..(a + 1) * n_tok];
        let row_dot = dot(row, grow);
        for b in 0..n_tok {
            g_scores[a * n_tok + b] = row[b] * (grow[b] - row_dot);
        }
    }
    let scale = 1.0 / (channels as f64).sqrt();
    let mut g_q = vec![0.0; n_tok * channels];
    let mut g_k = vec![0.0; n_tok * channels];
    for a in 0..n_tok {
        for b in 0..n_tok {
            let gs = scale * g_scores[a * n_tok + b];
            if gs == 0.0 {
                continue;
            }
            for c in 0..channels {
                g_q[a * channels + c] += gs * cache.k[b * channels + c];
                g_k[b * channels + c] += gs * cache.q[a * channels + c];
            }
        }
    }

    let mut g_pooled = vec![0.0; n_tok * channels];
    for t in 0..n_tok {
        let pooled = &cache.pooled[t * channels..(t + 1) * channels];
        let gp = &mut g_pooled[t * channels..(t + 1) * channels];
        let gq = &g_q[t * channels..(t + 1) * channels];
        let gk = &g_k[t * channels..(t + 1) * channels];
        let gv = &g_v[t * channels..(t + 1) * channels];
        for (d, s) in g.bq.iter_mut().zip(gq) {
            *d += s;
        }
        for (d, s) in g.bk.iter_mut().zip(gk) {
            *d += s;
        }
        for (d, s) in g.bv.iter_mut().zip(gv) {
            *d += s;
        }
        matvec_backward(w.wq, pooled, gq, gp, g.wq);
        matvec_backward(w.wk, pooled, gk, gp, g.wk);
        matvec_backward(w.wv, pooled, gv, gp, g.wv);
    }
    // Pooling backward: each cell receives its token's gradient / block size.
    for cx in 0..grid.cells[0] {
        for cy in 0..grid.cells[1] {
            let t = grid.token_of(cx, cy);
            let inv = 1.0 / grid.block_size(t) as f64;
            let src = &g_pooled[t * channels..(t + 1) * channels];
            for (d, s) in g_x[(cx * grid.cells[1] + cy) * channels..][..channels]
                .iter_mut()
                .zip(src)
            {
                *d += inv * s;
            }
        }
    }
}

pub struct CrossAttnWeights<'a> {
    pub off_w: &'a [f64],
    pub off_b: &'a [f64],
    pub wt_w: &'a [f64],
    pub wt_b: &'a [f64],
    pub out_w: &'a [f64],
    pub out_b: &'a [f64],
}

pub struct CrossAttnGrads<'a> {
    pub off_w: &'a mut [f64],
    pub off_b: &'a mut [f64],
    pub wt_w: &'a mut [f64],
    pub wt_b: &'a mut [f64],
    pub out_w: &'a mut [f64],
    pub out_b: &'a mut [f64],
}

pub struct CrossAttnCache {
    pub positions: Vec<[f64; 2]>, // (cell, k)
    pub alpha: Vec<f64>,          // (cell, k)
    pub samples: Vec<f64>,        // (cell, k, channel)
    pub y: Vec<f64>,              // (cell, channel)
}

#[inline]
fn corner_value(prev: &[f64], cells: [usize; 2], channels: usize, cx: i64, cy: i64, c: usize) -> f64 {
    if cx < 0 || cy < 0 || cx as usize >= cells[0] || cy as usize >= cells[1] {
        0.0
    } else {
        prev[(cx as usize * cells[1] + cy as usize) * channels + c]
    }
}

/// Per query cell: predict K offsets and K softmax weights from the query
/// feature, bilinearly sample the previous map at aligned coordinate +
/// offset, and mix through a learned output transform. Out-of-bounds samples
/// read zero.
pub fn cross_attention_forward(
    x: &[f64],
    prev: &[f64],
    cells: [usize; 2],
    channels: usize,
    k_points: usize,
    aligned: &[([f64; 2], bool)],
    w: &CrossAttnWeights,
) -> (Vec<f64>, CrossAttnCache) {
    let n = cells[0] * cells[1];
    let mut out = vec![0.0; n * channels];
    let mut positions = vec![[0.0; 2]; n * k_points];
    let mut alpha = vec![0.0; n * k_points];
    let mut samples = vec![0.0; n * k_points * channels];
    let mut y_all = vec![0.0; n * channels];
    let mut off = vec![0.0; 2 * k_points];
    let mut wl = vec![0.0; k_points];
    for cell in 0..n {
        let feat = &x[cell * channels..(cell + 1) * channels];
        off.copy_from_slice(w.off_b);
        matvec_acc(w.off_w, feat, &mut off);
        wl.copy_from_slice(w.wt_b);
        matvec_acc(w.wt_w, feat, &mut wl);
        // Softmax over the K sample points.
        let max = wl.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in wl.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in wl.iter_mut() {
            *v /= total;
        }
        let base_pos = aligned[cell].0;
        let y = &mut y_all[cell * channels..(cell + 1) * channels];
        for kp in 0..k_points {
            let pos = [base_pos[0] + off[2 * kp], base_pos[1] + off[2 * kp + 1]];
            positions[cell * k_points + kp] = pos;
            alpha[cell * k_points + kp] = wl[kp];
            let taps = crate::grid::bilinear_taps(pos, cells);
            let sample = &mut samples[(cell * k_points + kp) * channels..][..channels];
            accumulate_taps(prev, channels, &taps, sample);
            for (d, s) in y.iter_mut().zip(sample.iter()) {
                *d += wl[kp] * s;
            }
        }
        let dst = &mut out[cell * channels..(cell + 1) * channels];
        dst.copy_from_slice(w.out_b);
        matvec_acc(w.out_w, y, dst);
    }
    (out, CrossAttnCache { positions, alpha, samples, y: y_all })
}

#[inline]
fn accumulate_taps(prev: &[f64], channels: usize, taps: &[Tap; 4], out: &mut [f64]) {
    for t in taps {
        if t.weight == 0.0 {
            continue;
        }
        let base = t.index as usize * channels;
        for (d, s) in out.iter_mut().zip(&prev[base..base + channels]) {
            *d += t.weight * s;
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn cross_attention_backward(
    x: &[f64],
    prev: &[f64],
    cells: [usize; 2],
    channels: usize,
    k_points: usize,
    w: &CrossAttnWeights,
    cache: &CrossAttnCache,
    upstream: &[f64],
    g_x: &mut [f64],
    g_prev: &mut [f64],
    g: &mut CrossAttnGrads,
) {
    let n = cells[0] * cells[1];
    let mut g_y = vec![0.0; channels];
    let mut g_alpha = vec![0.0; k_points];
    let mut g_off = vec![0.0; 2 * k_points];
    let mut g_wl = vec![0.0; k_points];
    for cell in 0..n {
        let feat = &x[cell * channels..(cell + 1) * channels];
        let gy_up = &upstream[cell * channels..(cell + 1) * channels];
        for (d, s) in g.out_b.iter_mut().zip(gy_up) {
            *d += s;
        }
        g_y.iter_mut().for_each(|v| *v = 0.0);
        matvec_backward(
            w.out_w,
            &cache.y[cell * channels..(cell + 1) * channels],
            gy_up,
            &mut g_y,
            g.out_w,
        );
        g_off.iter_mut().for_each(|v| *v = 0.0);
        for kp in 0..k_points {
            let idx = cell * k_points + kp;
            let a = cache.alpha[idx];
            let sample = &cache.samples[idx * channels..(idx + 1) * channels];
            g_alpha[kp] = dot(&g_y, sample);
            // Gradient into the sampled values, distributed to prev corners,
            // and into the sample position.
            let pos = cache.positions[idx];
            let x0 = pos[0].floor();
            let y0 = pos[1].floor();
            let fx = pos[0] - x0;
            let fy = pos[1] - y0;
            let (x0, y0) = (x0 as i64, y0 as i64);
            let mut gpx = 0.0;
            let mut gpy = 0.0;
            for c in 0..channels {
                let gs = a * g_y[c];
                if gs == 0.0 {
                    continue;
                }
                let v00 = corner_value(prev, cells, channels, x0, y0, c);
                let v10 = corner_value(prev, cells, channels, x0 + 1, y0, c);
                let v01 = corner_value(prev, cells, channels, x0, y0 + 1, c);
                let v11 = corner_value(prev, cells, channels, x0 + 1, y0 + 1, c);
                gpx += gs * ((v10 - v00) * (1.0 - fy) + (v11 - v01) * fy);
                gpy += gs * ((v01 - v00) * (1.0 - fx) + (v11 - v10) * fx);
                // Corner contributions.
                for (cx, cy, wgt) in [
                    (x0, y0, (1.0 - fx) * (1.0 - fy)),
                    (x0 + 1, y0, fx * (1.0 - fy)),
                    (x0, y0 + 1, (1.0 - fx) * fy),
                    (x0 + 1, y0 + 1, fx * fy),
                ] {
                    if cx >= 0 && cy >= 0 && (cx as usize) < cells[0] && (cy as usize) < cells[1] {
                        g_prev[(cx as usize * cells[1] + cy as usize) * channels + c] += wgt * gs;
                    }
                }
            }
            g_off[2 * kp] += gpx;
            g_off[2 * kp + 1] += gpy;
        }
        // Softmax backward over K.
        let alpha = &cache.alpha[cell * k_points..(cell + 1) * k_points];
        let alpha_dot = dot(alpha, &g_alpha);
        for kp in 0..k_points {
            g_wl[kp] = alpha[kp] * (g_alpha[kp] - alpha_dot);
        }
        for (d, s) in g.wt_b.iter_mut().zip(&g_wl) {
            *d += s;
        }
        let gx_cell = &mut g_x[cell * channels..(cell + 1) * channels];
        matvec_backward(w.wt_w, feat, &g_wl, gx_cell, g.wt_w);
        for (d, s) in g.off_b.iter_mut().zip(&g_off) {
            *d += s;
        }
        matvec_backward(w.off_w, feat, &g_off, gx_cell, g.off_w);
    }
}
