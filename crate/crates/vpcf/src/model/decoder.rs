//! Auto-regressive future decoder: learned queries conditioned on ego motion,
//! refined by self-attention, temporal cross-attention against the previous
//! frame, and a feed-forward block, all with residual connections.

use super::attention::{
    cross_attention_backward, cross_attention_forward, self_attention_backward,
    self_attention_forward, CrossAttnCache, CrossAttnGrads, CrossAttnWeights, PoolGrid,
    SelfAttnCache, SelfAttnGrads, SelfAttnWeights,
};
use super::{
    align_reference_coords, encode_ego_motion, encode_ego_motion_backward, matvec_acc,
    matvec_backward, project_occupancy, EgoCache, EgoMotion, ModelConfig, ModelError,
};
use crate::grid::{BevFeatureMap, OccupancyVolume};
use crate::params::ParamVec;

/// Reusable geometry shared by every decode step.
pub struct DecoderWorkspace {
    pub grid: PoolGrid,
    pub cell_coords: Vec<[f64; 2]>,
}

impl DecoderWorkspace {
    pub fn new(cfg: &ModelConfig) -> Self {
        let cells = [cfg.bev.cells[0], cfg.bev.cells[1]];
        let mut cell_coords = Vec::with_capacity(cells[0] * cells[1]);
        for x in 0..cells[0] {
            for y in 0..cells[1] {
                cell_coords.push([x as f64, y as f64]);
            }
        }
        Self { grid: PoolGrid::new(cells, cfg.self_attn_stride), cell_coords }
    }
}

pub struct FfnCache {
    pub hidden: Vec<f64>, // (cell, ffn_hidden), post-tanh
}

pub struct LayerCache {
    pub x_self_in: Vec<f64>,
    pub self_cache: SelfAttnCache,
    pub x_cross_in: Vec<f64>,
    pub cross_cache: CrossAttnCache,
    pub x_ffn_in: Vec<f64>,
    pub ffn_cache: FfnCache,
}

pub struct StepCache {
    pub ego: EgoCache,
    pub aligned: Vec<([f64; 2], bool)>,
    pub layers: Vec<LayerCache>,
}

struct LayerNames {
    wq: String,
    wk: String,
    wv: String,
    wo: String,
    bq: String,
    bk: String,
    bv: String,
    bo: String,
    off_w: String,
    off_b: String,
    wt_w: String,
    wt_b: String,
    out_w: String,
    out_b: String,
    ffn_w1: String,
    ffn_b1: String,
    ffn_w2: String,
    ffn_b2: String,
}

impl LayerNames {
    fn new(l: usize) -> Self {
        Self {
            wq: format!("layers.{l}.self.wq"),
            wk: format!("layers.{l}.self.wk"),
            wv: format!("layers.{l}.self.wv"),
            wo: format!("layers.{l}.self.wo"),
            bq: format!("layers.{l}.self.bq"),
            bk: format!("layers.{l}.self.bk"),
            bv: format!("layers.{l}.self.bv"),
            bo: format!("layers.{l}.self.bo"),
            off_w: format!("layers.{l}.cross.off_w"),
            off_b: format!("layers.{l}.cross.off_b"),
            wt_w: format!("layers.{l}.cross.wt_w"),
            wt_b: format!("layers.{l}.cross.wt_b"),
            out_w: format!("layers.{l}.cross.out_w"),
            out_b: format!("layers.{l}.cross.out_b"),
            ffn_w1: format!("layers.{l}.ffn.w1"),
            ffn_b1: format!("layers.{l}.ffn.b1"),
            ffn_w2: format!("layers.{l}.ffn.w2"),
            ffn_b2: format!("layers.{l}.ffn.b2"),
        }
    }
}

fn ffn_forward(
    x: &[f64],
    channels: usize,
    hidden: usize,
    w1: &[f64],
    b1: &[f64],
    w2: &[f64],
    b2: &[f64],
) -> (Vec<f64>, FfnCache) {
    let n = x.len() / channels;
    let mut out = vec![0.0; x.len()];
    let mut hid = vec![0.0; n * hidden];
    for cell in 0..n {
        let feat = &x[cell * channels..(cell + 1) * channels];
        let h = &mut hid[cell * hidden..(cell + 1) * hidden];
        h.copy_from_slice(b1);
        matvec_acc(w1, feat, h);
        for v in h.iter_mut() {
            *v = v.tanh();
        }
        let o = &mut out[cell * channels..(cell + 1) * channels];
        o.copy_from_slice(b2);
        matvec_acc(w2, h, o);
    }
    (out, FfnCache { hidden: hid })
}

#[allow(clippy::too_many_arguments)]
fn ffn_backward(
    x: &[f64],
    channels: usize,
    hidden: usize,
    w1: &[f64],
    w2: &[f64],
    cache: &FfnCache,
    upstream: &[f64],
    g_x: &mut [f64],
    g_w1: &mut [f64],
    g_b1: &mut [f64],
    g_w2: &mut [f64],
    g_b2: &mut [f64],
) {
    let n = x.len() / channels;
    let mut gh = vec![0.0; hidden];
    for cell in 0..n {
        let feat = &x[cell * channels..(cell + 1) * channels];
        let h = &cache.hidden[cell * hidden..(cell + 1) * hidden];
        let gy = &upstream[cell * channels..(cell + 1) * channels];
        for (d, s) in g_b2.iter_mut().zip(gy) {
            *d += s;
        }
        gh.iter_mut().for_each(|v| *v = 0.0);
        matvec_backward(w2, h, gy, &mut gh, g_w2);
        for (g, hv) in gh.iter_mut().zip(h) {
            *g *= 1.0 - hv * hv;
        }
        for (d, s) in g_b1.iter_mut().zip(&gh) {
            *d += s;
        }
        matvec_backward(w1, feat, &gh, &mut g_x[cell * channels..(cell + 1) * channels], g_w1);
    }
}

/// One decode step: queries plus the ego embedding, then `layers` rounds of
/// self-attention, temporal cross-attention against `prev`, and a
/// feed-forward block, all residual.
pub fn decode_future_step_forward(
    prev: &BevFeatureMap,
    e: &EgoMotion,
    params: &ParamVec,
    cfg: &ModelConfig,
    ws: &DecoderWorkspace,
) -> (BevFeatureMap, StepCache) {
    let channels = cfg.channels;
    let cells = [cfg.bev.cells[0], cfg.bev.cells[1]];
    let n = cells[0] * cells[1];
    let (ego_emb, ego_cache) = encode_ego_motion(e, params);
    let aligned = align_reference_coords(&ws.cell_coords, e, &cfg.bev);

    let queries = params.tensor("queries");
    let mut x = vec![0.0; n * channels];
    for cell in 0..n {
        for c in 0..channels {
            x[cell * channels + c] = queries[cell * channels + c] + ego_emb[c];
        }
    }

    let mut layer_caches = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let names = LayerNames::new(l);
        let sw = SelfAttnWeights {
            wq: params.tensor(&names.wq),
            wk: params.tensor(&names.wk),
            wv: params.tensor(&names.wv),
            wo: params.tensor(&names.wo),
            bq: params.tensor(&names.bq),
            bk: params.tensor(&names.bk),
            bv: params.tensor(&names.bv),
            bo: params.tensor(&names.bo),
        };
        let x_self_in = x.clone();
        let (attn_out, self_cache) = self_attention_forward(&x, channels, &ws.grid, &sw);
        for (xv, a) in x.iter_mut().zip(&attn_out) {
            *xv += a;
        }

        let cw = CrossAttnWeights {
            off_w: params.tensor(&names.off_w),
            off_b: params.tensor(&names.off_b),
            wt_w: params.tensor(&names.wt_w),
            wt_b: params.tensor(&names.wt_b),
            out_w: params.tensor(&names.out_w),
            out_b: params.tensor(&names.out_b),
        };
        let x_cross_in = x.clone();
        let (cross_out, cross_cache) = cross_attention_forward(
            &x,
            &prev.data,
            cells,
            channels,
            cfg.attn_points,
            &aligned,
            &cw,
        );
        for (xv, a) in x.iter_mut().zip(&cross_out) {
            *xv += a;
        }

        let x_ffn_in = x.clone();
        let (ffn_out, ffn_cache) = ffn_forward(
            &x,
            channels,
            cfg.ffn_hidden,
            params.tensor(&names.ffn_w1),
            params.tensor(&names.ffn_b1),
            params.tensor(&names.ffn_w2),
            params.tensor(&names.ffn_b2),
        );
        for (xv, a) in x.iter_mut().zip(&ffn_out) {
            *xv += a;
        }

        layer_caches.push(LayerCache {
            x_self_in,
            self_cache,
            x_cross_in,
            cross_cache,
            x_ffn_in,
            ffn_cache,
        });
    }

    let map = BevFeatureMap { spec: cfg.bev, channels, data: x };
    (map, StepCache { ego: ego_cache, aligned, layers: layer_caches })
}

/// Convenience wrapper returning only the next feature map.
pub fn decode_future_step(
    prev: &BevFeatureMap,
    e: &EgoMotion,
    params: &ParamVec,
    cfg: &ModelConfig,
) -> BevFeatureMap {
    let ws = DecoderWorkspace::new(cfg);
    decode_future_step_forward(prev, e, params, cfg, &ws).0
}

/// Backward through one decode step. Accumulates parameter gradients into
/// `grads`, the gradient w.r.t. the previous feature map into `g_prev`, and
/// returns nothing else; the queries and ego blocks are parameters.
pub fn decode_future_step_backward(
    prev: &BevFeatureMap,
    params: &ParamVec,
    cfg: &ModelConfig,
    ws: &DecoderWorkspace,
    cache: &StepCache,
    upstream: &[f64],
    g_prev: &mut [f64],
    grads: &mut [f64],
) {
    let channels = cfg.channels;
    let cells = [cfg.bev.cells[0], cfg.bev.cells[1]];
    let n = cells[0] * cells[1];
    let layout = params.layout.clone();
    let mut g = upstream.to_vec();

    for l in (0..cfg.layers).rev() {
        let names = LayerNames::new(l);
        let lc = &cache.layers[l];

        // FFN residual.
        {
            let mut g_in = vec![0.0; n * channels];
            // Pull the four gradient slices out with split_at_mut-free
            // temporary buffers, then write back.
            let mut g_w1 = vec![0.0; layout.range(&names.ffn_w1).len()];
            let mut g_b1 = vec![0.0; layout.range(&names.ffn_b1).len()];
            let mut g_w2 = vec![0.0; layout.range(&names.ffn_w2).len()];
            let mut g_b2 = vec![0.0; layout.range(&names.ffn_b2).len()];
            ffn_backward(
                &lc.x_ffn_in,
                channels,
                cfg.ffn_hidden,
                params.tensor(&names.ffn_w1),
                params.tensor(&names.ffn_w2),
                &lc.ffn_cache,
                &g,
                &mut g_in,
                &mut g_w1,
                &mut g_b1,
                &mut g_w2,
                &mut g_b2,
            );
            add_into(grads, layout.range(&names.ffn_w1), &g_w1);
            add_into(grads, layout.range(&names.ffn_b1), &g_b1);
            add_into(grads, layout.range(&names.ffn_w2), &g_w2);
            add_into(grads, layout.range(&names.ffn_b2), &g_b2);
            for (gv, extra) in g.iter_mut().zip(&g_in) {
                *gv += extra;
            }
        }

        // Cross-attention residual.
        {
            let cw = CrossAttnWeights {
                off_w: params.tensor(&names.off_w),
                off_b: params.tensor(&names.off_b),
                wt_w: params.tensor(&names.wt_w),
                wt_b: params.tensor(&names.wt_b),
                out_w: params.tensor(&names.out_w),
                out_b: params.tensor(&names.out_b),
            };
            let mut g_in = vec![0.0; n * channels];
            let mut g_off_w = vec![0.0; layout.range(&names.off_w).len()];
            let mut g_off_b = vec![0.0; layout.range(&names.off_b).len()];
            let mut g_wt_w = vec![0.0; layout.range(&names.wt_w).len()];
            let mut g_wt_b = vec![0.0; layout.range(&names.wt_b).len()];
            let mut g_out_w = vec![0.0; layout.range(&names.out_w).len()];
            let mut g_out_b = vec![0.0; layout.range(&names.out_b).len()];
            {
                let mut cg = CrossAttnGrads {
                    off_w: &mut g_off_w,
                    off_b: &mut g_off_b,
                    wt_w: &mut g_wt_w,
                    wt_b: &mut g_wt_b,
                    out_w: &mut g_out_w,
                    out_b: &mut g_out_b,
                };
                cross_attention_backward(
                    &lc.x_cross_in,
                    &prev.data,
                    cells,
                    channels,
                    cfg.attn_points,
                    &cw,
                    &lc.cross_cache,
                    &g,
                    &mut g_in,
                    g_prev,
                    &mut cg,
                );
            }
            add_into(grads, layout.range(&names.off_w), &g_off_w);
            add_into(grads, layout.range(&names.off_b), &g_off_b);
            add_into(grads, layout.range(&names.wt_w), &g_wt_w);
            add_into(grads, layout.range(&names.wt_b), &g_wt_b);
            add_into(grads, layout.range(&names.out_w), &g_out_w);
            add_into(grads, layout.range(&names.out_b), &g_out_b);
            for (gv, extra) in g.iter_mut().zip(&g_in) {
                *gv += extra;
            }
        }

        // Self-attention residual.
        {
            let sw = SelfAttnWeights {
                wq: params.tensor(&names.wq),
                wk: params.tensor(&names.wk),
                wv: params.tensor(&names.wv),
                wo: params.tensor(&names.wo),
                bq: params.tensor(&names.bq),
                bk: params.tensor(&names.bk),
                bv: params.tensor(&names.bv),
                bo: params.tensor(&names.bo),
            };
            let mut g_in = vec![0.0; n * channels];
            let mut g_wq = vec![0.0; layout.range(&names.wq).len()];
            let mut g_wk = vec![0.0; layout.range(&names.wk).len()];
            let mut g_wv = vec![0.0; layout.range(&names.wv).len()];
            let mut g_wo = vec![0.0; layout.range(&names.wo).len()];
            let mut g_bq = vec![0.0; layout.range(&names.bq).len()];
            let mut g_bk = vec![0.0; layout.range(&names.bk).len()];
            let mut g_bv = vec![0.0; layout.range(&names.bv).len()];
            let mut g_bo = vec![0.0; layout.range(&names.bo).len()];
            {
                let mut sg = SelfAttnGrads {
                    wq: &mut g_wq,
                    wk: &mut g_wk,
                    wv: &mut g_wv,
                    wo: &mut g_wo,
                    bq: &mut g_bq,
                    bk: &mut g_bk,
                    bv: &mut g_bv,
                    bo: &mut g_bo,
                };
                self_attention_backward(channels, &ws.grid, &sw, &lc.self_cache, &g, &mut g_in, &mut sg);
            }
            add_into(grads, layout.range(&names.wq), &g_wq);
            add_into(grads, layout.range(&names.wk), &g_wk);
            add_into(grads, layout.range(&names.wv), &g_wv);
            add_into(grads, layout.range(&names.wo), &g_wo);
            add_into(grads, layout.range(&names.bq), &g_bq);
            add_into(grads, layout.range(&names.bk), &g_bk);
            add_into(grads, layout.range(&names.bv), &g_bv);
            add_into(grads, layout.range(&names.bo), &g_bo);
            for (gv, extra) in g.iter_mut().zip(&g_in) {
                *gv += extra;
            }
        }
    }

    // x0 = queries + broadcast ego embedding.
    add_into(grads, layout.range("queries"), &g);
    let mut g_ego = vec![0.0; channels];
    for cell in 0..n {
        for c in 0..channels {
            g_ego[c] += g[cell * channels + c];
        }
    }
    encode_ego_motion_backward(params, &cache.ego, &g_ego, grads);
}

fn add_into(grads: &mut [f64], range: std::ops::Range<usize>, src: &[f64]) {
    for (d, s) in grads[range].iter_mut().zip(src) {
        *d += s;
    }
}

/// Roll the decoder forward `motions.len()` steps and project each predicted
/// feature map to an occupancy volume.
pub fn forecast(
    start: &BevFeatureMap,
    motions: &[EgoMotion],
    params: &ParamVec,
    cfg: &ModelConfig,
) -> Result<Vec<OccupancyVolume>, ModelError> {
    Ok(forecast_features(start, motions, params, cfg)?.0)
}

/// Forecast that also returns the rolled-out feature maps.
pub fn forecast_features(
    start: &BevFeatureMap,
    motions: &[EgoMotion],
    params: &ParamVec,
    cfg: &ModelConfig,
) -> Result<(Vec<OccupancyVolume>, Vec<BevFeatureMap>), ModelError> {
    if motions.is_empty() {
        return Err(ModelError::EmptyMotions);
    }
    let ws = DecoderWorkspace::new(cfg);
    let mut volumes = Vec::with_capacity(motions.len());
    let mut features = Vec::with_capacity(motions.len());
    let mut prev = start.clone();
    for e in motions {
        let (next, _) = decode_future_step_forward(&prev, e, params, cfg, &ws);
        volumes.push(project_occupancy(&next, params, cfg.volume));
        features.push(next.clone());
        prev = next;
    }
    Ok((volumes, features))
}
