//! Toy history encoder: a learned per-pixel transform whose column features
//! are splatted along camera rays into the BEV grid, deliberately producing
//! ray-shaped features. Frames are aligned with known ego motion and fused by
//! averaging.

use super::{matvec_acc, matvec_backward, ModelError, VisualSequence};
use crate::grid::{bilinear_taps, BevFeatureMap, GridSpec, Tap};
use crate::params::ParamVec;

pub struct ColumnRecord {
    /// Mean pixel over the column (img_channels values).
    pub mean_pixel: Vec<f64>,
    /// BEV cells the column's ray traverses, as flat indices.
    pub cells: Vec<u32>,
}

pub struct FrameCache {
    pub columns: Vec<ColumnRecord>,
    pub hits: Vec<f64>,
    /// Bilinear taps aligning each fused-output cell into this frame's map.
    pub taps: Vec<[Tap; 4]>,
}

pub struct EncodeCache {
    pub frames: Vec<FrameCache>,
}

/// Encode a visual history into a fused BEV feature map.
///
/// Per view and pixel column: the column-mean pixel runs through the learned
/// transform, and the result is added to every BEV cell along the column's
/// camera ray (then cells are normalized by hit count). Older frames are
/// resampled into the last frame's ego coordinates before averaging.
pub fn encode_history(
    seq: &VisualSequence,
    params: &ParamVec,
    spec: &GridSpec,
) -> Result<BevFeatureMap, ModelError> {
    encode_history_forward(seq, params, spec).map(|(m, _)| m)
}

pub fn encode_history_forward(
    seq: &VisualSequence,
    params: &ParamVec,
    spec: &GridSpec,
) -> Result<(BevFeatureMap, EncodeCache), ModelError> {
    if seq.frames.is_empty() {
        return Err(ModelError::EmptySequence);
    }
    let w = params.tensor("encoder.w");
    let b = params.tensor("encoder.b");
    let channels = b.len();
    let img_c = seq.rig.channels;
    if w.len() != channels * img_c {
        return Err(ModelError::ShapeMismatch("encoder.w"));
    }
    let cells = [spec.cells[0], spec.cells[1]];
    let n = cells[0] * cells[1];
    let last_pose = seq.frames.last().unwrap().pose;
    let step = 0.5 * spec.cell_size(0).min(spec.cell_size(1));

    let mut fused = BevFeatureMap::zeros(*spec, channels);
    let mut frame_caches = Vec::with_capacity(seq.frames.len());
    let mut frame_map = vec![0.0; n * channels];
    let mut stamps = vec![u32::MAX; n];
    let frame_weight = 1.0 / seq.frames.len() as f64;

    for frame in &seq.frames {
        frame_map.iter_mut().for_each(|v| *v = 0.0);
        let mut hits = vec![0.0; n];
        let mut columns = Vec::with_capacity(seq.rig.views.len() * seq.rig.width);
        stamps.iter_mut().for_each(|s| *s = u32::MAX);
        let mut column_id = 0u32;

        for (vi, view) in seq.rig.views.iter().enumerate() {
            let image = &frame.images[vi];
            for u in 0..seq.rig.width {
                // Column-mean pixel.
                let mut mean_pixel = vec![0.0; img_c];
                for v in 0..seq.rig.height {
                    let base = (v * seq.rig.width + u) * img_c;
                    for (m, px) in mean_pixel.iter_mut().zip(&image[base..base + img_c]) {
                        *m += px;
                    }
                }
                for m in mean_pixel.iter_mut() {
                    *m /= seq.rig.height as f64;
                }
                let mut col_feat = b.to_vec();
                matvec_acc(w, &mean_pixel, &mut col_feat);

                // March the column ray through the BEV grid in this frame's
                // ego coordinates.
                let azimuth = view.yaw + view.hfov * ((u as f64 + 0.5) / seq.rig.width as f64 - 0.5);
                let dir = [azimuth.cos(), azimuth.sin()];
                let mut cells_hit: Vec<u32> = Vec::new();
                let mut t = 0.0;
                loop {
                    let p = [view.pos[0] + t * dir[0], view.pos[1] + t * dir[1]];
                    if !spec.contains_world_xy(p) {
                        if t > 0.0 {
                            break;
                        }
                        t += step;
                        if t > 4.0 * (spec.max[0] - spec.min[0]) {
                            break;
                        }
                        continue;
                    }
                    let c = spec.world_to_cell_xy(p);
                    let cx = (c[0] + 0.5).floor() as i64;
                    let cy = (c[1] + 0.5).floor() as i64;
                    if cx >= 0 && cy >= 0 && (cx as usize) < cells[0] && (cy as usize) < cells[1] {
                        let idx = (cx as usize * cells[1] + cy as usize) as u32;
                        if stamps[idx as usize] != column_id {
                            stamps[idx as usize] = column_id;
                            cells_hit.push(idx);
                        }
                    }
                    t += step;
                }
                for &idx in &cells_hit {
                    hits[idx as usize] += 1.0;
                    let dst = &mut frame_map[idx as usize * channels..(idx as usize + 1) * channels];
                    for (d, s) in dst.iter_mut().zip(&col_feat) {
                        *d += s;
                    }
                }
                columns.push(ColumnRecord { mean_pixel, cells: cells_hit });
                column_id += 1;
            }
        }
        for cell in 0..n {
            if hits[cell] > 0.0 {
                let inv = 1.0 / hits[cell];
                for v in frame_map[cell * channels..(cell + 1) * channels].iter_mut() {
                    *v *= inv;
                }
            }
        }

        // Align this frame's map into the last frame's ego coordinates and
        // accumulate the average.
        let motion = frame.pose.delta_to(&last_pose);
        let mut taps = Vec::with_capacity(n);
        for x in 0..cells[0] {
            for y in 0..cells[1] {
                let q_last = spec.cell_to_world_xy([x as f64, y as f64]);
                let q_frame = motion.apply(q_last);
                let c = spec.world_to_cell_xy(q_frame);
                let tap4 = bilinear_taps(c, cells);
                let dst = &mut fused.data[(x * cells[1] + y) * channels..][..channels];
                for t in &tap4 {
                    if t.weight == 0.0 {
                        continue;
                    }
                    let src = &frame_map[t.index as usize * channels..][..channels];
                    let wgt = frame_weight * t.weight;
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += wgt * s;
                    }
                }
                taps.push(tap4);
            }
        }
        frame_caches.push(FrameCache { columns, hits, taps });
    }

    Ok((fused, EncodeCache { frames: frame_caches }))
}

/// Gradients of `encode_history_forward` w.r.t. the encoder transform.
pub fn encode_history_backward(
    seq: &VisualSequence,
    params: &ParamVec,
    cache: &EncodeCache,
    upstream: &[f64],
    grads: &mut [f64],
) {
    let layout = params.layout.clone();
    let channels = layout.entry("encoder.b").dims[0];
    let n = cache.frames[0].hits.len();
    assert_eq!(upstream.len(), n * channels);
    let frame_weight = 1.0 / seq.frames.len() as f64;
    let w_range = layout.range("encoder.w");
    let b_range = layout.range("encoder.b");
    let mut g_frame = vec![0.0; n * channels];

    for fc in &cache.frames {
        // Alignment backward: scatter fused-cell gradients into the frame map.
        g_frame.iter_mut().for_each(|v| *v = 0.0);
        for (cell, tap4) in fc.taps.iter().enumerate() {
            let src = &upstream[cell * channels..(cell + 1) * channels];
            for t in tap4 {
                if t.weight == 0.0 {
                    continue;
                }
                let wgt = frame_weight * t.weight;
                let dst = &mut g_frame[t.index as usize * channels..][..channels];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += wgt * s;
                }
            }
        }
        // Hit normalization backward.
        for cell in 0..n {
            if fc.hits[cell] > 0.0 {
                let inv = 1.0 / fc.hits[cell];
                for v in g_frame[cell * channels..(cell + 1) * channels].iter_mut() {
                    *v *= inv;
                }
            }
        }
        // Column features are affine in (w, b).
        let mut g_col = vec![0.0; channels];
        for col in &fc.columns {
            g_col.iter_mut().for_each(|v| *v = 0.0);
            for &idx in &col.cells {
                let src = &g_frame[idx as usize * channels..][..channels];
                for (d, s) in g_col.iter_mut().zip(src) {
                    *d += s;
                }
            }
            if g_col.iter().all(|&v| v == 0.0) {
                continue;
            }
            for (d, s) in grads[b_range.clone()].iter_mut().zip(&g_col) {
                *d += s;
            }
            let mut g_px = vec![0.0; col.mean_pixel.len()];
            matvec_backward(
                params.tensor("encoder.w"),
                &col.mean_pixel,
                &g_col,
                &mut g_px,
                &mut grads[w_range.clone()],
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::along_ray_similarity;
    use crate::model::{CameraRig, CameraView, ModelConfig, PlanarPose, VisualFrame};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rig() -> CameraRig {
        CameraRig {
            views: (0..4)
                .map(|i| CameraView {
                    pos: [0.0, 0.0],
                    yaw: i as f64 * std::f64::consts::FRAC_PI_2,
                    hfov: std::f64::consts::FRAC_PI_2,
                })
                .collect(),
            width: 12,
            height: 6,
            channels: 3,
            vfov: 0.4,
        }
    }

    fn cfg() -> ModelConfig {
        let bev = GridSpec::bev(16, 16, [-8.0, -8.0], [8.0, 8.0]).unwrap();
        let volume = GridSpec::new([16, 16, 4], [-8.0, -8.0, -1.0], [8.0, 8.0, 3.0]).unwrap();
        ModelConfig {
            bev,
            volume,
            channels: 6,
            img_channels: 3,
            groups: 2,
            latent_spacing: 1.0,
            layers: 1,
            attn_points: 2,
            self_attn_stride: 4,
            ffn_hidden: 6,
        }
    }

    fn zero_frame(rig: &CameraRig, pose: PlanarPose) -> VisualFrame {
        VisualFrame {
            images: vec![vec![0.0; rig.height * rig.width * rig.channels]; rig.views.len()],
            pose,
        }
    }

    #[test]
    fn empty_sequence_is_an_error() {
        let cfg = cfg();
        let params = ParamVec::seeded_init(cfg.layout(), 1);
        let seq = VisualSequence { rig: rig(), frames: vec![] };
        assert!(matches!(encode_history(&seq, &params, &cfg.bev), Err(ModelError::EmptySequence)));
    }

    #[test]
    fn single_bright_pixel_paints_one_ray() {
        let cfg = cfg();
        let rig = rig();
        let mut params = ParamVec::zeros(cfg.layout());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for v in params.tensor_mut("encoder.w") {
            *v = rng.gen_range(-1.0..1.0);
        }
        // Bias must stay zero so dark columns contribute nothing.
        let mut frame = zero_frame(&rig, PlanarPose { x: 0.0, y: 0.0, yaw: 0.0 });
        let u = 7;
        let v = 3;
        let base = (v * rig.width + u) * rig.channels;
        frame.images[0][base] = 5.0;
        frame.images[0][base + 1] = 2.0;
        let seq = VisualSequence { rig, frames: vec![frame] };
        let map = encode_history(&seq, &params, &cfg.bev).unwrap();
        // Nonzero cells all point in the same feature direction (hit-count
        // normalization rescales per cell but cannot rotate the vector).
        let mut reference: Option<Vec<f64>> = None;
        let mut nonzero = 0;
        for cell in 0..16 * 16 {
            let f = &map.data[cell * cfg.channels..(cell + 1) * cfg.channels];
            let norm: f64 = f.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-12 {
                nonzero += 1;
                match &reference {
                    None => reference = Some(f.to_vec()),
                    Some(r) => {
                        let rn: f64 = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let cos: f64 =
                            f.iter().zip(r).map(|(a, b)| a * b).sum::<f64>() / (norm * rn);
                        assert!(cos > 1.0 - 1e-12, "cell {cell} off-direction: cos {cos}");
                    }
                }
            }
        }
        assert!(nonzero >= 4, "expected a painted ray, got {nonzero} cells");
        // The ray-shaped pathology in one number.
        let sim = along_ray_similarity(&map, [7.5, 7.5]).unwrap();
        assert!(sim >= 0.99, "similarity {sim}");
    }

    #[test]
    fn uniform_image_identityish_transform() {
        // A uniform image with a bias-free transform produces a map constant
        // along each ray after hit normalization: every visited cell carries
        // the same column feature.
        let cfg = cfg();
        let rig = rig();
        let mut params = ParamVec::zeros(cfg.layout());
        for (i, v) in params.tensor_mut("encoder.w").iter_mut().enumerate() {
            // First img channel broadcast to all features.
            if i % 3 == 0 {
                *v = 1.0;
            }
        }
        let mut frame = zero_frame(&rig, PlanarPose { x: 0.0, y: 0.0, yaw: 0.0 });
        for img in frame.images.iter_mut() {
            for px in img.chunks_mut(3) {
                px[0] = 2.0;
            }
        }
        let seq = VisualSequence { rig, frames: vec![frame] };
        let map = encode_history(&seq, &params, &cfg.bev).unwrap();
        for cell in 0..16 * 16 {
            let f = &map.data[cell * cfg.channels..(cell + 1) * cfg.channels];
            if f.iter().any(|&v| v != 0.0) {
                for &v in f {
                    assert!((v - 2.0).abs() < 1e-12, "cell {cell} has {v}");
                }
            }
        }
    }

    #[test]
    fn two_frame_fusion_equals_average_of_aligned_maps() {
        let cfg = cfg();
        let rig = rig();
        let params = ParamVec::seeded_init(cfg.layout(), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pose_a = PlanarPose { x: -1.0, y: 0.5, yaw: 0.2 };
        let pose_b = PlanarPose { x: 0.0, y: 0.0, yaw: 0.0 };
        let mut frame_a = zero_frame(&rig, pose_a);
        let mut frame_b = zero_frame(&rig, pose_b);
        for img in frame_a.images.iter_mut().chain(frame_b.images.iter_mut()) {
            for v in img.iter_mut() {
                *v = rng.gen_range(0.0..1.0);
            }
        }
        let seq = VisualSequence { rig: rig.clone(), frames: vec![frame_a.clone(), frame_b.clone()] };
        let fused = encode_history(&seq, &params, &cfg.bev).unwrap();
        // Oracle: encode each frame alone (as the last frame of a sequence),
        // align the older one by resampling, then average.
        let solo_a = encode_history(
            &VisualSequence { rig: rig.clone(), frames: vec![frame_a.clone()] },
            &params,
            &cfg.bev,
        )
        .unwrap();
        let solo_b = encode_history(
            &VisualSequence { rig, frames: vec![frame_b.clone()] },
            &params,
            &cfg.bev,
        )
        .unwrap();
        let motion = pose_a.delta_to(&pose_b);
        for x in 0..16 {
            for y in 0..16 {
                let q_last = cfg.bev.cell_to_world_xy([x as f64, y as f64]);
                let q_a = motion.apply(q_last);
                let c = cfg.bev.world_to_cell_xy(q_a);
                let mut aligned = vec![0.0; cfg.channels];
                crate::grid::bilinear_sample(&solo_a, c, &mut aligned);
                for ch in 0..cfg.channels {
                    let expected = 0.5 * (aligned[ch] + solo_b.feature(x, y)[ch]);
                    let got = fused.feature(x, y)[ch];
                    assert!((got - expected).abs() < 1e-9, "cell ({x},{y}) ch {ch}");
                }
            }
        }
    }

    #[test]
    fn encoder_backward_matches_finite_differences() {
        let cfg = cfg();
        let rig = rig();
        let params = ParamVec::seeded_init(cfg.layout(), 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut frame_a = zero_frame(&rig, PlanarPose { x: -0.5, y: 0.3, yaw: 0.1 });
        let mut frame_b = zero_frame(&rig, PlanarPose { x: 0.0, y: 0.0, yaw: 0.0 });
        for img in frame_a.images.iter_mut().chain(frame_b.images.iter_mut()) {
            for v in img.iter_mut() {
                *v = rng.gen_range(0.0..1.0);
            }
        }
        let seq = VisualSequence { rig, frames: vec![frame_a, frame_b] };
        let probe: Vec<f64> =
            (0..16 * 16 * cfg.channels).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let scalar = |p: &ParamVec| -> f64 {
            let map = encode_history(&seq, p, &cfg.bev).unwrap();
            map.data.iter().zip(&probe).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = encode_history_forward(&seq, &params, &cfg.bev).unwrap();
        let mut grads = params.zeros_like();
        encode_history_backward(&seq, &params, &cache, &probe, &mut grads);
        let h = 1e-6;
        for name in ["encoder.w", "encoder.b"] {
            for i in params.layout.range(name) {
                let mut plus = params.clone();
                plus.data[i] += h;
                let mut minus = params.clone();
                minus.data[i] -= h;
                let numeric = (scalar(&plus) - scalar(&minus)) / (2.0 * h);
                let rel = (grads[i] - numeric).abs() / grads[i].abs().max(numeric.abs()).max(1.0);
                assert!(rel < 1e-6, "{name}[{i}]: {} vs {numeric}", grads[i]);
            }
        }
    }
}
