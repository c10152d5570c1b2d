//! History encoder, ego-conditioned future decoder, and occupancy projection
//! head, with hand-written backward passes throughout.

mod attention;
mod decoder;
mod encoder;

pub use attention::{
    cross_attention_forward, self_attention_forward, CrossAttnWeights, PoolGrid, SelfAttnWeights,
};
pub use decoder::{
    decode_future_step, decode_future_step_backward, decode_future_step_forward, forecast,
    forecast_features, DecoderWorkspace, StepCache,
};
pub use encoder::{encode_history, encode_history_backward, encode_history_forward, EncodeCache};

use crate::grid::{GridSpec, OccupancyVolume};
use crate::latent::LatentRenderConfig;
use crate::params::{ParamLayout, ParamVec};
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("empty visual sequence")]
    EmptySequence,
    #[error("empty motion list")]
    EmptyMotions,
    #[error("shape mismatch in {0}")]
    ShapeMismatch(&'static str),
}

pub fn wrap_angle(a: f64) -> f64 {
    let mut a = a % std::f64::consts::TAU;
    if a > std::f64::consts::PI {
        a -= std::f64::consts::TAU;
    } else if a <= -std::f64::consts::PI {
        a += std::f64::consts::TAU;
    }
    a
}

/// Absolute planar pose in world coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanarPose {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl PlanarPose {
    /// Pose of `to` expressed in this pose's frame.
    pub fn delta_to(&self, to: &PlanarPose) -> EgoMotion {
        let dx = to.x - self.x;
        let dy = to.y - self.y;
        let (s, c) = (-self.yaw).sin_cos();
        EgoMotion {
            dx: c * dx - s * dy,
            dy: s * dx + c * dy,
            dyaw: wrap_angle(to.yaw - self.yaw),
        }
    }

    pub fn ego_to_world_xy(&self, q: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.yaw.sin_cos();
        [self.x + c * q[0] - s * q[1], self.y + s * q[0] + c * q[1]]
    }

    pub fn ego_to_world_xyz(&self, q: [f64; 3]) -> [f64; 3] {
        let xy = self.ego_to_world_xy([q[0], q[1]]);
        [xy[0], xy[1], q[2]]
    }

    pub fn world_to_ego(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = (-self.yaw).sin_cos();
        let dx = p[0] - self.x;
        let dy = p[1] - self.y;
        [c * dx - s * dy, s * dx + c * dy, p[2]]
    }
}

/// Planar rigid motion between consecutive frames: the next frame's origin
/// and heading expressed in the previous frame's coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgoMotion {
    pub dx: f64,
    pub dy: f64,
    pub dyaw: f64,
}

impl EgoMotion {
    pub fn identity() -> Self {
        Self { dx: 0.0, dy: 0.0, dyaw: 0.0 }
    }

    pub fn is_identity(&self) -> bool {
        self.dx == 0.0 && self.dy == 0.0 && self.dyaw == 0.0
    }

    /// Map a point from the later frame's coordinates into the earlier
    /// frame's coordinates.
    pub fn apply(&self, q: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.dyaw.sin_cos();
        [c * q[0] - s * q[1] + self.dx, s * q[0] + c * q[1] + self.dy]
    }

    /// Rigid composition: this motion happens first, `next` second. The
    /// composite maps the final frame's coordinates all the way back.
    pub fn then(&self, next: &EgoMotion) -> EgoMotion {
        let (s, c) = self.dyaw.sin_cos();
        EgoMotion {
            dx: self.dx + c * next.dx - s * next.dy,
            dy: self.dy + s * next.dx + c * next.dy,
            dyaw: wrap_angle(self.dyaw + next.dyaw),
        }
    }

    /// Map a point from the earlier frame's coordinates into the later
    /// frame's coordinates (inverse of `apply`).
    pub fn apply_inverse(&self, q: [f64; 2]) -> [f64; 2] {
        let (s, c) = (-self.dyaw).sin_cos();
        let dx = q[0] - self.dx;
        let dy = q[1] - self.dy;
        [c * dx - s * dy, s * dx + c * dy]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraView {
    /// Camera position in ego coordinates (meters).
    pub pos: [f64; 2],
    /// Camera yaw relative to the ego heading.
    pub yaw: f64,
    /// Horizontal field of view (radians).
    pub hfov: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    pub views: Vec<CameraView>,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Vertical field of view (radians), spread evenly over pixel rows.
    pub vfov: f64,
}

/// One history frame: per-view images (h x w x c, row-major) and the ego pose
/// the frame was captured from.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualFrame {
    pub images: Vec<Vec<f64>>,
    pub pose: PlanarPose,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisualSequence {
    pub rig: CameraRig,
    pub frames: Vec<VisualFrame>,
}

/// Sizes of every learned block.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// BEV grid (cells_z = 1).
    pub bev: GridSpec,
    /// Occupancy volume grid: same x/y extents, configured height bins.
    pub volume: GridSpec,
    pub channels: usize,
    pub img_channels: usize,
    pub groups: usize,
    pub latent_spacing: f64,
    pub layers: usize,
    pub attn_points: usize,
    pub self_attn_stride: usize,
    pub ffn_hidden: usize,
}

impl ModelConfig {
    pub fn latent_config(&self) -> LatentRenderConfig {
        LatentRenderConfig::centered(
            [self.bev.cells[0], self.bev.cells[1]],
            self.groups,
            self.latent_spacing,
        )
    }

    pub fn cells(&self) -> usize {
        self.bev.cells[0] * self.bev.cells[1]
    }

    pub fn z_bins(&self) -> usize {
        self.volume.cells[2]
    }

    /// Named-tensor layout for all learnable parameters.
    pub fn layout(&self) -> Arc<ParamLayout> {
        let c = self.channels;
        let k = self.attn_points;
        let f = self.ffn_hidden;
        let mut specs: Vec<(String, Vec<usize>)> = vec![
            ("encoder.w".into(), vec![c, self.img_channels]),
            ("encoder.b".into(), vec![c]),
            ("latent.proj_w".into(), vec![self.groups, c / self.groups]),
            ("latent.proj_b".into(), vec![self.groups]),
            ("ego.w1".into(), vec![c, 4]),
            ("ego.b1".into(), vec![c]),
            ("ego.w2".into(), vec![c, c]),
            ("ego.b2".into(), vec![c]),
            ("queries".into(), vec![self.bev.cells[0], self.bev.cells[1], c]),
        ];
        for l in 0..self.layers {
            for name in ["wq", "wk", "wv", "wo"] {
                specs.push((format!("layers.{l}.self.{name}"), vec![c, c]));
            }
            for name in ["bq", "bk", "bv", "bo"] {
                specs.push((format!("layers.{l}.self.{name}"), vec![c]));
            }
            specs.push((format!("layers.{l}.cross.off_w"), vec![2 * k, c]));
            specs.push((format!("layers.{l}.cross.off_b"), vec![2 * k]));
            specs.push((format!("layers.{l}.cross.wt_w"), vec![k, c]));
            specs.push((format!("layers.{l}.cross.wt_b"), vec![k]));
            specs.push((format!("layers.{l}.cross.out_w"), vec![c, c]));
            specs.push((format!("layers.{l}.cross.out_b"), vec![c]));
            specs.push((format!("layers.{l}.ffn.w1"), vec![f, c]));
            specs.push((format!("layers.{l}.ffn.b1"), vec![f]));
            specs.push((format!("layers.{l}.ffn.w2"), vec![c, f]));
            specs.push((format!("layers.{l}.ffn.b2"), vec![c]));
        }
        specs.push(("head.w".into(), vec![self.z_bins(), c]));
        specs.push(("head.b".into(), vec![self.z_bins()]));
        ParamLayout::build(specs)
    }
}

/// Dot product with four independent accumulators; the split reduction lets
/// the compiler vectorize what a sequential fold cannot.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let chunks = n / 4;
    let mut acc = [0.0f64; 4];
    for k in 0..chunks {
        let i = 4 * k;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in 4 * chunks..n {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// y = W x (+ y), with W row-major `[out, in]`.
pub(crate) fn matvec_acc(w: &[f64], x: &[f64], y: &mut [f64]) {
    let n_in = x.len();
    for (i, yi) in y.iter_mut().enumerate() {
        *yi += dot(&w[i * n_in..(i + 1) * n_in], x);
    }
}

/// gx += W^T gy and gW += gy outer x.
pub(crate) fn matvec_backward(
    w: &[f64],
    x: &[f64],
    gy: &[f64],
    gx: &mut [f64],
    gw: &mut [f64],
) {
    let n_in = x.len();
    for (i, &g) in gy.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let row = &w[i * n_in..(i + 1) * n_in];
        let grow = &mut gw[i * n_in..(i + 1) * n_in];
        for j in 0..n_in {
            gx[j] += row[j] * g;
            grow[j] += x[j] * g;
        }
    }
}

/// Two-layer perceptron on (dx, dy, cos dyaw, sin dyaw) with a tanh hidden
/// layer; the embedding is added to every future BEV query.
pub fn encode_ego_motion(e: &EgoMotion, params: &ParamVec) -> (Vec<f64>, EgoCache) {
    let x = [e.dx, e.dy, e.dyaw.cos(), e.dyaw.sin()];
    let w1 = params.tensor("ego.w1");
    let b1 = params.tensor("ego.b1");
    let w2 = params.tensor("ego.w2");
    let b2 = params.tensor("ego.b2");
    let mut h = b1.to_vec();
    matvec_acc(w1, &x, &mut h);
    for v in h.iter_mut() {
        *v = v.tanh();
    }
    let mut out = b2.to_vec();
    matvec_acc(w2, &h, &mut out);
    (out, EgoCache { input: x, hidden: h })
}

pub struct EgoCache {
    pub input: [f64; 4],
    pub hidden: Vec<f64>,
}

pub fn encode_ego_motion_backward(
    params: &ParamVec,
    cache: &EgoCache,
    upstream: &[f64],
    grads: &mut [f64],
) {
    let layout = params.layout.clone();
    let w2 = params.tensor("ego.w2");
    let mut gh = vec![0.0; cache.hidden.len()];
    {
        let (gw2_r, gb2_r) = (layout.range("ego.w2"), layout.range("ego.b2"));
        // Split disjoint gradient slices out of the flat vector.
        let gy = upstream;
        for (dst, g) in grads[gb2_r].iter_mut().zip(gy) {
            *dst += g;
        }
        let gw2 = &mut grads[gw2_r];
        matvec_backward(w2, &cache.hidden, gy, &mut gh, gw2);
    }
    for (g, h) in gh.iter_mut().zip(&cache.hidden) {
        *g *= 1.0 - h * h;
    }
    let w1 = params.tensor("ego.w1");
    let mut gx = vec![0.0; 4];
    {
        let gw1_r = layout.range("ego.w1");
        let gb1_r = layout.range("ego.b1");
        for (dst, g) in grads[gb1_r].iter_mut().zip(&gh) {
            *dst += g;
        }
        matvec_backward(w1, &cache.input, &gh, &mut gx, &mut grads[gw1_r]);
    }
}

/// Reference coordinates of BEV query cells in the previous frame's map:
/// cell -> meters, rigid transform into the previous ego frame, meters ->
/// cell. The returned flag marks coordinates inside the previous map.
pub fn align_reference_coords(
    coords: &[[f64; 2]],
    e: &EgoMotion,
    spec: &GridSpec,
) -> Vec<([f64; 2], bool)> {
    let inside = |c: [f64; 2]| {
        c[0] >= -0.5
            && c[0] <= spec.cells[0] as f64 - 0.5
            && c[1] >= -0.5
            && c[1] <= spec.cells[1] as f64 - 0.5
    };
    // Identity motion must be an exact no-op, not a round trip through meters.
    if e.is_identity() {
        return coords.iter().map(|&c| (c, inside(c))).collect();
    }
    coords
        .iter()
        .map(|&c| {
            let m = spec.cell_to_world_xy(c);
            let prev = e.apply(m);
            let cc = spec.world_to_cell_xy(prev);
            (cc, inside(cc))
        })
        .collect()
}

/// Per-cell linear map from decoder features to height-bin logits.
pub fn project_occupancy(map: &crate::grid::BevFeatureMap, params: &ParamVec, volume_spec: GridSpec) -> OccupancyVolume {
    let w = params.tensor("head.w");
    let b = params.tensor("head.b");
    let z_bins = volume_spec.cells[2];
    let channels = map.channels;
    let cells = map.cells_xy();
    assert_eq!(cells[0], volume_spec.cells[0]);
    assert_eq!(cells[1], volume_spec.cells[1]);
    let mut volume = OccupancyVolume::zeros(volume_spec);
    for cell in 0..cells[0] * cells[1] {
        let feat = &map.data[cell * channels..(cell + 1) * channels];
        let out = &mut volume.logits[cell * z_bins..(cell + 1) * z_bins];
        out.copy_from_slice(b);
        matvec_acc(w, feat, out);
    }
    volume
}

/// Gradients of `project_occupancy` into the feature map and head weights.
pub fn project_occupancy_backward(
    map: &crate::grid::BevFeatureMap,
    params: &ParamVec,
    upstream_logits: &[f64],
    g_map: &mut [f64],
    grads: &mut [f64],
) {
    let layout = params.layout.clone();
    let w = params.tensor("head.w");
    let z_bins = layout.entry("head.b").dims[0];
    let channels = map.channels;
    let n = map.cells_xy()[0] * map.cells_xy()[1];
    assert_eq!(upstream_logits.len(), n * z_bins);
    let wr = layout.range("head.w");
    let br = layout.range("head.b");
    for cell in 0..n {
        let feat = &map.data[cell * channels..(cell + 1) * channels];
        let gy = &upstream_logits[cell * z_bins..(cell + 1) * z_bins];
        for (dst, g) in grads[br.clone()].iter_mut().zip(gy) {
            *dst += g;
        }
        matvec_backward(
            w,
            feat,
            gy,
            &mut g_map[cell * channels..(cell + 1) * channels],
            &mut grads[wr.clone()],
        );
    }
}
