//! Chamfer-distance evaluation and the forecasting protocol: per held-out
//! sample, encode the history, render, roll the decoder out, extract clouds,
//! and score them against ground truth per horizon.

use crate::grid::PointCloud;
use crate::latent::{latent_render_with_tables, RayTables};
use crate::model::{encode_history, forecast, EgoMotion, ModelConfig};
use crate::params::ParamVec;
use crate::render::{direction_fan, extract_point_cloud};
use crate::scenes::{EpisodeData, FRAME_DT};
use crate::train::ModelVariant;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("undefined Chamfer distance: empty point cloud")]
    EmptyCloud,
    #[error("episode too short for the requested horizons")]
    EpisodeTooShort,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Closed-interval bounds on |x| and |y| in meters; z is unconstrained.
    pub range_x: f64,
    pub range_y: f64,
    /// Future horizons in seconds, ascending multiples of the frame cadence.
    pub horizons: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { range_x: 51.2, range_y: 51.2, horizons: vec![0.5, 1.0, 1.5, 2.0, 2.5, 3.0] }
    }
}

/// Keep points with |x| and |y| inside the configured bounds (closed
/// interval); z passes through unfiltered.
pub fn filter_range(cloud: &PointCloud, cfg: &EvalConfig) -> PointCloud {
    PointCloud::new(
        cloud
            .points
            .iter()
            .copied()
            .filter(|p| p[0].abs() <= cfg.range_x && p[1].abs() <= cfg.range_y)
            .collect(),
    )
}

/// Compact kd-tree over 3D points with exact nearest-neighbor queries.
struct KdTree {
    // Flattened nodes: (point, split axis); children implied by recursion
    // ranges stored alongside.
    points: Vec<[f64; 3]>,
    nodes: Vec<KdNode>,
    root: Option<usize>,
}

struct KdNode {
    point: usize,
    axis: usize,
    left: Option<usize>,
    right: Option<usize>,
}

impl KdTree {
    fn build(points: &[[f64; 3]]) -> Self {
        let mut tree =
            Self { points: points.to_vec(), nodes: Vec::with_capacity(points.len()), root: None };
        let mut indices: Vec<usize> = (0..points.len()).collect();
        tree.root = tree.build_rec(&mut indices, 0);
        tree
    }

    fn build_rec(&mut self, indices: &mut [usize], depth: usize) -> Option<usize> {
        if indices.is_empty() {
            return None;
        }
        let axis = depth % 3;
        indices.sort_unstable_by(|&a, &b| {
            self.points[a][axis].partial_cmp(&self.points[b][axis]).unwrap()
        });
        let mid = indices.len() / 2;
        let point = indices[mid];
        let node_idx = self.nodes.len();
        self.nodes.push(KdNode { point, axis, left: None, right: None });
        let (left_slice, rest) = indices.split_at_mut(mid);
        let right_slice = &mut rest[1..];
        let left = self.build_rec(left_slice, depth + 1);
        let right = self.build_rec(right_slice, depth + 1);
        self.nodes[node_idx].left = left;
        self.nodes[node_idx].right = right;
        Some(node_idx)
    }

    fn nearest_sq(&self, query: [f64; 3]) -> f64 {
        let mut best = f64::INFINITY;
        self.search(self.root, query, &mut best);
        best
    }

    fn search(&self, node: Option<usize>, query: [f64; 3], best: &mut f64) {
        let Some(idx) = node else { return };
        let n = &self.nodes[idx];
        let p = self.points[n.point];
        let d2 = (0..3).map(|a| (p[a] - query[a]).powi(2)).sum::<f64>();
        if d2 < *best {
            *best = d2;
        }
        let delta = query[n.axis] - p[n.axis];
        let (near, far) = if delta < 0.0 { (n.left, n.right) } else { (n.right, n.left) };
        self.search(near, query, best);
        if delta * delta < *best {
            self.search(far, query, best);
        }
    }
}

fn directional_mean_sq(from: &PointCloud, to: &PointCloud) -> f64 {
    // Brute force is faster below a few dozen points and doubles as the
    // reference path.
    let total: f64 = if to.len() < 32 {
        from.points
            .iter()
            .map(|p| {
                to.points
                    .iter()
                    .map(|q| (0..3).map(|a| (p[a] - q[a]).powi(2)).sum::<f64>())
                    .fold(f64::INFINITY, f64::min)
            })
            .sum()
    } else {
        let tree = KdTree::build(&to.points);
        from.points.iter().map(|&p| tree.nearest_sq(p)).sum()
    };
    total / from.len() as f64
}

/// Symmetric Chamfer distance in m^2: the sum of the two directional means of
/// squared nearest-neighbor distances.
pub fn chamfer_distance(pred: &PointCloud, gt: &PointCloud) -> Result<f64, EvalError> {
    if pred.is_empty() || gt.is_empty() {
        return Err(EvalError::EmptyCloud);
    }
    Ok(directional_mean_sq(pred, gt) + directional_mean_sq(gt, pred))
}

/// Per-horizon evaluation results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonRow {
    pub horizon_s: f64,
    pub chamfer_m2: f64,
    pub samples: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct EvalTable {
    pub rows: Vec<HorizonRow>,
}

impl EvalTable {
    /// CSV with the documented header, one row per horizon.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("horizon_s,chamfer_m2,samples,failed\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                row.horizon_s, row.chamfer_m2, row.samples, row.failed
            ));
        }
        out
    }
}

/// Accumulates per-horizon sums; failed frames (empty predictions) are
/// excluded from the mean and counted separately.
struct Accumulator {
    sums: Vec<f64>,
    counts: Vec<usize>,
    failed: Vec<usize>,
}

impl Accumulator {
    fn new(n: usize) -> Self {
        Self { sums: vec![0.0; n], counts: vec![0; n], failed: vec![0; n] }
    }

    fn table(&self, horizons: &[f64]) -> EvalTable {
        EvalTable {
            rows: horizons
                .iter()
                .enumerate()
                .map(|(i, &h)| HorizonRow {
                    horizon_s: h,
                    chamfer_m2: if self.counts[i] > 0 { self.sums[i] / self.counts[i] as f64 } else { f64::NAN },
                    samples: self.counts[i],
                    failed: self.failed[i],
                })
                .collect(),
        }
    }
}

fn horizon_step(h: f64) -> usize {
    (h / FRAME_DT).round() as usize
}

/// Full model evaluation over a held-out split. Per episode: encode the
/// history window, apply latent rendering (per the variant), roll out the
/// decoder, extract a cloud per horizon with the episode's LiDAR fan, filter
/// both clouds to the evaluation range, and accumulate Chamfer distances.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_forecast(
    params: &ParamVec,
    model_cfg: &ModelConfig,
    variant: ModelVariant,
    episodes: &[EpisodeData],
    history: usize,
    cfg: &EvalConfig,
    extraction_threshold: f64,
) -> Result<EvalTable, EvalError> {
    let tables = RayTables::build(
        [model_cfg.bev.cells[0], model_cfg.bev.cells[1]],
        model_cfg.latent_config(),
    );
    let mut acc = Accumulator::new(cfg.horizons.len());
    for ep in episodes {
        let max_step = cfg.horizons.iter().map(|&h| horizon_step(h)).max().unwrap_or(0);
        if ep.episode.frames() < history + max_step {
            return Err(EvalError::EpisodeTooShort);
        }
        let current = history - 1;
        let seq = ep.history_sequence(history);
        let f_bev = encode_history(&seq, params, &model_cfg.bev).expect("non-empty history");
        let f0 = match variant {
            ModelVariant::Latent => {
                latent_render_with_tables(
                    &f_bev,
                    params.tensor("latent.proj_w"),
                    params.tensor("latent.proj_b"),
                    &tables,
                )
                .expect("channel grouping validated at config time")
                .0
            }
            ModelVariant::Raycast => f_bev,
        };
        let motions: Vec<EgoMotion> = (0..max_step).map(|t| ep.motion(current + t)).collect();
        let volumes = forecast(&f0, &motions, params, model_cfg).expect("non-empty motions");
        let origin = [0.0, 0.0, ep.lidar.sensor_z];
        let dirs = direction_fan(
            ep.lidar.azimuths,
            ep.lidar.elevations,
            ep.lidar.elev_min,
            ep.lidar.elev_max,
        );
        let spacing = 0.5 * model_cfg.bev.cell_size(0).min(model_cfg.bev.cell_size(1));
        for (i, &h) in cfg.horizons.iter().enumerate() {
            let step = horizon_step(h);
            let pred = extract_point_cloud(
                &volumes[step - 1],
                &dirs,
                origin,
                spacing,
                extraction_threshold,
            );
            let pred = filter_range(&pred, cfg);
            let gt = filter_range(&ep.clouds[current + step], cfg);
            match chamfer_distance(&pred, &gt) {
                Ok(cd) => {
                    acc.sums[i] += cd;
                    acc.counts[i] += 1;
                }
                Err(_) => acc.failed[i] += 1,
            }
        }
    }
    Ok(acc.table(&cfg.horizons))
}

/// Rasterize a cloud into an occupancy volume by trilinear splatting: the
/// interpolated logit field then peaks at the points themselves, which makes
/// the volume an extraction oracle.
pub fn oracle_volume(cloud: &PointCloud, spec: crate::grid::GridSpec) -> crate::grid::OccupancyVolume {
    let mut volume = crate::grid::OccupancyVolume::zeros(spec);
    volume.logits.fill(-20.0);
    for p in &cloud.points {
        if !spec.contains_world(*p) {
            continue;
        }
        for tap in crate::grid::trilinear_taps(spec.world_to_cell(*p), spec.cells) {
            if tap.weight > 0.0 {
                volume.logits[tap.index as usize] += 40.0 * tap.weight;
            }
        }
    }
    volume
}

/// Self-consistency check of the evaluation pipeline: inject volumes
/// rasterized from the ground-truth future clouds and run the standard
/// extraction and scoring path.
pub fn evaluate_oracle(
    episodes: &[EpisodeData],
    history: usize,
    cfg: &EvalConfig,
    volume_spec: crate::grid::GridSpec,
    extraction_threshold: f64,
) -> Result<EvalTable, EvalError> {
    let mut acc = Accumulator::new(cfg.horizons.len());
    for ep in episodes {
        let current = history - 1;
        let origin = [0.0, 0.0, ep.lidar.sensor_z];
        let dirs = direction_fan(
            ep.lidar.azimuths,
            ep.lidar.elevations,
            ep.lidar.elev_min,
            ep.lidar.elev_max,
        );
        let spacing = 0.5 * volume_spec.cell_size(0).min(volume_spec.cell_size(1));
        for (i, &h) in cfg.horizons.iter().enumerate() {
            let step = horizon_step(h);
            if ep.episode.frames() <= current + step {
                return Err(EvalError::EpisodeTooShort);
            }
            let gt = &ep.clouds[current + step];
            let volume = oracle_volume(gt, volume_spec);
            let pred = extract_point_cloud(&volume, &dirs, origin, spacing, extraction_threshold);
            let pred = filter_range(&pred, cfg);
            let gt = filter_range(gt, cfg);
            match chamfer_distance(&pred, &gt) {
                Ok(cd) => {
                    acc.sums[i] += cd;
                    acc.counts[i] += 1;
                }
                Err(_) => acc.failed[i] += 1,
            }
        }
    }
    Ok(acc.table(&cfg.horizons))
}

/// Persistence baseline: the current ground-truth cloud moved rigidly by the
/// cumulative ego motion into each future frame, scored by the same pipeline.
pub fn evaluate_persistence(
    episodes: &[EpisodeData],
    history: usize,
    cfg: &EvalConfig,
) -> Result<EvalTable, EvalError> {
    let mut acc = Accumulator::new(cfg.horizons.len());
    for ep in episodes {
        let current = history - 1;
        let current_cloud = &ep.clouds[current];
        for (i, &h) in cfg.horizons.iter().enumerate() {
            let step = horizon_step(h);
            if ep.episode.frames() <= current + step {
                return Err(EvalError::EpisodeTooShort);
            }
            // Compose the per-frame motions current -> current + step.
            let mut cumulative = EgoMotion::identity();
            for t in 0..step {
                cumulative = cumulative.then(&ep.motion(current + t));
            }
            let moved: Vec<[f64; 3]> = current_cloud
                .points
                .iter()
                .map(|p| {
                    let q = cumulative.apply_inverse([p[0], p[1]]);
                    [q[0], q[1], p[2]]
                })
                .collect();
            let pred = filter_range(&PointCloud::new(moved), cfg);
            let gt = filter_range(&ep.clouds[current + step], cfg);
            match chamfer_distance(&pred, &gt) {
                Ok(cd) => {
                    acc.sums[i] += cd;
                    acc.counts[i] += 1;
                }
                Err(_) => acc.failed[i] += 1,
            }
        }
    }
    Ok(acc.table(&cfg.horizons))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(n: usize, extent: f64, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new(
            (0..n)
                .map(|_| {
                    [
                        rng.gen_range(-extent..extent),
                        rng.gen_range(-extent..extent),
                        rng.gen_range(-extent..extent),
                    ]
                })
                .collect(),
        )
    }

    #[test]
    fn filter_keeps_boundary_points() {
        let cfg = EvalConfig { range_x: 2.0, range_y: 2.0, horizons: vec![0.5] };
        let cloud = PointCloud::new(vec![
            [2.0, 0.0, 9.0],  // exactly on the bound: kept (closed interval)
            [0.0, -2.0, 0.0], // kept
            [2.1, 0.0, 0.0],  // dropped
            [0.0, 2.00001, 0.0],
        ]);
        let out = filter_range(&cloud, &cfg);
        assert_eq!(out.len(), 2);
        // All-inside clouds pass through unchanged.
        let inside = random_cloud(50, 1.5, 1);
        assert_eq!(filter_range(&inside, &cfg), inside);
    }

    #[test]
    fn filter_matches_bruteforce_predicate() {
        let cfg = EvalConfig { range_x: 1.0, range_y: 1.4, horizons: vec![0.5] };
        let cloud = random_cloud(500, 2.0, 2);
        let expected: Vec<[f64; 3]> = cloud
            .points
            .iter()
            .copied()
            .filter(|p| p[0].abs() <= 1.0 && p[1].abs() <= 1.4)
            .collect();
        assert_eq!(filter_range(&cloud, &cfg).points, expected);
    }

    #[test]
    fn chamfer_basics() {
        let a = random_cloud(80, 3.0, 3);
        assert_eq!(chamfer_distance(&a, &a).unwrap(), 0.0);
        let single_a = PointCloud::new(vec![[0.0, 0.0, 0.0]]);
        let single_b = PointCloud::new(vec![[1.0, 0.0, 0.0]]);
        // Sum of both directional means: 1.0 + 1.0.
        assert_eq!(chamfer_distance(&single_a, &single_b).unwrap(), 2.0);
        assert!(matches!(
            chamfer_distance(&PointCloud::default(), &single_a),
            Err(EvalError::EmptyCloud)
        ));
    }

    #[test]
    fn chamfer_matches_bruteforce_oracle() {
        for (na, nb, seed) in [(500usize, 450usize, 4u64), (64, 500, 5), (33, 31, 6)] {
            let a = random_cloud(na, 4.0, seed);
            let b = random_cloud(nb, 4.0, seed + 100);
            let got = chamfer_distance(&a, &b).unwrap();
            let mean_sq = |from: &PointCloud, to: &PointCloud| -> f64 {
                from.points
                    .iter()
                    .map(|p| {
                        to.points
                            .iter()
                            .map(|q| {
                                (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)
                            })
                            .fold(f64::INFINITY, f64::min)
                    })
                    .sum::<f64>()
                    / from.len() as f64
            };
            let oracle = mean_sq(&a, &b) + mean_sq(&b, &a);
            assert!((got - oracle).abs() < 1e-9, "{got} vs {oracle}");
        }
    }

    #[test]
    fn chamfer_symmetry_and_rigid_invariance() {
        let a = random_cloud(120, 3.0, 7);
        let b = random_cloud(90, 3.0, 8);
        let ab = chamfer_distance(&a, &b).unwrap();
        let ba = chamfer_distance(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        // Rigid transform applied to both clouds.
        let yaw: f64 = 0.77;
        let (s, c) = yaw.sin_cos();
        let transform = |cloud: &PointCloud| -> PointCloud {
            PointCloud::new(
                cloud
                    .points
                    .iter()
                    .map(|p| [c * p[0] - s * p[1] + 2.0, s * p[0] + c * p[1] - 1.0, p[2] + 0.5])
                    .collect(),
            )
        };
        let moved = chamfer_distance(&transform(&a), &transform(&b)).unwrap();
        assert!((ab - moved).abs() < 1e-9, "{ab} vs {moved}");
        // Squared-distance scaling: doubling coordinates quadruples CD.
        let double = |cloud: &PointCloud| {
            PointCloud::new(cloud.points.iter().map(|p| [2.0 * p[0], 2.0 * p[1], 2.0 * p[2]]).collect())
        };
        let scaled = chamfer_distance(&double(&a), &double(&b)).unwrap();
        assert!((scaled - 4.0 * ab).abs() < 1e-9);
    }

    #[test]
    fn kdtree_equals_bruteforce_exactly() {
        let a = random_cloud(400, 5.0, 9);
        let tree = KdTree::build(&a.points);
        let queries = random_cloud(200, 6.0, 10);
        for q in &queries.points {
            let brute = a
                .points
                .iter()
                .map(|p| (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2))
                .fold(f64::INFINITY, f64::min);
            assert_eq!(tree.nearest_sq(*q), brute);
        }
    }
}
