//! Training objectives: ray-wise cross-entropy on occupancy logits and the L1
//! expected-depth baseline, both with gradients into the volume.

use super::{LossConfig, TrainError};
use crate::grid::{
    sample_waypoints, trilinear_taps, OccupancyVolume, PointCloud, Ray,
};
use crate::render::{
    conditional_probabilities, conditional_probabilities_backward, expected_depth, sigmoid,
};

/// Ray-wise cross-entropy: per ground-truth point, contrast its interpolated
/// logit against the logits of waypoints sampled along the ray from the
/// origin through the point to the volume boundary. Waypoints within
/// `exclusion_radius` of the point are dropped. Returns the mean loss over
/// points.
pub fn ray_ce_loss(
    volume: &OccupancyVolume,
    gt: &PointCloud,
    origin: [f64; 3],
    cfg: &LossConfig,
) -> Result<f64, TrainError> {
    ray_ce_loss_with_grad(volume, gt, origin, cfg).map(|(l, _)| l)
}

/// Loss plus the gradient w.r.t. every volume logit.
pub fn ray_ce_loss_with_grad(
    volume: &OccupancyVolume,
    gt: &PointCloud,
    origin: [f64; 3],
    cfg: &LossConfig,
) -> Result<(f64, Vec<f64>), TrainError> {
    let spec = &volume.spec;
    let inside: Vec<&[f64; 3]> = gt.points.iter().filter(|p| spec.contains_world(**p)).collect();
    if inside.is_empty() {
        return Err(TrainError::NoSupervision);
    }
    let mut grad = vec![0.0; volume.logits.len()];
    let mut total = 0.0;
    let inv_n = 1.0 / inside.len() as f64;
    let mut taps_list = Vec::new();
    let mut logits = Vec::new();
    for point in inside {
        let ray = Ray::from_points(origin, *point).map_err(|_| TrainError::DegenerateRay)?;
        let dist = crate::grid::norm(crate::grid::sub(*point, origin));
        let waypoints = sample_waypoints(&ray, cfg.spacing, spec);
        taps_list.clear();
        logits.clear();
        for (j, coord) in waypoints.coordinates.iter().enumerate() {
            if (waypoints.distances[j] - dist).abs() < cfg.exclusion_radius {
                continue;
            }
            let taps = trilinear_taps(spec.world_to_cell(*coord), spec.cells);
            let logit: f64 = taps.iter().map(|t| t.weight * volume.logits[t.index as usize]).sum();
            taps_list.push(taps);
            logits.push(logit);
        }
        let gt_taps = trilinear_taps(spec.world_to_cell(*point), spec.cells);
        let gt_logit: f64 =
            gt_taps.iter().map(|t| t.weight * volume.logits[t.index as usize]).sum();

        // Stable log-sum-exp over waypoints plus the point itself.
        let max = logits.iter().cloned().fold(gt_logit, f64::max);
        let mut denom = (gt_logit - max).exp();
        for &l in &logits {
            denom += (l - max).exp();
        }
        total += (max + denom.ln() - gt_logit) * inv_n;

        // Softmax gradients, distributed through the interpolation corners.
        let gt_soft = (gt_logit - max).exp() / denom;
        for t in &gt_taps {
            if t.weight != 0.0 {
                grad[t.index as usize] += t.weight * (gt_soft - 1.0) * inv_n;
            }
        }
        for (taps, &l) in taps_list.iter().zip(&logits) {
            let soft = (l - max).exp() / denom;
            for t in taps {
                if t.weight != 0.0 {
                    grad[t.index as usize] += t.weight * soft * inv_n;
                }
            }
        }
    }
    Ok((total, grad))
}

/// L1 loss between the rendered expected depth of each ground-truth ray and
/// the point's true distance, averaged over points; `to_probability` is the
/// logit activation used by the renderer.
pub fn l1_depth_loss(
    volume: &OccupancyVolume,
    gt: &PointCloud,
    origin: [f64; 3],
    spacing: f64,
    to_probability: impl Fn(f64) -> f64,
) -> Result<f64, TrainError> {
    let spec = &volume.spec;
    let inside: Vec<&[f64; 3]> = gt.points.iter().filter(|p| spec.contains_world(**p)).collect();
    if inside.is_empty() {
        return Err(TrainError::NoSupervision);
    }
    let mut total = 0.0;
    for point in inside.iter() {
        let ray = Ray::from_points(origin, **point).map_err(|_| TrainError::DegenerateRay)?;
        let dist = crate::grid::norm(crate::grid::sub(**point, origin));
        let waypoints = sample_waypoints(&ray, spacing, spec);
        let independent: Vec<f64> = waypoints
            .coordinates
            .iter()
            .map(|&c| to_probability(crate::grid::trilinear_sample(volume, spec.world_to_cell(c))))
            .collect();
        let cond = conditional_probabilities(&independent).map_err(|_| TrainError::BadProbability)?;
        let depth = expected_depth(&cond, &waypoints.distances).expect("lengths match");
        total += (depth - dist).abs();
    }
    Ok(total / inside.len() as f64)
}

/// L1 depth loss with gradients into the volume logits; the activation is the
/// logistic sigmoid (the training default).
pub fn l1_depth_loss_with_grad(
    volume: &OccupancyVolume,
    gt: &PointCloud,
    origin: [f64; 3],
    spacing: f64,
) -> Result<(f64, Vec<f64>), TrainError> {
    let spec = &volume.spec;
    let inside: Vec<&[f64; 3]> = gt.points.iter().filter(|p| spec.contains_world(**p)).collect();
    if inside.is_empty() {
        return Err(TrainError::NoSupervision);
    }
    let mut grad = vec![0.0; volume.logits.len()];
    let mut total = 0.0;
    let inv_n = 1.0 / inside.len() as f64;
    for point in inside {
        let ray = Ray::from_points(origin, *point).map_err(|_| TrainError::DegenerateRay)?;
        let dist = crate::grid::norm(crate::grid::sub(*point, origin));
        let waypoints = sample_waypoints(&ray, spacing, spec);
        if waypoints.is_empty() {
            continue;
        }
        let taps: Vec<_> = waypoints
            .coordinates
            .iter()
            .map(|&c| trilinear_taps(spec.world_to_cell(c), spec.cells))
            .collect();
        let logits: Vec<f64> = taps
            .iter()
            .map(|t| t.iter().map(|t| t.weight * volume.logits[t.index as usize]).sum())
            .collect();
        let independent: Vec<f64> = logits.iter().map(|&l| sigmoid(l)).collect();
        let cond = conditional_probabilities(&independent).expect("sigmoid output in range");
        let depth = expected_depth(&cond, &waypoints.distances).expect("lengths match");
        total += (depth - dist).abs() * inv_n;
        let sign = if depth >= dist { 1.0 } else { -1.0 };
        // d depth / d conditional = distances; chain to independent, then
        // through the sigmoid and the interpolation corners.
        let upstream: Vec<f64> = waypoints.distances.iter().map(|&d| sign * d * inv_n).collect();
        let g_ind = conditional_probabilities_backward(&independent, &upstream);
        for ((g, &p), tap) in g_ind.iter().zip(&independent).zip(&taps) {
            let gl = g * p * (1.0 - p);
            if gl == 0.0 {
                continue;
            }
            for t in tap {
                if t.weight != 0.0 {
                    grad[t.index as usize] += t.weight * gl;
                }
            }
        }
    }
    Ok((total, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn loss_cfg(spacing: f64, exclusion: f64) -> LossConfig {
        LossConfig {
            spacing,
            exclusion_radius: exclusion,
            horizon: 6,
            max_points_per_frame: 4096,
        }
    }

    /// Volume sized so a +x ray from the origin yields exactly `m` surviving
    /// waypoints at unit spacing with the ground-truth point mid-interval.
    fn equal_logit_case(m: usize) -> (OccupancyVolume, PointCloud, [f64; 3]) {
        let extent = m as f64 + 0.75;
        let cells = (extent.ceil() as usize) * 2;
        let spec = GridSpec::new(
            [cells, 4, 4],
            [0.0, -2.0, -2.0],
            [extent, 2.0, 2.0],
        )
        .unwrap();
        let volume = OccupancyVolume { logits: vec![0.7; spec.cell_count()], spec };
        let g = [(m as f64 / 2.0).floor() + 0.5, 0.0, 0.0];
        (volume, PointCloud::new(vec![g]), [0.0, 0.0, 0.0])
    }

    #[test]
    fn equal_logits_closed_form() {
        for m in [1usize, 4, 16, 64] {
            let (volume, gt, origin) = equal_logit_case(m);
            let cfg = loss_cfg(1.0, 0.4);
            let loss = ray_ce_loss(&volume, &gt, origin, &cfg).unwrap();
            let expected = ((m + 1) as f64).ln();
            assert!(
                (loss - expected).abs() < 1e-9,
                "m={m}: loss {loss} vs ln(m+1) {expected}"
            );
        }
    }

    #[test]
    fn saturated_point_drives_loss_to_zero() {
        // One gt point on a voxel center with logit +30; waypoints read -30.
        let spec = GridSpec::new([8, 8, 8], [-4.0; 3], [4.0; 3]).unwrap();
        let mut volume = OccupancyVolume::zeros(spec);
        volume.logits.fill(-30.0);
        // Waypoints along +x at 1 m spacing from the origin; gt at x = 2.5
        // (voxel center (6,3,3) is world (2.5, -0.5, -0.5)).
        let origin = [-3.5, -0.5, -0.5];
        let idx = volume.index(6, 3, 3);
        volume.logits[idx] = 30.0;
        // Clear the interpolation neighborhood of the waypoints near the gt
        // point: exclusion removes waypoints within 1.2 m of the point, so
        // surviving waypoints sit at least one cell away.
        let gt = PointCloud::new(vec![[2.5, -0.5, -0.5]]);
        let cfg = loss_cfg(1.0, 1.2);
        let loss = ray_ce_loss(&volume, &gt, origin, &cfg).unwrap();
        assert!(loss < 1e-9, "saturated loss {loss}");
    }

    #[test]
    fn random_volume_matches_dense_softmax_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let spec = GridSpec::new([5, 5, 3], [-2.5, -2.5, -1.5], [2.5, 2.5, 1.5]).unwrap();
            let mut volume = OccupancyVolume::zeros(spec);
            for v in volume.logits.iter_mut() {
                *v = rng.gen_range(-2.0..2.0);
            }
            let points: Vec<[f64; 3]> = (0..3)
                .map(|_| {
                    [
                        rng.gen_range(-2.0..2.0),
                        rng.gen_range(-2.0..2.0),
                        rng.gen_range(-1.0..1.0),
                    ]
                })
                .collect();
            let origin = [0.1, -0.2, 0.0];
            let cfg = loss_cfg(0.4, 0.15);
            let loss = ray_ce_loss(&volume, &PointCloud::new(points.clone()), origin, &cfg).unwrap();
            // Oracle: enumerate waypoints independently and evaluate the
            // softmax directly (no log-sum-exp trick).
            let tri = |p: [f64; 3]| -> f64 {
                let c = [
                    (p[0] + 2.5) / 1.0 - 0.5,
                    (p[1] + 2.5) / 1.0 - 0.5,
                    (p[2] + 1.5) / 1.0 - 0.5,
                ];
                let f = [c[0].floor(), c[1].floor(), c[2].floor()];
                let r = [c[0] - f[0], c[1] - f[1], c[2] - f[2]];
                let mut acc = 0.0;
                for dx in 0..2i64 {
                    for dy in 0..2i64 {
                        for dz in 0..2i64 {
                            let (x, y, z) = (f[0] as i64 + dx, f[1] as i64 + dy, f[2] as i64 + dz);
                            if x < 0 || y < 0 || z < 0 || x >= 5 || y >= 5 || z >= 3 {
                                continue;
                            }
                            let w = (if dx == 1 { r[0] } else { 1.0 - r[0] })
                                * (if dy == 1 { r[1] } else { 1.0 - r[1] })
                                * (if dz == 1 { r[2] } else { 1.0 - r[2] });
                            acc += w * volume.logits[((x * 5 + y) * 3 + z) as usize];
                        }
                    }
                }
                acc
            };
            let mut oracle = 0.0;
            for g in &points {
                let delta = [g[0] - origin[0], g[1] - origin[1], g[2] - origin[2]];
                let dist =
                    (delta[0] * delta[0] + delta[1] * delta[1] + delta[2] * delta[2]).sqrt();
                let dir = [delta[0] / dist, delta[1] / dist, delta[2] / dist];
                let mut denom = 0.0;
                let mut j = 1u32;
                loop {
                    let t = j as f64 * 0.4;
                    let p = [origin[0] + t * dir[0], origin[1] + t * dir[1], origin[2] + t * dir[2]];
                    if p[0].abs() > 2.5 || p[1].abs() > 2.5 || p[2].abs() > 1.5 {
                        break;
                    }
                    if (t - dist).abs() >= 0.15 {
                        denom += tri(p).exp();
                    }
                    j += 1;
                }
                let pg = tri(*g).exp();
                oracle += -(pg / (denom + pg)).ln();
            }
            oracle /= points.len() as f64;
            assert!((loss - oracle).abs() < 1e-9, "loss {loss} vs oracle {oracle}");
        }
    }

    #[test]
    fn shift_invariance_of_logits() {
        // Waypoints on voxel centers read logits exactly, so adding a
        // constant to the volume shifts every logit in the softmax by the
        // same amount and the loss is unchanged.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let spec = GridSpec::new([8, 8, 8], [-4.0; 3], [4.0; 3]).unwrap();
        let mut volume = OccupancyVolume::zeros(spec);
        for v in volume.logits.iter_mut() {
            *v = rng.gen_range(-2.0..2.0);
        }
        let gt = PointCloud::new(vec![[1.5, -0.5, -0.5]]);
        let origin = [-3.5, -0.5, -0.5];
        let cfg = loss_cfg(1.0, 0.25);
        let a = ray_ce_loss(&volume, &gt, origin, &cfg).unwrap();
        let mut shifted = volume.clone();
        for v in shifted.logits.iter_mut() {
            *v += 7.3;
        }
        let b = ray_ce_loss(&shifted, &gt, origin, &cfg).unwrap();
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        assert!(a >= 0.0);
    }

    #[test]
    fn empty_supervision_is_an_error() {
        let spec = GridSpec::new([4, 4, 2], [-2.0, -2.0, 0.0], [2.0, 2.0, 2.0]).unwrap();
        let volume = OccupancyVolume::zeros(spec);
        let gt = PointCloud::new(vec![[10.0, 0.0, 1.0]]);
        let cfg = loss_cfg(0.5, 0.2);
        assert!(matches!(
            ray_ce_loss(&volume, &gt, [0.0, 0.0, 1.0], &cfg),
            Err(TrainError::NoSupervision)
        ));
    }

    #[test]
    fn ray_ce_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let spec = GridSpec::new([5, 5, 3], [-2.5, -2.5, -1.5], [2.5, 2.5, 1.5]).unwrap();
        let mut volume = OccupancyVolume::zeros(spec);
        for v in volume.logits.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let gt = PointCloud::new(vec![[1.3, 0.4, 0.2], [-0.9, 1.1, -0.4]]);
        let origin = [0.0, 0.0, 0.0];
        let cfg = loss_cfg(0.5, 0.2);
        let (_, grad) = ray_ce_loss_with_grad(&volume, &gt, origin, &cfg).unwrap();
        let h = 1e-5;
        for i in 0..volume.logits.len() {
            let mut plus = volume.clone();
            plus.logits[i] += h;
            let mut minus = volume.clone();
            minus.logits[i] -= h;
            let numeric = (ray_ce_loss(&plus, &gt, origin, &cfg).unwrap()
                - ray_ce_loss(&minus, &gt, origin, &cfg).unwrap())
                / (2.0 * h);
            assert!(
                (grad[i] - numeric).abs() < 1e-6,
                "logit {i}: {} vs {numeric}",
                grad[i]
            );
        }
    }

    #[test]
    fn l1_depth_basics() {
        let spec = GridSpec::new([8, 8, 8], [-4.0; 3], [4.0; 3]).unwrap();
        // Transparent volume renders depth 0, so the loss equals the gt range.
        let mut volume = OccupancyVolume::zeros(spec);
        volume.logits.fill(-60.0);
        let gt = PointCloud::new(vec![[3.0, 0.0, 0.0]]);
        let loss = l1_depth_loss(&volume, &gt, [-2.0, 0.0, 0.0], 0.5, sigmoid).unwrap();
        assert!((loss - 5.0).abs() < 1e-6, "loss {loss}");
        // A saturated wall at the right depth renders near-zero loss.
        let mut wall = OccupancyVolume::zeros(spec);
        wall.logits.fill(-60.0);
        // Occupy the voxel slab at the gt point so depth concentrates there.
        for z in 0..8 {
            for y in 0..8 {
                let idx = wall.index(5, y, z);
                wall.logits[idx] = 60.0;
            }
        }
        // Voxel x-index 5 is centered at world x = 1.5.
        let gt = PointCloud::new(vec![[1.5, -0.5, -0.5]]);
        let loss = l1_depth_loss(&wall, &gt, [-3.5, -0.5, -0.5], 1.0, sigmoid).unwrap();
        assert!(loss < 1e-6, "wall loss {loss}");
    }

    #[test]
    fn l1_matches_componentwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let spec = GridSpec::new([5, 5, 3], [-2.5, -2.5, -1.5], [2.5, 2.5, 1.5]).unwrap();
        let mut volume = OccupancyVolume::zeros(spec);
        for v in volume.logits.iter_mut() {
            *v = rng.gen_range(-1.5..1.5);
        }
        let points = vec![[1.2, -0.3, 0.4], [-0.8, 0.9, -0.2], [0.4, 1.6, 0.1]];
        let origin = [0.0, 0.1, 0.0];
        let loss =
            l1_depth_loss(&volume, &PointCloud::new(points.clone()), origin, 0.4, sigmoid).unwrap();
        let mut oracle = 0.0;
        for g in &points {
            let ray = Ray::from_points(origin, *g).unwrap();
            let d = crate::render::render_depth(&volume, &ray, 0.4, sigmoid).unwrap();
            let dist = crate::grid::norm(crate::grid::sub(*g, origin));
            oracle += (d - dist).abs();
        }
        oracle /= points.len() as f64;
        assert!((loss - oracle).abs() < 1e-12);
    }

    #[test]
    fn l1_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let spec = GridSpec::new([5, 5, 3], [-2.5, -2.5, -1.5], [2.5, 2.5, 1.5]).unwrap();
        let mut volume = OccupancyVolume::zeros(spec);
        for v in volume.logits.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let gt = PointCloud::new(vec![[1.4, 0.3, 0.3], [-1.0, -0.7, -0.3]]);
        let origin = [0.0, 0.0, 0.0];
        let (_, grad) = l1_depth_loss_with_grad(&volume, &gt, origin, 0.45).unwrap();
        let h = 1e-5;
        for i in 0..volume.logits.len() {
            let mut plus = volume.clone();
            plus.logits[i] += h;
            let mut minus = volume.clone();
            minus.logits[i] -= h;
            let numeric = (l1_depth_loss(&plus, &gt, origin, 0.45, sigmoid).unwrap()
                - l1_depth_loss(&minus, &gt, origin, 0.45, sigmoid).unwrap())
                / (2.0 * h);
            assert!(
                (grad[i] - numeric).abs() < 1e-6,
                "logit {i}: {} vs {numeric}",
                grad[i]
            );
        }
    }
}
