//! Differentiable ray-casting on occupancy volumes: conditional termination
//! probabilities, expected depth, depth rendering, and point-cloud extraction.

use crate::grid::{
    sample_waypoints, trilinear_sample, GridSpec, OccupancyVolume, PointCloud, Ray, WaypointSet,
};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("probability {0} outside [0, 1]")]
    ProbabilityOutOfRange(f64),
    #[error("length mismatch: {left} conditionals vs {right} distances")]
    LengthMismatch { left: usize, right: usize },
    #[error("ray exits immediately: no waypoints inside the volume")]
    RayExitsImmediately,
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Independent and conditional termination probabilities along one ray.
///
/// `conditional[j]` is the probability the ray terminates at waypoint `j`
/// given that it passed every earlier waypoint:
/// `conditional[j] = prod_{k<j}(1 - independent[k]) * independent[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CondProbRay {
    pub independent: Vec<f64>,
    pub conditional: Vec<f64>,
}

/// Chain the independent probabilities into conditional termination
/// probabilities. The running transmittance is an exact product, so an
/// independent probability of exactly 1 zeroes everything behind it.
pub fn conditional_probabilities(independent: &[f64]) -> Result<CondProbRay, RenderError> {
    for &p in independent {
        if !(0.0..=1.0).contains(&p) {
            return Err(RenderError::ProbabilityOutOfRange(p));
        }
    }
    let mut conditional = Vec::with_capacity(independent.len());
    let mut transmittance = 1.0;
    for &p in independent {
        conditional.push(transmittance * p);
        transmittance *= 1.0 - p;
    }
    Ok(CondProbRay { independent: independent.to_vec(), conditional })
}

/// Jacobian-transpose product of `conditional_probabilities`.
///
/// With `T_k = prod_{l<k}(1 - p_l)`:
///   dL/dp_k = T_k * (u_k - sum_{j>k} u_j p_j prod_{k<l<j}(1 - p_l)),
/// where the trailing sum is accumulated right-to-left, so no division by
/// `1 - p` is ever needed and `p = 1` stays exact.
pub fn conditional_probabilities_backward(independent: &[f64], upstream: &[f64]) -> Vec<f64> {
    assert_eq!(independent.len(), upstream.len(), "shape mismatch in backward");
    let n = independent.len();
    let mut prefix = Vec::with_capacity(n);
    let mut t = 1.0;
    for &p in independent {
        prefix.push(t);
        t *= 1.0 - p;
    }
    let mut grad = vec![0.0; n];
    let mut trailing = 0.0;
    for k in (0..n).rev() {
        grad[k] = prefix[k] * (upstream[k] - trailing);
        trailing = upstream[k] * independent[k] + (1.0 - independent[k]) * trailing;
    }
    grad
}

/// Expected termination depth: `sum_j conditional[j] * distances[j]`.
/// An empty ray integrates to 0 m.
pub fn expected_depth(cond: &CondProbRay, distances: &[f64]) -> Result<f64, RenderError> {
    if cond.conditional.len() != distances.len() {
        return Err(RenderError::LengthMismatch {
            left: cond.conditional.len(),
            right: distances.len(),
        });
    }
    Ok(cond.conditional.iter().zip(distances).map(|(p, d)| p * d).sum())
}

/// Render the expected depth of one ray through a volume: sample waypoints,
/// read logits with trilinear interpolation, map them through
/// `to_probability`, chain, and integrate.
pub fn render_depth(
    volume: &OccupancyVolume,
    ray: &Ray<3>,
    spacing: f64,
    to_probability: impl Fn(f64) -> f64,
) -> Result<f64, RenderError> {
    let waypoints = sample_waypoints(ray, spacing, &volume.spec);
    if waypoints.is_empty() {
        return Err(RenderError::RayExitsImmediately);
    }
    let independent: Vec<f64> = waypoints
        .coordinates
        .iter()
        .map(|&p| to_probability(trilinear_sample(volume, volume.spec.world_to_cell(p))))
        .collect();
    let cond = conditional_probabilities(&independent)?;
    expected_depth(&cond, &waypoints.distances)
}

/// Per ray, emit the waypoint with the maximum interpolated logit; rays whose
/// peak stays below `threshold` produce no point.
pub fn extract_point_cloud(
    volume: &OccupancyVolume,
    directions: &[[f64; 3]],
    origin: [f64; 3],
    spacing: f64,
    threshold: f64,
) -> PointCloud {
    let mut points = Vec::new();
    for &direction in directions {
        let ray = match Ray::new(origin, direction) {
            Ok(r) => r,
            Err(_) => continue,
        };
        if let Some(distance) = argmax_distance(volume, &ray, spacing, threshold) {
            points.push(ray.point_at(distance));
        }
    }
    PointCloud::new(points)
}

fn argmax_distance(
    volume: &OccupancyVolume,
    ray: &Ray<3>,
    spacing: f64,
    threshold: f64,
) -> Option<f64> {
    let waypoints: WaypointSet<3> = sample_waypoints(ray, spacing, &volume.spec);
    let mut best: Option<(f64, f64)> = None;
    for (j, &p) in waypoints.coordinates.iter().enumerate() {
        let logit = trilinear_sample(volume, volume.spec.world_to_cell(p));
        // Strictly greater keeps the earliest waypoint on ties.
        if best.map_or(true, |(l, _)| logit > l) {
            best = Some((logit, waypoints.distances[j]));
        }
    }
    match best {
        Some((logit, dist)) if logit >= threshold => Some(dist),
        _ => None,
    }
}

/// Uniform fan of unit direction vectors: `azimuths` around the full circle
/// crossed with `elevations` evenly spaced over `[elev_min, elev_max]`.
pub fn direction_fan(azimuths: usize, elevations: usize, elev_min: f64, elev_max: f64) -> Vec<[f64; 3]> {
    let mut dirs = Vec::with_capacity(azimuths * elevations);
    for e in 0..elevations {
        let elev = if elevations == 1 {
            0.5 * (elev_min + elev_max)
        } else {
            elev_min + (elev_max - elev_min) * e as f64 / (elevations - 1) as f64
        };
        for a in 0..azimuths {
            let az = std::f64::consts::TAU * a as f64 / azimuths as f64;
            dirs.push([az.cos() * elev.cos(), az.sin() * elev.cos(), elev.sin()]);
        }
    }
    dirs
}

pub fn grid_spec_for_tests(extent: f64, cells: usize, z_cells: usize) -> GridSpec {
    GridSpec::new(
        [cells, cells, z_cells],
        [-extent, -extent, -extent],
        [extent, extent, extent],
    )
    .unwrap()
}
