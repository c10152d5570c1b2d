//! Latent rendering: convert visual BEV embeddings into geometric BEV
//! features with analytical gradients.
//!
//! Per channel group, a learned projection turns the group's features into an
//! independent occupancy probability per cell. Each cell is then treated as
//! the endpoint of a ray from a shared origin: a chain product over prior
//! waypoints yields its conditional (occlusion-aware) probability, a marched
//! expectation along the cell's bearing yields a ray-wise feature, and the
//! two are multiplied so that only cells with high conditional probability
//! keep a strong response.

use crate::grid::{bilinear_taps, prior_waypoints, BevFeatureMap, Tap};
use crate::render::sigmoid;
use thiserror::Error;

/// Probabilities from the learned projection are kept this far away from 0
/// and 1 so the chain products stay numerically benign under training.
pub const PROB_CLAMP: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum LatentError {
    #[error("channels {channels} not divisible by groups {groups}")]
    ChannelsNotDivisible { channels: usize, groups: usize },
    #[error("weight shape mismatch: expected {expected} values, got {got}")]
    WeightShape { expected: usize, got: usize },
    #[error("probability {0} outside [0, 1]")]
    ProbabilityOutOfRange(f64),
    #[error("similarity undefined: feature map has no nonzero features")]
    AllZeroMap,
}

/// Rendering geometry: group count, waypoint spacing in cells, and the shared
/// ray origin in continuous cell coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatentRenderConfig {
    pub groups: usize,
    pub spacing: f64,
    pub origin: [f64; 2],
}

impl LatentRenderConfig {
    /// Origin at the grid center (the usual choice for ego-centered maps).
    pub fn centered(cells: [usize; 2], groups: usize, spacing: f64) -> Self {
        assert!(groups >= 1 && spacing > 0.0);
        let origin = [(cells[0] as f64 - 1.0) / 2.0, (cells[1] as f64 - 1.0) / 2.0];
        Self { groups, spacing, origin }
    }
}

/// Independent and conditional probability maps, one scalar map per group,
/// stored group-major: `[(group * cells_x + x) * cells_y + y]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CondProbMap {
    pub cells: [usize; 2],
    pub groups: usize,
    pub independent: Vec<f64>,
    pub conditional: Vec<f64>,
}

/// Precomputed marching geometry for one cell: interpolation taps for every
/// sample along the ray from the origin through the cell to the grid border,
/// at multiples of the configured spacing. The first `prior_len` samples are
/// strictly closer to the origin than the cell and form its prior set.
#[derive(Debug, Clone)]
struct CellRay {
    prior_len: usize,
    samples: Vec<[Tap; 4]>,
}

/// Shared marching tables for a fixed grid size and rendering config.
#[derive(Debug)]
pub struct RayTables {
    pub cells: [usize; 2],
    pub config: LatentRenderConfig,
    rays: Vec<CellRay>,
    max_prior_len: usize,
}

impl RayTables {
    pub fn build(cells: [usize; 2], config: LatentRenderConfig) -> Self {
        let bounds = |p: [f64; 2]| {
            p[0] >= -0.5
                && p[0] <= cells[0] as f64 - 0.5
                && p[1] >= -0.5
                && p[1] <= cells[1] as f64 - 0.5
        };
        let mut rays = Vec::with_capacity(cells[0] * cells[1]);
        let mut max_prior_len = 0;
        for x in 0..cells[0] {
            for y in 0..cells[1] {
                let target = [x as f64, y as f64];
                let ray = match prior_waypoints(config.origin, target, config.spacing) {
                    Ok(priors) => {
                        // Continue the same march past the cell to the border.
                        let delta = [target[0] - config.origin[0], target[1] - config.origin[1]];
                        let dist = (delta[0] * delta[0] + delta[1] * delta[1]).sqrt();
                        let dir = [delta[0] / dist, delta[1] / dist];
                        let mut samples: Vec<[Tap; 4]> = priors
                            .coordinates
                            .iter()
                            .map(|&c| bilinear_taps(c, cells))
                            .collect();
                        let mut k = priors.len() as u64;
                        loop {
                            let t = k as f64 * config.spacing;
                            let p = [
                                config.origin[0] + t * dir[0],
                                config.origin[1] + t * dir[1],
                            ];
                            if !bounds(p) {
                                break;
                            }
                            samples.push(bilinear_taps(p, cells));
                            k += 1;
                        }
                        CellRay { prior_len: priors.len(), samples }
                    }
                    // The cell containing the origin: a single sample at the
                    // origin itself and no priors.
                    Err(_) => CellRay {
                        prior_len: 0,
                        samples: vec![bilinear_taps(config.origin, cells)],
                    },
                };
                max_prior_len = max_prior_len.max(ray.prior_len);
                rays.push(ray);
            }
        }
        Self { cells, config, rays, max_prior_len }
    }

    fn cell_count(&self) -> usize {
        self.cells[0] * self.cells[1]
    }
}

#[inline]
fn sample_taps(map: &[f64], taps: &[Tap; 4]) -> f64 {
    taps.iter().map(|t| t.weight * map[t.index as usize]).sum()
}

/// Per-group independent probability maps from a block-diagonal linear
/// projection followed by a sigmoid, clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]`.
///
/// `weights` holds `groups` rows of `channels / groups` values; `bias` one
/// value per group. Group `g` reads the contiguous channel slice
/// `[g * channels/groups, (g + 1) * channels/groups)`.
pub fn project_independent(
    map: &BevFeatureMap,
    weights: &[f64],
    bias: &[f64],
    groups: usize,
) -> Result<Vec<f64>, LatentError> {
    let channels = map.channels;
    if channels % groups != 0 {
        return Err(LatentError::ChannelsNotDivisible { channels, groups });
    }
    let per_group = channels / groups;
    if weights.len() != groups * per_group {
        return Err(LatentError::WeightShape { expected: groups * per_group, got: weights.len() });
    }
    if bias.len() != groups {
        return Err(LatentError::WeightShape { expected: groups, got: bias.len() });
    }
    let cells = map.cells_xy();
    let n = cells[0] * cells[1];
    let mut out = vec![0.0; groups * n];
    for g in 0..groups {
        let w = &weights[g * per_group..(g + 1) * per_group];
        let dst = &mut out[g * n..(g + 1) * n];
        for (cell, d) in dst.iter_mut().enumerate() {
            let base = cell * channels + g * per_group;
            let feat = &map.data[base..base + per_group];
            let z: f64 = bias[g] + w.iter().zip(feat).map(|(a, b)| a * b).sum::<f64>();
            *d = sigmoid(z).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        }
    }
    Ok(out)
}

/// Conditional probability map for one group: per cell, the chain product of
/// `1 - p` over its prior waypoints (bilinearly interpolated) times the
/// cell's own independent probability. The origin cell keeps its own
/// probability unmodified.
pub fn conditional_prob_map(
    independent: &[f64],
    tables: &RayTables,
) -> Result<Vec<f64>, LatentError> {
    assert_eq!(independent.len(), tables.cell_count());
    for &p in independent {
        if !(0.0..=1.0).contains(&p) {
            return Err(LatentError::ProbabilityOutOfRange(p));
        }
    }
    let mut out = vec![0.0; independent.len()];
    for (cell, ray) in tables.rays.iter().enumerate() {
        let mut transmittance = 1.0;
        for taps in &ray.samples[..ray.prior_len] {
            transmittance *= 1.0 - sample_taps(independent, taps);
        }
        out[cell] = transmittance * independent[cell];
    }
    Ok(out)
}

/// Ray-wise feature expectation for one group: per cell, march the full ray
/// and accumulate `conditional * feature` at every sample, so cells sharing a
/// bearing share the value.
///
/// `features` is the group's channel slice in `(cell, channel)` layout; the
/// result has the same shape.
pub fn ray_feature_expectation(
    features: &[f64],
    per_group: usize,
    conditional: &[f64],
    tables: &RayTables,
) -> Vec<f64> {
    let n = tables.cell_count();
    assert_eq!(features.len(), n * per_group);
    assert_eq!(conditional.len(), n);
    let mut out = vec![0.0; n * per_group];
    for (cell, ray) in tables.rays.iter().enumerate() {
        let acc = &mut out[cell * per_group..(cell + 1) * per_group];
        for taps in &ray.samples {
            let p_hat = sample_taps(conditional, taps);
            if p_hat == 0.0 {
                continue;
            }
            for t in taps {
                if t.weight == 0.0 {
                    continue;
                }
                let base = t.index as usize * per_group;
                let w = p_hat * t.weight;
                for (a, f) in acc.iter_mut().zip(&features[base..base + per_group]) {
                    *a += w * f;
                }
            }
        }
    }
    out
}

/// Saved intermediates for the backward pass. Probability maps are stored
/// group-interleaved (`[cell * groups + g]`) so one march sample serves every
/// group with contiguous reads.
pub struct LatentCache {
    pub independent: Vec<f64>,     // (cell, group)
    pub conditional: Vec<f64>,     // (cell, group)
    pub transmittance: Vec<f64>,   // (cell, group)
    pub prior_values: Vec<f64>,    // ((prior sample), group)
    pub prior_offsets: Vec<usize>, // per cell: offset into prior samples
    pub ray_features: Vec<f64>,    // (cell, channel) across all groups
}

/// Full latent rendering: split channels into contiguous groups, project,
/// chain, march, and re-weight. Output shape equals input shape.
pub fn latent_render(
    map: &BevFeatureMap,
    weights: &[f64],
    bias: &[f64],
    config: LatentRenderConfig,
) -> Result<BevFeatureMap, LatentError> {
    let tables = RayTables::build(map.cells_xy(), config);
    latent_render_with_tables(map, weights, bias, &tables).map(|(m, _)| m)
}

/// Rendering against prebuilt tables; returns the cache needed by
/// `latent_render_backward`.
pub fn latent_render_with_tables(
    map: &BevFeatureMap,
    weights: &[f64],
    bias: &[f64],
    tables: &RayTables,
) -> Result<(BevFeatureMap, LatentCache), LatentError> {
    let groups = tables.config.groups;
    let channels = map.channels;
    if channels % groups != 0 {
        return Err(LatentError::ChannelsNotDivisible { channels, groups });
    }
    let per_group = channels / groups;
    if weights.len() != channels {
        return Err(LatentError::WeightShape { expected: channels, got: weights.len() });
    }
    if bias.len() != groups {
        return Err(LatentError::WeightShape { expected: groups, got: bias.len() });
    }
    let n = tables.cell_count();

    // Step 1: block-diagonal projection to (cell, group) probabilities.
    let mut independent = vec![0.0; n * groups];
    for cell in 0..n {
        let feat = &map.data[cell * channels..(cell + 1) * channels];
        let dst = &mut independent[cell * groups..(cell + 1) * groups];
        for (g, d) in dst.iter_mut().enumerate() {
            let mut z = bias[g];
            for c in 0..per_group {
                z += weights[g * per_group + c] * feat[g * per_group + c];
            }
            *d = sigmoid(z).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        }
    }

    // Step 2: conditional probabilities via the prior chain products; one tap
    // gather serves every group.
    let mut conditional = vec![0.0; n * groups];
    let mut transmittance = vec![0.0; n * groups];
    let mut prior_offsets = Vec::with_capacity(n + 1);
    let mut total_priors = 0usize;
    for ray in &tables.rays {
        prior_offsets.push(total_priors);
        total_priors += ray.prior_len;
    }
    prior_offsets.push(total_priors);
    let mut prior_values = vec![0.0; total_priors * groups];
    let mut qbuf = vec![0.0; groups];
    for (cell, ray) in tables.rays.iter().enumerate() {
        let trans = &mut transmittance[cell * groups..(cell + 1) * groups];
        trans.iter_mut().for_each(|t| *t = 1.0);
        let q_base = prior_offsets[cell];
        for (j, taps) in ray.samples[..ray.prior_len].iter().enumerate() {
            qbuf.iter_mut().for_each(|q| *q = 0.0);
            // Zero-weight (padding) taps contribute nothing; processing them
            // unconditionally keeps the loop branch-free.
            for t in taps {
                let base = t.index as usize * groups;
                for (q, v) in qbuf.iter_mut().zip(&independent[base..base + groups]) {
                    *q += t.weight * v;
                }
            }
            let qv = &mut prior_values[(q_base + j) * groups..(q_base + j + 1) * groups];
            qv.copy_from_slice(&qbuf);
            for (t, q) in trans.iter_mut().zip(&qbuf) {
                *t *= 1.0 - q;
            }
        }
        let ind = &independent[cell * groups..(cell + 1) * groups];
        let cond = &mut conditional[cell * groups..(cell + 1) * groups];
        for g in 0..groups {
            cond[g] = trans[g] * ind[g];
        }
    }

    // Steps 3 and 4: marched feature expectation, re-weighted per cell.
    let mut ray_features = vec![0.0; n * channels];
    let mut out = BevFeatureMap::zeros(map.spec, channels);
    let mut feat_s = vec![0.0; channels];
    for (cell, ray) in tables.rays.iter().enumerate() {
        let acc = &mut ray_features[cell * channels..(cell + 1) * channels];
        for taps in &ray.samples {
            qbuf.iter_mut().for_each(|q| *q = 0.0);
            feat_s.iter_mut().for_each(|f| *f = 0.0);
            for t in taps {
                let cbase = t.index as usize * groups;
                for (q, v) in qbuf.iter_mut().zip(&conditional[cbase..cbase + groups]) {
                    *q += t.weight * v;
                }
                let fbase = t.index as usize * channels;
                for (f, v) in feat_s.iter_mut().zip(&map.data[fbase..fbase + channels]) {
                    *f += t.weight * v;
                }
            }
            for g in 0..groups {
                let ph = qbuf[g];
                if ph == 0.0 {
                    continue;
                }
                for c in g * per_group..(g + 1) * per_group {
                    acc[c] += ph * feat_s[c];
                }
            }
        }
        let cond = &conditional[cell * groups..(cell + 1) * groups];
        let dst = &mut out.data[cell * channels..(cell + 1) * channels];
        for g in 0..groups {
            let s = cond[g];
            for c in g * per_group..(g + 1) * per_group {
                dst[c] = s * acc[c];
            }
        }
    }

    let cache = LatentCache {
        independent,
        conditional,
        transmittance,
        prior_values,
        prior_offsets,
        ray_features,
    };
    Ok((out, cache))
}

pub struct LatentGrads {
    pub map: Vec<f64>,     // same layout as the input feature map
    pub weights: Vec<f64>, // groups x per_group
    pub bias: Vec<f64>,    // groups
}

/// Exact gradients of `latent_render_with_tables` with respect to the input
/// features and the projection parameters.
pub fn latent_render_backward(
    map: &BevFeatureMap,
    weights: &[f64],
    tables: &RayTables,
    cache: &LatentCache,
    upstream: &[f64],
) -> LatentGrads {
    let groups = tables.config.groups;
    let channels = map.channels;
    let per_group = channels / groups;
    let n = tables.cell_count();
    assert_eq!(upstream.len(), n * channels);

    let mut g_map = vec![0.0; map.data.len()];
    let mut g_weights = vec![0.0; weights.len()];
    let mut g_bias = vec![0.0; groups];
    let mut g_cond = vec![0.0; n * groups];
    let mut g_ind = vec![0.0; n * groups];

    // Steps 4 and 3 backward: out = cond * rayfeat, with rayfeat marched from
    // (cond, features); one tap gather serves all groups.
    let mut gm = vec![0.0; channels];
    let mut feat_s = vec![0.0; channels];
    let mut ph = vec![0.0; groups];
    let mut s1 = vec![0.0; groups];
    let mut tmp = vec![0.0; channels];
    for (cell, ray) in tables.rays.iter().enumerate() {
        let up = &upstream[cell * channels..(cell + 1) * channels];
        let rf = &cache.ray_features[cell * channels..(cell + 1) * channels];
        let cond_cell = &cache.conditional[cell * groups..(cell + 1) * groups];
        if up.iter().all(|&v| v == 0.0) {
            continue;
        }
        let gc_cell = &mut g_cond[cell * groups..(cell + 1) * groups];
        for g in 0..groups {
            let mut acc = 0.0;
            let s = cond_cell[g];
            for c in g * per_group..(g + 1) * per_group {
                acc += up[c] * rf[c];
                gm[c] = up[c] * s;
            }
            gc_cell[g] += acc;
        }
        for taps in &ray.samples {
            ph.iter_mut().for_each(|v| *v = 0.0);
            feat_s.iter_mut().for_each(|v| *v = 0.0);
            for t in taps {
                let cbase = t.index as usize * groups;
                for (p, v) in ph.iter_mut().zip(&cache.conditional[cbase..cbase + groups]) {
                    *p += t.weight * v;
                }
                let fbase = t.index as usize * channels;
                for (f, v) in feat_s.iter_mut().zip(&map.data[fbase..fbase + channels]) {
                    *f += t.weight * v;
                }
            }
            for g in 0..groups {
                let mut acc = 0.0;
                let p = ph[g];
                for c in g * per_group..(g + 1) * per_group {
                    acc += gm[c] * feat_s[c];
                    tmp[c] = p * gm[c];
                }
                s1[g] = acc;
            }
            for t in taps {
                let fbase = t.index as usize * channels;
                for (dst, v) in g_map[fbase..fbase + channels].iter_mut().zip(&tmp) {
                    *dst += t.weight * v;
                }
                let cbase = t.index as usize * groups;
                for (dst, v) in g_cond[cbase..cbase + groups].iter_mut().zip(&s1) {
                    *dst += t.weight * v;
                }
            }
        }
    }

    // Step 2 backward: cond = trans * ind, with trans a product over the
    // interpolated prior values. Prefix/suffix products keep q = 1 exact
    // without division.
    let mut coef = vec![0.0; tables.max_prior_len * groups];
    for (cell, ray) in tables.rays.iter().enumerate() {
        let gc_cell = &g_cond[cell * groups..(cell + 1) * groups];
        let ind_cell = &cache.independent[cell * groups..(cell + 1) * groups];
        let trans_cell = &cache.transmittance[cell * groups..(cell + 1) * groups];
        for g in 0..groups {
            g_ind[cell * groups + g] += gc_cell[g] * trans_cell[g];
        }
        let m = ray.prior_len;
        if m == 0 || gc_cell.iter().all(|&v| v == 0.0) {
            continue;
        }
        let q_base = cache.prior_offsets[cell];
        let qv = &cache.prior_values[q_base * groups..(q_base + m) * groups];
        for g in 0..groups {
            let scale = -gc_cell[g] * ind_cell[g];
            // Forward pass stores prefix products, reverse pass folds in the
            // suffix.
            let mut t = 1.0;
            for j in 0..m {
                coef[j * groups + g] = t;
                t *= 1.0 - qv[j * groups + g];
            }
            let mut s = 1.0;
            for j in (0..m).rev() {
                coef[j * groups + g] *= scale * s;
                s *= 1.0 - qv[j * groups + g];
            }
        }
        for (j, taps) in ray.samples[..m].iter().enumerate() {
            let row = &coef[j * groups..(j + 1) * groups];
            for t in taps {
                let base = t.index as usize * groups;
                for (dst, v) in g_ind[base..base + groups].iter_mut().zip(row) {
                    *dst += t.weight * v;
                }
            }
        }
    }

    // Step 1 backward: ind = clamp(sigmoid(w . f + b)); the clamp zeroes the
    // gradient in the saturated shells.
    for cell in 0..n {
        let feat = &map.data[cell * channels..(cell + 1) * channels];
        let ind_cell = &cache.independent[cell * groups..(cell + 1) * groups];
        for g in 0..groups {
            let p = ind_cell[g];
            if p <= PROB_CLAMP || p >= 1.0 - PROB_CLAMP {
                continue;
            }
            let gz = g_ind[cell * groups + g] * p * (1.0 - p);
            if gz == 0.0 {
                continue;
            }
            for c in 0..per_group {
                g_weights[g * per_group + c] += gz * feat[g * per_group + c];
                g_map[cell * channels + g * per_group + c] += gz * weights[g * per_group + c];
            }
            g_bias[g] += gz;
        }
    }

    LatentGrads { map: g_map, weights: g_weights, bias: g_bias }
}

/// Mean pairwise cosine similarity of features between cells sharing a ray
/// (one ray per border cell; interior cells join the ray whose bearing best
/// matches their own), averaged over rays with at least one valid pair.
pub fn along_ray_similarity(map: &BevFeatureMap, origin: [f64; 2]) -> Result<f64, LatentError> {
    let cells = map.cells_xy();
    let mut border_angles: Vec<f64> = Vec::new();
    for x in 0..cells[0] {
        for y in 0..cells[1] {
            if x == 0 || y == 0 || x == cells[0] - 1 || y == cells[1] - 1 {
                let dx = x as f64 - origin[0];
                let dy = y as f64 - origin[1];
                if dx.hypot(dy) > 1e-9 {
                    border_angles.push(dy.atan2(dx));
                }
            }
        }
    }
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); border_angles.len()];
    for x in 0..cells[0] {
        for y in 0..cells[1] {
            let dx = x as f64 - origin[0];
            let dy = y as f64 - origin[1];
            if dx.hypot(dy) <= 1e-9 {
                continue;
            }
            let angle = dy.atan2(dx);
            let mut nearest = 0usize;
            let mut best = f64::INFINITY;
            for (i, &b) in border_angles.iter().enumerate() {
                let gap = angle_gap(angle, b);
                if gap < best {
                    best = gap;
                    nearest = i;
                }
            }
            buckets[nearest].push(x * cells[1] + y);
        }
    }
    let mut ray_means = Vec::new();
    for members in &buckets {
        if members.len() < 2 {
            continue;
        }
        let mut total = 0.0;
        let mut count = 0usize;
        for i in 0..members.len() {
            for j in i + 1..members.len() {
                let a = &map.data[members[i] * map.channels..(members[i] + 1) * map.channels];
                let b = &map.data[members[j] * map.channels..(members[j] + 1) * map.channels];
                let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
                let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
                if na < 1e-12 || nb < 1e-12 {
                    continue;
                }
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                total += dot / (na * nb);
                count += 1;
            }
        }
        if count > 0 {
            ray_means.push(total / count as f64);
        }
    }
    if ray_means.is_empty() {
        return Err(LatentError::AllZeroMap);
    }
    Ok(ray_means.iter().sum::<f64>() / ray_means.len() as f64)
}

fn angle_gap(a: f64, b: f64) -> f64 {
    let mut d = (a - b).abs() % std::f64::consts::TAU;
    if d > std::f64::consts::PI {
        d = std::f64::consts::TAU - d;
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bev(cells: usize, channels: usize) -> BevFeatureMap {
        let spec = GridSpec::bev(cells, cells, [-1.0, -1.0], [1.0, 1.0]).unwrap();
        BevFeatureMap::zeros(spec, channels)
    }

    fn random_map(cells: usize, channels: usize, seed: u64) -> BevFeatureMap {
        let mut map = bev(cells, channels);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in map.data.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        map
    }

    #[test]
    fn projection_zero_weights_is_half() {
        let map = random_map(5, 4, 1);
        let p = project_independent(&map, &[0.0; 4], &[0.0; 2], 2).unwrap();
        assert!(p.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn projection_saturates_at_clamp() {
        let map = random_map(5, 4, 2);
        let p = project_independent(&map, &[0.0; 4], &[20.0, 20.0], 2).unwrap();
        assert!(p.iter().all(|&v| v >= 0.999_999));
    }

    #[test]
    fn projection_matches_dot_product_oracle() {
        let map = random_map(4, 6, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let weights: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let bias: Vec<f64> = (0..2).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let p = project_independent(&map, &weights, &bias, 2).unwrap();
        let n = 16;
        for g in 0..2 {
            for cell in 0..n {
                let feat = &map.data[cell * 6 + g * 3..cell * 6 + g * 3 + 3];
                let z: f64 = bias[g]
                    + weights[g * 3..g * 3 + 3].iter().zip(feat).map(|(a, b)| a * b).sum::<f64>();
                let expected = sigmoid(z).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                assert!((p[g * n + cell] - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn projection_rejects_bad_shapes() {
        let map = random_map(3, 4, 5);
        assert!(matches!(
            project_independent(&map, &[0.0; 4], &[0.0; 3], 3),
            Err(LatentError::ChannelsNotDivisible { .. })
        ));
        assert!(matches!(
            project_independent(&map, &[0.0; 3], &[0.0; 2], 2),
            Err(LatentError::WeightShape { .. })
        ));
    }

    /// Independent chain-product oracle: recompute the conditional map by
    /// marching priors by hand with its own bilinear interpolation.
    fn conditional_oracle(
        independent: &[f64],
        cells: [usize; 2],
        cfg: &LatentRenderConfig,
    ) -> Vec<f64> {
        let sample = |p: [f64; 2]| -> f64 {
            let x0 = p[0].floor();
            let y0 = p[1].floor();
            let fx = p[0] - x0;
            let fy = p[1] - y0;
            let mut acc = 0.0;
            for (cx, cy, w) in [
                (x0 as i64, y0 as i64, (1.0 - fx) * (1.0 - fy)),
                (x0 as i64 + 1, y0 as i64, fx * (1.0 - fy)),
                (x0 as i64, y0 as i64 + 1, (1.0 - fx) * fy),
                (x0 as i64 + 1, y0 as i64 + 1, fx * fy),
            ] {
                if cx >= 0 && cy >= 0 && (cx as usize) < cells[0] && (cy as usize) < cells[1] {
                    acc += w * independent[cx as usize * cells[1] + cy as usize];
                }
            }
            acc
        };
        let mut out = vec![0.0; independent.len()];
        for x in 0..cells[0] {
            for y in 0..cells[1] {
                let idx = x * cells[1] + y;
                let dx = x as f64 - cfg.origin[0];
                let dy = y as f64 - cfg.origin[1];
                let dist = dx.hypot(dy);
                if dist <= 1e-9 {
                    out[idx] = independent[idx];
                    continue;
                }
                let dir = [dx / dist, dy / dist];
                let mut t = 1.0;
                let mut j = 0u64;
                loop {
                    let s = j as f64 * cfg.spacing;
                    if s >= dist {
                        break;
                    }
                    t *= 1.0 - sample([cfg.origin[0] + s * dir[0], cfg.origin[1] + s * dir[1]]);
                    j += 1;
                }
                out[idx] = t * independent[idx];
            }
        }
        out
    }

    #[test]
    fn conditional_origin_cell_unmodified() {
        // 9x9 grid with the origin on the center cell: the only cell closer to
        // the origin than one spacing is the origin cell itself, whose prior
        // product is empty.
        let cfg = LatentRenderConfig::centered([9, 9], 1, 1.0);
        let tables = RayTables::build([9, 9], cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let independent: Vec<f64> = (0..81).map(|_| rng.gen_range(0.0..1.0)).collect();
        let cond = conditional_prob_map(&independent, &tables).unwrap();
        assert_eq!(cond[4 * 9 + 4], independent[4 * 9 + 4]);
    }

    #[test]
    fn conditional_fully_occupied_matches_chain_oracle() {
        let cfg = LatentRenderConfig::centered([9, 9], 1, 1.0);
        let tables = RayTables::build([9, 9], cfg);
        let independent = vec![1.0; 81];
        let cond = conditional_prob_map(&independent, &tables).unwrap();
        let oracle = conditional_oracle(&independent, [9, 9], &cfg);
        assert_eq!(cond, oracle);
        // The origin cell keeps probability 1; every other cell is blocked by
        // the opaque origin waypoint.
        assert_eq!(cond[4 * 9 + 4], 1.0);
        let others: f64 = cond.iter().sum::<f64>() - 1.0;
        assert_eq!(others, 0.0);
    }

    #[test]
    fn conditional_random_matches_chain_oracle() {
        let cfg = LatentRenderConfig::centered([9, 9], 1, 1.0);
        let tables = RayTables::build([9, 9], cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let independent: Vec<f64> = (0..81).map(|_| rng.gen_range(0.0..1.0)).collect();
            let cond = conditional_prob_map(&independent, &tables).unwrap();
            let oracle = conditional_oracle(&independent, [9, 9], &cfg);
            for (a, b) in cond.iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conditional_rotates_with_input() {
        let cells = [9usize, 9usize];
        let cfg = LatentRenderConfig::centered(cells, 1, 1.0);
        let tables = RayTables::build(cells, cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let independent: Vec<f64> = (0..81).map(|_| rng.gen_range(0.0..1.0)).collect();
        // Rotate by 90 degrees about the center: (x, y) -> (8 - y, x).
        let mut rotated = vec![0.0; 81];
        for x in 0..9 {
            for y in 0..9 {
                rotated[(8 - y) * 9 + x] = independent[x * 9 + y];
            }
        }
        let cond = conditional_prob_map(&independent, &tables).unwrap();
        let cond_rot = conditional_prob_map(&rotated, &tables).unwrap();
        for x in 0..9 {
            for y in 0..9 {
                let a = cond[x * 9 + y];
                let b = cond_rot[(8 - y) * 9 + x];
                assert!((a - b).abs() < 1e-12, "rotation mismatch at ({x},{y}): {a} vs {b}");
            }
        }
    }

    #[test]
    fn expectation_one_hot_and_zero() {
        let cells = [7usize, 7usize];
        let cfg = LatentRenderConfig::centered(cells, 1, 1.0);
        let tables = RayTables::build(cells, cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let features: Vec<f64> = (0..49 * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // One-hot conditional at cell (5, 3) on the +x axis from the center.
        let mut conditional = vec![0.0; 49];
        conditional[5 * 7 + 3] = 1.0;
        let out = ray_feature_expectation(&features, 2, &conditional, &tables);
        let hot = &features[(5 * 7 + 3) * 2..(5 * 7 + 3) * 2 + 2];
        // Every cell on the +x axis ray shares the hot cell's features.
        for x in 4..7 {
            let got = &out[(x * 7 + 3) * 2..(x * 7 + 3) * 2 + 2];
            assert!((got[0] - hot[0]).abs() < 1e-12 && (got[1] - hot[1]).abs() < 1e-12);
        }
        // All-zero conditional produces a zero feature.
        let zeros = ray_feature_expectation(&features, 2, &vec![0.0; 49], &tables);
        assert!(zeros.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn expectation_matches_bruteforce_march_oracle() {
        let cells = [7usize, 7usize];
        let cfg = LatentRenderConfig::centered(cells, 1, 1.0);
        let tables = RayTables::build(cells, cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let features: Vec<f64> = (0..49 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let conditional: Vec<f64> = (0..49).map(|_| rng.gen_range(0.0..1.0)).collect();
        let out = ray_feature_expectation(&features, 3, &conditional, &tables);
        // Oracle: march each cell's bearing by hand, interpolating both maps.
        let sample = |map: &[f64], stride: usize, ch: usize, p: [f64; 2]| -> f64 {
            let x0 = p[0].floor();
            let y0 = p[1].floor();
            let fx = p[0] - x0;
            let fy = p[1] - y0;
            let mut acc = 0.0;
            for (cx, cy, w) in [
                (x0 as i64, y0 as i64, (1.0 - fx) * (1.0 - fy)),
                (x0 as i64 + 1, y0 as i64, fx * (1.0 - fy)),
                (x0 as i64, y0 as i64 + 1, (1.0 - fx) * fy),
                (x0 as i64 + 1, y0 as i64 + 1, fx * fy),
            ] {
                if cx >= 0 && cy >= 0 && (cx as usize) < 7 && (cy as usize) < 7 {
                    acc += w * map[(cx as usize * 7 + cy as usize) * stride + ch];
                }
            }
            acc
        };
        for x in 0..7usize {
            for y in 0..7usize {
                let dx = x as f64 - 3.0;
                let dy = y as f64 - 3.0;
                let dist = dx.hypot(dy);
                let mut expected = [0.0; 3];
                if dist <= 1e-9 {
                    for (c, e) in expected.iter_mut().enumerate() {
                        *e = sample(&conditional, 1, 0, [3.0, 3.0])
                            * sample(&features, 3, c, [3.0, 3.0]);
                    }
                } else {
                    let dir = [dx / dist, dy / dist];
                    let mut k = 0u64;
                    loop {
                        let t = k as f64;
                        let p = [3.0 + t * dir[0], 3.0 + t * dir[1]];
                        if p[0] < -0.5 || p[0] > 6.5 || p[1] < -0.5 || p[1] > 6.5 {
                            break;
                        }
                        let ph = sample(&conditional, 1, 0, p);
                        for (c, e) in expected.iter_mut().enumerate() {
                            *e += ph * sample(&features, 3, c, p);
                        }
                        k += 1;
                    }
                }
                for (c, e) in expected.iter().enumerate() {
                    let got = out[(x * 7 + y) * 3 + c];
                    assert!(
                        (got - e).abs() < 1e-10,
                        "cell ({x},{y}) channel {c}: {got} vs {e}"
                    );
                }
            }
        }
    }

    #[test]
    fn render_single_group_equals_pipeline() {
        let map = random_map(7, 3, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let weights: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let bias = vec![0.1];
        let cfg = LatentRenderConfig::centered([7, 7], 1, 1.0);
        let out = latent_render(&map, &weights, &bias, cfg).unwrap();
        let tables = RayTables::build([7, 7], cfg);
        let independent = project_independent(&map, &weights, &bias, 1).unwrap();
        let conditional = conditional_prob_map(&independent, &tables).unwrap();
        let rayfeat = ray_feature_expectation(&map.data, 3, &conditional, &tables);
        for cell in 0..49 {
            for c in 0..3 {
                let expected = conditional[cell] * rayfeat[cell * 3 + c];
                assert!((out.data[cell * 3 + c] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn render_output_shape_matches_input() {
        for (cells, channels, groups) in [(6usize, 8usize, 2usize), (5, 4, 4), (8, 6, 3)] {
            let map = random_map(cells, channels, 15 + cells as u64);
            let per_group = channels / groups;
            let weights = vec![0.1; groups * per_group];
            let bias = vec![0.0; groups];
            let cfg = LatentRenderConfig::centered([cells, cells], groups, 1.0);
            let out = latent_render(&map, &weights, &bias, cfg).unwrap();
            assert_eq!(out.data.len(), map.data.len());
            assert_eq!(out.channels, map.channels);
        }
        // Indivisible channels are rejected.
        let map = random_map(4, 5, 16);
        let cfg = LatentRenderConfig::centered([4, 4], 2, 1.0);
        assert!(matches!(
            latent_render(&map, &[0.0; 5], &[0.0; 2], cfg),
            Err(LatentError::ChannelsNotDivisible { .. })
        ));
    }

    #[test]
    fn render_occlusion_suppression_beyond_opaque_cell() {
        // Drive the projection to saturation at one cell on the +x axis; all
        // cells farther along that bearing must have a vanishing response.
        let cells = 9usize;
        let channels = 2usize;
        let spec = GridSpec::bev(cells, cells, [-1.0, -1.0], [1.0, 1.0]).unwrap();
        let mut map = BevFeatureMap::zeros(spec, channels);
        for v in map.data.iter_mut() {
            *v = 1.0;
        }
        // A large feature spike at (6, 4) saturates its probability while the
        // projection sees moderate inputs elsewhere.
        map.feature_mut(6, 4)[0] = 1e4;
        let weights = vec![5.0, 0.0];
        let bias = vec![-4.9];
        let cfg = LatentRenderConfig::centered([cells, cells], 1, 1.0);
        let out = latent_render(&map, &weights, &bias, cfg).unwrap();
        let norm_all: f64 = map.data.iter().map(|v| v * v).sum::<f64>().sqrt();
        for x in 7..9 {
            let f = out.feature(x, 4);
            let norm: f64 = f.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(
                norm <= 1e-6 * norm_all,
                "cell ({x},4) response {norm} exceeds occlusion bound"
            );
        }
    }

    #[test]
    fn render_group_channel_permutation_equivariance() {
        // Swapping the two channels inside a group (and the matching
        // projection weights) swaps the output channels identically.
        let map = random_map(6, 2, 17);
        let mut swapped = map.clone();
        for cell in 0..36 {
            swapped.data.swap(cell * 2, cell * 2 + 1);
        }
        let weights = vec![0.7, -0.3];
        let weights_swapped = vec![-0.3, 0.7];
        let bias = vec![0.2];
        let cfg = LatentRenderConfig::centered([6, 6], 1, 1.0);
        let a = latent_render(&map, &weights, &bias, cfg).unwrap();
        let b = latent_render(&swapped, &weights_swapped, &bias, cfg).unwrap();
        for cell in 0..36 {
            assert!((a.data[cell * 2] - b.data[cell * 2 + 1]).abs() < 1e-12);
            assert!((a.data[cell * 2 + 1] - b.data[cell * 2]).abs() < 1e-12);
        }
    }

    #[test]
    fn render_positive_homogeneity_with_frozen_conditional() {
        let cells = [7usize, 7usize];
        let cfg = LatentRenderConfig::centered(cells, 1, 1.0);
        let tables = RayTables::build(cells, cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let features: Vec<f64> = (0..49 * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let conditional: Vec<f64> = (0..49).map(|_| rng.gen_range(0.0..1.0)).collect();
        let s = 3.5;
        let scaled: Vec<f64> = features.iter().map(|v| v * s).collect();
        let a = ray_feature_expectation(&features, 2, &conditional, &tables);
        let b = ray_feature_expectation(&scaled, 2, &conditional, &tables);
        for (x, y) in a.iter().zip(&b) {
            assert!((x * s - y).abs() < 1e-9);
        }
    }

    #[test]
    fn render_axis_ray_conditional_sums_below_one() {
        // On axis-aligned rays the interpolated priors coincide with cell
        // centers, so the conditional probabilities telescope.
        let cfg = LatentRenderConfig::centered([9, 9], 1, 1.0);
        let tables = RayTables::build([9, 9], cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for _ in 0..20 {
            let independent: Vec<f64> = (0..81).map(|_| rng.gen_range(0.0..1.0)).collect();
            let cond = conditional_prob_map(&independent, &tables).unwrap();
            for (dx, dy) in [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)] {
                let mut total = 0.0;
                for step in 1..=4i64 {
                    let x = (4 + dx * step) as usize;
                    let y = (4 + dy * step) as usize;
                    total += cond[x * 9 + y];
                }
                assert!(total <= 1.0 + 1e-6, "axis ray sums to {total}");
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let cells = 5usize;
        let channels = 4usize;
        let groups = 2usize;
        let map = random_map(cells, channels, 20);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let weights: Vec<f64> = (0..channels).map(|_| rng.gen_range(-0.8..0.8)).collect();
        let bias: Vec<f64> = (0..groups).map(|_| rng.gen_range(-0.3..0.3)).collect();
        let cfg = LatentRenderConfig::centered([cells, cells], groups, 1.0);
        let tables = RayTables::build([cells, cells], cfg);
        let probe: Vec<f64> =
            (0..cells * cells * channels).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let scalar = |map: &BevFeatureMap, w: &[f64], b: &[f64]| -> f64 {
            let (out, _) = latent_render_with_tables(map, w, b, &tables).unwrap();
            out.data.iter().zip(&probe).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = latent_render_with_tables(&map, &weights, &bias, &tables).unwrap();
        let grads = latent_render_backward(&map, &weights, &tables, &cache, &probe);
        let h = 1e-5;
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1.0);
        for i in 0..map.data.len() {
            let mut p = map.clone();
            p.data[i] += h;
            let mut m = map.clone();
            m.data[i] -= h;
            let numeric = (scalar(&p, &weights, &bias) - scalar(&m, &weights, &bias)) / (2.0 * h);
            assert!(
                rel(grads.map[i], numeric) < 1e-5,
                "map[{i}]: analytic {} vs numeric {numeric}",
                grads.map[i]
            );
        }
        for i in 0..weights.len() {
            let mut p = weights.clone();
            p[i] += h;
            let mut m = weights.clone();
            m[i] -= h;
            let numeric = (scalar(&map, &p, &bias) - scalar(&map, &m, &bias)) / (2.0 * h);
            assert!(
                rel(grads.weights[i], numeric) < 1e-5,
                "weights[{i}]: analytic {} vs numeric {numeric}",
                grads.weights[i]
            );
        }
        for i in 0..bias.len() {
            let mut p = bias.clone();
            p[i] += h;
            let mut m = bias.clone();
            m[i] -= h;
            let numeric = (scalar(&map, &weights, &p) - scalar(&map, &weights, &m)) / (2.0 * h);
            assert!(
                rel(grads.bias[i], numeric) < 1e-5,
                "bias[{i}]: analytic {} vs numeric {numeric}",
                grads.bias[i]
            );
        }
    }

    #[test]
    fn backward_zero_upstream_and_locality() {
        let map = random_map(7, 2, 22);
        let weights = vec![0.4, -0.2];
        let bias = vec![0.1];
        let cfg = LatentRenderConfig::centered([7, 7], 1, 1.0);
        let tables = RayTables::build([7, 7], cfg);
        let (_, cache) = latent_render_with_tables(&map, &weights, &bias, &tables).unwrap();
        let zeros = vec![0.0; 49 * 2];
        let grads = latent_render_backward(&map, &weights, &tables, &cache, &zeros);
        assert!(grads.map.iter().all(|&v| v == 0.0));
        assert!(grads.weights.iter().all(|&v| v == 0.0));
        assert!(grads.bias.iter().all(|&v| v == 0.0));
        // Upstream only at cell (5, 3), on the +x axis: cells off that ray and
        // away from its interpolation support get no feature gradient.
        let mut upstream = vec![0.0; 49 * 2];
        upstream[(5 * 7 + 3) * 2] = 1.0;
        let grads = latent_render_backward(&map, &weights, &tables, &cache, &upstream);
        for c in 0..2 {
            assert_eq!(grads.map[c], 0.0); // cell (0, 0), on the diagonal
            assert_eq!(grads.map[(7 + 6) * 2 + c], 0.0); // cell (1, 6)
        }
    }

    #[test]
    fn similarity_identical_and_orthogonal() {
        // 5x5 grid, origin at the center. Identical directions along all rays.
        let spec = GridSpec::bev(5, 5, [-1.0, -1.0], [1.0, 1.0]).unwrap();
        let mut map = BevFeatureMap::zeros(spec, 2);
        for x in 0..5 {
            for y in 0..5 {
                let f = map.feature_mut(x, y);
                f[0] = 1.0 + x as f64;
                f[1] = 0.0;
            }
        }
        let s = along_ray_similarity(&map, [2.0, 2.0]).unwrap();
        assert!((s - 1.0).abs() < 1e-12);

        // Orthogonal features for the two cells of each axis/diagonal ray.
        let mut map = BevFeatureMap::zeros(spec, 2);
        for (near, far) in [
            ((3usize, 2usize), (4usize, 2usize)),
            ((1, 2), (0, 2)),
            ((2, 3), (2, 4)),
            ((2, 1), (2, 0)),
            ((3, 3), (4, 4)),
            ((1, 1), (0, 0)),
            ((3, 1), (4, 0)),
            ((1, 3), (0, 4)),
        ] {
            map.feature_mut(near.0, near.1)[0] = 1.0;
            map.feature_mut(far.0, far.1)[1] = 1.0;
        }
        let s = along_ray_similarity(&map, [2.0, 2.0]).unwrap();
        assert!(s.abs() < 1e-12, "expected 0, got {s}");

        // All-zero map is an error.
        let zero = BevFeatureMap::zeros(spec, 2);
        assert!(matches!(along_ray_similarity(&zero, [2.0, 2.0]), Err(LatentError::AllZeroMap)));
    }

    #[test]
    fn similarity_matches_bruteforce_pairwise() {
        let map = random_map(6, 3, 23);
        let origin = [2.5, 2.5];
        let got = along_ray_similarity(&map, origin).unwrap();
        // Brute force with an independently written assignment loop.
        let cells = [6usize, 6usize];
        let mut borders: Vec<f64> = Vec::new();
        for x in 0..6 {
            for y in 0..6 {
                if x == 0 || y == 0 || x == 5 || y == 5 {
                    borders.push((y as f64 - origin[1]).atan2(x as f64 - origin[0]));
                }
            }
        }
        let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); borders.len()];
        for x in 0..6 {
            for y in 0..6 {
                let a = (y as f64 - origin[1]).atan2(x as f64 - origin[0]);
                let mut best = 0;
                let mut best_gap = f64::INFINITY;
                for (i, b) in borders.iter().enumerate() {
                    let mut gap = (a - b).abs() % std::f64::consts::TAU;
                    if gap > std::f64::consts::PI {
                        gap = std::f64::consts::TAU - gap;
                    }
                    if gap < best_gap {
                        best_gap = gap;
                        best = i;
                    }
                }
                buckets[best].push(x * cells[1] + y);
            }
        }
        let mut means = Vec::new();
        for bucket in &buckets {
            if bucket.len() < 2 {
                continue;
            }
            let mut total = 0.0;
            let mut count = 0;
            for i in 0..bucket.len() {
                for j in i + 1..bucket.len() {
                    let a = &map.data[bucket[i] * 3..bucket[i] * 3 + 3];
                    let b = &map.data[bucket[j] * 3..bucket[j] * 3 + 3];
                    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if na < 1e-12 || nb < 1e-12 {
                        continue;
                    }
                    total += a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>() / (na * nb);
                    count += 1;
                }
            }
            if count > 0 {
                means.push(total / count as f64);
            }
        }
        let expected = means.iter().sum::<f64>() / means.len() as f64;
        assert!((got - expected).abs() < 1e-12);
    }
}
