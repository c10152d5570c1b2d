//! Central finite-difference verification of every hand-written backward
//! pass, at tiny sizes, with per-block reports.

use super::loss::{ray_ce_loss, ray_ce_loss_with_grad};
use super::{LossConfig, TrainError};
use crate::grid::{BevFeatureMap, GridSpec, OccupancyVolume, PointCloud, Ray};
use crate::latent::{latent_render_backward, latent_render_with_tables, LatentRenderConfig, RayTables};
use crate::model::{
    decode_future_step_backward, decode_future_step_forward, project_occupancy,
    project_occupancy_backward, DecoderWorkspace, EgoMotion, ModelConfig,
};
use crate::params::ParamVec;
use crate::render::{
    conditional_probabilities, conditional_probabilities_backward, expected_depth, sigmoid,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Operations registered with the checker.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckOp {
    LatentRender,
    RayCeLoss,
    RenderDepth,
    DecodeFutureStep,
    ProjectOccupancy,
}

impl CheckOp {
    pub const ALL: [CheckOp; 5] = [
        CheckOp::LatentRender,
        CheckOp::RayCeLoss,
        CheckOp::RenderDepth,
        CheckOp::DecodeFutureStep,
        CheckOp::ProjectOccupancy,
    ];

    pub fn parse(name: &str) -> Result<Self, TrainError> {
        match name {
            "latent_render" => Ok(CheckOp::LatentRender),
            "ray_ce_loss" => Ok(CheckOp::RayCeLoss),
            "render_depth" => Ok(CheckOp::RenderDepth),
            "decode_future_step" => Ok(CheckOp::DecodeFutureStep),
            "project_occupancy" => Ok(CheckOp::ProjectOccupancy),
            other => Err(TrainError::UnknownOp(other.to_string())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            CheckOp::LatentRender => "latent_render",
            CheckOp::RayCeLoss => "ray_ce_loss",
            CheckOp::RenderDepth => "render_depth",
            CheckOp::DecodeFutureStep => "decode_future_step",
            CheckOp::ProjectOccupancy => "project_occupancy",
        }
    }

    /// Linear operations are held to machine-precision agreement.
    pub fn threshold(&self) -> f64 {
        match self {
            CheckOp::ProjectOccupancy => 1e-8,
            CheckOp::DecodeFutureStep => 1e-4,
            _ => 1e-5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BlockReport {
    pub op: &'static str,
    pub block: String,
    pub max_rel_err: f64,
    pub threshold: f64,
}

impl BlockReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.threshold
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Run central finite differences against the analytical gradients of one
/// registered operation. `corruption` perturbs the analytical gradients and
/// exists so tests (and the CLI self-test) can confirm the harness actually
/// detects broken backward passes.
pub fn gradcheck(op: CheckOp, h: f64, seed: u64, corruption: f64) -> Vec<BlockReport> {
    match op {
        CheckOp::LatentRender => check_latent(h, seed, corruption),
        CheckOp::RayCeLoss => check_ray_ce(h, seed, corruption),
        CheckOp::RenderDepth => check_render_depth(h, seed, corruption),
        CheckOp::DecodeFutureStep => check_decode(h, seed, corruption),
        CheckOp::ProjectOccupancy => check_head(h, seed, corruption),
    }
}

fn report(op: CheckOp, block: &str, max_rel_err: f64) -> BlockReport {
    BlockReport { op: op.name(), block: block.to_string(), max_rel_err, threshold: op.threshold() }
}

fn check_latent(h: f64, seed: u64, corruption: f64) -> Vec<BlockReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cells = 5usize;
    let channels = 4usize;
    let groups = 2usize;
    let spec = GridSpec::bev(cells, cells, [-2.5, -2.5], [2.5, 2.5]).unwrap();
    let mut map = BevFeatureMap::zeros(spec, channels);
    for v in map.data.iter_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    let weights: Vec<f64> = (0..channels).map(|_| rng.gen_range(-0.8..0.8)).collect();
    let bias: Vec<f64> = (0..groups).map(|_| rng.gen_range(-0.3..0.3)).collect();
    let cfg = LatentRenderConfig::centered([cells, cells], groups, 1.0);
    let tables = RayTables::build([cells, cells], cfg);
    let probe: Vec<f64> = (0..map.data.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let scalar = |map: &BevFeatureMap, w: &[f64], b: &[f64]| -> f64 {
        let (out, _) = latent_render_with_tables(map, w, b, &tables).unwrap();
        out.data.iter().zip(&probe).map(|(a, b)| a * b).sum()
    };
    let (_, cache) = latent_render_with_tables(&map, &weights, &bias, &tables).unwrap();
    let mut grads = latent_render_backward(&map, &weights, &tables, &cache, &probe);
    if corruption != 0.0 {
        grads.map[0] += corruption;
        grads.weights[0] += corruption;
    }
    let mut worst_map = 0.0f64;
    for i in 0..map.data.len() {
        let mut p = map.clone();
        p.data[i] += h;
        let mut m = map.clone();
        m.data[i] -= h;
        let numeric = (scalar(&p, &weights, &bias) - scalar(&m, &weights, &bias)) / (2.0 * h);
        worst_map = worst_map.max(rel_err(grads.map[i], numeric));
    }
    let mut worst_w = 0.0f64;
    for i in 0..weights.len() {
        let mut p = weights.clone();
        p[i] += h;
        let mut m = weights.clone();
        m[i] -= h;
        let numeric = (scalar(&map, &p, &bias) - scalar(&map, &m, &bias)) / (2.0 * h);
        worst_w = worst_w.max(rel_err(grads.weights[i], numeric));
    }
    for i in 0..bias.len() {
        let mut p = bias.clone();
        p[i] += h;
        let mut m = bias.clone();
        m[i] -= h;
        let numeric = (scalar(&map, &weights, &p) - scalar(&map, &weights, &m)) / (2.0 * h);
        worst_w = worst_w.max(rel_err(grads.bias[i], numeric));
    }
    vec![
        report(CheckOp::LatentRender, "features", worst_map),
        report(CheckOp::LatentRender, "projection", worst_w),
    ]
}

fn check_ray_ce(h: f64, seed: u64, corruption: f64) -> Vec<BlockReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = GridSpec::new([5, 5, 3], [-2.5, -2.5, -1.5], [2.5, 2.5, 1.5]).unwrap();
    let mut volume = OccupancyVolume::zeros(spec);
    for v in volume.logits.iter_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    let gt = PointCloud::new(vec![[1.3, 0.4, 0.2], [-0.9, 1.1, -0.4], [0.2, -1.4, 0.6]]);
    let origin = [0.0, 0.0, 0.0];
    let cfg = LossConfig { spacing: 0.5, exclusion_radius: 0.2, horizon: 6, max_points_per_frame: 64 };
    let (_, mut grad) = ray_ce_loss_with_grad(&volume, &gt, origin, &cfg).unwrap();
    if corruption != 0.0 {
        grad[0] += corruption;
    }
    let mut worst = 0.0f64;
    for i in 0..volume.logits.len() {
        let mut p = volume.clone();
        p.logits[i] += h;
        let mut m = volume.clone();
        m.logits[i] -= h;
        let numeric = (ray_ce_loss(&p, &gt, origin, &cfg).unwrap()
            - ray_ce_loss(&m, &gt, origin, &cfg).unwrap())
            / (2.0 * h);
        worst = worst.max(rel_err(grad[i], numeric));
    }
    vec![report(CheckOp::RayCeLoss, "volume", worst)]
}

fn check_render_depth(h: f64, seed: u64, corruption: f64) -> Vec<BlockReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = GridSpec::new([5, 5, 3], [-2.5, -2.5, -1.5], [2.5, 2.5, 1.5]).unwrap();
    let mut volume = OccupancyVolume::zeros(spec);
    for v in volume.logits.iter_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    let ray = Ray::from_points([0.0, 0.0, 0.0], [1.8, 1.1, 0.4]).unwrap();
    let spacing = 0.45;
    // Analytical gradient assembled from the chain pieces.
    let waypoints = crate::grid::sample_waypoints(&ray, spacing, &spec);
    let taps: Vec<_> = waypoints
        .coordinates
        .iter()
        .map(|&c| crate::grid::trilinear_taps(spec.world_to_cell(c), spec.cells))
        .collect();
    let logits: Vec<f64> = taps
        .iter()
        .map(|t| t.iter().map(|t| t.weight * volume.logits[t.index as usize]).sum())
        .collect();
    let independent: Vec<f64> = logits.iter().map(|&l| sigmoid(l)).collect();
    let cond = conditional_probabilities(&independent).unwrap();
    let _ = expected_depth(&cond, &waypoints.distances).unwrap();
    let g_cond: Vec<f64> = waypoints.distances.clone();
    let g_ind = conditional_probabilities_backward(&independent, &g_cond);
    let mut grad = vec![0.0; volume.logits.len()];
    for ((g, &p), tap) in g_ind.iter().zip(&independent).zip(&taps) {
        let gl = g * p * (1.0 - p);
        for t in tap {
            if t.weight != 0.0 {
                grad[t.index as usize] += t.weight * gl;
            }
        }
    }
    if corruption != 0.0 {
        grad[0] += corruption;
    }
    let mut worst = 0.0f64;
    for i in 0..volume.logits.len() {
        let mut p = volume.clone();
        p.logits[i] += h;
        let mut m = volume.clone();
        m.logits[i] -= h;
        let numeric = (crate::render::render_depth(&p, &ray, spacing, sigmoid).unwrap()
            - crate::render::render_depth(&m, &ray, spacing, sigmoid).unwrap())
            / (2.0 * h);
        worst = worst.max(rel_err(grad[i], numeric));
    }
    vec![report(CheckOp::RenderDepth, "volume", worst)]
}

fn tiny_model_config() -> ModelConfig {
    let bev = GridSpec::bev(4, 4, [-2.0, -2.0], [2.0, 2.0]).unwrap();
    let volume = GridSpec::new([4, 4, 2], [-2.0, -2.0, 0.0], [2.0, 2.0, 2.0]).unwrap();
    ModelConfig {
        bev,
        volume,
        channels: 4,
        img_channels: 3,
        groups: 2,
        latent_spacing: 1.0,
        layers: 2,
        attn_points: 2,
        self_attn_stride: 2,
        ffn_hidden: 4,
    }
}

fn check_decode(h: f64, seed: u64, corruption: f64) -> Vec<BlockReport> {
    let cfg = tiny_model_config();
    let params = ParamVec::seeded_init(cfg.layout(), seed);
    let ws = DecoderWorkspace::new(&cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut prev = BevFeatureMap::zeros(cfg.bev, cfg.channels);
    for v in prev.data.iter_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    let e = EgoMotion { dx: 0.4, dy: -0.1, dyaw: 0.15 };
    let probe: Vec<f64> = (0..prev.data.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let scalar = |p: &ParamVec, prev: &BevFeatureMap| -> f64 {
        let (out, _) = decode_future_step_forward(prev, &e, p, &cfg, &ws);
        out.data.iter().zip(&probe).map(|(a, b)| a * b).sum()
    };
    let (_, cache) = decode_future_step_forward(&prev, &e, &params, &cfg, &ws);
    let mut grads = params.zeros_like();
    let mut g_prev = vec![0.0; prev.data.len()];
    decode_future_step_backward(&prev, &params, &cfg, &ws, &cache, &probe, &mut g_prev, &mut grads);
    if corruption != 0.0 {
        let r = params.layout.range("queries");
        for g in grads[r].iter_mut().take(8) {
            *g += corruption;
        }
    }
    let mut reports = Vec::new();
    for entry in params.layout.entries() {
        let relevant = entry.name.starts_with("layers")
            || entry.name == "queries"
            || entry.name.starts_with("ego");
        if !relevant {
            continue;
        }
        let mut worst = 0.0f64;
        for i in entry.range() {
            let mut plus = params.clone();
            plus.data[i] += h;
            let mut minus = params.clone();
            minus.data[i] -= h;
            let numeric = (scalar(&plus, &prev) - scalar(&minus, &prev)) / (2.0 * h);
            worst = worst.max(rel_err(grads[i], numeric));
        }
        reports.push(report(CheckOp::DecodeFutureStep, &entry.name, worst));
    }
    let mut worst_prev = 0.0f64;
    for i in 0..prev.data.len() {
        let mut plus = prev.clone();
        plus.data[i] += h;
        let mut minus = prev.clone();
        minus.data[i] -= h;
        let numeric = (scalar(&params, &plus) - scalar(&params, &minus)) / (2.0 * h);
        worst_prev = worst_prev.max(rel_err(g_prev[i], numeric));
    }
    reports.push(report(CheckOp::DecodeFutureStep, "prev_features", worst_prev));
    reports
}

fn check_head(h: f64, seed: u64, corruption: f64) -> Vec<BlockReport> {
    let cfg = tiny_model_config();
    let params = ParamVec::seeded_init(cfg.layout(), seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xbeef);
    let mut map = BevFeatureMap::zeros(cfg.bev, cfg.channels);
    for v in map.data.iter_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    let probe: Vec<f64> =
        (0..cfg.cells() * cfg.z_bins()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let scalar = |p: &ParamVec, map: &BevFeatureMap| -> f64 {
        let vol = project_occupancy(map, p, cfg.volume);
        vol.logits.iter().zip(&probe).map(|(a, b)| a * b).sum()
    };
    let mut grads = params.zeros_like();
    let mut g_map = vec![0.0; map.data.len()];
    project_occupancy_backward(&map, &params, &probe, &mut g_map, &mut grads);
    if corruption != 0.0 {
        let r = params.layout.range("head.w");
        grads[r.start] += corruption;
    }
    let mut worst = 0.0f64;
    for name in ["head.w", "head.b"] {
        for i in params.layout.range(name) {
            let mut plus = params.clone();
            plus.data[i] += h;
            let mut minus = params.clone();
            minus.data[i] -= h;
            let numeric = (scalar(&plus, &map) - scalar(&minus, &map)) / (2.0 * h);
            worst = worst.max(rel_err(grads[i], numeric));
        }
    }
    let mut worst_map = 0.0f64;
    for i in 0..map.data.len() {
        let mut plus = map.clone();
        plus.data[i] += h;
        let mut minus = map.clone();
        minus.data[i] -= h;
        let numeric = (scalar(&params, &plus) - scalar(&params, &minus)) / (2.0 * h);
        worst_map = worst_map.max(rel_err(g_map[i], numeric));
    }
    vec![
        report(CheckOp::ProjectOccupancy, "head", worst),
        report(CheckOp::ProjectOccupancy, "features", worst_map),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_registered_ops_pass() {
        for op in CheckOp::ALL {
            let reports = gradcheck(op, 1e-5, 11, 0.0);
            for r in &reports {
                assert!(
                    r.passed(),
                    "{} / {}: max rel err {} over {}",
                    r.op,
                    r.block,
                    r.max_rel_err,
                    r.threshold
                );
            }
        }
    }

    #[test]
    fn linear_op_is_machine_precise() {
        let reports = gradcheck(CheckOp::ProjectOccupancy, 1e-5, 3, 0.0);
        for r in reports {
            assert!(r.max_rel_err < 1e-8, "{}: {}", r.block, r.max_rel_err);
        }
    }

    #[test]
    fn corrupted_backward_is_detected() {
        for op in CheckOp::ALL {
            let reports = gradcheck(op, 1e-5, 11, 0.05);
            assert!(
                reports.iter().any(|r| !r.passed()),
                "{:?} harness failed to flag a corrupted gradient",
                op
            );
        }
    }

    #[test]
    fn unknown_op_is_an_error() {
        assert!(matches!(CheckOp::parse("frobnicate"), Err(TrainError::UnknownOp(_))));
        assert!(CheckOp::parse("latent_render").is_ok());
    }
}
