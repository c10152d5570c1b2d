//! The optimization loop: per-sample losses and gradients over the full
//! encoder -> latent rendering -> decoder -> loss chain, batched with a
//! deterministic reduction order, stepped by Adam under cosine decay.

use super::loss::{l1_depth_loss_with_grad, ray_ce_loss_with_grad};
use super::optim::{cosine_lr, Adam};
use super::{mix_seed, sample_supervised_frame, LossConfig, MetricsRow, TrainConfig, TrainError};
use crate::grid::PointCloud;
use crate::latent::{latent_render_backward, latent_render_with_tables, RayTables};
use crate::model::{
    decode_future_step_backward, decode_future_step_forward, encode_history_backward,
    encode_history_forward, project_occupancy, project_occupancy_backward, DecoderWorkspace,
    EgoMotion, ModelConfig, VisualSequence,
};
use crate::params::ParamVec;
use crate::scenes::EpisodeData;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Pipeline wiring: the full model, or the ablation that skips latent
/// rendering and trains through rendered expected depth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelVariant {
    Latent,
    Raycast,
}

impl ModelVariant {
    pub fn name(&self) -> &'static str {
        match self {
            ModelVariant::Latent => "latent",
            ModelVariant::Raycast => "raycast",
        }
    }
}

/// One training window: a visual history, the future ego motions, and the
/// future ground-truth clouds (in their own frames' ego coordinates).
pub struct TrainSample {
    pub seq: VisualSequence,
    pub motions: Vec<EgoMotion>,
    pub futures: Vec<PointCloud>,
    pub origin: [f64; 3],
}

/// Build one window per episode: frames `[0, history)` as input, frames
/// `history-1+t` for `t = 1..=horizon` as supervision.
pub fn build_samples(
    episodes: &[EpisodeData],
    history: usize,
    horizon: usize,
) -> Result<Vec<TrainSample>, TrainError> {
    if episodes.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut samples = Vec::with_capacity(episodes.len());
    for ep in episodes {
        assert!(
            ep.episode.frames() >= history + horizon,
            "episode too short: {} frames < {history} history + {horizon} horizon",
            ep.episode.frames()
        );
        let current = history - 1;
        let motions = (0..horizon).map(|t| ep.motion(current + t)).collect();
        let futures = (1..=horizon).map(|t| ep.clouds[current + t].clone()).collect();
        samples.push(TrainSample {
            seq: ep.history_sequence(history),
            motions,
            futures,
            origin: [0.0, 0.0, ep.lidar.sensor_z],
        });
    }
    Ok(samples)
}

fn subsample_cloud(cloud: &PointCloud, cap: usize, rng: &mut ChaCha8Rng) -> PointCloud {
    if cloud.len() <= cap {
        return cloud.clone();
    }
    let mut indices = rand::seq::index::sample(rng, cloud.len(), cap).into_vec();
    indices.sort_unstable();
    PointCloud::new(indices.into_iter().map(|i| cloud.points[i]).collect())
}

/// Loss and full parameter gradient for one sample with the supervised frame
/// already drawn.
#[allow(clippy::too_many_arguments)]
fn sample_loss_and_grad(
    sample: &TrainSample,
    params: &ParamVec,
    cfg: &ModelConfig,
    variant: ModelVariant,
    tables: &RayTables,
    ws: &DecoderWorkspace,
    loss_cfg: &LossConfig,
    detach_state_chain: bool,
    t_star: usize,
    point_seed: u64,
) -> Result<(f64, Vec<f64>), TrainError> {
    let (f_bev, enc_cache) =
        encode_history_forward(&sample.seq, params, &cfg.bev).map_err(|_| TrainError::EmptyDataset)?;
    let (f0, lat_cache) = match variant {
        ModelVariant::Latent => {
            let (out, cache) = latent_render_with_tables(
                &f_bev,
                params.tensor("latent.proj_w"),
                params.tensor("latent.proj_b"),
                tables,
            )
            .expect("channel grouping validated at config time");
            (out, Some(cache))
        }
        ModelVariant::Raycast => (f_bev.clone(), None),
    };

    let mut states = vec![f0];
    let mut caches = Vec::with_capacity(t_star);
    for t in 0..t_star {
        let (next, cache) =
            decode_future_step_forward(&states[t], &sample.motions[t], params, cfg, ws);
        states.push(next);
        caches.push(cache);
    }
    let last = states.last().unwrap();
    let volume = project_occupancy(last, params, cfg.volume);

    let mut rng = ChaCha8Rng::seed_from_u64(point_seed);
    let cloud = subsample_cloud(&sample.futures[t_star - 1], loss_cfg.max_points_per_frame, &mut rng);
    let (loss, g_logits) = match variant {
        ModelVariant::Latent => ray_ce_loss_with_grad(&volume, &cloud, sample.origin, loss_cfg)?,
        ModelVariant::Raycast => {
            l1_depth_loss_with_grad(&volume, &cloud, sample.origin, loss_cfg.spacing)?
        }
    };

    let mut grads = params.zeros_like();
    let mut g_state = vec![0.0; last.data.len()];
    project_occupancy_backward(last, params, &g_logits, &mut g_state, &mut grads);
    let mut reached_start = true;
    for t in (0..t_star).rev() {
        let mut g_prev = vec![0.0; g_state.len()];
        decode_future_step_backward(
            &states[t],
            params,
            cfg,
            ws,
            &caches[t],
            &g_state,
            &mut g_prev,
            &mut grads,
        );
        g_state = g_prev;
        if detach_state_chain {
            reached_start = false;
            break;
        }
    }
    if reached_start {
        let g_fbev = match (variant, lat_cache) {
            (ModelVariant::Latent, Some(cache)) => {
                let lat_grads = latent_render_backward(
                    &f_bev,
                    params.tensor("latent.proj_w"),
                    tables,
                    &cache,
                    &g_state,
                );
                let wr = params.layout.range("latent.proj_w");
                for (d, s) in grads[wr].iter_mut().zip(&lat_grads.weights) {
                    *d += s;
                }
                let br = params.layout.range("latent.proj_b");
                for (d, s) in grads[br].iter_mut().zip(&lat_grads.bias) {
                    *d += s;
                }
                lat_grads.map
            }
            _ => g_state,
        };
        encode_history_backward(&sample.seq, params, &enc_cache, &g_fbev, &mut grads);
    }
    Ok((loss, grads))
}

pub struct FitOutcome {
    pub metrics: Vec<MetricsRow>,
}

/// Train in place. `eval_hook`, when provided, is called at the configured
/// epoch cadence (and after the final epoch) and its per-horizon Chamfer
/// table is attached to that epoch's last metrics row.
#[allow(clippy::too_many_arguments)]
pub fn fit(
    samples: &[TrainSample],
    params: &mut ParamVec,
    cfg: &ModelConfig,
    variant: ModelVariant,
    train_cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    mut eval_hook: Option<&mut dyn FnMut(&ParamVec) -> Vec<f64>>,
    mut sink: impl FnMut(&MetricsRow),
) -> Result<FitOutcome, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let tables = RayTables::build([cfg.bev.cells[0], cfg.bev.cells[1]], cfg.latent_config());
    let ws = DecoderWorkspace::new(cfg);
    let mut adam = Adam::new(params.data.len());
    let batches_per_epoch = samples.len().div_ceil(train_cfg.batch_size);
    let total_steps = train_cfg.epochs * batches_per_epoch;
    let mut metrics = Vec::new();
    let mut step = 0usize;

    for epoch in 0..train_cfg.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut epoch_rng = ChaCha8Rng::seed_from_u64(mix_seed(train_cfg.seed ^ (epoch as u64)));
        order.shuffle(&mut epoch_rng);
        let mut epoch_loss = 0.0;
        let mut epoch_batches = 0usize;

        for chunk in order.chunks(train_cfg.batch_size) {
            let lr = cosine_lr(train_cfg.learning_rate, step, total_steps);
            let results: Vec<Result<(f64, Vec<f64>), TrainError>> = chunk
                .par_iter()
                .map(|&idx| {
                    let draw_seed =
                        mix_seed(train_cfg.seed ^ ((epoch as u64) << 24) ^ ((idx as u64) << 1) ^ 1);
                    let mut draw_rng = ChaCha8Rng::seed_from_u64(draw_seed);
                    let t_star = sample_supervised_frame(train_cfg.future_steps, &mut draw_rng);
                    sample_loss_and_grad(
                        &samples[idx],
                        params,
                        cfg,
                        variant,
                        &tables,
                        &ws,
                        loss_cfg,
                        train_cfg.detach_state_chain,
                        t_star,
                        mix_seed(draw_seed ^ 0xdead),
                    )
                })
                .collect();
            let mut batch_loss = 0.0;
            let mut grads = params.zeros_like();
            let mut contributing = 0usize;
            for result in results {
                let (loss, g) = result?;
                batch_loss += loss;
                for (d, s) in grads.iter_mut().zip(&g) {
                    *d += s;
                }
                contributing += 1;
            }
            let inv = 1.0 / contributing as f64;
            batch_loss *= inv;
            for g in grads.iter_mut() {
                *g *= inv;
            }
            if !batch_loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, step, value: batch_loss });
            }
            adam.step(&mut params.data, &grads, lr);
            step += 1;
            epoch_loss += batch_loss;
            epoch_batches += 1;

            let is_epoch_end = epoch_batches == batches_per_epoch;
            let eval_due = is_epoch_end
                && (epoch + 1 == train_cfg.epochs
                    || (train_cfg.eval_every > 0 && (epoch + 1) % train_cfg.eval_every == 0));
            let chamfer = if eval_due {
                eval_hook.as_mut().map(|hook| hook(params)).unwrap_or_default()
            } else {
                Vec::new()
            };
            let row = MetricsRow { epoch, step, loss: batch_loss, lr, chamfer_by_horizon: chamfer };
            sink(&row);
            metrics.push(row);
        }
        let _ = epoch_loss;
    }
    Ok(FitOutcome { metrics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;
    use crate::model::{CameraRig, CameraView};
    use crate::scenes::{generate_episode, EpisodeData, LidarRig, SceneConfig};

    fn tiny_setup() -> (Vec<EpisodeData>, ModelConfig) {
        let camera = CameraRig {
            views: (0..4)
                .map(|i| CameraView {
                    pos: [0.0, 0.0],
                    yaw: i as f64 * std::f64::consts::FRAC_PI_2,
                    hfov: std::f64::consts::FRAC_PI_2,
                })
                .collect(),
            width: 8,
            height: 4,
            channels: 3,
            vfov: 0.4,
        };
        let lidar = LidarRig {
            azimuths: 60,
            elevations: 2,
            elev_min: -0.02,
            elev_max: 0.06,
            max_range: 20.0,
            sensor_z: 1.5,
        };
        let scene_cfg = SceneConfig { frames: 6, ..SceneConfig::default() };
        let episodes: Vec<EpisodeData> = (0..2)
            .map(|s| {
                EpisodeData::materialize(generate_episode(s + 100, &scene_cfg).unwrap(), &camera, &lidar)
                    .unwrap()
            })
            .collect();
        let bev = GridSpec::bev(16, 16, [-12.0, -12.0], [12.0, 12.0]).unwrap();
        let volume = GridSpec::new([16, 16, 4], [-12.0, -12.0, -0.5], [12.0, 12.0, 3.5]).unwrap();
        let cfg = ModelConfig {
            bev,
            volume,
            channels: 8,
            img_channels: 3,
            groups: 2,
            latent_spacing: 1.0,
            layers: 1,
            attn_points: 2,
            self_attn_stride: 4,
            ffn_hidden: 8,
        };
        (episodes, cfg)
    }

    fn tiny_train_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 10,
            learning_rate: 3e-3,
            batch_size: 2,
            seed: 5,
            history_frames: 2,
            future_steps: 2,
            eval_every: 0,
            detach_state_chain: false,
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let (episodes, cfg) = tiny_setup();
        let samples = build_samples(&episodes, 2, 2).unwrap();
        let mut params = ParamVec::seeded_init(cfg.layout(), 1);
        let before = params.data.clone();
        let train_cfg = TrainConfig { learning_rate: 0.0, epochs: 2, ..tiny_train_cfg() };
        fit(
            &samples,
            &mut params,
            &cfg,
            ModelVariant::Latent,
            &train_cfg,
            &LossConfig { spacing: 1.5, exclusion_radius: 0.6, ..LossConfig::default() },
            None,
            |_| {},
        )
        .unwrap();
        assert_eq!(params.data, before);
    }

    #[test]
    fn loss_decreases_on_a_fixed_batch() {
        // Horizon 1 pins the supervised frame, so every step optimizes the
        // same objective over the same two samples.
        let (episodes, cfg) = tiny_setup();
        let samples = build_samples(&episodes, 2, 1).unwrap();
        let mut params = ParamVec::seeded_init(cfg.layout(), 2);
        let train_cfg = TrainConfig {
            epochs: 20,
            learning_rate: 5e-3,
            future_steps: 1,
            ..tiny_train_cfg()
        };
        let outcome = fit(
            &samples,
            &mut params,
            &cfg,
            ModelVariant::Latent,
            &train_cfg,
            &LossConfig { spacing: 1.5, exclusion_radius: 0.6, horizon: 1, ..LossConfig::default() },
            None,
            |_| {},
        )
        .unwrap();
        let first = outcome.metrics.first().unwrap().loss;
        let last = outcome.metrics.last().unwrap().loss;
        assert!(
            last < first,
            "loss did not decrease: first {first}, last {last}"
        );
    }

    #[test]
    fn identical_seeds_produce_identical_runs() {
        let (episodes, cfg) = tiny_setup();
        let samples = build_samples(&episodes, 2, 2).unwrap();
        let train_cfg = TrainConfig { epochs: 3, ..tiny_train_cfg() };
        let loss_cfg = LossConfig { spacing: 1.5, exclusion_radius: 0.6, ..LossConfig::default() };
        let run = || {
            let mut params = ParamVec::seeded_init(cfg.layout(), 3);
            let outcome = fit(
                &samples,
                &mut params,
                &cfg,
                ModelVariant::Latent,
                &train_cfg,
                &loss_cfg,
                None,
                |_| {},
            )
            .unwrap();
            (params.data, outcome.metrics)
        };
        let (params_a, metrics_a) = run();
        let (params_b, metrics_b) = run();
        assert_eq!(params_a, params_b);
        assert_eq!(metrics_a, metrics_b);
    }

    #[test]
    fn raycast_variant_trains_too() {
        let (episodes, cfg) = tiny_setup();
        let samples = build_samples(&episodes, 2, 2).unwrap();
        let mut params = ParamVec::seeded_init(cfg.layout(), 4);
        let train_cfg = TrainConfig { epochs: 2, ..tiny_train_cfg() };
        let outcome = fit(
            &samples,
            &mut params,
            &cfg,
            ModelVariant::Raycast,
            &train_cfg,
            &LossConfig { spacing: 1.5, exclusion_radius: 0.6, ..LossConfig::default() },
            None,
            |_| {},
        )
        .unwrap();
        assert!(outcome.metrics.iter().all(|m| m.loss.is_finite()));
    }
}
