//! Run configuration: one structured TOML file covering grid geometry, model
//! sizes, losses, training, evaluation, and scene generation. Unknown keys
//! are rejected so a typo cannot silently fall back to a default.

use crate::eval::EvalConfig;
use crate::grid::GridSpec;
use crate::model::{CameraRig, CameraView, ModelConfig};
use crate::scenes::{LidarRig, SceneConfig};
use crate::train::{LossConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io error reading config: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Validation(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub cells_x: usize,
    pub cells_y: usize,
    pub z_bins: usize,
    /// Half-extent of the square BEV window, meters.
    pub extent_xy: f64,
    pub z_min: f64,
    pub z_max: f64,
}

impl Default for GridSection {
    fn default() -> Self {
        Self { cells_x: 64, cells_y: 64, z_bins: 8, extent_xy: 16.0, z_min: -0.5, z_max: 3.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub channels: usize,
    pub layers: usize,
    pub attn_points: usize,
    pub self_attn_stride: usize,
    pub ffn_hidden: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { channels: 32, layers: 2, attn_points: 2, self_attn_stride: 8, ffn_hidden: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatentSection {
    pub groups: usize,
    pub spacing_cells: f64,
}

impl Default for LatentSection {
    fn default() -> Self {
        Self { groups: 16, spacing_cells: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub spacing_m: f64,
    pub exclusion_radius_m: f64,
    pub max_points_per_frame: usize,
}

impl Default for LossSection {
    fn default() -> Self {
        Self { spacing_m: 0.5, exclusion_radius_m: 0.25, max_points_per_frame: 192 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub history_frames: usize,
    pub future_steps: usize,
    pub eval_every: usize,
    pub detach_state_chain: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            epochs: d.epochs,
            learning_rate: d.learning_rate,
            batch_size: d.batch_size,
            history_frames: d.history_frames,
            future_steps: d.future_steps,
            eval_every: d.eval_every,
            detach_state_chain: d.detach_state_chain,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub range_x: f64,
    pub range_y: f64,
    pub horizons_s: Vec<f64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { range_x: 16.0, range_y: 16.0, horizons_s: vec![0.5, 1.0, 1.5, 2.0, 2.5, 3.0] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LidarSection {
    pub azimuths: usize,
    pub elevations: usize,
    pub elev_min_deg: f64,
    pub elev_max_deg: f64,
    pub max_range: f64,
    pub sensor_height: f64,
}

impl Default for LidarSection {
    fn default() -> Self {
        Self {
            azimuths: 240,
            elevations: 4,
            elev_min_deg: -1.0,
            elev_max_deg: 4.0,
            max_range: 26.0,
            sensor_height: 1.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraSection {
    pub views: usize,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub hfov_deg: f64,
    pub vfov_deg: f64,
}

impl Default for CameraSection {
    fn default() -> Self {
        Self { views: 4, width: 32, height: 24, channels: 3, hfov_deg: 90.0, vfov_deg: 30.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenesSection {
    pub episodes: usize,
    pub train_episodes: usize,
    pub frames: usize,
    pub arena_half: f64,
    pub statics_min: usize,
    pub statics_max: usize,
    pub movers_min: usize,
    pub movers_max: usize,
    pub static_half_min: f64,
    pub static_half_max: f64,
    pub static_height_min: f64,
    pub static_height_max: f64,
    pub mover_speed_min: f64,
    pub mover_speed_max: f64,
    pub mover_yaw_rate_max: f64,
    pub ego_speed_min: f64,
    pub ego_speed_max: f64,
    pub ego_turn_rate: f64,
    pub ground_z: f64,
    pub lidar: LidarSection,
    pub camera: CameraSection,
}

impl Default for ScenesSection {
    fn default() -> Self {
        let d = SceneConfig::default();
        Self {
            episodes: 80,
            train_episodes: 64,
            frames: d.frames,
            arena_half: d.arena_half,
            statics_min: d.statics_min,
            statics_max: d.statics_max,
            movers_min: d.movers_min,
            movers_max: d.movers_max,
            static_half_min: d.static_half_min,
            static_half_max: d.static_half_max,
            static_height_min: d.static_height_min,
            static_height_max: d.static_height_max,
            mover_speed_min: d.mover_speed_min,
            mover_speed_max: d.mover_speed_max,
            mover_yaw_rate_max: d.mover_yaw_rate_max,
            ego_speed_min: d.ego_speed_min,
            ego_speed_max: d.ego_speed_max,
            ego_turn_rate: d.ego_turn_rate,
            ground_z: d.ground_z,
            lidar: LidarSection::default(),
            camera: CameraSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub grid: GridSection,
    pub model: ModelSection,
    pub latent: LatentSection,
    pub loss: LossSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub scenes: ScenesSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = toml::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self, ConfigError> {
        match path {
            Some(p) => Self::load(p),
            None => {
                let cfg = Self::default();
                cfg.validate()?;
                Ok(cfg)
            }
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |msg: String| Err(ConfigError::Validation(msg));
        if self.grid.cells_x < 2 || self.grid.cells_y < 2 || self.grid.z_bins < 1 {
            return fail("grid must have at least 2x2 BEV cells and 1 height bin".into());
        }
        if self.grid.extent_xy <= 0.0 || self.grid.z_max <= self.grid.z_min {
            return fail("grid extents must be positive and well ordered".into());
        }
        if self.model.channels == 0 || self.model.channels % self.latent.groups != 0 {
            return fail(format!(
                "channels ({}) must be a positive multiple of latent groups ({})",
                self.model.channels, self.latent.groups
            ));
        }
        if self.model.layers == 0 || self.model.attn_points == 0 || self.model.self_attn_stride == 0
        {
            return fail("decoder layers, attention points, and stride must be positive".into());
        }
        if self.latent.spacing_cells <= 0.0 {
            return fail("latent spacing must be positive".into());
        }
        if self.loss.spacing_m <= 0.0 || self.loss.exclusion_radius_m >= self.loss.spacing_m {
            return fail("loss spacing must be positive and exceed the exclusion radius".into());
        }
        if self.train.epochs == 0 || self.train.batch_size == 0 || self.train.future_steps == 0 {
            return fail("training epochs, batch size, and future steps must be positive".into());
        }
        if self.train.history_frames == 0 {
            return fail("history must contain at least one frame".into());
        }
        if self.eval.horizons_s.is_empty()
            || self.eval.horizons_s.windows(2).any(|w| w[1] <= w[0])
            || self.eval.horizons_s[0] <= 0.0
        {
            return fail("eval horizons must be positive and ascending".into());
        }
        if self.scenes.train_episodes >= self.scenes.episodes && self.scenes.episodes > 0 {
            return fail(format!(
                "train_episodes ({}) must leave a held-out split of episodes ({})",
                self.scenes.train_episodes, self.scenes.episodes
            ));
        }
        let needed = self.train.history_frames + self.train.future_steps;
        if self.scenes.frames < needed {
            return fail(format!(
                "episodes of {} frames cannot cover history {} + horizon {}",
                self.scenes.frames, self.train.history_frames, self.train.future_steps
            ));
        }
        if self.scenes.camera.views == 0 || self.scenes.camera.channels == 0 {
            return fail("camera rig needs at least one view and one channel".into());
        }
        Ok(())
    }

    pub fn bev_spec(&self) -> GridSpec {
        GridSpec::bev(
            self.grid.cells_x,
            self.grid.cells_y,
            [-self.grid.extent_xy, -self.grid.extent_xy],
            [self.grid.extent_xy, self.grid.extent_xy],
        )
        .expect("validated")
    }

    pub fn volume_spec(&self) -> GridSpec {
        GridSpec::new(
            [self.grid.cells_x, self.grid.cells_y, self.grid.z_bins],
            [-self.grid.extent_xy, -self.grid.extent_xy, self.grid.z_min],
            [self.grid.extent_xy, self.grid.extent_xy, self.grid.z_max],
        )
        .expect("validated")
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            bev: self.bev_spec(),
            volume: self.volume_spec(),
            channels: self.model.channels,
            img_channels: self.scenes.camera.channels,
            groups: self.latent.groups,
            latent_spacing: self.latent.spacing_cells,
            layers: self.model.layers,
            attn_points: self.model.attn_points,
            self_attn_stride: self.model.self_attn_stride,
            ffn_hidden: self.model.ffn_hidden,
        }
    }

    pub fn scene_config(&self) -> SceneConfig {
        SceneConfig {
            arena_half: self.scenes.arena_half,
            statics_min: self.scenes.statics_min,
            statics_max: self.scenes.statics_max,
            movers_min: self.scenes.movers_min,
            movers_max: self.scenes.movers_max,
            static_half_min: self.scenes.static_half_min,
            static_half_max: self.scenes.static_half_max,
            static_height_min: self.scenes.static_height_min,
            static_height_max: self.scenes.static_height_max,
            mover_speed_min: self.scenes.mover_speed_min,
            mover_speed_max: self.scenes.mover_speed_max,
            mover_yaw_rate_max: self.scenes.mover_yaw_rate_max,
            ego_speed_min: self.scenes.ego_speed_min,
            ego_speed_max: self.scenes.ego_speed_max,
            ego_turn_rate: self.scenes.ego_turn_rate,
            frames: self.scenes.frames,
            ground_z: self.scenes.ground_z,
        }
    }

    pub fn lidar_rig(&self) -> LidarRig {
        LidarRig {
            azimuths: self.scenes.lidar.azimuths,
            elevations: self.scenes.lidar.elevations,
            elev_min: self.scenes.lidar.elev_min_deg.to_radians(),
            elev_max: self.scenes.lidar.elev_max_deg.to_radians(),
            max_range: self.scenes.lidar.max_range,
            sensor_z: self.scenes.ground_z + self.scenes.lidar.sensor_height,
        }
    }

    pub fn camera_rig(&self) -> CameraRig {
        let views = (0..self.scenes.camera.views)
            .map(|i| CameraView {
                pos: [0.0, 0.0],
                yaw: std::f64::consts::TAU * i as f64 / self.scenes.camera.views as f64,
                hfov: self.scenes.camera.hfov_deg.to_radians(),
            })
            .collect();
        CameraRig {
            views,
            width: self.scenes.camera.width,
            height: self.scenes.camera.height,
            channels: self.scenes.camera.channels,
            vfov: self.scenes.camera.vfov_deg.to_radians(),
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            spacing: self.loss.spacing_m,
            exclusion_radius: self.loss.exclusion_radius_m,
            horizon: self.train.future_steps,
            max_points_per_frame: self.loss.max_points_per_frame,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            learning_rate: self.train.learning_rate,
            batch_size: self.train.batch_size,
            seed: self.seed,
            history_frames: self.train.history_frames,
            future_steps: self.train.future_steps,
            eval_every: self.train.eval_every,
            detach_state_chain: self.train.detach_state_chain,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            range_x: self.eval.range_x,
            range_y: self.eval.range_y,
            horizons: self.eval.horizons_s.clone(),
        }
    }
}

/// Hex SHA-256 of the config's canonical TOML serialization.
pub fn config_hash(cfg: &RunConfig) -> String {
    use sha2::{Digest, Sha256};
    let text = toml::to_string(cfg).expect("config serializes");
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
