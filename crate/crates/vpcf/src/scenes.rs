//! Synthetic dynamic worlds, exact simulated LiDAR, a toy multi-view camera
//! renderer, and dataset serialization.
//!
//! Worlds are axis-aligned boxes (some with constant-speed curved motion), so
//! every LiDAR return is an exact slab-method intersection and doubles as an
//! oracle for the learned pipeline.

use crate::grid::PointCloud;
use crate::model::{CameraRig, EgoMotion, PlanarPose, VisualFrame, VisualSequence};
use crate::params::ByteReader;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;
use thiserror::Error;

pub const DATASET_MAGIC: &[u8; 4] = b"VPCD";
pub const DATASET_VERSION: u32 = 1;
/// Frame cadence in seconds.
pub const FRAME_DT: f64 = 0.5;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("infeasible scene config: could not place boxes after {0} retries")]
    Infeasible(usize),
    #[error("frame {frame} out of range (episode has {frames})")]
    FrameOutOfRange { frame: usize, frames: usize },
    #[error("bad magic at offset 0: expected \"VPCD\"")]
    BadMagic,
    #[error("unsupported dataset version {0}")]
    UnsupportedVersion(u32),
    #[error("unexpected end at offset {0}")]
    UnexpectedEnd(usize),
}

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3 {
    pub center: [f64; 3],
    pub half: [f64; 3],
}

/// Box with constant speed and a constant turn rate applied to its velocity
/// direction; the box itself stays axis-aligned so intersections remain exact.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mover {
    pub shape: Box3,
    pub speed: f64,
    pub heading: f64,
    pub yaw_rate: f64,
}

impl Mover {
    /// Closed-form position under constant speed and turn rate.
    pub fn center_at(&self, t: f64) -> [f64; 3] {
        let c = self.shape.center;
        if self.yaw_rate.abs() < 1e-9 {
            [
                c[0] + self.speed * t * self.heading.cos(),
                c[1] + self.speed * t * self.heading.sin(),
                c[2],
            ]
        } else {
            let w = self.yaw_rate;
            let th = self.heading;
            [
                c[0] + self.speed / w * ((th + w * t).sin() - th.sin()),
                c[1] - self.speed / w * ((th + w * t).cos() - th.cos()),
                c[2],
            ]
        }
    }

    pub fn box_at(&self, t: f64) -> Box3 {
        Box3 { center: self.center_at(t), half: self.shape.half }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub statics: Vec<Box3>,
    pub movers: Vec<Mover>,
    pub ground_z: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub world: World,
    pub poses: Vec<PlanarPose>,
}

impl Episode {
    pub fn frames(&self) -> usize {
        self.poses.len()
    }
}

/// LiDAR fan geometry and range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LidarRig {
    pub azimuths: usize,
    pub elevations: usize,
    pub elev_min: f64,
    pub elev_max: f64,
    pub max_range: f64,
    /// Sensor height above z = 0, shared with the camera rig.
    pub sensor_z: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
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
    pub frames: usize,
    pub ground_z: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            arena_half: 14.0,
            statics_min: 5,
            statics_max: 8,
            movers_min: 2,
            movers_max: 3,
            static_half_min: 0.6,
            static_half_max: 2.0,
            static_height_min: 0.5,
            static_height_max: 1.5,
            mover_speed_min: 1.5,
            mover_speed_max: 4.0,
            mover_yaw_rate_max: 0.3,
            ego_speed_min: 1.0,
            ego_speed_max: 2.5,
            ego_turn_rate: 0.25,
            frames: 11,
            ground_z: 0.0,
        }
    }
}

/// Ego trajectory templates at constant speed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MotionTemplate {
    Straight,
    Left,
    Right,
}

/// Constant-speed unicycle pose at time `t` from the origin pose.
fn unicycle_pose(speed: f64, yaw_rate: f64, t: f64) -> PlanarPose {
    if yaw_rate.abs() < 1e-9 {
        PlanarPose { x: speed * t, y: 0.0, yaw: 0.0 }
    } else {
        PlanarPose {
            x: speed / yaw_rate * (yaw_rate * t).sin(),
            y: speed / yaw_rate * (1.0 - (yaw_rate * t).cos()),
            yaw: yaw_rate * t,
        }
    }
}

/// Ego motions for a template at the fixed frame cadence.
pub fn template_motions(template: MotionTemplate, speed: f64, turn_rate: f64, steps: usize) -> Vec<EgoMotion> {
    let yaw_rate = match template {
        MotionTemplate::Straight => 0.0,
        MotionTemplate::Left => turn_rate,
        MotionTemplate::Right => -turn_rate,
    };
    let mut motions = Vec::with_capacity(steps);
    let mut prev = unicycle_pose(speed, yaw_rate, 0.0);
    for s in 1..=steps {
        let next = unicycle_pose(speed, yaw_rate, s as f64 * FRAME_DT);
        motions.push(prev.delta_to(&next));
        prev = next;
    }
    motions
}

/// Seeded scene generation: boxes placed without overlap and clear of the ego
/// path, movers with sampled speed and turn rate, ego on a straight or turning
/// template.
pub fn generate_episode(seed: u64, cfg: &SceneConfig) -> Result<Episode, SceneError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let template = match rng.gen_range(0..3) {
        0 => MotionTemplate::Straight,
        1 => MotionTemplate::Left,
        _ => MotionTemplate::Right,
    };
    let speed = rng.gen_range(cfg.ego_speed_min..=cfg.ego_speed_max);
    let yaw_rate = match template {
        MotionTemplate::Straight => 0.0,
        MotionTemplate::Left => cfg.ego_turn_rate,
        MotionTemplate::Right => -cfg.ego_turn_rate,
    };
    let poses: Vec<PlanarPose> = (0..cfg.frames)
        .map(|f| unicycle_pose(speed, yaw_rate, f as f64 * FRAME_DT))
        .collect();

    let n_static = rng.gen_range(cfg.statics_min..=cfg.statics_max);
    let n_movers = rng.gen_range(cfg.movers_min..=cfg.movers_max);
    let mut placed: Vec<Box3> = Vec::new();
    let mut statics = Vec::new();
    let mut movers = Vec::new();
    let max_retries = 1000;
    let mut retries = 0;

    let place = |rng: &mut ChaCha8Rng,
                     placed: &mut Vec<Box3>,
                     retries: &mut usize|
     -> Result<Box3, SceneError> {
        loop {
            let half = [
                rng.gen_range(cfg.static_half_min..=cfg.static_half_max),
                rng.gen_range(cfg.static_half_min..=cfg.static_half_max),
                rng.gen_range(cfg.static_height_min..=cfg.static_height_max),
            ];
            let center = [
                rng.gen_range(-cfg.arena_half..=cfg.arena_half),
                rng.gen_range(-cfg.arena_half..=cfg.arena_half),
                cfg.ground_z + half[2],
            ];
            let candidate = Box3 { center, half };
            let overlaps = placed.iter().any(|b| {
                (b.center[0] - center[0]).abs() < b.half[0] + half[0] + 0.5
                    && (b.center[1] - center[1]).abs() < b.half[1] + half[1] + 0.5
            });
            // Keep a corridor around the ego trajectory free.
            let blocks_ego = poses.iter().any(|p| {
                (p.x - center[0]).abs() < half[0] + 1.5 && (p.y - center[1]).abs() < half[1] + 1.5
            });
            if !overlaps && !blocks_ego {
                placed.push(candidate);
                return Ok(candidate);
            }
            *retries += 1;
            if *retries > max_retries {
                return Err(SceneError::Infeasible(max_retries));
            }
        }
    };

    for _ in 0..n_static {
        statics.push(place(&mut rng, &mut placed, &mut retries)?);
    }
    for _ in 0..n_movers {
        let shape = place(&mut rng, &mut placed, &mut retries)?;
        let speed = rng.gen_range(cfg.mover_speed_min..=cfg.mover_speed_max);
        let heading = rng.gen_range(0.0..std::f64::consts::TAU);
        let yaw_rate = rng.gen_range(-cfg.mover_yaw_rate_max..=cfg.mover_yaw_rate_max);
        let mover = Mover { shape, speed, heading, yaw_rate };
        // Movers must also stay clear of the ego positions over the episode.
        let hits_ego = poses.iter().enumerate().any(|(f, p)| {
            let c = mover.center_at(f as f64 * FRAME_DT);
            (p.x - c[0]).abs() < mover.shape.half[0] + 1.0
                && (p.y - c[1]).abs() < mover.shape.half[1] + 1.0
        });
        if hits_ego {
            retries += 1;
            if retries > max_retries {
                return Err(SceneError::Infeasible(max_retries));
            }
            continue;
        }
        movers.push(mover);
    }

    Ok(Episode {
        world: World { statics, movers, ground_z: cfg.ground_z },
        poses,
    })
}

/// Which surface a simulated ray hit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Surface {
    Static(usize),
    Mover(usize),
    Ground,
}

/// Exact slab-method intersection with an axis-aligned box; returns the entry
/// distance if the ray hits with t > 1e-9.
pub fn ray_box_intersection(origin: [f64; 3], dir: [f64; 3], b: &Box3) -> Option<f64> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    for a in 0..3 {
        let lo = b.center[a] - b.half[a];
        let hi = b.center[a] + b.half[a];
        if dir[a].abs() < 1e-12 {
            if origin[a] < lo || origin[a] > hi {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[a];
        let (t0, t1) = {
            let t0 = (lo - origin[a]) * inv;
            let t1 = (hi - origin[a]) * inv;
            if t0 <= t1 {
                (t0, t1)
            } else {
                (t1, t0)
            }
        };
        t_near = t_near.max(t0);
        t_far = t_far.min(t1);
        if t_near > t_far {
            return None;
        }
    }
    if t_far < 1e-9 {
        return None;
    }
    let t = if t_near > 1e-9 { t_near } else { t_far };
    Some(t)
}

/// Nearest hit in the world at episode time `t_world` (seconds), in world
/// coordinates; `None` if nothing is hit within `max_range`.
pub fn ray_world_hit(
    world: &World,
    t_world: f64,
    origin: [f64; 3],
    dir: [f64; 3],
    max_range: f64,
) -> Option<(f64, Surface)> {
    let mut best: Option<(f64, Surface)> = None;
    let mut consider = |t: f64, s: Surface| {
        if t <= max_range && best.map_or(true, |(bt, _)| t < bt) {
            best = Some((t, s));
        }
    };
    for (i, b) in world.statics.iter().enumerate() {
        if let Some(t) = ray_box_intersection(origin, dir, b) {
            consider(t, Surface::Static(i));
        }
    }
    for (i, m) in world.movers.iter().enumerate() {
        if let Some(t) = ray_box_intersection(origin, dir, &m.box_at(t_world)) {
            consider(t, Surface::Mover(i));
        }
    }
    if dir[2] < -1e-12 {
        let t = (world.ground_z - origin[2]) / dir[2];
        if t > 1e-9 {
            consider(t, Surface::Ground);
        }
    }
    Some(best?)
}

/// Simulated LiDAR sweep for one frame; points are expressed in that frame's
/// ego coordinates (planar rotation about the ego pose, z unchanged).
pub fn simulate_lidar(episode: &Episode, frame: usize, rig: &LidarRig) -> Result<PointCloud, SceneError> {
    let hits = simulate_lidar_with_surfaces(episode, frame, rig)?;
    Ok(PointCloud::new(hits.into_iter().map(|(p, _)| p).collect()))
}

/// LiDAR sweep that also reports the surface each point came from (used by
/// oracle tests).
pub fn simulate_lidar_with_surfaces(
    episode: &Episode,
    frame: usize,
    rig: &LidarRig,
) -> Result<Vec<([f64; 3], Surface)>, SceneError> {
    if frame >= episode.frames() {
        return Err(SceneError::FrameOutOfRange { frame, frames: episode.frames() });
    }
    let pose = &episode.poses[frame];
    let t_world = frame as f64 * FRAME_DT;
    let origin = [pose.x, pose.y, rig.sensor_z];
    let mut out = Vec::new();
    for e in 0..rig.elevations {
        let elev = if rig.elevations == 1 {
            0.5 * (rig.elev_min + rig.elev_max)
        } else {
            rig.elev_min + (rig.elev_max - rig.elev_min) * e as f64 / (rig.elevations - 1) as f64
        };
        for a in 0..rig.azimuths {
            let az = pose.yaw + std::f64::consts::TAU * a as f64 / rig.azimuths as f64;
            let dir = [az.cos() * elev.cos(), az.sin() * elev.cos(), elev.sin()];
            if let Some((t, surface)) = ray_world_hit(&episode.world, t_world, origin, dir, rig.max_range)
            {
                let world_pt = [origin[0] + t * dir[0], origin[1] + t * dir[1], origin[2] + t * dir[2]];
                out.push((pose.world_to_ego(world_pt), surface));
            }
        }
    }
    Ok(out)
}

/// Render the toy multi-view images for one frame. Channels per pixel:
/// inverse hit distance, class intensity (static 0.5, mover 1.0, ground
/// 0.25), and a hit flag.
pub fn render_views(
    episode: &Episode,
    frame: usize,
    rig: &CameraRig,
    lidar: &LidarRig,
) -> Result<Vec<Vec<f64>>, SceneError> {
    if frame >= episode.frames() {
        return Err(SceneError::FrameOutOfRange { frame, frames: episode.frames() });
    }
    let pose = &episode.poses[frame];
    let t_world = frame as f64 * FRAME_DT;
    let mut images = Vec::with_capacity(rig.views.len());
    for view in &rig.views {
        let mut img = vec![0.0; rig.height * rig.width * rig.channels];
        let cam_world = pose.ego_to_world_xy([view.pos[0], view.pos[1]]);
        let origin = [cam_world[0], cam_world[1], lidar.sensor_z];
        for v in 0..rig.height {
            let elev = rig.vfov * (0.5 - (v as f64 + 0.5) / rig.height as f64);
            for u in 0..rig.width {
                let az = pose.yaw + view.yaw + view.hfov * ((u as f64 + 0.5) / rig.width as f64 - 0.5);
                let dir = [az.cos() * elev.cos(), az.sin() * elev.cos(), elev.sin()];
                if let Some((t, surface)) =
                    ray_world_hit(&episode.world, t_world, origin, dir, lidar.max_range)
                {
                    let class = match surface {
                        Surface::Static(_) => 0.5,
                        Surface::Mover(_) => 1.0,
                        Surface::Ground => 0.25,
                    };
                    let base = (v * rig.width + u) * rig.channels;
                    img[base] = 1.0 / t.max(1e-3);
                    if rig.channels > 1 {
                        img[base + 1] = class;
                    }
                    if rig.channels > 2 {
                        img[base + 2] = 1.0;
                    }
                }
            }
        }
        images.push(img);
    }
    Ok(images)
}

/// Fully materialized episode: world, poses, per-frame clouds and images, and
/// the rigs they were produced with.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeData {
    pub episode: Episode,
    pub clouds: Vec<PointCloud>,
    pub images: Vec<Vec<Vec<f64>>>, // frame -> view -> h*w*c
    pub camera: CameraRig,
    pub lidar: LidarRig,
}

impl EpisodeData {
    /// Simulate every frame of an episode.
    pub fn materialize(
        episode: Episode,
        camera: &CameraRig,
        lidar: &LidarRig,
    ) -> Result<Self, SceneError> {
        let mut clouds = Vec::with_capacity(episode.frames());
        let mut images = Vec::with_capacity(episode.frames());
        for f in 0..episode.frames() {
            clouds.push(simulate_lidar(&episode, f, lidar)?);
            images.push(render_views(&episode, f, camera, lidar)?);
        }
        Ok(Self { episode, clouds, images, camera: camera.clone(), lidar: *lidar })
    }

    /// History window as a visual sequence: frames `[0, history)`.
    pub fn history_sequence(&self, history: usize) -> VisualSequence {
        let frames = (0..history)
            .map(|f| VisualFrame {
                images: self.images[f].clone(),
                pose: self.episode.poses[f],
            })
            .collect();
        VisualSequence { rig: self.camera.clone(), frames }
    }

    /// Ego motion from frame `f` to frame `f + 1`.
    pub fn motion(&self, f: usize) -> EgoMotion {
        self.episode.poses[f].delta_to(&self.episode.poses[f + 1])
    }
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f32(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&(v as f32).to_le_bytes());
}

/// Serialize episodes: magic, version, episode count; per episode the frame
/// count, ego poses, world record, rig records, then per frame the point
/// cloud and per-view image tensors (dims u32 x3, then f32 values).
pub fn write_dataset(episodes: &[EpisodeData], path: &Path) -> Result<(), SceneError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(DATASET_MAGIC);
    put_u32(&mut buf, DATASET_VERSION);
    put_u32(&mut buf, episodes.len() as u32);
    for ep in episodes {
        put_u32(&mut buf, ep.episode.frames() as u32);
        for pose in &ep.episode.poses {
            put_f32(&mut buf, pose.x);
            put_f32(&mut buf, pose.y);
            put_f32(&mut buf, pose.yaw);
        }
        // World record.
        put_f32(&mut buf, ep.episode.world.ground_z);
        put_u32(&mut buf, ep.episode.world.statics.len() as u32);
        for b in &ep.episode.world.statics {
            for v in b.center.iter().chain(b.half.iter()) {
                put_f32(&mut buf, *v);
            }
        }
        put_u32(&mut buf, ep.episode.world.movers.len() as u32);
        for m in &ep.episode.world.movers {
            for v in m.shape.center.iter().chain(m.shape.half.iter()) {
                put_f32(&mut buf, *v);
            }
            put_f32(&mut buf, m.speed);
            put_f32(&mut buf, m.heading);
            put_f32(&mut buf, m.yaw_rate);
        }
        // Camera rig.
        put_u32(&mut buf, ep.camera.views.len() as u32);
        for v in &ep.camera.views {
            put_f32(&mut buf, v.pos[0]);
            put_f32(&mut buf, v.pos[1]);
            put_f32(&mut buf, v.yaw);
            put_f32(&mut buf, v.hfov);
        }
        put_u32(&mut buf, ep.camera.width as u32);
        put_u32(&mut buf, ep.camera.height as u32);
        put_u32(&mut buf, ep.camera.channels as u32);
        put_f32(&mut buf, ep.camera.vfov);
        // Lidar rig.
        put_u32(&mut buf, ep.lidar.azimuths as u32);
        put_u32(&mut buf, ep.lidar.elevations as u32);
        put_f32(&mut buf, ep.lidar.elev_min);
        put_f32(&mut buf, ep.lidar.elev_max);
        put_f32(&mut buf, ep.lidar.max_range);
        put_f32(&mut buf, ep.lidar.sensor_z);
        // Frames.
        for f in 0..ep.episode.frames() {
            let cloud = &ep.clouds[f];
            put_u32(&mut buf, cloud.len() as u32);
            for p in &cloud.points {
                put_f32(&mut buf, p[0]);
                put_f32(&mut buf, p[1]);
                put_f32(&mut buf, p[2]);
            }
            for img in &ep.images[f] {
                put_u32(&mut buf, ep.camera.height as u32);
                put_u32(&mut buf, ep.camera.width as u32);
                put_u32(&mut buf, ep.camera.channels as u32);
                for v in img {
                    put_f32(&mut buf, *v);
                }
            }
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<EpisodeData>, SceneError> {
    let bytes = std::fs::read(path)?;
    let mut r = Cursor::new(&bytes);
    let magic = r.take(4)?;
    if magic != DATASET_MAGIC {
        return Err(SceneError::BadMagic);
    }
    let version = r.u32()?;
    if version != DATASET_VERSION {
        return Err(SceneError::UnsupportedVersion(version));
    }
    let n_episodes = r.u32()? as usize;
    let mut episodes = Vec::with_capacity(n_episodes);
    for _ in 0..n_episodes {
        let frames = r.u32()? as usize;
        let mut poses = Vec::with_capacity(frames);
        for _ in 0..frames {
            poses.push(PlanarPose { x: r.f32()?, y: r.f32()?, yaw: r.f32()? });
        }
        let ground_z = r.f32()?;
        let n_static = r.u32()? as usize;
        let mut statics = Vec::with_capacity(n_static);
        for _ in 0..n_static {
            statics.push(Box3 {
                center: [r.f32()?, r.f32()?, r.f32()?],
                half: [r.f32()?, r.f32()?, r.f32()?],
            });
        }
        let n_movers = r.u32()? as usize;
        let mut movers = Vec::with_capacity(n_movers);
        for _ in 0..n_movers {
            movers.push(Mover {
                shape: Box3 {
                    center: [r.f32()?, r.f32()?, r.f32()?],
                    half: [r.f32()?, r.f32()?, r.f32()?],
                },
                speed: r.f32()?,
                heading: r.f32()?,
                yaw_rate: r.f32()?,
            });
        }
        let n_views = r.u32()? as usize;
        let mut views = Vec::with_capacity(n_views);
        for _ in 0..n_views {
            views.push(crate::model::CameraView {
                pos: [r.f32()?, r.f32()?],
                yaw: r.f32()?,
                hfov: r.f32()?,
            });
        }
        let camera = CameraRig {
            views,
            width: r.u32()? as usize,
            height: r.u32()? as usize,
            channels: r.u32()? as usize,
            vfov: r.f32()?,
        };
        let lidar = LidarRig {
            azimuths: r.u32()? as usize,
            elevations: r.u32()? as usize,
            elev_min: r.f32()?,
            elev_max: r.f32()?,
            max_range: r.f32()?,
            sensor_z: r.f32()?,
        };
        let mut clouds = Vec::with_capacity(frames);
        let mut images = Vec::with_capacity(frames);
        for _ in 0..frames {
            let n_points = r.u32()? as usize;
            let mut points = Vec::with_capacity(n_points);
            for _ in 0..n_points {
                points.push([r.f32()?, r.f32()?, r.f32()?]);
            }
            clouds.push(PointCloud::new(points));
            let mut frame_images = Vec::with_capacity(camera.views.len());
            for _ in 0..camera.views.len() {
                let h = r.u32()? as usize;
                let w = r.u32()? as usize;
                let c = r.u32()? as usize;
                let mut img = Vec::with_capacity(h * w * c);
                for _ in 0..h * w * c {
                    img.push(r.f32()?);
                }
                frame_images.push(img);
            }
            images.push(frame_images);
        }
        episodes.push(EpisodeData {
            episode: Episode { world: World { statics, movers, ground_z }, poses },
            clouds,
            images,
            camera,
            lidar,
        });
    }
    Ok(episodes)
}

/// Thin adapter over the shared byte reader that converts truncation errors
/// to dataset errors with their offsets.
struct Cursor<'a> {
    inner: ByteReader<'a>,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { inner: ByteReader::new(bytes) }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], SceneError> {
        let offset = self.inner.offset();
        self.inner.take(n).map_err(|_| SceneError::UnexpectedEnd(offset))
    }

    fn u32(&mut self) -> Result<u32, SceneError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self) -> Result<f64, SceneError> {
        let b = self.take(4)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
    }
}
