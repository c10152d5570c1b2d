//! Grid geometry, coordinate transforms, and interpolation shared by all
//! rendering and loss code.
//!
//! Conventions: integer cell coordinates sit at cell centers, so the world
//! minimum maps to continuous cell coordinate -0.5 and the maximum to
//! `cells - 0.5`. Out-of-bounds interpolation neighbors contribute 0
//! (zero padding).

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("invalid grid spec: {0}")]
    InvalidSpec(String),
    #[error("degenerate ray: target within 1e-9 of origin")]
    DegenerateRay,
    #[error("direction is not a unit vector (|d| = {0})")]
    NotUnit(f64),
    #[error("shape mismatch: expected {expected} values, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

/// Dense axis-aligned grid geometry. `cells[2] == 1` for BEV maps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub cells: [usize; 3],
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl GridSpec {
    pub fn new(cells: [usize; 3], min: [f64; 3], max: [f64; 3]) -> Result<Self, GridError> {
        for a in 0..3 {
            if cells[a] < 1 {
                return Err(GridError::InvalidSpec(format!("cells[{a}] must be >= 1")));
            }
            if !(min[a].is_finite() && max[a].is_finite()) {
                return Err(GridError::InvalidSpec(format!("bounds[{a}] not finite")));
            }
            if max[a] <= min[a] {
                return Err(GridError::InvalidSpec(format!(
                    "max[{a}] = {} must exceed min[{a}] = {}",
                    max[a], min[a]
                )));
            }
            let size = (max[a] - min[a]) / cells[a] as f64;
            if !(size.is_finite() && size > 0.0) {
                return Err(GridError::InvalidSpec(format!("cell size[{a}] degenerate")));
            }
        }
        Ok(Self { cells, min, max })
    }

    /// Planar spec for BEV maps: a single z slab of unit thickness.
    pub fn bev(cells_x: usize, cells_y: usize, min_xy: [f64; 2], max_xy: [f64; 2]) -> Result<Self, GridError> {
        Self::new(
            [cells_x, cells_y, 1],
            [min_xy[0], min_xy[1], 0.0],
            [max_xy[0], max_xy[1], 1.0],
        )
    }

    pub fn cell_size(&self, axis: usize) -> f64 {
        (self.max[axis] - self.min[axis]) / self.cells[axis] as f64
    }

    pub fn world_to_cell(&self, p: [f64; 3]) -> [f64; 3] {
        let mut c = [0.0; 3];
        for a in 0..3 {
            c[a] = (p[a] - self.min[a]) / self.cell_size(a) - 0.5;
        }
        c
    }

    pub fn cell_to_world(&self, c: [f64; 3]) -> [f64; 3] {
        let mut p = [0.0; 3];
        for a in 0..3 {
            p[a] = (c[a] + 0.5) * self.cell_size(a) + self.min[a];
        }
        p
    }

    pub fn world_to_cell_xy(&self, p: [f64; 2]) -> [f64; 2] {
        let c = self.world_to_cell([p[0], p[1], self.min[2]]);
        [c[0], c[1]]
    }

    pub fn cell_to_world_xy(&self, c: [f64; 2]) -> [f64; 2] {
        let p = self.cell_to_world([c[0], c[1], 0.0]);
        [p[0], p[1]]
    }

    /// Closed-interval membership.
    pub fn contains_world(&self, p: [f64; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    pub fn contains_world_xy(&self, p: [f64; 2]) -> bool {
        (0..2).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    pub fn cell_count(&self) -> usize {
        self.cells[0] * self.cells[1] * self.cells[2]
    }

    /// Continuous cell coordinates of the grid center (midpoint of the world box).
    pub fn center_cell_xy(&self) -> [f64; 2] {
        [
            (self.cells[0] as f64 - 1.0) / 2.0,
            (self.cells[1] as f64 - 1.0) / 2.0,
        ]
    }
}

/// 2D grid of feature vectors, laid out x-major: `(x * cells_y + y) * channels + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct BevFeatureMap {
    pub spec: GridSpec,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl BevFeatureMap {
    pub fn zeros(spec: GridSpec, channels: usize) -> Self {
        let len = spec.cells[0] * spec.cells[1] * channels;
        Self { spec, channels, data: vec![0.0; len] }
    }

    pub fn from_data(spec: GridSpec, channels: usize, data: Vec<f64>) -> Result<Self, GridError> {
        let expected = spec.cells[0] * spec.cells[1] * channels;
        if data.len() != expected {
            return Err(GridError::ShapeMismatch { expected, got: data.len() });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(GridError::NonFinite("feature map"));
        }
        Ok(Self { spec, channels, data })
    }

    #[inline]
    pub fn base(&self, x: usize, y: usize) -> usize {
        (x * self.spec.cells[1] + y) * self.channels
    }

    #[inline]
    pub fn feature(&self, x: usize, y: usize) -> &[f64] {
        let b = self.base(x, y);
        &self.data[b..b + self.channels]
    }

    #[inline]
    pub fn feature_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let b = self.base(x, y);
        &mut self.data[b..b + self.channels]
    }

    pub fn cells_xy(&self) -> [usize; 2] {
        [self.spec.cells[0], self.spec.cells[1]]
    }
}

/// 3D grid of raw occupancy logits, laid out `(x * cells_y + y) * cells_z + z`.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyVolume {
    pub spec: GridSpec,
    pub logits: Vec<f64>,
}

impl OccupancyVolume {
    pub fn zeros(spec: GridSpec) -> Self {
        Self { logits: vec![0.0; spec.cell_count()], spec }
    }

    pub fn from_logits(spec: GridSpec, logits: Vec<f64>) -> Result<Self, GridError> {
        if logits.len() != spec.cell_count() {
            return Err(GridError::ShapeMismatch { expected: spec.cell_count(), got: logits.len() });
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(GridError::NonFinite("occupancy volume"));
        }
        Ok(Self { spec, logits })
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.spec.cells[1] + y) * self.spec.cells[2] + z
    }
}

/// List of points in meters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

pub fn norm<const N: usize>(v: [f64; N]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn sub<const N: usize>(a: [f64; N], b: [f64; N]) -> [f64; N] {
    let mut out = [0.0; N];
    for i in 0..N {
        out[i] = a[i] - b[i];
    }
    out
}

pub fn add_scaled<const N: usize>(a: [f64; N], d: [f64; N], t: f64) -> [f64; N] {
    let mut out = [0.0; N];
    for i in 0..N {
        out[i] = a[i] + t * d[i];
    }
    out
}

/// Ray with a unit direction (checked to 1e-9 at construction).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray<const N: usize> {
    pub origin: [f64; N],
    pub direction: [f64; N],
}

impl<const N: usize> Ray<N> {
    pub fn new(origin: [f64; N], direction: [f64; N]) -> Result<Self, GridError> {
        let n = norm(direction);
        if (n - 1.0).abs() > 1e-9 {
            return Err(GridError::NotUnit(n));
        }
        Ok(Self { origin, direction })
    }

    /// Ray from `origin` toward `target`, normalizing the offset.
    pub fn from_points(origin: [f64; N], target: [f64; N]) -> Result<Self, GridError> {
        let delta = sub(target, origin);
        let dist = norm(delta);
        if dist <= 1e-9 {
            return Err(GridError::DegenerateRay);
        }
        let mut direction = [0.0; N];
        for i in 0..N {
            direction[i] = delta[i] / dist;
        }
        Ok(Self { origin, direction })
    }

    pub fn point_at(&self, t: f64) -> [f64; N] {
        add_scaled(self.origin, self.direction, t)
    }
}

/// Ordered waypoint samples along a ray.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WaypointSet<const N: usize> {
    pub distances: Vec<f64>,
    pub coordinates: Vec<[f64; N]>,
    pub inside: Vec<bool>,
}

impl<const N: usize> WaypointSet<N> {
    pub fn len(&self) -> usize {
        self.distances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.distances.is_empty()
    }
}

/// Waypoints at distances `spacing, 2*spacing, ...` while the coordinate stays
/// inside `spec`. An origin outside the bounds yields an empty set.
pub fn sample_waypoints(ray: &Ray<3>, spacing: f64, spec: &GridSpec) -> WaypointSet<3> {
    assert!(spacing > 0.0, "waypoint spacing must be positive");
    let mut set = WaypointSet::default();
    if !spec.contains_world(ray.origin) {
        return set;
    }
    let mut j = 1u64;
    loop {
        let t = j as f64 * spacing;
        let p = ray.point_at(t);
        if !spec.contains_world(p) {
            break;
        }
        set.distances.push(t);
        set.coordinates.push(p);
        set.inside.push(true);
        j += 1;
    }
    set
}

/// Waypoints at distances `0, spacing, 2*spacing, ...` strictly closer to the
/// origin than `target`. The origin itself is always the first waypoint.
pub fn prior_waypoints<const N: usize>(
    origin: [f64; N],
    target: [f64; N],
    spacing: f64,
) -> Result<WaypointSet<N>, GridError> {
    assert!(spacing > 0.0, "waypoint spacing must be positive");
    let ray = Ray::from_points(origin, target)?;
    let dist = norm(sub(target, origin));
    let mut set = WaypointSet::default();
    let mut j = 0u64;
    loop {
        let t = j as f64 * spacing;
        if t >= dist {
            break;
        }
        set.distances.push(t);
        set.coordinates.push(ray.point_at(t));
        set.inside.push(true);
        j += 1;
    }
    Ok(set)
}

/// One bilinear interpolation corner: flat scalar-grid index and weight.
/// Out-of-bounds corners come back with weight 0 so accumulation loops can
/// stay branch-free.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Tap {
    pub index: u32,
    pub weight: f64,
}

/// Four bilinear corners of `coord` on an `cells[0] x cells[1]` scalar grid
/// (x-major flat indices). Zero padding outside the grid.
pub fn bilinear_taps(coord: [f64; 2], cells: [usize; 2]) -> [Tap; 4] {
    let x0 = coord[0].floor();
    let y0 = coord[1].floor();
    let fx = coord[0] - x0;
    let fy = coord[1] - y0;
    let (x0, y0) = (x0 as i64, y0 as i64);
    let mut taps = [Tap::default(); 4];
    let corners = [
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x0 + 1, y0, fx * (1.0 - fy)),
        (x0, y0 + 1, (1.0 - fx) * fy),
        (x0 + 1, y0 + 1, fx * fy),
    ];
    for (k, (cx, cy, w)) in corners.into_iter().enumerate() {
        if cx >= 0 && cy >= 0 && (cx as usize) < cells[0] && (cy as usize) < cells[1] {
            taps[k] = Tap { index: (cx as usize * cells[1] + cy as usize) as u32, weight: w };
        }
    }
    taps
}

/// Bilinear sample of a scalar grid (x-major) with zero padding.
pub fn bilinear_sample_scalar(data: &[f64], cells: [usize; 2], coord: [f64; 2]) -> f64 {
    bilinear_taps(coord, cells)
        .iter()
        .map(|t| t.weight * data[t.index as usize])
        .sum()
}

/// Bilinear sample of a feature map; writes `map.channels` values into `out`.
pub fn bilinear_sample(map: &BevFeatureMap, coord: [f64; 2], out: &mut [f64]) {
    assert_eq!(out.len(), map.channels);
    out.fill(0.0);
    for t in bilinear_taps(coord, map.cells_xy()) {
        if t.weight == 0.0 {
            continue;
        }
        let b = t.index as usize * map.channels;
        for (o, v) in out.iter_mut().zip(&map.data[b..b + map.channels]) {
            *o += t.weight * v;
        }
    }
}

/// Eight trilinear corners of `coord` on a 3D grid with x-major flat indices
/// `(x * cells_y + y) * cells_z + z`. Zero padding outside the grid.
pub fn trilinear_taps(coord: [f64; 3], cells: [usize; 3]) -> [Tap; 8] {
    let f = [coord[0].floor(), coord[1].floor(), coord[2].floor()];
    let r = [coord[0] - f[0], coord[1] - f[1], coord[2] - f[2]];
    let base = [f[0] as i64, f[1] as i64, f[2] as i64];
    let mut taps = [Tap::default(); 8];
    for (k, tap) in taps.iter_mut().enumerate() {
        let dx = (k >> 2) & 1;
        let dy = (k >> 1) & 1;
        let dz = k & 1;
        let c = [base[0] + dx as i64, base[1] + dy as i64, base[2] + dz as i64];
        if (0..3).any(|a| c[a] < 0 || c[a] as usize >= cells[a]) {
            continue;
        }
        let w = (if dx == 1 { r[0] } else { 1.0 - r[0] })
            * (if dy == 1 { r[1] } else { 1.0 - r[1] })
            * (if dz == 1 { r[2] } else { 1.0 - r[2] });
        let idx = (c[0] as usize * cells[1] + c[1] as usize) * cells[2] + c[2] as usize;
        *tap = Tap { index: idx as u32, weight: w };
    }
    taps
}

/// Trilinear sample of an occupancy volume at continuous cell coordinates.
pub fn trilinear_sample(volume: &OccupancyVolume, coord: [f64; 3]) -> f64 {
    trilinear_taps(coord, volume.spec.cells)
        .iter()
        .map(|t| t.weight * volume.logits[t.index as usize])
        .sum()
}
