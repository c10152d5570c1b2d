//! Desk-scale visual point cloud forecasting.
//!
//! The pipeline turns a short history of multi-view images into bird's-eye-view
//! (BEV) features, re-shapes them into geometric features with a latent
//! rendering operator, rolls an ego-conditioned decoder forward in time, and
//! reads future point clouds out of the predicted occupancy volumes. Synthetic
//! box worlds with an exact simulated LiDAR provide ground truth, so every
//! stage is testable against closed forms or brute-force oracles.

pub mod config;
pub mod eval;
pub mod grid;
pub mod latent;
pub mod model;
pub mod params;
pub mod render;
pub mod scenes;
pub mod train;
