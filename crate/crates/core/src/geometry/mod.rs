//! Rigid transforms, point clouds and parametric object models.
//!
//! Units are millimeters and degrees throughout.

mod cloud;
mod model;
pub mod ply;
mod pose;

pub use cloud::{transform_points, PointCloud};
pub use model::{
    farthest_point_sampling, sample_cylinder_model, ObjectModel, Symmetry, DEFAULT_KEYPOINTS, DEFAULT_MODEL_POINTS,
    MIN_MODEL_POINTS,
};
pub use pose::{
    angle_between_deg, angular_error_z, compose, flip_y, invert, random_perturbation, random_unit_vector,
    rotation_between, rotation_geodesic, Pose, Vec3,
};

#[derive(Debug, thiserror::Error)]
pub enum GeometryError {
    #[error("cylinder dimensions must be positive (radius {radius}, height {height})")]
    NonPositiveDimension { radius: f64, height: f64 },
    #[error("model needs at least {min} points, got {0}", min = MIN_MODEL_POINTS)]
    TooFewPoints(usize),
    #[error("model coordinates must be finite")]
    NonFinite,
    #[error("model id must be non-empty without whitespace, got `{0}`")]
    InvalidId(String),
    #[error("{normals} normals supplied for {points} points")]
    NormalCount { points: usize, normals: usize },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
