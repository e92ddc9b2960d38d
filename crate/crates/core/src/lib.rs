pub mod config;
pub mod geometry;
pub mod labeling;
pub mod learner;
pub mod metrics;
pub mod numfmt;
pub mod proposer;
pub mod solver;
pub mod sim;
pub mod spatial;
pub mod store;

pub use geometry::{ObjectModel, PointCloud, Pose, Symmetry, Vec3};
