pub mod bundle;
pub mod config;
pub mod dataset;
pub mod error;
pub mod geometry;
pub mod kdtree;
pub mod linalg;
pub mod localize;
pub mod pipeline;
pub mod pointcloud;
pub mod posegraph;
pub mod simulator;
pub mod spline;
pub mod textio;

pub use error::{Error, Result};
pub use geometry::{generalized_minus, CameraIntrinsics, RigExtrinsic, Se3Pose, Twist};
pub use spline::Se3Spline;
