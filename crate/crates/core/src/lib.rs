//! Visuotactile 6D in-hand object pose estimation: a procedural
//! simulator, a small reverse-mode autodiff engine and a dense-fusion
//! network trained on RGB-D plus tactile contact points.

pub mod config;
pub mod dataset;
pub mod evaluation;
pub mod fusionnet;
pub mod geometry;
pub mod simworld;
pub mod tensor;
pub mod training;

pub use geometry::{PointCloud, Pose, Vec3};
pub use tensor::{ParamStore, Tape, Tensor, Var};
