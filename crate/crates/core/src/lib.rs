pub mod calib;
pub mod cloud;
pub mod descriptors;
pub mod eval;
pub mod geometry;
pub mod keypoints;
pub mod localize;
pub mod mapdb;
pub mod params;
pub mod pipeline;
pub mod registration;
pub mod scenario;
pub mod spatial;
pub mod synth;
pub mod voting;
