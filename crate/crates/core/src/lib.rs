//! Monocular visual-inertial odometry with four trainable parameters.
//!
//! The pipeline filters pitch and roll from raw IMU data with an
//! unscented Kalman filter whose diagonal noise covariances are learned,
//! projects each front-camera frame onto a gravity-aligned metric
//! bird's-eye-view raster, and registers consecutive BEV frames with
//! Fourier-Mellin phase correlation to obtain the remaining 4-DoF motion.
//! Every stage is differentiable, so the filter covariances train
//! end-to-end from pose supervision alone.
//!
//! Modules:
//! - [`geom`]: shared geometric types and the attitude rotation.
//! - [`ukf`]: the trainable-noise attitude filter with exact parameter
//!   gradients.
//! - [`bev`]: ground-plane projection and differentiable remapping.
//! - [`phasecorr`]: FFT / log-polar / phase-correlation registration.
//! - [`train`]: the forward VIO function, KLD heatmap loss,
//!   finite-difference gradients and ADAM training.
//! - [`synth`]: synthetic planar scenes with exact ground truth.
//! - [`data`]: sequence ingestion and the on-disk layout.
//! - [`metrics`]: trajectory integration and relative error metrics.
//! - [`config`]: the flat key=value run configuration.

pub mod bev;
pub mod config;
pub mod data;
pub mod geom;
pub mod metrics;
pub mod phasecorr;
pub mod synth;
pub mod train;
pub mod ukf;

pub use geom::{Attitude, CameraIntrinsics, ImuSample, RigidTransform3, Sim2Pose};
pub use ukf::NoiseParams;
