//! Flat key=value run configuration.
//!
//! One text file configures every stage. Keys are dotted, values are
//! scalars (or a waypoint list), `#` starts a comment. Parsing fails with
//! a line-numbered error and unknown keys are rejected by name.

use std::path::Path;

use nalgebra::Vector2;
use thiserror::Error;

use crate::bev::{forward_camera_extrinsics, BevConfig, BevError, PixelRect};
use crate::data::Calibration;
use crate::geom::CameraIntrinsics;
use crate::phasecorr::{DpcConfig, HeatmapFormat};
use crate::synth::{SynthConfig, TrajectorySpec};
use crate::train::{AttitudeMode, PipelineConfig, TrainOptions};
use crate::ukf::UkfConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config line {line}: unknown key '{key}'")]
    UnknownKey { line: usize, key: String },
    #[error("config line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Bev(#[from] BevError),
}

/// All tunables with their defaults. Field names mirror the config keys.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: usize,

    pub bev_extent_x: f64,
    pub bev_extent_y: f64,
    pub bev_resolution: usize,
    pub bev_forward_offset: f64,
    /// ROI corners; -1 selects the automatic lower-half-of-image ROI.
    pub bev_roi: [i64; 4],

    pub dpc_temperature: f64,
    pub dpc_radial_bins: usize,
    pub dpc_angular_bins: usize,
    pub dpc_highpass_radius: f64,
    pub dpc_taper_frac: f64,
    pub dpc_expectation_radius: usize,
    pub dpc_mask_feather_px: f64,
    pub dpc_lowpass_sigma_frac: f64,
    pub dpc_heatmap_format: HeatmapFormat,

    pub ukf_alpha: f64,
    pub ukf_beta: f64,
    pub ukf_kappa: f64,
    pub ukf_init_var: f64,
    pub ukf_accel_gate: f64,
    pub ukf_warmup_s: f64,

    pub train_lr: f64,
    pub train_batch_size: usize,
    pub train_blur_sigma: f64,
    pub train_fd_step: f64,
    pub train_epochs: usize,
    /// Keep every n-th frame pair when building the training set.
    pub train_subsample: usize,
    pub train_init_log_o: f64,
    pub train_init_log_q: f64,

    pub synth_trajectory: String,
    pub synth_speed: f64,
    pub synth_yaw_rate: f64,
    pub synth_waypoints: Vec<Vector2<f64>>,
    pub synth_duration_s: f64,
    pub synth_imu_rate: f64,
    pub synth_camera_rate: f64,
    pub synth_gyro_sigma: f64,
    pub synth_accel_sigma: f64,
    pub synth_gyro_bias: f64,
    pub synth_bump_amp_pitch: f64,
    pub synth_bump_amp_roll: f64,
    pub synth_bump_freq: f64,
    pub synth_texture_seed: u64,
    pub synth_texture_base_wavelength: f64,
    pub synth_texture_octaves: u32,
    pub synth_noise_seed: u64,
    pub synth_width: usize,
    pub synth_height: usize,
    pub synth_fx: f64,
    pub synth_fy: f64,
    pub synth_cx: f64,
    pub synth_cy: f64,
    pub synth_const_z: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 0,
            bev_extent_x: 20.0,
            bev_extent_y: 20.0,
            bev_resolution: 256,
            bev_forward_offset: 2.0,
            bev_roi: [-1; 4],
            dpc_temperature: 0.05,
            dpc_radial_bins: 256,
            dpc_angular_bins: 256,
            dpc_highpass_radius: 8.0,
            dpc_taper_frac: 0.125,
            dpc_expectation_radius: 9,
            dpc_mask_feather_px: 4.0,
            dpc_lowpass_sigma_frac: 0.25,
            dpc_heatmap_format: HeatmapFormat::Ascii,
            ukf_alpha: 1e-3,
            ukf_beta: 2.0,
            ukf_kappa: 0.0,
            ukf_init_var: 1e-2,
            ukf_accel_gate: 0.0,
            ukf_warmup_s: 1.0,
            train_lr: 1e-2,
            train_batch_size: 8,
            train_blur_sigma: 2.0,
            train_fd_step: 1e-3,
            train_epochs: 50,
            train_subsample: 1,
            train_init_log_o: (1e-4f64).ln(),
            train_init_log_q: (1e-2f64).ln(),
            synth_trajectory: "line".into(),
            synth_speed: 2.0,
            synth_yaw_rate: 0.0,
            synth_waypoints: Vec::new(),
            synth_duration_s: 10.0,
            synth_imu_rate: 100.0,
            synth_camera_rate: 10.0,
            synth_gyro_sigma: 0.0,
            synth_accel_sigma: 0.0,
            synth_gyro_bias: 0.0,
            synth_bump_amp_pitch: 0.0,
            synth_bump_amp_roll: 0.0,
            synth_bump_freq: 0.9,
            synth_texture_seed: 7,
            synth_texture_base_wavelength: 4.0,
            synth_texture_octaves: 4,
            synth_noise_seed: 1,
            synth_width: 640,
            synth_height: 480,
            synth_fx: 250.0,
            synth_fy: 250.0,
            synth_cx: -1.0,
            synth_cy: -1.0,
            synth_const_z: 1.5,
        }
    }
}

/// (key, default, description) for every config key; rendered into
/// `--help` and the README.
pub const KEY_DOCS: &[(&str, &str, &str)] = &[
    ("seed", "0", "global RNG seed (shuffling, synthetic noise)"),
    ("threads", "0", "worker threads; 0 uses all cores"),
    ("bev.extent_x", "20.0", "BEV patch width, meters"),
    ("bev.extent_y", "20.0", "BEV patch depth, meters (must equal extent_x)"),
    ("bev.resolution", "256", "BEV pixels per side (power of two)"),
    ("bev.forward_offset", "2.0", "near patch edge ahead of the camera, meters"),
    ("bev.roi_u0", "-1", "front-image ROI left edge; -1 = auto (lower half)"),
    ("bev.roi_v0", "-1", "front-image ROI top edge; -1 = auto"),
    ("bev.roi_u1", "-1", "front-image ROI right edge (exclusive); -1 = auto"),
    ("bev.roi_v1", "-1", "front-image ROI bottom edge (exclusive); -1 = auto"),
    ("dpc.temperature", "0.05", "softmax temperature on correlation surfaces"),
    ("dpc.radial_bins", "256", "log-polar radial bins"),
    ("dpc.angular_bins", "256", "log-polar angular bins over [0, pi)"),
    ("dpc.highpass_radius", "8.0", "radial high-pass knee in spectrum pixels; 0 disables"),
    ("dpc.taper_frac", "0.125", "raised-cosine border fraction before FFTs"),
    ("dpc.expectation_radius", "9", "half-width of the subpixel expectation window"),
    ("dpc.mask_feather_px", "4.0", "feather width of the BEV validity-mask window, pixels"),
    ("dpc.lowpass_sigma_frac", "0.25", "Gaussian low-pass sigma on the cross-power, as a fraction of the side; 0 disables"),
    ("dpc.heatmap_format", "ascii", "heatmap dump encoding: ascii | binary"),
    ("ukf.alpha", "0.001", "sigma-point spread"),
    ("ukf.beta", "2.0", "sigma-point prior weight (2 is Gaussian-optimal)"),
    ("ukf.kappa", "0.0", "secondary sigma-point scaling"),
    ("ukf.init_var", "0.01", "initial attitude variance, rad^2"),
    ("ukf.accel_gate", "0.0", "skip updates when | |a|-g | exceeds this; 0 = off"),
    ("ukf.warmup_s", "1.0", "IMU lead-in before each frame pair, seconds"),
    ("train.lr", "0.01", "ADAM learning rate on the log-parameters"),
    ("train.batch_size", "8", "samples per gradient step"),
    ("train.blur_sigma", "2.0", "target Gaussian blur, bins"),
    ("train.fd_step", "0.001", "central finite-difference step in log-space"),
    ("train.epochs", "50", "training epochs"),
    ("train.subsample", "1", "keep every n-th frame pair for training"),
    ("train.init_log_o", "ln(1e-4)", "initial motion-noise log-variance"),
    ("train.init_log_q", "ln(1e-2)", "initial measurement-noise log-variance"),
    ("synth.trajectory", "line", "trajectory shape: line | arc | waypoints"),
    ("synth.speed", "2.0", "vehicle speed, m/s"),
    ("synth.yaw_rate", "0.0", "arc yaw rate, rad/s (arc trajectory)"),
    ("synth.waypoints", "", "semicolon-separated x,y pairs (waypoints trajectory)"),
    ("synth.duration_s", "10.0", "sequence duration, seconds"),
    ("synth.imu_rate", "100.0", "IMU rate, Hz"),
    ("synth.camera_rate", "10.0", "camera rate, Hz"),
    ("synth.gyro_sigma", "0.0", "gyro noise, rad/s"),
    ("synth.accel_sigma", "0.0", "accelerometer noise, m/s^2"),
    ("synth.gyro_bias", "0.0", "constant gyro bias, rad/s"),
    ("synth.bump_amp_pitch", "0.0", "road-bump pitch amplitude, rad"),
    ("synth.bump_amp_roll", "0.0", "road-bump roll amplitude, rad"),
    ("synth.bump_freq", "0.9", "road-bump base frequency, Hz"),
    ("synth.texture_seed", "7", "ground texture seed"),
    ("synth.texture_base_wavelength", "4.0", "coarsest texture wavelength, meters"),
    ("synth.texture_octaves", "4", "texture octaves"),
    ("synth.noise_seed", "1", "IMU noise seed"),
    ("synth.width", "640", "front image width"),
    ("synth.height", "480", "front image height"),
    ("synth.fx", "250.0", "focal length x, pixels"),
    ("synth.fy", "250.0", "focal length y, pixels"),
    ("synth.cx", "-1", "principal point x; -1 = width/2"),
    ("synth.cy", "-1", "principal point y; -1 = height/2"),
    ("synth.const_z", "1.5", "camera/IMU height above ground, meters"),
];

/// Render the key table for command-line help.
pub fn key_documentation() -> String {
    let mut out = String::from("Configuration keys (key = value per line, '#' comments):\n");
    for (key, default, desc) in KEY_DOCS {
        out.push_str(&format!("  {key:<32} default {default:<10} {desc}\n"));
    }
    out
}

impl RunConfig {
    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_str(&text)
    }

    pub fn parse_str(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let stripped = raw.split('#').next().unwrap_or("").trim();
            if stripped.is_empty() {
                continue;
            }
            let (key, value) = stripped.split_once('=').ok_or_else(|| ConfigError::Parse {
                line,
                reason: format!("expected 'key = value', got '{stripped}'"),
            })?;
            cfg.apply(key.trim(), value.trim(), line)?;
        }
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str, line: usize) -> Result<(), ConfigError> {
        fn parse<T: std::str::FromStr>(value: &str, line: usize) -> Result<T, ConfigError>
        where
            T::Err: std::fmt::Display,
        {
            value.parse::<T>().map_err(|e| ConfigError::Parse { line, reason: format!("'{value}': {e}") })
        }
        match key {
            "seed" => self.seed = parse(value, line)?,
            "threads" => self.threads = parse(value, line)?,
            "bev.extent_x" => self.bev_extent_x = parse(value, line)?,
            "bev.extent_y" => self.bev_extent_y = parse(value, line)?,
            "bev.resolution" => self.bev_resolution = parse(value, line)?,
            "bev.forward_offset" => self.bev_forward_offset = parse(value, line)?,
            "bev.roi_u0" => self.bev_roi[0] = parse(value, line)?,
            "bev.roi_v0" => self.bev_roi[1] = parse(value, line)?,
            "bev.roi_u1" => self.bev_roi[2] = parse(value, line)?,
            "bev.roi_v1" => self.bev_roi[3] = parse(value, line)?,
            "dpc.temperature" => self.dpc_temperature = parse(value, line)?,
            "dpc.radial_bins" => self.dpc_radial_bins = parse(value, line)?,
            "dpc.angular_bins" => self.dpc_angular_bins = parse(value, line)?,
            "dpc.highpass_radius" => self.dpc_highpass_radius = parse(value, line)?,
            "dpc.taper_frac" => self.dpc_taper_frac = parse(value, line)?,
            "dpc.expectation_radius" => self.dpc_expectation_radius = parse(value, line)?,
            "dpc.mask_feather_px" => self.dpc_mask_feather_px = parse(value, line)?,
            "dpc.lowpass_sigma_frac" => self.dpc_lowpass_sigma_frac = parse(value, line)?,
            "dpc.heatmap_format" => {
                self.dpc_heatmap_format = match value {
                    "ascii" => HeatmapFormat::Ascii,
                    "binary" => HeatmapFormat::BinaryF32,
                    other => {
                        return Err(ConfigError::Parse {
                            line,
                            reason: format!("'{other}' is not 'ascii' or 'binary'"),
                        })
                    }
                }
            }
            "ukf.alpha" => self.ukf_alpha = parse(value, line)?,
            "ukf.beta" => self.ukf_beta = parse(value, line)?,
            "ukf.kappa" => self.ukf_kappa = parse(value, line)?,
            "ukf.init_var" => self.ukf_init_var = parse(value, line)?,
            "ukf.accel_gate" => self.ukf_accel_gate = parse(value, line)?,
            "ukf.warmup_s" => self.ukf_warmup_s = parse(value, line)?,
            "train.lr" => self.train_lr = parse(value, line)?,
            "train.batch_size" => self.train_batch_size = parse(value, line)?,
            "train.blur_sigma" => self.train_blur_sigma = parse(value, line)?,
            "train.fd_step" => self.train_fd_step = parse(value, line)?,
            "train.epochs" => self.train_epochs = parse(value, line)?,
            "train.subsample" => self.train_subsample = parse(value, line)?,
            "train.init_log_o" => self.train_init_log_o = parse(value, line)?,
            "train.init_log_q" => self.train_init_log_q = parse(value, line)?,
            "synth.trajectory" => self.synth_trajectory = value.to_string(),
            "synth.speed" => self.synth_speed = parse(value, line)?,
            "synth.yaw_rate" => self.synth_yaw_rate = parse(value, line)?,
            "synth.waypoints" => {
                let mut pts = Vec::new();
                for pair in value.split(';').filter(|p| !p.trim().is_empty()) {
                    let (x, y) = pair.split_once(',').ok_or_else(|| ConfigError::Parse {
                        line,
                        reason: format!("waypoint '{pair}' is not 'x,y'"),
                    })?;
                    pts.push(Vector2::new(parse(x.trim(), line)?, parse(y.trim(), line)?));
                }
                self.synth_waypoints = pts;
            }
            "synth.duration_s" => self.synth_duration_s = parse(value, line)?,
            "synth.imu_rate" => self.synth_imu_rate = parse(value, line)?,
            "synth.camera_rate" => self.synth_camera_rate = parse(value, line)?,
            "synth.gyro_sigma" => self.synth_gyro_sigma = parse(value, line)?,
            "synth.accel_sigma" => self.synth_accel_sigma = parse(value, line)?,
            "synth.gyro_bias" => self.synth_gyro_bias = parse(value, line)?,
            "synth.bump_amp_pitch" => self.synth_bump_amp_pitch = parse(value, line)?,
            "synth.bump_amp_roll" => self.synth_bump_amp_roll = parse(value, line)?,
            "synth.bump_freq" => self.synth_bump_freq = parse(value, line)?,
            "synth.texture_seed" => self.synth_texture_seed = parse(value, line)?,
            "synth.texture_base_wavelength" => self.synth_texture_base_wavelength = parse(value, line)?,
            "synth.texture_octaves" => self.synth_texture_octaves = parse(value, line)?,
            "synth.noise_seed" => self.synth_noise_seed = parse(value, line)?,
            "synth.width" => self.synth_width = parse(value, line)?,
            "synth.height" => self.synth_height = parse(value, line)?,
            "synth.fx" => self.synth_fx = parse(value, line)?,
            "synth.fy" => self.synth_fy = parse(value, line)?,
            "synth.cx" => self.synth_cx = parse(value, line)?,
            "synth.cy" => self.synth_cy = parse(value, line)?,
            "synth.const_z" => self.synth_const_z = parse(value, line)?,
            other => return Err(ConfigError::UnknownKey { line, key: other.to_string() }),
        }
        Ok(())
    }

    /// Synthetic-sequence config from the `synth.*` keys.
    pub fn synth_config(&self) -> Result<SynthConfig, ConfigError> {
        let trajectory = match self.synth_trajectory.as_str() {
            "line" => TrajectorySpec::Line { speed: self.synth_speed },
            "arc" => TrajectorySpec::Arc { speed: self.synth_speed, yaw_rate: self.synth_yaw_rate },
            "waypoints" => {
                if self.synth_waypoints.len() < 2 {
                    return Err(ConfigError::Parse {
                        line: 0,
                        reason: "synth.waypoints needs at least two points".into(),
                    });
                }
                TrajectorySpec::Waypoints { points: self.synth_waypoints.clone(), speed: self.synth_speed }
            }
            other => {
                return Err(ConfigError::Parse {
                    line: 0,
                    reason: format!("synth.trajectory '{other}' is not line/arc/waypoints"),
                })
            }
        };
        let cx = if self.synth_cx < 0.0 { self.synth_width as f64 / 2.0 } else { self.synth_cx };
        let cy = if self.synth_cy < 0.0 { self.synth_height as f64 / 2.0 } else { self.synth_cy };
        Ok(SynthConfig {
            trajectory,
            duration_s: self.synth_duration_s,
            imu_rate: self.synth_imu_rate,
            camera_rate: self.synth_camera_rate,
            gyro_sigma: self.synth_gyro_sigma,
            accel_sigma: self.synth_accel_sigma,
            gyro_bias: self.synth_gyro_bias,
            bump_amp_pitch: self.synth_bump_amp_pitch,
            bump_amp_roll: self.synth_bump_amp_roll,
            bump_freq: self.synth_bump_freq,
            texture_seed: self.synth_texture_seed,
            texture_base_wavelength: self.synth_texture_base_wavelength,
            texture_octaves: self.synth_texture_octaves,
            noise_seed: self.synth_noise_seed.wrapping_add(self.seed),
            intrinsics: CameraIntrinsics {
                fx: self.synth_fx,
                fy: self.synth_fy,
                cx,
                cy,
                width: self.synth_width,
                height: self.synth_height,
            },
            const_z: self.synth_const_z,
            cam_from_imu: forward_camera_extrinsics(),
        })
    }

    fn bev_config(&self, calib: &Calibration) -> Result<BevConfig, ConfigError> {
        let intr = calib.intrinsics;
        let roi = if self.bev_roi.iter().any(|v| *v < 0) {
            PixelRect::lower_half(&intr)
        } else {
            PixelRect {
                u0: self.bev_roi[0] as usize,
                v0: self.bev_roi[1] as usize,
                u1: self.bev_roi[2] as usize,
                v1: self.bev_roi[3] as usize,
            }
        };
        let cfg = BevConfig {
            extent_x: self.bev_extent_x,
            extent_y: self.bev_extent_y,
            resolution: self.bev_resolution,
            const_z: calib.const_z,
            forward_offset: self.bev_forward_offset,
            roi,
            cam_from_imu: calib.cam_from_imu,
        };
        cfg.validate(&intr)?;
        Ok(cfg)
    }

    /// Assemble the per-sequence pipeline configuration.
    pub fn pipeline(&self, calib: &Calibration, mode: AttitudeMode) -> Result<PipelineConfig, ConfigError> {
        Ok(PipelineConfig {
            intrinsics: calib.intrinsics,
            bev: self.bev_config(calib)?,
            dpc: DpcConfig {
                temperature: self.dpc_temperature,
                radial_bins: self.dpc_radial_bins,
                angular_bins: self.dpc_angular_bins,
                highpass_radius: self.dpc_highpass_radius,
                taper_frac: self.dpc_taper_frac,
                expectation_radius: self.dpc_expectation_radius,
                mask_feather_px: self.dpc_mask_feather_px,
                lowpass_sigma_frac: self.dpc_lowpass_sigma_frac,
            },
            ukf: UkfConfig {
                alpha: self.ukf_alpha,
                beta: self.ukf_beta,
                kappa: self.ukf_kappa,
                init_var: self.ukf_init_var,
                accel_gate: self.ukf_accel_gate,
            },
            attitude_mode: mode,
        })
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            epochs: self.train_epochs,
            batch_size: self.train_batch_size,
            fd_step: self.train_fd_step,
            seed: self.seed,
            fix_o: false,
            fix_q: false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_from_empty_text() {
        let cfg = RunConfig::parse_str("").unwrap();
        assert_eq!(cfg.bev_resolution, 256);
        assert_eq!(cfg.dpc_temperature, 0.05);
    }

    #[test]
    fn keys_apply_with_comments() {
        let text = "\n# comment\nbev.resolution = 128\ndpc.temperature = 0.1  # inline\nsynth.waypoints = 0,0; 5,0; 5,5\n";
        let cfg = RunConfig::parse_str(text).unwrap();
        assert_eq!(cfg.bev_resolution, 128);
        assert_eq!(cfg.dpc_temperature, 0.1);
        assert_eq!(cfg.synth_waypoints.len(), 3);
    }

    #[test]
    fn unknown_key_is_reported_with_line_and_name() {
        let err = RunConfig::parse_str("seed = 1\nbev.resolutoin = 128\n").unwrap_err();
        match err {
            ConfigError::UnknownKey { line, key } => {
                assert_eq!(line, 2);
                assert_eq!(key, "bev.resolutoin");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn bad_value_is_reported_with_line() {
        let err = RunConfig::parse_str("ukf.alpha = not_a_number\n").unwrap_err();
        assert!(matches!(err, ConfigError::Parse { line: 1, .. }));
    }

    #[test]
    fn every_documented_key_is_accepted() {
        for (key, _, _) in KEY_DOCS {
            let probe = match *key {
                "synth.trajectory" => "synth.trajectory = arc".to_string(),
                "dpc.heatmap_format" => "dpc.heatmap_format = binary".to_string(),
                "synth.waypoints" => "synth.waypoints = 0,0;1,1".to_string(),
                k => format!("{k} = 1"),
            };
            RunConfig::parse_str(&probe).unwrap_or_else(|e| panic!("key '{key}' rejected: {e}"));
        }
    }
}
