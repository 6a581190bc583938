//! Synthetic planar-scene sequences with exact ground truth.
//!
//! A seeded, band-limited value-noise texture is painted on the ground
//! plane and rendered through the same pinhole model the projection stage
//! uses. IMU data is simulated by differentiating the true attitude and
//! adding Gaussian noise and bias, so every generated quantity has an
//! exact reference.

use nalgebra::{Matrix3, Vector2, Vector3};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::bev::forward_camera_extrinsics;
use crate::geom::{
    rotation_from_attitude, wrap_angle, Attitude, CameraIntrinsics, ImuSample, RigidTransform3,
    Sim2Pose,
};
use crate::metrics::PlanarPose;
use crate::ukf::GRAVITY;

/// Ground-plane intensity field. `sample_filtered` returns the texture
/// averaged under a Gaussian footprint of standard deviation `sigma`
/// meters, which is what a camera pixel observes at grazing angles; the
/// default falls back to point sampling.
pub trait Texture: Sync {
    fn sample(&self, x: f64, y: f64) -> f64;

    fn sample_filtered(&self, x: f64, y: f64, _sigma: f64) -> f64 {
        self.sample(x, y)
    }
}

impl<F> Texture for F
where
    F: Fn(f64, f64) -> f64 + Sync,
{
    fn sample(&self, x: f64, y: f64) -> f64 {
        self(x, y)
    }
}

/// Seeded multi-octave value noise on the ground plane, values in [0, 1].
/// Smoothstep interpolation keeps it C1, so subpixel correlation and
/// bilinear resampling behave.
#[derive(Debug, Clone)]
pub struct GroundTexture {
    pub seed: u64,
    pub base_wavelength: f64,
    pub octaves: u32,
}

impl GroundTexture {
    pub fn new(seed: u64, base_wavelength: f64, octaves: u32) -> Self {
        Self { seed, base_wavelength, octaves }
    }

    fn accumulate(&self, x: f64, y: f64, sigma: f64) -> f64 {
        let mut total = 0.0;
        let mut amp = 1.0;
        let mut amp_sum = 0.0;
        let mut wavelength = self.base_wavelength;
        for oct in 0..self.octaves {
            let v = value_noise(x / wavelength, y / wavelength, self.seed ^ (oct as u64).wrapping_mul(0x9E37_79B9));
            // Gaussian-footprint attenuation of this octave's band; an
            // unattenuated octave beyond the footprint Nyquist would
            // alias into sampling-grid-locked artifacts.
            let atten = if sigma > 0.0 {
                let k = std::f64::consts::PI * sigma / wavelength;
                (-2.0 * k * k).exp()
            } else {
                1.0
            };
            total += amp * (0.5 + atten * (v - 0.5));
            amp_sum += amp;
            amp *= 0.5;
            wavelength *= 0.5;
        }
        total / amp_sum
    }
}

impl Texture for GroundTexture {
    fn sample(&self, x: f64, y: f64) -> f64 {
        self.accumulate(x, y, 0.0)
    }

    fn sample_filtered(&self, x: f64, y: f64, sigma: f64) -> f64 {
        self.accumulate(x, y, sigma)
    }
}

fn lattice_hash(ix: i64, iy: i64, seed: u64) -> f64 {
    let mut h = (ix as u64)
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (iy as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
        ^ seed.wrapping_mul(0x1656_67B1_9E37_79F9);
    h ^= h >> 30;
    h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94D0_49BB_1331_11EB);
    h ^= h >> 31;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn value_noise(x: f64, y: f64, seed: u64) -> f64 {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    // Smoothstep fade.
    let sx = fx * fx * (3.0 - 2.0 * fx);
    let sy = fy * fy * (3.0 - 2.0 * fy);
    let ix = x0 as i64;
    let iy = y0 as i64;
    let a = lattice_hash(ix, iy, seed);
    let b = lattice_hash(ix + 1, iy, seed);
    let c = lattice_hash(ix, iy + 1, seed);
    let d = lattice_hash(ix + 1, iy + 1, seed);
    a * (1.0 - sx) * (1.0 - sy) + b * sx * (1.0 - sy) + c * (1.0 - sx) * sy + d * sx * sy
}

/// Deterministic standard-normal sampler (Box-Muller over ChaCha).
pub struct GaussianSampler {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl GaussianSampler {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed), spare: None }
    }

    pub fn next(&mut self) -> f64 {
        if let Some(s) = self.spare.take() {
            return s;
        }
        let u1: f64 = self.rng.gen_range(1e-300..1.0);
        let u2: f64 = self.rng.gen_range(0.0..1.0);
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (2.0 * std::f64::consts::PI * u2).sin_cos();
        self.spare = Some(r * s);
        r * c
    }
}

/// Planar trajectory shape; speed is constant along the path.
#[derive(Debug, Clone)]
pub enum TrajectorySpec {
    /// Straight line along +x.
    Line { speed: f64 },
    /// Constant-curvature arc (positive yaw rate turns left).
    Arc { speed: f64, yaw_rate: f64 },
    /// Piecewise-linear path through waypoints, starting at the first.
    Waypoints { points: Vec<Vector2<f64>>, speed: f64 },
}

impl TrajectorySpec {
    /// Planar pose (x, y, yaw) at time `t`.
    pub fn pose_at(&self, t: f64) -> (Vector2<f64>, f64) {
        match self {
            TrajectorySpec::Line { speed } => (Vector2::new(speed * t, 0.0), 0.0),
            TrajectorySpec::Arc { speed, yaw_rate } => {
                if yaw_rate.abs() < 1e-12 {
                    return (Vector2::new(speed * t, 0.0), 0.0);
                }
                let yaw = yaw_rate * t;
                let r = speed / yaw_rate;
                (Vector2::new(r * yaw.sin(), r * (1.0 - yaw.cos())), wrap_angle(yaw))
            }
            TrajectorySpec::Waypoints { points, speed } => {
                assert!(points.len() >= 2, "waypoint trajectory needs at least two points");
                let mut remaining = speed * t;
                for w in points.windows(2) {
                    let seg = w[1] - w[0];
                    let len = seg.norm();
                    if remaining <= len {
                        let dir = seg / len;
                        return (w[0] + dir * remaining, dir.y.atan2(dir.x));
                    }
                    remaining -= len;
                }
                // Past the last waypoint: continue along the final heading.
                let w = &points[points.len() - 2..];
                let seg = w[1] - w[0];
                let dir = seg / seg.norm();
                (w[1] + dir * remaining, dir.y.atan2(dir.x))
            }
        }
    }
}

/// Configuration of a synthetic sequence.
#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub trajectory: TrajectorySpec,
    pub duration_s: f64,
    pub imu_rate: f64,
    pub camera_rate: f64,
    /// Gyroscope noise, rad/s (1 sigma).
    pub gyro_sigma: f64,
    /// Accelerometer noise, m/s^2 (1 sigma).
    pub accel_sigma: f64,
    /// Constant gyroscope bias, rad/s, applied to both rate channels.
    pub gyro_bias: f64,
    /// Road-bump attitude disturbance: amplitudes (rad) and base frequency (Hz).
    pub bump_amp_pitch: f64,
    pub bump_amp_roll: f64,
    pub bump_freq: f64,
    pub texture_seed: u64,
    pub texture_base_wavelength: f64,
    pub texture_octaves: u32,
    pub noise_seed: u64,
    pub intrinsics: CameraIntrinsics,
    pub const_z: f64,
    pub cam_from_imu: RigidTransform3,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            trajectory: TrajectorySpec::Line { speed: 2.0 },
            duration_s: 10.0,
            imu_rate: 100.0,
            camera_rate: 10.0,
            gyro_sigma: 0.0,
            accel_sigma: 0.0,
            gyro_bias: 0.0,
            bump_amp_pitch: 0.0,
            bump_amp_roll: 0.0,
            bump_freq: 0.9,
            texture_seed: 7,
            texture_base_wavelength: 4.0,
            texture_octaves: 4,
            noise_seed: 1,
            intrinsics: CameraIntrinsics {
                fx: 250.0,
                fy: 250.0,
                cx: 320.0,
                cy: 240.0,
                width: 640,
                height: 480,
            },
            const_z: 1.5,
            cam_from_imu: forward_camera_extrinsics(),
        }
    }
}

impl SynthConfig {
    pub fn is_valid(&self) -> bool {
        self.imu_rate > 0.0
            && self.camera_rate > 0.0
            && self.imu_rate >= self.camera_rate
            && self.gyro_sigma >= 0.0
            && self.accel_sigma >= 0.0
            && self.duration_s > 0.0
    }

    /// True attitude at time `t` (road-bump disturbance).
    pub fn attitude_at(&self, t: f64) -> Attitude {
        let wp = 2.0 * std::f64::consts::PI * self.bump_freq;
        let wr = 2.0 * std::f64::consts::PI * self.bump_freq * 0.777;
        Attitude::new(self.bump_amp_pitch * (wp * t).sin(), self.bump_amp_roll * (wr * t + 1.3).sin())
    }

    /// Analytic attitude rates at time `t`.
    pub fn attitude_rates_at(&self, t: f64) -> (f64, f64) {
        let wp = 2.0 * std::f64::consts::PI * self.bump_freq;
        let wr = 2.0 * std::f64::consts::PI * self.bump_freq * 0.777;
        (self.bump_amp_pitch * wp * (wp * t).cos(), self.bump_amp_roll * wr * (wr * t + 1.3).cos())
    }
}

/// Noise-free specific force for a given attitude: inverts the
/// accelerometer pitch/roll measurement exactly.
pub fn accel_for_attitude(att: &Attitude) -> Vector3<f64> {
    let (sa, ca) = att.pitch.sin_cos();
    let (sb, cb) = att.roll.sin_cos();
    Vector3::new(GRAVITY * sa * cb, -GRAVITY * sb, GRAVITY * ca * cb)
}

fn yaw_rotation(yaw: f64) -> Matrix3<f64> {
    let (s, c) = yaw.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Render the ground plane through a pinhole camera at an arbitrary world
/// pose. Each pixel samples the texture under its projected ground
/// footprint; rays above the horizon return 0.
pub fn render_ground_view<T>(
    texture: &T,
    intr: &CameraIntrinsics,
    cam_to_world: &RigidTransform3,
) -> Array2<f64>
where
    T: Texture,
{
    let focal = intr.fx.min(intr.fy);
    let mut img = Array2::zeros((intr.height, intr.width));
    let rows: Vec<(usize, Vec<f64>)> = (0..intr.height)
        .into_par_iter()
        .map(|v| {
            let mut row = vec![0.0; intr.width];
            for (u, out) in row.iter_mut().enumerate() {
                let dir_cam = Vector3::new(
                    (u as f64 - intr.cx) / intr.fx,
                    (v as f64 - intr.cy) / intr.fy,
                    1.0,
                );
                let dir = cam_to_world.rotation * dir_cam;
                if dir.z >= -1e-9 {
                    continue; // above the horizon
                }
                let lambda = -cam_to_world.translation.z / dir.z;
                let p = cam_to_world.translation + lambda * dir;
                // Ground length covered by one pixel: range times the
                // pixel's angular size, stretched by the grazing angle.
                let footprint = lambda * dir.norm_squared() / (focal * dir.z.abs());
                *out = texture.sample_filtered(p.x, p.y, 0.5 * footprint);
            }
            (v, row)
        })
        .collect();
    for (v, row) in rows {
        for (u, val) in row.into_iter().enumerate() {
            img[(v, u)] = val;
        }
    }
    img
}

/// World pose of the camera for a planar vehicle pose plus attitude.
pub fn camera_pose_world(
    planar: &PlanarPose,
    att: &Attitude,
    const_z: f64,
    cam_from_imu: &RigidTransform3,
) -> RigidTransform3 {
    let r_vehicle = yaw_rotation(planar.yaw) * rotation_from_attitude(att);
    let imu_from_cam = cam_from_imu.inverse();
    RigidTransform3::new(
        r_vehicle * imu_from_cam.rotation,
        r_vehicle * imu_from_cam.translation + Vector3::new(planar.x, planar.y, const_z),
    )
}

/// A fully synthetic sequence: rendered frames, simulated IMU, exact
/// ground truth.
#[derive(Debug, Clone)]
pub struct SyntheticSequence {
    /// (timestamp, grayscale frame) pairs.
    pub frames: Vec<(f64, Array2<f64>)>,
    pub imu: Vec<ImuSample>,
    /// Exact relative planar pose between consecutive frames.
    pub gt_relative: Vec<Sim2Pose>,
    /// Exact absolute planar pose per frame.
    pub gt_absolute: Vec<PlanarPose>,
    /// True attitude at every IMU timestamp.
    pub gt_attitude: Vec<(f64, Attitude)>,
    pub intrinsics: CameraIntrinsics,
    pub const_z: f64,
    pub cam_from_imu: RigidTransform3,
}

/// Generate a synthetic sequence. Deterministic for a fixed config.
pub fn generate_synthetic(cfg: &SynthConfig) -> SyntheticSequence {
    assert!(cfg.is_valid(), "invalid synthetic-sequence config");
    let texture = GroundTexture::new(cfg.texture_seed, cfg.texture_base_wavelength, cfg.texture_octaves);

    let imu_dt = 1.0 / cfg.imu_rate;
    let imu_count = (cfg.duration_s * cfg.imu_rate).round() as usize + 1;
    let mut sampler = GaussianSampler::new(cfg.noise_seed);
    let mut imu = Vec::with_capacity(imu_count);
    let mut gt_attitude = Vec::with_capacity(imu_count);
    for i in 0..imu_count {
        let t = i as f64 * imu_dt;
        let att = cfg.attitude_at(t);
        let (dp, dr) = cfg.attitude_rates_at(t);
        let mut accel = accel_for_attitude(&att);
        for a in accel.iter_mut() {
            *a += cfg.accel_sigma * sampler.next();
        }
        imu.push(ImuSample {
            timestamp: t,
            gyro_pitch_rate: dp + cfg.gyro_bias + cfg.gyro_sigma * sampler.next(),
            gyro_roll_rate: dr + cfg.gyro_bias + cfg.gyro_sigma * sampler.next(),
            accel,
        });
        gt_attitude.push((t, att));
    }

    let cam_dt = 1.0 / cfg.camera_rate;
    let frame_count = (cfg.duration_s * cfg.camera_rate).round() as usize + 1;
    let mut gt_absolute = Vec::with_capacity(frame_count);
    for i in 0..frame_count {
        let t = i as f64 * cam_dt;
        let (pos, yaw) = cfg.trajectory.pose_at(t);
        gt_absolute.push(PlanarPose { timestamp: t, x: pos.x, y: pos.y, yaw });
    }

    let frames: Vec<(f64, Array2<f64>)> = gt_absolute
        .par_iter()
        .map(|pose| {
            let att = cfg.attitude_at(pose.timestamp);
            let cam = camera_pose_world(pose, &att, cfg.const_z, &cfg.cam_from_imu);
            (pose.timestamp, render_ground_view(&texture, &cfg.intrinsics, &cam))
        })
        .collect();

    let gt_relative = gt_absolute
        .windows(2)
        .map(|w| w[0].relative_to(&w[1]))
        .collect();

    SyntheticSequence {
        frames,
        imu,
        gt_relative,
        gt_absolute,
        gt_attitude,
        intrinsics: cfg.intrinsics,
        const_z: cfg.const_z,
        cam_from_imu: cfg.cam_from_imu,
    }
}
