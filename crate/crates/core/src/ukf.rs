//! Unscented Kalman filter over the 2D attitude state (pitch, roll).
//!
//! Process and measurement noise are diagonal and parameterized by four
//! log-variances, the only trainable parameters of the whole pipeline.
//! Every filter step also propagates forward-mode tangents with respect to
//! those four parameters, so query attitudes come with exact gradients.

use nalgebra::{Matrix2, Vector2, Vector3};
use thiserror::Error;

use crate::geom::{Attitude, ImuSample};

/// Standard gravity, m/s^2.
pub const GRAVITY: f64 = 9.80665;

/// State dimension (pitch, roll).
const N: usize = 2;
/// Number of trainable log-variance parameters.
pub const PARAM_COUNT: usize = 4;
/// Eigenvalue floor applied when repairing a posterior covariance.
const COV_EIG_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum UkfError {
    #[error("covariance is not positive definite")]
    NonPositiveDefinite,
    #[error("acceleration vector is degenerate, roll measurement undefined")]
    DegenerateAccel,
    #[error("IMU stream is empty")]
    EmptyStream,
    #[error("query time {query} outside IMU span [{start}, {end}]")]
    QueryOutOfRange { query: f64, start: f64, end: f64 },
}

/// The four trainable log-variances: diagonals of the motion-model noise
/// and the measurement-model noise. Parameter order everywhere is
/// `[log_o_pitch, log_o_roll, log_q_pitch, log_q_roll]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseParams {
    pub log_o_pitch: f64,
    pub log_o_roll: f64,
    pub log_q_pitch: f64,
    pub log_q_roll: f64,
}

impl NoiseParams {
    pub fn new(log_o_pitch: f64, log_o_roll: f64, log_q_pitch: f64, log_q_roll: f64) -> Self {
        Self { log_o_pitch, log_o_roll, log_q_pitch, log_q_roll }
    }

    pub fn as_array(&self) -> [f64; PARAM_COUNT] {
        [self.log_o_pitch, self.log_o_roll, self.log_q_pitch, self.log_q_roll]
    }

    pub fn from_array(a: [f64; PARAM_COUNT]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    /// Untrained baseline: hand-set variances of 1e-4 for the motion
    /// model and 1e-2 for the measurement model. Training starts here,
    /// and the fixed-covariance ablations keep these values.
    pub fn empirical() -> Self {
        Self::new((1e-4f64).ln(), (1e-4f64).ln(), (1e-2f64).ln(), (1e-2f64).ln())
    }

    pub fn is_valid(&self) -> bool {
        self.as_array().iter().all(|v| v.is_finite())
    }

    /// Motion-model noise covariance `O_t = diag(exp(log_o))`.
    pub fn motion_cov(&self) -> Matrix2<f64> {
        Matrix2::new(self.log_o_pitch.exp(), 0.0, 0.0, self.log_o_roll.exp())
    }

    /// Measurement-model noise covariance `Q_t = diag(exp(log_q))`.
    pub fn measurement_cov(&self) -> Matrix2<f64> {
        Matrix2::new(self.log_q_pitch.exp(), 0.0, 0.0, self.log_q_roll.exp())
    }
}

/// Gaussian belief over the attitude state.
#[derive(Debug, Clone, Copy)]
pub struct UkfBelief {
    pub mean: Attitude,
    pub covariance: Matrix2<f64>,
}

impl UkfBelief {
    pub fn new(mean: Attitude, covariance: Matrix2<f64>) -> Self {
        Self { mean, covariance }
    }

    /// Initial belief from the first accelerometer reading, with an
    /// isotropic covariance of `init_var`.
    pub fn from_first_measurement(sample: &ImuSample, init_var: f64) -> Result<Self, UkfError> {
        let z = accel_to_measurement(&sample.accel)?;
        Ok(Self::new(z, Matrix2::new(init_var, 0.0, 0.0, init_var)))
    }

    pub fn is_valid(&self) -> bool {
        let c = self.covariance;
        let sym = (c[(0, 1)] - c[(1, 0)]).abs() < 1e-12;
        sym && min_eigenvalue(&c) > 0.0
    }
}

/// Deterministic sample of the belief: the mean plus four symmetric points.
#[derive(Debug, Clone)]
pub struct SigmaPointSet {
    pub points: [Vector2<f64>; 2 * N + 1],
    pub mean_weights: [f64; 2 * N + 1],
    pub cov_weights: [f64; 2 * N + 1],
}

/// Filter configuration. The sigma-point scaling follows the scaled
/// unscented transform; `accel_gate` optionally skips measurement updates
/// when the acceleration magnitude deviates from gravity by more than the
/// gate (0 disables the gate).
#[derive(Debug, Clone, Copy)]
pub struct UkfConfig {
    pub alpha: f64,
    pub beta: f64,
    pub kappa: f64,
    pub init_var: f64,
    pub accel_gate: f64,
}

impl Default for UkfConfig {
    fn default() -> Self {
        Self { alpha: 1e-3, beta: 2.0, kappa: 0.0, init_var: 1e-2, accel_gate: 0.0 }
    }
}

impl UkfConfig {
    fn lambda(&self) -> f64 {
        self.alpha * self.alpha * (N as f64 + self.kappa) - N as f64
    }

    fn weights(&self) -> ([f64; 2 * N + 1], [f64; 2 * N + 1]) {
        let lambda = self.lambda();
        let denom = N as f64 + lambda;
        let wi = 1.0 / (2.0 * denom);
        let mut wm = [wi; 2 * N + 1];
        let mut wc = [wi; 2 * N + 1];
        wm[0] = lambda / denom;
        wc[0] = lambda / denom + (1.0 - self.alpha * self.alpha + self.beta);
        (wm, wc)
    }
}

fn min_eigenvalue(m: &Matrix2<f64>) -> f64 {
    let a = m[(0, 0)];
    let b = 0.5 * (m[(0, 1)] + m[(1, 0)]);
    let c = m[(1, 1)];
    let tr = a + c;
    let gap = ((a - c) * (a - c) + 4.0 * b * b).sqrt();
    0.5 * (tr - gap)
}

/// Belief with forward-mode tangents with respect to the four noise
/// parameters.
#[derive(Debug, Clone)]
struct TangentBelief {
    mean: Vector2<f64>,
    cov: Matrix2<f64>,
    d_mean: [Vector2<f64>; PARAM_COUNT],
    d_cov: [Matrix2<f64>; PARAM_COUNT],
}

impl TangentBelief {
    fn from_belief(b: &UkfBelief) -> Self {
        Self {
            mean: Vector2::new(b.mean.pitch, b.mean.roll),
            cov: b.covariance,
            d_mean: [Vector2::zeros(); PARAM_COUNT],
            d_cov: [Matrix2::zeros(); PARAM_COUNT],
        }
    }

    fn belief(&self) -> UkfBelief {
        UkfBelief::new(Attitude::new(self.mean.x, self.mean.y), self.cov)
    }
}

/// Lower Cholesky factor of a 2x2 SPD matrix, with tangents.
fn cholesky2(
    m: &Matrix2<f64>,
    dm: &[Matrix2<f64>; PARAM_COUNT],
) -> Result<(Matrix2<f64>, [Matrix2<f64>; PARAM_COUNT]), UkfError> {
    let a = m[(0, 0)];
    let b = 0.5 * (m[(0, 1)] + m[(1, 0)]);
    let c = m[(1, 1)];
    if !(a > 0.0) {
        return Err(UkfError::NonPositiveDefinite);
    }
    let l11 = a.sqrt();
    let l21 = b / l11;
    let rem = c - l21 * l21;
    if !(rem > 0.0) {
        return Err(UkfError::NonPositiveDefinite);
    }
    let l22 = rem.sqrt();
    let l = Matrix2::new(l11, 0.0, l21, l22);

    let mut dl = [Matrix2::zeros(); PARAM_COUNT];
    for k in 0..PARAM_COUNT {
        let da = dm[k][(0, 0)];
        let db = 0.5 * (dm[k][(0, 1)] + dm[k][(1, 0)]);
        let dc = dm[k][(1, 1)];
        let dl11 = da / (2.0 * l11);
        let dl21 = (db - l21 * dl11) / l11;
        let dl22 = (dc - 2.0 * l21 * dl21) / (2.0 * l22);
        dl[k] = Matrix2::new(dl11, 0.0, dl21, dl22);
    }
    Ok((l, dl))
}

type TangentPoints = ([Vector2<f64>; 2 * N + 1], [[Vector2<f64>; 2 * N + 1]; PARAM_COUNT]);

/// Sigma points of `(mean, cov)` scaled by `n + lambda`, with tangents.
fn sigma_points_t(cfg: &UkfConfig, bel: &TangentBelief) -> Result<TangentPoints, UkfError> {
    let scale = N as f64 + cfg.lambda();
    let scaled = bel.cov * scale;
    let d_scaled = bel.d_cov.map(|d| d * scale);
    let (l, dl) = cholesky2(&scaled, &d_scaled)?;

    let mut pts = [bel.mean; 2 * N + 1];
    let mut d_pts = [[Vector2::zeros(); 2 * N + 1]; PARAM_COUNT];
    for i in 0..N {
        let col = l.column(i).into_owned();
        pts[1 + i] = bel.mean + col;
        pts[1 + N + i] = bel.mean - col;
    }
    for k in 0..PARAM_COUNT {
        d_pts[k][0] = bel.d_mean[k];
        for i in 0..N {
            let dcol = dl[k].column(i).into_owned();
            d_pts[k][1 + i] = bel.d_mean[k] + dcol;
            d_pts[k][1 + N + i] = bel.d_mean[k] - dcol;
        }
    }
    Ok((pts, d_pts))
}

/// Weighted mean/covariance of a point set plus an additive noise term,
/// with tangents. `d_noise` is the derivative of the additive noise with
/// respect to each parameter.
fn moments_t(
    cfg: &UkfConfig,
    pts: &[Vector2<f64>; 2 * N + 1],
    d_pts: &[[Vector2<f64>; 2 * N + 1]; PARAM_COUNT],
    noise: &Matrix2<f64>,
    d_noise: &[Matrix2<f64>; PARAM_COUNT],
) -> TangentBelief {
    let (wm, wc) = cfg.weights();
    let mut mean = Vector2::zeros();
    for i in 0..pts.len() {
        mean += wm[i] * pts[i];
    }
    let mut d_mean = [Vector2::zeros(); PARAM_COUNT];
    for k in 0..PARAM_COUNT {
        for i in 0..pts.len() {
            d_mean[k] += wm[i] * d_pts[k][i];
        }
    }
    let mut cov = *noise;
    for i in 0..pts.len() {
        let d = pts[i] - mean;
        cov += wc[i] * d * d.transpose();
    }
    let mut d_cov = *d_noise;
    for k in 0..PARAM_COUNT {
        for i in 0..pts.len() {
            let d = pts[i] - mean;
            let dd = d_pts[k][i] - d_mean[k];
            d_cov[k] += wc[i] * (dd * d.transpose() + d * dd.transpose());
        }
    }
    TangentBelief { mean, cov, d_mean, d_cov }
}

fn predict_t(
    cfg: &UkfConfig,
    bel: &TangentBelief,
    gyro_pitch_rate: f64,
    gyro_roll_rate: f64,
    dt: f64,
    noise: &NoiseParams,
) -> Result<TangentBelief, UkfError> {
    let (mut pts, d_pts) = sigma_points_t(cfg, bel)?;
    let shift = Vector2::new(gyro_pitch_rate * dt, gyro_roll_rate * dt);
    for p in pts.iter_mut() {
        *p += shift;
    }
    let o = noise.motion_cov();
    let mut d_o = [Matrix2::zeros(); PARAM_COUNT];
    d_o[0][(0, 0)] = o[(0, 0)];
    d_o[1][(1, 1)] = o[(1, 1)];
    Ok(moments_t(cfg, &pts, &d_pts, &o, &d_o))
}

fn update_t(
    cfg: &UkfConfig,
    predicted: &TangentBelief,
    z: &Vector2<f64>,
    noise: &NoiseParams,
) -> Result<TangentBelief, UkfError> {
    // Resampling of the predicted belief, realized deterministically.
    let (pts, d_pts) = sigma_points_t(cfg, predicted)?;

    // Measurement model is identity on the state, so the predicted
    // measurement points coincide with the state points.
    let q = noise.measurement_cov();
    let mut d_q = [Matrix2::zeros(); PARAM_COUNT];
    d_q[2][(0, 0)] = q[(0, 0)];
    d_q[3][(1, 1)] = q[(1, 1)];
    let meas = moments_t(cfg, &pts, &d_pts, &q, &d_q);

    // Cross covariance between state and measurement points.
    let (_, wc) = cfg.weights();
    let mut cross = Matrix2::zeros();
    for i in 0..pts.len() {
        let dx = pts[i] - predicted.mean;
        let dz = pts[i] - meas.mean;
        cross += wc[i] * dx * dz.transpose();
    }
    let mut d_cross = [Matrix2::zeros(); PARAM_COUNT];
    for k in 0..PARAM_COUNT {
        for i in 0..pts.len() {
            let dx = pts[i] - predicted.mean;
            let dz = pts[i] - meas.mean;
            let ddx = d_pts[k][i] - predicted.d_mean[k];
            let ddz = d_pts[k][i] - meas.d_mean[k];
            d_cross[k] += wc[i] * (ddx * dz.transpose() + dx * ddz.transpose());
        }
    }

    let s = meas.cov;
    let s_inv = s.try_inverse().ok_or(UkfError::NonPositiveDefinite)?;
    let gain = cross * s_inv;
    let innov = z - meas.mean;

    let mut mean = predicted.mean + gain * innov;
    let mut cov = predicted.cov - gain * s * gain.transpose();

    let mut d_mean = [Vector2::zeros(); PARAM_COUNT];
    let mut d_cov = [Matrix2::zeros(); PARAM_COUNT];
    for k in 0..PARAM_COUNT {
        let d_gain = d_cross[k] * s_inv - gain * meas.d_cov[k] * s_inv;
        d_mean[k] = predicted.d_mean[k] + d_gain * innov - gain * meas.d_mean[k];
        d_cov[k] = predicted.d_cov[k]
            - d_gain * s * gain.transpose()
            - gain * meas.d_cov[k] * gain.transpose()
            - gain * s * d_gain.transpose();
    }

    // Symmetrize, then clamp eigenvalues if the update undershot.
    cov = 0.5 * (cov + cov.transpose());
    for k in 0..PARAM_COUNT {
        d_cov[k] = 0.5 * (d_cov[k] + d_cov[k].transpose());
    }
    if !cov.iter().all(|v| v.is_finite()) || !mean.iter().all(|v| v.is_finite()) {
        return Err(UkfError::NonPositiveDefinite);
    }
    if min_eigenvalue(&cov) < COV_EIG_FLOOR {
        let eig = nalgebra::SymmetricEigen::new(cov);
        let clamped = eig.eigenvalues.map(|v| v.max(COV_EIG_FLOOR));
        cov = eig.eigenvectors * Matrix2::from_diagonal(&clamped) * eig.eigenvectors.transpose();
        cov = 0.5 * (cov + cov.transpose());
        if !(min_eigenvalue(&cov) > 0.0) {
            return Err(UkfError::NonPositiveDefinite);
        }
    }
    mean.x = crate::geom::wrap_angle(mean.x);
    mean.y = crate::geom::wrap_angle(mean.y);
    Ok(TangentBelief { mean, cov, d_mean, d_cov })
}

/// Sigma points of a belief under the scaled unscented transform.
pub fn sample_sigma_points(
    belief: &UkfBelief,
    alpha: f64,
    beta_w: f64,
    kappa: f64,
) -> Result<SigmaPointSet, UkfError> {
    let cfg = UkfConfig { alpha, beta: beta_w, kappa, ..UkfConfig::default() };
    let t = TangentBelief::from_belief(belief);
    let (points, _) = sigma_points_t(&cfg, &t)?;
    let (mean_weights, cov_weights) = cfg.weights();
    Ok(SigmaPointSet { points, mean_weights, cov_weights })
}

/// Motion-model propagation: additive rate integration over `dt` plus the
/// trainable process noise.
pub fn predict(
    cfg: &UkfConfig,
    belief: &UkfBelief,
    gyro_pitch_rate: f64,
    gyro_roll_rate: f64,
    dt: f64,
    noise: &NoiseParams,
) -> Result<UkfBelief, UkfError> {
    let t = TangentBelief::from_belief(belief);
    predict_t(cfg, &t, gyro_pitch_rate, gyro_roll_rate, dt, noise).map(|b| b.belief())
}

/// Pitch/roll pseudo-measurement from raw acceleration.
///
/// Fails with [`UkfError::DegenerateAccel`] when the projection onto the
/// x-z plane is too small to define roll; callers skip that update.
pub fn accel_to_measurement(accel: &Vector3<f64>) -> Result<Attitude, UkfError> {
    let horiz = (accel.x * accel.x + accel.z * accel.z).sqrt();
    if horiz < 1e-9 {
        return Err(UkfError::DegenerateAccel);
    }
    let pitch = accel.x.atan2(accel.z);
    let roll = -accel.y.atan2(horiz);
    Ok(Attitude::new(pitch, roll))
}

/// Measurement update against an attitude measurement.
pub fn update(
    cfg: &UkfConfig,
    predicted: &UkfBelief,
    z: &Attitude,
    noise: &NoiseParams,
) -> Result<UkfBelief, UkfError> {
    let t = TangentBelief::from_belief(predicted);
    update_t(cfg, &t, &Vector2::new(z.pitch, z.roll), noise).map(|b| b.belief())
}

/// Query attitude plus its gradient with respect to the four noise
/// parameters (same ordering as [`NoiseParams::as_array`]).
#[derive(Debug, Clone, Copy)]
pub struct AttitudeGrad {
    pub attitude: Attitude,
    pub d_pitch: [f64; PARAM_COUNT],
    pub d_roll: [f64; PARAM_COUNT],
}

fn run_filter(
    cfg: &UkfConfig,
    imu: &[ImuSample],
    init: &UkfBelief,
    noise: &NoiseParams,
    query_times: &[f64],
) -> Result<Vec<(TangentBelief, f64)>, UkfError> {
    if imu.is_empty() {
        return Err(UkfError::EmptyStream);
    }
    let start = imu[0].timestamp;
    let end = imu[imu.len() - 1].timestamp;
    for &q in query_times {
        if q < start || q > end {
            return Err(UkfError::QueryOutOfRange { query: q, start, end });
        }
    }

    let mut posteriors = Vec::with_capacity(imu.len());
    let mut bel = TangentBelief::from_belief(init);
    posteriors.push((bel.clone(), imu[0].timestamp));
    for i in 1..imu.len() {
        let s = &imu[i];
        let dt = s.timestamp - imu[i - 1].timestamp;
        bel = predict_t(cfg, &bel, s.gyro_pitch_rate, s.gyro_roll_rate, dt, noise)?;
        let gated = cfg.accel_gate > 0.0 && (s.accel.norm() - GRAVITY).abs() > cfg.accel_gate;
        if !gated {
            match accel_to_measurement(&s.accel) {
                Ok(z) => bel = update_t(cfg, &bel, &Vector2::new(z.pitch, z.roll), noise)?,
                Err(UkfError::DegenerateAccel) => {}
                Err(e) => return Err(e),
            }
        }
        posteriors.push((bel.clone(), s.timestamp));
    }
    Ok(posteriors)
}

fn nearest_earlier(posteriors: &[(TangentBelief, f64)], q: f64) -> &TangentBelief {
    // partition_point returns the count of posteriors at or before q;
    // the query is already range-checked so at least one exists.
    let idx = posteriors.partition_point(|(_, t)| *t <= q);
    &posteriors[idx.saturating_sub(1)].0
}

/// Run the filter over an IMU stream and return the posterior mean
/// attitude at each query time (nearest earlier posterior).
pub fn filter_stream(
    cfg: &UkfConfig,
    imu: &[ImuSample],
    init: &UkfBelief,
    noise: &NoiseParams,
    query_times: &[f64],
) -> Result<Vec<Attitude>, UkfError> {
    let posteriors = run_filter(cfg, imu, init, noise, query_times)?;
    Ok(query_times
        .iter()
        .map(|&q| {
            let b = nearest_earlier(&posteriors, q);
            Attitude::new(b.mean.x, b.mean.y)
        })
        .collect())
}

/// Like [`filter_stream`], additionally returning the gradient of each
/// query attitude with respect to the noise parameters.
pub fn filter_stream_with_grad(
    cfg: &UkfConfig,
    imu: &[ImuSample],
    init: &UkfBelief,
    noise: &NoiseParams,
    query_times: &[f64],
) -> Result<Vec<AttitudeGrad>, UkfError> {
    let posteriors = run_filter(cfg, imu, init, noise, query_times)?;
    Ok(query_times
        .iter()
        .map(|&q| {
            let b = nearest_earlier(&posteriors, q);
            AttitudeGrad {
                attitude: Attitude::new(b.mean.x, b.mean.y),
                d_pitch: [b.d_mean[0].x, b.d_mean[1].x, b.d_mean[2].x, b.d_mean[3].x],
                d_roll: [b.d_mean[0].y, b.d_mean[1].y, b.d_mean[2].y, b.d_mean[3].y],
            }
        })
        .collect())
}
