//! End-to-end optimization of the four noise parameters from pose
//! supervision.
//!
//! The forward pass chains filter -> BEV -> registration; the loss is a
//! KL divergence between the predicted correlation heatmaps and blurred
//! one-peak targets at the ground truth. Gradients come from a central
//! finite-difference stencil over the four log-parameters (9 forward
//! passes per batch), which sidesteps differentiating the FFT chain
//! analytically while keeping the same gradient semantics.

use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::Arc;

use nalgebra::{Matrix2, Vector2};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::bev::{bev_from_frame, BevConfig};
use crate::geom::{rot2, Attitude, CameraIntrinsics, ImuSample, Sim2Pose};
use crate::phasecorr::{estimate_sim2, CorrelationHeatmap, DpcConfig, DpcError};
use crate::ukf::{
    accel_to_measurement, filter_stream, NoiseParams, UkfBelief, UkfConfig, UkfError, PARAM_COUNT,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("ground-truth shift ({0:.2}, {1:.2}) exceeds the heatmap extent ({2} x {3})")]
    GtOutOfRange(f64, f64, usize, usize),
    #[error("every sample in the batch failed")]
    AllSamplesFailed,
    #[error("{failed} of {total} samples in a batch failed (> 50%)")]
    TooManyFailures { failed: usize, total: usize },
    #[error("sample carries no ground-truth attitude")]
    MissingGtAttitude,
    #[error("checkpoint malformed: {0}")]
    MalformedCheckpoint(String),
    #[error(transparent)]
    Ukf(#[from] UkfError),
    #[error(transparent)]
    Dpc(#[from] DpcError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Where the projection attitude comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttitudeMode {
    /// Filter the IMU window (the normal path).
    Filtered,
    /// Raw accelerometer measurement, filter bypassed.
    RawAccel,
    /// True attitude from the dataset (synthetic sequences only).
    GroundTruth,
}

/// Everything the forward pass needs besides the sample itself.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub intrinsics: CameraIntrinsics,
    pub bev: BevConfig,
    pub dpc: DpcConfig,
    pub ukf: UkfConfig,
    pub attitude_mode: AttitudeMode,
}

/// One supervised pair: two frames, the IMU window spanning them, and the
/// 4-DoF relative ground truth.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub prev_image: Arc<Array2<f64>>,
    pub cur_image: Arc<Array2<f64>>,
    pub prev_time: f64,
    pub cur_time: f64,
    pub imu_window: Arc<Vec<ImuSample>>,
    pub gt_pose: Sim2Pose,
    /// True attitude at the two frame times, when the dataset has it.
    pub gt_attitudes: Option<(Attitude, Attitude)>,
}

/// Output of one forward pass.
#[derive(Debug, Clone)]
pub struct VioEstimate {
    /// Relative vehicle motion (x forward, y left, theta yaw).
    pub pose: Sim2Pose,
    /// Raw raster-frame similarity from the registration stage.
    pub raster_pose: Sim2Pose,
    pub rot_scale_heatmap: CorrelationHeatmap,
    pub translation_heatmap: CorrelationHeatmap,
}

fn grid_anchor(bev: &BevConfig) -> Vector2<f64> {
    let dpp = bev.dpp();
    let n = bev.resolution as f64;
    Vector2::new(bev.forward_offset + (n - 0.5) * dpp, (n / 2.0 - 0.5) * dpp)
}

fn swap_negate() -> Matrix2<f64> {
    Matrix2::new(0.0, -1.0, -1.0, 0.0)
}

/// Convert a raster-frame similarity (registration output, rotation about
/// the image center, translation in meters) into relative vehicle motion.
///
/// The BEV raster is an egocentric map: row axis points backward, column
/// axis right, the patch anchored `forward_offset` ahead. Rotating the
/// vehicle about its own origin is a rotation of the raster about a point
/// outside the patch, so the off-center anchor enters the translation.
pub fn raster_to_vehicle(raster: &Sim2Pose, bev: &BevConfig) -> Sim2Pose {
    let dpp = bev.dpp();
    let k = grid_anchor(bev);
    let c = bev.raster_center();
    let nm = swap_negate();
    let r = rot2(raster.theta);
    let t_px = raster.translation / dpp;
    let b = t_px + c - raster.scale * r * c;
    let t_rel = k - r * (dpp * nm * b + k);
    Sim2Pose { theta: raster.theta, scale: raster.scale, translation: t_rel }
}

/// Inverse of [`raster_to_vehicle`].
pub fn vehicle_to_raster(vehicle: &Sim2Pose, bev: &BevConfig) -> Sim2Pose {
    let dpp = bev.dpp();
    let k = grid_anchor(bev);
    let c = bev.raster_center();
    let nm = swap_negate();
    let b = nm * (rot2(-vehicle.theta) * (k - vehicle.translation) - k) / dpp;
    let t_px = b - c + vehicle.scale * rot2(vehicle.theta) * c;
    Sim2Pose { theta: vehicle.theta, scale: vehicle.scale, translation: t_px * dpp }
}

/// Pixel shift between the de-rotated current frame and the previous
/// frame implied by a raster similarity: the location the translation
/// heatmap peaks at.
pub fn aligned_shift_px(raster: &Sim2Pose, dpp: f64) -> Vector2<f64> {
    rot2(-raster.theta) * (raster.translation / dpp) / raster.scale
}

fn nearest_earlier_index(imu: &[ImuSample], t: f64) -> usize {
    imu.partition_point(|s| s.timestamp <= t).saturating_sub(1)
}

fn attitudes_for(
    sample: &TrainSample,
    params: &NoiseParams,
    cfg: &PipelineConfig,
) -> Result<(Attitude, Attitude), TrainError> {
    match cfg.attitude_mode {
        AttitudeMode::Filtered => {
            let init = UkfBelief::from_first_measurement(&sample.imu_window[0], cfg.ukf.init_var)?;
            let atts = filter_stream(
                &cfg.ukf,
                &sample.imu_window,
                &init,
                params,
                &[sample.prev_time, sample.cur_time],
            )?;
            Ok((atts[0], atts[1]))
        }
        AttitudeMode::RawAccel => {
            let mut out = [Attitude::zero(); 2];
            for (i, t) in [sample.prev_time, sample.cur_time].into_iter().enumerate() {
                let mut idx = nearest_earlier_index(&sample.imu_window, t);
                loop {
                    match accel_to_measurement(&sample.imu_window[idx].accel) {
                        Ok(a) => {
                            out[i] = a;
                            break;
                        }
                        Err(UkfError::DegenerateAccel) if idx > 0 => idx -= 1,
                        Err(e) => return Err(e.into()),
                    }
                }
            }
            Ok((out[0], out[1]))
        }
        AttitudeMode::GroundTruth => sample.gt_attitudes.ok_or(TrainError::MissingGtAttitude),
    }
}

/// One-step VIO: filter the window, project both frames, register.
pub fn forward_vio(
    sample: &TrainSample,
    params: &NoiseParams,
    cfg: &PipelineConfig,
) -> Result<VioEstimate, TrainError> {
    let (att_prev, att_cur) = attitudes_for(sample, params, cfg)?;
    let bev_prev = bev_from_frame(&sample.prev_image, &att_prev, &cfg.intrinsics, &cfg.bev, sample.prev_time);
    let bev_cur = bev_from_frame(&sample.cur_image, &att_cur, &cfg.intrinsics, &cfg.bev, sample.cur_time);
    let (raster_pose, rot_scale_heatmap, translation_heatmap) =
        estimate_sim2(&bev_prev, &bev_cur, &cfg.dpc)?;
    Ok(VioEstimate {
        pose: raster_to_vehicle(&raster_pose, &cfg.bev),
        raster_pose,
        rot_scale_heatmap,
        translation_heatmap,
    })
}

/// Gaussian-blurred one-peak target at a signed (row, col) shift,
/// bilinearly split for subpixel centers and circularly wrapped (the
/// correlation surfaces it supervises are periodic on both axes).
pub fn target_distribution(
    shift: (f64, f64),
    shape: (usize, usize),
    blur_sigma: f64,
) -> Result<CorrelationHeatmap, TrainError> {
    let (rows, cols) = shape;
    if shift.0.abs() > rows as f64 / 2.0 || shift.1.abs() > cols as f64 / 2.0 {
        return Err(TrainError::GtOutOfRange(shift.0, shift.1, rows, cols));
    }
    let r0 = shift.0.rem_euclid(rows as f64);
    let c0 = shift.1.rem_euclid(cols as f64);
    let fr = r0.floor();
    let fc = c0.floor();
    let wr = r0 - fr;
    let wc = c0 - fc;
    let corners = [
        (fr as isize, fc as isize, (1.0 - wr) * (1.0 - wc)),
        (fr as isize + 1, fc as isize, wr * (1.0 - wc)),
        (fr as isize, fc as isize + 1, (1.0 - wr) * wc),
        (fr as isize + 1, fc as isize + 1, wr * wc),
    ];
    let mut values = Array2::zeros((rows, cols));
    let radius = if blur_sigma > 0.0 { (4.0 * blur_sigma).ceil() as isize } else { 0 };
    for (cr, cc, w) in corners {
        if w == 0.0 {
            continue;
        }
        for dr in -radius..=radius {
            for dc in -radius..=radius {
                let g = if blur_sigma > 0.0 {
                    (-((dr * dr + dc * dc) as f64) / (2.0 * blur_sigma * blur_sigma)).exp()
                } else {
                    1.0
                };
                let r = (cr + dr).rem_euclid(rows as isize) as usize;
                let c = (cc + dc).rem_euclid(cols as isize) as usize;
                values[(r, c)] += w * g;
            }
        }
    }
    let sum: f64 = values.iter().sum();
    values.mapv_inplace(|v| v / sum);
    Ok(CorrelationHeatmap { values, temperature: 0.0 })
}

/// KL(target || predicted), summed over cells, predicted clamped at
/// 1e-12. Target-first keeps the loss finite (softmax predictions have
/// full support) and penalizes missing mass at the ground-truth peak.
pub fn kld_loss(predicted: &CorrelationHeatmap, target: &CorrelationHeatmap) -> f64 {
    debug_assert_eq!(predicted.shape(), target.shape());
    target
        .values
        .iter()
        .zip(predicted.values.iter())
        .filter(|(t, _)| **t > 0.0)
        .map(|(t, p)| t * (t.ln() - p.max(1e-12).ln()))
        .sum()
}

/// Targets for both heatmaps of a sample, from the 4-DoF ground truth.
/// The scale row of the rot-scale target sits at zero shift: metric BEVs
/// carry no scale signal, so s = 1 is supervised.
pub fn targets_for(
    gt_pose: &Sim2Pose,
    cfg: &PipelineConfig,
    blur_sigma: f64,
) -> Result<(CorrelationHeatmap, CorrelationHeatmap), TrainError> {
    let angle_shift = gt_pose.theta * cfg.dpc.angular_bins as f64 / std::f64::consts::PI;
    let rs_target =
        target_distribution((0.0, angle_shift), (cfg.dpc.radial_bins, cfg.dpc.angular_bins), blur_sigma)?;
    let gt_unit_scale = Sim2Pose { scale: 1.0, ..*gt_pose };
    let raster_gt = vehicle_to_raster(&gt_unit_scale, &cfg.bev);
    let d = aligned_shift_px(&raster_gt, cfg.bev.dpp());
    let n = cfg.bev.resolution;
    let t_target = target_distribution((d.y, d.x), (n, n), blur_sigma)?;
    Ok((rs_target, t_target))
}

/// Loss of one sample under the given parameters.
pub fn sample_loss(
    sample: &TrainSample,
    params: &NoiseParams,
    cfg: &PipelineConfig,
    blur_sigma: f64,
) -> Result<f64, TrainError> {
    let est = forward_vio(sample, params, cfg)?;
    let (rs_target, t_target) = targets_for(&sample.gt_pose, cfg, blur_sigma)?;
    Ok(kld_loss(&est.rot_scale_heatmap, &rs_target) + kld_loss(&est.translation_heatmap, &t_target))
}

/// Mean batch loss and its finite-difference gradient.
#[derive(Debug, Clone)]
pub struct BatchGrad {
    pub grad: [f64; PARAM_COUNT],
    pub loss: f64,
    pub used: usize,
    pub failed: usize,
}

/// Central finite differences of the mean batch loss over the four
/// log-parameters: 9 forward passes per sample (center plus 8 shifted).
/// A sample enters the means only if all 9 evaluations succeed, so every
/// stencil point averages the same sample set.
pub fn grad_params(
    batch: &[TrainSample],
    params: &NoiseParams,
    cfg: &PipelineConfig,
    fd_step: f64,
    blur_sigma: f64,
) -> Result<BatchGrad, TrainError> {
    let mut stencil = vec![*params];
    for k in 0..PARAM_COUNT {
        let mut plus = params.as_array();
        plus[k] += fd_step;
        stencil.push(NoiseParams::from_array(plus));
        let mut minus = params.as_array();
        minus[k] -= fd_step;
        stencil.push(NoiseParams::from_array(minus));
    }
    let jobs: Vec<(usize, usize)> = (0..stencil.len())
        .flat_map(|si| (0..batch.len()).map(move |bi| (si, bi)))
        .collect();
    let flat: Vec<Option<f64>> = jobs
        .par_iter()
        .map(|&(si, bi)| sample_loss(&batch[bi], &stencil[si], cfg, blur_sigma).ok())
        .collect();
    let loss_at = |si: usize, bi: usize| flat[si * batch.len() + bi];

    let usable: Vec<usize> = (0..batch.len())
        .filter(|&bi| (0..stencil.len()).all(|si| loss_at(si, bi).is_some()))
        .collect();
    let failed = batch.len() - usable.len();
    if usable.is_empty() {
        return Err(TrainError::AllSamplesFailed);
    }
    let mean = |si: usize| -> f64 {
        usable.iter().map(|&bi| loss_at(si, bi).unwrap()).sum::<f64>() / usable.len() as f64
    };
    let mut grad = [0.0; PARAM_COUNT];
    for (k, g) in grad.iter_mut().enumerate() {
        *g = (mean(1 + 2 * k) - mean(2 + 2 * k)) / (2.0 * fd_step);
    }
    Ok(BatchGrad { grad, loss: mean(0), used: usable.len(), failed })
}

/// ADAM accumulator for the four parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamState {
    pub m: [f64; PARAM_COUNT],
    pub v: [f64; PARAM_COUNT],
    pub step: u64,
}

impl Default for AdamState {
    fn default() -> Self {
        Self { m: [0.0; PARAM_COUNT], v: [0.0; PARAM_COUNT], step: 0 }
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    /// One ADAM step; `frozen` components are left untouched.
    pub fn update(
        &mut self,
        params: &NoiseParams,
        grad: &[f64; PARAM_COUNT],
        lr: f64,
        frozen: &[bool; PARAM_COUNT],
    ) -> NoiseParams {
        self.step += 1;
        let t = self.step as i32;
        let mut out = params.as_array();
        for k in 0..PARAM_COUNT {
            if frozen[k] {
                continue;
            }
            self.m[k] = ADAM_BETA1 * self.m[k] + (1.0 - ADAM_BETA1) * grad[k];
            self.v[k] = ADAM_BETA2 * self.v[k] + (1.0 - ADAM_BETA2) * grad[k] * grad[k];
            let m_hat = self.m[k] / (1.0 - ADAM_BETA1.powi(t));
            let v_hat = self.v[k] / (1.0 - ADAM_BETA2.powi(t));
            out[k] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
        NoiseParams::from_array(out)
    }
}

/// Optimizer state plus hyperparameters, the checkpointed unit.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: NoiseParams,
    pub adam: AdamState,
    pub lr: f64,
    pub blur_sigma: f64,
}

impl TrainState {
    pub fn new(params: NoiseParams, lr: f64, blur_sigma: f64) -> Self {
        Self { params, adam: AdamState::default(), lr, blur_sigma }
    }
}

const CHECKPOINT_HEADER: &str = "vio-checkpoint v1";

pub fn save_checkpoint<P: AsRef<Path>>(path: P, state: &TrainState) -> Result<(), TrainError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{CHECKPOINT_HEADER}")?;
    let p = state.params.as_array();
    writeln!(out, "log_o_pitch {}", p[0])?;
    writeln!(out, "log_o_roll {}", p[1])?;
    writeln!(out, "log_q_pitch {}", p[2])?;
    writeln!(out, "log_q_roll {}", p[3])?;
    let fmt4 = |a: &[f64; 4]| a.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(" ");
    writeln!(out, "adam_m {}", fmt4(&state.adam.m))?;
    writeln!(out, "adam_v {}", fmt4(&state.adam.v))?;
    writeln!(out, "adam_step {}", state.adam.step)?;
    writeln!(out, "lr {}", state.lr)?;
    writeln!(out, "blur_sigma {}", state.blur_sigma)?;
    Ok(())
}

pub fn load_checkpoint<P: AsRef<Path>>(path: P) -> Result<TrainState, TrainError> {
    let file = std::fs::File::open(path)?;
    let mut lines = std::io::BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| TrainError::MalformedCheckpoint("empty file".into()))??;
    if header.trim() != CHECKPOINT_HEADER {
        return Err(TrainError::MalformedCheckpoint(format!("unexpected header '{header}'")));
    }
    let mut fields = std::collections::HashMap::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once(' ')
            .ok_or_else(|| TrainError::MalformedCheckpoint(format!("bad line '{line}'")))?;
        fields.insert(k.to_string(), v.to_string());
    }
    let getf = |k: &str| -> Result<f64, TrainError> {
        fields
            .get(k)
            .ok_or_else(|| TrainError::MalformedCheckpoint(format!("missing field '{k}'")))?
            .trim()
            .parse::<f64>()
            .map_err(|e| TrainError::MalformedCheckpoint(format!("field '{k}': {e}")))
    };
    let get4 = |k: &str| -> Result<[f64; 4], TrainError> {
        let vals: Vec<f64> = fields
            .get(k)
            .ok_or_else(|| TrainError::MalformedCheckpoint(format!("missing field '{k}'")))?
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| TrainError::MalformedCheckpoint(format!("field '{k}': {e}")))?;
        vals.try_into()
            .map_err(|_| TrainError::MalformedCheckpoint(format!("field '{k}' needs 4 values")))
    };
    Ok(TrainState {
        params: NoiseParams::new(
            getf("log_o_pitch")?,
            getf("log_o_roll")?,
            getf("log_q_pitch")?,
            getf("log_q_roll")?,
        ),
        adam: AdamState { m: get4("adam_m")?, v: get4("adam_v")?, step: getf("adam_step")? as u64 },
        lr: getf("lr")?,
        blur_sigma: getf("blur_sigma")?,
    })
}

/// Training hyperparameters and ablation switches.
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub fd_step: f64,
    pub seed: u64,
    pub fix_o: bool,
    pub fix_q: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { epochs: 50, batch_size: 8, fd_step: 1e-3, seed: 0, fix_o: false, fix_q: false }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub failed_samples: usize,
}

/// Mini-batch ADAM over shuffled samples. Deterministic for a fixed seed.
/// A batch losing more than half its samples aborts with a diagnostic.
pub fn train(
    dataset: &[TrainSample],
    mut state: TrainState,
    cfg: &PipelineConfig,
    opts: &TrainOptions,
) -> Result<(TrainState, Vec<EpochStats>), TrainError> {
    assert!(!dataset.is_empty(), "training dataset is empty");
    let frozen = [opts.fix_o, opts.fix_o, opts.fix_q, opts.fix_q];
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut history = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        let mut indices: Vec<usize> = (0..dataset.len()).collect();
        indices.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        let mut failed = 0usize;
        for chunk in indices.chunks(opts.batch_size) {
            let batch: Vec<TrainSample> = chunk.iter().map(|&i| dataset[i].clone()).collect();
            let bg = grad_params(&batch, &state.params, cfg, opts.fd_step, state.blur_sigma)?;
            if 2 * bg.failed > batch.len() {
                return Err(TrainError::TooManyFailures { failed: bg.failed, total: batch.len() });
            }
            state.params = state.adam.update(&state.params, &bg.grad, state.lr, &frozen);
            loss_sum += bg.loss * bg.used as f64;
            loss_count += bg.used;
            failed += bg.failed;
        }
        history.push(EpochStats {
            epoch,
            mean_loss: if loss_count > 0 { loss_sum / loss_count as f64 } else { f64::NAN },
            failed_samples: failed,
        });
    }
    Ok((state, history))
}

/// Build supervised pairs from a frame/IMU/ground-truth triple. Each
/// window spans `[t_prev - warmup, t_cur]` (clamped to the stream) so the
/// filter has settled before the first frame is projected.
pub fn samples_from_sequence(
    frames: &[(f64, Array2<f64>)],
    imu: &[ImuSample],
    gt_relative: &[Sim2Pose],
    gt_attitude: Option<&[(f64, Attitude)]>,
    warmup_s: f64,
) -> Vec<TrainSample> {
    assert_eq!(frames.len(), gt_relative.len() + 1, "one relative pose per consecutive frame pair");
    let images: Vec<Arc<Array2<f64>>> = frames.iter().map(|(_, img)| Arc::new(img.clone())).collect();
    let nearest_attitude = |t: f64| -> Option<Attitude> {
        let atts = gt_attitude?;
        let idx = atts.partition_point(|(ts, _)| *ts <= t);
        let idx = idx.saturating_sub(1);
        Some(atts[idx].1)
    };
    let mut samples = Vec::with_capacity(gt_relative.len());
    for i in 1..frames.len() {
        let prev_time = frames[i - 1].0;
        let cur_time = frames[i].0;
        let mut start = imu.partition_point(|s| s.timestamp < prev_time - warmup_s);
        while start > 0 && imu[start].timestamp > prev_time {
            start -= 1;
        }
        let mut end = imu.partition_point(|s| s.timestamp <= cur_time);
        if end < imu.len() && imu[end - 1].timestamp < cur_time {
            end += 1;
        }
        let window: Vec<ImuSample> = imu[start..end].to_vec();
        let gt_attitudes = match (nearest_attitude(prev_time), nearest_attitude(cur_time)) {
            (Some(a), Some(b)) => Some((a, b)),
            _ => None,
        };
        samples.push(TrainSample {
            prev_image: images[i - 1].clone(),
            cur_image: images[i].clone(),
            prev_time,
            cur_time,
            imu_window: Arc::new(window),
            gt_pose: gt_relative[i - 1],
            gt_attitudes,
        });
    }
    samples
}
