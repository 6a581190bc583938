//! Sequence ingestion and the on-disk layout.
//!
//! A sequence directory holds `image_0/NNNNNN.png`, `times.txt` (one float
//! per line), `imu.csv` (`timestamp,wx,wy,wz,ax,ay,az`), `poses.txt`
//! (KITTI 3x4 lines), `calib.cfg` (key=value) and, for synthetic data,
//! `attitude.csv` with the true pitch/roll per IMU sample.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use ndarray::Array2;
use thiserror::Error;

use crate::geom::{Attitude, CameraIntrinsics, ImuSample, RigidTransform3, Sim2Pose};
use crate::metrics::{load_kitti_trajectory, EvalError, Trajectory};
use crate::synth::SyntheticSequence;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("IMU stream missing: {0}")]
    MissingImu(PathBuf),
    #[error("calibration malformed: {0}")]
    MalformedCalibration(String),
    #[error("timestamps not strictly increasing at line {0}")]
    NonMonotonicTimestamps(usize),
    #[error("malformed pose line {line}: {reason}")]
    MalformedPoseLine { line: usize, reason: String },
    #[error("image timestamp {0} outside the IMU span")]
    ImageOutsideImuSpan(f64),
    #[error("{0} image files but {1} timestamps")]
    CountMismatch(usize, usize),
    #[error("malformed {file} at line {line}: {reason}")]
    MalformedRecord { file: String, line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("image decode failed: {0}")]
    Image(#[from] image::ImageError),
}

impl From<EvalError> for DataError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::MalformedPoseLine { line, reason } => DataError::MalformedPoseLine { line, reason },
            EvalError::Io(e) => DataError::Io(e),
            other => DataError::MalformedRecord { file: "poses.txt".into(), line: 0, reason: other.to_string() },
        }
    }
}

/// Signed gyroscope axis selection, e.g. `y` or `-z`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisSel {
    pub axis: usize,
    pub sign: f64,
}

impl AxisSel {
    pub fn parse(s: &str) -> Result<Self, DataError> {
        let (sign, name) = match s.strip_prefix('-') {
            Some(rest) => (-1.0, rest),
            None => (1.0, s),
        };
        let axis = match name {
            "x" => 0,
            "y" => 1,
            "z" => 2,
            _ => {
                return Err(DataError::MalformedCalibration(format!(
                    "unknown gyro axis '{s}' (expected x, y, z with optional '-')"
                )))
            }
        };
        Ok(Self { axis, sign })
    }

    pub fn pick(&self, v: &[f64; 3]) -> f64 {
        self.sign * v[self.axis]
    }
}

/// Per-sequence calibration.
#[derive(Debug, Clone)]
pub struct Calibration {
    pub intrinsics: CameraIntrinsics,
    pub const_z: f64,
    /// Maps IMU-frame points into the camera frame.
    pub cam_from_imu: RigidTransform3,
    /// Which gyro channel carries the pitch rate (default `y`).
    pub pitch_rate_axis: AxisSel,
    /// Which gyro channel carries the roll rate (default `x`).
    pub roll_rate_axis: AxisSel,
}

/// Validated description of a sequence on disk.
#[derive(Debug, Clone)]
pub struct SequenceManifest {
    pub root: PathBuf,
    /// (timestamp, image path), strictly increasing timestamps.
    pub images: Vec<(f64, PathBuf)>,
    pub imu_path: PathBuf,
    pub poses_path: PathBuf,
    /// Present only for synthetic sequences.
    pub attitude_path: Option<PathBuf>,
    pub calibration: Calibration,
    pub imu_span: (f64, f64),
}

fn parse_kv_file(path: &Path) -> Result<Vec<(String, String)>, DataError> {
    let file = std::fs::File::open(path)
        .map_err(|e| DataError::MalformedCalibration(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let (k, v) = trimmed.split_once('=').ok_or_else(|| {
            DataError::MalformedCalibration(format!("line {}: expected key=value", i + 1))
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Parse `calib.cfg`.
pub fn load_calibration(path: &Path) -> Result<Calibration, DataError> {
    let kvs = parse_kv_file(path)?;
    let get = |key: &str| -> Result<&str, DataError> {
        kvs.iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| DataError::MalformedCalibration(format!("missing key '{key}'")))
    };
    let getf = |key: &str| -> Result<f64, DataError> {
        get(key)?
            .parse::<f64>()
            .map_err(|e| DataError::MalformedCalibration(format!("key '{key}': {e}")))
    };
    let intrinsics = CameraIntrinsics {
        fx: getf("fx")?,
        fy: getf("fy")?,
        cx: getf("cx")?,
        cy: getf("cy")?,
        width: getf("width")? as usize,
        height: getf("height")? as usize,
    };
    if !intrinsics.is_valid() {
        return Err(DataError::MalformedCalibration("intrinsics out of range".into()));
    }
    let vals: Vec<f64> = get("cam_from_imu")?
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| DataError::MalformedCalibration(format!("cam_from_imu: {e}")))?;
    if vals.len() != 12 {
        return Err(DataError::MalformedCalibration(format!(
            "cam_from_imu needs 12 floats, got {}",
            vals.len()
        )));
    }
    let rotation = Matrix3::new(
        vals[0], vals[1], vals[2], vals[4], vals[5], vals[6], vals[8], vals[9], vals[10],
    );
    let translation = Vector3::new(vals[3], vals[7], vals[11]);
    let cam_from_imu = RigidTransform3::new(rotation, translation);
    if !cam_from_imu.is_valid(1e-6) {
        return Err(DataError::MalformedCalibration("cam_from_imu rotation is not orthonormal".into()));
    }
    let pitch_axis = kvs.iter().find(|(k, _)| k == "pitch_rate_axis").map(|(_, v)| v.as_str()).unwrap_or("y");
    let roll_axis = kvs.iter().find(|(k, _)| k == "roll_rate_axis").map(|(_, v)| v.as_str()).unwrap_or("x");
    Ok(Calibration {
        intrinsics,
        const_z: getf("const_z")?,
        cam_from_imu,
        pitch_rate_axis: AxisSel::parse(pitch_axis)?,
        roll_rate_axis: AxisSel::parse(roll_axis)?,
    })
}

/// Load and validate a sequence directory.
pub fn load_sequence(root: &Path, sequence: &str) -> Result<SequenceManifest, DataError> {
    let dir = root.join(sequence);
    let calibration = load_calibration(&dir.join("calib.cfg"))?;

    let imu_path = dir.join("imu.csv");
    if !imu_path.exists() {
        return Err(DataError::MissingImu(imu_path));
    }
    let imu = load_imu(&imu_path, &calibration)?;
    if imu.is_empty() {
        return Err(DataError::MissingImu(imu_path));
    }
    let imu_span = (imu[0].timestamp, imu[imu.len() - 1].timestamp);

    let times_path = dir.join("times.txt");
    let file = std::fs::File::open(&times_path)?;
    let mut times = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let t: f64 = line.trim().parse().map_err(|e: std::num::ParseFloatError| {
            DataError::MalformedRecord { file: "times.txt".into(), line: i + 1, reason: e.to_string() }
        })?;
        if let Some(&last) = times.last() {
            if t <= last {
                return Err(DataError::NonMonotonicTimestamps(i + 1));
            }
        }
        times.push(t);
    }

    let image_dir = dir.join("image_0");
    let mut image_files: Vec<PathBuf> = std::fs::read_dir(&image_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "png" || e == "pgm").unwrap_or(false))
        .collect();
    image_files.sort();
    if image_files.len() != times.len() {
        return Err(DataError::CountMismatch(image_files.len(), times.len()));
    }
    for &t in &times {
        if t < imu_span.0 - 1e-9 || t > imu_span.1 + 1e-9 {
            return Err(DataError::ImageOutsideImuSpan(t));
        }
    }

    let attitude_path = dir.join("attitude.csv");
    Ok(SequenceManifest {
        root: dir.clone(),
        images: times.into_iter().zip(image_files).collect(),
        imu_path,
        poses_path: dir.join("poses.txt"),
        attitude_path: attitude_path.exists().then_some(attitude_path),
        calibration,
        imu_span,
    })
}

/// Parse `imu.csv` applying the calibration's gyro axis convention.
pub fn load_imu(path: &Path, calib: &Calibration) -> Result<Vec<ImuSample>, DataError> {
    let file = std::fs::File::open(path).map_err(|_| DataError::MissingImu(path.to_path_buf()))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || (i == 0 && trimmed.starts_with("timestamp")) {
            continue;
        }
        let vals: Vec<f64> = trimmed
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| DataError::MalformedRecord {
                file: "imu.csv".into(),
                line: i + 1,
                reason: e.to_string(),
            })?;
        if vals.len() != 7 {
            return Err(DataError::MalformedRecord {
                file: "imu.csv".into(),
                line: i + 1,
                reason: format!("expected 7 columns, got {}", vals.len()),
            });
        }
        let w = [vals[1], vals[2], vals[3]];
        let sample = ImuSample {
            timestamp: vals[0],
            gyro_pitch_rate: calib.pitch_rate_axis.pick(&w),
            gyro_roll_rate: calib.roll_rate_axis.pick(&w),
            accel: Vector3::new(vals[4], vals[5], vals[6]),
        };
        if let Some(last) = out.last() {
            let last: &ImuSample = last;
            if sample.timestamp <= last.timestamp {
                return Err(DataError::NonMonotonicTimestamps(i + 1));
            }
        }
        out.push(sample);
    }
    Ok(out)
}

/// Relative frame-to-frame planar poses from a KITTI pose file.
/// Elevation is recorded from the first line and discarded afterwards.
pub fn load_gt_poses(path: &Path) -> Result<Vec<Sim2Pose>, DataError> {
    let traj = load_kitti_trajectory(path)?;
    Ok(traj.poses.windows(2).map(|w| w[0].relative_to(&w[1])).collect())
}

/// Absolute planar trajectory from a KITTI pose file (for evaluation).
pub fn load_gt_trajectory(path: &Path) -> Result<Trajectory, DataError> {
    Ok(load_kitti_trajectory(path)?)
}

/// True attitude stream written by the synthesizer.
pub fn load_attitude(path: &Path) -> Result<Vec<(f64, Attitude)>, DataError> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || (i == 0 && trimmed.starts_with("timestamp")) {
            continue;
        }
        let vals: Vec<f64> = trimmed
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| DataError::MalformedRecord {
                file: "attitude.csv".into(),
                line: i + 1,
                reason: e.to_string(),
            })?;
        if vals.len() != 3 {
            return Err(DataError::MalformedRecord {
                file: "attitude.csv".into(),
                line: i + 1,
                reason: format!("expected 3 columns, got {}", vals.len()),
            });
        }
        out.push((vals[0], Attitude::new(vals[1], vals[2])));
    }
    Ok(out)
}

/// Load a grayscale image as doubles in [0, 1]; color inputs are reduced
/// with the usual luma weights.
pub fn load_gray_image(path: &Path) -> Result<Array2<f64>, DataError> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(r, c)| {
        img.get_pixel(c as u32, r as u32)[0] as f64 / 255.0
    }))
}

fn save_gray_image(path: &Path, img: &Array2<f64>) -> Result<(), DataError> {
    let (h, w) = img.dim();
    let mut out = image::GrayImage::new(w as u32, h as u32);
    for ((r, c), v) in img.indexed_iter() {
        let q = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        out.put_pixel(c as u32, r as u32, image::Luma([q]));
    }
    out.save(path)?;
    Ok(())
}

/// Write a synthetic sequence in the standard layout. The directory is
/// created; existing files are overwritten.
pub fn save_sequence(dir: &Path, seq: &SyntheticSequence) -> Result<(), DataError> {
    std::fs::create_dir_all(dir.join("image_0"))?;

    let mut times = std::io::BufWriter::new(std::fs::File::create(dir.join("times.txt"))?);
    for (i, (t, img)) in seq.frames.iter().enumerate() {
        writeln!(times, "{t}")?;
        save_gray_image(&dir.join("image_0").join(format!("{i:06}.png")), img)?;
    }
    drop(times);

    let mut imu = std::io::BufWriter::new(std::fs::File::create(dir.join("imu.csv"))?);
    writeln!(imu, "timestamp,wx,wy,wz,ax,ay,az")?;
    for s in &seq.imu {
        // Default axis convention: pitch rate on wy, roll rate on wx.
        writeln!(
            imu,
            "{},{},{},0,{},{},{}",
            s.timestamp, s.gyro_roll_rate, s.gyro_pitch_rate, s.accel.x, s.accel.y, s.accel.z
        )?;
    }
    drop(imu);

    let mut att = std::io::BufWriter::new(std::fs::File::create(dir.join("attitude.csv"))?);
    writeln!(att, "timestamp,pitch,roll")?;
    for (t, a) in &seq.gt_attitude {
        writeln!(att, "{},{},{}", t, a.pitch, a.roll)?;
    }
    drop(att);

    let traj = Trajectory { poses: seq.gt_absolute.clone(), elevation: seq.const_z };
    crate::metrics::save_kitti_poses(dir.join("poses.txt"), &traj)?;

    let e = &seq.cam_from_imu;
    let r = e.rotation;
    let t = e.translation;
    let cam = [
        r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x, //
        r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y, //
        r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z,
    ];
    let cam_str: Vec<String> = cam.iter().map(|v| format!("{v}")).collect();
    let mut calib = std::io::BufWriter::new(std::fs::File::create(dir.join("calib.cfg"))?);
    writeln!(calib, "fx = {}", seq.intrinsics.fx)?;
    writeln!(calib, "fy = {}", seq.intrinsics.fy)?;
    writeln!(calib, "cx = {}", seq.intrinsics.cx)?;
    writeln!(calib, "cy = {}", seq.intrinsics.cy)?;
    writeln!(calib, "width = {}", seq.intrinsics.width)?;
    writeln!(calib, "height = {}", seq.intrinsics.height)?;
    writeln!(calib, "const_z = {}", seq.const_z)?;
    writeln!(calib, "cam_from_imu = {}", cam_str.join(" "))?;
    writeln!(calib, "pitch_rate_axis = y")?;
    writeln!(calib, "roll_rate_axis = x")?;
    Ok(())
}

/// Planar pose handles for synthetic sequences are exact; re-exported for
/// callers assembling ground-truth trajectories.
pub fn trajectory_from_manifest(manifest: &SequenceManifest) -> Result<Trajectory, DataError> {
    let mut traj = load_gt_trajectory(&manifest.poses_path)?;
    for (pose, (t, _)) in traj.poses.iter_mut().zip(manifest.images.iter()) {
        pose.timestamp = *t;
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_synthetic, SynthConfig, TrajectorySpec};
    use approx::assert_abs_diff_eq;

    fn tiny_sequence() -> SyntheticSequence {
        generate_synthetic(&SynthConfig {
            trajectory: TrajectorySpec::Line { speed: 1.0 },
            duration_s: 0.5,
            camera_rate: 10.0,
            imu_rate: 50.0,
            bump_amp_pitch: 0.02,
            bump_amp_roll: 0.01,
            intrinsics: CameraIntrinsics { fx: 100.0, fy: 100.0, cx: 80.0, cy: 60.0, width: 160, height: 120 },
            ..SynthConfig::default()
        })
    }

    #[test]
    fn sequence_roundtrip() {
        let seq = tiny_sequence();
        let dir = tempfile::tempdir().unwrap();
        let seq_dir = dir.path().join("00");
        save_sequence(&seq_dir, &seq).unwrap();

        let manifest = load_sequence(dir.path(), "00").unwrap();
        assert_eq!(manifest.images.len(), seq.frames.len());
        for ((ta, _), (tb, _)) in manifest.images.iter().zip(seq.frames.iter()) {
            assert_eq!(ta.to_bits(), tb.to_bits());
        }
        assert_abs_diff_eq!(manifest.calibration.const_z, seq.const_z, epsilon = 1e-15);
        assert_eq!(manifest.calibration.pitch_rate_axis, AxisSel::parse("y").unwrap());

        let imu = load_imu(&manifest.imu_path, &manifest.calibration).unwrap();
        assert_eq!(imu.len(), seq.imu.len());
        for (a, b) in imu.iter().zip(seq.imu.iter()) {
            assert_eq!(a.gyro_pitch_rate.to_bits(), b.gyro_pitch_rate.to_bits());
            assert_eq!(a.gyro_roll_rate.to_bits(), b.gyro_roll_rate.to_bits());
            assert_eq!(a.accel.y.to_bits(), b.accel.y.to_bits());
        }

        let rel = load_gt_poses(&manifest.poses_path).unwrap();
        assert_eq!(rel.len(), seq.gt_relative.len());
        for (a, b) in rel.iter().zip(seq.gt_relative.iter()) {
            assert_abs_diff_eq!(a.theta, b.theta, epsilon = 1e-12);
            assert_abs_diff_eq!(a.translation.x, b.translation.x, epsilon = 1e-12);
            assert_abs_diff_eq!(a.translation.y, b.translation.y, epsilon = 1e-12);
        }

        let atts = load_attitude(manifest.attitude_path.as_ref().unwrap()).unwrap();
        assert_eq!(atts.len(), seq.gt_attitude.len());

        let img = load_gray_image(&manifest.images[0].1).unwrap();
        assert_eq!(img.dim(), (120, 160));
        // 8-bit quantization on save.
        let orig = &seq.frames[0].1;
        let mae: f64 =
            img.iter().zip(orig.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>() / img.len() as f64;
        assert!(mae < 1.0 / 255.0, "MAE {mae}");
    }

    #[test]
    fn missing_imu_is_reported() {
        let seq = tiny_sequence();
        let dir = tempfile::tempdir().unwrap();
        let seq_dir = dir.path().join("00");
        save_sequence(&seq_dir, &seq).unwrap();
        std::fs::remove_file(seq_dir.join("imu.csv")).unwrap();
        assert!(matches!(load_sequence(dir.path(), "00"), Err(DataError::MissingImu(_))));
    }

    #[test]
    fn shuffled_timestamps_are_rejected() {
        let seq = tiny_sequence();
        let dir = tempfile::tempdir().unwrap();
        let seq_dir = dir.path().join("00");
        save_sequence(&seq_dir, &seq).unwrap();
        let times = std::fs::read_to_string(seq_dir.join("times.txt")).unwrap();
        let mut lines: Vec<&str> = times.lines().collect();
        lines.swap(1, 3);
        std::fs::write(seq_dir.join("times.txt"), lines.join("\n")).unwrap();
        assert!(matches!(
            load_sequence(dir.path(), "00"),
            Err(DataError::NonMonotonicTimestamps(_))
        ));
    }

    #[test]
    fn malformed_pose_line_is_rejected() {
        let seq = tiny_sequence();
        let dir = tempfile::tempdir().unwrap();
        let seq_dir = dir.path().join("00");
        save_sequence(&seq_dir, &seq).unwrap();
        std::fs::write(seq_dir.join("poses.txt"), "1 0 0 0 0 1 0 0 0 0 1\n").unwrap();
        assert!(matches!(
            load_gt_poses(&seq_dir.join("poses.txt")),
            Err(DataError::MalformedPoseLine { .. })
        ));
    }

    #[test]
    fn malformed_calibration_is_rejected() {
        let seq = tiny_sequence();
        let dir = tempfile::tempdir().unwrap();
        let seq_dir = dir.path().join("00");
        save_sequence(&seq_dir, &seq).unwrap();
        std::fs::write(seq_dir.join("calib.cfg"), "fx = 100\n").unwrap();
        assert!(matches!(
            load_sequence(dir.path(), "00"),
            Err(DataError::MalformedCalibration(_))
        ));
    }

    #[test]
    fn gyro_axis_selection() {
        let sel = AxisSel::parse("-z").unwrap();
        assert_eq!(sel.pick(&[1.0, 2.0, 3.0]), -3.0);
        assert!(AxisSel::parse("w").is_err());
    }
}
