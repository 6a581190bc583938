//! Trajectory assembly and relative translational/rotational error metrics.

use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::Vector2;
use thiserror::Error;

use crate::geom::{rot2, wrap_angle, Sim2Pose};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("trajectory length mismatch: estimated {est} poses vs ground truth {gt}")]
    LengthMismatch { est: usize, gt: usize },
    #[error("trajectories are not time-aligned at index {0}")]
    TimeMisaligned(usize),
    #[error("empty relative pose list")]
    Empty,
    #[error("malformed pose line {line}: {reason}")]
    MalformedPoseLine { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Absolute planar pose at a frame timestamp.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanarPose {
    pub timestamp: f64,
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl PlanarPose {
    pub fn identity(timestamp: f64) -> Self {
        Self { timestamp, x: 0.0, y: 0.0, yaw: 0.0 }
    }

    pub fn position(&self) -> Vector2<f64> {
        Vector2::new(self.x, self.y)
    }

    /// Relative planar motion from `self` to `next`, expressed in the
    /// frame of `self` (x forward, y left).
    pub fn relative_to(&self, next: &PlanarPose) -> Sim2Pose {
        let dp = rot2(-self.yaw) * (next.position() - self.position());
        Sim2Pose::new(wrap_angle(next.yaw - self.yaw), 1.0, dp.x, dp.y)
    }

    /// Apply a relative planar motion (scale is ignored; translations are
    /// already metric).
    pub fn compose(&self, rel: &Sim2Pose, timestamp: f64) -> Self {
        let p = self.position() + rot2(self.yaw) * rel.translation;
        Self { timestamp, x: p.x, y: p.y, yaw: wrap_angle(self.yaw + rel.theta) }
    }
}

/// Planar trajectory with a constant elevation carried for reporting.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub poses: Vec<PlanarPose>,
    pub elevation: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// Cumulative path length at each pose.
    pub fn cumulative_distance(&self) -> Vec<f64> {
        let mut d = Vec::with_capacity(self.poses.len());
        let mut acc = 0.0;
        d.push(0.0);
        for w in self.poses.windows(2) {
            acc += (w[1].position() - w[0].position()).norm();
            d.push(acc);
        }
        d
    }
}

/// Chain relative poses into a trajectory starting at the identity.
///
/// The scale component is not applied: translations are already metric,
/// so a per-frame scale would double-count. Timestamps must have one more
/// entry than the relative list.
pub fn integrate(relative: &[Sim2Pose], timestamps: &[f64]) -> Result<Trajectory, EvalError> {
    if relative.is_empty() {
        return Err(EvalError::Empty);
    }
    assert_eq!(
        timestamps.len(),
        relative.len() + 1,
        "need one timestamp per pose (relatives + 1)"
    );
    let mut poses = Vec::with_capacity(relative.len() + 1);
    poses.push(PlanarPose::identity(timestamps[0]));
    for (i, rel) in relative.iter().enumerate() {
        let prev = poses[i];
        poses.push(prev.compose(rel, timestamps[i + 1]));
    }
    Ok(Trajectory { poses, elevation: 0.0 })
}

/// Convenience wrapper with frame indices as timestamps.
pub fn integrate_indexed(relative: &[Sim2Pose]) -> Result<Trajectory, EvalError> {
    let times: Vec<f64> = (0..=relative.len()).map(|i| i as f64).collect();
    integrate(relative, &times)
}

/// KITTI-style path lengths: 100..800 m, or a desk-scale set for short
/// sequences.
pub const ROAD_LENGTHS_M: [f64; 8] = [100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0];
pub const DESK_LENGTHS_M: [f64; 4] = [5.0, 10.0, 20.0, 50.0];

#[derive(Debug, Clone)]
pub struct RelativeErrorReport {
    /// Mean translational endpoint error per distance traveled, percent.
    pub t_rel_percent: f64,
    /// Mean rotational endpoint error per distance, degrees per 100 m.
    pub r_rel_deg_per_100m: f64,
    /// Path-length set that was evaluated.
    pub lengths_m: Vec<f64>,
    /// Whether the desk-scale substitute set was used.
    pub desk_scale: bool,
    /// Number of (start, length) windows that entered the means.
    pub window_count: usize,
}

/// Relative errors over all start indices and the applicable path-length
/// set.
pub fn relative_errors(est: &Trajectory, gt: &Trajectory) -> Result<RelativeErrorReport, EvalError> {
    if est.len() != gt.len() {
        return Err(EvalError::LengthMismatch { est: est.len(), gt: gt.len() });
    }
    for (i, (a, b)) in est.poses.iter().zip(gt.poses.iter()).enumerate() {
        if (a.timestamp - b.timestamp).abs() > 1e-6 {
            return Err(EvalError::TimeMisaligned(i));
        }
    }
    let dist = gt.cumulative_distance();
    let total = *dist.last().unwrap_or(&0.0);
    let desk_scale = total < ROAD_LENGTHS_M[0];
    let lengths: &[f64] = if desk_scale { &DESK_LENGTHS_M } else { &ROAD_LENGTHS_M };

    let mut t_sum = 0.0;
    let mut r_sum = 0.0;
    let mut count = 0usize;
    let mut used_lengths: Vec<f64> = Vec::new();
    for &len in lengths {
        let mut any = false;
        for start in 0..gt.len() {
            let target = dist[start] + len;
            if target > total {
                break;
            }
            let end = dist.partition_point(|&d| d < target);
            if end >= gt.len() {
                break;
            }
            let travelled = dist[end] - dist[start];
            if travelled <= 0.0 {
                continue;
            }
            let gt_rel = gt.poses[start].relative_to(&gt.poses[end]);
            let est_rel = est.poses[start].relative_to(&est.poses[end]);
            let t_err = (est_rel.translation - gt_rel.translation).norm();
            let r_err = wrap_angle(est_rel.theta - gt_rel.theta).abs();
            t_sum += t_err / travelled;
            r_sum += r_err.to_degrees() / travelled;
            count += 1;
            any = true;
        }
        if any {
            used_lengths.push(len);
        }
    }
    let (t_rel, r_rel) = if count > 0 {
        (100.0 * t_sum / count as f64, 100.0 * r_sum / count as f64)
    } else {
        (0.0, 0.0)
    };
    Ok(RelativeErrorReport {
        t_rel_percent: t_rel,
        r_rel_deg_per_100m: r_rel,
        lengths_m: used_lengths,
        desk_scale,
        window_count: count,
    })
}

/// Write a trajectory as KITTI 3x4 pose lines. The planar pose is
/// embedded with the constant elevation; pitch and roll are zero.
pub fn save_kitti_poses<P: AsRef<Path>>(path: P, traj: &Trajectory) -> Result<(), EvalError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for p in &traj.poses {
        let (s, c) = p.yaw.sin_cos();
        // Camera convention: x right, y down, z forward; yaw about -y.
        let vals = [
            c, 0.0, -s, -p.y, //
            0.0, 1.0, 0.0, traj.elevation, //
            s, 0.0, c, p.x,
        ];
        let line: Vec<String> = vals.iter().map(|v| format!("{v}")).collect();
        writeln!(out, "{}", line.join(" "))?;
    }
    Ok(())
}

/// Parse KITTI 3x4 pose lines into an absolute planar trajectory.
/// Elevation is taken from the first line and carried constant.
pub fn load_kitti_trajectory<P: AsRef<Path>>(path: P) -> Result<Trajectory, EvalError> {
    let file = std::fs::File::open(path)?;
    let mut poses = Vec::new();
    let mut elevation = 0.0;
    for (idx, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| EvalError::MalformedPoseLine { line: idx + 1, reason: e.to_string() })?;
        if vals.len() != 12 {
            return Err(EvalError::MalformedPoseLine {
                line: idx + 1,
                reason: format!("expected 12 values, got {}", vals.len()),
            });
        }
        if poses.is_empty() {
            elevation = vals[7];
        }
        poses.push(PlanarPose {
            timestamp: poses.len() as f64,
            x: vals[11],
            y: -vals[3],
            yaw: (-vals[2]).atan2(vals[10]),
        });
    }
    Ok(Trajectory { poses, elevation })
}

/// Write the planar CSV companion format: `timestamp,x,y,yaw`.
pub fn save_planar_csv<P: AsRef<Path>>(path: P, traj: &Trajectory) -> Result<(), EvalError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "timestamp,x,y,yaw")?;
    for p in &traj.poses {
        writeln!(out, "{},{},{},{}", p.timestamp, p.x, p.y, p.yaw)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn integrate_identities_stays_at_origin() {
        let rels = vec![Sim2Pose::identity(); 5];
        let traj = integrate_indexed(&rels).unwrap();
        assert_eq!(traj.len(), 6);
        for p in &traj.poses {
            assert_eq!(p.x, 0.0);
            assert_eq!(p.y, 0.0);
            assert_eq!(p.yaw, 0.0);
        }
    }

    #[test]
    fn four_quarter_turns_close_a_square() {
        let step = Sim2Pose::new(std::f64::consts::FRAC_PI_2, 1.0, 1.0, 0.0);
        let traj = integrate_indexed(&vec![step; 4]).unwrap();
        let last = traj.poses.last().unwrap();
        assert_abs_diff_eq!(last.x, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(last.y, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(wrap_angle(last.yaw), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn pure_translation_chain_reaches_endpoint() {
        let step = Sim2Pose::new(0.0, 1.0, 1.0, 0.0);
        let traj = integrate_indexed(&vec![step; 10]).unwrap();
        let last = traj.poses.last().unwrap();
        assert_abs_diff_eq!(last.x, 10.0, epsilon = 1e-12);
        assert_abs_diff_eq!(last.y, 0.0, epsilon = 1e-12);
    }

    fn straight_trajectory(n: usize, step_m: f64) -> Trajectory {
        let poses = (0..n)
            .map(|i| PlanarPose { timestamp: i as f64, x: i as f64 * step_m, y: 0.0, yaw: 0.0 })
            .collect();
        Trajectory { poses, elevation: 0.0 }
    }

    #[test]
    fn identical_trajectories_have_zero_error() {
        let gt = straight_trajectory(80, 1.0);
        let report = relative_errors(&gt, &gt).unwrap();
        assert_eq!(report.t_rel_percent, 0.0);
        assert_eq!(report.r_rel_deg_per_100m, 0.0);
        assert!(report.desk_scale);
        assert!(report.window_count > 0);
    }

    #[test]
    fn uniform_scale_gives_one_percent_error() {
        let gt = straight_trajectory(61, 1.0);
        let est = Trajectory {
            poses: gt.poses.iter().map(|p| PlanarPose { x: p.x * 1.01, ..*p }).collect(),
            elevation: 0.0,
        };
        let report = relative_errors(&est, &gt).unwrap();
        assert!(
            (report.t_rel_percent - 1.0).abs() < 0.05,
            "t_rel = {}",
            report.t_rel_percent
        );
    }

    #[test]
    fn constant_yaw_bias_maps_to_r_rel() {
        // 0.1 degree of heading bias per meter over a 100 m line.
        let gt = straight_trajectory(101, 1.0);
        let bias = 0.1f64.to_radians();
        let mut est_poses = Vec::new();
        let mut pose = PlanarPose::identity(0.0);
        est_poses.push(pose);
        for i in 1..gt.len() {
            pose = pose.compose(&Sim2Pose::new(bias, 1.0, 1.0, 0.0), i as f64);
            est_poses.push(pose);
        }
        let est = Trajectory { poses: est_poses, elevation: 0.0 };
        let report = relative_errors(&est, &gt).unwrap();
        assert!(!report.desk_scale);
        assert!(
            (report.r_rel_deg_per_100m - 10.0).abs() < 0.5,
            "r_rel = {}",
            report.r_rel_deg_per_100m
        );
    }

    #[test]
    fn errors_invariant_to_global_rigid_transform() {
        let step_a = Sim2Pose::new(0.02, 1.0, 0.9, 0.05);
        let step_b = Sim2Pose::new(0.015, 1.0, 1.05, -0.02);
        let gt = integrate_indexed(&vec![step_a; 40]).unwrap();
        let est = integrate_indexed(&vec![step_b; 40]).unwrap();
        let before = relative_errors(&est, &gt).unwrap();

        let shift = |t: &Trajectory| Trajectory {
            poses: t
                .poses
                .iter()
                .map(|p| {
                    let q = rot2(0.7) * p.position() + Vector2::new(12.0, -4.0);
                    PlanarPose { timestamp: p.timestamp, x: q.x, y: q.y, yaw: wrap_angle(p.yaw + 0.7) }
                })
                .collect(),
            elevation: 0.0,
        };
        let after = relative_errors(&shift(&est), &shift(&gt)).unwrap();
        assert_abs_diff_eq!(before.t_rel_percent, after.t_rel_percent, epsilon = 1e-9);
        assert_abs_diff_eq!(before.r_rel_deg_per_100m, after.r_rel_deg_per_100m, epsilon = 1e-9);
    }

    #[test]
    fn mismatched_lengths_are_rejected() {
        let gt = straight_trajectory(20, 1.0);
        let est = straight_trajectory(19, 1.0);
        assert!(matches!(
            relative_errors(&est, &gt),
            Err(EvalError::LengthMismatch { est: 19, gt: 20 })
        ));
    }

    #[test]
    fn kitti_pose_roundtrip() {
        let step = Sim2Pose::new(0.03, 1.0, 1.2, 0.1);
        let mut traj = integrate_indexed(&vec![step; 25]).unwrap();
        traj.elevation = 1.62;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("poses.txt");
        save_kitti_poses(&path, &traj).unwrap();
        let loaded = load_kitti_trajectory(&path).unwrap();
        assert_eq!(loaded.len(), traj.len());
        assert_abs_diff_eq!(loaded.elevation, 1.62, epsilon = 1e-12);
        for (a, b) in loaded.poses.iter().zip(traj.poses.iter()) {
            assert_abs_diff_eq!(a.x, b.x, epsilon = 1e-12);
            assert_abs_diff_eq!(a.y, b.y, epsilon = 1e-12);
            assert_abs_diff_eq!(wrap_angle(a.yaw - b.yaw), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn forward_translation_line_pair_gives_identity_rotation() {
        let a = PlanarPose::identity(0.0);
        let b = PlanarPose { timestamp: 1.0, x: 1.0, y: 0.0, yaw: 0.0 };
        let rel = a.relative_to(&b);
        assert_abs_diff_eq!(rel.theta, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(rel.translation.x, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(rel.translation.y, 0.0, epsilon = 1e-15);
    }
}
