//! Gravity-aligned bird's-eye-view projection.
//!
//! A metric ground-plane grid ahead of the vehicle is projected through the
//! pinhole camera using the filtered attitude, and the front image is
//! bilinearly remapped onto it. The remap is differentiable in pitch and
//! roll; analytic gradients are provided alongside the projection.

use nalgebra::{Matrix3, Vector2, Vector3};
use ndarray::Array2;
use thiserror::Error;

use crate::geom::{
    rotation_attitude_dpitch, rotation_attitude_droll, rotation_from_attitude, Attitude,
    CameraIntrinsics, RigidTransform3,
};

/// Minimum depth in front of the camera for a projection to count.
const EPS_DEPTH: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum BevError {
    #[error("BEV resolution {0} is not a power of two")]
    ResolutionNotPowerOfTwo(usize),
    #[error("BEV extents must be positive and equal for a square grid (got {0} x {1})")]
    BadExtent(f64, f64),
    #[error("camera height above ground must be positive (got {0})")]
    BadHeight(f64),
    #[error("ROI {0:?} exceeds the {1}x{2} image")]
    RoiOutOfBounds(PixelRect, usize, usize),
}

/// Axis-aligned pixel rectangle, `u1`/`v1` exclusive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelRect {
    pub u0: usize,
    pub v0: usize,
    pub u1: usize,
    pub v1: usize,
}

impl PixelRect {
    pub fn full(width: usize, height: usize) -> Self {
        Self { u0: 0, v0: 0, u1: width, v1: height }
    }

    /// Lower half of the image: the region where the flat-ground
    /// assumption is plausible for a forward camera.
    pub fn lower_half(intr: &CameraIntrinsics) -> Self {
        Self { u0: 0, v0: intr.cy.ceil() as usize, u1: intr.width, v1: intr.height }
    }

    /// True when `(u, v)` can be sampled bilinearly with all four source
    /// pixels inside the rectangle.
    fn samplable(&self, u: f64, v: f64) -> bool {
        u >= self.u0 as f64 && u <= (self.u1 - 1) as f64 && v >= self.v0 as f64 && v <= (self.v1 - 1) as f64
    }
}

/// Geometry of the BEV patch.
///
/// The patch is square, `extent` meters per side at `resolution` pixels,
/// its near edge `forward_offset` meters ahead of the camera footprint.
/// Row 0 is the far edge; columns run left to right.
#[derive(Debug, Clone)]
pub struct BevConfig {
    /// Lateral patch extent, meters.
    pub extent_x: f64,
    /// Forward patch extent, meters.
    pub extent_y: f64,
    /// Pixels per side; must be a power of two for the FFT stages.
    pub resolution: usize,
    /// Height of the IMU above the ground plane, meters.
    pub const_z: f64,
    /// Distance from the camera footprint to the near patch edge, meters.
    pub forward_offset: f64,
    /// Region of the front image trusted to show flat ground.
    pub roi: PixelRect,
    /// Extrinsics: maps IMU-frame points into the camera frame.
    pub cam_from_imu: RigidTransform3,
}

impl BevConfig {
    /// Distance per pixel, meters.
    pub fn dpp(&self) -> f64 {
        self.extent_x / self.resolution as f64
    }

    pub fn validate(&self, intr: &CameraIntrinsics) -> Result<(), BevError> {
        if !self.resolution.is_power_of_two() {
            return Err(BevError::ResolutionNotPowerOfTwo(self.resolution));
        }
        if !(self.extent_x > 0.0) || (self.extent_x - self.extent_y).abs() > 1e-9 {
            return Err(BevError::BadExtent(self.extent_x, self.extent_y));
        }
        if !(self.const_z > 0.0) {
            return Err(BevError::BadHeight(self.const_z));
        }
        if self.roi.u1 > intr.width || self.roi.v1 > intr.height || self.roi.u0 >= self.roi.u1 || self.roi.v0 >= self.roi.v1 {
            return Err(BevError::RoiOutOfBounds(self.roi, intr.width, intr.height));
        }
        debug_assert!((self.dpp() * self.resolution as f64 - self.extent_x).abs() < 1e-9);
        Ok(())
    }

    /// Ground point (vehicle frame: x forward, y left, z up) at the center
    /// of BEV cell `(row, col)`.
    pub fn cell_to_ground(&self, row: f64, col: f64) -> Vector2<f64> {
        let dpp = self.dpp();
        let n = self.resolution as f64;
        let forward = self.forward_offset + (n - row - 0.5) * dpp;
        let left = (n / 2.0 - col - 0.5) * dpp;
        Vector2::new(forward, left)
    }

    /// Raster center used as the rotation origin when registering BEVs.
    pub fn raster_center(&self) -> Vector2<f64> {
        let c = (self.resolution as f64 - 1.0) / 2.0;
        Vector2::new(c, c)
    }
}

/// Standard forward-camera mount: camera at the IMU origin, looking along
/// the vehicle x axis, image u to the right, v downward.
pub fn forward_camera_extrinsics() -> RigidTransform3 {
    // Rows express camera axes in terms of IMU axes (x fwd, y left, z up).
    let r = Matrix3::new(
        0.0, -1.0, 0.0, //
        0.0, 0.0, -1.0, //
        1.0, 0.0, 0.0,
    );
    RigidTransform3::new(r, Vector3::zeros())
}

/// Metric top-down raster with a validity mask. Cells outside the camera
/// view are exactly zero and masked invalid.
#[derive(Debug, Clone)]
pub struct BevImage {
    pub pixels: Array2<f64>,
    pub mask: Array2<bool>,
    pub dpp: f64,
    pub frame_timestamp: f64,
}

impl BevImage {
    pub fn resolution(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Evenly spaced ground-plane points covered by the BEV patch, row-major.
pub fn ground_grid(cfg: &BevConfig) -> Vec<Vector3<f64>> {
    let n = cfg.resolution;
    let mut pts = Vec::with_capacity(n * n);
    for r in 0..n {
        for c in 0..n {
            let g = cfg.cell_to_ground(r as f64, c as f64);
            pts.push(Vector3::new(g.x, g.y, 0.0));
        }
    }
    pts
}

/// Camera pose in the gravity-aligned vehicle-local frame for a given
/// attitude: rotation from attitude composed with the mount extrinsics,
/// translation fixed at the configured height.
pub fn camera_pose_local(att: &Attitude, cfg: &BevConfig) -> RigidTransform3 {
    let r_imu = rotation_from_attitude(att);
    let imu_from_cam = cfg.cam_from_imu.inverse();
    RigidTransform3::new(
        r_imu * imu_from_cam.rotation,
        r_imu * imu_from_cam.translation + Vector3::new(0.0, 0.0, cfg.const_z),
    )
}

/// A projected grid point: continuous image coordinates plus validity.
#[derive(Debug, Clone, Copy)]
pub struct ProjectedPoint {
    pub u: f64,
    pub v: f64,
    pub valid: bool,
}

/// Project ground points into the front image for a given attitude.
pub fn project_to_image(
    points: &[Vector3<f64>],
    att: &Attitude,
    intr: &CameraIntrinsics,
    cfg: &BevConfig,
) -> Vec<ProjectedPoint> {
    let cam = camera_pose_local(att, cfg);
    let r_t = cam.rotation.transpose();
    points
        .iter()
        .map(|p| {
            let pc = r_t * (p - cam.translation);
            if pc.z <= EPS_DEPTH {
                return ProjectedPoint { u: 0.0, v: 0.0, valid: false };
            }
            ProjectedPoint {
                u: intr.fx * pc.x / pc.z + intr.cx,
                v: intr.fy * pc.y / pc.z + intr.cy,
                valid: true,
            }
        })
        .collect()
}

/// Image-coordinate derivatives of a projected point with respect to
/// pitch and roll.
#[derive(Debug, Clone, Copy, Default)]
pub struct ProjectionJacobian {
    pub du_dpitch: f64,
    pub dv_dpitch: f64,
    pub du_droll: f64,
    pub dv_droll: f64,
}

/// Like [`project_to_image`] but also returns analytic attitude Jacobians.
pub fn project_with_jacobian(
    points: &[Vector3<f64>],
    att: &Attitude,
    intr: &CameraIntrinsics,
    cfg: &BevConfig,
) -> Vec<(ProjectedPoint, ProjectionJacobian)> {
    let r_imu = rotation_from_attitude(att);
    let dr_dp = rotation_attitude_dpitch(att);
    let dr_dr = rotation_attitude_droll(att);
    let e = cfg.cam_from_imu.inverse();
    let t0 = Vector3::new(0.0, 0.0, cfg.const_z);

    // P_c = E_r^T R^T (P - t0) - E_r^T E_t, so only the R^T term varies
    // with attitude.
    let ert = e.rotation.transpose();
    let fixed = ert * e.translation;

    points
        .iter()
        .map(|p| {
            let w = p - t0;
            let pc = ert * (r_imu.transpose() * w) - fixed;
            if pc.z <= EPS_DEPTH {
                return (
                    ProjectedPoint { u: 0.0, v: 0.0, valid: false },
                    ProjectionJacobian::default(),
                );
            }
            let u = intr.fx * pc.x / pc.z + intr.cx;
            let v = intr.fy * pc.y / pc.z + intr.cy;
            let dpc_dp = ert * (dr_dp.transpose() * w);
            let dpc_dr = ert * (dr_dr.transpose() * w);
            let z2 = pc.z * pc.z;
            let jac = ProjectionJacobian {
                du_dpitch: intr.fx * (dpc_dp.x * pc.z - pc.x * dpc_dp.z) / z2,
                dv_dpitch: intr.fy * (dpc_dp.y * pc.z - pc.y * dpc_dp.z) / z2,
                du_droll: intr.fx * (dpc_dr.x * pc.z - pc.x * dpc_dr.z) / z2,
                dv_droll: intr.fy * (dpc_dr.y * pc.z - pc.y * dpc_dr.z) / z2,
            };
            (ProjectedPoint { u, v, valid: true }, jac)
        })
        .collect()
}

/// Bilinear sample of `img` at continuous `(u, v)`; caller guarantees the
/// coordinates are samplable.
fn bilinear(img: &Array2<f64>, u: f64, v: f64) -> f64 {
    let x0 = u.floor();
    let y0 = v.floor();
    let fx = u - x0;
    let fy = v - y0;
    let x0 = x0 as usize;
    let y0 = y0 as usize;
    let x1 = (x0 + 1).min(img.ncols() - 1);
    let y1 = (y0 + 1).min(img.nrows() - 1);
    let a = img[(y0, x0)];
    let b = img[(y0, x1)];
    let c = img[(y1, x0)];
    let d = img[(y1, x1)];
    a * (1.0 - fx) * (1.0 - fy) + b * fx * (1.0 - fy) + c * (1.0 - fx) * fy + d * fx * fy
}

/// Spatial gradient of the bilinear interpolant at `(u, v)`.
fn bilinear_grad(img: &Array2<f64>, u: f64, v: f64) -> (f64, f64) {
    let x0 = u.floor();
    let y0 = v.floor();
    let fx = u - x0;
    let fy = v - y0;
    let x0 = x0 as usize;
    let y0 = y0 as usize;
    let x1 = (x0 + 1).min(img.ncols() - 1);
    let y1 = (y0 + 1).min(img.nrows() - 1);
    let a = img[(y0, x0)];
    let b = img[(y0, x1)];
    let c = img[(y1, x0)];
    let d = img[(y1, x1)];
    let du = (b - a) * (1.0 - fy) + (d - c) * fy;
    let dv = (c - a) * (1.0 - fx) + (d - b) * fx;
    (du, dv)
}

/// Remap the front image onto the BEV grid through projected coordinates.
/// Samples outside the ROI or from invalid projections are zero and
/// masked out.
pub fn remap(
    front: &Array2<f64>,
    coords: &[ProjectedPoint],
    roi: &PixelRect,
    resolution: usize,
    dpp: f64,
    frame_timestamp: f64,
) -> BevImage {
    assert_eq!(coords.len(), resolution * resolution, "coordinate field does not match the grid");
    let mut pixels = Array2::zeros((resolution, resolution));
    let mut mask = Array2::from_elem((resolution, resolution), false);
    for (idx, pt) in coords.iter().enumerate() {
        if !pt.valid || !roi.samplable(pt.u, pt.v) {
            continue;
        }
        let r = idx / resolution;
        let c = idx % resolution;
        pixels[(r, c)] = bilinear(front, pt.u, pt.v);
        mask[(r, c)] = true;
    }
    BevImage { pixels, mask, dpp, frame_timestamp }
}

/// Full projection: grid generation, pinhole projection, remap.
pub fn bev_from_frame(
    front: &Array2<f64>,
    att: &Attitude,
    intr: &CameraIntrinsics,
    cfg: &BevConfig,
    frame_timestamp: f64,
) -> BevImage {
    let grid = ground_grid(cfg);
    let coords = project_to_image(&grid, att, intr, cfg);
    remap(front, &coords, &cfg.roi, cfg.resolution, cfg.dpp(), frame_timestamp)
}

/// Analytic per-pixel gradients of the BEV intensities with respect to
/// pitch and roll. Invalid cells get zero gradients.
pub fn bev_attitude_gradient(
    front: &Array2<f64>,
    att: &Attitude,
    intr: &CameraIntrinsics,
    cfg: &BevConfig,
) -> (Array2<f64>, Array2<f64>) {
    let grid = ground_grid(cfg);
    let projected = project_with_jacobian(&grid, att, intr, cfg);
    let n = cfg.resolution;
    let mut dpitch = Array2::zeros((n, n));
    let mut droll = Array2::zeros((n, n));
    for (idx, (pt, jac)) in projected.iter().enumerate() {
        if !pt.valid || !cfg.roi.samplable(pt.u, pt.v) {
            continue;
        }
        let (gi_du, gi_dv) = bilinear_grad(front, pt.u, pt.v);
        let r = idx / n;
        let c = idx % n;
        dpitch[(r, c)] = gi_du * jac.du_dpitch + gi_dv * jac.dv_dpitch;
        droll[(r, c)] = gi_du * jac.du_droll + gi_dv * jac.dv_droll;
    }
    (dpitch, droll)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn test_intrinsics() -> CameraIntrinsics {
        CameraIntrinsics { fx: 250.0, fy: 250.0, cx: 320.0, cy: 240.0, width: 640, height: 480 }
    }

    fn test_cfg(intr: &CameraIntrinsics) -> BevConfig {
        BevConfig {
            extent_x: 10.0,
            extent_y: 10.0,
            resolution: 64,
            const_z: 1.5,
            forward_offset: 2.0,
            roi: PixelRect::full(intr.width, intr.height),
            cam_from_imu: forward_camera_extrinsics(),
        }
    }

    /// Nadir camera at height `h` with image x along vehicle x.
    fn nadir_cfg(h: f64, intr: &CameraIntrinsics) -> BevConfig {
        let r = Matrix3::new(1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0);
        BevConfig {
            cam_from_imu: RigidTransform3::new(r, Vector3::zeros()).inverse(),
            const_z: h,
            ..test_cfg(intr)
        }
    }

    fn smooth_front(intr: &CameraIntrinsics) -> Array2<f64> {
        Array2::from_shape_fn((intr.height, intr.width), |(v, u)| {
            0.5 + 0.25 * (u as f64 / 17.0).sin() * (v as f64 / 11.0).cos()
                + 0.2 * (u as f64 / 41.0 + v as f64 / 23.0).sin()
        })
    }

    #[test]
    fn grid_spacing_and_count() {
        let intr = test_intrinsics();
        let mut cfg = test_cfg(&intr);
        cfg.extent_x = 2.0;
        cfg.extent_y = 2.0;
        cfg.resolution = 2;
        let grid = ground_grid(&cfg);
        assert_eq!(grid.len(), 4);
        // 1 m spacing along the forward axis between the two rows.
        assert_abs_diff_eq!(grid[0].x - grid[2].x, 1.0, epsilon = 1e-12);
        assert!(grid.iter().all(|p| p.z == 0.0));
    }

    #[test]
    fn grid_count_is_resolution_squared() {
        let intr = test_intrinsics();
        let cfg = test_cfg(&intr);
        assert_eq!(ground_grid(&cfg).len(), cfg.resolution * cfg.resolution);
    }

    #[test]
    fn nadir_point_on_axis_hits_principal_point() {
        let intr = test_intrinsics();
        let cfg = nadir_cfg(1.5, &intr);
        let pts = [Vector3::new(0.0, 0.0, 0.0)];
        let proj = project_to_image(&pts, &Attitude::zero(), &intr, &cfg);
        assert!(proj[0].valid);
        assert_abs_diff_eq!(proj[0].u, intr.cx, epsilon = 1e-9);
        assert_abs_diff_eq!(proj[0].v, intr.cy, epsilon = 1e-9);
    }

    #[test]
    fn nadir_offset_point_matches_pinhole() {
        let intr = test_intrinsics();
        let h = 2.0;
        let cfg = nadir_cfg(h, &intr);
        let x = 0.7;
        let pts = [Vector3::new(x, 0.0, 0.0)];
        let proj = project_to_image(&pts, &Attitude::zero(), &intr, &cfg);
        assert!(proj[0].valid);
        assert_abs_diff_eq!(proj[0].u, intr.cx + intr.fx * x / h, epsilon = 1e-9);
        assert_abs_diff_eq!(proj[0].v, intr.cy, epsilon = 1e-9);
    }

    #[test]
    fn point_behind_camera_is_invalid() {
        let intr = test_intrinsics();
        let cfg = test_cfg(&intr);
        let pts = [Vector3::new(-5.0, 0.0, 0.0)];
        let proj = project_to_image(&pts, &Attitude::zero(), &intr, &cfg);
        assert!(!proj[0].valid);
    }

    #[test]
    fn remap_of_constant_image_is_constant() {
        let intr = test_intrinsics();
        let cfg = test_cfg(&intr);
        let front = Array2::from_elem((intr.height, intr.width), 0.37);
        let bev = bev_from_frame(&front, &Attitude::zero(), &intr, &cfg, 0.0);
        assert!(bev.valid_count() > 100, "expected a nontrivial valid wedge");
        for (p, m) in bev.pixels.iter().zip(bev.mask.iter()) {
            if *m {
                assert_abs_diff_eq!(*p, 0.37, epsilon = 1e-12);
            } else {
                assert_eq!(*p, 0.0);
            }
        }
    }

    #[test]
    fn remap_at_integer_coordinates_is_exact() {
        let front = Array2::from_shape_fn((8, 8), |(v, u)| (v * 8 + u) as f64);
        let coords: Vec<ProjectedPoint> = (0..4)
            .map(|i| ProjectedPoint { u: (i % 2 + 2) as f64, v: (i / 2 + 3) as f64, valid: true })
            .collect();
        let roi = PixelRect::full(8, 8);
        let bev = remap(&front, &coords, &roi, 2, 1.0, 0.0);
        assert_eq!(bev.pixels[(0, 0)], front[(3, 2)]);
        assert_eq!(bev.pixels[(0, 1)], front[(3, 3)]);
        assert_eq!(bev.pixels[(1, 0)], front[(4, 2)]);
        assert_eq!(bev.pixels[(1, 1)], front[(4, 3)]);
    }

    #[test]
    fn shrinking_roi_never_adds_valid_pixels() {
        let intr = test_intrinsics();
        let mut cfg = test_cfg(&intr);
        let front = smooth_front(&intr);
        let att = Attitude::new(0.02, -0.01);
        let full = bev_from_frame(&front, &att, &intr, &cfg, 0.0);
        cfg.roi = PixelRect { u0: 80, v0: 200, u1: 560, v1: 470 };
        let shrunk = bev_from_frame(&front, &att, &intr, &cfg, 0.0);
        for (a, b) in shrunk.mask.iter().zip(full.mask.iter()) {
            assert!(!*a || *b, "shrunk ROI produced a valid pixel the full ROI lacked");
        }
        assert!(shrunk.valid_count() < full.valid_count());
    }

    #[test]
    fn attitude_gradient_matches_finite_differences() {
        let intr = test_intrinsics();
        let cfg = test_cfg(&intr);
        let front = smooth_front(&intr);
        let att = Attitude::new(0.03, -0.02);
        let (dpitch, droll) = bev_attitude_gradient(&front, &att, &intr, &cfg);

        let h = 1e-5;
        let bp = bev_from_frame(&front, &Attitude::new(att.pitch + h, att.roll), &intr, &cfg, 0.0);
        let bm = bev_from_frame(&front, &Attitude::new(att.pitch - h, att.roll), &intr, &cfg, 0.0);
        let rp = bev_from_frame(&front, &Attitude::new(att.pitch, att.roll + h), &intr, &cfg, 0.0);
        let rm = bev_from_frame(&front, &Attitude::new(att.pitch, att.roll - h), &intr, &cfg, 0.0);

        let n = cfg.resolution;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut checked = 0;
        while checked < 100 {
            let r = rng.gen_range(0..n);
            let c = rng.gen_range(0..n);
            // Stay away from mask boundaries so the perturbed projections
            // stay valid.
            if !(bp.mask[(r, c)] && bm.mask[(r, c)] && rp.mask[(r, c)] && rm.mask[(r, c)]) {
                continue;
            }
            let fd_p = (bp.pixels[(r, c)] - bm.pixels[(r, c)]) / (2.0 * h);
            let fd_r = (rp.pixels[(r, c)] - rm.pixels[(r, c)]) / (2.0 * h);
            for (analytic, fd) in [(dpitch[(r, c)], fd_p), (droll[(r, c)], fd_r)] {
                let scale = fd.abs().max(1e-3);
                assert!(
                    (analytic - fd).abs() / scale < 1e-2,
                    "gradient mismatch at ({r},{c}): analytic {analytic} vs fd {fd}"
                );
            }
            checked += 1;
        }
    }

    #[test]
    fn config_validation_catches_bad_inputs() {
        let intr = test_intrinsics();
        let mut cfg = test_cfg(&intr);
        cfg.resolution = 100;
        assert!(matches!(cfg.validate(&intr), Err(BevError::ResolutionNotPowerOfTwo(100))));
        let mut cfg = test_cfg(&intr);
        cfg.roi.u1 = 9999;
        assert!(matches!(cfg.validate(&intr), Err(BevError::RoiOutOfBounds(..))));
        let cfg = test_cfg(&intr);
        assert!(cfg.validate(&intr).is_ok());
    }
}
