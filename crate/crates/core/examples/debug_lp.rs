use vio_core::bev::*;
use vio_core::geom::{Attitude, CameraIntrinsics};
use vio_core::metrics::PlanarPose;
use vio_core::phasecorr::*;
use vio_core::synth::*;

fn main() {
    let intr = CameraIntrinsics { fx: 250.0, fy: 250.0, cx: 320.0, cy: 240.0, width: 640, height: 480 };
    let bev_cfg = BevConfig {
        extent_x: 10.0, extent_y: 10.0, resolution: 128, const_z: 1.5,
        forward_offset: 4.0, roi: PixelRect::full(intr.width, intr.height),
        cam_from_imu: forward_camera_extrinsics(),
    };
    let tex = GroundTexture::new(7, 4.0, 4);
    // Pure rotation pair: vehicle yawed by 2.3 deg, no translation.
    let th = 2.3f64.to_radians();
    let p0 = PlanarPose { timestamp: 0.0, x: 0.0, y: 0.0, yaw: 0.0 };
    let p1 = PlanarPose { timestamp: 0.4, x: 0.0, y: 0.0, yaw: th };
    let att = Attitude::zero();
    let f0 = render_ground_view(&tex, &intr, &camera_pose_world(&p0, &att, 1.5, &bev_cfg.cam_from_imu));
    let f1 = render_ground_view(&tex, &intr, &camera_pose_world(&p1, &att, 1.5, &bev_cfg.cam_from_imu));
    let b0 = bev_from_frame(&f0, &att, &intr, &bev_cfg, 0.0);
    let b1 = bev_from_frame(&f1, &att, &intr, &bev_cfg, 0.4);

    for (name, cfg) in [
        ("default", DpcConfig::default()),
        ("ang512", DpcConfig { angular_bins: 512, ..DpcConfig::default() }),
    ] {
        let (theta, scale, h) = estimate_rot_scale(&b0, &b1, &cfg).unwrap();
        let mut cells: Vec<((usize, usize), f64)> = h.values.indexed_iter().map(|(i, v)| (i, *v)).collect();
        cells.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        let expect_bins = th * cfg.angular_bins as f64 / std::f64::consts::PI;
        println!(
            "{name}: theta {:.3} deg (want 2.3), scale {:.4}; expected angle shift {:.1} bins; top cells {:?}",
            theta.to_degrees(), scale, expect_bins,
            &cells[..8].iter().map(|(i, v)| (*i, (*v * 1e4).round() / 1e4)).collect::<Vec<_>>()
        );
    }
    // larger rotation: 8 deg
    let p2 = PlanarPose { timestamp: 0.4, x: 0.0, y: 0.0, yaw: 8f64.to_radians() };
    let f2 = render_ground_view(&tex, &intr, &camera_pose_world(&p2, &att, 1.5, &bev_cfg.cam_from_imu));
    let b2 = bev_from_frame(&f2, &att, &intr, &bev_cfg, 0.4);
    let (theta, scale, h) = estimate_rot_scale(&b0, &b2, &DpcConfig::default()).unwrap();
    let mut cells: Vec<((usize, usize), f64)> = h.values.indexed_iter().map(|(i, v)| (i, *v)).collect();
    cells.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    println!(
        "8deg: theta {:.3} deg (want 8), scale {:.4}; expected shift {:.1} bins; top {:?}",
        theta.to_degrees(), scale, 8f64.to_radians() * 256.0 / std::f64::consts::PI,
        &cells[..8].iter().map(|(i, v)| (*i, (*v * 1e4).round() / 1e4)).collect::<Vec<_>>()
    );
}
