//! Motion-compensate two LiDAR scans with wheel odometry and register them
//! with point-to-point and point-to-plane ICP.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use trajforge::pointcloud::{register, undistort_scan, IcpConfig, IcpObjective};
use trajforge::simulator::{
    default_lidar_extrinsic, gt_pose, sequence_trajectory, simulate_lidar, simulate_odometry,
    LidarModel, NoiseConfig, OdometryModel, SyntheticWorld,
};

fn main() -> trajforge::Result<()> {
    let world = SyntheticWorld::four_rooms(1, 0);
    let traj = sequence_trajectory(0, 1.0, 4.0);
    let ext = default_lidar_extrinsic();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let noise = NoiseConfig::default();
    let odom = simulate_odometry(&traj, 0, &OdometryModel::default(), &noise, &mut rng)?;
    let scans = simulate_lidar(
        &world,
        &traj,
        0,
        &ext,
        &LidarModel {
            scan_every: 1,
            ..LidarModel::default()
        },
        noise.range_std,
        &mut rng,
    )?;
    let (a, b) = (&scans[0], &scans[20]);
    let ca = undistort_scan(a, &ext, &odom)?;
    let cb = undistort_scan(b, &ext, &odom)?;
    println!("scan A: {} points, scan B: {} points", ca.len(), cb.len());

    let truth = gt_pose(&traj, a.start_ns as f64 * 1e-9)?.inverse()
        * gt_pose(&traj, b.start_ns as f64 * 1e-9)?;
    let init = odom.pose_at(a.start_ns as f64)?.inverse() * odom.pose_at(b.start_ns as f64)?;
    for objective in [IcpObjective::PointToPoint, IcpObjective::PointToPlane] {
        let r = register(&cb, &ca, &init, &IcpConfig::default(), objective)?;
        let err = (r.pose.translation() - truth.translation()).norm();
        println!(
            "{:>14}: {} iterations, fitness {:.3}, rmse {:.4} m, position error {:.4} m (odometry guess {:.4} m)",
            objective.as_str(),
            r.iterations,
            r.fitness,
            r.rmse,
            err,
            (init.translation() - truth.translation()).norm()
        );
    }
    Ok(())
}
