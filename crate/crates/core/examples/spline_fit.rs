//! Fit a cumulative cubic SE(3) spline to noisy samples of a circular
//! trajectory and compare it with the truth.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use trajforge::geometry::{Twist, Vec3};
use trajforge::simulator::{gt_pose, sequence_trajectory};
use trajforge::spline::spline_fit;
use trajforge::Se3Pose;

fn main() -> trajforge::Result<()> {
    let traj = sequence_trajectory(0, 0.5, 10.0);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let noise = Normal::new(0.0, 0.002).unwrap();
    let samples: Vec<(i64, Se3Pose)> = (0..=1000)
        .map(|k| {
            let t = k as f64 * 0.01;
            let n = Twist::new(
                Vec3::new(
                    noise.sample(&mut rng),
                    noise.sample(&mut rng),
                    noise.sample(&mut rng),
                ),
                Vec3::new(
                    noise.sample(&mut rng),
                    noise.sample(&mut rng),
                    noise.sample(&mut rng),
                ),
            );
            (
                (t * 1e9) as i64,
                gt_pose(&traj, t).unwrap() * Se3Pose::exp(&n),
            )
        })
        .collect();
    let (spline, report) = spline_fit(&samples, 100_000_000)?;
    println!(
        "control poses: {}, iterations: {}",
        spline.control_poses().len(),
        report.iterations
    );
    println!(
        "fit rms: rotation {:.5} rad, translation {:.5} m",
        report.rms_rotation, report.rms_translation
    );
    let (a, b) = spline.domain();
    let mut worst = 0.0f64;
    for t in (a..b).step_by(37_000_000) {
        let err = (spline.evaluate(t)?.translation()
            - gt_pose(&traj, t as f64 * 1e-9)?.translation())
        .norm();
        worst = worst.max(err);
    }
    println!("largest position error against the true trajectory: {worst:.5} m");
    Ok(())
}
