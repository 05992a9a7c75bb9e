//! SE(3) exponential and logarithm, the generalized minus and camera
//! projection with radial distortion.

use trajforge::generalized_minus;
use trajforge::geometry::{CameraIntrinsics, Se3Pose, Twist, Vec3};

fn main() -> trajforge::Result<()> {
    let xi = Twist::new(Vec3::new(0.1, -0.2, 0.3), Vec3::new(1.0, 2.0, 0.5));
    let t = Se3Pose::exp(&xi);
    println!("exp(xi) quaternion (w,x,y,z) = {:?}", t.wxyz());
    println!("translation = {}", t.translation().transpose());
    println!("log(exp(xi)) = {:?}", t.log()?.to_vector().as_slice());

    let b = Se3Pose::from_translation(Vec3::new(3.0, 0.0, 0.0));
    let a = b.compose(&t);
    let d = generalized_minus(&a, &b)?;
    println!("(b * exp(xi)) minus b = {:?}", d.to_vector().as_slice());

    let k = CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, -0.02, 0.005, 640, 480)?;
    let p = Vec3::new(0.4, -0.3, 2.0);
    let px = k.project(&p)?;
    let back = k.unproject(&px, p.z);
    println!(
        "point {} -> pixel {} -> back {}",
        p.transpose(),
        px.transpose(),
        back.transpose()
    );
    Ok(())
}
