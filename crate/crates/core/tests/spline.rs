mod common;

use common::{pose_param_diff, random_pose, random_twist, rng};
use nalgebra::Matrix4;
use rand::Rng;
use trajforge::geometry::{Se3Pose, Twist, Vec3};
use trajforge::spline::{cumulative_basis, spline_fit, Se3Spline};
use trajforge::Error;

const SEC: i64 = 1_000_000_000;

fn hat(xi: &Twist) -> Matrix4<f64> {
    let (w, v) = (xi.rotational, xi.translational);
    Matrix4::new(
        0.0, -w.z, w.y, v.x, w.z, 0.0, -w.x, v.y, -w.y, w.x, 0.0, v.z, 0.0, 0.0, 0.0, 0.0,
    )
}

/// Cumulative formula with matrix exponentials from the generic dense
/// routine instead of the closed-form SE(3) exponential.
fn formula_oracle(s: &Se3Spline, t: i64) -> Matrix4<f64> {
    let seg = ((t - s.t0()) / s.dt()) as usize;
    let u = (t - s.t0() - seg as i64 * s.dt()) as f64 / s.dt() as f64;
    let c = s.control_poses();
    let b = cumulative_basis(u);
    let mut m = c[seg - 1].to_matrix();
    for k in 1..=3 {
        let omega = (c[seg + k - 2].inverse() * c[seg + k - 1]).log().unwrap();
        m *= (hat(&omega) * b[k - 1]).exp();
    }
    m
}

#[test]
fn evaluation_matches_dense_formula_at_a_thousand_points() {
    let mut r = rng(3);
    let ctrl: Vec<Se3Pose> = (0..9).map(|_| random_pose(&mut r, 3.0)).collect();
    let s = Se3Spline::new(-2 * SEC, SEC / 3, ctrl).unwrap();
    let (a, b) = s.domain();
    let mut worst = 0.0f64;
    for k in 0..1000 {
        let t = a + (b - a - 1) * k / 999;
        let got = s.evaluate(t).unwrap().to_matrix();
        worst = worst.max((got - formula_oracle(&s, t)).amax());
    }
    assert!(worst < 1e-9, "worst deviation {worst}");
}

#[test]
fn translating_controls_reproduce_constant_velocity() {
    let ctrl: Vec<Se3Pose> = (0..10)
        .map(|k| Se3Pose::from_translation(Vec3::new(k as f64, 0.0, 0.0)))
        .collect();
    let s = Se3Spline::new(0, SEC, ctrl).unwrap();
    let (a, b) = s.domain();
    let x0 = s.evaluate(a).unwrap().translation().x;
    for k in 0..1000 {
        let t = a + (b - a - 1) * k / 999;
        let p = s.evaluate(t).unwrap();
        let expect = x0 + (t - a) as f64 / SEC as f64;
        assert!((p.translation().x - expect).abs() < 1e-9);
        assert!((formula_oracle(&s, t) - p.to_matrix()).amax() < 1e-12);
    }
}

#[test]
fn out_of_domain_reports_interval() {
    let s = Se3Spline::new(0, SEC, vec![Se3Pose::identity(); 6]).unwrap();
    let (a, b) = s.domain();
    assert_eq!((a, b), (SEC, 4 * SEC));
    match s.evaluate(b + 1) {
        Err(Error::OutOfDomain { start, end, .. }) => assert_eq!((start, end), (a, b)),
        other => panic!("expected out-of-domain, got {other:?}"),
    }
    assert!(s.evaluate(a - 1).is_err());
}

/// Second derivative of translation from one side of `t`, extrapolated to
/// second order.
fn one_sided_accel(s: &Se3Spline, t: i64, h: i64, dir: i64) -> Vec3 {
    let x = |k: i64| *s.evaluate(t + dir * k * h).unwrap().translation();
    let at = |step: i64| (x(0) - 2.0 * x(step) + x(2 * step)) / ((step * h) as f64 * 1e-9).powi(2);
    2.0 * at(1) - at(2)
}

#[test]
fn acceleration_is_continuous_across_knots() {
    let mut r = rng(8);
    for _ in 0..20 {
        let mut pose = random_pose(&mut r, 2.0);
        let ctrl: Vec<Se3Pose> = (0..10)
            .map(|_| {
                pose = pose * Se3Pose::exp(&random_twist(&mut r, 0.1, 0.3));
                pose
            })
            .collect();
        let s = Se3Spline::new(0, SEC, ctrl).unwrap();
        for knot in 2..7 {
            let t = knot * SEC;
            let left = one_sided_accel(&s, t, 1_000_000, -1);
            let right = one_sided_accel(&s, t, 1_000_000, 1);
            assert!(
                (left - right).amax() < 1e-5,
                "knot {knot}: {left:?} vs {right:?}"
            );
        }
    }
}

#[test]
fn fitting_samples_of_a_spline_recovers_its_controls() {
    let mut r = rng(21);
    let dt = SEC / 10;
    let mut pose = random_pose(&mut r, 2.0);
    let ctrl: Vec<Se3Pose> = (0..12)
        .map(|_| {
            pose = pose * Se3Pose::exp(&random_twist(&mut r, 0.05, 0.08));
            pose
        })
        .collect();
    let truth = Se3Spline::new(5 * SEC, dt, ctrl).unwrap();
    let (a, b) = truth.domain();
    let step = dt / 10;
    let samples: Vec<(i64, Se3Pose)> = (0..)
        .map(|k| a + k * step)
        .take_while(|t| *t < b)
        .map(|t| (t, truth.evaluate(t).unwrap()))
        .collect();
    let (fit, report) = spline_fit(&samples, dt).unwrap();
    assert_eq!(fit.t0(), truth.t0());
    assert_eq!(fit.control_poses().len(), truth.control_poses().len());
    assert!(report.rms < 1e-9, "rms {}", report.rms);
    for (f, t) in fit.control_poses().iter().zip(truth.control_poses()) {
        assert!((f.translation() - t.translation()).norm() < 1e-8);
    }
}

#[test]
fn fit_reproduces_screw_motion() {
    let xi = Twist::new(Vec3::new(0.1, -0.2, 0.3), Vec3::new(0.5, 0.1, -0.2));
    let samples: Vec<(i64, Se3Pose)> = (0..40)
        .map(|k| (k * SEC / 10, Se3Pose::exp(&xi.scale(k as f64 * 0.1))))
        .collect();
    let (fit, report) = spline_fit(&samples, SEC / 10).unwrap();
    assert!(report.rms < 1e-6);
    for (t, p) in &samples {
        let e = fit.evaluate(*t).unwrap();
        assert!(pose_param_diff(&e, p) < 1e-6);
    }
}

#[test]
fn fit_contract_errors() {
    let p = Se3Pose::identity();
    let three: Vec<(i64, Se3Pose)> = (0..3).map(|k| (k * SEC, p)).collect();
    assert!(matches!(
        spline_fit(&three, SEC / 2),
        Err(Error::InsufficientSamples(_))
    ));
    let unordered = vec![(0, p), (2 * SEC, p), (SEC, p), (4 * SEC, p)];
    assert!(matches!(
        spline_fit(&unordered, SEC),
        Err(Error::NonMonotonic { index: 2 })
    ));
    let short: Vec<(i64, Se3Pose)> = (0..5).map(|k| (k * SEC / 10, p)).collect();
    assert!(spline_fit(&short, SEC).is_err());
}

#[test]
fn constant_samples_give_constant_controls() {
    let mut r = rng(5);
    let p = random_pose(&mut r, 4.0);
    let samples: Vec<(i64, Se3Pose)> = (0..30)
        .map(|k| (k * SEC / 10 + r.random_range(0..1000), p))
        .collect();
    let (fit, report) = spline_fit(&samples, SEC / 5).unwrap();
    assert!(report.rms < 1e-9);
    for c in fit.control_poses() {
        assert!(pose_param_diff(c, &p) < 1e-9);
    }
}
