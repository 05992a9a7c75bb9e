#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, Matrix3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trajforge::bundle::{BaProblem, ImageRecord, Landmark, Observation};
use trajforge::geometry::{CameraIntrinsics, RigExtrinsic, Se3Pose, Twist, Vec3};
use trajforge::localize::GrayImage;
use trajforge::posegraph::{edge_residual, EdgeKind, GraphEdge, GraphNode, PoseGraph};
use trajforge::simulator::{camera_mount, default_intrinsics};
use trajforge::spline::Se3Spline;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_twist(rng: &mut ChaCha8Rng, rot: f64, trans: f64) -> Twist {
    let mut v = || rng.random::<f64>() * 2.0 - 1.0;
    Twist::new(
        Vec3::new(v(), v(), v()) * rot,
        Vec3::new(v(), v(), v()) * trans,
    )
}

pub fn random_pose(rng: &mut ChaCha8Rng, trans: f64) -> Se3Pose {
    let axis = loop {
        let v = Vec3::new(
            rng.random::<f64>() - 0.5,
            rng.random::<f64>() - 0.5,
            rng.random::<f64>() - 0.5,
        );
        if v.norm() > 1e-3 {
            break v.normalize();
        }
    };
    let angle = rng.random::<f64>() * 3.0;
    let t = Vec3::new(
        rng.random::<f64>() - 0.5,
        rng.random::<f64>() - 0.5,
        rng.random::<f64>() - 0.5,
    ) * 2.0
        * trans;
    Se3Pose::exp(&Twist::new(axis * angle, Vec3::zeros())) * Se3Pose::from_translation(t)
}

/// Largest difference over translation and (sign-aligned) quaternion
/// components.
pub fn pose_param_diff(a: &Se3Pose, b: &Se3Pose) -> f64 {
    let (qa, qb) = (a.wxyz(), b.wxyz());
    let s = if qa.iter().zip(&qb).map(|(x, y)| x * y).sum::<f64>() < 0.0 {
        -1.0
    } else {
        1.0
    };
    let dq = qa
        .iter()
        .zip(&qb)
        .map(|(x, y)| (x - s * y).abs())
        .fold(0.0, f64::max);
    dq.max((a.translation() - b.translation()).amax())
}

/// Rotation angle between two poses from the rotation-matrix trace.
pub fn trace_angle(a: &Se3Pose, b: &Se3Pose) -> f64 {
    let r: Matrix3<f64> = a.rotation_matrix().transpose() * b.rotation_matrix();
    ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0).acos()
}

// ---- pose graphs ----

/// Random connected graph: a chain plus extra loop edges with noisy
/// measurements and random SPD information; node 0 is fixed and the other
/// nodes start from perturbed truth.
pub fn random_graph(seed: u64, max_nodes: usize) -> PoseGraph {
    let mut r = rng(seed);
    let n = r.random_range(3..=max_nodes);
    let truth: Vec<Se3Pose> = (0..n).map(|_| random_pose(&mut r, 5.0)).collect();
    let mut pairs: Vec<(usize, usize)> = (0..n - 1).map(|i| (i, i + 1)).collect();
    for _ in 0..r.random_range(0..=n) {
        let a = r.random_range(0..n);
        let b = r.random_range(0..n);
        if a != b && !pairs.contains(&(a, b)) {
            pairs.push((a, b));
        }
    }
    let edges = pairs
        .into_iter()
        .map(|(a, b)| {
            let noise = random_twist(&mut r, 0.02, 0.05);
            let rel = truth[a].inverse() * truth[b] * Se3Pose::exp(&noise);
            let m = DMatrix::<f64>::from_fn(6, 6, |_, _| r.random::<f64>() - 0.5);
            let info = m.clone() * m.transpose() + DMatrix::<f64>::identity(6, 6) * 0.5;
            GraphEdge {
                from: a,
                to: b,
                rel,
                information: trajforge::geometry::Mat6::from_iterator(info.iter().copied()),
                kind: EdgeKind::Loop,
            }
        })
        .collect();
    let nodes = truth
        .iter()
        .enumerate()
        .map(|(i, t)| GraphNode {
            id: i,
            sequence: "s".into(),
            t_ns: i as i64,
            pose: if i == 0 {
                *t
            } else {
                *t * Se3Pose::exp(&random_twist(&mut r, 0.1, 0.2))
            },
        })
        .collect();
    PoseGraph {
        nodes,
        edges,
        fixed: BTreeSet::from([0]),
    }
}

fn whitened_residuals(g: &PoseGraph, poses: &[Se3Pose]) -> DVector<f64> {
    let mut out = Vec::with_capacity(6 * g.edges.len());
    for e in &g.edges {
        let r = edge_residual(&poses[e.from], &poses[e.to], &e.rel)
            .unwrap()
            .to_vector();
        let l = e.information.cholesky().unwrap().l();
        out.extend((l.transpose() * r).iter().copied());
    }
    DVector::from_vec(out)
}

/// Generic dense Levenberg–Marquardt with central-difference Jacobians.
/// Node ids must equal their index.
pub fn dense_graph_oracle(g: &PoseGraph) -> Vec<Se3Pose> {
    let free: Vec<usize> = (0..g.nodes.len())
        .filter(|i| !g.fixed.contains(i))
        .collect();
    let mut poses: Vec<Se3Pose> = g.nodes.iter().map(|n| n.pose).collect();
    let apply = |poses: &[Se3Pose], d: &DVector<f64>| -> Vec<Se3Pose> {
        let mut out = poses.to_vec();
        for (k, &i) in free.iter().enumerate() {
            let v = Vector6::from_iterator(d.rows(6 * k, 6).iter().copied());
            out[i] = out[i] * Se3Pose::exp(&Twist::from_vector(&v));
        }
        out
    };
    let dim = 6 * free.len();
    let mut r = whitened_residuals(g, &poses);
    let mut cost = r.norm_squared();
    let mut lambda = 1e-4;
    for _ in 0..500 {
        let h = 1e-6;
        let mut j = DMatrix::<f64>::zeros(r.len(), dim);
        for c in 0..dim {
            let mut d = DVector::zeros(dim);
            d[c] = h;
            let rp = whitened_residuals(g, &apply(&poses, &d));
            d[c] = -h;
            let rm = whitened_residuals(g, &apply(&poses, &d));
            j.set_column(c, &((rp - rm) / (2.0 * h)));
        }
        let jtj = j.transpose() * &j;
        let g_vec = j.transpose() * &r;
        if g_vec.amax() < 1e-13 {
            break;
        }
        let mut improved = false;
        for _ in 0..30 {
            let mut a = jtj.clone();
            for i in 0..dim {
                a[(i, i)] += lambda * jtj[(i, i)].max(1e-12);
            }
            let step = a.cholesky().map(|c| c.solve(&(-&g_vec)));
            if let Some(step) = step {
                let trial = apply(&poses, &step);
                let rt = whitened_residuals(g, &trial);
                let ct = rt.norm_squared();
                if ct <= cost {
                    let done = cost - ct <= 1e-16 * cost || step.amax() < 1e-14;
                    poses = trial;
                    r = rt;
                    cost = ct;
                    lambda = (lambda / 10.0).max(1e-12);
                    improved = !done;
                    break;
                }
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    poses
}

// ---- bundle adjustment ----

/// Small self-consistent problem around one spline: two cameras, a dozen
/// images and landmarks seen from several of them, every state perturbed.
pub fn random_ba_problem(seed: u64) -> BaProblem {
    let mut r = rng(seed);
    let dt = 1_000_000_000;
    let controls: Vec<Se3Pose> = (0..8)
        .map(|i| {
            Se3Pose::new(
                nalgebra::UnitQuaternion::from_euler_angles(
                    0.0,
                    0.0,
                    0.1 * i as f64 + 0.05 * r.random::<f64>(),
                ),
                Vec3::new(0.5 * i as f64, 0.2 * r.random::<f64>(), 0.0),
            )
        })
        .collect();
    let spline = Se3Spline::new(0, dt, controls).unwrap();
    let (lo, hi) = spline.domain();
    let cams = [
        ("camA", camera_mount(0.2, 0.1, 0.2, 1.0)),
        ("camB", camera_mount(-0.4, 0.0, 0.2, 1.2)),
    ];
    let mut intrinsics = BTreeMap::new();
    let mut rig = Vec::new();
    for (id, mount) in &cams {
        let k = default_intrinsics();
        let p = k.params();
        let jitter: Vec<f64> = p
            .iter()
            .enumerate()
            .map(|(i, v)| {
                if i < 4 {
                    v * (1.0 + 0.01 * (r.random::<f64>() - 0.5))
                } else {
                    *v
                }
            })
            .collect();
        intrinsics.insert(id.to_string(), k.with_params(&jitter));
        rig.push(RigExtrinsic {
            sensor_id: id.to_string(),
            pose: *mount * Se3Pose::exp(&random_twist(&mut r, 0.01, 0.0)),
            translation_fixed: true,
        });
    }
    let mut images = Vec::new();
    for k in 0..6 {
        let t = lo + (hi - lo) * k / 6 + 1000;
        for (c, (id, _)) in cams.iter().enumerate() {
            let pose = spline.evaluate(t).unwrap()
                * rig[c].pose
                * Se3Pose::exp(&random_twist(&mut r, 0.01, 0.02));
            images.push(ImageRecord {
                id: format!("im{k}{id}"),
                camera_id: id.to_string(),
                sequence: "s".into(),
                t_ns: t,
                pose,
                optimizable: true,
            });
        }
    }
    let mut landmarks = Vec::new();
    let mut observations = Vec::new();
    let mut j = 0;
    while landmarks.len() < 20 {
        let im = &images[r.random_range(0..images.len())];
        let k = &intrinsics[&im.camera_id];
        let px = nalgebra::Vector2::new(
            100.0 + 440.0 * r.random::<f64>(),
            80.0 + 320.0 * r.random::<f64>(),
        );
        let world = im
            .pose
            .transform_point(&k.unproject(&px, 4.0 + 4.0 * r.random::<f64>()));
        let obs: Vec<Observation> = images
            .iter()
            .filter_map(|other| {
                let pc = other.pose.inverse().transform_point(&world);
                let kk = &intrinsics[&other.camera_id];
                let z = kk.project(&pc).ok().filter(|_| pc.z > 1.0)?;
                kk.in_bounds(&z).then(|| Observation {
                    image_id: other.id.clone(),
                    landmark_id: format!("lm{j:03}"),
                    pixel: z + nalgebra::Vector2::new(
                        r.random::<f64>() - 0.5,
                        r.random::<f64>() - 0.5,
                    ),
                    active: true,
                })
            })
            .collect();
        if obs.len() >= 2 {
            landmarks.push(Landmark {
                id: format!("lm{j:03}"),
                position: world
                    + Vec3::new(
                        r.random::<f64>() - 0.5,
                        r.random::<f64>() - 0.5,
                        r.random::<f64>() - 0.5,
                    ) * 0.05,
                triangulated: true,
            });
            observations.extend(obs);
            j += 1;
        }
    }
    BaProblem {
        splines: BTreeMap::from([("s".to_string(), spline)]),
        rig,
        intrinsics,
        images,
        landmarks,
        observations,
        cauchy_scale: 1.0,
        prior_weight: 1.0,
        optimize_intrinsics: true,
        optimize_rig_rotation: true,
    }
}

// ---- low-frequency oracle ----

/// Naive O(N⁴) DFT low-pass: keep every bin whose signed frequency lies
/// within `cutoff · 0.5` cycles/px, invert, average the absolute change.
pub fn dense_dft_score(img: &GrayImage, cutoff: f64) -> f64 {
    let (w, h) = (img.width(), img.height());
    let signed = |k: usize, n: usize| {
        let k = k as f64;
        let n = n as f64;
        if k >= n / 2.0 {
            (k - n) / n
        } else {
            k / n
        }
    };
    let mut re = vec![0.0; w * h];
    let mut im = vec![0.0; w * h];
    for ky in 0..h {
        for kx in 0..w {
            let (fx, fy) = (signed(kx, w), signed(ky, h));
            if (fx * fx + fy * fy).sqrt() > cutoff * 0.5 {
                continue;
            }
            let (mut sr, mut si) = (0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    let a = -2.0 * PI * ((kx * x) as f64 / w as f64 + (ky * y) as f64 / h as f64);
                    sr += img.get(x, y) * a.cos();
                    si += img.get(x, y) * a.sin();
                }
            }
            re[ky * w + kx] = sr;
            im[ky * w + kx] = si;
        }
    }
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            let mut v = 0.0;
            for ky in 0..h {
                for kx in 0..w {
                    let a = 2.0 * PI * ((kx * x) as f64 / w as f64 + (ky * y) as f64 / h as f64);
                    v += re[ky * w + kx] * a.cos() - im[ky * w + kx] * a.sin();
                }
            }
            total += (img.get(x, y) - v / (w * h) as f64).abs();
        }
    }
    total / (w * h) as f64
}

pub fn intrinsics_rel_err(a: &CameraIntrinsics, b: &CameraIntrinsics) -> f64 {
    a.params()[..4]
        .iter()
        .zip(&b.params()[..4])
        .map(|(x, y)| ((x - y) / y).abs())
        .fold(0.0, f64::max)
}

// ---- property suites shared by the property tests and the acceptance run ----

use proptest::prelude::*;
use proptest::test_runner::TestRunner;

pub type Suite = fn(&mut TestRunner) -> Result<(), String>;

fn twist_strategy(max_rot: f64, max_trans: f64) -> impl Strategy<Value = Twist> {
    (
        prop::array::uniform3(-1.0..1.0f64),
        0.0..max_rot,
        prop::array::uniform3(-max_trans..max_trans),
    )
        .prop_filter_map("zero axis", |(a, angle, t)| {
            let axis = Vec3::from(a);
            (axis.norm() > 1e-6).then(|| Twist::new(axis.normalize() * angle, Vec3::from(t)))
        })
}

fn pose_strategy() -> impl Strategy<Value = Se3Pose> {
    twist_strategy(3.1, 10.0).prop_map(|x| Se3Pose::exp(&x))
}

fn close(a: &Twist, b: &Twist, tol: f64) -> bool {
    (a.to_vector() - b.to_vector()).amax() <= tol
}

fn poses_close(a: &Se3Pose, b: &Se3Pose, tol: f64) -> bool {
    (a.to_matrix() - b.to_matrix()).amax() <= tol
}

pub fn suite_exp_log(runner: &mut TestRunner) -> Result<(), String> {
    runner
        .run(&twist_strategy(3.0, 10.0), |xi| {
            let back = Se3Pose::exp(&xi).log().unwrap();
            prop_assert!(
                close(&back, &xi, 1e-8),
                "log(exp(xi)) = {:?}, xi = {:?}",
                back,
                xi
            );
            Ok(())
        })
        .map_err(|e| e.to_string())
}

pub fn suite_log_exp(runner: &mut TestRunner) -> Result<(), String> {
    runner
        .run(&pose_strategy(), |t| {
            let back = Se3Pose::exp(&t.log().unwrap());
            prop_assert!(poses_close(&back, &t, 1e-9));
            Ok(())
        })
        .map_err(|e| e.to_string())
}

pub fn suite_generalized_minus(runner: &mut TestRunner) -> Result<(), String> {
    runner
        .run(&(pose_strategy(), twist_strategy(2.0, 5.0)), |(b, xi)| {
            let a = b.compose(&Se3Pose::exp(&xi));
            let d = trajforge::generalized_minus(&a, &b).unwrap();
            prop_assert!(close(&d, &xi, 1e-8), "{:?} vs {:?}", d, xi);
            Ok(())
        })
        .map_err(|e| e.to_string())
}

pub fn suite_associativity(runner: &mut TestRunner) -> Result<(), String> {
    runner
        .run(
            &(pose_strategy(), pose_strategy(), pose_strategy()),
            |(a, b, c)| {
                prop_assert!(poses_close(&((a * b) * c), &(a * (b * c)), 1e-9));
                Ok(())
            },
        )
        .map_err(|e| e.to_string())
}

pub fn suite_unit_quaternion(runner: &mut TestRunner) -> Result<(), String> {
    runner
        .run(&twist_strategy(3.1, 1.0), |xi| {
            let q = Se3Pose::exp(&xi).wxyz();
            let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() <= 1e-12 && q[0] >= 0.0);
            Ok(())
        })
        .map_err(|e| e.to_string())
}

fn spline_strategy() -> impl Strategy<Value = (Vec<Se3Pose>, i64, i64)> {
    (
        prop::collection::vec(pose_strategy(), 4..12),
        1_000i64..5_000_000_000,
        -1_000_000_000_000i64..1_000_000_000_000,
    )
}

pub fn suite_spline_constant(runner: &mut TestRunner) -> Result<(), String> {
    runner
        .run(
            &(
                pose_strategy(),
                4usize..10,
                1_000i64..5_000_000_000,
                0.0..1.0f64,
            ),
            |(pose, n, dt, frac)| {
                let s = Se3Spline::new(0, dt, vec![pose; n]).unwrap();
                let (a, b) = s.domain();
                let t = a + ((b - a - 1) as f64 * frac) as i64;
                prop_assert!(poses_close(&s.evaluate(t).unwrap(), &pose, 1e-12));
                Ok(())
            },
        )
        .map_err(|e| e.to_string())
}

pub fn suite_spline_local_support(runner: &mut TestRunner) -> Result<(), String> {
    runner
        .run(
            &(
                spline_strategy(),
                any::<prop::sample::Index>(),
                0.0..1.0f64,
                twist_strategy(1.0, 1.0),
            ),
            |((ctrl, dt, t0), j, frac, bump)| {
                let s = Se3Spline::new(t0, dt, ctrl.clone()).unwrap();
                let j = j.index(ctrl.len());
                let mut moved = ctrl;
                moved[j] = moved[j] * Se3Pose::exp(&bump);
                let s2 = Se3Spline::new(t0, dt, moved).unwrap();
                let (a, b) = s.domain();
                let t = a + ((b - a - 1) as f64 * frac) as i64;
                let seg = ((t - t0) / dt) as usize;
                if j + 1 < seg || j > seg + 2 {
                    prop_assert_eq!(s.evaluate(t).unwrap(), s2.evaluate(t).unwrap());
                }
                Ok(())
            },
        )
        .map_err(|e| e.to_string())
}

pub fn property_suites() -> Vec<(&'static str, Suite)> {
    vec![
        ("exp/log round trip", suite_exp_log as Suite),
        ("log/exp round trip", suite_log_exp),
        ("generalized minus", suite_generalized_minus),
        ("compose associativity", suite_associativity),
        ("unit quaternion hemisphere", suite_unit_quaternion),
        ("spline constant pose", suite_spline_constant),
        ("spline local support", suite_spline_local_support),
    ]
}
