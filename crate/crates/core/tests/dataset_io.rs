mod common;

use std::fs;
use std::path::Path;

use common::{random_pose, rng};
use nalgebra::Vector2;
use proptest::prelude::*;
use rand::Rng;
use trajforge::bundle::{ImageRecord, Landmark, Observation};
use trajforge::dataset::{read_dataset, write_dataset, Dataset, Sensor};
use trajforge::geometry::{CameraIntrinsics, RigExtrinsic, Se3Pose, Vec3};
use trajforge::pipeline::{estimates_from_csv, estimates_to_csv};
use trajforge::simulator::{simulate, SimConfig};
use trajforge::Error;

fn tree(root: &Path) -> Vec<(String, String)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(root).unwrap().display().to_string(),
                    fs::read_to_string(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

fn camera_dataset(seed: u64, images: usize, landmarks: usize, per_image: usize) -> Dataset {
    let mut r = rng(seed);
    let k = CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, -0.02, 0.005, 640, 480).unwrap();
    let images: Vec<ImageRecord> = (0..images)
        .map(|i| ImageRecord {
            id: format!("img{i:05}"),
            camera_id: "cam".into(),
            sequence: "s".into(),
            t_ns: i as i64 * 100_000_000,
            pose: random_pose(&mut r, 10.0),
            optimizable: i % 7 != 0,
        })
        .collect();
    let landmarks: Vec<Landmark> = (0..landmarks)
        .map(|j| Landmark {
            id: format!("lm{j:05}"),
            position: Vec3::new(r.random(), r.random(), r.random()) * 20.0,
            triangulated: j % 3 != 0,
        })
        .collect();
    let mut observations = Vec::new();
    for im in &images {
        for j in 0..per_image {
            observations.push(Observation {
                image_id: im.id.clone(),
                landmark_id: landmarks
                    [(j * 7919 + im.t_ns as usize / 100_000_000) % landmarks.len()]
                .id
                .clone(),
                pixel: Vector2::new(640.0 * r.random::<f64>(), 480.0 * r.random::<f64>()),
                active: r.random::<f64>() < 0.9,
            });
        }
    }
    observations.sort_by(|a, b| (&a.image_id, &a.landmark_id).cmp(&(&b.image_id, &b.landmark_id)));
    observations.dedup_by(|a, b| a.image_id == b.image_id && a.landmark_id == b.landmark_id);
    Dataset {
        sensors: vec![Sensor::Camera {
            id: "cam".into(),
            intrinsics: k,
        }],
        rig: vec![RigExtrinsic {
            sensor_id: "cam".into(),
            pose: random_pose(&mut r, 0.3),
            translation_fixed: true,
        }],
        images,
        observations,
        landmarks,
        ..Dataset::default()
    }
}

#[test]
fn simulated_dataset_round_trips_byte_identically() {
    let cfg = SimConfig {
        sequences: 2,
        duration_s: 10.0,
        landmarks: 200,
        queries: 2,
        ..SimConfig::default()
    };
    let sim = simulate(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    write_dataset(&sim.dataset, &a).unwrap();
    let back = read_dataset(&a).unwrap();
    write_dataset(&back, &b).unwrap();
    for ((na, ta), (nb, tb)) in tree(&a).iter().zip(&tree(&b)) {
        assert_eq!(na, nb);
        for (k, (la, lb)) in ta.lines().zip(tb.lines()).enumerate() {
            assert_eq!(la, lb, "{na}:{}", k + 1);
        }
        assert_eq!(ta, tb, "{na}");
    }
    assert_eq!(back.images.len(), sim.dataset.images.len());
    assert_eq!(back.observations, sim.dataset.observations);
    assert_eq!(back.scans.len(), sim.dataset.scans.len());
}

#[test]
fn repeated_writes_are_identical() {
    let ds = camera_dataset(1, 20, 50, 10);
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&ds, dir.path()).unwrap();
    let first = tree(dir.path());
    write_dataset(&ds, dir.path()).unwrap();
    assert_eq!(first, tree(dir.path()));
}

#[test]
fn empty_dataset_writes_header_only_files() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&Dataset::default(), dir.path()).unwrap();
    for name in [
        "sensors.txt",
        "rig.txt",
        "trajectory.txt",
        "images.txt",
        "observations.txt",
        "landmarks.txt",
    ] {
        let text = fs::read_to_string(dir.path().join(name)).unwrap();
        assert!(
            text.lines().all(|l| l.starts_with('#')),
            "{name} has data lines"
        );
    }
    assert_eq!(read_dataset(dir.path()).unwrap(), Dataset::default());
}

#[test]
fn dangling_image_id_names_the_line() {
    let ds = camera_dataset(2, 5, 10, 4);
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&ds, dir.path()).unwrap();
    let path = dir.path().join("observations.txt");
    let mut text = fs::read_to_string(&path).unwrap();
    text.push_str("ghost lm00000 10 10 1\n");
    let line = text.lines().count();
    fs::write(&path, text).unwrap();
    match read_dataset(dir.path()) {
        Err(e @ Error::DanglingId { .. }) => {
            let Error::DanglingId {
                line: l, ref id, ..
            } = e
            else {
                unreachable!()
            };
            assert_eq!((l, id.as_str()), (line, "ghost"));
            assert!(e.to_string().contains(&format!(":{line}:")));
        }
        other => panic!("expected a dangling id error, got {other:?}"),
    }
}

#[test]
fn missing_directory_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        read_dataset(&dir.path().join("nope")),
        Err(Error::MissingFile(_))
    ));
    fs::write(dir.path().join("sensors.txt"), "# nothing\n").unwrap();
    assert!(matches!(
        read_dataset(dir.path()),
        Err(Error::MissingFile(_))
    ));
}

#[test]
fn hundred_thousand_observations_round_trip() {
    let ds = camera_dataset(3, 100, 2000, 1000);
    assert_eq!(ds.observations.len(), 100_000);
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&ds, dir.path()).unwrap();
    let back = read_dataset(dir.path()).unwrap();
    assert_eq!(back.observations, ds.observations);
    assert_eq!(back.landmarks, ds.landmarks);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn random_camera_datasets_round_trip(seed in any::<u64>(), images in 0usize..12, landmarks in 1usize..30, per_image in 0usize..8) {
        let ds = camera_dataset(seed, images, landmarks, per_image);
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        prop_assert_eq!(&back.observations, &ds.observations);
        prop_assert_eq!(&back.landmarks, &ds.landmarks);
        prop_assert_eq!(&back.sensors, &ds.sensors);
        for (a, b) in back.images.iter().zip(&ds.images) {
            prop_assert_eq!((&a.id, &a.camera_id, a.t_ns, a.optimizable), (&b.id, &b.camera_id, b.t_ns, b.optimizable));
            prop_assert!(common::pose_param_diff(&a.pose, &b.pose) <= 1e-15);
        }
        let again = tempfile::tempdir().unwrap();
        write_dataset(&back, again.path()).unwrap();
        prop_assert_eq!(tree(dir.path()), tree(again.path()));
    }
}

#[test]
fn estimates_csv_round_trip() {
    let mut r = rng(4);
    let est: Vec<(String, Option<Se3Pose>)> = (0..30)
        .map(|i| {
            (
                format!("q{i:02}"),
                (i % 4 != 0).then(|| random_pose(&mut r, 5.0)),
            )
        })
        .collect();
    let text = estimates_to_csv(&est);
    let back = estimates_from_csv(&text, Path::new("est.csv")).unwrap();
    assert_eq!(back.len(), est.iter().filter(|(_, p)| p.is_some()).count());
    for (id, p) in &est {
        if let Some(p) = p {
            assert!(common::pose_param_diff(&back[id], p) <= 1e-15);
        }
    }
    assert!(estimates_from_csv("query_id,localized\nq,2,,,,,,,\n", Path::new("x")).is_err());
    assert!(estimates_from_csv("", Path::new("x")).unwrap().is_empty());
}
