//! Directory layout shared by the simulator, the pipeline stages and the
//! evaluator. Every file is whitespace-separated text with `#` headers;
//! timestamps are integer nanoseconds.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use crate::bundle::{ImageRecord, Landmark, Observation};
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, RigExtrinsic, Se3Pose, Vec2, Vec3};
use crate::pointcloud::{LidarScan, PointCloud};
use crate::posegraph::PoseGraph;
use crate::spline::Se3Spline;
use crate::textio::{data_lines, fmt_f64, fmt_pose, Fields};

/// Key of a scan or cloud: (sequence, start time ns).
pub type RecordKey = (String, i64);

#[derive(Debug, Clone, PartialEq)]
pub enum Sensor {
    Camera {
        id: String,
        intrinsics: CameraIntrinsics,
    },
    Lidar {
        id: String,
    },
}

impl Sensor {
    pub fn id(&self) -> &str {
        match self {
            Sensor::Camera { id, .. } | Sensor::Lidar { id } => id,
        }
    }
}

/// Exact simulator state, kept beside the inputs for evaluation.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruth {
    pub sensors: Vec<Sensor>,
    pub rig: Vec<RigExtrinsic>,
    /// World poses of the platform per sequence.
    pub trajectory: BTreeMap<String, Vec<(i64, Se3Pose)>>,
    /// World poses of the cameras, keyed by image id.
    pub images: BTreeMap<String, Se3Pose>,
    pub landmarks: BTreeMap<String, Vec3>,
    /// (image id, landmark id) of every gross outlier observation.
    pub outliers: BTreeSet<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub sensors: Vec<Sensor>,
    pub rig: Vec<RigExtrinsic>,
    /// Wheel-odometry samples per sequence, relative to the first sample.
    pub trajectory: BTreeMap<String, Vec<(i64, Se3Pose)>>,
    /// Coarse world pose of each sequence start.
    pub alignment: BTreeMap<String, Se3Pose>,
    pub images: Vec<ImageRecord>,
    pub observations: Vec<Observation>,
    pub landmarks: Vec<Landmark>,
    pub scans: BTreeMap<RecordKey, LidarScan>,
    /// Motion-compensated clouds in the platform frame.
    pub clouds: BTreeMap<RecordKey, PointCloud>,
    /// Per-sequence pose graphs (`graphs/<seq>.txt`).
    pub graphs: BTreeMap<String, PoseGraph>,
    /// Merged pose graph (`graph.txt`).
    pub graph: Option<PoseGraph>,
    pub splines: BTreeMap<String, Se3Spline>,
    pub ground_truth: Option<GroundTruth>,
}

impl Dataset {
    pub fn cameras(&self) -> BTreeMap<String, CameraIntrinsics> {
        cameras_of(&self.sensors)
    }

    pub fn lidar_ids(&self) -> Vec<&str> {
        self.sensors
            .iter()
            .filter_map(|s| match s {
                Sensor::Lidar { id } => Some(id.as_str()),
                _ => None,
            })
            .collect()
    }

    pub fn sequences(&self) -> Vec<String> {
        self.trajectory.keys().cloned().collect()
    }

    pub fn rig_for(&self, sensor: &str) -> Option<&RigExtrinsic> {
        self.rig.iter().find(|r| r.sensor_id == sensor)
    }

    pub fn scans_of(&self, sequence: &str) -> Vec<LidarScan> {
        self.scans
            .iter()
            .filter(|((s, _), _)| s == sequence)
            .map(|(_, v)| v.clone())
            .collect()
    }
}

/// Intrinsics of every camera sensor, by id.
pub fn cameras_of(sensors: &[Sensor]) -> BTreeMap<String, CameraIntrinsics> {
    sensors
        .iter()
        .filter_map(|s| match s {
            Sensor::Camera { id, intrinsics } => Some((id.clone(), *intrinsics)),
            _ => None,
        })
        .collect()
}

/// Query images to localize against a map.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct QuerySet {
    pub sensors: Vec<Sensor>,
    /// (query id, camera id, timestamp ns).
    pub queries: Vec<(String, String, i64)>,
    /// (query id, landmark id, pixel): 2D-3D matches against map landmarks.
    pub observations: Vec<(String, String, Vec2)>,
    pub ground_truth: BTreeMap<String, Se3Pose>,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            Error::Io(e)
        }
    })
}

fn read_optional(path: &Path) -> Result<Option<String>> {
    if path.exists() {
        read(path).map(Some)
    } else {
        Ok(None)
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

fn dangling(path: &Path, line: usize, kind: &'static str, id: &str) -> Error {
    Error::DanglingId {
        path: path.to_path_buf(),
        line,
        kind,
        id: id.to_string(),
    }
}

fn duplicate(f: &Fields, col: usize, kind: &str, id: &str) -> Error {
    f.error(col, format!("duplicate {kind} id '{id}'"))
}

/// Ids become path components and whitespace-separated fields.
fn check_id(f: &Fields, col: usize, id: &str) -> Result<()> {
    if id.contains(['/', '\\']) || id == "." || id == ".." || id.starts_with('#') {
        return Err(f.error(col, format!("invalid id '{id}'")));
    }
    Ok(())
}

// ---- sensors.txt ----

pub fn sensors_to_text(sensors: &[Sensor]) -> String {
    let mut s = String::from("# camera id fx fy cx cy k1 k2 width height\n# lidar id\n");
    for sensor in sensors {
        match sensor {
            Sensor::Camera { id, intrinsics: k } => {
                let p = k.params();
                s.push_str(&format!(
                    "camera {id} {} {} {}\n",
                    p.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(" "),
                    k.width,
                    k.height
                ));
            }
            Sensor::Lidar { id } => s.push_str(&format!("lidar {id}\n")),
        }
    }
    s
}

pub fn sensors_from_text(text: &str, path: &Path) -> Result<Vec<Sensor>> {
    let mut out: Vec<Sensor> = Vec::new();
    let mut seen = BTreeSet::new();
    for (line_no, line) in data_lines(text) {
        let mut f = Fields::new(line, path, line_no);
        let (kind, kcol) = f.next_token("sensor kind")?;
        let (id, icol) = f.next_token("sensor id")?;
        check_id(&f, icol, id)?;
        if !seen.insert(id.to_string()) {
            return Err(duplicate(&f, icol, "sensor", id));
        }
        let sensor = match kind {
            "camera" => {
                let mut p = [0.0; 6];
                for (v, name) in p.iter_mut().zip(["fx", "fy", "cx", "cy", "k1", "k2"]) {
                    *v = f.f64(name)?;
                }
                let (wt, col) = f.next_token("width")?;
                let width: u32 = wt
                    .parse()
                    .map_err(|_| f.error(col, format!("invalid width '{wt}'")))?;
                let height: u32 = f.parse("height")?;
                let intrinsics =
                    CameraIntrinsics::new(p[0], p[1], p[2], p[3], p[4], p[5], width, height)
                        .map_err(|e| f.error(col, e.to_string()))?;
                Sensor::Camera {
                    id: id.to_string(),
                    intrinsics,
                }
            }
            "lidar" => Sensor::Lidar { id: id.to_string() },
            other => return Err(f.error(kcol, format!("unknown sensor kind '{other}'"))),
        };
        f.finish()?;
        out.push(sensor);
    }
    Ok(out)
}

// ---- rig.txt ----

pub fn rig_to_text(rig: &[RigExtrinsic]) -> String {
    let mut s = String::from(
        "# sensor_id translation_fixed qw qx qy qz tx ty tz  (sensor pose in the platform frame)\n",
    );
    for r in rig {
        s.push_str(&format!(
            "{} {} {}\n",
            r.sensor_id,
            r.translation_fixed as u8,
            fmt_pose(&r.pose)
        ));
    }
    s
}

pub fn rig_from_text(text: &str, path: &Path, sensors: &[Sensor]) -> Result<Vec<RigExtrinsic>> {
    let ids: BTreeSet<&str> = sensors.iter().map(|s| s.id()).collect();
    let mut out: Vec<RigExtrinsic> = Vec::new();
    for (line_no, line) in data_lines(text) {
        let mut f = Fields::new(line, path, line_no);
        let (id, col) = f.next_token("sensor id")?;
        if !ids.contains(id) {
            return Err(dangling(path, line_no, "sensor", id));
        }
        if out.iter().any(|r| r.sensor_id == id) {
            return Err(duplicate(&f, col, "rig sensor", id));
        }
        let translation_fixed = f.flag("translation_fixed")?;
        let pose = f.pose()?;
        f.finish()?;
        out.push(RigExtrinsic {
            sensor_id: id.to_string(),
            pose,
            translation_fixed,
        });
    }
    Ok(out)
}

// ---- trajectory.txt and friends: `seq t_ns pose` ----

pub fn trajectory_to_text(header: &str, traj: &BTreeMap<String, Vec<(i64, Se3Pose)>>) -> String {
    let mut s = format!("# {header}\n# seq t_ns qw qx qy qz tx ty tz\n");
    for (seq, samples) in traj {
        for (t, p) in samples {
            s.push_str(&format!("{seq} {t} {}\n", fmt_pose(p)));
        }
    }
    s
}

pub fn trajectory_from_text(
    text: &str,
    path: &Path,
) -> Result<BTreeMap<String, Vec<(i64, Se3Pose)>>> {
    let mut out: BTreeMap<String, Vec<(i64, Se3Pose)>> = BTreeMap::new();
    let mut last_seq: Option<String> = None;
    for (line_no, line) in data_lines(text) {
        let mut f = Fields::new(line, path, line_no);
        let (seq, scol) = f.next_token("sequence")?;
        check_id(&f, scol, seq)?;
        let (tt, tcol) = f.next_token("t_ns")?;
        let t: i64 = tt
            .parse()
            .map_err(|_| f.error(tcol, format!("invalid t_ns '{tt}'")))?;
        let pose = f.pose()?;
        f.finish()?;
        if last_seq.as_deref() != Some(seq) {
            if out.contains_key(seq) || last_seq.as_deref().is_some_and(|l| l > seq) {
                return Err(f.error(
                    scol,
                    format!("sequence '{seq}' rows must be contiguous and sorted"),
                ));
            }
            last_seq = Some(seq.to_string());
        }
        let v = out.entry(seq.to_string()).or_default();
        if v.last().is_some_and(|(p, _)| *p >= t) {
            return Err(f.error(
                tcol,
                "timestamps must be strictly increasing within a sequence",
            ));
        }
        v.push((t, pose));
    }
    Ok(out)
}

// ---- alignment.txt ----

fn alignment_to_text(a: &BTreeMap<String, Se3Pose>) -> String {
    let mut s =
        String::from("# seq qw qx qy qz tx ty tz  (coarse world pose of the sequence start)\n");
    for (seq, p) in a {
        s.push_str(&format!("{seq} {}\n", fmt_pose(p)));
    }
    s
}

fn alignment_from_text(
    text: &str,
    path: &Path,
    sequences: &BTreeSet<&str>,
) -> Result<BTreeMap<String, Se3Pose>> {
    let mut out = BTreeMap::new();
    let mut last: Option<String> = None;
    for (line_no, line) in data_lines(text) {
        let mut f = Fields::new(line, path, line_no);
        let (seq, col) = f.next_token("sequence")?;
        if !sequences.contains(seq) {
            return Err(dangling(path, line_no, "sequence", seq));
        }
        if last.as_deref().is_some_and(|l| l >= seq) {
            return Err(f.error(col, "sequences must be unique and sorted"));
        }
        last = Some(seq.to_string());
        let p = f.pose()?;
        f.finish()?;
        out.insert(seq.to_string(), p);
    }
    Ok(out)
}

// ---- images.txt ----

fn images_to_text(images: &[ImageRecord]) -> String {
    let mut s = String::from("# image_id camera_id seq t_ns optimizable qw qx qy qz tx ty tz  (camera pose in the world)\n");
    for im in images {
        s.push_str(&format!(
            "{} {} {} {} {} {}\n",
            im.id,
            im.camera_id,
            im.sequence,
            im.t_ns,
            im.optimizable as u8,
            fmt_pose(&im.pose)
        ));
    }
    s
}

fn images_from_text(
    text: &str,
    path: &Path,
    cameras: &BTreeMap<String, CameraIntrinsics>,
) -> Result<Vec<ImageRecord>> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (line_no, line) in data_lines(text) {
        let mut f = Fields::new(line, path, line_no);
        let (id, col) = f.next_token("image id")?;
        check_id(&f, col, id)?;
        if !seen.insert(id.to_string()) {
            return Err(duplicate(&f, col, "image", id));
        }
        let cam = f.str("camera id")?;
        if !cameras.contains_key(cam) {
            return Err(dangling(path, line_no, "camera", cam));
        }
        let (seq, scol) = f.next_token("sequence")?;
        check_id(&f, scol, seq)?;
        let t_ns = f.i64("t_ns")?;
        let optimizable = f.flag("optimizable")?;
        let pose = f.pose()?;
        f.finish()?;
        out.push(ImageRecord {
            id: id.to_string(),
            camera_id: cam.to_string(),
            sequence: seq.to_string(),
            t_ns,
            pose,
            optimizable,
        });
    }
    Ok(out)
}

// ---- landmarks.txt ----

fn landmarks_to_text(landmarks: &[Landmark]) -> String {
    let mut s = String::from("# landmark_id triangulated x y z\n");
    for l in landmarks {
        s.push_str(&format!(
            "{} {} {} {} {}\n",
            l.id,
            l.triangulated as u8,
            fmt_f64(l.position.x),
            fmt_f64(l.position.y),
            fmt_f64(l.position.z)
        ));
    }
    s
}

fn landmarks_from_text(text: &str, path: &Path) -> Result<Vec<Landmark>> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (line_no, line) in data_lines(text) {
        let mut f = Fields::new(line, path, line_no);
        let (id, col) = f.next_token("landmark id")?;
        check_id(&f, col, id)?;
        if !seen.insert(id.to_string()) {
            return Err(duplicate(&f, col, "landmark", id));
        }
        let triangulated = f.flag("triangulated")?;
        let position = f.vec3("coordinate")?;
        f.finish()?;
        out.push(Landmark {
            id: id.to_string(),
            position,
            triangulated,
        });
    }
    Ok(out)
}

// ---- observations.txt ----

fn observations_to_text(obs: &[Observation]) -> String {
    let mut s = String::from("# image_id landmark_id u v active\n");
    for o in obs {
        s.push_str(&format!(
            "{} {} {} {} {}\n",
            o.image_id,
            o.landmark_id,
            fmt_f64(o.pixel.x),
            fmt_f64(o.pixel.y),
            o.active as u8
        ));
    }
    s
}

fn observations_from_text(
    text: &str,
    path: &Path,
    images: &BTreeSet<&str>,
    landmarks: &BTreeSet<&str>,
) -> Result<Vec<Observation>> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (line_no, line) in data_lines(text) {
        let mut f = Fields::new(line, path, line_no);
        let (im, col) = f.next_token("image id")?;
        if !images.contains(im) {
            return Err(dangling(path, line_no, "image", im));
        }
        let lm = f.str("landmark id")?;
        if !landmarks.contains(lm) {
            return Err(dangling(path, line_no, "landmark", lm));
        }
        if !seen.insert((im, lm)) {
            return Err(f.error(col, format!("duplicate observation of '{lm}' in '{im}'")));
        }
        let u = f.f64("u")?;
        let v = f.f64("v")?;
        let active = f.flag("active")?;
        f.finish()?;
        out.push(Observation {
            image_id: im.to_string(),
            landmark_id: lm.to_string(),
            pixel: Vec2::new(u, v),
            active,
        });
    }
    Ok(out)
}

// ---- ground_truth/ ----

fn poses_to_text(header: &str, poses: &BTreeMap<String, Se3Pose>) -> String {
    let mut s = format!("# {header}\n");
    for (id, p) in poses {
        s.push_str(&format!("{id} {}\n", fmt_pose(p)));
    }
    s
}

fn poses_from_text(text: &str, path: &Path) -> Result<BTreeMap<String, Se3Pose>> {
    let mut out = BTreeMap::new();
    let mut last: Option<String> = None;
    for (line_no, line) in data_lines(text) {
        let mut f = Fields::new(line, path, line_no);
        let (id, col) = f.next_token("id")?;
        if last.as_deref().is_some_and(|l| l >= id) {
            return Err(f.error(col, "ids must be unique and sorted"));
        }
        last = Some(id.to_string());
        let p = f.pose()?;
        f.finish()?;
        out.insert(id.to_string(), p);
    }
    Ok(out)
}

fn points_to_text(points: &BTreeMap<String, Vec3>) -> String {
    let mut s = String::from("# landmark_id x y z\n");
    for (id, p) in points {
        s.push_str(&format!(
            "{id} {} {} {}\n",
            fmt_f64(p.x),
            fmt_f64(p.y),
            fmt_f64(p.z)
        ));
    }
    s
}

fn points_from_text(text: &str, path: &Path) -> Result<BTreeMap<String, Vec3>> {
    let mut out = BTreeMap::new();
    let mut last: Option<String> = None;
    for (line_no, line) in data_lines(text) {
        let mut f = Fields::new(line, path, line_no);
        let (id, col) = f.next_token("landmark id")?;
        if last.as_deref().is_some_and(|l| l >= id) {
            return Err(f.error(col, "ids must be unique and sorted"));
        }
        last = Some(id.to_string());
        let p = f.vec3("coordinate")?;
        f.finish()?;
        out.insert(id.to_string(), p);
    }
    Ok(out)
}

fn outliers_to_text(o: &BTreeSet<(String, String)>) -> String {
    let mut s = String::from("# image_id landmark_id  (gross outlier observations)\n");
    for (i, l) in o {
        s.push_str(&format!("{i} {l}\n"));
    }
    s
}

fn outliers_from_text(text: &str, path: &Path) -> Result<BTreeSet<(String, String)>> {
    let mut out = BTreeSet::new();
    let mut last: Option<(String, String)> = None;
    for (line_no, line) in data_lines(text) {
        let mut f = Fields::new(line, path, line_no);
        let (i, col) = f.next_token("image id")?;
        let l = f.str("landmark id")?;
        f.finish()?;
        let key = (i.to_string(), l.to_string());
        if last.as_ref().is_some_and(|p| *p >= key) {
            return Err(f.error(col, "entries must be unique and sorted"));
        }
        last = Some(key.clone());
        out.insert(key);
    }
    Ok(out)
}

fn write_ground_truth(gt: &GroundTruth, dir: &Path) -> Result<()> {
    write(&dir.join("sensors.txt"), &sensors_to_text(&gt.sensors))?;
    write(&dir.join("rig.txt"), &rig_to_text(&gt.rig))?;
    write(
        &dir.join("trajectory.txt"),
        &trajectory_to_text("ground-truth platform poses in the world", &gt.trajectory),
    )?;
    write(
        &dir.join("images.txt"),
        &poses_to_text(
            "image_id qw qx qy qz tx ty tz  (true camera pose in the world)",
            &gt.images,
        ),
    )?;
    write(&dir.join("landmarks.txt"), &points_to_text(&gt.landmarks))?;
    write(&dir.join("outliers.txt"), &outliers_to_text(&gt.outliers))?;
    Ok(())
}

fn read_ground_truth(dir: &Path) -> Result<GroundTruth> {
    let sp = dir.join("sensors.txt");
    let sensors = sensors_from_text(&read(&sp)?, &sp)?;
    let rp = dir.join("rig.txt");
    let rig = rig_from_text(&read(&rp)?, &rp, &sensors)?;
    let tp = dir.join("trajectory.txt");
    let ip = dir.join("images.txt");
    let lp = dir.join("landmarks.txt");
    let op = dir.join("outliers.txt");
    Ok(GroundTruth {
        sensors,
        rig,
        trajectory: trajectory_from_text(&read(&tp)?, &tp)?,
        images: poses_from_text(&read(&ip)?, &ip)?,
        landmarks: points_from_text(&read(&lp)?, &lp)?,
        outliers: outliers_from_text(&read(&op)?, &op)?,
    })
}

// ---- directories of per-record files ----

fn record_path(root: &Path, dir: &str, key: &RecordKey) -> PathBuf {
    root.join(dir).join(&key.0).join(format!("{}.txt", key.1))
}

/// Lists `<root>/<dir>/<seq>/<t_ns>.txt` sorted by key.
fn list_records(root: &Path, dir: &str) -> Result<Vec<(RecordKey, PathBuf)>> {
    let base = root.join(dir);
    let mut out = Vec::new();
    if !base.is_dir() {
        return Ok(out);
    }
    for seq in fs::read_dir(&base)? {
        let seq = seq?;
        if !seq.file_type()?.is_dir() {
            continue;
        }
        let seq_name = seq.file_name().to_string_lossy().to_string();
        for f in fs::read_dir(seq.path())? {
            let f = f?;
            let path = f.path();
            let name = f.file_name().to_string_lossy().to_string();
            let Some(stem) = name.strip_suffix(".txt") else {
                continue;
            };
            let t: i64 = stem.parse().map_err(|_| Error::Parse {
                path: path.clone(),
                line: 0,
                column: 0,
                message: format!("file name '{name}' is not <t_ns>.txt"),
            })?;
            out.push(((seq_name.clone(), t), path));
        }
    }
    out.sort();
    Ok(out)
}

fn clear_dir(path: &Path) -> Result<()> {
    if path.is_dir() {
        fs::remove_dir_all(path)?;
    }
    Ok(())
}

/// Writes the full layout; stale scan, cloud, graph and spline files under
/// `root` are removed first so the directory mirrors `ds` exactly.
pub fn write_dataset(ds: &Dataset, root: &Path) -> Result<()> {
    fs::create_dir_all(root)?;
    write(&root.join("sensors.txt"), &sensors_to_text(&ds.sensors))?;
    write(&root.join("rig.txt"), &rig_to_text(&ds.rig))?;
    write(
        &root.join("trajectory.txt"),
        &trajectory_to_text(
            "wheel odometry relative to the first sample",
            &ds.trajectory,
        ),
    )?;
    write(&root.join("images.txt"), &images_to_text(&ds.images))?;
    write(
        &root.join("observations.txt"),
        &observations_to_text(&ds.observations),
    )?;
    write(
        &root.join("landmarks.txt"),
        &landmarks_to_text(&ds.landmarks),
    )?;
    let align = root.join("alignment.txt");
    if ds.alignment.is_empty() {
        if align.exists() {
            fs::remove_file(&align)?;
        }
    } else {
        write(&align, &alignment_to_text(&ds.alignment))?;
    }
    for dir in ["scans", "clouds", "graphs", "splines", "ground_truth"] {
        clear_dir(&root.join(dir))?;
    }
    fs::create_dir_all(root.join("scans"))?;
    fs::create_dir_all(root.join("clouds"))?;
    for (k, s) in &ds.scans {
        write(&record_path(root, "scans", k), &s.to_text())?;
    }
    for (k, c) in &ds.clouds {
        write(&record_path(root, "clouds", k), &c.to_text())?;
    }
    for (seq, g) in &ds.graphs {
        write(
            &root.join("graphs").join(format!("{seq}.txt")),
            &g.to_text(),
        )?;
    }
    let gp = root.join("graph.txt");
    match &ds.graph {
        Some(g) => write(&gp, &g.to_text())?,
        None if gp.exists() => fs::remove_file(&gp)?,
        None => {}
    }
    for (seq, s) in &ds.splines {
        write(
            &root.join("splines").join(format!("{seq}.txt")),
            &s.to_text(),
        )?;
    }
    if let Some(gt) = &ds.ground_truth {
        write_ground_truth(gt, &root.join("ground_truth"))?;
    }
    Ok(())
}

fn read_named_dir<T>(
    root: &Path,
    dir: &str,
    parse: impl Fn(&str, &Path) -> Result<T>,
) -> Result<BTreeMap<String, T>> {
    let base = root.join(dir);
    let mut out = BTreeMap::new();
    if !base.is_dir() {
        return Ok(out);
    }
    let mut entries: Vec<PathBuf> = fs::read_dir(&base)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    for path in entries {
        let Some(name) = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_suffix(".txt"))
        else {
            continue;
        };
        out.insert(name.to_string(), parse(&read(&path)?, &path)?);
    }
    Ok(out)
}

pub fn read_dataset(root: &Path) -> Result<Dataset> {
    if !root.is_dir() {
        return Err(Error::MissingFile(root.to_path_buf()));
    }
    let sp = root.join("sensors.txt");
    let sensors = sensors_from_text(&read(&sp)?, &sp)?;
    let rp = root.join("rig.txt");
    let rig = rig_from_text(&read(&rp)?, &rp, &sensors)?;
    let tp = root.join("trajectory.txt");
    let trajectory = trajectory_from_text(&read(&tp)?, &tp)?;
    let seqs: BTreeSet<&str> = trajectory.keys().map(|s| s.as_str()).collect();
    let ap = root.join("alignment.txt");
    let alignment = match read_optional(&ap)? {
        Some(t) => alignment_from_text(&t, &ap, &seqs)?,
        None => BTreeMap::new(),
    };
    let cameras = cameras_of(&sensors);
    let ip = root.join("images.txt");
    let images = images_from_text(&read(&ip)?, &ip, &cameras)?;
    let lp = root.join("landmarks.txt");
    let landmarks = landmarks_from_text(&read(&lp)?, &lp)?;
    let op = root.join("observations.txt");
    let observations = {
        let im: BTreeSet<&str> = images.iter().map(|i| i.id.as_str()).collect();
        let lm: BTreeSet<&str> = landmarks.iter().map(|l| l.id.as_str()).collect();
        observations_from_text(&read(&op)?, &op, &im, &lm)?
    };
    let lidars: BTreeSet<&str> = sensors
        .iter()
        .filter(|s| matches!(s, Sensor::Lidar { .. }))
        .map(|s| s.id())
        .collect();
    let mut scans = BTreeMap::new();
    for (key, path) in list_records(root, "scans")? {
        let scan = LidarScan::from_text(&read(&path)?, &path, key.1)?;
        if !lidars.contains(scan.lidar_id.as_str()) {
            return Err(dangling(&path, 1, "lidar", &scan.lidar_id));
        }
        if !seqs.contains(key.0.as_str()) {
            return Err(dangling(&path, 1, "sequence", &key.0));
        }
        scans.insert(key, scan);
    }
    let mut clouds = BTreeMap::new();
    for (key, path) in list_records(root, "clouds")? {
        clouds.insert(key, PointCloud::from_text(&read(&path)?, &path)?);
    }
    let graphs = read_named_dir(root, "graphs", PoseGraph::from_text)?;
    let gp = root.join("graph.txt");
    let graph = match read_optional(&gp)? {
        Some(t) => Some(PoseGraph::from_text(&t, &gp)?),
        None => None,
    };
    let splines = read_named_dir(root, "splines", Se3Spline::from_text)?;
    let gtd = root.join("ground_truth");
    let ground_truth = if gtd.is_dir() {
        Some(read_ground_truth(&gtd)?)
    } else {
        None
    };
    Ok(Dataset {
        sensors,
        rig,
        trajectory,
        alignment,
        images,
        observations,
        landmarks,
        scans,
        clouds,
        graphs,
        graph,
        splines,
        ground_truth,
    })
}

// ---- query sets ----

pub fn write_queries(q: &QuerySet, root: &Path) -> Result<()> {
    fs::create_dir_all(root)?;
    write(&root.join("sensors.txt"), &sensors_to_text(&q.sensors))?;
    let mut s = String::from("# query_id camera_id t_ns\n");
    for (id, cam, t) in &q.queries {
        s.push_str(&format!("{id} {cam} {t}\n"));
    }
    write(&root.join("queries.txt"), &s)?;
    let mut s = String::from("# query_id landmark_id u v  (2D-3D matches against map landmarks)\n");
    for (id, lm, px) in &q.observations {
        s.push_str(&format!("{id} {lm} {} {}\n", fmt_f64(px.x), fmt_f64(px.y)));
    }
    write(&root.join("observations.txt"), &s)?;
    let gt = root.join("ground_truth");
    clear_dir(&gt)?;
    if !q.ground_truth.is_empty() {
        write(
            &gt.join("poses.txt"),
            &poses_to_text(
                "query_id qw qx qy qz tx ty tz  (true camera pose in the world)",
                &q.ground_truth,
            ),
        )?;
    }
    Ok(())
}

pub fn read_queries(root: &Path) -> Result<QuerySet> {
    if !root.is_dir() {
        return Err(Error::MissingFile(root.to_path_buf()));
    }
    let sp = root.join("sensors.txt");
    let sensors = sensors_from_text(&read(&sp)?, &sp)?;
    let cameras = cameras_of(&sensors);
    let qp = root.join("queries.txt");
    let mut queries = Vec::new();
    let mut ids = BTreeSet::new();
    for (line_no, line) in data_lines(&read(&qp)?) {
        let mut f = Fields::new(line, &qp, line_no);
        let (id, col) = f.next_token("query id")?;
        check_id(&f, col, id)?;
        if !ids.insert(id.to_string()) {
            return Err(duplicate(&f, col, "query", id));
        }
        let cam = f.str("camera id")?;
        if !cameras.contains_key(cam) {
            return Err(dangling(&qp, line_no, "camera", cam));
        }
        let t = f.i64("t_ns")?;
        f.finish()?;
        queries.push((id.to_string(), cam.to_string(), t));
    }
    let op = root.join("observations.txt");
    let mut observations = Vec::new();
    for (line_no, line) in data_lines(&read(&op)?) {
        let mut f = Fields::new(line, &op, line_no);
        let id = f.str("query id")?;
        if !ids.contains(id) {
            return Err(dangling(&op, line_no, "query", id));
        }
        let lm = f.str("landmark id")?.to_string();
        let px = Vec2::new(f.f64("u")?, f.f64("v")?);
        f.finish()?;
        observations.push((id.to_string(), lm, px));
    }
    let gp = root.join("ground_truth").join("poses.txt");
    let ground_truth = match read_optional(&gp)? {
        Some(t) => poses_from_text(&t, &gp)?,
        None => BTreeMap::new(),
    };
    Ok(QuerySet {
        sensors,
        queries,
        observations,
        ground_truth,
    })
}

/// Ground-truth query poses from either a query directory or a file of
/// `id pose` lines.
pub fn read_pose_table(path: &Path) -> Result<BTreeMap<String, Se3Pose>> {
    let file = if path.is_dir() {
        path.join("ground_truth").join("poses.txt")
    } else {
        path.to_path_buf()
    };
    poses_from_text(&read(&file)?, &file)
}
