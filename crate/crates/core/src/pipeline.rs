//! Stage functions behind the command-line subcommands.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::bundle::{solve_ba_with, triangulate_all, BaProblem, BaReport, TriangulationConfig};
use crate::config::PipelineConfig;
use crate::dataset::{Dataset, QuerySet, Sensor};
use crate::error::{Error, Result};
use crate::geometry::Se3Pose;
use crate::localize::{pnp_ransac, Match, RansacConfig};
use crate::pointcloud::OdometryTrack;
use crate::posegraph::{
    merge_graphs, slam_sequence, trajectory_samples, CloudStore, MergeOutput, PoseGraph, SlamConfig,
};
use crate::spline::{spline_fit, Se3Spline};
use crate::textio::fmt_f64;

fn lidar_extrinsic(ds: &Dataset) -> Result<(String, Se3Pose)> {
    let id = ds
        .lidar_ids()
        .first()
        .map(|s| s.to_string())
        .ok_or_else(|| Error::InvalidDataset("no lidar in sensors.txt".into()))?;
    let pose = ds
        .rig_for(&id)
        .ok_or_else(|| Error::InvalidDataset(format!("lidar {id} has no rig entry")))?
        .pose;
    Ok((id, pose))
}

fn odometry(ds: &Dataset, seq: &str) -> Result<OdometryTrack> {
    let samples = ds
        .trajectory
        .get(seq)
        .ok_or_else(|| Error::InvalidDataset(format!("no odometry for sequence '{seq}'")))?;
    OdometryTrack::new(samples.clone())
}

/// Per-sequence statistics of the SLAM stage.
#[derive(Debug, Clone, PartialEq)]
pub struct SlamSummary {
    pub sequence: String,
    pub nodes: usize,
    pub edges: usize,
    pub loops_accepted: usize,
    pub final_cost: f64,
}

/// Undistorts every scan and builds and optimizes one pose graph per
/// sequence. Sequences are processed in parallel.
pub fn run_slam(ds: &Dataset, cfg: &SlamConfig) -> Result<(Dataset, Vec<SlamSummary>)> {
    let (_, extrinsic) = lidar_extrinsic(ds)?;
    let seqs = ds.sequences();
    let results: Vec<Result<(String, crate::posegraph::SlamOutput)>> = seqs
        .par_iter()
        .enumerate()
        .map(|(i, seq)| {
            let odom = odometry(ds, seq)?;
            let scans = ds.scans_of(seq);
            let align = ds
                .alignment
                .get(seq)
                .copied()
                .unwrap_or_else(Se3Pose::identity);
            Ok((
                seq.clone(),
                slam_sequence(seq, &scans, &extrinsic, &odom, &align, i * 100_000, cfg)?,
            ))
        })
        .collect();
    let mut out = ds.clone();
    out.clouds.clear();
    out.graphs.clear();
    out.graph = None;
    out.splines.clear();
    let mut summary = Vec::new();
    for r in results {
        let (seq, s) = r?;
        summary.push(SlamSummary {
            sequence: seq.clone(),
            nodes: s.graph.nodes.len(),
            edges: s.graph.edges.len(),
            loops_accepted: s.loops.accepted,
            final_cost: s.final_cost,
        });
        out.clouds.extend(s.clouds);
        out.graphs.insert(seq, s.graph);
    }
    Ok((out, summary))
}

/// Unions datasets that hold different sequences of the same scene.
pub fn combine_datasets(inputs: &[Dataset]) -> Result<Dataset> {
    let mut it = inputs.iter();
    let mut out = it
        .next()
        .ok_or_else(|| Error::InvalidDataset("no input dataset".into()))?
        .clone();
    for d in it {
        for s in &d.sensors {
            match out.sensors.iter().find(|x| x.id() == s.id()) {
                Some(x) if x != s => {
                    return Err(Error::InvalidDataset(format!(
                        "sensor {} differs between inputs",
                        s.id()
                    )))
                }
                Some(_) => {}
                None => out.sensors.push(s.clone()),
            }
        }
        for r in &d.rig {
            match out.rig.iter().find(|x| x.sensor_id == r.sensor_id) {
                Some(x) if x != r => {
                    return Err(Error::InvalidDataset(format!(
                        "rig entry {} differs between inputs",
                        r.sensor_id
                    )))
                }
                Some(_) => {}
                None => out.rig.push(r.clone()),
            }
        }
        for (seq, t) in &d.trajectory {
            if out.trajectory.insert(seq.clone(), t.clone()).is_some() {
                return Err(Error::InvalidDataset(format!(
                    "sequence '{seq}' appears in more than one input"
                )));
            }
        }
        out.alignment.extend(d.alignment.clone());
        out.images.extend(d.images.iter().cloned());
        for l in &d.landmarks {
            if !out.landmarks.iter().any(|x| x.id == l.id) {
                out.landmarks.push(l.clone());
            }
        }
        out.observations.extend(d.observations.iter().cloned());
        out.scans.extend(d.scans.clone());
        out.clouds.extend(d.clouds.clone());
        out.graphs.extend(d.graphs.clone());
        out.splines.extend(d.splines.clone());
        if out.ground_truth.is_none() {
            out.ground_truth = d.ground_truth.clone();
        }
    }
    out.landmarks.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(out)
}

/// Fits one spline per sequence to the graph nodes chained with odometry.
pub fn fit_splines(
    ds: &Dataset,
    graph: &PoseGraph,
    dt_ns: i64,
) -> Result<BTreeMap<String, Se3Spline>> {
    ds.sequences()
        .par_iter()
        .filter(|seq| graph.nodes.iter().any(|n| &n.sequence == *seq))
        .map(|seq| {
            let samples = trajectory_samples(graph, seq, &odometry(ds, seq)?)?;
            Ok((seq.clone(), spline_fit(&samples, dt_ns)?.0))
        })
        .collect()
}

/// Merges the per-sequence graphs with cross-sequence loop closures and
/// fits the trajectory splines.
pub fn run_merge(inputs: &[Dataset], cfg: &PipelineConfig) -> Result<(Dataset, MergeOutput)> {
    let mut ds = combine_datasets(inputs)?;
    if ds.graphs.is_empty() {
        return Err(Error::InvalidDataset(
            "no per-sequence graphs; run slam first".into(),
        ));
    }
    let graphs: Vec<PoseGraph> = ds.graphs.values().cloned().collect();
    let clouds: CloudStore = ds.clouds.clone();
    let merged = merge_graphs(&graphs, &clouds, &cfg.slam)?;
    ds.splines = fit_splines(&ds, &merged.graph, cfg.spline_dt_ns)?;
    ds.graph = Some(merged.graph.clone());
    Ok((ds, merged))
}

/// Bundle-adjustment problem with poses initialized from the splines.
/// Images outside their spline are held fixed and their observations
/// disabled.
pub fn build_ba_problem(ds: &Dataset, cfg: &PipelineConfig) -> Result<BaProblem> {
    let splines = if !ds.splines.is_empty() {
        ds.splines.clone()
    } else if let Some(g) = &ds.graph {
        fit_splines(ds, g, cfg.spline_dt_ns)?
    } else {
        return Err(Error::InvalidDataset(
            "no splines or merged graph; run merge first".into(),
        ));
    };
    let mut p = BaProblem {
        splines,
        rig: ds.rig.clone(),
        intrinsics: ds.cameras(),
        images: ds.images.clone(),
        landmarks: ds.landmarks.clone(),
        observations: ds.observations.clone(),
        cauchy_scale: cfg.cauchy_scale,
        prior_weight: cfg.prior_weight,
        optimize_intrinsics: cfg.optimize_intrinsics,
        optimize_rig_rotation: cfg.optimize_rig_rotation,
    };
    p.validate()?;
    p.init_poses_from_splines()?;
    let outside: Vec<String> = p
        .images
        .iter_mut()
        .filter(|im| {
            !p.splines
                .get(&im.sequence)
                .is_some_and(|s| s.contains(im.t_ns))
        })
        .map(|im| {
            im.optimizable = false;
            im.id.clone()
        })
        .collect();
    for o in p.observations.iter_mut() {
        if outside.contains(&o.image_id) {
            o.active = false;
        }
    }
    Ok(p)
}

/// Triangulation followed by the robust schedule. Returns the updated
/// dataset (poses, landmarks, observation flags and calibration).
pub fn run_ba(ds: &Dataset, cfg: &PipelineConfig) -> Result<(Dataset, BaReport)> {
    let mut p = build_ba_problem(ds, cfg)?;
    triangulate_all(
        &mut p,
        &TriangulationConfig {
            min_angle_deg: cfg.ba.min_triangulation_angle_deg,
            max_reproj: cfg.init_max_reproj,
        },
    )?;
    let (p, report) = solve_ba_with(&p, &cfg.ba)?;
    let mut out = ds.clone();
    out.splines = p.splines;
    out.images = p.images;
    out.landmarks = p.landmarks;
    out.observations = p.observations;
    out.rig = p.rig;
    for s in out.sensors.iter_mut() {
        if let Sensor::Camera { id, intrinsics } = s {
            *intrinsics = p.intrinsics[id];
        }
    }
    Ok((out, report))
}

/// Localizes every query against the triangulated landmarks of `map`.
pub fn localize_queries(
    map: &Dataset,
    queries: &QuerySet,
    ransac: &RansacConfig,
) -> Result<Vec<(String, Option<Se3Pose>)>> {
    let points: BTreeMap<&str, _> = map
        .landmarks
        .iter()
        .filter(|l| l.triangulated)
        .map(|l| (l.id.as_str(), l.position))
        .collect();
    let cams = crate::dataset::QuerySet::cameras(queries);
    queries
        .queries
        .par_iter()
        .enumerate()
        .map(|(i, (id, cam, _))| {
            let k = cams.get(cam).ok_or_else(|| {
                Error::InvalidDataset(format!("query camera {cam} not in sensors.txt"))
            })?;
            let matches: Vec<Match> = queries
                .observations
                .iter()
                .filter(|(q, _, _)| q == id)
                .filter_map(|(_, lm, px)| {
                    points.get(lm.as_str()).map(|p| Match {
                        pixel: *px,
                        point: *p,
                    })
                })
                .collect();
            if matches.len() < 4 {
                return Ok((id.clone(), None));
            }
            let cfg = RansacConfig {
                seed: ransac.seed.wrapping_add(i as u64),
                ..*ransac
            };
            Ok((id.clone(), pnp_ransac(&matches, k, &cfg)?.pose().copied()))
        })
        .collect()
}

impl QuerySet {
    pub fn cameras(&self) -> BTreeMap<String, crate::geometry::CameraIntrinsics> {
        self.sensors
            .iter()
            .filter_map(|s| match s {
                Sensor::Camera { id, intrinsics } => Some((id.clone(), *intrinsics)),
                _ => None,
            })
            .collect()
    }
}

pub fn estimates_to_csv(est: &[(String, Option<Se3Pose>)]) -> String {
    let mut s = String::from("query_id,localized,qw,qx,qy,qz,tx,ty,tz\n");
    for (id, p) in est {
        match p {
            Some(p) => {
                let q = p.wxyz();
                let t = p.translation();
                let vals: Vec<String> = [q[0], q[1], q[2], q[3], t.x, t.y, t.z]
                    .iter()
                    .map(|v| fmt_f64(*v))
                    .collect();
                let _ = writeln!(s, "{id},1,{}", vals.join(","));
            }
            None => {
                let _ = writeln!(s, "{id},0,,,,,,,");
            }
        }
    }
    s
}

/// Parses the localization CSV; rows with `localized = 0` are skipped.
pub fn estimates_from_csv(text: &str, path: &std::path::Path) -> Result<BTreeMap<String, Se3Pose>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("query_id") {
            continue;
        }
        let err = |column: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            column,
            message,
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(err(
                1,
                format!("expected 9 comma-separated fields, got {}", f.len()),
            ));
        }
        match f[1] {
            "0" => continue,
            "1" => {}
            other => return Err(err(2, format!("localized must be 0 or 1, got '{other}'"))),
        }
        let mut v = [0.0; 7];
        for (i, x) in v.iter_mut().enumerate() {
            *x = f[2 + i]
                .trim()
                .parse()
                .map_err(|_| err(3 + i, format!("invalid number '{}'", f[2 + i])))?;
        }
        let pose = Se3Pose::from_wxyz(
            [v[0], v[1], v[2], v[3]],
            crate::geometry::Vec3::new(v[4], v[5], v[6]),
        )
        .map_err(|e| err(3, e.to_string()))?;
        if out.insert(f[0].to_string(), pose).is_some() {
            return Err(err(1, format!("duplicate query id '{}'", f[0])));
        }
    }
    Ok(out)
}
