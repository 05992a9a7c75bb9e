//! Flat `key = value` configuration for every pipeline stage.

use std::path::Path;

use crate::bundle::{BaOptions, Loss};
use crate::error::{Error, Result};
use crate::localize::{RansacConfig, DEFAULT_CUTOFF_FRACTION};
use crate::pointcloud::IcpObjective;
use crate::posegraph::SlamConfig;
use crate::simulator::SimConfig;
use crate::spline::DEFAULT_KNOT_SPACING_NS;

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub sim: SimConfig,
    pub slam: SlamConfig,
    pub spline_dt_ns: i64,
    pub ba: BaOptions,
    pub cauchy_scale: f64,
    pub prior_weight: f64,
    pub optimize_intrinsics: bool,
    pub optimize_rig_rotation: bool,
    /// Reprojection gate of the initial triangulation, px.
    pub init_max_reproj: f64,
    pub ransac: RansacConfig,
    pub lowfreq_cutoff: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            sim: SimConfig::default(),
            slam: SlamConfig::default(),
            spline_dt_ns: DEFAULT_KNOT_SPACING_NS,
            ba: BaOptions::default(),
            cauchy_scale: 1.0,
            prior_weight: 1.0,
            optimize_intrinsics: true,
            optimize_rig_rotation: true,
            init_max_reproj: 1000.0,
            ransac: RansacConfig::default(),
            lowfreq_cutoff: DEFAULT_CUTOFF_FRACTION,
        }
    }
}

/// (key, description) for every accepted key, in documentation order.
pub const KEYS: &[(&str, &str)] = &[
    ("sim.seed", "simulator seed"),
    ("sim.landmarks", "landmarks sampled on the walls"),
    ("sim.sequences", "number of sequences"),
    ("sim.duration_s", "length of each sequence"),
    ("sim.speed", "platform speed, m/s"),
    ("sim.wheel_base", "differential-drive wheel base, m"),
    ("sim.wheel_radius", "wheel radius, m"),
    ("sim.ticks_per_rev", "encoder resolution"),
    ("sim.odometry_rate_hz", "odometry sample rate"),
    ("sim.lidar_beams", "beams per revolution"),
    ("sim.lidar_max_range", "maximum LiDAR range, m"),
    ("sim.lidar_scan_every", "emit one of every N revolutions"),
    ("sim.image_period_s", "camera trigger period"),
    ("sim.extra_cameras", "asynchronous cameras added to the rig"),
    (
        "sim.extra_camera_max_offset_ms",
        "largest capture delay of the extra cameras",
    ),
    (
        "sim.calib_rotation_deg",
        "rotation error of the nominal camera mounts",
    ),
    (
        "sim.calib_intrinsics_frac",
        "relative error of the nominal focal lengths and principal points",
    ),
    ("sim.queries", "number of query images"),
    ("sim.query_pixel_std", "pixel noise of query matches"),
    ("noise.tick_std", "encoder noise, ticks"),
    (
        "noise.quantize_ticks",
        "round wheel angles to whole ticks (true/false)",
    ),
    ("noise.range_std", "LiDAR range noise, m"),
    ("noise.pixel_std", "feature noise, px"),
    (
        "noise.outlier_fraction",
        "fraction of observations replaced by uniform pixels",
    ),
    (
        "noise.init_pose_std_m",
        "start-alignment error of later sequences, m",
    ),
    (
        "noise.init_pose_std_deg",
        "start-alignment error of later sequences, deg",
    ),
    (
        "slam.rough_max_corr_dist",
        "rough ICP correspondence gate, m",
    ),
    ("slam.rough_max_iter", "rough ICP iterations"),
    ("slam.rough_voxel", "rough ICP voxel size, m (0 disables)"),
    (
        "slam.precise_max_corr_dist",
        "precise ICP correspondence gate, m",
    ),
    ("slam.precise_max_iter", "precise ICP iterations"),
    (
        "slam.precise_voxel",
        "precise ICP voxel size, m (0 disables)",
    ),
    ("slam.precise_objective", "point_to_plane or point_to_point"),
    ("slam.icp_tol", "ICP convergence tolerance"),
    ("slam.loop_dist", "loop candidate distance, m"),
    (
        "slam.loop_min_gap_s",
        "minimum time between loop candidates of one sequence",
    ),
    ("slam.min_fitness", "minimum ICP inlier fraction"),
    (
        "slam.max_rotation_correction_deg",
        "largest rotation ICP may add to a loop candidate's initial guess",
    ),
    ("slam.node_dist", "travel between graph nodes, m"),
    ("slam.node_interval_s", "time between graph nodes"),
    ("spline.dt_ns", "spline knot spacing"),
    (
        "ba.schedule",
        "outlier schedule, e.g. 12:25,8:25,4:25,1.5:50",
    ),
    ("ba.loss", "cauchy or squared"),
    (
        "ba.filter",
        "deactivate observations after each stage (true/false)",
    ),
    ("ba.cauchy_scale", "Cauchy scale c, px"),
    ("ba.prior_weight", "spline prior weight w"),
    (
        "ba.optimize_intrinsics",
        "refine camera intrinsics (true/false)",
    ),
    (
        "ba.optimize_rig_rotation",
        "refine camera mount rotations (true/false)",
    ),
    (
        "ba.min_triangulation_angle_deg",
        "minimum triangulation angle",
    ),
    (
        "ba.init_max_reproj",
        "reprojection gate of the initial triangulation, px",
    ),
    ("ransac.iterations", "PnP RANSAC iterations"),
    ("ransac.inlier_px", "PnP inlier threshold, px"),
    ("ransac.min_inliers", "minimum inliers to report a pose"),
    ("ransac.seed", "PnP RANSAC seed"),
    (
        "lowfreq.cutoff_fraction",
        "low-pass cutoff as a fraction of Nyquist",
    ),
];

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value '{v}' for '{key}'")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean '{v}' for '{key}'"))),
    }
}

fn voxel(key: &str, v: &str) -> Result<Option<f64>> {
    let x: f64 = parse(key, v)?;
    Ok((x > 0.0).then_some(x))
}

pub fn parse_schedule(v: &str) -> Result<Vec<(f64, usize)>> {
    v.split(',')
        .map(|stage| {
            let (t, n) = stage.trim().split_once(':').ok_or_else(|| {
                Error::Config(format!(
                    "schedule stage '{stage}' must be threshold:iterations"
                ))
            })?;
            Ok((
                parse("ba.schedule", t.trim())?,
                parse("ba.schedule", n.trim())?,
            ))
        })
        .collect()
}

fn schedule_text(s: &[(f64, usize)]) -> String {
    s.iter()
        .map(|(t, n)| format!("{t}:{n}"))
        .collect::<Vec<_>>()
        .join(",")
}

impl PipelineConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let s = &mut self.sim;
        match key {
            "sim.seed" => s.seed = parse(key, v)?,
            "sim.landmarks" => s.landmarks = parse(key, v)?,
            "sim.sequences" => s.sequences = parse(key, v)?,
            "sim.duration_s" => s.duration_s = parse(key, v)?,
            "sim.speed" => s.speed = parse(key, v)?,
            "sim.wheel_base" => s.odometry.wheel_base = parse(key, v)?,
            "sim.wheel_radius" => s.odometry.wheel_radius = parse(key, v)?,
            "sim.ticks_per_rev" => s.odometry.ticks_per_rev = parse(key, v)?,
            "sim.odometry_rate_hz" => s.odometry.rate_hz = parse(key, v)?,
            "sim.lidar_beams" => s.lidar.beams = parse(key, v)?,
            "sim.lidar_max_range" => s.lidar.max_range = parse(key, v)?,
            "sim.lidar_scan_every" => s.lidar.scan_every = parse(key, v)?,
            "sim.image_period_s" => s.image_period_s = parse(key, v)?,
            "sim.extra_cameras" => s.extra_cameras = parse(key, v)?,
            "sim.extra_camera_max_offset_ms" => s.extra_camera_max_offset_ms = parse(key, v)?,
            "sim.calib_rotation_deg" => s.calib_rotation_deg = parse(key, v)?,
            "sim.calib_intrinsics_frac" => s.calib_intrinsics_frac = parse(key, v)?,
            "sim.queries" => s.queries = parse(key, v)?,
            "sim.query_pixel_std" => s.query_pixel_std = parse(key, v)?,
            "noise.tick_std" => s.noise.tick_std = parse(key, v)?,
            "noise.quantize_ticks" => s.noise.quantize_ticks = parse_bool(key, v)?,
            "noise.range_std" => s.noise.range_std = parse(key, v)?,
            "noise.pixel_std" => s.noise.pixel_std = parse(key, v)?,
            "noise.outlier_fraction" => s.noise.outlier_fraction = parse(key, v)?,
            "noise.init_pose_std_m" => s.noise.init_pose_std_m = parse(key, v)?,
            "noise.init_pose_std_deg" => s.noise.init_pose_std_deg = parse(key, v)?,
            "slam.rough_max_corr_dist" => self.slam.rough.max_corr_dist = parse(key, v)?,
            "slam.rough_max_iter" => self.slam.rough.max_iter = parse(key, v)?,
            "slam.rough_voxel" => self.slam.rough.voxel = voxel(key, v)?,
            "slam.precise_max_corr_dist" => self.slam.precise.max_corr_dist = parse(key, v)?,
            "slam.precise_max_iter" => self.slam.precise.max_iter = parse(key, v)?,
            "slam.precise_voxel" => self.slam.precise.voxel = voxel(key, v)?,
            "slam.precise_objective" => {
                self.slam.precise_objective = IcpObjective::parse(v)
                    .ok_or_else(|| Error::Config(format!("unknown ICP objective '{v}'")))?
            }
            "slam.icp_tol" => {
                let t = parse(key, v)?;
                self.slam.rough.tol = t;
                self.slam.precise.tol = t;
            }
            "slam.loop_dist" => self.slam.loop_dist = parse(key, v)?,
            "slam.loop_min_gap_s" => self.slam.loop_min_gap_s = parse(key, v)?,
            "slam.min_fitness" => self.slam.min_fitness = parse(key, v)?,
            "slam.max_rotation_correction_deg" => {
                self.slam.max_rotation_correction_deg = parse(key, v)?
            }
            "slam.node_dist" => self.slam.node_dist = parse(key, v)?,
            "slam.node_interval_s" => self.slam.node_interval_s = parse(key, v)?,
            "spline.dt_ns" => self.spline_dt_ns = parse(key, v)?,
            "ba.schedule" => self.ba.schedule = parse_schedule(v)?,
            "ba.loss" => {
                self.ba.loss = match v {
                    "cauchy" => Loss::Cauchy,
                    "squared" => Loss::Squared,
                    _ => return Err(Error::Config(format!("unknown loss '{v}'"))),
                }
            }
            "ba.filter" => self.ba.filter = parse_bool(key, v)?,
            "ba.cauchy_scale" => self.cauchy_scale = parse(key, v)?,
            "ba.prior_weight" => self.prior_weight = parse(key, v)?,
            "ba.optimize_intrinsics" => self.optimize_intrinsics = parse_bool(key, v)?,
            "ba.optimize_rig_rotation" => self.optimize_rig_rotation = parse_bool(key, v)?,
            "ba.min_triangulation_angle_deg" => {
                self.ba.min_triangulation_angle_deg = parse(key, v)?
            }
            "ba.init_max_reproj" => self.init_max_reproj = parse(key, v)?,
            "ransac.iterations" => self.ransac.iterations = parse(key, v)?,
            "ransac.inlier_px" => self.ransac.inlier_px = parse(key, v)?,
            "ransac.min_inliers" => self.ransac.min_inliers = parse(key, v)?,
            "ransac.seed" => self.ransac.seed = parse(key, v)?,
            "lowfreq.cutoff_fraction" => self.lowfreq_cutoff = parse(key, v)?,
            _ => {
                return Err(Error::UnknownConfigKey {
                    key: key.to_string(),
                })
            }
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let s = &self.sim;
        let vox = |v: Option<f64>| v.unwrap_or(0.0).to_string();
        Some(match key {
            "sim.seed" => s.seed.to_string(),
            "sim.landmarks" => s.landmarks.to_string(),
            "sim.sequences" => s.sequences.to_string(),
            "sim.duration_s" => s.duration_s.to_string(),
            "sim.speed" => s.speed.to_string(),
            "sim.wheel_base" => s.odometry.wheel_base.to_string(),
            "sim.wheel_radius" => s.odometry.wheel_radius.to_string(),
            "sim.ticks_per_rev" => s.odometry.ticks_per_rev.to_string(),
            "sim.odometry_rate_hz" => s.odometry.rate_hz.to_string(),
            "sim.lidar_beams" => s.lidar.beams.to_string(),
            "sim.lidar_max_range" => s.lidar.max_range.to_string(),
            "sim.lidar_scan_every" => s.lidar.scan_every.to_string(),
            "sim.image_period_s" => s.image_period_s.to_string(),
            "sim.extra_cameras" => s.extra_cameras.to_string(),
            "sim.extra_camera_max_offset_ms" => s.extra_camera_max_offset_ms.to_string(),
            "sim.calib_rotation_deg" => s.calib_rotation_deg.to_string(),
            "sim.calib_intrinsics_frac" => s.calib_intrinsics_frac.to_string(),
            "sim.queries" => s.queries.to_string(),
            "sim.query_pixel_std" => s.query_pixel_std.to_string(),
            "noise.tick_std" => s.noise.tick_std.to_string(),
            "noise.quantize_ticks" => s.noise.quantize_ticks.to_string(),
            "noise.range_std" => s.noise.range_std.to_string(),
            "noise.pixel_std" => s.noise.pixel_std.to_string(),
            "noise.outlier_fraction" => s.noise.outlier_fraction.to_string(),
            "noise.init_pose_std_m" => s.noise.init_pose_std_m.to_string(),
            "noise.init_pose_std_deg" => s.noise.init_pose_std_deg.to_string(),
            "slam.rough_max_corr_dist" => self.slam.rough.max_corr_dist.to_string(),
            "slam.rough_max_iter" => self.slam.rough.max_iter.to_string(),
            "slam.rough_voxel" => vox(self.slam.rough.voxel),
            "slam.precise_max_corr_dist" => self.slam.precise.max_corr_dist.to_string(),
            "slam.precise_max_iter" => self.slam.precise.max_iter.to_string(),
            "slam.precise_voxel" => vox(self.slam.precise.voxel),
            "slam.precise_objective" => self.slam.precise_objective.as_str().to_string(),
            "slam.icp_tol" => self.slam.precise.tol.to_string(),
            "slam.loop_dist" => self.slam.loop_dist.to_string(),
            "slam.loop_min_gap_s" => self.slam.loop_min_gap_s.to_string(),
            "slam.min_fitness" => self.slam.min_fitness.to_string(),
            "slam.max_rotation_correction_deg" => self.slam.max_rotation_correction_deg.to_string(),
            "slam.node_dist" => self.slam.node_dist.to_string(),
            "slam.node_interval_s" => self.slam.node_interval_s.to_string(),
            "spline.dt_ns" => self.spline_dt_ns.to_string(),
            "ba.schedule" => schedule_text(&self.ba.schedule),
            "ba.loss" => match self.ba.loss {
                Loss::Cauchy => "cauchy".into(),
                Loss::Squared => "squared".into(),
            },
            "ba.filter" => self.ba.filter.to_string(),
            "ba.cauchy_scale" => self.cauchy_scale.to_string(),
            "ba.prior_weight" => self.prior_weight.to_string(),
            "ba.optimize_intrinsics" => self.optimize_intrinsics.to_string(),
            "ba.optimize_rig_rotation" => self.optimize_rig_rotation.to_string(),
            "ba.min_triangulation_angle_deg" => self.ba.min_triangulation_angle_deg.to_string(),
            "ba.init_max_reproj" => self.init_max_reproj.to_string(),
            "ransac.iterations" => self.ransac.iterations.to_string(),
            "ransac.inlier_px" => self.ransac.inlier_px.to_string(),
            "ransac.min_inliers" => self.ransac.min_inliers.to_string(),
            "ransac.seed" => self.ransac.seed.to_string(),
            "lowfreq.cutoff_fraction" => self.lowfreq_cutoff.to_string(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines on top of the defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value'", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        self.validate()
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingFile(path.to_path_buf())
            } else {
                Error::Io(e)
            }
        })?;
        Self::from_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.noise.validate()?;
        if !(self.cauchy_scale > 0.0) || !(self.prior_weight >= 0.0) {
            return Err(Error::Config(
                "ba.cauchy_scale must be positive and ba.prior_weight non-negative".into(),
            ));
        }
        if self.spline_dt_ns <= 0 {
            return Err(Error::Config("spline.dt_ns must be positive".into()));
        }
        if self.sim.odometry.ticks_per_rev == 0 || !(self.sim.odometry.rate_hz > 0.0) {
            return Err(Error::Config(
                "encoder resolution and odometry rate must be positive".into(),
            ));
        }
        if self.sim.lidar.beams == 0 || self.sim.lidar.scan_every == 0 {
            return Err(Error::Config(
                "sim.lidar_beams and sim.lidar_scan_every must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Every key with its current value and description.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, doc) in KEYS {
            s.push_str(&format!(
                "# {doc}\n{k} = {}\n",
                self.get(k).unwrap_or_default()
            ));
        }
        s
    }
}
