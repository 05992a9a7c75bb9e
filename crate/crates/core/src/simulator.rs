//! Synthetic indoor world and sensor models with exact ground truth.
//!
//! The default scene is a 16 m × 16 m square split into four rooms by two
//! interior walls with doorways; platforms drive circles through the
//! doorways so every sequence revisits its start and overlaps the others.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::bundle::{ImageRecord, Landmark, Observation};
use crate::dataset::{Dataset, GroundTruth, QuerySet, Sensor};
use crate::error::{Error, Result};
use crate::geometry::{so3_exp, CameraIntrinsics, RigExtrinsic, Se3Pose, Twist, Vec2, Vec3};
use crate::pointcloud::{LidarScan, OdometryTrack, ScanPoint, LIDAR_PERIOD_S};

/// Vertical wall rectangle above a 2-D segment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WallSegment {
    pub a: Vector2<f64>,
    pub b: Vector2<f64>,
    pub z_min: f64,
    pub z_max: f64,
}

impl WallSegment {
    pub fn new(a: (f64, f64), b: (f64, f64), z_min: f64, z_max: f64) -> Self {
        Self {
            a: Vector2::new(a.0, a.1),
            b: Vector2::new(b.0, b.1),
            z_min,
            z_max,
        }
    }

    pub fn length(&self) -> f64 {
        (self.b - self.a).norm()
    }

    /// Unit normal in the horizontal plane (walls are two-sided).
    pub fn normal(&self) -> Vec3 {
        let d = (self.b - self.a).normalize();
        Vec3::new(-d.y, d.x, 0.0)
    }

    /// Ray parameter `s` of the hit of `o + s·d`, if any.
    pub fn intersect(&self, o: &Vec3, d: &Vec3) -> Option<f64> {
        let e = self.b - self.a;
        let d2 = Vector2::new(d.x, d.y);
        let den = d2.x * e.y - d2.y * e.x;
        if den.abs() < 1e-15 {
            return None;
        }
        let w = self.a - Vector2::new(o.x, o.y);
        let s = (w.x * e.y - w.y * e.x) / den;
        let u = (w.x * d2.y - w.y * d2.x) / den;
        if !(0.0..=1.0).contains(&u) {
            return None;
        }
        let z = o.z + s * d.z;
        (z >= self.z_min && z <= self.z_max).then_some(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub walls: Vec<WallSegment>,
    pub landmarks: Vec<Vec3>,
    /// Wall index each landmark lies on.
    pub landmark_walls: Vec<usize>,
    pub seed: u64,
}

pub const ROOM_SIZE: f64 = 16.0;
pub const WALL_HEIGHT: f64 = 3.0;

impl SyntheticWorld {
    pub fn empty(seed: u64) -> Self {
        Self {
            walls: Vec::new(),
            landmarks: Vec::new(),
            landmark_walls: Vec::new(),
            seed,
        }
    }

    /// Axis-aligned square room `[0, side]²` without landmarks.
    pub fn square_room(side: f64, seed: u64) -> Self {
        let c = [(0.0, 0.0), (side, 0.0), (side, side), (0.0, side)];
        let walls = (0..4)
            .map(|i| WallSegment::new(c[i], c[(i + 1) % 4], 0.0, WALL_HEIGHT))
            .collect();
        Self {
            walls,
            ..Self::empty(seed)
        }
    }

    /// Four rooms with 2.5 m doorways centred at 4 m and 12 m on both
    /// interior walls, and `n_landmarks` points sampled on the walls.
    pub fn four_rooms(seed: u64, n_landmarks: usize) -> Self {
        let mut w = Self::square_room(ROOM_SIZE, seed);
        let spans = [(0.0, 2.75), (5.25, 10.75), (13.25, ROOM_SIZE)];
        for (lo, hi) in spans {
            w.walls
                .push(WallSegment::new((8.0, lo), (8.0, hi), 0.0, WALL_HEIGHT));
            w.walls
                .push(WallSegment::new((lo, 8.0), (hi, 8.0), 0.0, WALL_HEIGHT));
        }
        w.sample_landmarks(n_landmarks);
        w
    }

    /// Replaces the landmarks by `n` points drawn uniformly over wall area.
    pub fn sample_landmarks(&mut self, n: usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x4c41_4e44);
        let total: f64 = self.walls.iter().map(|w| w.length()).sum();
        self.landmarks.clear();
        self.landmark_walls.clear();
        if self.walls.is_empty() {
            return;
        }
        for _ in 0..n {
            let mut r = rng.random::<f64>() * total;
            let mut k = 0;
            while k + 1 < self.walls.len() && r > self.walls[k].length() {
                r -= self.walls[k].length();
                k += 1;
            }
            let w = &self.walls[k];
            let u: f64 = rng.random();
            let p = w.a + (w.b - w.a) * u;
            let z = 0.2 + rng.random::<f64>() * (w.z_max - w.z_min - 0.4);
            self.landmarks.push(Vec3::new(p.x, p.y, w.z_min + z));
            self.landmark_walls.push(k);
        }
    }

    /// Distance along the unit direction `d` to the nearest wall.
    pub fn ray_cast(&self, o: &Vec3, d: &Vec3) -> Option<f64> {
        self.walls
            .iter()
            .filter_map(|w| w.intersect(o, d))
            .filter(|s| *s > 1e-9)
            .min_by(|a, b| a.total_cmp(b))
    }

    /// True if a wall blocks the open segment between `from` and `to`.
    pub fn occluded(&self, from: &Vec3, to: &Vec3) -> bool {
        let d = to - from;
        self.walls
            .iter()
            .filter_map(|w| w.intersect(from, &d))
            .any(|s| s > 1e-9 && s < 1.0 - 1e-9)
    }
}

/// Piecewise constant-twist trajectory; twists are body-frame rates.
#[derive(Debug, Clone, PartialEq)]
pub struct PlatformTrajectoryGT {
    pub start: Se3Pose,
    /// (duration s, twist per second).
    pub segments: Vec<(f64, Twist)>,
}

impl PlatformTrajectoryGT {
    pub fn duration(&self) -> f64 {
        self.segments.iter().map(|s| s.0).sum()
    }

    pub fn stationary(start: Se3Pose, duration: f64) -> Self {
        Self {
            start,
            segments: vec![(duration, Twist::zero())],
        }
    }

    /// Planar circle around `center` of radius `radius` starting at polar
    /// angle `angle`, driving forward at `speed`.
    pub fn circle(
        center: (f64, f64),
        radius: f64,
        angle: f64,
        speed: f64,
        ccw: bool,
        duration: f64,
    ) -> Self {
        let heading = if ccw {
            angle + PI / 2.0
        } else {
            angle - PI / 2.0
        };
        let pos = Vec3::new(
            center.0 + radius * angle.cos(),
            center.1 + radius * angle.sin(),
            0.0,
        );
        let omega = if ccw { speed / radius } else { -speed / radius };
        Self {
            start: Se3Pose::new(UnitQuaternion::from_euler_angles(0.0, 0.0, heading), pos),
            segments: vec![(
                duration,
                Twist::new(Vec3::new(0.0, 0.0, omega), Vec3::new(speed, 0.0, 0.0)),
            )],
        }
    }
}

/// `start · Π exp(τ_k ξ_k)` at time `t` seconds after the start.
pub fn gt_pose(traj: &PlatformTrajectoryGT, t: f64) -> Result<Se3Pose> {
    let total = traj.duration();
    if !(t >= 0.0 && t <= total + 1e-12) {
        return Err(Error::TimeOutOfRange { t, duration: total });
    }
    let mut pose = traj.start;
    let mut rest = t;
    for (k, (dur, xi)) in traj.segments.iter().enumerate() {
        if rest <= *dur || k + 1 == traj.segments.len() {
            return Ok(pose * Se3Pose::exp(&xi.scale(rest)));
        }
        pose = pose * Se3Pose::exp(&xi.scale(*dur));
        rest -= dur;
    }
    Ok(pose)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseConfig {
    /// Encoder noise per sample and wheel, in ticks.
    pub tick_std: f64,
    /// Round cumulative wheel angles to whole ticks.
    pub quantize_ticks: bool,
    pub range_std: f64,
    pub pixel_std: f64,
    pub outlier_fraction: f64,
    /// Error of the coarse start alignment of every sequence but the first.
    pub init_pose_std_m: f64,
    pub init_pose_std_deg: f64,
}

impl NoiseConfig {
    pub fn zero() -> Self {
        Self {
            tick_std: 0.0,
            quantize_ticks: false,
            range_std: 0.0,
            pixel_std: 0.0,
            outlier_fraction: 0.0,
            init_pose_std_m: 0.0,
            init_pose_std_deg: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let stds = [
            self.tick_std,
            self.range_std,
            self.pixel_std,
            self.init_pose_std_m,
            self.init_pose_std_deg,
        ];
        if stds.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::Config(
                "noise standard deviations must be non-negative".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.outlier_fraction) {
            return Err(Error::Config("outlier fraction must be in [0, 1)".into()));
        }
        Ok(())
    }
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            tick_std: 0.5,
            quantize_ticks: true,
            range_std: 0.005,
            pixel_std: 1.0,
            outlier_fraction: 0.0,
            init_pose_std_m: 0.2,
            init_pose_std_deg: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdometryModel {
    pub wheel_base: f64,
    pub wheel_radius: f64,
    pub ticks_per_rev: u32,
    pub rate_hz: f64,
}

impl Default for OdometryModel {
    fn default() -> Self {
        Self {
            wheel_base: 0.5,
            wheel_radius: 0.1,
            ticks_per_rev: 1024,
            rate_hz: 100.0,
        }
    }
}

fn ns(t_s: f64) -> i64 {
    (t_s * 1e9).round() as i64
}

fn planar_arc(rel: &Se3Pose) -> (f64, f64) {
    let dtheta = rel.rotation().euler_angles().2;
    let t = rel.translation();
    let chord = (t.x * t.x + t.y * t.y).sqrt();
    let half = 0.5 * dtheta;
    let sign = if t.x * half.cos() + t.y * half.sin() >= 0.0 {
        1.0
    } else {
        -1.0
    };
    let ratio = if half.abs() < 1e-12 {
        1.0
    } else {
        half / half.sin()
    };
    (sign * chord * ratio, dtheta)
}

/// Wheel encoders of a differential drive following the planar projection
/// of `traj`, integrated back into relative poses sampled at `rate_hz`.
pub fn simulate_odometry(
    traj: &PlatformTrajectoryGT,
    start_ns: i64,
    model: &OdometryModel,
    noise: &NoiseConfig,
    rng: &mut ChaCha8Rng,
) -> Result<OdometryTrack> {
    let n = (traj.duration() * model.rate_hz + 1e-9).floor() as usize;
    let tick = 2.0 * PI / model.ticks_per_rev as f64;
    let tick_noise = Normal::new(0.0, noise.tick_std).map_err(|e| Error::Config(e.to_string()))?;
    let half_base = 0.5 * model.wheel_base;
    let mut samples = vec![(start_ns, Se3Pose::identity())];
    let mut prev_gt = gt_pose(traj, 0.0)?;
    let (mut cum_l, mut cum_r) = (0.0f64, 0.0f64);
    let (mut ticks_l, mut ticks_r) = (0.0f64, 0.0f64);
    let mut pose = Se3Pose::identity();
    for k in 1..=n {
        let t = k as f64 / model.rate_hz;
        let gt = gt_pose(traj, t)?;
        let (ds, dtheta) = planar_arc(&(prev_gt.inverse() * gt));
        prev_gt = gt;
        let dl = (ds - dtheta * half_base) / model.wheel_radius;
        let dr = (ds + dtheta * half_base) / model.wheel_radius;
        let (mut il, mut ir) = if noise.quantize_ticks {
            cum_l += dl;
            cum_r += dr;
            let (nl, nr) = ((cum_l / tick).floor(), (cum_r / tick).floor());
            let inc = ((nl - ticks_l) * tick, (nr - ticks_r) * tick);
            ticks_l = nl;
            ticks_r = nr;
            inc
        } else {
            (dl, dr)
        };
        if noise.tick_std > 0.0 {
            il += tick_noise.sample(rng) * tick;
            ir += tick_noise.sample(rng) * tick;
        }
        let ds_m = 0.5 * (il + ir) * model.wheel_radius;
        let dth_m = (ir - il) * model.wheel_radius / model.wheel_base;
        pose = pose
            * Se3Pose::exp(&Twist::new(
                Vec3::new(0.0, 0.0, dth_m),
                Vec3::new(ds_m, 0.0, 0.0),
            ));
        samples.push((start_ns + ns(t), pose));
    }
    OdometryTrack::new(samples)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LidarModel {
    pub id: String,
    pub beams: usize,
    pub max_range: f64,
    /// Emit one of every `scan_every` revolutions.
    pub scan_every: usize,
}

impl Default for LidarModel {
    fn default() -> Self {
        Self {
            id: "lidar0".into(),
            beams: 720,
            max_range: 30.0,
            scan_every: 5,
        }
    }
}

/// Default LiDAR mounting in the platform frame.
pub fn default_lidar_extrinsic() -> Se3Pose {
    Se3Pose::new(
        UnitQuaternion::from_euler_angles(0.0, 0.0, 0.3),
        Vec3::new(0.1, 0.0, 0.5),
    )
}

/// One horizontal ring per revolution; beam `i` fires `i·T/N` after the
/// revolution start from the sensor pose at that instant.
pub fn simulate_lidar(
    world: &SyntheticWorld,
    traj: &PlatformTrajectoryGT,
    start_ns: i64,
    extrinsic: &Se3Pose,
    model: &LidarModel,
    range_std: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<LidarScan>> {
    let noise = Normal::new(0.0, range_std).map_err(|e| Error::Config(e.to_string()))?;
    let revolutions =
        ((traj.duration() - LIDAR_PERIOD_S) / LIDAR_PERIOD_S + 1e-9).floor() as i64 + 1;
    let mut scans = Vec::new();
    for k in (0..revolutions.max(0)).step_by(model.scan_every.max(1)) {
        let t0 = k as f64 * LIDAR_PERIOD_S;
        let mut points = Vec::with_capacity(model.beams);
        for i in 0..model.beams {
            let dt = i as f64 * LIDAR_PERIOD_S / model.beams as f64;
            let sensor = gt_pose(traj, t0 + dt)? * *extrinsic;
            let a = 2.0 * PI * i as f64 / model.beams as f64;
            let local = Vec3::new(a.cos(), a.sin(), 0.0);
            let dir = sensor.transform_vector(&local);
            let Some(r) = world.ray_cast(sensor.translation(), &dir) else {
                continue;
            };
            if r > model.max_range {
                continue;
            }
            let r = if range_std > 0.0 {
                r + noise.sample(rng)
            } else {
                r
            };
            points.push(ScanPoint {
                position: local * r,
                dt,
            });
        }
        scans.push(LidarScan::new(model.id.clone(), start_ns + ns(t0), points)?);
    }
    Ok(scans)
}

/// Camera looking along yaw `yaw` pitched up by `pitch`, mounted `radius`
/// from the platform axis at `height`. Camera axes: z forward, x right,
/// y down.
pub fn camera_mount(yaw: f64, pitch: f64, radius: f64, height: f64) -> Se3Pose {
    let z = Vec3::new(
        yaw.cos() * pitch.cos(),
        yaw.sin() * pitch.cos(),
        pitch.sin(),
    );
    let x = Vec3::new(yaw.sin(), -yaw.cos(), 0.0);
    let y = z.cross(&x);
    let r = Rotation3::from_matrix_unchecked(Matrix3::from_columns(&[x, y, z]));
    Se3Pose::new(
        UnitQuaternion::from_rotation_matrix(&r),
        Vec3::new(radius * yaw.cos(), radius * yaw.sin(), height),
    )
}

/// Camera pose in the world looking along `yaw`, pitched by `pitch`.
pub fn look_pose(position: Vec3, yaw: f64, pitch: f64) -> Se3Pose {
    let m = camera_mount(yaw, pitch, 0.0, 0.0);
    Se3Pose::new(*m.rotation(), position)
}

pub fn default_intrinsics() -> CameraIntrinsics {
    CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, -0.02, 0.005, 640, 480)
        .expect("valid default intrinsics")
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    pub id: String,
    pub mount: Se3Pose,
    pub intrinsics: CameraIntrinsics,
    /// Constant capture delay relative to the nominal trigger time.
    pub time_offset_ns: i64,
}

/// Six cameras at 60° spacing pitched 10° up, plus `extra` asynchronous
/// cameras with capture delays up to `max_offset_ms`.
pub fn default_rig(extra: usize, max_offset_ms: f64, seed: u64) -> Vec<CameraModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5249_4721);
    let mut cams: Vec<CameraModel> = (0..6)
        .map(|i| CameraModel {
            id: format!("cam{i}"),
            mount: camera_mount(i as f64 * PI / 3.0, 10f64.to_radians(), 0.1, 1.5),
            intrinsics: default_intrinsics(),
            time_offset_ns: 0,
        })
        .collect();
    for j in 0..extra {
        cams.push(CameraModel {
            id: format!("cam{}", 6 + j),
            mount: camera_mount(PI / 6.0 + j as f64 * PI / 2.0, 0.0, 0.15, 1.2),
            intrinsics: CameraIntrinsics::new(450.0, 450.0, 320.0, 240.0, 0.0, 0.0, 640, 480)
                .expect("valid intrinsics"),
            time_offset_ns: ns(rng.random::<f64>() * max_offset_ms * 1e-3),
        });
    }
    cams
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Visibility {
    pub min_depth: f64,
    pub max_distance: f64,
    pub max_incidence_deg: f64,
}

impl Default for Visibility {
    fn default() -> Self {
        Self {
            min_depth: 0.2,
            max_distance: 15.0,
            max_incidence_deg: 80.0,
        }
    }
}

/// Noise-free pixel of landmark `j` in a camera at `pose`, if visible.
pub fn visible_pixel(
    world: &SyntheticWorld,
    j: usize,
    pose: &Se3Pose,
    k: &CameraIntrinsics,
    vis: &Visibility,
) -> Option<Vec2> {
    let p = world.landmarks[j];
    let pc = pose.inverse().transform_point(&p);
    if pc.z <= vis.min_depth {
        return None;
    }
    let ray = p - pose.translation();
    let dist = ray.norm();
    if dist > vis.max_distance {
        return None;
    }
    let n = world.walls[world.landmark_walls[j]].normal();
    if (ray.dot(&n) / dist).abs() < (90.0 - vis.max_incidence_deg).to_radians().sin() {
        return None;
    }
    let px = k.project(&pc).ok()?;
    if !k.in_bounds(&px) || world.occluded(pose.translation(), &p) {
        return None;
    }
    Some(px)
}

pub fn landmark_id(j: usize) -> String {
    format!("lm{j:05}")
}

/// Observed pixel with Gaussian noise, or a uniform pixel for outliers.
fn corrupt(
    px: Vec2,
    k: &CameraIntrinsics,
    noise: &NoiseConfig,
    rng: &mut ChaCha8Rng,
) -> (Vec2, bool) {
    if noise.outlier_fraction > 0.0 && rng.random::<f64>() < noise.outlier_fraction {
        let u = rng.random::<f64>() * k.width as f64;
        let v = rng.random::<f64>() * k.height as f64;
        return (Vec2::new(u, v), true);
    }
    if noise.pixel_std > 0.0 {
        let n = Normal::new(0.0, noise.pixel_std).expect("validated std");
        (px + Vec2::new(n.sample(rng), n.sample(rng)), false)
    } else {
        (px, false)
    }
}

/// Images of one sequence with their observations and outlier labels.
pub struct CameraCapture {
    pub images: Vec<ImageRecord>,
    pub true_poses: BTreeMap<String, Se3Pose>,
    pub observations: Vec<Observation>,
    pub outliers: BTreeSet<(String, String)>,
}

/// Triggers every rig camera at `trigger_times_s` (plus each camera's
/// delay) and projects the visible landmarks.
#[allow(clippy::too_many_arguments)]
pub fn simulate_cameras(
    world: &SyntheticWorld,
    traj: &PlatformTrajectoryGT,
    sequence: &str,
    start_ns: i64,
    rig: &[CameraModel],
    trigger_times_s: &[f64],
    vis: &Visibility,
    noise: &NoiseConfig,
    rng: &mut ChaCha8Rng,
) -> Result<CameraCapture> {
    noise.validate()?;
    let mut out = CameraCapture {
        images: Vec::new(),
        true_poses: BTreeMap::new(),
        observations: Vec::new(),
        outliers: BTreeSet::new(),
    };
    for (k, &t) in trigger_times_s.iter().enumerate() {
        for cam in rig {
            let t_ns = start_ns + ns(t) + cam.time_offset_ns;
            let pose = gt_pose(traj, (t_ns - start_ns) as f64 * 1e-9)? * cam.mount;
            let id = format!("{sequence}_{}_{k:03}", cam.id);
            for j in 0..world.landmarks.len() {
                if let Some(px) = visible_pixel(world, j, &pose, &cam.intrinsics, vis) {
                    let (pixel, outlier) = corrupt(px, &cam.intrinsics, noise, rng);
                    let lm = landmark_id(j);
                    if outlier {
                        out.outliers.insert((id.clone(), lm.clone()));
                    }
                    out.observations.push(Observation {
                        image_id: id.clone(),
                        landmark_id: lm,
                        pixel,
                        active: true,
                    });
                }
            }
            out.true_poses.insert(id.clone(), pose);
            out.images.push(ImageRecord {
                id,
                camera_id: cam.id.clone(),
                sequence: sequence.to_string(),
                t_ns,
                pose: Se3Pose::identity(),
                optimizable: true,
            });
        }
    }
    Ok(out)
}

/// Full scenario configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub seed: u64,
    pub landmarks: usize,
    pub sequences: usize,
    pub duration_s: f64,
    pub speed: f64,
    pub odometry: OdometryModel,
    pub lidar: LidarModel,
    pub image_period_s: f64,
    pub extra_cameras: usize,
    pub extra_camera_max_offset_ms: f64,
    pub noise: NoiseConfig,
    /// Rotation error of every nominal camera mount.
    pub calib_rotation_deg: f64,
    /// Relative error of the nominal focal lengths and principal points.
    pub calib_intrinsics_frac: f64,
    pub queries: usize,
    pub query_pixel_std: f64,
    pub visibility: Visibility,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            landmarks: 1500,
            sequences: 3,
            duration_s: 55.0,
            speed: 0.5,
            odometry: OdometryModel::default(),
            lidar: LidarModel::default(),
            image_period_s: 5.0,
            extra_cameras: 0,
            extra_camera_max_offset_ms: 30.0,
            noise: NoiseConfig::default(),
            calib_rotation_deg: 8.0,
            calib_intrinsics_frac: 0.02,
            queries: 20,
            query_pixel_std: 0.0,
            visibility: Visibility::default(),
        }
    }
}

impl SimConfig {
    /// Noise-free scenario with exact nominal calibration.
    pub fn noise_free() -> Self {
        Self {
            noise: NoiseConfig::zero(),
            calib_rotation_deg: 0.0,
            calib_intrinsics_frac: 0.0,
            ..Self::default()
        }
    }
}

/// Circle through the doorways for sequence `i`.
pub fn sequence_trajectory(i: usize, speed: f64, duration: f64) -> PlatformTrajectoryGT {
    match i % 3 {
        0 => PlatformTrajectoryGT::circle((8.0, 8.0), 4.0, 0.0, speed, true, duration),
        1 => PlatformTrajectoryGT::circle((8.0, 8.0), 4.0, PI / 2.0, speed, false, duration),
        _ => PlatformTrajectoryGT::circle(
            (8.0, 8.0),
            3.5 + 0.25 * (i / 3) as f64,
            PI,
            speed,
            true,
            duration,
        ),
    }
}

pub fn sequence_name(i: usize) -> String {
    format!("seq{i}")
}

pub fn sequence_start_ns(i: usize) -> i64 {
    (i as i64 + 1) * 100_000_000_000
}

/// Everything the simulator produces.
pub struct SimOutput {
    pub dataset: Dataset,
    pub queries: QuerySet,
    pub world: SyntheticWorld,
    /// (sequence, start ns, trajectory).
    pub trajectories: Vec<(String, i64, PlatformTrajectoryGT)>,
    pub cameras: Vec<CameraModel>,
}

fn perturb_rotation(
    q: &UnitQuaternion<f64>,
    angle_deg: f64,
    rng: &mut ChaCha8Rng,
) -> UnitQuaternion<f64> {
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
    q * so3_exp(&(axis * angle_deg.to_radians()))
}

fn sign(rng: &mut ChaCha8Rng) -> f64 {
    if rng.random::<bool>() {
        1.0
    } else {
        -1.0
    }
}

pub fn simulate(cfg: &SimConfig) -> Result<SimOutput> {
    cfg.noise.validate()?;
    if cfg.sequences == 0 || !(cfg.duration_s > 1.0) || !(cfg.image_period_s > 0.0) {
        return Err(Error::Config(
            "need at least one sequence, duration > 1 s and a positive image period".into(),
        ));
    }
    let world = SyntheticWorld::four_rooms(cfg.seed, cfg.landmarks);
    let cameras = default_rig(cfg.extra_cameras, cfg.extra_camera_max_offset_ms, cfg.seed);
    let lidar_mount = default_lidar_extrinsic();
    let mut rng_odom = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x4f44_4f4d);
    let mut rng_lidar = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x4c49_4441);
    let mut rng_cam = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x4341_4d53);
    let mut rng_calib = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x4341_4c42);
    let mut rng_align = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x414c_4e47);

    let mut ds = Dataset::default();
    let mut gt = GroundTruth::default();
    let mut all_obs = Vec::new();
    let mut trajectories = Vec::new();
    let triggers: Vec<f64> = {
        let first = 0.5 * cfg.image_period_s;
        let n = ((cfg.duration_s - 2.0 * first) / cfg.image_period_s + 1e-9).floor() as usize + 1;
        (0..n)
            .map(|k| first + k as f64 * cfg.image_period_s)
            .collect()
    };
    for i in 0..cfg.sequences {
        let seq = sequence_name(i);
        let start_ns = sequence_start_ns(i);
        let traj = sequence_trajectory(i, cfg.speed, cfg.duration_s);
        let odom = simulate_odometry(&traj, start_ns, &cfg.odometry, &cfg.noise, &mut rng_odom)?;
        ds.trajectory.insert(seq.clone(), odom.samples().to_vec());
        for s in simulate_lidar(
            &world,
            &traj,
            start_ns,
            &lidar_mount,
            &cfg.lidar,
            cfg.noise.range_std,
            &mut rng_lidar,
        )? {
            ds.scans.insert((seq.clone(), s.start_ns), s);
        }
        let align = if i == 0 {
            traj.start
        } else {
            let n_t = Normal::new(0.0, cfg.noise.init_pose_std_m)
                .map_err(|e| Error::Config(e.to_string()))?;
            let n_r = Normal::new(0.0, cfg.noise.init_pose_std_deg.to_radians())
                .map_err(|e| Error::Config(e.to_string()))?;
            let d = Se3Pose::exp(&Twist::new(
                Vec3::new(0.0, 0.0, n_r.sample(&mut rng_align)),
                Vec3::new(n_t.sample(&mut rng_align), n_t.sample(&mut rng_align), 0.0),
            ));
            d * traj.start
        };
        ds.alignment.insert(seq.clone(), align);
        let samples: Vec<(i64, Se3Pose)> = {
            let n = (cfg.duration_s * 10.0 + 1e-9).floor() as usize;
            (0..=n)
                .map(|k| k as f64 * 0.1)
                .map(|t| Ok((start_ns + ns(t), gt_pose(&traj, t)?)))
                .collect::<Result<_>>()?
        };
        gt.trajectory.insert(seq.clone(), samples);
        let cap = simulate_cameras(
            &world,
            &traj,
            &seq,
            start_ns,
            &cameras,
            &triggers,
            &cfg.visibility,
            &cfg.noise,
            &mut rng_cam,
        )?;
        ds.images.extend(cap.images);
        gt.images.extend(cap.true_poses);
        gt.outliers.extend(cap.outliers);
        all_obs.extend(cap.observations);
        trajectories.push((seq, start_ns, traj));
    }
    let observed: BTreeSet<&str> = all_obs.iter().map(|o| o.landmark_id.as_str()).collect();
    ds.landmarks = (0..world.landmarks.len())
        .map(landmark_id)
        .filter(|id| observed.contains(id.as_str()))
        .map(|id| Landmark {
            id,
            position: Vec3::zeros(),
            triangulated: false,
        })
        .collect();
    gt.landmarks = (0..world.landmarks.len())
        .filter(|j| observed.contains(landmark_id(*j).as_str()))
        .map(|j| (landmark_id(j), world.landmarks[j]))
        .collect();
    ds.observations = all_obs;

    // True and nominal calibration.
    gt.sensors = cameras
        .iter()
        .map(|c| Sensor::Camera {
            id: c.id.clone(),
            intrinsics: c.intrinsics,
        })
        .chain(std::iter::once(Sensor::Lidar {
            id: cfg.lidar.id.clone(),
        }))
        .collect();
    gt.rig = cameras
        .iter()
        .map(|c| RigExtrinsic {
            sensor_id: c.id.clone(),
            pose: c.mount,
            translation_fixed: true,
        })
        .chain(std::iter::once(RigExtrinsic {
            sensor_id: cfg.lidar.id.clone(),
            pose: lidar_mount,
            translation_fixed: true,
        }))
        .collect();
    ds.sensors = gt
        .sensors
        .iter()
        .map(|s| match s {
            Sensor::Camera { id, intrinsics: k } if cfg.calib_intrinsics_frac > 0.0 => {
                let f = cfg.calib_intrinsics_frac;
                let mut p = k.params();
                for v in p.iter_mut().take(4) {
                    *v *= 1.0 + f * sign(&mut rng_calib);
                }
                Sensor::Camera {
                    id: id.clone(),
                    intrinsics: k.with_params(&p),
                }
            }
            other => other.clone(),
        })
        .collect();
    ds.rig = gt
        .rig
        .iter()
        .map(|r| {
            let is_camera = cameras.iter().any(|c| c.id == r.sensor_id);
            if is_camera && cfg.calib_rotation_deg > 0.0 {
                RigExtrinsic {
                    pose: Se3Pose::new(
                        perturb_rotation(r.pose.rotation(), cfg.calib_rotation_deg, &mut rng_calib),
                        *r.pose.translation(),
                    ),
                    ..r.clone()
                }
            } else {
                r.clone()
            }
        })
        .collect();
    ds.ground_truth = Some(gt);
    let queries = simulate_queries(&world, cfg)?;
    Ok(SimOutput {
        dataset: ds,
        queries,
        world,
        trajectories,
        cameras,
    })
}

/// Random query cameras inside the rooms, each seeing at least 20
/// landmarks, with exact 2D-3D matches plus `query_pixel_std` noise.
pub fn simulate_queries(world: &SyntheticWorld, cfg: &SimConfig) -> Result<QuerySet> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5155_4552);
    let k = default_intrinsics();
    let noise = NoiseConfig {
        pixel_std: cfg.query_pixel_std,
        outlier_fraction: 0.0,
        ..NoiseConfig::zero()
    };
    let mut q = QuerySet {
        sensors: vec![Sensor::Camera {
            id: "query_cam".into(),
            intrinsics: k,
        }],
        ..QuerySet::default()
    };
    let mut attempts = 0;
    while q.queries.len() < cfg.queries {
        attempts += 1;
        if attempts > 100 * cfg.queries.max(1) {
            return Err(Error::InvalidDataset(
                "could not place query cameras with enough visible landmarks".into(),
            ));
        }
        let x = 1.0 + rng.random::<f64>() * (ROOM_SIZE - 2.0);
        let y = 1.0 + rng.random::<f64>() * (ROOM_SIZE - 2.0);
        let z = 1.2 + rng.random::<f64>() * 0.6;
        let yaw = rng.random::<f64>() * 2.0 * PI;
        let pitch = (rng.random::<f64>() - 0.5) * 10f64.to_radians();
        if (x - 8.0).abs() < 0.5 || (y - 8.0).abs() < 0.5 {
            continue;
        }
        let pose = look_pose(Vec3::new(x, y, z), yaw, pitch);
        let seen: Vec<(usize, Vec2)> = (0..world.landmarks.len())
            .filter_map(|j| visible_pixel(world, j, &pose, &k, &cfg.visibility).map(|px| (j, px)))
            .collect();
        if seen.len() < 20 {
            continue;
        }
        let id = format!("q{:03}", q.queries.len());
        for (j, px) in seen {
            let (pixel, _) = corrupt(px, &k, &noise, &mut rng);
            q.observations.push((id.clone(), landmark_id(j), pixel));
        }
        q.ground_truth.insert(id.clone(), pose);
        q.queries.push((id, "query_cam".into(), 0));
    }
    Ok(q)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn camera_mount_axes() {
        let m = camera_mount(0.0, 0.0, 0.0, 0.0);
        let r = m.rotation_matrix();
        assert!((r.column(2) - Vec3::x()).norm() < 1e-15);
        assert!((r.column(1) + Vec3::z()).norm() < 1e-15);
        assert!((r.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn circle_closes() {
        let t = PlatformTrajectoryGT::circle((8.0, 8.0), 4.0, 0.0, 0.5, true, 60.0);
        let period = 2.0 * PI * 4.0 / 0.5;
        let p = gt_pose(&t, period).unwrap();
        assert!((p.translation() - t.start.translation()).norm() < 1e-9);
    }

    #[test]
    fn wall_hit_distance() {
        let w = SyntheticWorld::square_room(10.0, 0);
        let d = w
            .ray_cast(&Vec3::new(3.0, 5.0, 1.0), &Vec3::new(1.0, 0.0, 0.0))
            .unwrap();
        assert!((d - 7.0).abs() < 1e-12);
    }
}
