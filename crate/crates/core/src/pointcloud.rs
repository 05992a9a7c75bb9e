//! Point clouds, wheel-odometry motion compensation of LiDAR scans, voxel
//! filtering and ICP registration.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{Matrix6, SymmetricEigen, Vector6};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{
    rotation_to_quaternion, so3_exp, Mat3, Se3Pose, Twist, Vec3, MAX_DECOMP_ITER,
};
use crate::kdtree::KdTree;
use crate::textio::{data_lines, fmt_f64, Fields};

/// Rotation period of the simulated LiDAR (10 Hz).
pub const LIDAR_PERIOD_S: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanPoint {
    /// Position in the LiDAR frame at the time of capture.
    pub position: Vec3,
    /// Seconds since scan start.
    pub dt: f64,
}

/// One LiDAR revolution; each point carries its own capture time offset.
#[derive(Debug, Clone, PartialEq)]
pub struct LidarScan {
    pub lidar_id: String,
    pub start_ns: i64,
    pub points: Vec<ScanPoint>,
}

impl LidarScan {
    pub fn new(lidar_id: impl Into<String>, start_ns: i64, points: Vec<ScanPoint>) -> Result<Self> {
        for (i, p) in points.iter().enumerate() {
            if !(p.dt >= 0.0 && p.dt < LIDAR_PERIOD_S) {
                return Err(Error::InvalidDataset(format!(
                    "scan point {i}: time offset {} outside [0, {LIDAR_PERIOD_S})",
                    p.dt
                )));
            }
            if !p.position.iter().all(|v| v.is_finite()) {
                return Err(Error::InvalidDataset(format!(
                    "scan point {i} is not finite"
                )));
            }
        }
        Ok(Self {
            lidar_id: lidar_id.into(),
            start_ns,
            points,
        })
    }

    pub fn max_dt(&self) -> f64 {
        self.points.iter().map(|p| p.dt).fold(0.0, f64::max)
    }

    /// The scan's points without timing, in the LiDAR frame.
    pub fn to_cloud(&self) -> PointCloud {
        PointCloud {
            frame: self.lidar_id.clone(),
            points: self.points.iter().map(|p| p.position).collect(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("# frame={} count={}\n", self.lidar_id, self.points.len());
        for p in &self.points {
            s.push_str(&format!(
                "{} {} {} {}\n",
                fmt_f64(p.position.x),
                fmt_f64(p.position.y),
                fmt_f64(p.position.z),
                fmt_f64(p.dt)
            ));
        }
        s
    }

    /// Parses the scan text format; the start time is carried by the caller
    /// (it is encoded in the file name on disk).
    pub fn from_text(text: &str, path: &Path, start_ns: i64) -> Result<Self> {
        let (frame, count) = parse_header(text, path)?;
        let mut points = Vec::with_capacity(count);
        for (line_no, line) in data_lines(text) {
            let mut f = Fields::new(line, path, line_no);
            let position = f.vec3("coordinate")?;
            let (tok, col) = {
                let (tok, col) = f.next_token("dt")?;
                (tok.to_string(), col)
            };
            let dt: f64 = tok
                .parse()
                .map_err(|_| f.error(col, format!("invalid dt '{tok}'")))?;
            if !(0.0..LIDAR_PERIOD_S).contains(&dt) {
                return Err(f.error(col, format!("dt {dt} outside [0, {LIDAR_PERIOD_S})")));
            }
            f.finish()?;
            points.push(ScanPoint { position, dt });
        }
        check_count(path, count, points.len())?;
        LidarScan::new(frame, start_ns, points)
    }
}

/// Points in a named frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub frame: String,
    pub points: Vec<Vec3>,
}

impl PointCloud {
    pub fn new(frame: impl Into<String>, points: Vec<Vec3>) -> Result<Self> {
        if let Some(i) = points.iter().position(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::InvalidDataset(format!(
                "cloud point {i} is not finite"
            )));
        }
        Ok(Self {
            frame: frame.into(),
            points,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Applies `pose` to every point; the result is labelled `frame`.
    pub fn transformed(&self, pose: &Se3Pose, frame: impl Into<String>) -> PointCloud {
        PointCloud {
            frame: frame.into(),
            points: self
                .points
                .iter()
                .map(|p| pose.transform_point(p))
                .collect(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("# frame={} count={}\n", self.frame, self.points.len());
        for p in &self.points {
            s.push_str(&format!(
                "{} {} {}\n",
                fmt_f64(p.x),
                fmt_f64(p.y),
                fmt_f64(p.z)
            ));
        }
        s
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let (frame, count) = parse_header(text, path)?;
        let mut points = Vec::with_capacity(count);
        for (line_no, line) in data_lines(text) {
            let mut f = Fields::new(line, path, line_no);
            points.push(f.vec3("coordinate")?);
            f.finish()?;
        }
        check_count(path, count, points.len())?;
        PointCloud::new(frame, points)
    }
}

fn parse_header(text: &str, path: &Path) -> Result<(String, usize)> {
    let err = |message: &str| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        column: 1,
        message: message.to_string(),
    };
    let first = text.lines().next().ok_or_else(|| err("missing header"))?;
    let body = first
        .strip_prefix('#')
        .ok_or_else(|| err("missing '# frame=<tag> count=<n>' header"))?;
    let mut frame = None;
    let mut count = None;
    for tok in body.split_whitespace() {
        if let Some(v) = tok.strip_prefix("frame=") {
            frame = Some(v.to_string());
        } else if let Some(v) = tok.strip_prefix("count=") {
            count = Some(v.parse::<usize>().map_err(|_| err("invalid count"))?);
        }
    }
    match (frame, count) {
        (Some(f), Some(c)) => Ok((f, c)),
        _ => Err(err("header must contain frame= and count=")),
    }
}

fn check_count(path: &Path, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            column: 1,
            message: format!("header count {expected} but {got} points"),
        });
    }
    Ok(())
}

/// Relative platform motion integrated from wheel encoders; the first sample
/// is the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct OdometryTrack {
    samples: Vec<(i64, Se3Pose)>,
}

impl OdometryTrack {
    pub fn new(samples: Vec<(i64, Se3Pose)>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InsufficientSamples("odometry track is empty".into()));
        }
        if let Some(i) = samples.windows(2).position(|w| w[1].0 <= w[0].0) {
            return Err(Error::NonMonotonic { index: i + 1 });
        }
        let first = &samples[0].1;
        if first.translation().norm() > 1e-12 || first.angle() > 1e-12 {
            return Err(Error::InvalidDataset(
                "first odometry sample must be the identity".into(),
            ));
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[(i64, Se3Pose)] {
        &self.samples
    }

    pub fn start(&self) -> i64 {
        self.samples[0].0
    }

    pub fn end(&self) -> i64 {
        self.samples[self.samples.len() - 1].0
    }

    /// Odometry pose at fractional nanosecond time, log-linear between the
    /// bracketing samples.
    pub fn pose_at(&self, t_ns: f64) -> Result<Se3Pose> {
        let (start, end) = (self.start(), self.end());
        if t_ns < start as f64 || t_ns > end as f64 {
            return Err(Error::CoverageGap {
                start: t_ns.floor() as i64,
                end: t_ns.ceil() as i64,
            });
        }
        let i = self.samples.partition_point(|(t, _)| (*t as f64) <= t_ns);
        let i = i.clamp(1, self.samples.len().max(2) - 1);
        if self.samples.len() == 1 {
            return Ok(self.samples[0].1);
        }
        let (ta, pa) = &self.samples[i - 1];
        let (tb, pb) = &self.samples[i];
        if t_ns == *ta as f64 {
            return Ok(*pa);
        }
        if t_ns == *tb as f64 {
            return Ok(*pb);
        }
        let alpha = (t_ns - *ta as f64) / (*tb - *ta) as f64;
        let delta = (pa.inverse() * *pb).log()?;
        Ok(*pa * Se3Pose::exp(&delta.scale(alpha)))
    }

    /// Motion of the platform from `t_ns` to `t_ns + dt_s`, i.e. the pose of
    /// B at the later time expressed in B at the earlier time.
    pub fn relative(&self, t_ns: i64, dt_s: f64) -> Result<Se3Pose> {
        let a = self.pose_at(t_ns as f64)?;
        if dt_s == 0.0 {
            return Ok(Se3Pose::identity());
        }
        let b = self.pose_at(t_ns as f64 + dt_s * 1e9)?;
        Ok(a.inverse() * b)
    }
}

/// Motion-compensates a scan into the platform frame at scan start:
/// `p_B = R_rel (R_BL p_L + t_BL) + t_rel` with the relative odometry motion
/// from scan start to the point's capture time.
pub fn undistort_scan(
    scan: &LidarScan,
    extrinsic: &Se3Pose,
    odom: &OdometryTrack,
) -> Result<PointCloud> {
    let end = scan.start_ns as f64 + scan.max_dt() * 1e9;
    if (scan.start_ns as f64) < odom.start() as f64 || end > odom.end() as f64 {
        return Err(Error::CoverageGap {
            start: scan.start_ns,
            end: end.ceil() as i64,
        });
    }
    let base = odom.pose_at(scan.start_ns as f64)?.inverse();
    let points = scan
        .points
        .iter()
        .map(|p| {
            let rel = if p.dt == 0.0 {
                Se3Pose::identity()
            } else {
                base * odom.pose_at(scan.start_ns as f64 + p.dt * 1e9)?
            };
            Ok(rel.transform_point(&extrinsic.transform_point(&p.position)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PointCloud {
        frame: "base".into(),
        points,
    })
}

/// One centroid per occupied voxel, ordered by voxel index.
pub fn voxel_downsample(cloud: &PointCloud, voxel: f64) -> PointCloud {
    assert!(voxel > 0.0, "voxel size must be positive");
    let mut cells: BTreeMap<(i64, i64, i64), (Vec3, usize)> = BTreeMap::new();
    for p in &cloud.points {
        let key = (
            (p.x / voxel).floor() as i64,
            (p.y / voxel).floor() as i64,
            (p.z / voxel).floor() as i64,
        );
        let e = cells.entry(key).or_insert((Vec3::zeros(), 0));
        e.0 += p;
        e.1 += 1;
    }
    PointCloud {
        frame: cloud.frame.clone(),
        points: cells.into_values().map(|(s, n)| s / n as f64).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcpConfig {
    pub max_corr_dist: f64,
    pub max_iter: usize,
    pub tol: f64,
    /// Downsample both clouds with this voxel size before aligning.
    pub voxel: Option<f64>,
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self {
            max_corr_dist: 0.5,
            max_iter: 50,
            tol: 1e-7,
            voxel: None,
        }
    }
}

impl IcpConfig {
    /// Coarse verification stage: 0.5 m voxels, 10 iterations.
    pub fn rough() -> Self {
        Self {
            max_iter: 10,
            voxel: Some(0.5),
            ..Self::default()
        }
    }

    /// Refinement stage: full clouds, 50 iterations.
    pub fn precise() -> Self {
        Self::default()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcpResult {
    /// Transform taking source coordinates into the target frame.
    pub pose: Se3Pose,
    /// Fraction of source points with a target neighbor within the
    /// correspondence distance.
    pub fitness: f64,
    pub rmse: f64,
    pub iterations: usize,
    /// Residual rmse at the start of every iteration, then the final value.
    pub rmse_history: Vec<f64>,
}

struct Association {
    pairs: Vec<(Vec3, Vec3)>,
    sq_sum: f64,
}

fn associate(points: &[Vec3], tree: &KdTree, pose: &Se3Pose, max_dist: f64) -> Association {
    let max2 = max_dist * max_dist;
    let found: Vec<Option<(Vec3, Vec3, f64)>> = points
        .par_iter()
        .map(|p| {
            let q = pose.transform_point(p);
            tree.nearest(&q)
                .filter(|(_, d2)| *d2 <= max2)
                .map(|(j, d2)| (q, *tree.point(j), d2))
        })
        .collect();
    let mut pairs = Vec::with_capacity(found.len());
    let mut sq_sum = 0.0;
    for (p, q, d2) in found.into_iter().flatten() {
        pairs.push((p, q));
        sq_sum += d2;
    }
    Association { pairs, sq_sum }
}

fn rms(sq_sum: f64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        (sq_sum / n as f64).sqrt()
    }
}

/// Closed-form rigid transform minimizing Σ|R p + t − q|² (scale fixed).
pub fn kabsch(pairs: &[(Vec3, Vec3)]) -> Result<Se3Pose> {
    if pairs.is_empty() {
        return Err(Error::DegenerateGeometry("no correspondences".into()));
    }
    let n = pairs.len() as f64;
    let pc = pairs.iter().fold(Vec3::zeros(), |a, (p, _)| a + p) / n;
    let qc = pairs.iter().fold(Vec3::zeros(), |a, (_, q)| a + q) / n;
    let mut h = Mat3::zeros();
    let mut cov = Mat3::zeros();
    for (p, q) in pairs {
        let dp = p - pc;
        h += dp * (q - qc).transpose();
        cov += dp * dp.transpose();
    }
    let mut ev: Vec<f64> = SymmetricEigen::try_new(cov, f64::EPSILON, MAX_DECOMP_ITER)
        .ok_or_else(|| {
            Error::DegenerateGeometry("covariance eigen-decomposition did not converge".into())
        })?
        .eigenvalues
        .iter()
        .copied()
        .collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if !(ev[0] > 0.0) || ev[1] <= 1e-12 * ev[0] {
        return Err(Error::DegenerateGeometry(
            "correspondences are collinear or coincident".into(),
        ));
    }
    let svd = h
        .try_svd(true, true, f64::EPSILON, MAX_DECOMP_ITER)
        .ok_or_else(|| Error::DegenerateGeometry("cross-covariance SVD did not converge".into()))?;
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let v = v_t.transpose();
    let mut d = Mat3::identity();
    if (v * u.transpose()).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = v * d * u.transpose();
    let rot = rotation_to_quaternion(&r);
    let t = qc - rot * pc;
    Ok(Se3Pose::new(rot, t))
}

fn update_norm(delta: &Se3Pose) -> f64 {
    delta.log().map(|x| x.norm()).unwrap_or(f64::INFINITY)
}

fn prepared(cloud: &PointCloud, voxel: Option<f64>) -> Vec<Vec3> {
    match voxel {
        Some(v) => voxel_downsample(cloud, v).points,
        None => cloud.points.clone(),
    }
}

/// Point-to-point ICP. Returns the transform mapping `source` into the frame
/// of `target`, starting from `init`.
pub fn icp_align(
    source: &PointCloud,
    target: &PointCloud,
    init: &Se3Pose,
    cfg: &IcpConfig,
) -> Result<IcpResult> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let src = prepared(source, cfg.voxel);
    let tgt = prepared(target, cfg.voxel);
    let tree = KdTree::new(&tgt);
    let mut pose = *init;
    let mut history = Vec::new();
    let mut iterations = 0;
    let mut assoc = associate(&src, &tree, &pose, cfg.max_corr_dist);
    if assoc.pairs.is_empty() {
        return Err(Error::NoOverlap {
            max_dist: cfg.max_corr_dist,
        });
    }
    while iterations < cfg.max_iter {
        history.push(rms(assoc.sq_sum, assoc.pairs.len()));
        let delta = kabsch(&assoc.pairs)?;
        pose = delta * pose;
        iterations += 1;
        assoc = associate(&src, &tree, &pose, cfg.max_corr_dist);
        if assoc.pairs.is_empty() {
            return Err(Error::NoOverlap {
                max_dist: cfg.max_corr_dist,
            });
        }
        if update_norm(&delta) < cfg.tol {
            break;
        }
    }
    let rmse = rms(assoc.sq_sum, assoc.pairs.len());
    history.push(rmse);
    Ok(IcpResult {
        pose,
        fitness: assoc.pairs.len() as f64 / src.len() as f64,
        rmse,
        iterations,
        rmse_history: history,
    })
}

/// Surface normals from local principal components, oriented toward the
/// cloud origin. For a cloud that is globally planar (a single horizontal
/// LiDAR ring) the normal is taken in-plane, perpendicular to the local line.
/// Points whose neighborhood is neither linear nor planar get `None`.
pub fn estimate_normals(points: &[Vec3], k: usize) -> Vec<Option<Vec3>> {
    if points.len() < 3 {
        return vec![None; points.len()];
    }
    let global_normal = {
        let c = points.iter().fold(Vec3::zeros(), |a, p| a + p) / points.len() as f64;
        let cov = points
            .iter()
            .fold(Mat3::zeros(), |a, p| a + (p - c) * (p - c).transpose());
        let (vals, vecs) = sorted_eigen(&cov);
        (vals[0] <= 1e-9 * vals[2]).then(|| vecs[0])
    };
    let tree = KdTree::new(points);
    let k = k.max(3).min(points.len());
    // Per point: candidate normal and flatness ratio of the neighborhood.
    let local: Vec<(Vec3, f64)> = points
        .par_iter()
        .map(|p| {
            let nb = tree.knn(p, k);
            let c = nb.iter().fold(Vec3::zeros(), |a, (j, _)| a + points[*j]) / nb.len() as f64;
            let cov = nb.iter().fold(Mat3::zeros(), |a, (j, _)| {
                let d = points[*j] - c;
                a + d * d.transpose()
            });
            let (vals, vecs) = sorted_eigen(&cov);
            match global_normal {
                Some(g) => (vecs[2].cross(&g), vals[1] / vals[2]),
                None => (vecs[0], vals[0] / vals[1]),
            }
        })
        .collect();
    // Clean neighborhoods share a flatness set by sensor noise; ones that
    // straddle an edge stand out above it.
    let mut ratios: Vec<f64> = local
        .iter()
        .map(|(_, r)| *r)
        .filter(|r| r.is_finite())
        .collect();
    if ratios.is_empty() {
        return vec![None; points.len()];
    }
    let mid = ratios.len() / 2;
    let median = *ratios.select_nth_unstable_by(mid, |a, b| a.total_cmp(b)).1;
    let threshold = (4.0 * median).clamp(1e-14, 0.05);
    points
        .iter()
        .zip(local)
        .map(|(p, (n, ratio))| {
            let norm = n.norm();
            if !(ratio <= threshold) || !(norm > 1e-12) {
                return None;
            }
            let n = n / norm;
            Some(if n.dot(p) > 0.0 { -n } else { n })
        })
        .collect()
}

/// Ascending eigenpairs; NaN eigenvalues if the iteration fails to converge.
fn sorted_eigen(m: &Mat3) -> ([f64; 3], [Vec3; 3]) {
    let Some(e) = SymmetricEigen::try_new(*m, f64::EPSILON, MAX_DECOMP_ITER) else {
        return ([f64::NAN; 3], [Vec3::zeros(); 3]);
    };
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&a, &b| e.eigenvalues[a].total_cmp(&e.eigenvalues[b]));
    (
        [
            e.eigenvalues[idx[0]],
            e.eigenvalues[idx[1]],
            e.eigenvalues[idx[2]],
        ],
        [
            e.eigenvectors.column(idx[0]).into_owned(),
            e.eigenvectors.column(idx[1]).into_owned(),
            e.eigenvectors.column(idx[2]).into_owned(),
        ],
    )
}

/// Neighborhood size for normal estimation.
pub const NORMAL_NEIGHBORS: usize = 16;
/// Minimum cosine between matched normals in point-to-plane ICP.
pub const NORMAL_AGREEMENT: f64 = 0.9;

/// Point-to-plane ICP used for the refinement stage of the SLAM front end.
///
/// Each iteration solves the linearized problem about the centroid of the
/// matched source points; directions the geometry leaves unconstrained (for
/// example height, roll and pitch of a single horizontal ring) receive no
/// update. Fitness is measured as in [`icp_align`].
pub fn icp_align_point_to_plane(
    source: &PointCloud,
    target: &PointCloud,
    init: &Se3Pose,
    cfg: &IcpConfig,
) -> Result<IcpResult> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let src_all = prepared(source, cfg.voxel);
    let tgt_all = prepared(target, cfg.voxel);
    let src_normals = estimate_normals(&src_all, NORMAL_NEIGHBORS);
    let tgt_normals = estimate_normals(&tgt_all, NORMAL_NEIGHBORS);
    let src: Vec<(Vec3, Vec3)> = src_all
        .iter()
        .zip(&src_normals)
        .filter_map(|(p, n)| n.map(|n| (*p, n)))
        .collect();
    let tgt: Vec<(Vec3, Vec3)> = tgt_all
        .iter()
        .zip(&tgt_normals)
        .filter_map(|(p, n)| n.map(|n| (*p, n)))
        .collect();
    if src.is_empty() || tgt.is_empty() {
        return Err(Error::DegenerateGeometry(
            "no points with a well-defined normal".into(),
        ));
    }
    let tgt_points: Vec<Vec3> = tgt.iter().map(|(p, _)| *p).collect();
    let tree = KdTree::new(&tgt_points);
    let max2 = cfg.max_corr_dist * cfg.max_corr_dist;

    let associate_planes = |pose: &Se3Pose| -> Vec<(Vec3, Vec3, Vec3)> {
        src.par_iter()
            .filter_map(|(p, n)| {
                let q = pose.transform_point(p);
                let n_s = pose.transform_vector(n);
                let (j, d2) = tree.nearest(&q)?;
                let (t, n_t) = tgt[j];
                (d2 <= max2 && n_t.dot(&n_s) >= NORMAL_AGREEMENT).then_some((q, t, n_t))
            })
            .collect()
    };
    let plane_rms = |m: &[(Vec3, Vec3, Vec3)]| {
        let s: f64 = m.iter().map(|(q, t, n)| n.dot(&(q - t)).powi(2)).sum();
        rms(s, m.len())
    };

    let mut pose = *init;
    let mut matches = associate_planes(&pose);
    if matches.is_empty() {
        return Err(Error::NoOverlap {
            max_dist: cfg.max_corr_dist,
        });
    }
    let mut history = Vec::new();
    let mut iterations = 0;
    while iterations < cfg.max_iter {
        history.push(plane_rms(&matches));
        let c = matches.iter().fold(Vec3::zeros(), |a, (q, _, _)| a + q) / matches.len() as f64;
        let mut a = Matrix6::<f64>::zeros();
        let mut b = Vector6::<f64>::zeros();
        for (q, t, n) in &matches {
            let r = n.dot(&(q - t));
            let w = (q - c).cross(n);
            let j = Vector6::new(w.x, w.y, w.z, n.x, n.y, n.z);
            a += j * j.transpose();
            b -= j * r;
        }
        let eig = SymmetricEigen::try_new(a, f64::EPSILON, MAX_DECOMP_ITER).ok_or_else(|| {
            Error::DegenerateGeometry("point-to-plane system did not converge".into())
        })?;
        let lmax = eig.eigenvalues.max();
        let mut delta = Vector6::<f64>::zeros();
        let mut rank = 0;
        for k in 0..6 {
            let l = eig.eigenvalues[k];
            if l > 1e-9 * lmax && l > 0.0 {
                let v = eig.eigenvectors.column(k);
                delta += v * (v.dot(&b) / l);
                rank += 1;
            }
        }
        if rank < 3 {
            return Err(Error::DegenerateGeometry(format!(
                "point-to-plane system has rank {rank}"
            )));
        }
        let omega = Vec3::new(delta[0], delta[1], delta[2]);
        let v = Vec3::new(delta[3], delta[4], delta[5]);
        let rot = so3_exp(&omega);
        let step = Se3Pose::new(rot, c - rot * c + v);
        pose = step * pose;
        iterations += 1;
        matches = associate_planes(&pose);
        if matches.is_empty() {
            return Err(Error::NoOverlap {
                max_dist: cfg.max_corr_dist,
            });
        }
        if Twist::new(omega, v).norm() < cfg.tol {
            break;
        }
    }
    let rmse = plane_rms(&matches);
    history.push(rmse);
    let full_tree = KdTree::new(&tgt_all);
    let inliers = associate(&src_all, &full_tree, &pose, cfg.max_corr_dist)
        .pairs
        .len();
    Ok(IcpResult {
        pose,
        fitness: inliers as f64 / src_all.len() as f64,
        rmse,
        iterations,
        rmse_history: history,
    })
}

/// Registration objective used by the SLAM front end.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IcpObjective {
    PointToPoint,
    PointToPlane,
}

impl IcpObjective {
    pub fn as_str(&self) -> &'static str {
        match self {
            IcpObjective::PointToPoint => "point_to_point",
            IcpObjective::PointToPlane => "point_to_plane",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "point_to_point" => Some(IcpObjective::PointToPoint),
            "point_to_plane" => Some(IcpObjective::PointToPlane),
            _ => None,
        }
    }
}

pub fn register(
    source: &PointCloud,
    target: &PointCloud,
    init: &Se3Pose,
    cfg: &IcpConfig,
    objective: IcpObjective,
) -> Result<IcpResult> {
    match objective {
        IcpObjective::PointToPoint => icp_align(source, target, init, cfg),
        IcpObjective::PointToPlane => icp_align_point_to_plane(source, target, init, cfg),
    }
}
