//! Absolute pose from 2D-3D matches, the three-threshold accuracy protocol
//! and the low-frequency image score.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix6, SMatrix, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::geometry::{skew, CameraIntrinsics, Se3Pose, Twist, Vec2, Vec3};
use crate::pointcloud::kabsch;

/// One 2D-3D correspondence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub pixel: Vec2,
    pub point: Vec3,
}

/// Real roots of `c[0] x⁴ + c[1] x³ + c[2] x² + c[3] x + c[4]`, via the
/// companion matrix and Newton polishing.
pub fn quartic_roots(c: [f64; 5]) -> Vec<f64> {
    let eval = |x: f64| (((c[0] * x + c[1]) * x + c[2]) * x + c[3]) * x + c[4];
    let deriv = |x: f64| ((4.0 * c[0] * x + 3.0 * c[1]) * x + 2.0 * c[2]) * x + c[3];
    let scale = c.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return Vec::new();
    }
    let lead = c.iter().position(|v| v.abs() > 1e-14 * scale).unwrap_or(4);
    let deg = 4 - lead;
    if deg == 0 {
        return Vec::new();
    }
    let mut comp = nalgebra::DMatrix::<f64>::zeros(deg, deg);
    for j in 0..deg {
        comp[(0, j)] = -c[lead + 1 + j] / c[lead];
    }
    for i in 1..deg {
        comp[(i, i - 1)] = 1.0;
    }
    let mut roots = Vec::new();
    for z in comp.complex_eigenvalues().iter() {
        if z.im.abs() > 1e-6 * (1.0 + z.re.abs()) {
            continue;
        }
        let mut x = z.re;
        for _ in 0..20 {
            let d = deriv(x);
            if d == 0.0 {
                break;
            }
            let step = eval(x) / d;
            x -= step;
            if step.abs() < 1e-15 * (1.0 + x.abs()) {
                break;
            }
        }
        if x.is_finite() {
            roots.push(x);
        }
    }
    roots
}

/// Grunert's solution of the perspective-three-point problem. `bearings`
/// are unit rays in the camera frame. Returns candidate `T_WC`.
pub fn p3p(bearings: &[Vec3; 3], points: &[Vec3; 3]) -> Vec<Se3Pose> {
    let [f1, f2, f3] = bearings;
    let [p1, p2, p3] = points;
    let a2 = (p2 - p3).norm_squared();
    let b2 = (p1 - p3).norm_squared();
    let c2 = (p1 - p2).norm_squared();
    if a2 < 1e-18 || b2 < 1e-18 || c2 < 1e-18 {
        return Vec::new();
    }
    let ca = f2.dot(f3);
    let cb = f1.dot(f3);
    let cg = f1.dot(f2);
    let amc = (a2 - c2) / b2;
    let apc = (a2 + c2) / b2;
    let bmc = (b2 - c2) / b2;
    let bma = (b2 - a2) / b2;
    let coeffs = [
        (amc - 1.0).powi(2) - 4.0 * c2 / b2 * ca * ca,
        4.0 * (amc * (1.0 - amc) * cb - (1.0 - apc) * ca * cg + 2.0 * c2 / b2 * ca * ca * cb),
        2.0 * (amc * amc - 1.0 + 2.0 * amc * amc * cb * cb + 2.0 * bmc * ca * ca
            - 4.0 * apc * ca * cb * cg
            + 2.0 * bma * cg * cg),
        4.0 * (-amc * (1.0 + amc) * cb + 2.0 * a2 / b2 * cg * cg * cb - (1.0 - apc) * ca * cg),
        (1.0 + amc).powi(2) - 4.0 * a2 / b2 * cg * cg,
    ];
    let mut out = Vec::new();
    for v in quartic_roots(coeffs) {
        if v <= 0.0 {
            continue;
        }
        let den = 2.0 * (cg - v * ca);
        if den.abs() < 1e-14 {
            continue;
        }
        let u = ((-1.0 + amc) * v * v - 2.0 * amc * cb * v + 1.0 + amc) / den;
        let d = 1.0 + v * v - 2.0 * v * cb;
        if u <= 0.0 || d <= 0.0 {
            continue;
        }
        let s1 = (b2 / d).sqrt();
        let (s2, s3) = (u * s1, v * s1);
        let pairs = [(*p1, f1 * s1), (*p2, f2 * s2), (*p3, f3 * s3)];
        if let Ok(t_cw) = kabsch(&pairs) {
            out.push(t_cw.inverse());
        }
    }
    out
}

fn reprojection_error(m: &Match, t_cw: &Se3Pose, k: &CameraIntrinsics) -> f64 {
    k.project(&t_cw.transform_point(&m.point))
        .map(|px| (m.pixel - px).norm())
        .unwrap_or(f64::INFINITY)
}

/// Gauss–Newton on the summed squared reprojection error of `matches`
/// (right perturbation of `T_WC`).
pub fn refine_pose(
    matches: &[Match],
    init: &Se3Pose,
    k: &CameraIntrinsics,
    iterations: usize,
) -> Se3Pose {
    let mut pose = *init;
    let cost = |p: &Se3Pose| -> f64 {
        let t_cw = p.inverse();
        matches
            .iter()
            .map(|m| reprojection_error(m, &t_cw, k).powi(2))
            .sum()
    };
    let mut current = cost(&pose);
    for _ in 0..iterations {
        let t_cw = pose.inverse();
        let mut h = Matrix6::<f64>::zeros();
        let mut g = Vector6::<f64>::zeros();
        for m in matches {
            let pc = t_cw.transform_point(&m.point);
            let Ok((px, jp, _)) = k.project_with_jacobians(&pc) else {
                continue;
            };
            let e = m.pixel - px;
            let mut d = SMatrix::<f64, 3, 6>::zeros();
            d.fixed_view_mut::<3, 3>(0, 0).copy_from(&skew(&pc));
            d.fixed_view_mut::<3, 3>(0, 3)
                .copy_from(&(-nalgebra::Matrix3::identity()));
            let j = -(jp * d);
            h += j.transpose() * j;
            g -= j.transpose() * e;
        }
        let Some(step) = h.cholesky().map(|c| c.solve(&g)) else {
            break;
        };
        let trial = pose.retract(&Twist::from_vector(&step));
        let c = cost(&trial);
        if !(c <= current) {
            break;
        }
        let done = current - c <= 1e-15 * current.max(1e-300) || step.norm() < 1e-14;
        pose = trial;
        current = c;
        if done {
            break;
        }
    }
    pose
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacConfig {
    pub iterations: usize,
    pub inlier_px: f64,
    pub min_inliers: usize,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            inlier_px: 8.0,
            min_inliers: 12,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PnpOutcome {
    Localized { pose: Se3Pose, inliers: Vec<bool> },
    NotLocalized { best_inliers: usize },
}

impl PnpOutcome {
    pub fn pose(&self) -> Option<&Se3Pose> {
        match self {
            PnpOutcome::Localized { pose, .. } => Some(pose),
            PnpOutcome::NotLocalized { .. } => None,
        }
    }
}

fn inlier_mask(matches: &[Match], pose: &Se3Pose, k: &CameraIntrinsics, px: f64) -> Vec<bool> {
    let t_cw = pose.inverse();
    matches
        .iter()
        .map(|m| reprojection_error(m, &t_cw, k) <= px)
        .collect()
}

/// P3P hypotheses inside RANSAC, then refinement on the consensus set.
/// Returns `T_WC`.
pub fn pnp_ransac(
    matches: &[Match],
    k: &CameraIntrinsics,
    cfg: &RansacConfig,
) -> Result<PnpOutcome> {
    if matches.len() < 4 {
        return Err(Error::InsufficientMatches { got: matches.len() });
    }
    let bearings: Vec<Vec3> = matches.iter().map(|m| k.bearing(&m.pixel)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(usize, Se3Pose)> = None;
    for _ in 0..cfg.iterations {
        let i = rng.random_range(0..matches.len());
        let mut j = rng.random_range(0..matches.len() - 1);
        if j >= i {
            j += 1;
        }
        let mut l = rng.random_range(0..matches.len() - 2);
        for lo in [i.min(j), i.max(j)] {
            if l >= lo {
                l += 1;
            }
        }
        let f = [bearings[i], bearings[j], bearings[l]];
        let p = [matches[i].point, matches[j].point, matches[l].point];
        for pose in p3p(&f, &p) {
            let n = inlier_mask(matches, &pose, k, cfg.inlier_px)
                .iter()
                .filter(|b| **b)
                .count();
            if best.as_ref().is_none_or(|(b, _)| n > *b) {
                best = Some((n, pose));
            }
        }
    }
    let Some((count, pose)) = best else {
        return Ok(PnpOutcome::NotLocalized { best_inliers: 0 });
    };
    if count < cfg.min_inliers.max(4) {
        return Ok(PnpOutcome::NotLocalized {
            best_inliers: count,
        });
    }
    let mut pose = pose;
    let mut mask = inlier_mask(matches, &pose, k, cfg.inlier_px);
    for _ in 0..3 {
        let inl: Vec<Match> = matches
            .iter()
            .zip(&mask)
            .filter(|(_, b)| **b)
            .map(|(m, _)| *m)
            .collect();
        pose = refine_pose(&inl, &pose, k, 50);
        let next = inlier_mask(matches, &pose, k, cfg.inlier_px);
        if next == mask {
            break;
        }
        mask = next;
    }
    let count = mask.iter().filter(|b| **b).count();
    if count < cfg.min_inliers.max(4) {
        return Ok(PnpOutcome::NotLocalized {
            best_inliers: count,
        });
    }
    Ok(PnpOutcome::Localized {
        pose,
        inliers: mask,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseError {
    pub position_m: f64,
    pub angle_deg: f64,
}

/// Position distance and rotation angle of `R_gtᵀ R_est`.
pub fn pose_error(est: &Se3Pose, gt: &Se3Pose) -> PoseError {
    let q = gt.rotation().inverse() * est.rotation();
    let v = q.imag().norm();
    let w = q.scalar().abs();
    PoseError {
        position_m: (est.translation() - gt.translation()).norm(),
        angle_deg: (2.0 * v.atan2(w)).to_degrees(),
    }
}

/// High, medium and low accuracy thresholds (meters, degrees).
pub const THRESHOLDS: [(f64, f64); 3] = [(0.1, 1.0), (0.25, 2.0), (1.0, 5.0)];

#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyReport {
    pub thresholds: Vec<(f64, f64)>,
    /// Fraction of all ground-truth queries within each threshold.
    pub fractions: Vec<f64>,
    /// Error per query id; `None` if the query was not localized.
    pub errors: BTreeMap<String, Option<PoseError>>,
    pub unlocalized: usize,
}

pub fn passes(e: &PoseError, threshold: (f64, f64)) -> bool {
    e.position_m <= threshold.0 && e.angle_deg <= threshold.1
}

/// Missing estimates count as failures at every threshold.
pub fn evaluate(
    estimates: &BTreeMap<String, Se3Pose>,
    ground_truth: &BTreeMap<String, Se3Pose>,
    thresholds: &[(f64, f64)],
) -> AccuracyReport {
    let errors: BTreeMap<String, Option<PoseError>> = ground_truth
        .iter()
        .map(|(id, gt)| (id.clone(), estimates.get(id).map(|e| pose_error(e, gt))))
        .collect();
    let n = ground_truth.len();
    let fractions = thresholds
        .iter()
        .map(|&t| {
            let hits = errors
                .values()
                .filter(|e| e.as_ref().is_some_and(|e| passes(e, t)))
                .count();
            if n == 0 {
                0.0
            } else {
                hits as f64 / n as f64
            }
        })
        .collect();
    AccuracyReport {
        thresholds: thresholds.to_vec(),
        fractions,
        unlocalized: errors.values().filter(|e| e.is_none()).count(),
        errors,
    }
}

impl AccuracyReport {
    pub fn to_table(&self) -> String {
        let mut s = String::from("threshold            localized\n");
        for (t, f) in self.thresholds.iter().zip(&self.fractions) {
            let _ = writeln!(s, "({:>4} m, {:>2} deg)    {:.4}", t.0, t.1, f);
        }
        let _ = writeln!(
            s,
            "queries {}  unlocalized {}",
            self.errors.len(),
            self.unlocalized
        );
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("query_id,pos_err_m,ang_err_deg");
        for t in &self.thresholds {
            let _ = write!(s, ",localized_{}", t.0);
        }
        s.push('\n');
        for (id, e) in &self.errors {
            match e {
                Some(e) => {
                    let _ = write!(s, "{id},{:.9},{:.9}", e.position_m, e.angle_deg);
                    for t in &self.thresholds {
                        let _ = write!(s, ",{}", passes(e, *t) as u8);
                    }
                }
                None => {
                    let _ = write!(s, "{id},nan,nan");
                    for _ in &self.thresholds {
                        s.push_str(",0");
                    }
                }
            }
            s.push('\n');
        }
        s
    }
}

/// 8-bit grayscale image stored as floats in [0, 255].
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(Error::InvalidDataset(format!(
                "image of {width}x{height} needs {} pixels, got {}",
                width * height,
                data.len()
            )));
        }
        if data.iter().any(|v| !(0.0..=255.0).contains(v)) {
            return Err(Error::InvalidDataset(
                "pixel intensities must lie in [0, 255]".into(),
            ));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let data = (0..height)
            .flat_map(|y| (0..width).map(move |x| (x, y)))
            .map(|(x, y)| f(x, y))
            .collect();
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

pub const LOWFREQ_THRESHOLD: f64 = 20.0;
pub const DEFAULT_CUTOFF_FRACTION: f64 = 0.25;

/// Signed frequency in cycles per pixel of DFT bin `k` out of `n`.
fn bin_frequency(k: usize, n: usize) -> f64 {
    let s = if 2 * k >= n + (n % 2) {
        k as f64 - n as f64
    } else {
        k as f64
    };
    s / n as f64
}

/// True if the bin `(kx, ky)` survives a low-pass at `cutoff_fraction` of
/// the Nyquist frequency (0.5 cycles/pixel).
pub fn lowpass_keeps(
    kx: usize,
    ky: usize,
    width: usize,
    height: usize,
    cutoff_fraction: f64,
) -> bool {
    let fx = bin_frequency(kx, width);
    let fy = bin_frequency(ky, height);
    (fx * fx + fy * fy).sqrt() <= cutoff_fraction * 0.5
}

/// Mean absolute difference between the image and its low-passed copy.
pub fn lowfreq_score(img: &GrayImage, cutoff_fraction: f64) -> f64 {
    let (w, h) = (img.width, img.height);
    let mut planner = FftPlanner::<f64>::new();
    let row_fwd = planner.plan_fft_forward(w);
    let col_fwd = planner.plan_fft_forward(h);
    let row_inv = planner.plan_fft_inverse(w);
    let col_inv = planner.plan_fft_inverse(h);
    let mut buf: Vec<Complex<f64>> = img.data.iter().map(|v| Complex::new(*v, 0.0)).collect();
    for row in buf.chunks_mut(w) {
        row_fwd.process(row);
    }
    let mut col = vec![Complex::new(0.0, 0.0); h];
    let mut columns = |buf: &mut [Complex<f64>], fft: &dyn rustfft::Fft<f64>, mask: bool| {
        for x in 0..w {
            for y in 0..h {
                col[y] = buf[y * w + x];
            }
            fft.process(&mut col);
            for y in 0..h {
                buf[y * w + x] = if mask && !lowpass_keeps(x, y, w, h, cutoff_fraction) {
                    Complex::new(0.0, 0.0)
                } else {
                    col[y]
                };
            }
        }
    };
    columns(&mut buf, col_fwd.as_ref(), true);
    columns(&mut buf, col_inv.as_ref(), false);
    for row in buf.chunks_mut(w) {
        row_inv.process(row);
    }
    let norm = (w * h) as f64;
    img.data
        .iter()
        .zip(&buf)
        .map(|(o, f)| (o - f.re / norm).abs())
        .sum::<f64>()
        / norm
}

pub fn is_low_frequency(score: f64) -> bool {
    score < LOWFREQ_THRESHOLD
}

/// Reads a binary (P5) PGM with maxval ≤ 255.
pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            Error::Io(e)
        }
    })?;
    let err = |m: &str| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        column: 1,
        message: m.to_string(),
    };
    let mut pos = 0;
    let mut header = Vec::new();
    while header.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(err("truncated PGM header"));
        }
        header.push(String::from_utf8_lossy(&bytes[start..pos]).to_string());
    }
    if header[0] != "P5" {
        return Err(err("not a binary PGM (P5)"));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| err("invalid PGM header number"))
    };
    let (w, h, maxval) = (num(&header[1])?, num(&header[2])?, num(&header[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(err("only 8-bit PGM is supported"));
    }
    pos += 1;
    let data = bytes
        .get(pos..pos + w * h)
        .ok_or_else(|| err("truncated PGM data"))?;
    GrayImage::new(
        w,
        h,
        data.iter()
            .map(|&v| v as f64 * 255.0 / maxval as f64)
            .collect(),
    )
}

pub fn write_pgm(img: &GrayImage, path: &Path) -> Result<()> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|v| v.round().clamp(0.0, 255.0) as u8));
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::UnitQuaternion;

    #[test]
    fn quartic_known_roots() {
        // (x-1)(x-2)(x+3)(x-0.5)
        let c = [1.0, -0.5, -7.0, 9.5, -3.0];
        let mut r = quartic_roots(c);
        r.sort_by(|a, b| a.total_cmp(b));
        let expect = [-3.0, 0.5, 1.0, 2.0];
        assert_eq!(r.len(), 4);
        for (a, b) in r.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn p3p_contains_truth() {
        let t_wc = Se3Pose::new(
            UnitQuaternion::from_euler_angles(0.1, -0.2, 0.3),
            Vec3::new(0.5, -1.0, 0.2),
        );
        let pts = [
            Vec3::new(1.0, 0.5, 6.0),
            Vec3::new(-1.5, 0.2, 5.0),
            Vec3::new(0.3, -1.0, 7.0),
        ];
        let pts_w = pts.map(|p| t_wc.transform_point(&p));
        let bearings = pts.map(|p| p.normalize());
        let sols = p3p(&bearings, &pts_w);
        assert!(sols.iter().any(
            |s| pose_error(s, &t_wc).position_m < 1e-8 && pose_error(s, &t_wc).angle_deg < 1e-6
        ));
    }

    #[test]
    fn bins() {
        assert_eq!(bin_frequency(0, 8), 0.0);
        assert_eq!(bin_frequency(4, 8), -0.5);
        assert_eq!(bin_frequency(3, 7), 3.0 / 7.0);
        assert_eq!(bin_frequency(4, 7), -3.0 / 7.0);
    }
}
