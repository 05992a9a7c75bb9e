//! Bundle adjustment with spline pose priors: problem types, residuals,
//! image pair selection, triangulation and the robust LM solver.

mod solver;

pub use solver::{
    apply_step, autocalibrate_flags, cauchy_rho, cauchy_weight, evaluate_cost, linearize_dense,
    solve_ba, solve_ba_with, triangulate_all, BaOptions, BaReport, BaStageReport,
    DenseLinearization, Loss, ParamLayout, DEFAULT_SCHEDULE,
};

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Matrix4, SMatrix};

use crate::error::{Error, Result};
use crate::geometry::{
    generalized_minus, CameraIntrinsics, RigExtrinsic, Se3Pose, Twist, Vec2, Vec3,
};
use crate::spline::Se3Spline;

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub image_id: String,
    pub landmark_id: String,
    pub pixel: Vec2,
    pub active: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Landmark {
    pub id: String,
    pub position: Vec3,
    /// False until the track has been triangulated.
    pub triangulated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub camera_id: String,
    pub sequence: String,
    pub t_ns: i64,
    /// Camera pose in the world, `T_WC`.
    pub pose: Se3Pose,
    pub optimizable: bool,
}

impl ImageRecord {
    pub fn center(&self) -> Vec3 {
        *self.pose.translation()
    }

    pub fn optical_axis(&self) -> Vec3 {
        self.pose.transform_vector(&Vec3::z())
    }
}

/// Everything the joint optimization reads and writes.
#[derive(Debug, Clone, PartialEq)]
pub struct BaProblem {
    /// Platform trajectory per sequence; held fixed.
    pub splines: BTreeMap<String, Se3Spline>,
    /// `T_BC` per camera.
    pub rig: Vec<RigExtrinsic>,
    pub intrinsics: BTreeMap<String, CameraIntrinsics>,
    pub images: Vec<ImageRecord>,
    pub landmarks: Vec<Landmark>,
    pub observations: Vec<Observation>,
    /// Cauchy scale in pixels.
    pub cauchy_scale: f64,
    pub prior_weight: f64,
    pub optimize_intrinsics: bool,
    pub optimize_rig_rotation: bool,
}

impl BaProblem {
    pub fn rig_for(&self, camera_id: &str) -> Option<&RigExtrinsic> {
        self.rig.iter().find(|r| r.sensor_id == camera_id)
    }

    /// Checks every cross reference.
    pub fn validate(&self) -> Result<()> {
        let images: BTreeMap<&str, &ImageRecord> =
            self.images.iter().map(|i| (i.id.as_str(), i)).collect();
        let landmarks: BTreeMap<&str, &Landmark> =
            self.landmarks.iter().map(|l| (l.id.as_str(), l)).collect();
        if images.len() != self.images.len() || landmarks.len() != self.landmarks.len() {
            return Err(Error::InvalidDataset(
                "duplicate image or landmark id".into(),
            ));
        }
        for im in &self.images {
            if !self.intrinsics.contains_key(&im.camera_id) {
                return Err(Error::InvalidDataset(format!(
                    "image {} references unknown camera {}",
                    im.id, im.camera_id
                )));
            }
            if self.rig_for(&im.camera_id).is_none() {
                return Err(Error::InvalidDataset(format!(
                    "camera {} has no rig extrinsic",
                    im.camera_id
                )));
            }
        }
        for o in &self.observations {
            if !images.contains_key(o.image_id.as_str()) {
                return Err(Error::InvalidDataset(format!(
                    "observation references unknown image {}",
                    o.image_id
                )));
            }
            if !landmarks.contains_key(o.landmark_id.as_str()) {
                return Err(Error::InvalidDataset(format!(
                    "observation references unknown landmark {}",
                    o.landmark_id
                )));
            }
        }
        if !(self.cauchy_scale > 0.0) || !(self.prior_weight >= 0.0) {
            return Err(Error::Config(
                "Cauchy scale must be positive and prior weight non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Initial image poses from the splines: `T_WC = T_WB(t) · T_BC`.
    /// Images outside their spline domain keep their pose.
    pub fn init_poses_from_splines(&mut self) -> Result<()> {
        for im in self.images.iter_mut() {
            let Some(spline) = self.splines.get(&im.sequence) else {
                continue;
            };
            if !spline.contains(im.t_ns) {
                continue;
            }
            let rig = self
                .rig
                .iter()
                .find(|r| r.sensor_id == im.camera_id)
                .ok_or_else(|| {
                    Error::InvalidDataset(format!("camera {} has no rig extrinsic", im.camera_id))
                })?;
            im.pose = spline.evaluate(im.t_ns)? * rig.pose;
        }
        Ok(())
    }

    /// Mean reprojection error over active observations of triangulated
    /// landmarks.
    pub fn mean_reprojection(&self) -> f64 {
        let (sum, n) = self
            .reprojection_errors()
            .iter()
            .fold((0.0, 0usize), |(s, n), e| (s + e.1, n + 1));
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }

    /// (observation index, error in px) for every active observation of a
    /// triangulated landmark that projects in front of its camera.
    pub fn reprojection_errors(&self) -> Vec<(usize, f64)> {
        let images: BTreeMap<&str, &ImageRecord> =
            self.images.iter().map(|i| (i.id.as_str(), i)).collect();
        let landmarks: BTreeMap<&str, &Landmark> =
            self.landmarks.iter().map(|l| (l.id.as_str(), l)).collect();
        self.observations
            .iter()
            .enumerate()
            .filter(|(_, o)| o.active)
            .filter_map(|(k, o)| {
                let lm = landmarks[o.landmark_id.as_str()];
                if !lm.triangulated {
                    return None;
                }
                let im = images[o.image_id.as_str()];
                let r = reprojection_residual(o, im, lm, &self.intrinsics[&im.camera_id]).ok()?;
                Some((k, r.norm()))
            })
            .collect()
    }
}

/// Spline prior residual `T_WC ⊖ (T_WB(t) · T_BC)`.
pub fn spline_residual(
    image: &ImageRecord,
    rig: &RigExtrinsic,
    spline: &Se3Spline,
) -> Result<Twist> {
    let predicted = spline.evaluate(image.t_ns)? * rig.pose;
    generalized_minus(&image.pose, &predicted)
}

/// Reprojection residual `z − π(T_WC⁻¹ p)` in pixels.
pub fn reprojection_residual(
    obs: &Observation,
    image: &ImageRecord,
    landmark: &Landmark,
    intrinsics: &CameraIntrinsics,
) -> Result<Vec2> {
    let pc = image.pose.inverse().transform_point(&landmark.position);
    Ok(obs.pixel - intrinsics.project(&pc)?)
}

/// Unordered image pairs (by index order) whose centers are within
/// `max_dist` and whose optical axes differ by at most `max_angle_deg`.
pub fn select_pairs(
    images: &[ImageRecord],
    max_dist: f64,
    max_angle_deg: f64,
) -> Vec<(String, String)> {
    let cos_max = max_angle_deg.to_radians().cos();
    let axes: Vec<(Vec3, Vec3)> = images
        .iter()
        .map(|i| (i.center(), i.optical_axis()))
        .collect();
    let mut out = Vec::new();
    for i in 0..images.len() {
        for j in (i + 1)..images.len() {
            let close = (axes[i].0 - axes[j].0).norm() <= max_dist;
            let aligned = axes[i].1.dot(&axes[j].1).clamp(-1.0, 1.0) >= cos_max - 1e-15;
            if close && aligned {
                out.push((images[i].id.clone(), images[j].id.clone()));
            }
        }
    }
    out
}

/// One observation of a track with the observing camera.
#[derive(Debug, Clone, Copy)]
pub struct TrackView<'a> {
    pub pixel: Vec2,
    pub pose: &'a Se3Pose,
    pub intrinsics: &'a CameraIntrinsics,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TriangulationRejection {
    TooFewObservations,
    Degenerate,
    SmallAngle,
    Cheirality,
    Reprojection,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriangulationConfig {
    pub min_angle_deg: f64,
    pub max_reproj: f64,
}

impl Default for TriangulationConfig {
    fn default() -> Self {
        Self {
            min_angle_deg: 1.0,
            max_reproj: 4.0,
        }
    }
}

/// Linear DLT on undistorted normalized coordinates followed by Gauss–Newton
/// on pixel reprojection error.
pub fn triangulate(
    views: &[TrackView],
    cfg: &TriangulationConfig,
) -> std::result::Result<Vec3, TriangulationRejection> {
    if views.len() < 2 {
        return Err(TriangulationRejection::TooFewObservations);
    }
    let mut ata = Matrix4::<f64>::zeros();
    for v in views {
        let n = v.intrinsics.undistort(&v.pixel);
        let p = v.pose.inverse().to_matrix();
        let r1 = p.row(0) - p.row(2) * n.x;
        let r2 = p.row(1) - p.row(2) * n.y;
        let r1 = r1 / r1.norm().max(1e-300);
        let r2 = r2 / r2.norm().max(1e-300);
        ata += r1.transpose() * r1 + r2.transpose() * r2;
    }
    let Some(eig) =
        nalgebra::SymmetricEigen::try_new(ata, f64::EPSILON, crate::geometry::MAX_DECOMP_ITER)
    else {
        return Err(TriangulationRejection::Degenerate);
    };
    let mut order = [0usize, 1, 2, 3];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let (l0, l1, l3) = (
        eig.eigenvalues[order[0]],
        eig.eigenvalues[order[1]],
        eig.eigenvalues[order[3]],
    );
    if !(l1 > 1e-14 * l3) || l0 > l1 {
        return Err(TriangulationRejection::Degenerate);
    }
    let h = eig.eigenvectors.column(order[0]);
    if h[3].abs() < 1e-12 * h.norm() {
        return Err(TriangulationRejection::Degenerate);
    }
    let mut x = Vec3::new(h[0] / h[3], h[1] / h[3], h[2] / h[3]);

    for _ in 0..10 {
        let mut jtj = Matrix3::<f64>::zeros();
        let mut jtr = Vec3::zeros();
        for v in views {
            let inv = v.pose.inverse();
            let pc = inv.transform_point(&x);
            let Ok((px, jp, _)) = v.intrinsics.project_with_jacobians(&pc) else {
                return Err(TriangulationRejection::Cheirality);
            };
            let j: SMatrix<f64, 2, 3> = jp * inv.rotation_matrix();
            let r = v.pixel - px;
            jtj += j.transpose() * j;
            jtr += j.transpose() * r;
        }
        let Some(step) = jtj.cholesky().map(|c| c.solve(&jtr)) else {
            break;
        };
        x += step;
        if step.norm() < 1e-14 * (1.0 + x.norm()) {
            break;
        }
    }

    let mut reproj = 0.0;
    for v in views {
        let pc = v.pose.inverse().transform_point(&x);
        if pc.z <= 0.0 {
            return Err(TriangulationRejection::Cheirality);
        }
        match v.intrinsics.project(&pc) {
            Ok(px) => reproj += (v.pixel - px).norm(),
            Err(_) => return Err(TriangulationRejection::Cheirality),
        }
    }
    let mut max_angle: f64 = 0.0;
    for (i, a) in views.iter().enumerate() {
        for b in &views[i + 1..] {
            let ra = (x - a.pose.translation()).normalize();
            let rb = (x - b.pose.translation()).normalize();
            max_angle = max_angle.max(ra.dot(&rb).clamp(-1.0, 1.0).acos());
        }
    }
    if max_angle.to_degrees() < cfg.min_angle_deg {
        return Err(TriangulationRejection::SmallAngle);
    }
    if reproj / views.len() as f64 > cfg.max_reproj {
        return Err(TriangulationRejection::Reprojection);
    }
    Ok(x)
}
