//! Levenberg–Marquardt over image poses, landmarks, intrinsics and rig
//! rotations with a Schur complement on the landmark blocks.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, Vector3, Vector6};
use rayon::prelude::*;

use super::{triangulate, BaProblem, TrackView, TriangulationConfig};
use crate::error::{Error, Result};
use crate::geometry::{
    se3_left_jacobian_inv, se3_right_jacobian_inv, skew, so3_exp, Se3Pose, Twist, Vec2, Vec3,
    INTRINSIC_PARAMS,
};

type Mat2x6 = SMatrix<f64, 2, 6>;
type Mat2x3 = SMatrix<f64, 2, 3>;
type Mat6 = SMatrix<f64, 6, 6>;
type Mat6x3 = SMatrix<f64, 6, 3>;

/// Outlier-filtering schedule: (threshold px, LM iterations).
pub const DEFAULT_SCHEDULE: [(f64, usize); 4] = [(12.0, 25), (8.0, 25), (4.0, 25), (1.5, 50)];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Loss {
    Cauchy,
    Squared,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaOptions {
    pub schedule: Vec<(f64, usize)>,
    pub loss: Loss,
    /// Deactivate observations above each stage threshold and retriangulate.
    pub filter: bool,
    pub min_triangulation_angle_deg: f64,
}

impl Default for BaOptions {
    fn default() -> Self {
        Self {
            schedule: DEFAULT_SCHEDULE.to_vec(),
            loss: Loss::Cauchy,
            filter: true,
            min_triangulation_angle_deg: 1.0,
        }
    }
}

/// `ρ(s) = c² log(1 + s/c²)`.
pub fn cauchy_rho(s: f64, c: f64) -> f64 {
    let c2 = c * c;
    c2 * (s / c2).ln_1p()
}

/// `ρ'(s) = 1 / (1 + s/c²)`, the IRLS weight.
pub fn cauchy_weight(s: f64, c: f64) -> f64 {
    1.0 / (1.0 + s / (c * c))
}

fn rho(loss: Loss, s: f64, c: f64) -> f64 {
    match loss {
        Loss::Cauchy => cauchy_rho(s, c),
        Loss::Squared => s,
    }
}

fn weight(loss: Loss, s: f64, c: f64) -> f64 {
    match loss {
        Loss::Cauchy => cauchy_weight(s, c),
        Loss::Squared => 1.0,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaStageReport {
    pub threshold: f64,
    pub iterations: usize,
    pub cost_before: f64,
    pub cost: f64,
    /// Cost after every accepted step.
    pub cost_history: Vec<f64>,
    pub deactivated: usize,
    pub reactivated: usize,
    pub retriangulated: usize,
    pub active_observations: usize,
    pub mean_reprojection: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BaReport {
    pub initial_cost: f64,
    pub initial_active_observations: usize,
    pub initial_mean_reprojection: f64,
    pub stages: Vec<BaStageReport>,
}

impl BaReport {
    pub fn final_mean_reprojection(&self) -> f64 {
        self.stages
            .last()
            .map(|s| s.mean_reprojection)
            .unwrap_or(self.initial_mean_reprojection)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# stage threshold_px iterations active_obs deactivated reactivated retriangulated mean_reproj_px cost\n");
        let _ = writeln!(
            s,
            "init - 0 {} 0 0 0 {:.6} {:.9e}",
            self.initial_active_observations, self.initial_mean_reprojection, self.initial_cost
        );
        for (i, st) in self.stages.iter().enumerate() {
            let _ = writeln!(
                s,
                "{} {} {} {} {} {} {} {:.6} {:.9e}",
                i + 1,
                st.threshold,
                st.iterations,
                st.active_observations,
                st.deactivated,
                st.reactivated,
                st.retriangulated,
                st.mean_reprojection,
                st.cost
            );
        }
        s
    }
}

/// Sets which calibration blocks are optimized. Rig translations are always
/// held fixed.
pub fn autocalibrate_flags(
    problem: &BaProblem,
    optimize_intrinsics: bool,
    optimize_rig_rotation: bool,
) -> BaProblem {
    let mut p = problem.clone();
    p.optimize_intrinsics = optimize_intrinsics;
    p.optimize_rig_rotation = optimize_rig_rotation;
    for r in p.rig.iter_mut() {
        r.translation_fixed = true;
    }
    p
}

/// Index structure shared by cost evaluation and linearization.
struct Index {
    cameras: Vec<String>,
    image_cam: Vec<usize>,
    cam_rig: Vec<usize>,
    /// (image, landmark) per observation.
    obs: Vec<(usize, usize)>,
}

impl Index {
    fn new(p: &BaProblem) -> Result<Self> {
        p.validate()?;
        let cameras: Vec<String> = p.intrinsics.keys().cloned().collect();
        let cam_pos: BTreeMap<&str, usize> = cameras
            .iter()
            .enumerate()
            .map(|(i, c)| (c.as_str(), i))
            .collect();
        let image_pos: BTreeMap<&str, usize> = p
            .images
            .iter()
            .enumerate()
            .map(|(i, im)| (im.id.as_str(), i))
            .collect();
        let lm_pos: BTreeMap<&str, usize> = p
            .landmarks
            .iter()
            .enumerate()
            .map(|(i, l)| (l.id.as_str(), i))
            .collect();
        let image_cam = p
            .images
            .iter()
            .map(|im| cam_pos[im.camera_id.as_str()])
            .collect();
        let cam_rig = cameras
            .iter()
            .map(|c| {
                p.rig
                    .iter()
                    .position(|r| &r.sensor_id == c)
                    .unwrap_or(usize::MAX)
            })
            .collect();
        let obs = p
            .observations
            .iter()
            .map(|o| {
                (
                    image_pos[o.image_id.as_str()],
                    lm_pos[o.landmark_id.as_str()],
                )
            })
            .collect();
        Ok(Self {
            cameras,
            image_cam,
            cam_rig,
            obs,
        })
    }

    fn intrinsics<'a>(
        &self,
        p: &'a BaProblem,
        cam: usize,
    ) -> &'a crate::geometry::CameraIntrinsics {
        &p.intrinsics[&self.cameras[cam]]
    }
}

fn obs_in_cost(p: &BaProblem, idx: &Index, k: usize) -> bool {
    p.observations[k].active && p.landmarks[idx.obs[k].1].triangulated
}

fn has_prior(p: &BaProblem, idx: &Index, i: usize) -> bool {
    let im = &p.images[i];
    p.prior_weight > 0.0
        && im.optimizable
        && idx.cam_rig[idx.image_cam[i]] != usize::MAX
        && p.splines
            .get(&im.sequence)
            .is_some_and(|s| s.contains(im.t_ns))
}

fn prior_residual(p: &BaProblem, idx: &Index, i: usize) -> Result<(Twist, Se3Pose)> {
    let im = &p.images[i];
    let rig = &p.rig[idx.cam_rig[idx.image_cam[i]]];
    let predicted = p.splines[&im.sequence].evaluate(im.t_ns)? * rig.pose;
    Ok((
        crate::geometry::generalized_minus(&im.pose, &predicted)?,
        predicted,
    ))
}

/// Total cost `Σ ρ(‖e_proj‖²) + w Σ ‖e_spline‖²`; infinite if an active
/// observation falls behind its camera.
pub fn evaluate_cost(p: &BaProblem, loss: Loss) -> Result<f64> {
    let idx = Index::new(p)?;
    cost_with(p, &idx, loss)
}

fn cost_with(p: &BaProblem, idx: &Index, loss: Loss) -> Result<f64> {
    let proj: f64 = (0..p.observations.len())
        .into_par_iter()
        .filter(|&k| obs_in_cost(p, idx, k))
        .map(|k| {
            let (i, j) = idx.obs[k];
            let im = &p.images[i];
            let pc = im.pose.inverse().transform_point(&p.landmarks[j].position);
            match idx.intrinsics(p, idx.image_cam[i]).project(&pc) {
                Ok(px) => rho(
                    loss,
                    (p.observations[k].pixel - px).norm_squared(),
                    p.cauchy_scale,
                ),
                Err(_) => f64::INFINITY,
            }
        })
        .sum();
    let mut prior = 0.0;
    for i in 0..p.images.len() {
        if has_prior(p, idx, i) {
            prior += prior_residual(p, idx, i)?.0.to_vector().norm_squared();
        }
    }
    Ok(proj + p.prior_weight * prior)
}

/// Column layout of the parameter vector: pose-side blocks first (images,
/// intrinsics, rig rotations), then landmarks.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    pub image: Vec<Option<usize>>,
    pub intrinsics: Vec<Option<usize>>,
    pub rig: Vec<Option<usize>>,
    pub landmark: Vec<Option<usize>>,
    pub pose_dim: usize,
    pub total: usize,
}

fn layout(p: &BaProblem, idx: &Index) -> ParamLayout {
    let mut off = 0;
    let image = (0..p.images.len())
        .map(|i| {
            p.images[i].optimizable.then(|| {
                off += 6;
                off - 6
            })
        })
        .collect();
    let mut cam_observed = vec![false; idx.cameras.len()];
    let mut lm_obs = vec![0usize; p.landmarks.len()];
    for k in 0..p.observations.len() {
        if obs_in_cost(p, idx, k) {
            cam_observed[idx.image_cam[idx.obs[k].0]] = true;
            lm_obs[idx.obs[k].1] += 1;
        }
    }
    let intrinsics = (0..idx.cameras.len())
        .map(|c| {
            (p.optimize_intrinsics && cam_observed[c]).then(|| {
                off += INTRINSIC_PARAMS;
                off - INTRINSIC_PARAMS
            })
        })
        .collect();
    let mut cam_prior = vec![false; idx.cameras.len()];
    for i in 0..p.images.len() {
        if has_prior(p, idx, i) {
            cam_prior[idx.image_cam[i]] = true;
        }
    }
    let rig = (0..idx.cameras.len())
        .map(|c| {
            (p.optimize_rig_rotation && cam_prior[c]).then(|| {
                off += 3;
                off - 3
            })
        })
        .collect();
    let pose_dim = off;
    let landmark = (0..p.landmarks.len())
        .map(|j| {
            (p.landmarks[j].triangulated && lm_obs[j] > 0).then(|| {
                off += 3;
                off - 3
            })
        })
        .collect();
    ParamLayout {
        image,
        intrinsics,
        rig,
        landmark,
        pose_dim,
        total: off,
    }
}

/// Linearized reprojection term of one observation.
struct ObsLin {
    k: usize,
    e: Vec2,
    w: f64,
    j_img: Option<(usize, Mat2x6)>,
    j_intr: Option<(usize, Mat2x6)>,
    j_lm: Option<(usize, Mat2x3)>,
}

/// Linearized spline prior of one image (already scaled by √w).
struct PriorLin {
    e: Vector6<f64>,
    j_img: (usize, Mat6),
    j_rig: Option<(usize, Mat6x3)>,
}

fn linearize_obs(
    p: &BaProblem,
    idx: &Index,
    lay: &ParamLayout,
    loss: Loss,
    k: usize,
) -> Option<ObsLin> {
    let (i, j) = idx.obs[k];
    let im = &p.images[i];
    let cam = idx.image_cam[i];
    let rt = im.pose.rotation_matrix().transpose();
    let pc = rt * (p.landmarks[j].position - im.pose.translation());
    let (px, jp, jk) = idx.intrinsics(p, cam).project_with_jacobians(&pc).ok()?;
    let e = p.observations[k].pixel - px;
    let w = weight(loss, e.norm_squared(), p.cauchy_scale);
    let j_img = lay.image[i].map(|o| {
        let mut d = SMatrix::<f64, 3, 6>::zeros();
        d.fixed_view_mut::<3, 3>(0, 0).copy_from(&skew(&pc));
        d.fixed_view_mut::<3, 3>(0, 3)
            .copy_from(&(-Matrix3::identity()));
        (o, -(jp * d))
    });
    let j_intr = lay.intrinsics[cam].map(|o| (o, -jk));
    let j_lm = lay.landmark[j].map(|o| (o, -(jp * rt)));
    Some(ObsLin {
        k,
        e,
        w,
        j_img,
        j_intr,
        j_lm,
    })
}

fn linearize_prior(
    p: &BaProblem,
    idx: &Index,
    lay: &ParamLayout,
    i: usize,
) -> Result<Option<PriorLin>> {
    if !has_prior(p, idx, i) {
        return Ok(None);
    }
    let Some(img_off) = lay.image[i] else {
        return Ok(None);
    };
    let (e, _) = prior_residual(p, idx, i)?;
    let s = p.prior_weight.sqrt();
    let j_img = se3_right_jacobian_inv(&e) * s;
    let j_rig = lay.rig[idx.image_cam[i]].map(|o| {
        let jl = -se3_left_jacobian_inv(&e) * s;
        (o, jl.fixed_view::<6, 3>(0, 0).into_owned())
    });
    Ok(Some(PriorLin {
        e: e.to_vector() * s,
        j_img: (img_off, j_img),
        j_rig,
    }))
}

struct Linearization {
    obs: Vec<ObsLin>,
    priors: Vec<PriorLin>,
    /// Observation positions in `obs`, grouped by landmark.
    by_landmark: Vec<(usize, Vec<usize>)>,
}

fn linearize(p: &BaProblem, idx: &Index, lay: &ParamLayout, loss: Loss) -> Result<Linearization> {
    let obs: Vec<ObsLin> = (0..p.observations.len())
        .into_par_iter()
        .filter(|&k| obs_in_cost(p, idx, k))
        .filter_map(|k| linearize_obs(p, idx, lay, loss, k))
        .collect();
    let mut priors = Vec::new();
    for i in 0..p.images.len() {
        if let Some(l) = linearize_prior(p, idx, lay, i)? {
            priors.push(l);
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (n, o) in obs.iter().enumerate() {
        if let Some((off, _)) = o.j_lm {
            groups.entry(off).or_default().push(n);
        }
    }
    Ok(Linearization {
        obs,
        priors,
        by_landmark: groups.into_iter().collect(),
    })
}

fn add_block<const R: usize, const C: usize>(
    m: &mut DMatrix<f64>,
    r: usize,
    c: usize,
    b: &SMatrix<f64, R, C>,
) {
    let mut v = m.fixed_view_mut::<R, C>(r, c);
    v += b;
}

/// Pose-side pieces of one observation: (offset, 2×6 Jacobian).
fn pose_pieces(o: &ObsLin) -> impl Iterator<Item = (usize, Mat2x6)> + '_ {
    o.j_img
        .iter()
        .chain(o.j_intr.iter())
        .map(|(off, j)| (*off, *j))
}

/// Solves the damped normal equations by eliminating landmarks. Returns
/// the full parameter step.
fn solve_step(lin: &Linearization, lay: &ParamLayout, lambda: f64) -> Option<DVector<f64>> {
    let pd = lay.pose_dim;
    let mut a = DMatrix::<f64>::zeros(pd, pd);
    let mut b = DVector::<f64>::zeros(pd);
    for o in &lin.obs {
        let pieces: Vec<(usize, Mat2x6)> = pose_pieces(o).collect();
        for (oa, ja) in &pieces {
            let jtw = ja.transpose() * o.w;
            let mut seg = b.fixed_rows_mut::<6>(*oa);
            seg -= jtw * o.e;
            for (ob, jb) in &pieces {
                add_block(&mut a, *oa, *ob, &(jtw * jb));
            }
        }
    }
    for pr in &lin.priors {
        let (oi, ji) = pr.j_img;
        add_block(&mut a, oi, oi, &(ji.transpose() * ji));
        let mut seg = b.fixed_rows_mut::<6>(oi);
        seg -= ji.transpose() * pr.e;
        if let Some((or, jr)) = pr.j_rig {
            add_block(&mut a, or, or, &(jr.transpose() * jr));
            add_block(&mut a, oi, or, &(ji.transpose() * jr));
            add_block(&mut a, or, oi, &(jr.transpose() * ji));
            let mut seg = b.fixed_rows_mut::<3>(or);
            seg -= jr.transpose() * pr.e;
        }
    }
    for i in 0..pd {
        let d = a[(i, i)];
        a[(i, i)] += lambda * d.max(1e-9);
    }

    // Per landmark: C⁻¹, B (pose offset → 6×3), landmark rhs.
    struct LmBlock {
        off: usize,
        cinv: Matrix3<f64>,
        bl: Vec<(usize, Mat6x3)>,
        rhs: Vector3<f64>,
    }
    let blocks: Vec<Option<LmBlock>> = lin
        .by_landmark
        .par_iter()
        .map(|(off, members)| {
            let mut c = Matrix3::<f64>::zeros();
            let mut rhs = Vector3::<f64>::zeros();
            let mut bl: Vec<(usize, Mat6x3)> = Vec::new();
            for &n in members {
                let o = &lin.obs[n];
                let (_, jl) = o.j_lm.unwrap();
                c += jl.transpose() * o.w * jl;
                rhs -= jl.transpose() * o.w * o.e;
                for (po, jp) in pose_pieces(o) {
                    let blk = jp.transpose() * o.w * jl;
                    match bl.iter_mut().find(|(q, _)| *q == po) {
                        Some((_, m)) => *m += blk,
                        None => bl.push((po, blk)),
                    }
                }
            }
            for i in 0..3 {
                let d = c[(i, i)];
                c[(i, i)] += lambda * d.max(1e-9);
            }
            let cinv = c.try_inverse()?;
            Some(LmBlock {
                off: *off,
                cinv,
                bl,
                rhs,
            })
        })
        .collect();
    let blocks: Vec<LmBlock> = blocks.into_iter().collect::<Option<_>>()?;

    let (s_sub, r_sub) = blocks
        .par_iter()
        .fold(
            || (DMatrix::<f64>::zeros(pd, pd), DVector::<f64>::zeros(pd)),
            |(mut s, mut r), lb| {
                let e: Vec<(usize, Mat6x3)> =
                    lb.bl.iter().map(|(o, m)| (*o, m * lb.cinv)).collect();
                for (oa, ea) in &e {
                    let mut seg = r.fixed_rows_mut::<6>(*oa);
                    seg += ea * lb.rhs;
                    for (ob, bb) in &lb.bl {
                        add_block(&mut s, *oa, *ob, &(ea * bb.transpose()));
                    }
                }
                (s, r)
            },
        )
        .reduce(
            || (DMatrix::<f64>::zeros(pd, pd), DVector::<f64>::zeros(pd)),
            |(s1, r1), (s2, r2)| (s1 + s2, r1 + r2),
        );
    let s = a - s_sub;
    let r = b - r_sub;
    let dx = if pd > 0 {
        let s = (&s + s.transpose()) * 0.5;
        s.cholesky()?.solve(&r)
    } else {
        DVector::zeros(0)
    };
    let mut full = DVector::<f64>::zeros(lay.total);
    full.rows_mut(0, pd).copy_from(&dx);
    for lb in &blocks {
        let mut rhs = lb.rhs;
        for (o, m) in &lb.bl {
            rhs -= m.transpose() * dx.fixed_rows::<6>(*o);
        }
        full.fixed_rows_mut::<3>(lb.off).copy_from(&(lb.cinv * rhs));
    }
    if full.iter().all(|v| v.is_finite()) {
        Some(full)
    } else {
        None
    }
}

/// Applies a parameter step laid out as in [`ParamLayout`].
pub fn apply_step(p: &BaProblem, lay: &ParamLayout, delta: &DVector<f64>) -> BaProblem {
    let mut q = p.clone();
    let cameras: Vec<String> = p.intrinsics.keys().cloned().collect();
    for (i, im) in q.images.iter_mut().enumerate() {
        if let Some(o) = lay.image[i] {
            let d = Vector6::from_iterator(delta.rows(o, 6).iter().copied());
            im.pose = im.pose.retract(&Twist::from_vector(&d));
        }
    }
    for (c, cam) in cameras.iter().enumerate() {
        if let Some(o) = lay.intrinsics[c] {
            let k = q.intrinsics.get_mut(cam).unwrap();
            let mut params = k.params();
            for (n, v) in params.iter_mut().enumerate() {
                *v += delta[o + n];
            }
            *k = k.with_params(&params);
        }
        if let Some(o) = lay.rig[c] {
            if let Some(r) = q.rig.iter_mut().find(|r| &r.sensor_id == cam) {
                let phi = Vec3::new(delta[o], delta[o + 1], delta[o + 2]);
                r.pose = Se3Pose::new(r.pose.rotation() * so3_exp(&phi), *r.pose.translation());
            }
        }
    }
    for (j, lm) in q.landmarks.iter_mut().enumerate() {
        if let Some(o) = lay.landmark[j] {
            lm.position += Vec3::new(delta[o], delta[o + 1], delta[o + 2]);
        }
    }
    q
}

/// Dense linearization for verification: the stacked residual vector
/// (reprojection residuals scaled by √ρ', priors by √w), its Jacobian,
/// the gradient of the total cost and the layout.
pub struct DenseLinearization {
    pub layout: ParamLayout,
    pub residuals: DVector<f64>,
    pub jacobian: DMatrix<f64>,
    pub gradient: DVector<f64>,
    pub cost: f64,
}

pub fn linearize_dense(p: &BaProblem, loss: Loss) -> Result<DenseLinearization> {
    let idx = Index::new(p)?;
    let lay = layout(p, &idx);
    let lin = linearize(p, &idx, &lay, loss)?;
    let rows = 2 * lin.obs.len() + 6 * lin.priors.len();
    let mut jac = DMatrix::<f64>::zeros(rows, lay.total);
    let mut res = DVector::<f64>::zeros(rows);
    let mut grad = DVector::<f64>::zeros(lay.total);
    for (n, o) in lin.obs.iter().enumerate() {
        let s = o.w.sqrt();
        res.fixed_rows_mut::<2>(2 * n).copy_from(&(o.e * s));
        let mut put = |off: usize, j: &dyn Fn(usize, usize) -> f64, cols: usize| {
            for r in 0..2 {
                for c in 0..cols {
                    jac[(2 * n + r, off + c)] = j(r, c) * s;
                    grad[off + c] += 2.0 * o.w * j(r, c) * o.e[r];
                }
            }
        };
        if let Some((off, j)) = &o.j_img {
            put(*off, &|r, c| j[(r, c)], 6);
        }
        if let Some((off, j)) = &o.j_intr {
            put(*off, &|r, c| j[(r, c)], 6);
        }
        if let Some((off, j)) = &o.j_lm {
            put(*off, &|r, c| j[(r, c)], 3);
        }
        let _ = o.k;
    }
    let base = 2 * lin.obs.len();
    for (n, pr) in lin.priors.iter().enumerate() {
        let row = base + 6 * n;
        res.fixed_rows_mut::<6>(row).copy_from(&pr.e);
        let (oi, ji) = pr.j_img;
        jac.fixed_view_mut::<6, 6>(row, oi).copy_from(&ji);
        let mut g = grad.fixed_rows_mut::<6>(oi);
        g += ji.transpose() * pr.e * 2.0;
        if let Some((or, jr)) = pr.j_rig {
            jac.fixed_view_mut::<6, 3>(row, or).copy_from(&jr);
            let mut g = grad.fixed_rows_mut::<3>(or);
            g += jr.transpose() * pr.e * 2.0;
        }
    }
    Ok(DenseLinearization {
        cost: cost_with(p, &idx, loss)?,
        layout: lay,
        residuals: res,
        jacobian: jac,
        gradient: grad,
    })
}

/// Runs the outlier schedule with the default options.
pub fn solve_ba(problem: &BaProblem, schedule: &[(f64, usize)]) -> Result<(BaProblem, BaReport)> {
    solve_ba_with(
        problem,
        &BaOptions {
            schedule: schedule.to_vec(),
            ..BaOptions::default()
        },
    )
}

fn active_in_cost(p: &BaProblem, idx: &Index) -> usize {
    (0..p.observations.len())
        .filter(|&k| obs_in_cost(p, idx, k))
        .count()
}

pub fn solve_ba_with(problem: &BaProblem, opts: &BaOptions) -> Result<(BaProblem, BaReport)> {
    if opts.schedule.is_empty() {
        return Err(Error::InvalidSchedule("schedule is empty".into()));
    }
    if opts.schedule.windows(2).any(|w| !(w[1].0 < w[0].0))
        || opts.schedule.iter().any(|s| !(s.0 > 0.0))
    {
        return Err(Error::InvalidSchedule(
            "thresholds must be positive and strictly decreasing".into(),
        ));
    }
    let mut p = autocalibrate_flags(
        problem,
        problem.optimize_intrinsics,
        problem.optimize_rig_rotation,
    );
    let idx = Index::new(&p)?;
    deactivate_behind(&mut p, &idx);
    let prior_terms = (0..p.images.len())
        .filter(|&i| has_prior(&p, &idx, i))
        .count();
    if active_in_cost(&p, &idx) == 0 && prior_terms == 0 {
        return Err(Error::EmptyObservations);
    }
    let mut report = BaReport {
        initial_cost: cost_with(&p, &idx, opts.loss)?,
        initial_active_observations: active_in_cost(&p, &idx),
        initial_mean_reprojection: p.mean_reprojection(),
        stages: Vec::new(),
    };
    let tri = TriangulationConfig {
        min_angle_deg: opts.min_triangulation_angle_deg,
        max_reproj: 0.0,
    };
    for &(threshold, iterations) in &opts.schedule {
        let cost_before = cost_with(&p, &idx, opts.loss)?;
        let (next, its, history) = lm_stage(&p, &idx, opts.loss, iterations)?;
        p = next;
        let (deactivated, reactivated, retriangulated) = if opts.filter {
            filter_and_retriangulate(&mut p, &idx, threshold, &tri)
        } else {
            (0, 0, 0)
        };
        report.stages.push(BaStageReport {
            threshold,
            iterations: its,
            cost_before,
            cost: cost_with(&p, &idx, opts.loss)?,
            cost_history: history,
            deactivated,
            reactivated,
            retriangulated,
            active_observations: active_in_cost(&p, &idx),
            mean_reprojection: p.mean_reprojection(),
        });
    }
    Ok((p, report))
}

fn deactivate_behind(p: &mut BaProblem, idx: &Index) {
    for k in 0..p.observations.len() {
        if !obs_in_cost(p, idx, k) {
            continue;
        }
        let (i, j) = idx.obs[k];
        let pc = p.images[i]
            .pose
            .inverse()
            .transform_point(&p.landmarks[j].position);
        if idx.intrinsics(p, idx.image_cam[i]).project(&pc).is_err() {
            p.observations[k].active = false;
        }
    }
}

/// One LM stage. Returns the new problem, the number of iterations and the
/// cost after every accepted step.
fn lm_stage(
    p0: &BaProblem,
    idx: &Index,
    loss: Loss,
    max_iter: usize,
) -> Result<(BaProblem, usize, Vec<f64>)> {
    let mut p = p0.clone();
    let mut history = Vec::new();
    let mut lambda = 1e-4;
    let mut its = 0;
    while its < max_iter {
        its += 1;
        deactivate_behind(&mut p, idx);
        let cost = cost_with(&p, idx, loss)?;
        let lay = layout(&p, idx);
        if lay.total == 0 {
            break;
        }
        let lin = linearize(&p, idx, &lay, loss)?;
        let mut accepted = None;
        while lambda < 1e12 {
            if let Some(step) = solve_step(&lin, &lay, lambda) {
                let trial = apply_step(&p, &lay, &step);
                let c = cost_with(&trial, idx, loss)?;
                if c <= cost {
                    accepted = Some((trial, c, step.norm()));
                    lambda = (lambda / 5.0).max(1e-12);
                    break;
                }
            }
            lambda *= 8.0;
        }
        let Some((trial, c, step_norm)) = accepted else {
            break;
        };
        let gain = cost - c;
        p = trial;
        history.push(c);
        if gain <= 1e-12 * c.max(1e-300) || step_norm < 1e-12 || c < 1e-24 {
            break;
        }
    }
    Ok((p, its, history))
}

/// After a stage: keep observations within `threshold`, drop landmarks with
/// fewer than two, and retriangulate untriangulated tracks.
fn filter_and_retriangulate(
    p: &mut BaProblem,
    idx: &Index,
    threshold: f64,
    tri: &TriangulationConfig,
) -> (usize, usize, usize) {
    let mut deactivated = 0;
    let mut reactivated = 0;
    for k in 0..p.observations.len() {
        let (i, j) = idx.obs[k];
        if !p.landmarks[j].triangulated {
            continue;
        }
        let pc = p.images[i]
            .pose
            .inverse()
            .transform_point(&p.landmarks[j].position);
        let ok = idx
            .intrinsics(p, idx.image_cam[i])
            .project(&pc)
            .map(|px| (p.observations[k].pixel - px).norm() <= threshold)
            .unwrap_or(false);
        let o = &mut p.observations[k];
        if o.active && !ok {
            deactivated += 1;
        } else if !o.active && ok {
            reactivated += 1;
        }
        o.active = ok;
    }
    let mut counts = vec![0usize; p.landmarks.len()];
    for k in 0..p.observations.len() {
        if p.observations[k].active {
            counts[idx.obs[k].1] += 1;
        }
    }
    for (j, lm) in p.landmarks.iter_mut().enumerate() {
        if lm.triangulated && counts[j] < 2 {
            lm.triangulated = false;
        }
    }
    let cfg = TriangulationConfig {
        min_angle_deg: tri.min_angle_deg,
        max_reproj: threshold,
    };
    let retriangulated = triangulate_untriangulated(p, idx, &cfg);
    (deactivated, reactivated, retriangulated)
}

fn tracks(p: &BaProblem, idx: &Index) -> Vec<Vec<usize>> {
    let mut t = vec![Vec::new(); p.landmarks.len()];
    for (k, &(_, j)) in idx.obs.iter().enumerate() {
        t[j].push(k);
    }
    t
}

/// Triangulates one track, dropping the worst observation until the mean
/// reprojection error is within the threshold. Returns the point and the
/// observations kept.
fn triangulate_track(
    p: &BaProblem,
    idx: &Index,
    members: &[usize],
    cfg: &TriangulationConfig,
) -> Option<(Vec3, Vec<usize>)> {
    let mut keep: Vec<usize> = members.to_vec();
    while keep.len() >= 2 {
        let views: Vec<TrackView> = keep
            .iter()
            .map(|&k| {
                let i = idx.obs[k].0;
                TrackView {
                    pixel: p.observations[k].pixel,
                    pose: &p.images[i].pose,
                    intrinsics: idx.intrinsics(p, idx.image_cam[i]),
                }
            })
            .collect();
        let lenient = TriangulationConfig {
            max_reproj: f64::INFINITY,
            ..*cfg
        };
        let x = match triangulate(&views, &lenient) {
            Ok(x) => x,
            Err(
                super::TriangulationRejection::SmallAngle
                | super::TriangulationRejection::TooFewObservations,
            ) => return None,
            Err(_) => {
                if keep.len() == 2 {
                    return None;
                }
                // Drop the observation whose ray disagrees most with the others.
                let worst = worst_by_leave_one_out(&views);
                keep.remove(worst);
                continue;
            }
        };
        let errs: Vec<f64> = views
            .iter()
            .map(|v| {
                v.intrinsics
                    .project(&v.pose.inverse().transform_point(&x))
                    .map(|px| (v.pixel - px).norm())
                    .unwrap_or(f64::INFINITY)
            })
            .collect();
        if errs.iter().all(|e| *e <= cfg.max_reproj) {
            return Some((x, keep));
        }
        let worst = errs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        keep.remove(worst);
    }
    None
}

fn worst_by_leave_one_out(views: &[TrackView]) -> usize {
    let cfg = TriangulationConfig {
        min_angle_deg: 0.0,
        max_reproj: f64::INFINITY,
    };
    let mut best = (0, f64::INFINITY);
    for drop in 0..views.len() {
        let rest: Vec<TrackView> = views
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != drop)
            .map(|(_, v)| *v)
            .collect();
        if let Ok(x) = triangulate(&rest, &cfg) {
            let e: f64 = rest
                .iter()
                .map(|v| {
                    v.intrinsics
                        .project(&v.pose.inverse().transform_point(&x))
                        .map(|px| (v.pixel - px).norm())
                        .unwrap_or(f64::INFINITY)
                })
                .sum::<f64>()
                / rest.len() as f64;
            if e < best.1 {
                best = (drop, e);
            }
        }
    }
    best.0
}

fn triangulate_untriangulated(p: &mut BaProblem, idx: &Index, cfg: &TriangulationConfig) -> usize {
    let tr = tracks(p, idx);
    type Triangulated = Option<(Vec3, Vec<usize>)>;
    let results: Vec<(usize, Triangulated)> = (0..p.landmarks.len())
        .into_par_iter()
        .filter(|&j| !p.landmarks[j].triangulated && tr[j].len() >= 2)
        .map(|j| (j, triangulate_track(p, idx, &tr[j], cfg)))
        .collect();
    let mut n = 0;
    for (j, r) in results {
        for &k in &tr[j] {
            p.observations[k].active = false;
        }
        if let Some((x, keep)) = r {
            p.landmarks[j].position = x;
            p.landmarks[j].triangulated = true;
            for k in keep {
                p.observations[k].active = true;
            }
            n += 1;
        }
    }
    n
}

/// Triangulates every landmark from its current observations and poses,
/// keeping observations within `max_reproj`. Returns the number of
/// triangulated landmarks.
pub fn triangulate_all(p: &mut BaProblem, cfg: &TriangulationConfig) -> Result<usize> {
    let idx = Index::new(p)?;
    for lm in p.landmarks.iter_mut() {
        lm.triangulated = false;
    }
    for o in p.observations.iter_mut() {
        o.active = true;
    }
    Ok(triangulate_untriangulated(p, &idx, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cauchy_bounds() {
        for s in [0.0, 1e-12, 0.5, 1.0, 10.0, 1e6] {
            assert!(cauchy_rho(s, 1.0) <= s);
        }
        assert!((cauchy_rho(1e-12, 1.0) / 1e-12 - 1.0).abs() < 1e-9);
        assert_eq!(cauchy_weight(0.0, 2.0), 1.0);
    }
}
