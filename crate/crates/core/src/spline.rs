//! Continuous-time platform trajectory as a uniform cumulative cubic B-spline
//! on SE(3).
//!
//! With control poses `T_0 … T_{n-1}` placed at `t0 + j·dt`, a time `t` in
//! segment `s = ⌊(t − t0)/dt⌋` with fraction `u` evaluates to
//!
//! ```text
//! T(t) = T_{s-1} · exp(B̃₁(u) Ω_s) · exp(B̃₂(u) Ω_{s+1}) · exp(B̃₃(u) Ω_{s+2}),
//! Ω_j  = log(T_{j-1}⁻¹ T_j)
//! ```
//!
//! The valid domain is `[t0 + dt, t0 + (n − 2)·dt)`.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DVector, SMatrix, SVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{generalized_minus, Se3Pose, Twist};
use crate::linalg::BandedSpd;
use crate::textio::{fmt_f64, Fields};

/// Default knot spacing: 100 ms.
pub const DEFAULT_KNOT_SPACING_NS: i64 = 100_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct Se3Spline {
    t0: i64,
    dt: i64,
    control_poses: Vec<Se3Pose>,
}

/// Cumulative basis values `[B̃₁, B̃₂, B̃₃]` of the uniform cubic B-spline.
pub fn cumulative_basis(u: f64) -> [f64; 3] {
    let u2 = u * u;
    let u3 = u2 * u;
    [
        (5.0 + 3.0 * u - 3.0 * u2 + u3) / 6.0,
        (1.0 + 3.0 * u + 3.0 * u2 - 2.0 * u3) / 6.0,
        u3 / 6.0,
    ]
}

fn delta(a: &Se3Pose, b: &Se3Pose) -> Result<Twist> {
    if a == b {
        return Ok(Twist::zero());
    }
    generalized_minus(b, a)
}

/// Evaluates one segment from its four control poses.
fn eval_segment(ctrl: &[Se3Pose], u: f64) -> Result<Se3Pose> {
    let basis = cumulative_basis(u);
    let mut pose = ctrl[0];
    for k in 0..3 {
        let omega = delta(&ctrl[k], &ctrl[k + 1])?;
        if omega == Twist::zero() {
            continue;
        }
        pose = pose.compose(&Se3Pose::exp(&omega.scale(basis[k])));
    }
    Ok(pose)
}

impl Se3Spline {
    pub fn new(t0: i64, dt: i64, control_poses: Vec<Se3Pose>) -> Result<Self> {
        if dt <= 0 {
            return Err(Error::InsufficientSamples(format!(
                "knot spacing must be positive, got {dt}"
            )));
        }
        if control_poses.len() < 4 {
            return Err(Error::InsufficientSamples(format!(
                "a cubic spline needs at least 4 control poses, got {}",
                control_poses.len()
            )));
        }
        Ok(Self {
            t0,
            dt,
            control_poses,
        })
    }

    pub fn t0(&self) -> i64 {
        self.t0
    }

    pub fn dt(&self) -> i64 {
        self.dt
    }

    pub fn control_poses(&self) -> &[Se3Pose] {
        &self.control_poses
    }

    pub fn control_poses_mut(&mut self) -> &mut [Se3Pose] {
        &mut self.control_poses
    }

    /// Valid evaluation interval `[start, end)` in nanoseconds.
    pub fn domain(&self) -> (i64, i64) {
        let n = self.control_poses.len() as i64;
        (self.t0 + self.dt, self.t0 + (n - 2) * self.dt)
    }

    pub fn contains(&self, t: i64) -> bool {
        let (a, b) = self.domain();
        t >= a && t < b
    }

    /// Segment index and in-segment fraction for an in-domain time.
    fn locate(&self, t: i64) -> Result<(usize, f64)> {
        let (start, end) = self.domain();
        if t < start || t >= end {
            return Err(Error::OutOfDomain { t, start, end });
        }
        let rel = t - self.t0;
        let s = rel.div_euclid(self.dt);
        let u = (rel - s * self.dt) as f64 / self.dt as f64;
        Ok((s as usize, u))
    }

    pub fn evaluate(&self, t: i64) -> Result<Se3Pose> {
        let (s, u) = self.locate(t)?;
        eval_segment(&self.control_poses[s - 1..s + 3], u)
    }

    /// Index of the first of the four control poses that influence time `t`.
    pub fn support_start(&self, t: i64) -> Result<usize> {
        Ok(self.locate(t)?.0 - 1)
    }

    /// Plain-text serialization: header `t0 dt n`, then `qw qx qy qz tx ty tz`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{} {} {}", self.t0, self.dt, self.control_poses.len());
        for p in &self.control_poses {
            let q = p.wxyz();
            let t = p.translation();
            let vals = [q[0], q[1], q[2], q[3], t.x, t.y, t.z];
            let line: Vec<String> = vals.iter().map(|v| fmt_f64(*v)).collect();
            let _ = writeln!(out, "{}", line.join(" "));
        }
        out
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'));
        let (hl, header) = lines.next().ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            column: 1,
            message: "missing spline header".into(),
        })?;
        let mut f = Fields::new(header, path, hl + 1);
        let t0 = f.i64("t0")?;
        let dt = f.i64("dt")?;
        let n = f.usize("n")?;
        f.finish()?;
        let mut poses = Vec::with_capacity(n);
        for (ln, line) in lines {
            let mut f = Fields::new(line, path, ln + 1);
            poses.push(f.pose()?);
            f.finish()?;
        }
        if poses.len() != n {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: hl + 1,
                column: 1,
                message: format!("header declares {n} control poses, found {}", poses.len()),
            });
        }
        Se3Spline::new(t0, dt, poses).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: hl + 1,
            column: 1,
            message: e.to_string(),
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SplineFitConfig {
    pub max_iterations: usize,
    /// Central-difference step for the numeric Jacobian.
    pub jacobian_step: f64,
}

impl Default for SplineFitConfig {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            jacobian_step: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplineFitReport {
    pub iterations: usize,
    /// RMS of the full 6-vector residual.
    pub rms: f64,
    pub rms_rotation: f64,
    pub rms_translation: f64,
}

type Jac6x24 = SMatrix<f64, 6, 24>;

fn sample_residual(ctrl: &[Se3Pose], u: f64, target: &Se3Pose) -> Result<SVector<f64, 6>> {
    Ok(generalized_minus(&eval_segment(ctrl, u)?, target)?.to_vector())
}

fn fit_cost(spline: &Se3Spline, samples: &[(i64, Se3Pose)]) -> Result<(f64, f64, f64)> {
    let mut rot = 0.0;
    let mut trans = 0.0;
    for (t, pose) in samples {
        let r = generalized_minus(&spline.evaluate(*t)?, pose)?;
        rot += r.rotational.norm_squared();
        trans += r.translational.norm_squared();
    }
    Ok((rot + trans, rot, trans))
}

/// Least-squares fit of a spline with knot spacing `dt` to timestamped poses,
/// by Levenberg–Marquardt with central-difference Jacobians.
pub fn spline_fit(samples: &[(i64, Se3Pose)], dt: i64) -> Result<(Se3Spline, SplineFitReport)> {
    spline_fit_with(samples, dt, &SplineFitConfig::default())
}

pub fn spline_fit_with(
    samples: &[(i64, Se3Pose)],
    dt: i64,
    cfg: &SplineFitConfig,
) -> Result<(Se3Spline, SplineFitReport)> {
    if samples.len() < 4 {
        return Err(Error::InsufficientSamples(format!(
            "need at least 4 samples, got {}",
            samples.len()
        )));
    }
    if dt <= 0 {
        return Err(Error::InsufficientSamples(format!(
            "knot spacing must be positive, got {dt}"
        )));
    }
    for (i, w) in samples.windows(2).enumerate() {
        if w[1].0 <= w[0].0 {
            return Err(Error::NonMonotonic { index: i + 1 });
        }
    }
    let first = samples[0].0;
    let last = samples[samples.len() - 1].0;
    if last - first < 3 * dt {
        return Err(Error::InsufficientSamples(format!(
            "samples span {} ns, need at least 3 knot spacings ({} ns)",
            last - first,
            3 * dt
        )));
    }

    let t0 = first - dt;
    let n = ((last - t0) / dt) as usize + 3;
    let mut control = Vec::with_capacity(n);
    let mut cursor = 0usize;
    for j in 0..n {
        let tj = t0 + j as i64 * dt;
        while cursor + 1 < samples.len()
            && (samples[cursor + 1].0 - tj).abs() <= (samples[cursor].0 - tj).abs()
        {
            cursor += 1;
        }
        control.push(samples[cursor].1);
    }
    let mut spline = Se3Spline::new(t0, dt, control)?;

    let located: Vec<(usize, f64)> = samples
        .iter()
        .map(|(t, _)| spline.locate(*t))
        .collect::<Result<_>>()?;
    let dim = 6 * n;
    let h = cfg.jacobian_step;

    let (mut cost, _, _) = fit_cost(&spline, samples)?;
    let mut lambda = 1e-6;
    let mut iterations = 0;
    for _ in 0..cfg.max_iterations {
        iterations += 1;
        let blocks: Vec<(usize, Jac6x24, SVector<f64, 6>)> = samples
            .par_iter()
            .zip(located.par_iter())
            .map(|((_, target), &(s, u))| -> Result<_> {
                let base = s - 1;
                let ctrl: [Se3Pose; 4] = std::array::from_fn(|k| spline.control_poses[base + k]);
                let r0 = sample_residual(&ctrl, u, target)?;
                let mut jac = Jac6x24::zeros();
                for k in 0..4 {
                    for d in 0..6 {
                        let mut step = SVector::<f64, 6>::zeros();
                        step[d] = h;
                        let mut plus = ctrl;
                        let mut minus = ctrl;
                        plus[k] = ctrl[k].retract(&Twist::from_vector(&step));
                        minus[k] = ctrl[k].retract(&Twist::from_vector(&-step));
                        let col = (sample_residual(&plus, u, target)?
                            - sample_residual(&minus, u, target)?)
                            / (2.0 * h);
                        jac.set_column(6 * k + d, &col);
                    }
                }
                Ok((base, jac, r0))
            })
            .collect::<Result<_>>()?;

        let mut hess = BandedSpd::zeros(dim, 24 - 1);
        let mut grad = DVector::zeros(dim);
        for (base, jac, r) in &blocks {
            let jtj = jac.transpose() * jac;
            let jtr = jac.transpose() * r;
            let off = 6 * base;
            for a in 0..24 {
                grad[off + a] += jtr[a];
                for b in 0..=a {
                    hess.add(off + a, off + b, jtj[(a, b)]);
                }
            }
        }
        if grad.amax() < 1e-15 {
            break;
        }

        let mut accepted = false;
        for _ in 0..10 {
            let mut damped = hess.clone();
            for i in 0..dim {
                let d = damped.diagonal(i);
                damped.add_diagonal(i, lambda * d.max(1e-9));
            }
            let step = match damped.solve(&(-&grad)) {
                Ok(s) => s,
                Err(_) => {
                    lambda *= 10.0;
                    continue;
                }
            };
            let mut candidate = spline.clone();
            for (j, pose) in candidate.control_poses.iter_mut().enumerate() {
                let d = step.fixed_rows::<6>(6 * j).into_owned();
                *pose = pose.retract(&Twist::from_vector(&d));
            }
            let (new_cost, _, _) = fit_cost(&candidate, samples)?;
            if new_cost <= cost {
                let converged = step.amax() < 1e-12 || cost - new_cost <= 1e-15 * cost.max(1e-300);
                spline = candidate;
                cost = new_cost;
                lambda = (lambda / 3.0).max(1e-12);
                accepted = true;
                if converged {
                    return finish(spline, samples, iterations);
                }
                break;
            }
            lambda *= 4.0;
        }
        if !accepted {
            break;
        }
    }
    finish(spline, samples, iterations)
}

fn finish(
    spline: Se3Spline,
    samples: &[(i64, Se3Pose)],
    iterations: usize,
) -> Result<(Se3Spline, SplineFitReport)> {
    let (cost, rot, trans) = fit_cost(&spline, samples)?;
    let m = samples.len() as f64;
    let report = SplineFitReport {
        iterations,
        rms: (cost / m).sqrt(),
        rms_rotation: (rot / m).sqrt(),
        rms_translation: (trans / m).sqrt(),
    };
    Ok((spline, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;

    const SEC: i64 = 1_000_000_000;

    fn translating(n: usize) -> Se3Spline {
        let poses = (0..n)
            .map(|i| Se3Pose::from_translation(Vec3::new(i as f64, 0.0, 0.0)))
            .collect();
        Se3Spline::new(0, SEC, poses).unwrap()
    }

    #[test]
    fn identity_controls_give_identity() {
        let s = Se3Spline::new(0, SEC, vec![Se3Pose::identity(); 6]).unwrap();
        for t in [SEC, SEC + 1, 2 * SEC + SEC / 3, 4 * SEC - 1] {
            assert_eq!(s.evaluate(t).unwrap(), Se3Pose::identity());
        }
    }

    #[test]
    fn constant_controls_reproduce_pose() {
        let p = Se3Pose::exp(&Twist::new(
            Vec3::new(0.3, -0.2, 1.1),
            Vec3::new(4.0, -2.0, 0.5),
        ));
        let s = Se3Spline::new(100, 7, vec![p; 5]).unwrap();
        for t in 107..121 {
            assert_eq!(s.evaluate(t).unwrap(), p);
        }
    }

    #[test]
    fn translating_controls_give_linear_motion() {
        let s = translating(8);
        let (a, b) = s.domain();
        // Direct evaluation of the cumulative formula in R³: x(t) = x_{s-1} + Σ B̃_k(u)·1
        for k in 0..1000 {
            let t = a + (b - a) * k / 1000;
            let seg = t / SEC;
            let u = (t - seg * SEC) as f64 / SEC as f64;
            let bsum: f64 = cumulative_basis(u).iter().sum();
            let oracle = (seg - 1) as f64 + bsum;
            let x = s.evaluate(t).unwrap().translation().x;
            assert!((x - oracle).abs() < 1e-12);
            // constant velocity: x(t) = t/dt
            assert!((x - t as f64 / SEC as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn out_of_domain_is_an_error() {
        let s = translating(6);
        let (a, b) = s.domain();
        assert_eq!((a, b), (SEC, 4 * SEC));
        assert!(matches!(s.evaluate(b), Err(Error::OutOfDomain { .. })));
        assert!(matches!(s.evaluate(b + 1), Err(Error::OutOfDomain { .. })));
        assert!(matches!(s.evaluate(a - 1), Err(Error::OutOfDomain { .. })));
    }

    #[test]
    fn fit_constant_pose() {
        let p = Se3Pose::exp(&Twist::new(
            Vec3::new(0.1, 0.2, -0.3),
            Vec3::new(1.0, 2.0, 3.0),
        ));
        let samples: Vec<_> = (0..40).map(|k| (k * 25_000_000, p)).collect();
        let (s, rep) = spline_fit(&samples, DEFAULT_KNOT_SPACING_NS).unwrap();
        assert!(rep.rms < 1e-9);
        for c in s.control_poses() {
            assert!(generalized_minus(c, &p).unwrap().norm() < 1e-9);
        }
    }

    #[test]
    fn fit_screw_motion() {
        let xi = Twist::new(Vec3::new(0.05, -0.1, 0.4), Vec3::new(0.8, 0.1, 0.05));
        let dt = DEFAULT_KNOT_SPACING_NS;
        let samples: Vec<_> = (0..30)
            .map(|k| {
                let t = k as i64 * dt;
                (t, Se3Pose::exp(&xi.scale(t as f64 * 1e-9)))
            })
            .collect();
        let (_, rep) = spline_fit(&samples, dt).unwrap();
        assert!(rep.rms_translation < 1e-6, "{rep:?}");
        assert!(rep.rms_rotation < 1e-6, "{rep:?}");
    }

    #[test]
    fn fit_rejects_bad_input() {
        let p = Se3Pose::identity();
        let three = vec![(0, p), (SEC, p), (2 * SEC, p)];
        assert!(matches!(
            spline_fit(&three, SEC / 10),
            Err(Error::InsufficientSamples(_))
        ));
        let unordered = vec![(0, p), (2 * SEC, p), (SEC, p), (3 * SEC, p)];
        assert!(matches!(
            spline_fit(&unordered, SEC / 10),
            Err(Error::NonMonotonic { index: 2 })
        ));
        let short = vec![(0, p), (1, p), (2, p), (3, p)];
        assert!(matches!(
            spline_fit(&short, SEC),
            Err(Error::InsufficientSamples(_))
        ));
    }

    #[test]
    fn text_round_trip() {
        let s = Se3Spline::new(
            -5,
            3,
            (0..5)
                .map(|i| {
                    Se3Pose::exp(&Twist::new(
                        Vec3::new(0.1 * i as f64, 0.2, -0.3),
                        Vec3::new(1.0 / 3.0, i as f64, 0.0),
                    ))
                })
                .collect(),
        )
        .unwrap();
        let text = s.to_text();
        let back = Se3Spline::from_text(&text, Path::new("s.txt")).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.to_text(), text);
    }
}
