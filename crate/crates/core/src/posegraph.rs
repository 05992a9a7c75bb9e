//! LiDAR pose-graph SLAM: sequential ICP edges, loop closures verified
//! coarse-to-fine, merging of several sequences and Levenberg–Marquardt
//! optimization on SE(3).

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::path::Path;

use nalgebra::DVector;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{se3_left_jacobian_inv, se3_right_jacobian_inv, Mat6, Se3Pose, Twist, Vec6};
use crate::linalg::SparseSpdBuilder;
use crate::pointcloud::{
    register, undistort_scan, IcpConfig, IcpObjective, LidarScan, OdometryTrack, PointCloud,
};
use crate::textio::{data_lines, fmt_f64, fmt_pose, Fields};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EdgeKind {
    Odometry,
    IcpSequential,
    Loop,
    CrossSequence,
}

impl EdgeKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EdgeKind::Odometry => "odometry",
            EdgeKind::IcpSequential => "icp-sequential",
            EdgeKind::Loop => "loop",
            EdgeKind::CrossSequence => "cross-sequence",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "odometry" => EdgeKind::Odometry,
            "icp-sequential" => EdgeKind::IcpSequential,
            "loop" => EdgeKind::Loop,
            "cross-sequence" => EdgeKind::CrossSequence,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphNode {
    pub id: usize,
    pub sequence: String,
    pub t_ns: i64,
    /// Platform pose in the world.
    pub pose: Se3Pose,
}

impl GraphNode {
    /// Key of the node's undistorted cloud.
    pub fn cloud_key(&self) -> CloudKey {
        (self.sequence.clone(), self.t_ns)
    }
}

/// Clouds are keyed by (sequence, timestamp), which is unique per node.
pub type CloudKey = (String, i64);
pub type CloudStore = BTreeMap<CloudKey, PointCloud>;

#[derive(Debug, Clone, PartialEq)]
pub struct GraphEdge {
    pub from: usize,
    pub to: usize,
    /// Pose of `to` expressed in `from`.
    pub rel: Se3Pose,
    pub information: Mat6,
    pub kind: EdgeKind,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PoseGraph {
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
    pub fixed: BTreeSet<usize>,
}

/// Floor on the standard deviation derived from ICP rmse.
pub const SIGMA_FLOOR: f64 = 1e-3;
/// Standard deviation assigned to odometry fallback edges.
pub const ODOMETRY_FALLBACK_SIGMA: f64 = 0.1;

/// Diagonal information with σ = max(rmse, floor) on every axis.
pub fn information_from_rmse(rmse: f64) -> Mat6 {
    let sigma = if rmse.is_finite() {
        rmse.max(SIGMA_FLOOR)
    } else {
        SIGMA_FLOOR
    };
    Mat6::identity() / (sigma * sigma)
}

/// Residual of an edge: `pose_to ⊖ (pose_from · rel)`.
pub fn edge_residual(from: &Se3Pose, to: &Se3Pose, rel: &Se3Pose) -> Result<Twist> {
    crate::geometry::generalized_minus(to, &(*from * *rel))
}

/// Residual and its Jacobians with respect to right perturbations of the
/// `from` and `to` poses.
pub fn edge_residual_jacobians(
    from: &Se3Pose,
    to: &Se3Pose,
    rel: &Se3Pose,
) -> Result<(Vec6, Mat6, Mat6)> {
    let e = edge_residual(from, to, rel)?;
    let j_to = se3_right_jacobian_inv(&e);
    let j_from = -se3_left_jacobian_inv(&e) * rel.inverse().adjoint();
    Ok((e.to_vector(), j_from, j_to))
}

impl PoseGraph {
    pub fn node_index(&self) -> HashMap<usize, usize> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.id, i))
            .collect()
    }

    pub fn node(&self, id: usize) -> Option<&GraphNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn sequences(&self) -> Vec<String> {
        let mut seen = Vec::new();
        for n in &self.nodes {
            if !seen.contains(&n.sequence) {
                seen.push(n.sequence.clone());
            }
        }
        seen
    }

    /// Checks structural invariants (unique ids and keys, valid endpoints,
    /// SPD information).
    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        let mut keys = BTreeSet::new();
        for n in &self.nodes {
            if !ids.insert(n.id) {
                return Err(Error::InvalidGraph(format!("duplicate node id {}", n.id)));
            }
            if !keys.insert((n.sequence.clone(), n.t_ns)) {
                return Err(Error::InvalidGraph(format!(
                    "duplicate node ({}, {})",
                    n.sequence, n.t_ns
                )));
            }
        }
        for e in &self.edges {
            if !ids.contains(&e.from) || !ids.contains(&e.to) {
                return Err(Error::InvalidGraph(format!(
                    "edge {}->{} references a missing node",
                    e.from, e.to
                )));
            }
            if e.from == e.to {
                return Err(Error::InvalidGraph(format!("self edge on node {}", e.from)));
            }
            let sym = (e.information - e.information.transpose()).abs().max();
            if sym > 1e-9 * e.information.abs().max().max(1.0) || e.information.cholesky().is_none()
            {
                return Err(Error::NotPositiveDefinite {
                    from: e.from,
                    to: e.to,
                });
            }
        }
        for f in &self.fixed {
            if !ids.contains(f) {
                return Err(Error::InvalidGraph(format!(
                    "fixed node {f} does not exist"
                )));
            }
        }
        Ok(())
    }

    /// Fails unless every node is reachable from a fixed node.
    pub fn check_connected(&self) -> Result<()> {
        if self.fixed.is_empty() {
            return Err(Error::NoFixedNode);
        }
        let mut adj: HashMap<usize, Vec<usize>> = HashMap::new();
        for e in &self.edges {
            adj.entry(e.from).or_default().push(e.to);
            adj.entry(e.to).or_default().push(e.from);
        }
        let mut seen: BTreeSet<usize> = self.fixed.clone();
        let mut queue: VecDeque<usize> = self.fixed.iter().copied().collect();
        while let Some(n) = queue.pop_front() {
            for m in adj.get(&n).into_iter().flatten() {
                if seen.insert(*m) {
                    queue.push_back(*m);
                }
            }
        }
        match self.nodes.iter().find(|n| !seen.contains(&n.id)) {
            Some(n) => Err(Error::DisconnectedGraph { node: n.id }),
            None => Ok(()),
        }
    }

    /// Σ eᵀ Ω e over all edges.
    pub fn cost(&self) -> Result<f64> {
        let idx = self.node_index();
        let mut c = 0.0;
        for e in &self.edges {
            let r = edge_residual(
                &self.nodes[idx[&e.from]].pose,
                &self.nodes[idx[&e.to]].pose,
                &e.rel,
            )?
            .to_vector();
            c += (r.transpose() * e.information * r)[0];
        }
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# NODE id seq t_ns qw qx qy qz tx ty tz\n# EDGE from to kind qw qx qy qz tx ty tz i11..i66 (upper triangle, row-major)\n# FIX id\n");
        for n in &self.nodes {
            s.push_str(&format!(
                "NODE {} {} {} {}\n",
                n.id,
                n.sequence,
                n.t_ns,
                fmt_pose(&n.pose)
            ));
        }
        for e in &self.edges {
            let mut info = Vec::with_capacity(21);
            for r in 0..6 {
                for c in r..6 {
                    info.push(fmt_f64(e.information[(r, c)]));
                }
            }
            s.push_str(&format!(
                "EDGE {} {} {} {} {}\n",
                e.from,
                e.to,
                e.kind.as_str(),
                fmt_pose(&e.rel),
                info.join(" ")
            ));
        }
        for f in &self.fixed {
            s.push_str(&format!("FIX {f}\n"));
        }
        s
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let mut g = PoseGraph::default();
        for (line_no, line) in data_lines(text) {
            let mut f = Fields::new(line, path, line_no);
            let (tag, col) = f.next_token("record type")?;
            match tag {
                "NODE" => {
                    let id = f.usize("node id")?;
                    let sequence = f.str("sequence")?.to_string();
                    let t_ns = f.i64("timestamp")?;
                    let pose = f.pose()?;
                    g.nodes.push(GraphNode {
                        id,
                        sequence,
                        t_ns,
                        pose,
                    });
                }
                "EDGE" => {
                    let from = f.usize("from id")?;
                    let to = f.usize("to id")?;
                    let (k, kcol) = f.next_token("edge kind")?;
                    let kind = EdgeKind::parse(k)
                        .ok_or_else(|| f.error(kcol, format!("unknown edge kind '{k}'")))?;
                    let rel = f.pose()?;
                    let mut information = Mat6::zeros();
                    for r in 0..6 {
                        for c in r..6 {
                            let v = f.f64("information")?;
                            information[(r, c)] = v;
                            information[(c, r)] = v;
                        }
                    }
                    g.edges.push(GraphEdge {
                        from,
                        to,
                        rel,
                        information,
                        kind,
                    });
                }
                "FIX" => {
                    g.fixed.insert(f.usize("node id")?);
                }
                other => return Err(f.error(col, format!("unknown record '{other}'"))),
            }
            f.finish()?;
        }
        g.validate()?;
        Ok(g)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeConfig {
    pub max_iterations: usize,
    pub initial_lambda: f64,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            initial_lambda: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeReport {
    pub iterations: usize,
    /// Cost before optimizing and after each accepted step.
    pub cost_history: Vec<f64>,
    pub final_cost: f64,
}

/// Optimizes node poses; returns the updated graph and the final cost.
pub fn optimize(graph: &PoseGraph) -> Result<(PoseGraph, f64)> {
    let (g, report) = optimize_with(graph, &OptimizeConfig::default())?;
    Ok((g, report.final_cost))
}

pub fn optimize_with(
    graph: &PoseGraph,
    cfg: &OptimizeConfig,
) -> Result<(PoseGraph, OptimizeReport)> {
    graph.validate()?;
    graph.check_connected()?;
    let idx = graph.node_index();
    // Column block of each free node.
    let mut slot: HashMap<usize, usize> = HashMap::new();
    for n in &graph.nodes {
        if !graph.fixed.contains(&n.id) {
            let k = slot.len();
            slot.insert(n.id, k);
        }
    }
    let dim = 6 * slot.len();
    let mut g = graph.clone();
    let mut cost = g.cost()?;
    let mut report = OptimizeReport {
        iterations: 0,
        cost_history: vec![cost],
        final_cost: cost,
    };
    if dim == 0 {
        return Ok((g, report));
    }
    let mut lambda = cfg.initial_lambda;
    for _ in 0..cfg.max_iterations {
        report.iterations += 1;
        let mut blocks: HashMap<(usize, usize), Mat6> = HashMap::new();
        let mut b = DVector::<f64>::zeros(dim);
        for e in &g.edges {
            let (r, jf, jt) = edge_residual_jacobians(
                &g.nodes[idx[&e.from]].pose,
                &g.nodes[idx[&e.to]].pose,
                &e.rel,
            )?;
            let terms = [(slot.get(&e.from), jf), (slot.get(&e.to), jt)];
            for (sa, ja) in &terms {
                let Some(&sa) = sa else { continue };
                let jta = ja.transpose() * e.information;
                {
                    let mut seg = b.fixed_rows_mut::<6>(6 * sa);
                    seg -= jta * r;
                }
                for (sb, jb) in &terms {
                    let Some(&sb) = sb else { continue };
                    *blocks.entry((sa, sb)).or_insert_with(Mat6::zeros) += jta * jb;
                }
            }
        }
        let diag: Vec<f64> = (0..dim)
            .map(|i| blocks[&(i / 6, i / 6)][(i % 6, i % 6)])
            .collect();
        let mut accepted = false;
        let mut converged = false;
        for _ in 0..20 {
            let mut sys = SparseSpdBuilder::new(dim);
            for (&(sa, sb), m) in &blocks {
                for c in 0..6 {
                    for r in 0..6 {
                        let v = m[(r, c)];
                        if v != 0.0 {
                            sys.add(6 * sa + r, 6 * sb + c, v);
                        }
                    }
                }
            }
            for (i, d) in diag.iter().enumerate() {
                sys.add(i, i, lambda * d.max(1e-12));
            }
            let delta = match sys.solve(&b) {
                Ok(d) => d,
                Err(_) => {
                    lambda *= 10.0;
                    continue;
                }
            };
            let mut trial = g.clone();
            for n in trial.nodes.iter_mut() {
                if let Some(&s) = slot.get(&n.id) {
                    let d = Vec6::from_iterator(delta.rows(6 * s, 6).iter().copied());
                    n.pose = n.pose.retract(&Twist::from_vector(&d));
                }
            }
            let new_cost = match trial.cost() {
                Ok(c) => c,
                Err(Error::IllConditionedLog { .. }) => f64::INFINITY,
                Err(e) => return Err(e),
            };
            if new_cost <= cost {
                let small_step = delta.norm() < 1e-14 * (1.0 + dim as f64);
                let small_gain = cost - new_cost <= 1e-15 * cost;
                g = trial;
                cost = new_cost;
                report.cost_history.push(cost);
                lambda = (lambda / 10.0).max(1e-15);
                accepted = true;
                converged = small_step || small_gain || cost < 1e-30;
                break;
            }
            lambda *= 10.0;
        }
        if !accepted || converged {
            break;
        }
    }
    report.final_cost = cost;
    Ok((g, report))
}

/// Tunables of the LiDAR SLAM front end.
#[derive(Debug, Clone, PartialEq)]
pub struct SlamConfig {
    pub rough: IcpConfig,
    pub precise: IcpConfig,
    pub precise_objective: IcpObjective,
    pub loop_dist: f64,
    pub loop_min_gap_s: f64,
    pub min_fitness: f64,
    /// Largest rotation ICP may add to the initial relative pose of a loop
    /// candidate; larger corrections are treated as false matches.
    pub max_rotation_correction_deg: f64,
    pub node_dist: f64,
    pub node_interval_s: f64,
}

impl Default for SlamConfig {
    fn default() -> Self {
        Self {
            rough: IcpConfig::rough(),
            precise: IcpConfig::precise(),
            precise_objective: IcpObjective::PointToPlane,
            loop_dist: 5.0,
            loop_min_gap_s: 30.0,
            min_fitness: 0.3,
            max_rotation_correction_deg: 30.0,
            node_dist: 0.5,
            node_interval_s: 1.0,
        }
    }
}

/// Picks node times among scan start times: the first scan, then every scan
/// after the platform moved `dist` meters or `interval_s` seconds passed.
pub fn select_node_times(
    scan_times: &[i64],
    odom: &OdometryTrack,
    dist: f64,
    interval_s: f64,
) -> Result<Vec<i64>> {
    let mut out: Vec<i64> = Vec::new();
    let mut last: Option<(i64, Se3Pose)> = None;
    for &t in scan_times {
        let pose = odom.pose_at(t as f64)?;
        let take = match &last {
            None => true,
            Some((lt, lp)) => {
                (pose.translation() - lp.translation()).norm() >= dist
                    || (t - lt) as f64 * 1e-9 >= interval_s - 1e-9
            }
        };
        if take {
            out.push(t);
            last = Some((t, pose));
        }
    }
    Ok(out)
}

fn relative_odometry(odom: &OdometryTrack, a: i64, b: i64) -> Result<Se3Pose> {
    Ok(odom.pose_at(a as f64)?.inverse() * odom.pose_at(b as f64)?)
}

/// ICP edges between consecutive nodes, initialized from odometry. Pairs
/// where registration fails fall back to an odometry edge with inflated
/// covariance.
pub fn build_sequential_edges(
    nodes: &[GraphNode],
    clouds: &CloudStore,
    odom: &OdometryTrack,
    cfg: &IcpConfig,
    objective: IcpObjective,
) -> Result<Vec<GraphEdge>> {
    let pairs: Vec<(&GraphNode, &GraphNode)> = nodes.windows(2).map(|w| (&w[0], &w[1])).collect();
    pairs
        .par_iter()
        .map(|(a, b)| {
            let init = relative_odometry(odom, a.t_ns, b.t_ns)?;
            let (ca, cb) = (cloud_for(clouds, a)?, cloud_for(clouds, b)?);
            Ok(match register(cb, ca, &init, cfg, objective) {
                Ok(r) => GraphEdge {
                    from: a.id,
                    to: b.id,
                    rel: r.pose,
                    information: information_from_rmse(r.rmse),
                    kind: EdgeKind::IcpSequential,
                },
                Err(Error::NoOverlap { .. } | Error::DegenerateGeometry(_) | Error::EmptyCloud) => {
                    GraphEdge {
                        from: a.id,
                        to: b.id,
                        rel: init,
                        information: information_from_rmse(ODOMETRY_FALLBACK_SIGMA),
                        kind: EdgeKind::Odometry,
                    }
                }
                Err(e) => return Err(e),
            })
        })
        .collect()
}

fn cloud_for<'a>(clouds: &'a CloudStore, n: &GraphNode) -> Result<&'a PointCloud> {
    clouds.get(&n.cloud_key()).ok_or_else(|| {
        Error::InvalidGraph(format!(
            "no cloud for node {} ({}, {})",
            n.id, n.sequence, n.t_ns
        ))
    })
}

/// Node pairs closer than `dist` that are either more than `min_gap_s`
/// apart in time or from different sequences, ordered by (from, to).
pub fn find_loop_candidates(graph: &PoseGraph, dist: f64, min_gap_s: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let nodes = &graph.nodes;
    for i in 0..nodes.len() {
        for j in (i + 1)..nodes.len() {
            let (a, b) = (&nodes[i], &nodes[j]);
            let close = (a.pose.translation() - b.pose.translation()).norm() < dist;
            let distant =
                a.sequence != b.sequence || ((a.t_ns - b.t_ns).abs() as f64) * 1e-9 > min_gap_s;
            if close && distant {
                out.push((a.id.min(b.id), a.id.max(b.id)));
            }
        }
    }
    out.sort_unstable();
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct VerifyReport {
    pub candidates: usize,
    pub accepted: usize,
    pub rejected_rough: usize,
    pub rejected_precise: usize,
}

/// Rough ICP on downsampled clouds gates each candidate; survivors are
/// refined with the precise configuration.
pub fn verify_candidates(
    graph: &PoseGraph,
    candidates: &[(usize, usize)],
    clouds: &CloudStore,
    cfg: &SlamConfig,
) -> Result<(Vec<GraphEdge>, VerifyReport)> {
    let idx = graph.node_index();
    let results: Vec<Result<Option<GraphEdge>, (bool, Error)>> = candidates
        .par_iter()
        .map(|&(from, to)| {
            let (a, b) = (&graph.nodes[idx[&from]], &graph.nodes[idx[&to]]);
            let ca = cloud_for(clouds, a).map_err(|e| (true, e))?;
            let cb = cloud_for(clouds, b).map_err(|e| (true, e))?;
            let init = a.pose.inverse() * b.pose;
            let rough = match register(cb, ca, &init, &cfg.rough, IcpObjective::PointToPoint) {
                Ok(r) if r.fitness >= cfg.min_fitness => r,
                _ => return Ok(None),
            };
            let fine = match register(cb, ca, &rough.pose, &cfg.precise, cfg.precise_objective) {
                Ok(r) if r.fitness >= cfg.min_fitness => r,
                _ => return Err((false, Error::EmptyCloud)),
            };
            let correction = init.rotation().angle_to(fine.pose.rotation());
            if correction > cfg.max_rotation_correction_deg.to_radians() {
                return Err((false, Error::EmptyCloud));
            }
            let kind = if a.sequence == b.sequence {
                EdgeKind::Loop
            } else {
                EdgeKind::CrossSequence
            };
            Ok(Some(GraphEdge {
                from,
                to,
                rel: fine.pose,
                information: information_from_rmse(fine.rmse),
                kind,
            }))
        })
        .collect();
    let mut report = VerifyReport {
        candidates: candidates.len(),
        ..Default::default()
    };
    let mut edges = Vec::new();
    for r in results {
        match r {
            Ok(Some(e)) => {
                report.accepted += 1;
                edges.push(e);
            }
            Ok(None) => report.rejected_rough += 1,
            Err((false, _)) => report.rejected_precise += 1,
            Err((true, e)) => return Err(e),
        }
    }
    Ok((edges, report))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlamOutput {
    pub graph: PoseGraph,
    pub clouds: CloudStore,
    pub loops: VerifyReport,
    pub final_cost: f64,
}

/// Full single-sequence front and back end: undistort scans, pick nodes,
/// add sequential and loop edges and optimize with the first node fixed at
/// `alignment · odom(t_first)`.
#[allow(clippy::too_many_arguments)]
pub fn slam_sequence(
    sequence: &str,
    scans: &[LidarScan],
    extrinsic: &Se3Pose,
    odom: &OdometryTrack,
    alignment: &Se3Pose,
    first_id: usize,
    cfg: &SlamConfig,
) -> Result<SlamOutput> {
    let usable: Vec<&LidarScan> = scans
        .iter()
        .filter(|s| {
            s.start_ns >= odom.start() && s.start_ns as f64 + s.max_dt() * 1e9 <= odom.end() as f64
        })
        .collect();
    if usable.is_empty() {
        return Err(Error::InsufficientSamples(format!(
            "sequence '{sequence}' has no scan covered by odometry"
        )));
    }
    let times: Vec<i64> = usable.iter().map(|s| s.start_ns).collect();
    let node_times = select_node_times(&times, odom, cfg.node_dist, cfg.node_interval_s)?;
    let by_time: HashMap<i64, &LidarScan> = usable.iter().map(|s| (s.start_ns, *s)).collect();
    let clouds: Vec<(CloudKey, PointCloud)> = node_times
        .par_iter()
        .map(|t| {
            Ok((
                (sequence.to_string(), *t),
                undistort_scan(by_time[t], extrinsic, odom)?,
            ))
        })
        .collect::<Result<_>>()?;
    let clouds: CloudStore = clouds.into_iter().collect();
    let nodes: Vec<GraphNode> = node_times
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            Ok(GraphNode {
                id: first_id + i,
                sequence: sequence.to_string(),
                t_ns: t,
                pose: *alignment * odom.pose_at(t as f64)?,
            })
        })
        .collect::<Result<_>>()?;
    let mut graph = PoseGraph {
        edges: build_sequential_edges(&nodes, &clouds, odom, &cfg.precise, cfg.precise_objective)?,
        fixed: BTreeSet::from([nodes[0].id]),
        nodes,
    };
    let candidates = find_loop_candidates(&graph, cfg.loop_dist, cfg.loop_min_gap_s);
    let (loops, report) = verify_candidates(&graph, &candidates, &clouds, cfg)?;
    graph.edges.extend(loops);
    let (graph, final_cost) = optimize(&graph)?;
    Ok(SlamOutput {
        graph,
        clouds,
        loops: report,
        final_cost,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergeOutput {
    pub graph: PoseGraph,
    pub cross: VerifyReport,
    pub final_cost: f64,
}

/// Concatenates per-sequence graphs (node poses already in a shared coarse
/// frame), adds verified cross-sequence edges, pins the first node of the
/// first graph and optimizes. Node ids are renumbered consecutively.
pub fn merge_graphs(
    graphs: &[PoseGraph],
    clouds: &CloudStore,
    cfg: &SlamConfig,
) -> Result<MergeOutput> {
    if graphs.is_empty() {
        return Err(Error::InvalidGraph("nothing to merge".into()));
    }
    let mut merged = PoseGraph::default();
    for g in graphs {
        g.validate()?;
        let remap: HashMap<usize, usize> = g
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.id, merged.nodes.len() + i))
            .collect();
        for n in &g.nodes {
            merged.nodes.push(GraphNode {
                id: remap[&n.id],
                ..n.clone()
            });
        }
        for e in &g.edges {
            merged.edges.push(GraphEdge {
                from: remap[&e.from],
                to: remap[&e.to],
                ..e.clone()
            });
        }
    }
    let first = graphs
        .iter()
        .find_map(|g| {
            let first = g
                .fixed
                .iter()
                .next()
                .copied()
                .or_else(|| g.nodes.first().map(|n| n.id))?;
            g.node(first).map(|n| (n.sequence.clone(), n.t_ns))
        })
        .ok_or_else(|| Error::InvalidGraph("no nodes to merge".into()))?;
    let pinned = merged
        .nodes
        .iter()
        .find(|n| (n.sequence.clone(), n.t_ns) == first)
        .unwrap()
        .id;
    merged.fixed.insert(pinned);
    merged.validate()?;

    let sequences = merged.sequences();
    let seq_of: HashMap<usize, String> = merged
        .nodes
        .iter()
        .map(|n| (n.id, n.sequence.clone()))
        .collect();
    let candidates: Vec<(usize, usize)> =
        find_loop_candidates(&merged, cfg.loop_dist, f64::INFINITY)
            .into_iter()
            .filter(|(a, b)| seq_of[a] != seq_of[b])
            .collect();
    let (cross, report) = verify_candidates(&merged, &candidates, clouds, cfg)?;

    if sequences.len() > 1 {
        let mut parent: HashMap<String, String> =
            sequences.iter().map(|s| (s.clone(), s.clone())).collect();
        fn find(p: &mut HashMap<String, String>, s: &str) -> String {
            let mut cur = s.to_string();
            while p[&cur] != cur {
                cur = p[&cur].clone();
            }
            cur
        }
        for e in &cross {
            let ra = find(&mut parent, &seq_of[&e.from]);
            let rb = find(&mut parent, &seq_of[&e.to]);
            if ra != rb {
                parent.insert(rb, ra);
            }
        }
        let root = find(&mut parent, &sequences[0]);
        for s in &sequences[1..] {
            if find(&mut parent, s) != root {
                return Err(Error::DisconnectedMerge {
                    sequence: s.clone(),
                });
            }
        }
    }
    merged.edges.extend(cross);
    let (graph, final_cost) = optimize(&merged)?;
    Ok(MergeOutput {
        graph,
        cross: report,
        final_cost,
    })
}

/// Samples of platform poses for spline fitting: every odometry sample in
/// the node range, chained from the nearest preceding optimized node.
pub fn trajectory_samples(
    graph: &PoseGraph,
    sequence: &str,
    odom: &OdometryTrack,
) -> Result<Vec<(i64, Se3Pose)>> {
    let mut nodes: Vec<&GraphNode> = graph
        .nodes
        .iter()
        .filter(|n| n.sequence == sequence)
        .collect();
    nodes.sort_by_key(|n| n.t_ns);
    if nodes.is_empty() {
        return Err(Error::InvalidGraph(format!(
            "no nodes for sequence '{sequence}'"
        )));
    }
    let first = nodes[0].t_ns;
    let last = nodes[nodes.len() - 1].t_ns;
    let mut out = Vec::new();
    let mut k = 0;
    for (t, _) in odom
        .samples()
        .iter()
        .filter(|(t, _)| *t >= first && *t <= last)
    {
        while k + 1 < nodes.len() && nodes[k + 1].t_ns <= *t {
            k += 1;
        }
        let n = nodes[k];
        let pose = n.pose * relative_odometry(odom, n.t_ns, *t)?;
        out.push((*t, pose));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;

    fn pose(w: [f64; 3], t: [f64; 3]) -> Se3Pose {
        Se3Pose::exp(&Twist::new(Vec3::from(w), Vec3::from(t)))
    }

    fn node(id: usize, p: Se3Pose) -> GraphNode {
        GraphNode {
            id,
            sequence: "a".into(),
            t_ns: id as i64 * 1_000_000_000,
            pose: p,
        }
    }

    fn edge(from: usize, to: usize, rel: Se3Pose) -> GraphEdge {
        GraphEdge {
            from,
            to,
            rel,
            information: Mat6::identity(),
            kind: EdgeKind::IcpSequential,
        }
    }

    #[test]
    fn residual_zero_iff_consistent() {
        let a = pose([0.1, 0.2, -0.3], [1.0, 2.0, 3.0]);
        let rel = pose([-0.2, 0.1, 0.4], [0.5, -1.0, 0.2]);
        let b = a * rel;
        assert!(edge_residual(&a, &b, &rel).unwrap().norm() < 1e-14);
        let b2 = b * pose([0.0, 0.0, 0.0], [1e-3, 0.0, 0.0]);
        assert!(edge_residual(&a, &b2, &rel).unwrap().norm() > 1e-4);
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let a = pose([0.3, -0.2, 0.9], [1.0, 2.0, 3.0]);
        let b = pose([-0.4, 0.5, 0.1], [0.0, -1.0, 2.0]);
        let rel = pose([0.2, 0.1, -0.3], [0.5, 0.5, -0.5]);
        let (_, jf, jt) = edge_residual_jacobians(&a, &b, &rel).unwrap();
        let h = 1e-6;
        for k in 0..6 {
            let mut d = Vec6::zeros();
            d[k] = h;
            let dp = Twist::from_vector(&d);
            let dm = Twist::from_vector(&-d);
            let fd_f = (edge_residual(&a.retract(&dp), &b, &rel)
                .unwrap()
                .to_vector()
                - edge_residual(&a.retract(&dm), &b, &rel)
                    .unwrap()
                    .to_vector())
                / (2.0 * h);
            let fd_t = (edge_residual(&a, &b.retract(&dp), &rel)
                .unwrap()
                .to_vector()
                - edge_residual(&a, &b.retract(&dm), &rel)
                    .unwrap()
                    .to_vector())
                / (2.0 * h);
            assert!((fd_f - jf.column(k)).norm() < 1e-7);
            assert!((fd_t - jt.column(k)).norm() < 1e-7);
        }
    }

    #[test]
    fn consistent_graph_is_unchanged() {
        let p0 = Se3Pose::identity();
        let p1 = pose([0.0, 0.0, 0.3], [1.0, 0.0, 0.0]);
        let p2 = pose([0.0, 0.1, 0.6], [2.0, 0.5, 0.0]);
        let g = PoseGraph {
            nodes: vec![node(0, p0), node(1, p1), node(2, p2)],
            edges: vec![edge(0, 1, p0.inverse() * p1), edge(1, 2, p1.inverse() * p2)],
            fixed: BTreeSet::from([0]),
        };
        let (out, cost) = optimize(&g).unwrap();
        assert!(cost < 1e-18);
        for (a, b) in out.nodes.iter().zip(&g.nodes) {
            assert!(generalized_norm(&a.pose, &b.pose) < 1e-12);
        }
    }

    fn generalized_norm(a: &Se3Pose, b: &Se3Pose) -> f64 {
        crate::geometry::generalized_minus(a, b).unwrap().norm()
    }

    #[test]
    fn perturbed_middle_node_is_recovered() {
        let p0 = Se3Pose::identity();
        let p1 = pose([0.0, 0.0, 0.3], [1.0, 0.0, 0.0]);
        let p2 = pose([0.0, 0.1, 0.6], [2.0, 0.5, 0.0]);
        let mut g = PoseGraph {
            nodes: vec![node(0, p0), node(1, p1), node(2, p2)],
            edges: vec![edge(0, 1, p0.inverse() * p1), edge(1, 2, p1.inverse() * p2)],
            fixed: BTreeSet::from([0]),
        };
        g.nodes[1].pose = p1 * pose([0.1, -0.05, 0.2], [0.3, -0.2, 0.1]);
        let (out, cost) = optimize(&g).unwrap();
        assert!(cost < 1e-18);
        assert!(generalized_norm(&out.nodes[1].pose, &p1) < 1e-9);
        assert!(generalized_norm(&out.nodes[2].pose, &p2) < 1e-9);
    }

    #[test]
    fn contract_errors() {
        let g = PoseGraph {
            nodes: vec![node(0, Se3Pose::identity()), node(1, Se3Pose::identity())],
            edges: vec![],
            fixed: BTreeSet::new(),
        };
        assert!(matches!(optimize(&g), Err(Error::NoFixedNode)));
        let mut g2 = g.clone();
        g2.fixed.insert(0);
        assert!(matches!(
            optimize(&g2),
            Err(Error::DisconnectedGraph { node: 1 })
        ));
        let mut g3 = g2.clone();
        let mut e = edge(0, 1, Se3Pose::identity());
        e.information[(0, 0)] = -1.0;
        g3.edges.push(e);
        assert!(matches!(
            optimize(&g3),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn loop_candidates_respect_gap_and_distance() {
        let g = PoseGraph {
            nodes: vec![
                node(0, Se3Pose::identity()),
                node(1, Se3Pose::identity()),
                node(40, pose([0.0; 3], [1.0, 0.0, 0.0])),
                node(41, pose([0.0; 3], [100.0, 0.0, 0.0])),
            ],
            edges: vec![],
            fixed: BTreeSet::new(),
        };
        assert_eq!(find_loop_candidates(&g, 5.0, 30.0), vec![(0, 40), (1, 40)]);
    }

    #[test]
    fn graph_text_round_trip() {
        let g = PoseGraph {
            nodes: vec![
                node(0, Se3Pose::identity()),
                node(1, pose([0.1, 0.2, 0.3], [1.0, 2.0, 3.0])),
            ],
            edges: vec![edge(0, 1, pose([0.1, 0.2, 0.3], [1.0, 2.0, 3.0]))],
            fixed: BTreeSet::from([0]),
        };
        let text = g.to_text();
        let back = PoseGraph::from_text(&text, Path::new("graph.txt")).unwrap();
        assert_eq!(back.to_text(), text);
    }
}
