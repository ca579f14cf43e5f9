//! Pose-graph storage and robust nonlinear least-squares optimization over
//! SE(3), with Cauchy robustification and g2o text import/export.

use crate::error::{Error, Result};
use crate::frontend::LocalPoseGraph;
use crate::se3::{self, left_jacobian_so3_inv, skew, Pose, Twist};
use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, UnitQuaternion, Vector3, Vector6};
use std::collections::{HashMap, HashSet, VecDeque};
use std::io::{BufRead, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeKind {
    OdometryConsecutive,
    OdometryKeyframe,
    LoopClosure,
}

/// Cauchy robust loss parameter.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RobustKernelConfig {
    pub delta: f64,
}

impl Default for RobustKernelConfig {
    fn default() -> Self {
        RobustKernelConfig { delta: 2.0 }
    }
}

/// rho(x) = delta^2 * ln(x/delta^2 + 1) and its first derivative.
pub fn cauchy_rho(x: f64, delta: f64) -> Result<(f64, f64)> {
    if x < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "cauchy_rho: negative argument {x}"
        )));
    }
    let d2 = delta * delta;
    Ok((d2 * (x / d2 + 1.0).ln(), 1.0 / (x / d2 + 1.0)))
}

#[derive(Debug, Clone)]
pub struct PoseGraphNode {
    pub id: usize,
    pub pose: Pose,
    pub is_keyframe: bool,
    pub fixed: bool,
}

#[derive(Debug, Clone)]
pub struct PoseGraphEdge {
    pub from: usize,
    pub to: usize,
    /// Relative measurement: zero residual iff pose_to = pose_from * measurement.
    pub measurement: Pose,
    pub information: Matrix6<f64>,
    pub robust: Option<RobustKernelConfig>,
    pub kind: EdgeKind,
}

impl PoseGraphEdge {
    pub fn new(from: usize, to: usize, measurement: Pose, kind: EdgeKind) -> Self {
        PoseGraphEdge {
            from,
            to,
            measurement,
            information: Matrix6::identity(),
            robust: None,
            kind,
        }
    }
}

/// Residual of one relative-pose constraint: log(meas^-1 * Ti^-1 * Tj).
pub fn edge_residual(edge: &PoseGraphEdge, pose_i: &Pose, pose_j: &Pose) -> Result<Twist> {
    let m = edge
        .measurement
        .inverse()
        .compose(&pose_i.inverse())
        .compose(pose_j);
    se3::log(&m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizeScope {
    Local,
    KeyframesOnly,
    Full,
}

#[derive(Debug, Clone, Default)]
pub struct OptimizeStats {
    pub iterations: usize,
    pub accepted_steps: usize,
    pub initial_objective: f64,
    pub final_objective: f64,
}

#[derive(Debug, Default)]
pub struct PoseGraph {
    nodes: Vec<PoseGraphNode>,
    edges: Vec<PoseGraphEdge>,
    index: HashMap<usize, usize>,
    merged_locals: HashSet<usize>,
}

impl PoseGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn nodes(&self) -> &[PoseGraphNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[PoseGraphEdge] {
        &self.edges
    }

    pub fn node(&self, id: usize) -> Option<&PoseGraphNode> {
        self.index.get(&id).map(|&i| &self.nodes[i])
    }

    pub fn node_mut(&mut self, id: usize) -> Option<&mut PoseGraphNode> {
        self.index.get(&id).copied().map(move |i| &mut self.nodes[i])
    }

    pub fn add_node(&mut self, node: PoseGraphNode) -> Result<()> {
        if self.index.contains_key(&node.id) {
            return Err(Error::Internal(format!("duplicate node id {}", node.id)));
        }
        self.index.insert(node.id, self.nodes.len());
        self.nodes.push(node);
        Ok(())
    }

    pub fn add_edge(&mut self, edge: PoseGraphEdge) -> Result<()> {
        if !self.index.contains_key(&edge.from) || !self.index.contains_key(&edge.to) {
            return Err(Error::Internal(format!(
                "edge references missing node ({} -> {})",
                edge.from, edge.to
            )));
        }
        self.edges.push(edge);
        Ok(())
    }

    /// Inserts a completed local graph. The local keyframe may already exist
    /// (it was an ordinary node of the previous local graph); every other
    /// node must be new.
    pub fn merge_local_graph(&mut self, local: &LocalPoseGraph) -> Result<()> {
        if self.merged_locals.contains(&local.keyframe_id) {
            return Err(Error::Internal(format!(
                "local graph for keyframe {} already merged",
                local.keyframe_id
            )));
        }
        match self.index.get(&local.keyframe_id) {
            Some(&i) => {
                self.nodes[i].is_keyframe = true;
                self.nodes[i].pose = local.keyframe_pose;
            }
            None => {
                self.add_node(PoseGraphNode {
                    id: local.keyframe_id,
                    pose: local.keyframe_pose,
                    is_keyframe: true,
                    fixed: false,
                })?;
            }
        }
        for node in &local.frames {
            self.add_node(PoseGraphNode {
                id: node.id,
                pose: node.pose,
                is_keyframe: false,
                fixed: false,
            })?;
        }
        for edge in &local.edges {
            self.add_edge(edge.clone())?;
        }
        self.merged_locals.insert(local.keyframe_id);
        Ok(())
    }

    /// Flags all odometry edges belonging to the given local graph, plus any
    /// edges listed explicitly, with the Cauchy kernel.
    pub fn robustify_edges_of_keyframe(&mut self, keyframe_id: usize, cfg: RobustKernelConfig) {
        for edge in &mut self.edges {
            if edge.from == keyframe_id && edge.kind != EdgeKind::LoopClosure {
                edge.robust = Some(cfg);
            }
        }
    }

    fn scope_nodes(&self, scope: OptimizeScope) -> Vec<usize> {
        self.nodes
            .iter()
            .filter(|n| match scope {
                OptimizeScope::KeyframesOnly => n.is_keyframe,
                _ => true,
            })
            .map(|n| n.id)
            .collect()
    }

    /// Robust Levenberg-Marquardt over the selected scope.
    pub fn optimize(
        &mut self,
        scope: OptimizeScope,
        max_iter: usize,
        term_tol: f64,
    ) -> Result<OptimizeStats> {
        let scope_ids: Vec<usize> = self.scope_nodes(scope);
        let scope_set: HashSet<usize> = scope_ids.iter().copied().collect();
        let edges: Vec<usize> = self
            .edges
            .iter()
            .enumerate()
            .filter(|(_, e)| scope_set.contains(&e.from) && scope_set.contains(&e.to))
            .map(|(i, _)| i)
            .collect();

        let fixed: HashSet<usize> = scope_ids
            .iter()
            .copied()
            .filter(|id| self.node(*id).unwrap().fixed)
            .collect();
        if fixed.is_empty() {
            return Err(Error::NoFixedNode);
        }
        self.check_connectivity(&scope_set, &edges, &fixed)?;

        // Free-node ordering is the graph's insertion order.
        let free: Vec<usize> = scope_ids
            .iter()
            .copied()
            .filter(|id| !fixed.contains(id))
            .collect();
        let col_of: HashMap<usize, usize> =
            free.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let n = free.len() * 6;

        let mut poses: HashMap<usize, Pose> = scope_ids
            .iter()
            .map(|&id| (id, self.node(id).unwrap().pose))
            .collect();

        let mut stats = OptimizeStats::default();
        let mut objective = self.objective(&edges, &poses)?;
        stats.initial_objective = objective;
        stats.final_objective = objective;
        if n == 0 {
            return Ok(stats);
        }

        let mut lambda = 1e-4;
        for _ in 0..max_iter {
            stats.iterations += 1;
            let mut h = DMatrix::<f64>::zeros(n, n);
            let mut b = DVector::<f64>::zeros(n);
            for &ei in &edges {
                let edge = &self.edges[ei];
                let pi = poses[&edge.from];
                let pj = poses[&edge.to];
                let e = edge_residual(edge, &pi, &pj)?.to_vector();
                let chi2 = (e.transpose() * edge.information * e)[0];
                let w = match edge.robust {
                    Some(r) => cauchy_rho(chi2, r.delta)?.1,
                    None => 1.0,
                };
                let jr_inv = se3_right_jacobian_inv(&e);
                let j_j = jr_inv;
                let adj = adjoint(&pj.inverse().compose(&pi));
                let j_i = -jr_inv * adj;
                let info = edge.information * w;
                let add_block =
                    |h: &mut DMatrix<f64>, b: &mut DVector<f64>, r: usize, c: usize,
                     ja: &Matrix6<f64>, jb: &Matrix6<f64>| {
                        let block = ja.transpose() * info * jb;
                        for (bi, bj) in (0..6).flat_map(|x| (0..6).map(move |y| (x, y))) {
                            h[(r * 6 + bi, c * 6 + bj)] += block[(bi, bj)];
                        }
                        let _ = b;
                    };
                let grad = |j: &Matrix6<f64>| -> Vector6<f64> { j.transpose() * info * e };
                if let Some(&ci) = col_of.get(&edge.from) {
                    add_block(&mut h, &mut b, ci, ci, &j_i, &j_i);
                    let g = grad(&j_i);
                    for k in 0..6 {
                        b[ci * 6 + k] -= g[k];
                    }
                }
                if let Some(&cj) = col_of.get(&edge.to) {
                    add_block(&mut h, &mut b, cj, cj, &j_j, &j_j);
                    let g = grad(&j_j);
                    for k in 0..6 {
                        b[cj * 6 + k] -= g[k];
                    }
                }
                if let (Some(&ci), Some(&cj)) = (col_of.get(&edge.from), col_of.get(&edge.to)) {
                    add_block(&mut h, &mut b, ci, cj, &j_i, &j_j);
                    add_block(&mut h, &mut b, cj, ci, &j_j, &j_i);
                }
            }

            // Damped normal equations; Marquardt-style diagonal scaling.
            let mut damped = h.clone();
            for d in 0..n {
                let diag = h[(d, d)].max(1e-12);
                damped[(d, d)] += lambda * diag;
            }
            let Some(chol) = damped.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let delta = chol.solve(&b);

            let mut candidate = poses.clone();
            for (i, &id) in free.iter().enumerate() {
                let xi = Twist::from_vector(&Vector6::from_iterator(
                    (0..6).map(|k| delta[i * 6 + k]),
                ));
                let p = candidate[&id];
                candidate.insert(id, p.compose(&se3::exp(&xi)));
            }
            let new_objective = self.objective(&edges, &candidate)?;
            if new_objective < objective {
                let rel = (objective - new_objective) / objective.max(1e-300);
                poses = candidate;
                objective = new_objective;
                stats.accepted_steps += 1;
                lambda = (lambda / 10.0).max(1e-12);
                if rel < term_tol {
                    break;
                }
            } else {
                lambda *= 10.0;
                if lambda > 1e12 {
                    break;
                }
            }
        }

        for (&id, pose) in &poses {
            self.node_mut(id).unwrap().pose = *pose;
        }
        stats.final_objective = objective;
        Ok(stats)
    }

    fn objective(&self, edges: &[usize], poses: &HashMap<usize, Pose>) -> Result<f64> {
        let mut total = 0.0;
        for &ei in edges {
            let edge = &self.edges[ei];
            let e = edge_residual(edge, &poses[&edge.from], &poses[&edge.to])?.to_vector();
            let chi2 = (e.transpose() * edge.information * e)[0];
            total += match edge.robust {
                Some(r) => cauchy_rho(chi2, r.delta)?.0,
                None => chi2,
            };
        }
        Ok(total)
    }

    fn check_connectivity(
        &self,
        scope: &HashSet<usize>,
        edges: &[usize],
        fixed: &HashSet<usize>,
    ) -> Result<()> {
        let mut adjacency: HashMap<usize, Vec<usize>> = HashMap::new();
        for &ei in edges {
            let e = &self.edges[ei];
            adjacency.entry(e.from).or_default().push(e.to);
            adjacency.entry(e.to).or_default().push(e.from);
        }
        let mut seen: HashSet<usize> = fixed.clone();
        let mut queue: VecDeque<usize> = fixed.iter().copied().collect();
        while let Some(id) = queue.pop_front() {
            if let Some(next) = adjacency.get(&id) {
                for &m in next {
                    if seen.insert(m) {
                        queue.push_back(m);
                    }
                }
            }
        }
        for &id in scope {
            if !seen.contains(&id) {
                return Err(Error::Disconnected(id));
            }
        }
        Ok(())
    }
}

/// Adjoint of SE(3) on twists ordered [omega, v].
pub fn adjoint(p: &Pose) -> Matrix6<f64> {
    let r = *p.rotation().matrix();
    let tr = skew(p.translation()) * r;
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    out.fixed_view_mut::<3, 3>(3, 0).copy_from(&tr);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
    out
}

/// Q block of the SE(3) left Jacobian (Barfoot), for twist [omega, v] with
/// rho = v, phi = omega.
fn se3_jacobian_q(rho: &Vector3<f64>, phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let rx = skew(rho);
    let px = skew(phi);
    if theta < 1e-6 {
        return rx * 0.5 + (px * rx + rx * px) / 6.0;
    }
    let t2 = theta * theta;
    let t3 = t2 * theta;
    let t4 = t3 * theta;
    let t5 = t4 * theta;
    let (s, c) = theta.sin_cos();
    let a1 = (theta - s) / t3;
    let a2 = (1.0 - t2 / 2.0 - c) / t4;
    let a3 = 0.5 * (a2 - 3.0 * (theta - s - t3 / 6.0) / t5);
    rx * 0.5
        + (px * rx + rx * px + px * rx * px) * a1
        - (px * px * rx + rx * px * px - px * rx * px * 3.0) * a2
        - (px * rx * px * px + px * px * rx * px) * a3
}

/// Inverse left Jacobian of SE(3) for twist [omega, v].
pub fn se3_left_jacobian_inv(xi: &Vector6<f64>) -> Matrix6<f64> {
    let omega = Vector3::new(xi[0], xi[1], xi[2]);
    let v = Vector3::new(xi[3], xi[4], xi[5]);
    let j_inv = left_jacobian_so3_inv(&omega);
    let q = se3_jacobian_q(&v, &omega);
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&j_inv);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&j_inv);
    let bl = -j_inv * q * j_inv;
    out.fixed_view_mut::<3, 3>(3, 0).copy_from(&bl);
    out
}

/// Inverse right Jacobian: Jr^-1(xi) = Jl^-1(-xi).
pub fn se3_right_jacobian_inv(xi: &Vector6<f64>) -> Matrix6<f64> {
    se3_left_jacobian_inv(&(-xi))
}

// ---------------------------------------------------------------------------
// g2o text format

/// Writes `VERTEX_SE3:QUAT` / `EDGE_SE3:QUAT` lines. The 21-entry information
/// block is upper-triangular in g2o's [t, q] ordering.
pub fn write_g2o<W: Write>(graph: &PoseGraph, out: &mut W) -> std::io::Result<()> {
    for node in graph.nodes() {
        let t = node.pose.translation();
        let q = node.pose.rotation().to_unit_quaternion();
        writeln!(
            out,
            "VERTEX_SE3:QUAT {} {} {} {} {} {} {} {}",
            node.id, t[0], t[1], t[2], q.i, q.j, q.k, q.w
        )?;
        if node.fixed {
            writeln!(out, "FIX {}", node.id)?;
        }
    }
    for edge in graph.edges() {
        let t = edge.measurement.translation();
        let q = edge.measurement.rotation().to_unit_quaternion();
        let info = permute_info_to_g2o(&edge.information);
        let mut line = format!(
            "EDGE_SE3:QUAT {} {} {} {} {} {} {} {} {}",
            edge.from, edge.to, t[0], t[1], t[2], q.i, q.j, q.k, q.w
        );
        for r in 0..6 {
            for c in r..6 {
                line.push_str(&format!(" {}", info[(r, c)]));
            }
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// Our twists are [omega, v]; g2o information blocks are [t, r].
fn permute_info_to_g2o(info: &Matrix6<f64>) -> Matrix6<f64> {
    let mut out = Matrix6::zeros();
    let map = [3usize, 4, 5, 0, 1, 2];
    for r in 0..6 {
        for c in 0..6 {
            out[(r, c)] = info[(map[r], map[c])];
        }
    }
    out
}

pub fn read_g2o(path: &Path) -> Result<PoseGraph> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = std::io::BufReader::new(file);
    let mut graph = PoseGraph::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let parse_f = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::parse(path, lineno + 1, format!("bad float '{s}'")))
        };
        match fields[0] {
            "VERTEX_SE3:QUAT" => {
                if fields.len() != 9 {
                    return Err(Error::parse(path, lineno + 1, "expected 9 fields"));
                }
                let id: usize = fields[1]
                    .parse()
                    .map_err(|_| Error::parse(path, lineno + 1, "bad id"))?;
                let vals: Vec<f64> =
                    fields[2..9].iter().map(|s| parse_f(s)).collect::<Result<_>>()?;
                let pose = pose_from_tq(&vals);
                graph.add_node(PoseGraphNode {
                    id,
                    pose,
                    is_keyframe: false,
                    fixed: false,
                })?;
            }
            "FIX" => {
                let id: usize = fields[1]
                    .parse()
                    .map_err(|_| Error::parse(path, lineno + 1, "bad id"))?;
                if let Some(node) = graph.node_mut(id) {
                    node.fixed = true;
                }
            }
            "EDGE_SE3:QUAT" => {
                if fields.len() != 31 {
                    return Err(Error::parse(path, lineno + 1, "expected 31 fields"));
                }
                let from: usize = fields[1]
                    .parse()
                    .map_err(|_| Error::parse(path, lineno + 1, "bad id"))?;
                let to: usize = fields[2]
                    .parse()
                    .map_err(|_| Error::parse(path, lineno + 1, "bad id"))?;
                let vals: Vec<f64> =
                    fields[3..10].iter().map(|s| parse_f(s)).collect::<Result<_>>()?;
                let measurement = pose_from_tq(&vals);
                let upper: Vec<f64> =
                    fields[10..31].iter().map(|s| parse_f(s)).collect::<Result<_>>()?;
                let mut g2o_info = Matrix6::zeros();
                let mut k = 0;
                for r in 0..6 {
                    for c in r..6 {
                        g2o_info[(r, c)] = upper[k];
                        g2o_info[(c, r)] = upper[k];
                        k += 1;
                    }
                }
                let mut edge =
                    PoseGraphEdge::new(from, to, measurement, EdgeKind::OdometryConsecutive);
                edge.information = permute_info_to_g2o(&g2o_info); // permutation is its own inverse
                graph.add_edge(edge)?;
            }
            other => {
                return Err(Error::parse(
                    path,
                    lineno + 1,
                    format!("unknown record '{other}'"),
                ));
            }
        }
    }
    Ok(graph)
}

fn pose_from_tq(vals: &[f64]) -> Pose {
    let t = Vector3::new(vals[0], vals[1], vals[2]);
    let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
        vals[6], vals[3], vals[4], vals[5],
    ));
    Pose::new(crate::se3::Rotation::from_unit_quaternion(&q), t)
}
