//! Kinematics-aware part fusion: greedy NMS with box IoU or kIoU, iterative
//! objectness-weighted part fusion with confidence rescaling, and the
//! driver that combines several independent inference runs.

use serde::{Deserialize, Serialize};

use crate::exec::{self, Execution};
use crate::geometry::{box_polytope, convex_hull, cuboid_corners, inflate_degenerate, iou, project_to_so3, ConvexPolytope, GeomError};
use crate::kinematics::{swept_hull, KinematicsError};
use crate::types::{JointType, Mat3, PartProposal, Vec3, BACKGROUND, JOINT_CLASSES};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FusionError {
    #[error("invalid fusion config: {0}")]
    InvalidConfig(String),
    #[error("every cluster member has zero objectness")]
    AllZeroWeights,
    #[error("cannot average an empty cluster")]
    EmptyCluster,
    #[error("expected {expected} runs, got {got}")]
    RunCount { expected: usize, got: usize },
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
}

impl From<GeomError> for FusionError {
    fn from(e: GeomError) -> Self {
        FusionError::Kinematics(e.into())
    }
}

/// Thresholds of the fusion pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KpfConfig {
    /// NMS overlap threshold (both box IoU and kIoU passes).
    pub tau_iou: f64,
    /// Objectness filter applied to each run after box NMS.
    pub tau_obj: f64,
    /// Objectness filter on the fused output.
    pub tau_obj_final: f64,
    /// kIoU above which a proposal joins a cluster.
    pub tau_kiou: f64,
    /// Rescaled objectness at or below which a cluster is dropped.
    pub tau_scaled: f64,
    /// Maximum number of fusion passes.
    pub tau_count: usize,
    /// Number of independent inference runs.
    pub n_q: usize,
    pub execution: Execution,
}

impl Default for KpfConfig {
    fn default() -> Self {
        Self {
            tau_iou: 0.25,
            tau_obj: 0.25,
            tau_obj_final: 0.25,
            tau_kiou: 0.5,
            tau_scaled: 0.1,
            tau_count: 3,
            n_q: 10,
            execution: Execution::default(),
        }
    }
}

impl KpfConfig {
    pub fn validate(&self) -> Result<(), FusionError> {
        let unit = [
            ("tau_iou", self.tau_iou),
            ("tau_obj", self.tau_obj),
            ("tau_obj_final", self.tau_obj_final),
            ("tau_kiou", self.tau_kiou),
            ("tau_scaled", self.tau_scaled),
        ];
        for (name, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(FusionError::InvalidConfig(format!("{name} = {v} not in [0, 1]")));
            }
        }
        if self.tau_count < 1 {
            return Err(FusionError::InvalidConfig("tau_count must be >= 1".into()));
        }
        if self.n_q < 1 {
            return Err(FusionError::InvalidConfig("n_q must be >= 1".into()));
        }
        Ok(())
    }
}

/// Overlap measure used to compare two proposals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Overlap {
    /// IoU of the current boxes.
    BoxIou,
    /// IoU of the swept hulls over canonical, current and open states.
    KIou,
}

/// The polytope an overlap measure compares for one proposal.
pub fn overlap_shape(p: &PartProposal, overlap: Overlap) -> Result<ConvexPolytope, FusionError> {
    match overlap {
        Overlap::BoxIou => match box_polytope(&p.pose) {
            Err(GeomError::DegenerateInput(_)) => Ok(convex_hull(&inflate_degenerate(&cuboid_corners(&p.pose)))?),
            other => Ok(other?),
        },
        Overlap::KIou => Ok(swept_hull(&p.pose, &p.joint)?.hull),
    }
}

pub fn overlap(a: &PartProposal, b: &PartProposal, overlap: Overlap) -> Result<f64, FusionError> {
    Ok(iou(&overlap_shape(a, overlap)?, &overlap_shape(b, overlap)?))
}

/// Symmetric matrix of pairwise overlaps.
pub fn overlap_matrix(proposals: &[PartProposal], kind: Overlap, exec: Execution) -> Result<Vec<Vec<f64>>, FusionError> {
    let shapes = exec::map(exec, proposals, |p| overlap_shape(p, kind)).into_iter().collect::<Result<Vec<_>, _>>()?;
    let n = shapes.len();
    let rows = exec::map_range(exec, n, |i| (0..n).map(|j| if i == j { 1.0 } else { iou(&shapes[i], &shapes[j]) }).collect());
    Ok(rows)
}

/// Indices sorted by descending objectness; ties keep input order.
fn by_objectness(proposals: &[PartProposal]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..proposals.len()).collect();
    order.sort_by(|&a, &b| proposals[b].objectness().total_cmp(&proposals[a].objectness()));
    order
}

/// Greedy non-maximum suppression in descending objectness: a proposal is
/// kept iff its overlap with every kept proposal is below `threshold`.
pub fn nms(proposals: &[PartProposal], threshold: f64, kind: Overlap) -> Result<Vec<PartProposal>, FusionError> {
    let mut kept: Vec<(usize, ConvexPolytope)> = Vec::new();
    for i in by_objectness(proposals) {
        let shape = overlap_shape(&proposals[i], kind)?;
        if kept.iter().all(|(_, k)| iou(&shape, k) < threshold) {
            kept.push((i, shape));
        }
    }
    Ok(kept.into_iter().map(|(i, _)| proposals[i].clone()).collect())
}

/// Objectness-weighted average of every proposal field.
///
/// Rotations are averaged as 3x3 matrices and projected back onto SO(3);
/// the axis is renormalized; probability vectors are renormalized to sum
/// to one. The joint type is the weighted vote of the members' types and
/// the shape is taken from the heaviest member.
pub fn weighted_average(members: &[&PartProposal]) -> Result<PartProposal, FusionError> {
    if members.is_empty() {
        return Err(FusionError::EmptyCluster);
    }
    let weights: Vec<f64> = members.iter().map(|m| m.objectness().max(0.0)).collect();
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(FusionError::AllZeroWeights);
    }
    let heaviest = weights
        .iter()
        .enumerate()
        .fold(0, |best, (i, &w)| if w > weights[best] { i } else { best });
    let lead = members[heaviest];

    let mean3 = |f: &dyn Fn(&PartProposal) -> Vec3| {
        members.iter().zip(&weights).map(|(m, w)| f(m) * *w).sum::<Vec3>() / total
    };
    let mean1 = |f: &dyn Fn(&PartProposal) -> f64| members.iter().zip(&weights).map(|(m, w)| f(m) * w).sum::<f64>() / total;
    let mean_vec = |f: &dyn Fn(&PartProposal) -> &[f64]| {
        let len = members.iter().map(|m| f(m).len()).max().unwrap_or(0);
        let mut acc = vec![0.0; len];
        for (m, w) in members.iter().zip(&weights) {
            for (a, v) in acc.iter_mut().zip(f(m)) {
                *a += v * w;
            }
        }
        acc.iter_mut().for_each(|a| *a /= total);
        acc
    };

    let rot_mean: Mat3 = members.iter().zip(&weights).map(|(m, w)| m.pose.rotation * *w).sum::<Mat3>() / total;
    let rotation = project_to_so3(&rot_mean).unwrap_or(lead.pose.rotation);

    let axis = mean3(&|m| m.joint.axis).try_normalize(1e-9).unwrap_or(lead.joint.axis);

    let mut votes = [0.0; 3];
    for (m, w) in members.iter().zip(&weights) {
        votes[m.joint.joint_type.index()] += w;
    }
    let joint_type = JointType::ALL[(1..3).fold(0, |best, i| if votes[i] > votes[best] { i } else { best })];

    let mut joint_type_probs = [0.0; JOINT_CLASSES];
    for (m, w) in members.iter().zip(&weights) {
        for (acc, p) in joint_type_probs.iter_mut().zip(&m.joint_type_probs) {
            *acc += p * w;
        }
    }
    normalize_probs(&mut joint_type_probs);
    let mut category_probs = mean_vec(&|m| &m.category_probs);
    normalize_probs(&mut category_probs);

    let mut out = lead.clone();
    out.pose.rotation = rotation;
    out.pose.center = mean3(&|m| m.pose.center);
    out.pose.size = mean3(&|m| m.pose.size);
    out.joint.joint_type = joint_type;
    out.joint.axis = axis;
    out.joint.origin = mean3(&|m| m.joint.origin);
    out.joint.state_current = mean1(&|m| m.joint.state_current);
    out.joint.state_max = mean1(&|m| m.joint.state_max);
    out.joint_type_probs = joint_type_probs;
    out.category_probs = category_probs;
    out.embedding = mean_vec(&|m| &m.embedding);
    Ok(out)
}

fn normalize_probs(p: &mut [f64]) {
    let s: f64 = p.iter().sum();
    if s > 0.0 {
        p.iter_mut().for_each(|v| *v /= s);
    }
}

/// A group of overlapping proposals and their weighted average.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionCluster {
    pub members: Vec<PartProposal>,
    pub representative: PartProposal,
}

/// Single-pass clustering: proposals are visited in descending objectness
/// and join the first cluster whose current representative overlaps them
/// by more than `threshold`; the representative is re-averaged at once.
pub fn cluster_proposals(proposals: &[PartProposal], kind: Overlap, threshold: f64) -> Result<Vec<FusionCluster>, FusionError> {
    let mut reps: Vec<(PartProposal, ConvexPolytope)> = Vec::new();
    let mut members: Vec<Vec<usize>> = Vec::new();
    for i in by_objectness(proposals) {
        let shape = overlap_shape(&proposals[i], kind)?;
        let hit = reps.iter().position(|(_, rep_shape)| iou(&shape, rep_shape) > threshold);
        match hit {
            Some(n) => {
                members[n].push(i);
                let refs: Vec<&PartProposal> = members[n].iter().map(|&m| &proposals[m]).collect();
                let rep = weighted_average(&refs)?;
                let rep_shape = overlap_shape(&rep, kind)?;
                reps[n] = (rep, rep_shape);
            }
            None => {
                reps.push((proposals[i].clone(), shape));
                members.push(vec![i]);
            }
        }
    }
    Ok(reps
        .into_iter()
        .zip(members)
        .map(|((representative, _), idx)| FusionCluster {
            members: idx.into_iter().map(|m| proposals[m].clone()).collect(),
            representative,
        })
        .collect())
}

/// One fusion pass: cluster, scale each representative's objectness by
/// `|cluster| / t` (clamped to 1) and drop those at or below `tau_scaled`.
pub fn part_fusion(proposals: &[PartProposal], t: usize, cfg: &KpfConfig, kind: Overlap) -> Result<Vec<PartProposal>, FusionError> {
    let t = t.max(1) as f64;
    let clusters = cluster_proposals(proposals, kind, cfg.tau_kiou)?;
    Ok(clusters
        .into_iter()
        .filter_map(|c| {
            let mut rep = c.representative;
            let scaled = rep.objectness() * c.members.len() as f64 / t;
            rep.set_objectness(scaled.min(1.0));
            (rep.objectness() > cfg.tau_scaled).then_some(rep)
        })
        .collect())
}

/// Part fusion with kIoU.
pub fn pf_kiou(proposals: &[PartProposal], t: usize, cfg: &KpfConfig) -> Result<Vec<PartProposal>, FusionError> {
    part_fusion(proposals, t, cfg, Overlap::KIou)
}

/// Per-run filtering: box NMS, objectness threshold, then NMS under `kind`.
pub fn preprocess_run(run: &[PartProposal], cfg: &KpfConfig, kind: Overlap) -> Result<Vec<PartProposal>, FusionError> {
    let boxed = nms(run, cfg.tau_iou, Overlap::BoxIou)?;
    let confident: Vec<PartProposal> = boxed.into_iter().filter(|p| p.objectness() > cfg.tau_obj).collect();
    nms(&confident, cfg.tau_iou, kind)
}

/// Kinematics-aware part fusion over `cfg.n_q` independent runs.
pub fn kpf(runs: &[Vec<PartProposal>], cfg: &KpfConfig) -> Result<Vec<PartProposal>, FusionError> {
    fuse_runs(runs, cfg, Overlap::KIou)
}

/// The fusion driver with a configurable overlap measure; [`kpf`] is
/// `fuse_runs(.., Overlap::KIou)`.
pub fn fuse_runs(runs: &[Vec<PartProposal>], cfg: &KpfConfig, kind: Overlap) -> Result<Vec<PartProposal>, FusionError> {
    cfg.validate()?;
    if runs.is_empty() {
        return Ok(Vec::new());
    }
    if runs.len() != cfg.n_q {
        return Err(FusionError::RunCount { expected: cfg.n_q, got: runs.len() });
    }
    let filtered = exec::map(cfg.execution, runs, |run| preprocess_run(run, cfg, kind));
    let mut current = Vec::new();
    for run in filtered {
        current.extend(run?);
    }
    for count in 0..cfg.tau_count {
        let t = if count == 0 { cfg.n_q } else { 1 };
        let next = part_fusion(&current, t, cfg, kind)?;
        let done = same_proposals(&next, &current, 1e-9);
        current = next;
        if done {
            break;
        }
    }
    current.retain(|p| p.objectness() > cfg.tau_obj_final);
    Ok(current)
}

/// Ablation variants of the test-time pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pipeline {
    /// First run only: box NMS and the objectness filter.
    NmsOnly,
    /// All runs after per-run box NMS and filtering, concatenated.
    Oversampled,
    /// Oversampling plus fusion, with box IoU in place of kIoU.
    FusedBoxIou,
    /// Oversampling plus fusion with kIoU.
    Kpf,
}

pub fn run_pipeline(runs: &[Vec<PartProposal>], cfg: &KpfConfig, pipeline: Pipeline) -> Result<Vec<PartProposal>, FusionError> {
    cfg.validate()?;
    match pipeline {
        Pipeline::NmsOnly => {
            let Some(first) = runs.first() else { return Ok(Vec::new()) };
            let mut out: Vec<PartProposal> =
                nms(first, cfg.tau_iou, Overlap::BoxIou)?.into_iter().filter(|p| p.objectness() > cfg.tau_obj).collect();
            out.retain(|p| p.objectness() > cfg.tau_obj_final);
            Ok(out)
        }
        Pipeline::Oversampled => {
            let mut out = Vec::new();
            for run in runs {
                let boxed = nms(run, cfg.tau_iou, Overlap::BoxIou)?;
                out.extend(boxed.into_iter().filter(|p| p.objectness() > cfg.tau_obj));
            }
            let order = by_objectness(&out);
            Ok(order.into_iter().map(|i| out[i].clone()).collect())
        }
        Pipeline::FusedBoxIou => fuse_runs(runs, cfg, Overlap::BoxIou),
        Pipeline::Kpf => fuse_runs(runs, cfg, Overlap::KIou),
    }
}

/// Every numeric field of a proposal, flattened.
fn numeric_fields(p: &PartProposal) -> Vec<f64> {
    let mut v: Vec<f64> = p.pose.rotation.iter().copied().collect();
    v.extend(p.pose.center.iter());
    v.extend(p.pose.size.iter());
    v.extend(p.joint.axis.iter());
    v.extend(p.joint.origin.iter());
    v.push(p.joint.state_current);
    v.push(p.joint.state_max);
    v.push(p.joint.joint_type.index() as f64);
    v.extend(p.joint_type_probs.iter());
    v.extend(p.category_probs.iter());
    v.extend(p.embedding.iter());
    v
}

/// Equal cardinality and per-field agreement within `tol` after sorting
/// both sides by objectness.
pub fn same_proposals(a: &[PartProposal], b: &[PartProposal], tol: f64) -> bool {
    if a.len() != b.len() {
        return false;
    }
    by_objectness(a).into_iter().zip(by_objectness(b)).all(|(i, j)| {
        let (x, y) = (numeric_fields(&a[i]), numeric_fields(&b[j]));
        x.len() == y.len() && x.iter().zip(&y).all(|(u, v)| (u - v).abs() <= tol)
    })
}

#[allow(dead_code)]
const _: () = assert!(BACKGROUND == 3);
