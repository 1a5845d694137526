//! Detection and reconstruction metrics: point-set F-score and Chamfer
//! distance, grid volumetric IoU, corner distance, all-point interpolated
//! AP, and joint-parameter errors.

use kiddo::{ImmutableKdTree, SquaredEuclidean};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::exec::{self, Execution};
use crate::geometry::cuboid_corners;
use crate::losses::point_line_distance;
use crate::shapespace::{is_inside, AnalyticShape, OccupancyField, PlacedShape, ShapeUnion};
use crate::types::{JointParams, JointType, PartProposal, PoseSize, SceneTruth, Vec3};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("empty point set: {0}")]
    EmptyInput(&'static str),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

/// Nearest-neighbor queries over a fixed point set.
pub struct NearestNeighbors {
    tree: Option<ImmutableKdTree<f64, 3>>,
}

impl NearestNeighbors {
    pub fn new(points: &[Vec3]) -> Self {
        let coords: Vec<[f64; 3]> = points.iter().map(|p| [p.x, p.y, p.z]).collect();
        Self { tree: (!coords.is_empty()).then(|| ImmutableKdTree::new_from_slice(&coords)) }
    }

    /// Distance from `q` to the closest point; infinite for an empty set.
    pub fn distance(&self, q: &Vec3) -> f64 {
        match &self.tree {
            Some(t) => t.nearest_one::<SquaredEuclidean>(&[q.x, q.y, q.z]).distance.sqrt(),
            None => f64::INFINITY,
        }
    }
}

fn nearest_distances(from: &[Vec3], to: &[Vec3], exec: Execution) -> Vec<f64> {
    let index = NearestNeighbors::new(to);
    exec::map(exec, from, |q| index.distance(q))
}

fn check_nonempty(pred: &[Vec3], gt: &[Vec3]) -> Result<(), EvalError> {
    if pred.is_empty() {
        return Err(EvalError::EmptyInput("prediction"));
    }
    if gt.is_empty() {
        return Err(EvalError::EmptyInput("ground truth"));
    }
    Ok(())
}

/// F-score in [0, 100]: harmonic mean of the fraction of predicted points
/// within `dist_tol` of the truth and the fraction of truth points within
/// `dist_tol` of the prediction.
pub fn fscore(pred: &[Vec3], gt: &[Vec3], dist_tol: f64) -> Result<f64, EvalError> {
    fscore_with(pred, gt, dist_tol, Execution::default())
}

pub fn fscore_with(pred: &[Vec3], gt: &[Vec3], dist_tol: f64, exec: Execution) -> Result<f64, EvalError> {
    check_nonempty(pred, gt)?;
    let (p2g, g2p) = (nearest_distances(pred, gt, exec), nearest_distances(gt, pred, exec));
    Ok(fscore_from_distances(&p2g, &g2p, dist_tol))
}

fn fscore_from_distances(p2g: &[f64], g2p: &[f64], dist_tol: f64) -> f64 {
    let frac = |d: &[f64]| d.iter().filter(|&&v| v <= dist_tol).count() as f64 / d.len() as f64;
    let (precision, recall) = (frac(p2g), frac(g2p));
    if precision + recall == 0.0 {
        0.0
    } else {
        100.0 * 2.0 * precision * recall / (precision + recall)
    }
}

/// Symmetric Chamfer distance: the average of the two mean nearest-neighbor
/// L2 distances.
pub fn chamfer(pred: &[Vec3], gt: &[Vec3]) -> Result<f64, EvalError> {
    chamfer_with(pred, gt, Execution::default())
}

pub fn chamfer_with(pred: &[Vec3], gt: &[Vec3], exec: Execution) -> Result<f64, EvalError> {
    check_nonempty(pred, gt)?;
    let (p2g, g2p) = (nearest_distances(pred, gt, exec), nearest_distances(gt, pred, exec));
    Ok(chamfer_from_distances(&p2g, &g2p))
}

fn chamfer_from_distances(p2g: &[f64], g2p: &[f64]) -> f64 {
    let mean = |d: &[f64]| d.iter().sum::<f64>() / d.len() as f64;
    0.5 * (mean(p2g) + mean(g2p))
}

/// IoU of two occupancy fields sampled at the centers of a `resolution^3`
/// grid spanning `bounds`. Cells count as occupied above the isosurface
/// level. Zero when neither field occupies any cell.
pub fn volumetric_iou(
    pred: &dyn OccupancyField,
    gt: &dyn OccupancyField,
    bounds: (Vec3, Vec3),
    resolution: usize,
    exec: Execution,
) -> f64 {
    let (min, max) = bounds;
    let step = (max - min) / resolution as f64;
    let counts = exec::map_range(exec, resolution, |i| {
        let (mut inter, mut union) = (0u64, 0u64);
        for j in 0..resolution {
            for k in 0..resolution {
                let p = min + Vec3::new((i as f64 + 0.5) * step.x, (j as f64 + 0.5) * step.y, (k as f64 + 0.5) * step.z);
                let a = is_inside(pred.occupancy(&p));
                let b = is_inside(gt.occupancy(&p));
                inter += (a && b) as u64;
                union += (a || b) as u64;
            }
        }
        (inter, union)
    });
    let (inter, union) = counts.iter().fold((0, 0), |(a, b), (c, d)| (a + c, b + d));
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Mean distance between corresponding corners over the truth diameter.
pub fn corner_distance(pred: &PoseSize, gt: &PoseSize) -> f64 {
    let (a, b) = (cuboid_corners(pred), cuboid_corners(gt));
    let mean = a.iter().zip(b.iter()).map(|(p, q)| (p - q).norm()).sum::<f64>() / 8.0;
    mean / gt.diameter()
}

/// Criterion deciding whether a prediction may be matched to a truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "metric", content = "threshold", rename_all = "snake_case")]
pub enum Matcher {
    /// Corner distance at most the threshold.
    CornerDistance(f64),
    /// F-score (0 to 100) at least the threshold.
    FScore(f64),
    /// Normalized Chamfer distance at most the threshold.
    Chamfer(f64),
    /// Volumetric IoU at least the threshold.
    VolumetricIou(f64),
}

impl Matcher {
    pub fn threshold(&self) -> f64 {
        match *self {
            Matcher::CornerDistance(t) | Matcher::FScore(t) | Matcher::Chamfer(t) | Matcher::VolumetricIou(t) => t,
        }
    }

    fn lower_is_better(&self) -> bool {
        matches!(self, Matcher::CornerDistance(_) | Matcher::Chamfer(_))
    }

    pub fn passes(&self, value: f64) -> bool {
        if self.lower_is_better() {
            value <= self.threshold()
        } else {
            value >= self.threshold()
        }
    }

    /// Whether `a` is a better match than `b`.
    fn better(&self, a: f64, b: f64) -> bool {
        if self.lower_is_better() {
            a < b
        } else {
            a > b
        }
    }
}

/// Pairwise metric values for one scene.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricTable {
    /// Confidence of each prediction.
    pub confidences: Vec<f64>,
    pub n_truth: usize,
    /// `values[p][g]`: metric between prediction `p` and truth `g`.
    pub values: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ApResult {
    pub threshold: f64,
    pub ap: f64,
    /// `tp / (tp + fp)`; 0 when there are no predictions.
    pub precision: f64,
    pub recall: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub no_predictions: bool,
}

/// Greedy matching in descending confidence; each truth is used at most
/// once and goes to the passing candidate with the best metric value.
/// Returns, per prediction, the matched truth.
pub fn greedy_match(table: &MetricTable, matcher: Matcher) -> Vec<Option<usize>> {
    let mut order: Vec<usize> = (0..table.confidences.len()).collect();
    order.sort_by(|&a, &b| table.confidences[b].total_cmp(&table.confidences[a]));
    let mut used = vec![false; table.n_truth];
    let mut out = vec![None; table.confidences.len()];
    for p in order {
        let mut best: Option<usize> = None;
        for g in 0..table.n_truth {
            let v = table.values[p][g];
            if used[g] || !matcher.passes(v) {
                continue;
            }
            if best.is_none_or(|b| matcher.better(v, table.values[p][b])) {
                best = Some(g);
            }
        }
        if let Some(g) = best {
            used[g] = true;
        }
        out[p] = best;
    }
    out
}

/// Area under the precision-recall curve with all-point interpolation.
/// `scored` holds `(confidence, is_true_positive)` pairs.
pub fn average_precision(scored: &[(f64, bool)], n_truth: usize) -> f64 {
    if n_truth == 0 || scored.is_empty() {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[b].0.total_cmp(&scored[a].0));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut recall = vec![0.0];
    let mut precision = vec![0.0];
    for i in order {
        if scored[i].1 {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / n_truth as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    recall.push(1.0);
    precision.push(0.0);
    for i in (0..precision.len() - 1).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    (1..recall.len()).map(|i| (recall[i] - recall[i - 1]) * precision[i]).sum()
}

/// AP over a set of scenes under one matching criterion.
pub fn detection_map(tables: &[MetricTable], matcher: Matcher) -> ApResult {
    let mut scored = Vec::new();
    let mut n_truth = 0;
    for t in tables {
        n_truth += t.n_truth;
        let matches = greedy_match(t, matcher);
        scored.extend(t.confidences.iter().zip(&matches).map(|(&c, m)| (c, m.is_some())));
    }
    let tp = scored.iter().filter(|s| s.1).count();
    let fp = scored.len() - tp;
    ApResult {
        threshold: matcher.threshold(),
        ap: average_precision(&scored, n_truth),
        precision: if scored.is_empty() { 0.0 } else { tp as f64 / scored.len() as f64 },
        recall: if n_truth == 0 { 0.0 } else { tp as f64 / n_truth as f64 },
        tp,
        fp,
        fn_: n_truth - tp,
        no_predictions: scored.is_empty(),
    }
}

/// Corner-distance table for one scene, with objectness as confidence.
pub fn corner_table(preds: &[PartProposal], truth: &SceneTruth) -> MetricTable {
    MetricTable {
        confidences: preds.iter().map(PartProposal::objectness).collect(),
        n_truth: truth.parts.len(),
        values: preds.iter().map(|p| truth.parts.iter().map(|t| corner_distance(&p.pose, &t.pose)).collect()).collect(),
    }
}

/// Errors of one predicted joint against its truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointError {
    pub joint_type: JointType,
    /// Degrees for revolute joints, centimeters for prismatic ones.
    pub state: f64,
    /// Axis angle error in degrees.
    pub orientation: f64,
    /// Distance between the axis lines in centimeters (revolute only).
    pub min_distance: Option<f64>,
}

/// Distance between the lines `(p1, d1)` and `(p2, d2)`.
pub fn line_distance(p1: &Vec3, d1: &Vec3, p2: &Vec3, d2: &Vec3) -> f64 {
    let n = d1.cross(d2);
    let len = n.norm();
    if len < 1e-9 * d1.norm().max(1e-300) * d2.norm().max(1e-300) {
        point_line_distance(p1, p2, d2)
    } else {
        (p1 - p2).dot(&n).abs() / len
    }
}

/// `None` for fixed truths. With `fold_axis`, antipodal axes count as equal.
pub fn joint_error(pred: &JointParams, truth: &JointParams, fold_axis: bool) -> Option<JointError> {
    let state_scale = match truth.joint_type {
        JointType::Fixed => return None,
        JointType::Revolute => 180.0 / std::f64::consts::PI,
        JointType::Prismatic => 100.0,
    };
    let cos = pred.axis.normalize().dot(&truth.axis.normalize()).clamp(-1.0, 1.0);
    let mut orientation = cos.acos().to_degrees();
    if fold_axis {
        orientation = orientation.min(180.0 - orientation);
    }
    let min_distance = (truth.joint_type == JointType::Revolute)
        .then(|| 100.0 * line_distance(&pred.origin, &pred.axis, &truth.origin, &truth.axis));
    Some(JointError {
        joint_type: truth.joint_type,
        state: (pred.state_current - truth.state_current).abs() * state_scale,
        orientation,
        min_distance,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct JointTypeErrors {
    pub count: usize,
    pub state: f64,
    pub orientation: f64,
    /// Revolute only.
    pub min_distance: Option<f64>,
}

/// Mean joint errors per articulated joint type.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct JointErrorSummary {
    pub revolute: JointTypeErrors,
    pub prismatic: JointTypeErrors,
}

/// Averages [`joint_error`] over matched pairs that share the true joint
/// type; other pairs are skipped.
pub fn joint_errors(pairs: &[(&JointParams, &JointParams)], fold_axis: bool) -> JointErrorSummary {
    let mut sums = [(0usize, 0.0, 0.0, 0.0); 2];
    for (pred, truth) in pairs {
        if pred.joint_type != truth.joint_type {
            continue;
        }
        let Some(e) = joint_error(pred, truth, fold_axis) else { continue };
        let slot = &mut sums[(e.joint_type == JointType::Prismatic) as usize];
        slot.0 += 1;
        slot.1 += e.state;
        slot.2 += e.orientation;
        slot.3 += e.min_distance.unwrap_or(0.0);
    }
    let mean = |(n, s, o, m): (usize, f64, f64, f64), revolute: bool| {
        if n == 0 {
            return JointTypeErrors { min_distance: revolute.then_some(0.0), ..Default::default() };
        }
        let k = n as f64;
        JointTypeErrors { count: n, state: s / k, orientation: o / k, min_distance: revolute.then_some(m / k) }
    };
    JointErrorSummary { revolute: mean(sums[0], true), prismatic: mean(sums[1], false) }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub corner_thresholds: Vec<f64>,
    /// F-score thresholds on the 0 to 100 scale.
    pub fscore_thresholds: Vec<f64>,
    /// Chamfer thresholds as fractions of the truth instance diagonal.
    pub chamfer_thresholds: Vec<f64>,
    pub iou_thresholds: Vec<f64>,
    /// F-score distance tolerance as a fraction of the truth instance diagonal.
    pub fscore_tol_fraction: f64,
    pub surface_points: usize,
    pub grid_resolution: usize,
    /// Corner-distance threshold defining the pairs used for joint errors.
    pub joint_match_threshold: f64,
    pub fold_axis: bool,
    pub seed: u64,
    pub execution: Execution,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            corner_thresholds: vec![0.1, 0.3, 0.5, 0.7, 0.9],
            fscore_thresholds: vec![80.0, 90.0],
            chamfer_thresholds: vec![0.05, 0.01],
            iou_thresholds: vec![0.25, 0.5],
            fscore_tol_fraction: 0.01,
            surface_points: 32768,
            grid_resolution: 64,
            joint_match_threshold: 0.7,
            fold_axis: false,
            seed: 0,
            execution: Execution::default(),
        }
    }
}

/// Predictions for one scene together with their instance grouping.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneEval {
    pub predictions: Vec<PartProposal>,
    /// Part indices of each predicted instance.
    pub groups: Vec<Vec<usize>>,
    pub truth: SceneTruth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetadata {
    pub fscore_tol_fraction: f64,
    pub chamfer_normalization: String,
    pub surface_points: usize,
    pub grid_resolution: usize,
    pub joint_match_threshold: f64,
    pub fold_axis: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_scenes: usize,
    pub corner: Vec<ApResult>,
    pub fscore: Vec<ApResult>,
    pub chamfer: Vec<ApResult>,
    pub iou: Vec<ApResult>,
    pub joints: JointErrorSummary,
    pub metadata: EvalMetadata,
}

fn shape_or_solid(shape: &Option<AnalyticShape>) -> AnalyticShape {
    shape.clone().unwrap_or(AnalyticShape::Solid)
}

fn poses_bounds<'a>(poses: impl Iterator<Item = &'a PoseSize>) -> (Vec3, Vec3) {
    let mut min = Vec3::repeat(f64::INFINITY);
    let mut max = Vec3::repeat(f64::NEG_INFINITY);
    for c in poses.flat_map(cuboid_corners) {
        min = min.inf(&c);
        max = max.sup(&c);
    }
    (min, max)
}

struct InstanceShape {
    union: ShapeUnion,
    bounds: (Vec3, Vec3),
    points: Vec<Vec3>,
}

impl InstanceShape {
    fn new(union: ShapeUnion, count: usize, seed: u64) -> Self {
        let bounds = poses_bounds(union.0.iter().map(|s| &s.pose));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points = union.sample_surface(count, &mut rng);
        Self { union, bounds, points }
    }

    fn overlaps(&self, other: &InstanceShape) -> bool {
        (0..3).all(|i| self.bounds.0[i] <= other.bounds.1[i] && other.bounds.0[i] <= self.bounds.1[i])
    }
}

struct ShapeTables {
    fscore: MetricTable,
    chamfer: MetricTable,
    iou: MetricTable,
}

fn shape_tables(scene_index: usize, scene: &SceneEval, cfg: &EvalConfig) -> ShapeTables {
    let seed = |kind: u64, i: usize| cfg.seed ^ ((scene_index as u64) << 32) ^ (kind << 24) ^ i as u64;
    let preds: Vec<InstanceShape> = scene
        .groups
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let union = ShapeUnion(
                g.iter()
                    .map(|&m| {
                        let p = &scene.predictions[m];
                        PlacedShape::new(shape_or_solid(&p.shape), p.pose.clone())
                    })
                    .collect(),
            );
            InstanceShape::new(union, cfg.surface_points, seed(1, i))
        })
        .collect();
    let truths: Vec<(InstanceShape, f64)> = scene
        .truth
        .instance_members()
        .iter()
        .enumerate()
        .map(|(i, members)| {
            let union = ShapeUnion(
                members
                    .iter()
                    .map(|&m| {
                        let t = &scene.truth.parts[m];
                        PlacedShape::new(t.shape.clone(), t.pose.clone())
                    })
                    .collect(),
            );
            let shape = InstanceShape::new(union, cfg.surface_points, seed(2, i));
            let diag = (shape.bounds.1 - shape.bounds.0).norm();
            (shape, diag)
        })
        .collect();
    let confidences: Vec<f64> = scene
        .groups
        .iter()
        .map(|g| g.iter().map(|&m| scene.predictions[m].objectness()).sum::<f64>() / g.len().max(1) as f64)
        .collect();

    let n = truths.len();
    let mut f = vec![vec![0.0; n]; preds.len()];
    let mut c = vec![vec![f64::INFINITY; n]; preds.len()];
    let mut v = vec![vec![0.0; n]; preds.len()];
    for (p, pred) in preds.iter().enumerate() {
        for (g, (gt, diag)) in truths.iter().enumerate() {
            if !pred.overlaps(gt) || pred.points.is_empty() || gt.points.is_empty() {
                continue;
            }
            let p2g = nearest_distances(&pred.points, &gt.points, Execution::Sequential);
            let g2p = nearest_distances(&gt.points, &pred.points, Execution::Sequential);
            f[p][g] = fscore_from_distances(&p2g, &g2p, cfg.fscore_tol_fraction * diag);
            c[p][g] = chamfer_from_distances(&p2g, &g2p) / diag;
            let bounds = (pred.bounds.0.inf(&gt.bounds.0), pred.bounds.1.sup(&gt.bounds.1));
            v[p][g] = volumetric_iou(&pred.union, &gt.union, bounds, cfg.grid_resolution, Execution::Sequential);
        }
    }
    let table = |values| MetricTable { confidences: confidences.clone(), n_truth: n, values };
    ShapeTables { fscore: table(f), chamfer: table(c), iou: table(v) }
}

/// Evaluates fused and grouped predictions against ground truth. Scenes are
/// processed in parallel according to `cfg.execution`.
pub fn evaluate(scenes: &[SceneEval], cfg: &EvalConfig) -> Result<EvalReport, EvalError> {
    for (i, s) in scenes.iter().enumerate() {
        if let Some(&bad) = s.groups.iter().flatten().find(|&&m| m >= s.predictions.len()) {
            return Err(EvalError::Shape(format!("scene {i}: group member {bad} out of range")));
        }
    }
    let corner_tables: Vec<MetricTable> = scenes.iter().map(|s| corner_table(&s.predictions, &s.truth)).collect();
    let indexed: Vec<(usize, &SceneEval)> = scenes.iter().enumerate().collect();
    let shapes = exec::map(cfg.execution, &indexed, |(i, s)| shape_tables(*i, s, cfg));

    let run = |tables: &[MetricTable], make: fn(f64) -> Matcher, thresholds: &[f64]| -> Vec<ApResult> {
        thresholds.iter().map(|&t| detection_map(tables, make(t))).collect()
    };
    let fscore_tables: Vec<MetricTable> = shapes.iter().map(|s| s.fscore.clone()).collect();
    let chamfer_tables: Vec<MetricTable> = shapes.iter().map(|s| s.chamfer.clone()).collect();
    let iou_tables: Vec<MetricTable> = shapes.iter().map(|s| s.iou.clone()).collect();

    let mut pairs = Vec::new();
    for (scene, table) in scenes.iter().zip(&corner_tables) {
        for (p, m) in greedy_match(table, Matcher::CornerDistance(cfg.joint_match_threshold)).iter().enumerate() {
            if let Some(g) = m {
                pairs.push((&scene.predictions[p].joint, &scene.truth.parts[*g].joint));
            }
        }
    }

    Ok(EvalReport {
        n_scenes: scenes.len(),
        corner: run(&corner_tables, Matcher::CornerDistance, &cfg.corner_thresholds),
        fscore: run(&fscore_tables, Matcher::FScore, &cfg.fscore_thresholds),
        chamfer: run(&chamfer_tables, Matcher::Chamfer, &cfg.chamfer_thresholds),
        iou: run(&iou_tables, Matcher::VolumetricIou, &cfg.iou_thresholds),
        joints: joint_errors(&pairs, cfg.fold_axis),
        metadata: EvalMetadata {
            fscore_tol_fraction: cfg.fscore_tol_fraction,
            chamfer_normalization: "truth instance bounding-box diagonal".into(),
            surface_points: cfg.surface_points,
            grid_resolution: cfg.grid_resolution,
            joint_match_threshold: cfg.joint_match_threshold,
            fold_axis: cfg.fold_axis,
        },
    })
}
