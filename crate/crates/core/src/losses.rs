//! Set matching between predicted and ground-truth parts, and reference
//! values of the part and instance losses.

use serde::{Deserialize, Serialize};

use crate::geometry::cuboid_corners;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::shapespace::{
    denormalize_point, sample_occupancy_points, AnalyticShape, OccupancyField, OccupancySample, PlacedShape,
};
use crate::types::{JointType, Mat3, PartProposal, PoseSize, TruthPart, Vec3, BACKGROUND};

const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LossError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite cost at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchCostWeights {
    /// Corner L1.
    pub lambda1: f64,
    /// Center L1.
    pub lambda2: f64,
    /// Probability of the true joint type (subtracted).
    pub lambda3: f64,
    /// Foreground probability.
    pub lambda4: f64,
}

impl Default for MatchCostWeights {
    fn default() -> Self {
        Self { lambda1: 8.0, lambda2: 10.0, lambda3: 1.0, lambda4: 5.0 }
    }
}

/// Sum over the eight ordered corners of the coordinate-wise L1 distance.
pub fn corner_l1(a: &PoseSize, b: &PoseSize) -> f64 {
    cuboid_corners(a).iter().zip(cuboid_corners(b).iter()).map(|(p, q)| (p - q).lp_norm(1)).sum()
}

pub fn match_cost(pred: &PartProposal, truth: &TruthPart, w: &MatchCostWeights) -> f64 {
    let y_true = pred.joint_type_probs[truth.joint.joint_type.index()];
    let foreground = 1.0 - pred.joint_type_probs[BACKGROUND];
    w.lambda1 * corner_l1(&pred.pose, &truth.pose) + w.lambda2 * (pred.pose.center - truth.pose.center).lp_norm(1)
        - w.lambda3 * y_true
        + w.lambda4 * foreground
}

/// Cost matrix with one row per prediction and one column per truth.
pub fn cost_matrix(preds: &[PartProposal], truths: &[TruthPart], w: &MatchCostWeights) -> Vec<Vec<f64>> {
    preds.iter().map(|p| truths.iter().map(|t| match_cost(p, t, w)).collect()).collect()
}

/// Minimum-cost assignment of every truth column to a distinct prediction
/// row. `costs` is `N_pred x N_gt`; the result holds, for each truth, the
/// index of its prediction.
///
/// Shortest augmenting paths with row/column potentials. Columns are
/// scanned in ascending prediction index with strict comparisons, so ties
/// resolve the same way on every run.
pub fn hungarian_match(costs: &[Vec<f64>]) -> Result<Vec<usize>, LossError> {
    let n_pred = costs.len();
    let n_gt = costs.first().map_or(0, Vec::len);
    if let Some(r) = costs.iter().position(|r| r.len() != n_gt) {
        return Err(LossError::Shape(format!("row {r} has {} columns, expected {n_gt}", costs[r].len())));
    }
    if n_pred < n_gt {
        return Err(LossError::Shape(format!("{n_pred} predictions for {n_gt} truths")));
    }
    for (r, row) in costs.iter().enumerate() {
        if let Some(c) = row.iter().position(|v| !v.is_finite()) {
            return Err(LossError::NonFinite { row: r, col: c });
        }
    }
    if n_gt == 0 {
        return Ok(Vec::new());
    }

    // Rows are truths (1-based), columns are predictions (1-based); index 0
    // is the virtual start column.
    let (n, m) = (n_gt, n_pred);
    let a = |i: usize, j: usize| costs[j - 1][i - 1];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = a(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=m {
        if owner[j] != 0 {
            assignment[owner[j] - 1] = j - 1;
        }
    }
    Ok(assignment)
}

/// Total cost of an assignment returned by [`hungarian_match`].
pub fn assignment_cost(costs: &[Vec<f64>], assignment: &[usize]) -> f64 {
    assignment.iter().enumerate().map(|(g, &p)| costs[p][g]).sum()
}

/// The nine terms of the per-part loss.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PartLossBreakdown {
    /// Corner L1 with only R, only c and only s predicted, summed.
    pub corner: f64,
    /// `||I - R^T R_gt||_F^2`.
    pub rotation: f64,
    /// Mean binary cross-entropy over the occupancy samples.
    pub occupancy: f64,
    pub state_max: f64,
    pub state_current: f64,
    /// `-a . a_gt`, in [-1, 1].
    pub axis: f64,
    /// Distance from the predicted origin to the true axis line.
    pub origin: f64,
    pub joint_type_ce: f64,
    pub category_ce: f64,
}

impl PartLossBreakdown {
    pub fn total(&self) -> f64 {
        self.unrefined_total() + self.occupancy + self.joint_type_ce + self.category_ce
    }

    /// The loss applied to unrefined proposals: everything except the
    /// occupancy, joint-type and category terms.
    pub fn unrefined_total(&self) -> f64 {
        self.corner + self.rotation + self.state_max + self.state_current + self.axis + self.origin
    }

    pub fn terms(&self) -> [(&'static str, f64); 9] {
        [
            ("corner", self.corner),
            ("rotation", self.rotation),
            ("occupancy", self.occupancy),
            ("state_max", self.state_max),
            ("state_current", self.state_current),
            ("axis", self.axis),
            ("origin", self.origin),
            ("joint_type_ce", self.joint_type_ce),
            ("category_ce", self.category_ce),
        ]
    }
}

/// Distance from `p` to the line through `origin` along `axis`.
pub fn point_line_distance(p: &Vec3, origin: &Vec3, axis: &Vec3) -> f64 {
    let d = p - origin;
    match axis.try_normalize(1e-12) {
        Some(a) => (d - a * d.dot(&a)).norm(),
        None => d.norm(),
    }
}

fn clamped_ln(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP).ln()
}

pub fn binary_cross_entropy(samples: &[OccupancySample]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let sum: f64 = samples
        .iter()
        .map(|s| if s.truth { -clamped_ln(s.predicted) } else { -clamped_ln(1.0 - s.predicted) })
        .sum();
    sum / samples.len() as f64
}

/// Loss between a prediction and its matched truth part.
///
/// State and axis terms are only charged when the true joint is
/// articulated, and the origin term only for revolute truths.
pub fn part_loss(pred: &PartProposal, truth: &TruthPart, occ: &[OccupancySample]) -> PartLossBreakdown {
    let gt = &truth.pose;
    let only_rotation = PoseSize::new(pred.pose.rotation, gt.center, gt.size);
    let only_center = PoseSize::new(gt.rotation, pred.pose.center, gt.size);
    let only_size = PoseSize::new(gt.rotation, gt.center, pred.pose.size);
    let corner = corner_l1(&only_rotation, gt) + corner_l1(&only_center, gt) + corner_l1(&only_size, gt);
    let rotation = (Mat3::identity() - pred.pose.rotation.transpose() * gt.rotation).norm_squared();

    let articulated = truth.joint.joint_type != JointType::Fixed;
    let (state_max, state_current, axis) = if articulated {
        (
            (pred.joint.state_max - truth.joint.state_max).abs(),
            (pred.joint.state_current - truth.joint.state_current).abs(),
            -pred.joint.axis.dot(&truth.joint.axis),
        )
    } else {
        (0.0, 0.0, 0.0)
    };
    let origin = if truth.joint.joint_type == JointType::Revolute {
        point_line_distance(&pred.joint.origin, &truth.joint.origin, &truth.joint.axis)
    } else {
        0.0
    };
    let joint_type_ce = -clamped_ln(pred.joint_type_probs[truth.joint.joint_type.index()]);
    let category_ce = -clamped_ln(pred.category_probs.get(truth.category).copied().unwrap_or(0.0));

    PartLossBreakdown {
        corner,
        rotation,
        occupancy: binary_cross_entropy(occ),
        state_max,
        state_current,
        axis,
        origin,
        joint_type_ce,
        category_ce,
    }
}

/// [`part_loss`] with `count` occupancy queries drawn in the truth's
/// normalized frame. The prediction's occupancy at a query is its own shape
/// evaluated after mapping the query through both poses (solid when the
/// prediction carries no shape).
pub fn sampled_part_loss(pred: &PartProposal, truth: &TruthPart, count: usize, seed: u64) -> PartLossBreakdown {
    let placed = PlacedShape::new(pred.shape.clone().unwrap_or(AnalyticShape::Solid), pred.pose.clone());
    let predicted = |x: &Vec3| placed.occupancy(&denormalize_point(x, &truth.pose));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let occ = sample_occupancy_points(&truth.shape, &predicted, count, &mut rng);
    part_loss(pred, truth, &occ)
}

/// Grouping threshold used at inference for a given training margin: the
/// midpoint of the intra margin `tau'` and the inter margin `3 tau'`.
pub fn tau_z(tau_z_prime: f64) -> f64 {
    2.0 * tau_z_prime
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> Option<f64> {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return None;
    }
    Some(max + values.map(|v| (v - max).exp()).sum::<f64>().ln())
}

/// Triplet-style loss on part embeddings.
///
/// The intra term pulls parts of one instance within `tau_z_prime` of each
/// other; the inter term pushes the soft maximum distance to same-instance
/// parts at least `3 * tau_z_prime` below the soft minimum distance to other
/// instances. A part alone in its instance contributes a soft maximum of 0;
/// when every part shares one instance the inter term is skipped.
pub fn instance_loss(embeddings: &[Vec<f64>], instance_ids: &[usize], tau_z_prime: f64, lambda_intra: f64) -> Result<f64, LossError> {
    let n = embeddings.len();
    if instance_ids.len() != n {
        return Err(LossError::Shape(format!("{n} embeddings, {} instance ids", instance_ids.len())));
    }
    if n < 2 {
        return Err(LossError::DegenerateInput(format!("{n} parts, need at least 2")));
    }
    let dist = |i: usize, j: usize| -> f64 {
        embeddings[i].iter().zip(&embeddings[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    };
    let eta: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| dist(i, j)).collect()).collect();

    let mut intra = 0.0;
    let mut inter = 0.0;
    for i in 0..n {
        let same = (0..n).filter(|&j| j != i && instance_ids[j] == instance_ids[i]);
        let other = (0..n).filter(|&j| instance_ids[j] != instance_ids[i]);
        let group_size = 1 + same.clone().count();
        intra += same.clone().map(|j| (eta[i][j] - tau_z_prime).max(0.0)).sum::<f64>() / group_size as f64;
        let soft_max = log_sum_exp(same.map(|j| eta[i][j])).unwrap_or(0.0);
        if let Some(neg_soft_min) = log_sum_exp(other.map(|j| -eta[i][j])) {
            inter += (soft_max + neg_soft_min + 3.0 * tau_z_prime).max(0.0);
        }
    }
    Ok(lambda_intra * intra + inter / n as f64)
}

/// Sum over decoder layers of the refined part loss, the unrefined part
/// loss and the instance loss.
pub fn total_loss(part: &[f64], unrefined: &[f64], instance: &[f64]) -> Result<f64, LossError> {
    if part.len() != unrefined.len() || part.len() != instance.len() {
        return Err(LossError::Shape(format!(
            "layer counts differ: {} / {} / {}",
            part.len(),
            unrefined.len(),
            instance.len()
        )));
    }
    Ok(part.iter().zip(unrefined).zip(instance).map(|((a, b), c)| a + b + c).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::axis_angle;
    use crate::types::JointParams;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn truth() -> TruthPart {
        TruthPart {
            id: 0,
            pose: PoseSize::axis_aligned(Vec3::new(0.3, 0.0, 0.5), Vec3::new(0.6, 0.02, 1.0)),
            joint: JointParams::revolute(Vec3::z(), Vec3::new(0.0, 0.0, 0.0), 0.3, 2.0),
            category: 1,
            instance: 0,
            shape: AnalyticShape::Solid,
            embedding: vec![0.0; 4],
        }
    }

    #[test]
    fn perfect_match_cost() {
        let t = truth();
        let p = PartProposal::from_truth(&t, 3);
        assert!((match_cost(&p, &t, &MatchCostWeights::default()) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn center_offset_cost() {
        let t = truth();
        let mut p = PartProposal::from_truth(&t, 3);
        p.pose.center.x += 0.1;
        // Every corner moves 0.1: 8 * 0.8 from corners plus 10 * 0.1 from the center.
        assert!((match_cost(&p, &t, &MatchCostWeights::default()) - 11.4).abs() < 1e-12);
    }

    #[test]
    fn background_cost_is_linear() {
        let t = truth();
        let p = PartProposal::from_truth(&t, 3);
        let mut bg = p.clone();
        bg.joint_type_probs = [0.0, 0.0, 0.0, 1.0];
        let mut fg = p.clone();
        fg.joint_type_probs = [0.0, 0.0, 1.0, 0.0];
        let w = MatchCostWeights::default();
        assert!((match_cost(&fg, &t, &w) - match_cost(&bg, &t, &w) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn hungarian_small_cases() {
        assert_eq!(hungarian_match(&[vec![3.0]]).unwrap(), vec![0]);
        let m = vec![vec![1.0, 9.0, 9.0], vec![9.0, 1.0, 9.0], vec![9.0, 9.0, 1.0]];
        assert_eq!(hungarian_match(&m).unwrap(), vec![0, 1, 2]);
        assert!(matches!(hungarian_match(&[vec![1.0, 2.0]]), Err(LossError::Shape(_))));
        assert!(matches!(hungarian_match(&[vec![f64::NAN]]), Err(LossError::NonFinite { .. })));
        assert!(hungarian_match(&[]).unwrap().is_empty());
    }

    #[test]
    fn hungarian_rectangular_beats_greedy() {
        // Greedy would give truth 0 prediction 0 (cost 1) and then pay 10.
        let m = vec![vec![1.0, 2.0], vec![2.0, 10.0], vec![5.0, 10.0]];
        let a = hungarian_match(&m).unwrap();
        assert_eq!(a, vec![1, 0]);
        assert_eq!(assignment_cost(&m, &a), 4.0);
    }

    #[test]
    fn hungarian_is_deterministic_on_ties() {
        let m = vec![vec![1.0; 3]; 4];
        let first = hungarian_match(&m).unwrap();
        for _ in 0..5 {
            assert_eq!(hungarian_match(&m).unwrap(), first);
        }
        let mut sorted = first.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 3);
    }

    #[test]
    fn perfect_part_loss() {
        let t = truth();
        let p = PartProposal::from_truth(&t, 3);
        let occ = vec![
            OccupancySample::new(Vec3::zeros(), 1.0, true),
            OccupancySample::new(Vec3::repeat(0.6), 0.0, false),
        ];
        let l = part_loss(&p, &t, &occ);
        assert_eq!(l.corner, 0.0);
        assert!(l.rotation.abs() < 1e-12);
        assert!(l.occupancy < 1e-6 && l.joint_type_ce < 1e-6 && l.category_ce < 1e-6);
        assert_eq!(l.axis, -1.0);
        assert!(l.total() <= 1e-6);
    }

    #[test]
    fn sampled_loss_of_exact_prediction() {
        let t = truth();
        let p = PartProposal::from_truth(&t, 3);
        let l = sampled_part_loss(&p, &t, 128, 4);
        assert!(l.occupancy < 1e-6);
        assert_eq!(l, sampled_part_loss(&p, &t, 128, 4));
    }

    #[test]
    fn half_turn_rotation_term() {
        let t = truth();
        let mut p = PartProposal::from_truth(&t, 3);
        p.pose.rotation = axis_angle(&Vec3::z(), std::f64::consts::PI);
        let l = part_loss(&p, &t, &[]);
        assert!((l.rotation - 8.0).abs() < 1e-12);
    }

    #[test]
    fn origin_offset_term() {
        let t = truth();
        let mut p = PartProposal::from_truth(&t, 3);
        p.joint.origin += Vec3::new(0.0, 0.3, 0.7);
        let l = part_loss(&p, &t, &[]);
        assert!((l.origin - 0.3).abs() < 1e-12);
    }

    #[test]
    fn tau_z_doubles() {
        assert_eq!(tau_z(0.5), 1.0);
        assert_eq!(tau_z(1.0), 2.0);
        assert_eq!(tau_z(0.25), 0.5);
    }

    #[test]
    fn instance_loss_hand_cases() {
        let tp = 0.2;
        let e = vec![vec![0.0, 0.0], vec![0.0, 0.0], vec![10.0 * tp, 0.0]];
        // Part 2 is alone; its soft max is 0 and the soft min to the others is 10 tau'.
        let v = instance_loss(&e, &[0, 0, 1], tp, 0.1).unwrap();
        assert!(v.abs() < 1e-12, "{v}");

        let side = 0.3;
        let h = side * 3f64.sqrt() / 2.0;
        let tri = vec![vec![0.0, 0.0], vec![side, 0.0], vec![side / 2.0, h]];
        let v = instance_loss(&tri, &[7, 7, 7], side, 0.1).unwrap();
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn instance_loss_errors() {
        assert!(matches!(instance_loss(&vec![vec![0.0]; 3], &[0, 1], 0.1, 0.1), Err(LossError::Shape(_))));
        assert!(matches!(instance_loss(&[vec![0.0]], &[0], 0.1, 0.1), Err(LossError::DegenerateInput(_))));
    }

    #[test]
    fn instance_loss_depends_only_on_distances() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let e: Vec<Vec<f64>> = (0..8).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let ids = [0, 0, 1, 1, 1, 2, 2, 0];
        let base = instance_loss(&e, &ids, 0.3, 0.1).unwrap();
        let r = axis_angle(&Vec3::new(1.0, -2.0, 0.5), 0.8);
        let rotated: Vec<Vec<f64>> = e
            .iter()
            .map(|v| {
                let w = r * Vec3::new(v[0], v[1], v[2]) + Vec3::new(3.0, 1.0, -2.0);
                vec![w.x, w.y, w.z]
            })
            .collect();
        assert!((instance_loss(&rotated, &ids, 0.3, 0.1).unwrap() - base).abs() < 1e-9);
        let relabeled = ids.map(|i| [5, 9, 1][i]);
        assert!((instance_loss(&e, &relabeled, 0.3, 0.1).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn total_loss_sums_layers() {
        assert_eq!(total_loss(&[0.0], &[0.0], &[0.0]).unwrap(), 0.0);
        let one = total_loss(&[1.5], &[0.25], &[2.0]).unwrap();
        assert_eq!(total_loss(&[1.5, 1.5], &[0.25, 0.25], &[2.0, 2.0]).unwrap(), 2.0 * one);
        assert!(total_loss(&[1.0], &[], &[1.0]).is_err());
    }
}
