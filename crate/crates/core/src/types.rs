//! Value types shared by every module: part pose and size, joint parameters,
//! part proposals and ground-truth scenes.

use nalgebra::{Matrix3, Vector3};

use crate::shapespace::AnalyticShape;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Index of the background class in a joint-type probability vector.
pub const BACKGROUND: usize = 3;
/// Number of entries in a joint-type probability vector.
pub const JOINT_CLASSES: usize = 4;
pub const DEFAULT_EMBEDDING_DIM: usize = 32;

const ROTATION_TOL: f64 = 1e-6;
const AXIS_TOL: f64 = 1e-9;
const PROB_TOL: f64 = 1e-6;
const STATE_TOL: f64 = 1e-9;

/// Oriented box: rotation, center and full side lengths.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSize {
    pub rotation: Mat3,
    pub center: Vec3,
    /// Full side lengths along the box's local x, y and z axes.
    pub size: Vec3,
}

impl PoseSize {
    pub fn new(rotation: Mat3, center: Vec3, size: Vec3) -> Self {
        Self { rotation, center, size }
    }

    pub fn axis_aligned(center: Vec3, size: Vec3) -> Self {
        Self::new(Mat3::identity(), center, size)
    }

    pub fn volume(&self) -> f64 {
        self.size.x * self.size.y * self.size.z
    }

    /// Length of the box diagonal.
    pub fn diameter(&self) -> f64 {
        self.size.norm()
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !self.rotation.iter().chain(self.center.iter()).chain(self.size.iter()).all(|v| v.is_finite()) {
            out.push("non-finite pose value".to_string());
            return out;
        }
        let ortho = (self.rotation.transpose() * self.rotation - Mat3::identity()).norm();
        if ortho > ROTATION_TOL {
            out.push("rotation not orthonormal".to_string());
        }
        if (self.rotation.determinant() - 1.0).abs() > ROTATION_TOL {
            out.push("rotation determinant not +1".to_string());
        }
        if self.size.iter().any(|&s| s <= 0.0) {
            out.push("size component ≤ 0".to_string());
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JointType {
    Fixed,
    Revolute,
    Prismatic,
}

impl JointType {
    pub const ALL: [JointType; 3] = [JointType::Fixed, JointType::Revolute, JointType::Prismatic];

    /// Position of this type in a joint-type probability vector.
    pub fn index(self) -> usize {
        match self {
            JointType::Fixed => 0,
            JointType::Revolute => 1,
            JointType::Prismatic => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            JointType::Fixed => "fixed",
            JointType::Revolute => "revolute",
            JointType::Prismatic => "prismatic",
        }
    }
}

/// Joint type plus its 1D state range. States are radians for revolute
/// joints and meters for prismatic ones.
#[derive(Debug, Clone, PartialEq)]
pub struct JointParams {
    pub joint_type: JointType,
    pub axis: Vec3,
    /// A point on the rotation axis; only meaningful for revolute joints.
    pub origin: Vec3,
    pub state_current: f64,
    pub state_max: f64,
}

impl JointParams {
    pub fn fixed() -> Self {
        Self {
            joint_type: JointType::Fixed,
            axis: Vec3::z(),
            origin: Vec3::zeros(),
            state_current: 0.0,
            state_max: 0.0,
        }
    }

    pub fn revolute(axis: Vec3, origin: Vec3, state_current: f64, state_max: f64) -> Self {
        Self { joint_type: JointType::Revolute, axis, origin, state_current, state_max }
    }

    pub fn prismatic(axis: Vec3, state_current: f64, state_max: f64) -> Self {
        Self {
            joint_type: JointType::Prismatic,
            axis,
            origin: Vec3::zeros(),
            state_current,
            state_max,
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let finite = self.axis.iter().chain(self.origin.iter()).all(|v| v.is_finite())
            && self.state_current.is_finite()
            && self.state_max.is_finite();
        if !finite {
            out.push("non-finite joint value".to_string());
            return out;
        }
        if (self.axis.norm() - 1.0).abs() > AXIS_TOL {
            out.push("axis not unit".to_string());
        }
        if self.joint_type != JointType::Fixed {
            if self.state_max < 0.0 {
                out.push("state_max < 0".to_string());
            }
            if self.state_current < -STATE_TOL || self.state_current > self.state_max + STATE_TOL {
                out.push("state_current outside [0, state_max]".to_string());
            }
        }
        out
    }
}

/// One detected part.
#[derive(Debug, Clone, PartialEq)]
pub struct PartProposal {
    pub pose: PoseSize,
    pub joint: JointParams,
    /// Probabilities over fixed, revolute, prismatic and background.
    pub joint_type_probs: [f64; JOINT_CLASSES],
    pub category_probs: Vec<f64>,
    pub embedding: Vec<f64>,
    /// Occupancy of the part in its normalized frame, if known.
    pub shape: Option<AnalyticShape>,
}

impl PartProposal {
    /// `1 - p(background)`.
    pub fn objectness(&self) -> f64 {
        1.0 - self.joint_type_probs[BACKGROUND]
    }

    /// Rescales the foreground probabilities so that the objectness becomes
    /// `value` (clamped to [0, 1]) while their ratios are kept.
    pub fn set_objectness(&mut self, value: f64) {
        let value = value.clamp(0.0, 1.0);
        let fg = self.objectness();
        if fg > 0.0 {
            let k = value / fg;
            for p in &mut self.joint_type_probs[..BACKGROUND] {
                *p *= k;
            }
        } else {
            let share = value / BACKGROUND as f64;
            for p in &mut self.joint_type_probs[..BACKGROUND] {
                *p = share;
            }
        }
        self.joint_type_probs[BACKGROUND] = 1.0 - value;
    }

    /// Most likely non-background joint type (lowest index on ties).
    pub fn predicted_joint_type(&self) -> JointType {
        let mut best = 0;
        for i in 1..BACKGROUND {
            if self.joint_type_probs[i] > self.joint_type_probs[best] {
                best = i;
            }
        }
        JointType::ALL[best]
    }

    pub fn from_truth(part: &TruthPart, n_categories: usize) -> Self {
        let mut joint_type_probs = [0.0; JOINT_CLASSES];
        joint_type_probs[part.joint.joint_type.index()] = 1.0;
        let mut category_probs = vec![0.0; n_categories.max(part.category + 1)];
        category_probs[part.category] = 1.0;
        Self {
            pose: part.pose.clone(),
            joint: part.joint.clone(),
            joint_type_probs,
            category_probs,
            embedding: part.embedding.clone(),
            shape: Some(part.shape.clone()),
        }
    }
}

/// Checks every invariant of a proposal and describes the ones that fail.
pub fn validate(proposal: &PartProposal) -> Vec<String> {
    let mut out = proposal.pose.violations();
    out.extend(proposal.joint.violations());
    check_distribution("joint_type_probs", &proposal.joint_type_probs, &mut out);
    check_distribution("category_probs", &proposal.category_probs, &mut out);
    if proposal.embedding.iter().any(|v| !v.is_finite()) {
        out.push("non-finite embedding".to_string());
    }
    out
}

fn check_distribution(name: &str, probs: &[f64], out: &mut Vec<String>) {
    if probs.is_empty() {
        out.push(format!("{name} empty"));
        return;
    }
    if probs.iter().any(|p| !p.is_finite()) {
        out.push(format!("{name} non-finite"));
        return;
    }
    if probs.iter().any(|&p| p < 0.0) {
        out.push(format!("{name} negative"));
    }
    if (probs.iter().sum::<f64>() - 1.0).abs() > PROB_TOL {
        out.push(format!("{name} do not sum to 1"));
    }
}

/// A ground-truth part.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthPart {
    pub id: usize,
    pub pose: PoseSize,
    pub joint: JointParams,
    pub category: usize,
    pub instance: usize,
    pub shape: AnalyticShape,
    /// Association embedding assigned by the scene generator.
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InstanceInfo {
    pub id: usize,
    pub category: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SceneTruth {
    pub parts: Vec<TruthPart>,
    pub instances: Vec<InstanceInfo>,
}

impl SceneTruth {
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut ids: Vec<usize> = self.instances.iter().map(|i| i.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            out.push("duplicate instance id".to_string());
        }
        for part in &self.parts {
            if ids.binary_search(&part.instance).is_err() {
                out.push(format!("part {} references unknown instance {}", part.id, part.instance));
            }
            for v in part.pose.violations().into_iter().chain(part.joint.violations()) {
                out.push(format!("part {}: {v}", part.id));
            }
        }
        out
    }

    /// Part indices of each instance, in `instances` order.
    pub fn instance_members(&self) -> Vec<Vec<usize>> {
        self.instances
            .iter()
            .map(|inst| {
                self.parts
                    .iter()
                    .enumerate()
                    .filter(|(_, p)| p.instance == inst.id)
                    .map(|(i, _)| i)
                    .collect()
            })
            .collect()
    }
}

/// Rotation from the continuous 6D representation (two stacked 3-vectors,
/// orthonormalized by Gram-Schmidt into the first two columns).
pub fn rotation_from_6d(r6: [f64; 6]) -> Option<Mat3> {
    let a = Vec3::new(r6[0], r6[1], r6[2]);
    let b = Vec3::new(r6[3], r6[4], r6[5]);
    let x = a.try_normalize(1e-12)?;
    let y = (b - x * x.dot(&b)).try_normalize(1e-12)?;
    let z = x.cross(&y);
    Some(Mat3::from_columns(&[x, y, z]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_proposal() -> PartProposal {
        PartProposal {
            pose: PoseSize::axis_aligned(Vec3::zeros(), Vec3::new(1.0, 1.0, 1.0)),
            joint: JointParams::fixed(),
            joint_type_probs: [0.25; 4],
            category_probs: vec![0.5, 0.5],
            embedding: vec![0.0; DEFAULT_EMBEDDING_DIM],
            shape: None,
        }
    }

    #[test]
    fn identity_proposal_is_valid() {
        assert!(validate(&unit_proposal()).is_empty());
    }

    #[test]
    fn zero_size_component_is_reported() {
        let mut p = unit_proposal();
        p.pose.size = Vec3::new(1.0, 0.0, 1.0);
        assert_eq!(validate(&p), vec!["size component ≤ 0".to_string()]);
    }

    #[test]
    fn non_unit_axis_is_reported() {
        let mut p = unit_proposal();
        p.joint.axis = Vec3::new(0.0, 0.0, 2.0);
        assert_eq!(validate(&p), vec!["axis not unit".to_string()]);
    }

    #[test]
    fn validate_is_total_on_nan() {
        let mut p = unit_proposal();
        p.pose.center.x = f64::NAN;
        p.joint.state_max = f64::INFINITY;
        p.embedding[0] = f64::NAN;
        assert!(!validate(&p).is_empty());
    }

    #[test]
    fn state_out_of_range() {
        let mut p = unit_proposal();
        p.joint = JointParams::prismatic(Vec3::x(), 0.5, 0.2);
        assert_eq!(validate(&p), vec!["state_current outside [0, state_max]".to_string()]);
    }

    #[test]
    fn set_objectness_keeps_ratios() {
        let mut p = unit_proposal();
        p.joint_type_probs = [0.1, 0.6, 0.2, 0.1];
        p.set_objectness(0.45);
        assert!((p.objectness() - 0.45).abs() < 1e-12);
        assert!((p.joint_type_probs[1] / p.joint_type_probs[0] - 6.0).abs() < 1e-9);
        assert!((p.joint_type_probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        p.set_objectness(3.0);
        assert_eq!(p.objectness(), 1.0);
    }

    #[test]
    fn six_d_identity() {
        let r = rotation_from_6d([2.0, 0.0, 0.0, 0.3, 5.0, 0.0]).unwrap();
        assert!((r - Mat3::identity()).norm() < 1e-12);
        assert!(rotation_from_6d([1.0, 0.0, 0.0, 2.0, 0.0, 0.0]).is_none());
    }
}
