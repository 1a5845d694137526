//! Articulated motion of a single part: box pose at any joint state, the
//! swept hull over the canonical, current and fully opened boxes, and the
//! kinematics-aware IoU between two swept hulls.

use crate::geometry::{axis_angle, convex_hull, cuboid_corners, inflate_degenerate, iou, ConvexPolytope, GeomError};
use crate::types::{JointParams, JointType, PoseSize, Vec3};

const STATE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum KinematicsError {
    #[error("joint state {state} outside [0, {max}]")]
    InvalidState { state: f64, max: f64 },
    #[error(transparent)]
    Geometry(#[from] GeomError),
}

/// Moves a box given at the joint's current state to state `d`.
///
/// Revolute joints rotate both the center and the orientation about the
/// line through `origin` along `axis`; prismatic joints translate along
/// `axis`. Fixed joints ignore `d`.
pub fn pose_at_state(pose: &PoseSize, joint: &JointParams, d: f64) -> Result<PoseSize, KinematicsError> {
    if joint.joint_type == JointType::Fixed {
        return Ok(pose.clone());
    }
    if !(d >= -STATE_TOL && d <= joint.state_max + STATE_TOL) {
        return Err(KinematicsError::InvalidState { state: d, max: joint.state_max });
    }
    let delta = d - joint.state_current;
    if delta == 0.0 {
        return Ok(pose.clone());
    }
    Ok(match joint.joint_type {
        JointType::Prismatic => PoseSize::new(pose.rotation, pose.center + joint.axis * delta, pose.size),
        JointType::Revolute => {
            let rot = axis_angle(&joint.axis, delta);
            PoseSize::new(rot * pose.rotation, rot * (pose.center - joint.origin) + joint.origin, pose.size)
        }
        JointType::Fixed => unreachable!(),
    })
}

/// Convex hull of the 24 corners of a part's canonical, current and fully
/// opened boxes.
#[derive(Debug, Clone)]
pub struct SweptHull {
    pub pose: PoseSize,
    pub joint: JointParams,
    /// Corners at state 0, the current state and the maximum state, in
    /// that order, eight each.
    pub vertices24: [Vec3; 24],
    pub hull: ConvexPolytope,
}

impl SweptHull {
    pub fn kiou(&self, other: &SweptHull) -> f64 {
        iou(&self.hull, &other.hull)
    }
}

pub fn swept_hull(pose: &PoseSize, joint: &JointParams) -> Result<SweptHull, KinematicsError> {
    let states = [0.0, joint.state_current, joint.state_max];
    let mut vertices24 = [Vec3::zeros(); 24];
    for (s, &d) in states.iter().enumerate() {
        let corners = cuboid_corners(&pose_at_state(pose, joint, d)?);
        vertices24[8 * s..8 * s + 8].copy_from_slice(&corners);
    }
    let hull = match convex_hull(&vertices24) {
        Ok(h) => h,
        Err(GeomError::DegenerateInput(_)) => convex_hull(&inflate_degenerate(&vertices24))?,
        Err(e) => return Err(e.into()),
    };
    Ok(SweptHull { pose: pose.clone(), joint: joint.clone(), vertices24, hull })
}

/// Kinematics-aware IoU: volume IoU of the two parts' swept hulls.
pub fn kiou(a: (&PoseSize, &JointParams), b: (&PoseSize, &JointParams)) -> Result<f64, KinematicsError> {
    Ok(swept_hull(a.0, a.1)?.kiou(&swept_hull(b.0, b.1)?))
}
