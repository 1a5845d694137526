//! Reference implementations used as oracles. Nothing here calls into the
//! library's geometry, kinematics or loss code.
#![allow(dead_code)]

use kpf_core::shapespace::OccupancySample;
use kpf_core::{JointParams, JointType, Mat3, PartProposal, PoseSize, TruthPart, Vec3};
use nalgebra::{Rotation3, Unit};
use rand::Rng;

pub const CLAMP: f64 = 1e-7;

pub fn corners(pose: &PoseSize) -> Vec<Vec3> {
    let mut out = Vec::with_capacity(8);
    for k in 0..8 {
        let sx = if k & 1 == 0 { -0.5 } else { 0.5 };
        let sy = if k & 2 == 0 { -0.5 } else { 0.5 };
        let sz = if k & 4 == 0 { -0.5 } else { 0.5 };
        let local = Vec3::new(sx * pose.size.x, sy * pose.size.y, sz * pose.size.z);
        out.push(pose.rotation * local + pose.center);
    }
    out
}

fn move_point(p: &Vec3, joint: &JointParams, delta: f64) -> Vec3 {
    match joint.joint_type {
        JointType::Fixed => *p,
        JointType::Prismatic => p + joint.axis * delta,
        JointType::Revolute => {
            let r = Rotation3::from_axis_angle(&Unit::new_normalize(joint.axis), delta);
            r * (p - joint.origin) + joint.origin
        }
    }
}

/// Corners at the rest, current and fully opened states.
pub fn swept_vertices(pose: &PoseSize, joint: &JointParams) -> Vec<Vec3> {
    let now = corners(pose);
    let mut out = Vec::with_capacity(24);
    for d in [0.0, joint.state_current, joint.state_max] {
        out.extend(now.iter().map(|p| move_point(p, joint, d - joint.state_current)));
    }
    out
}

/// Outward facet planes `(n, offset)` of the hull of `points`, found by
/// testing every point triple.
pub fn hull_planes(points: &[Vec3]) -> Vec<(Vec3, f64)> {
    let scale = points.iter().map(|p| p.norm()).fold(1.0, f64::max);
    let tol = 1e-9 * scale;
    let mut planes: Vec<(Vec3, f64)> = Vec::new();
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            for k in j + 1..points.len() {
                let n = (points[j] - points[i]).cross(&(points[k] - points[i]));
                if n.norm() < 1e-12 * scale * scale {
                    continue;
                }
                let n = n.normalize();
                let off = n.dot(&points[i]);
                let side: Vec<f64> = points.iter().map(|p| n.dot(p) - off).collect();
                let plane = if side.iter().all(|&s| s <= tol) {
                    (n, off)
                } else if side.iter().all(|&s| s >= -tol) {
                    (-n, -off)
                } else {
                    continue;
                };
                if !planes.iter().any(|(m, o)| (m - plane.0).norm() < 1e-7 && (o - plane.1).abs() < 1e-7 * scale) {
                    planes.push(plane);
                }
            }
        }
    }
    planes
}

pub fn inside(planes: &[(Vec3, f64)], p: &Vec3) -> bool {
    planes.iter().all(|(n, o)| n.dot(p) <= *o)
}

/// Monte-Carlo IoU of the hulls of two point sets.
pub fn monte_carlo_iou<R: Rng>(a: &[Vec3], b: &[Vec3], samples: usize, rng: &mut R) -> f64 {
    let (pa, pb) = (hull_planes(a), hull_planes(b));
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for p in a.iter().chain(b) {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let (mut na, mut nb, mut nab) = (0u64, 0u64, 0u64);
    for _ in 0..samples {
        let p = Vec3::new(rng.random_range(lo.x..hi.x), rng.random_range(lo.y..hi.y), rng.random_range(lo.z..hi.z));
        let ia = inside(&pa, &p);
        let ib = inside(&pb, &p);
        na += ia as u64;
        nb += ib as u64;
        nab += (ia && ib) as u64;
    }
    let union = na + nb - nab;
    if union == 0 {
        0.0
    } else {
        nab as f64 / union as f64
    }
}

pub fn random_rotation<R: Rng>(rng: &mut R) -> Mat3 {
    let axis = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let axis = if axis.norm() < 1e-3 { Vec3::z() } else { axis };
    *Rotation3::from_axis_angle(&Unit::new_normalize(axis), rng.random_range(-3.1..3.1)).matrix()
}

/// A part with a joint that is physically plausible for its box: hinges on
/// a box edge, slides along a box axis.
pub fn random_part<R: Rng>(rng: &mut R) -> (PoseSize, JointParams) {
    let rotation = random_rotation(rng);
    let size = Vec3::new(rng.random_range(0.02..1.0), rng.random_range(0.02..1.0), rng.random_range(0.02..1.0));
    let center = Vec3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
    let pose = PoseSize::new(rotation, center, size);
    let a = rng.random_range(0..3usize);
    let b = (a + 1) % 3;
    let axis: Vec3 = rotation.column(a).into();
    let joint = match rng.random_range(0..3) {
        0 => JointParams::fixed(),
        1 => {
            let max = rng.random_range(0.3..2.36);
            let side: Vec3 = rotation.column(b).into();
            let origin = center + side * (0.5 * size[b] * if rng.random::<bool>() { 1.0 } else { -1.0 });
            JointParams::revolute(axis, origin, rng.random_range(0.0..max), max)
        }
        _ => {
            let max = rng.random_range(0.1..0.6);
            JointParams::prismatic(axis, rng.random_range(0.0..max), max)
        }
    };
    (pose, joint)
}

/// A noisy re-detection of `part`, or occasionally an unrelated part close by.
pub fn perturbed_part<R: Rng>(part: &(PoseSize, JointParams), rng: &mut R) -> (PoseSize, JointParams) {
    if rng.random_range(0.0..1.0) < 0.2 {
        let (mut pose, joint) = random_part(rng);
        let target = part.0.center + Vec3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3));
        let shift = target - pose.center;
        pose.center = target;
        return (pose, JointParams { origin: joint.origin + shift, ..joint });
    }
    let (pose, joint) = part;
    let tilt = Rotation3::from_axis_angle(&Unit::new_normalize(Vec3::new(0.3, -0.2, 1.0)), rng.random_range(-0.2..0.2));
    let shift = Vec3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)).component_mul(&pose.size);
    let size = pose.size.map(|s| s * rng.random_range(0.8..1.25));
    let mut joint = joint.clone();
    joint.origin += shift;
    if joint.joint_type != JointType::Fixed {
        joint.state_current = rng.random_range(0.0..joint.state_max);
    }
    (PoseSize::new(tilt.matrix() * pose.rotation, pose.center + shift, size), joint)
}

pub fn corner_l1(a: &PoseSize, b: &PoseSize) -> f64 {
    corners(a).iter().zip(corners(b)).map(|(p, q)| (p - q).abs().sum()).sum()
}

fn neg_ln(p: f64) -> f64 {
    -p.clamp(CLAMP, 1.0 - CLAMP).ln()
}

/// The nine loss terms written out one by one, in breakdown order.
pub fn literal_part_loss(pred: &PartProposal, truth: &TruthPart, occ: &[OccupancySample]) -> [f64; 9] {
    let (p, g) = (&pred.pose, &truth.pose);
    let corner = corner_l1(&PoseSize::new(p.rotation, g.center, g.size), g)
        + corner_l1(&PoseSize::new(g.rotation, p.center, g.size), g)
        + corner_l1(&PoseSize::new(g.rotation, g.center, p.size), g);
    let m = Mat3::identity() - p.rotation.transpose() * g.rotation;
    let mut rotation = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            rotation += m[(i, j)] * m[(i, j)];
        }
    }
    let mut bce = 0.0;
    for s in occ {
        let t = if s.truth { 1.0 } else { 0.0 };
        let q = s.predicted.clamp(CLAMP, 1.0 - CLAMP);
        bce -= t * q.ln() + (1.0 - t) * (1.0 - q).ln();
    }
    if !occ.is_empty() {
        bce /= occ.len() as f64;
    }
    let (tj, pj) = (&truth.joint, &pred.joint);
    let articulated = tj.joint_type != JointType::Fixed;
    let state_max = if articulated { (pj.state_max - tj.state_max).abs() } else { 0.0 };
    let state_current = if articulated { (pj.state_current - tj.state_current).abs() } else { 0.0 };
    let axis = if articulated { -(pj.axis.x * tj.axis.x + pj.axis.y * tj.axis.y + pj.axis.z * tj.axis.z) } else { 0.0 };
    let origin = if tj.joint_type == JointType::Revolute {
        (pj.origin - tj.origin).cross(&tj.axis).norm() / tj.axis.norm()
    } else {
        0.0
    };
    let type_index = match tj.joint_type {
        JointType::Fixed => 0,
        JointType::Revolute => 1,
        JointType::Prismatic => 2,
    };
    let joint_ce = neg_ln(pred.joint_type_probs[type_index]);
    let category_ce = neg_ln(pred.category_probs.get(truth.category).copied().unwrap_or(0.0));
    [corner, rotation, bce, state_max, state_current, axis, origin, joint_ce, category_ce]
}

/// Instance loss with max and min replaced by log-sum-exp, evaluated naively.
pub fn literal_instance_loss(z: &[Vec<f64>], ids: &[usize], tau: f64, lambda: f64) -> f64 {
    let n = z.len();
    let eta = |i: usize, j: usize| z[i].iter().zip(&z[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let mut first = 0.0;
    let mut second = 0.0;
    for i in 0..n {
        let group = (0..n).filter(|&j| ids[j] == ids[i]).count() as f64;
        let mut hinge = 0.0;
        let mut exp_same = 0.0;
        let mut exp_other = 0.0;
        let mut any_same = false;
        let mut any_other = false;
        for j in 0..n {
            if j != i && ids[j] == ids[i] {
                hinge += (eta(i, j) - tau).max(0.0);
                exp_same += eta(i, j).exp();
                any_same = true;
            } else if ids[j] != ids[i] {
                exp_other += (-eta(i, j)).exp();
                any_other = true;
            }
        }
        first += hinge / group;
        if any_other {
            let soft_max = if any_same { exp_same.ln() } else { 0.0 };
            let soft_min = -exp_other.ln();
            second += (soft_max - soft_min + 3.0 * tau).max(0.0);
        }
    }
    lambda * first + second / n as f64
}

/// Minimum total cost over every injective truth-to-prediction map.
pub fn brute_force_assignment(costs: &[Vec<f64>]) -> f64 {
    fn go(costs: &[Vec<f64>], g: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        let n_gt = costs[0].len();
        if g == n_gt {
            *best = best.min(acc);
            return;
        }
        for p in 0..costs.len() {
            if !used[p] {
                used[p] = true;
                go(costs, g + 1, used, acc + costs[p][g], best);
                used[p] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(costs, 0, &mut vec![false; costs.len()], 0.0, &mut best);
    best
}
