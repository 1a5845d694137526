//! Synthetic articulated scenes: cabinets built from a rear body block and a
//! front layer of doors, drawers and fixed panels, plus simulated noisy
//! detector runs over them.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geometry::axis_angle;
use crate::kinematics::pose_at_state;
use crate::shapespace::AnalyticShape;
use crate::types::{
    InstanceInfo, JointParams, JointType, Mat3, PartProposal, PoseSize, SceneTruth, TruthPart, Vec3, BACKGROUND,
    JOINT_CLASSES,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GenError {
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
}

pub const DOOR_THICKNESS: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseModel {
    /// Center and joint-origin noise, meters.
    pub center_sigma: f64,
    /// Rotation and axis noise, radians.
    pub rotation_sigma: f64,
    /// Relative size noise.
    pub size_sigma: f64,
    /// Joint-state noise, radians or meters.
    pub state_sigma: f64,
    /// Per-run embedding noise, as a fraction of `tau_z_prime`.
    pub embedding_sigma: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self { center_sigma: 0.01, rotation_sigma: 0.02, size_sigma: 0.03, state_sigma: 0.03, embedding_sigma: 0.05 }
    }
}

impl NoiseModel {
    pub fn zero() -> Self {
        Self { center_sigma: 0.0, rotation_sigma: 0.0, size_sigma: 0.0, state_sigma: 0.0, embedding_sigma: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub seed: u64,
    /// Upper bound on instances per scene (1 to 4).
    pub n_instances: usize,
    /// Upper bound on articulated parts per instance (1 to 6), besides the base.
    pub parts_per_instance: usize,
    /// Relative frequency of revolute, prismatic and fixed front parts.
    pub joint_mix: [f64; 3],
    pub n_categories: usize,
    pub embedding_dim: usize,
    pub tau_z_prime: f64,
    pub noise: NoiseModel,
    pub n_runs: usize,
    /// Per part and run, chance of a spurious proposal.
    pub fp_rate: f64,
    /// Per part and run, chance of the part being missed.
    pub fn_rate: f64,
    /// Per door and run, chance of an extra copy offset by 10 degrees.
    pub near_miss_rate: f64,
    /// Lower bound of spurious objectness; the upper bound is 0.6.
    pub tau_obj: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_instances: 3,
            parts_per_instance: 3,
            joint_mix: [0.5, 0.35, 0.15],
            n_categories: 3,
            embedding_dim: crate::types::DEFAULT_EMBEDDING_DIM,
            tau_z_prime: 0.5,
            noise: NoiseModel::default(),
            n_runs: 10,
            fp_rate: 0.2,
            fn_rate: 0.1,
            near_miss_rate: 0.3,
            tau_obj: 0.25,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), GenError> {
        let bad = |m: String| Err(GenError::InvalidConfig(m));
        if !(1..=4).contains(&self.n_instances) {
            return bad(format!("n_instances = {} not in 1..=4", self.n_instances));
        }
        if !(1..=6).contains(&self.parts_per_instance) {
            return bad(format!("parts_per_instance = {} not in 1..=6", self.parts_per_instance));
        }
        for (name, v) in [("fp_rate", self.fp_rate), ("fn_rate", self.fn_rate), ("near_miss_rate", self.near_miss_rate)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} = {v} not in [0, 1]"));
            }
        }
        if !(0.0..=0.6).contains(&self.tau_obj) {
            return bad(format!("tau_obj = {} not in [0, 0.6]", self.tau_obj));
        }
        let n = &self.noise;
        for (name, v) in [
            ("center_sigma", n.center_sigma),
            ("rotation_sigma", n.rotation_sigma),
            ("size_sigma", n.size_sigma),
            ("state_sigma", n.state_sigma),
            ("embedding_sigma", n.embedding_sigma),
        ] {
            if !(v >= 0.0) {
                return bad(format!("{name} = {v} must be >= 0"));
            }
        }
        if self.joint_mix.iter().any(|w| !(*w >= 0.0)) || self.joint_mix.iter().sum::<f64>() <= 0.0 {
            return bad("joint_mix must be non-negative with a positive sum".into());
        }
        if self.n_categories < 1 || self.embedding_dim < self.n_instances || !(self.tau_z_prime > 0.0) {
            return bad("need n_categories >= 1, embedding_dim >= n_instances, tau_z_prime > 0".into());
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    loop {
        let v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Mutually orthogonal unit vectors, one per instance.
fn instance_directions(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::new();
    while out.len() < count {
        let mut v = random_unit(rng, dim);
        for u in &out {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            out.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    out
}

fn pick_joint_type(rng: &mut ChaCha8Rng, mix: [f64; 3]) -> JointType {
    let mut r = rng.random::<f64>() * mix.iter().sum::<f64>();
    for (w, t) in mix.iter().zip([JointType::Revolute, JointType::Prismatic, JointType::Fixed]) {
        r -= w;
        if r < 0.0 {
            return t;
        }
    }
    JointType::Fixed
}

/// Part mix per category: doors only, drawers only, or anything.
fn category_mix(category: usize, mix: [f64; 3]) -> [f64; 3] {
    match category % 3 {
        0 => [mix[0], 0.0, mix[2]],
        1 => [0.0, mix[1], mix[2]],
        _ => mix,
    }
}

/// A scene of one to `n_instances` cabinets placed side by side on the floor
/// with random yaw. Deterministic in `cfg.seed`.
pub fn generate_scene(cfg: &GenConfig) -> Result<SceneTruth, GenError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_instances = rng.random_range(1..=cfg.n_instances);
    let directions = instance_directions(&mut rng, n_instances, cfg.embedding_dim);
    let mut scene = SceneTruth::default();
    let mut cursor = 0.0;
    for (inst, direction) in directions.iter().enumerate() {
        let category = rng.random_range(0..cfg.n_categories);
        scene.instances.push(InstanceInfo { id: inst, category });

        let width = uniform(&mut rng, 0.5, 1.2);
        let depth = uniform(&mut rng, 0.4, 0.7);
        let height = uniform(&mut rng, 0.5, 1.5);
        let layer = 0.35 * depth;
        let radius = 0.5 * (width * width + depth * depth).sqrt() + width;
        let center_x = cursor + radius;
        cursor = center_x + radius + 0.3;
        let yaw = uniform(&mut rng, -PI / 6.0, PI / 6.0);
        let frame = axis_angle(&Vec3::z(), yaw);
        let origin = Vec3::new(center_x, 0.0, 0.0);
        // Local frame: x across the front, y out of the front, z up, with the
        // cabinet's footprint centered on the origin.
        let place = |local: &Vec3| frame * local + origin;

        // Parts sit within 0.45 tau' of their instance center, centers are
        // orthogonal at distance sqrt(2) * scale. The constant term absorbs
        // the log-count slack of the soft max/min in the instance loss.
        let scale = 4.0 * cfg.tau_z_prime + 5.0;
        let embed_center: Vec<f64> = direction.iter().map(|d| d * scale).collect();
        let embedding = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            let r = uniform(rng, 0.0, 0.45) * cfg.tau_z_prime;
            random_unit(rng, cfg.embedding_dim).iter().zip(&embed_center).map(|(u, c)| c + r * u).collect()
        };

        let base_shape = if rng.random::<f64>() < 0.3 {
            AnalyticShape::LShape { notch_x: uniform(&mut rng, 0.2, 0.4), notch_z: uniform(&mut rng, 0.2, 0.4) }
        } else {
            AnalyticShape::Solid
        };
        let body = depth - layer;
        scene.parts.push(TruthPart {
            id: scene.parts.len(),
            pose: PoseSize::new(frame, place(&Vec3::new(0.0, -layer / 2.0, height / 2.0)), Vec3::new(width, body, height)),
            joint: JointParams::fixed(),
            category,
            instance: inst,
            shape: base_shape,
            embedding: embedding(&mut rng),
        });

        let front = depth / 2.0;
        let n_parts = rng.random_range(1..=cfg.parts_per_instance);
        let slot = height / n_parts as f64;
        let mix = category_mix(category, cfg.joint_mix);
        for k in 0..n_parts {
            let zc = slot * (k as f64 + 0.5);
            let h = 0.95 * slot;
            let w = 0.95 * width;
            let joint_type = pick_joint_type(&mut rng, mix);
            let (canonical, rest) = match joint_type {
                JointType::Revolute => {
                    let y = front + DOOR_THICKNESS / 2.0;
                    let pose = PoseSize::new(frame, place(&Vec3::new(0.0, y, zc)), Vec3::new(w, DOOR_THICKNESS, h));
                    let left = rng.random::<bool>();
                    let (hinge_x, axis) = if left { (-w / 2.0, Vec3::z()) } else { (w / 2.0, -Vec3::z()) };
                    let max = uniform(&mut rng, 90f64, 135.0).to_radians();
                    (pose, JointParams::revolute(frame * axis, place(&Vec3::new(hinge_x, y, zc)), 0.0, max))
                }
                JointType::Prismatic => {
                    let d = 0.95 * layer;
                    let pose = PoseSize::new(frame, place(&Vec3::new(0.0, front - d / 2.0, zc)), Vec3::new(w, d, h));
                    let max = d * uniform(&mut rng, 0.7, 1.0);
                    (pose, JointParams::prismatic(frame * Vec3::y(), 0.0, max))
                }
                JointType::Fixed => {
                    let y = front + DOOR_THICKNESS / 2.0;
                    let pose = PoseSize::new(frame, place(&Vec3::new(0.0, y, zc)), Vec3::new(w, DOOR_THICKNESS, h));
                    (pose, JointParams::fixed())
                }
            };
            let state = uniform(&mut rng, 0.0, 1.0) * rest.state_max;
            let pose = pose_at_state(&canonical, &rest, state).expect("state drawn inside its range");
            let joint = JointParams { state_current: state, ..rest };
            scene.parts.push(TruthPart {
                id: scene.parts.len(),
                pose,
                joint,
                category,
                instance: inst,
                shape: AnalyticShape::Solid,
                embedding: embedding(&mut rng),
            });
        }
    }
    Ok(scene)
}

fn probabilities(objectness: f64, true_type: JointType, confidence: f64) -> [f64; JOINT_CLASSES] {
    let mut p = [0.0; JOINT_CLASSES];
    let others = (objectness * (1.0 - confidence)) / 2.0;
    for t in JointType::ALL {
        p[t.index()] = others;
    }
    p[true_type.index()] = objectness * confidence;
    p[BACKGROUND] = 1.0 - objectness;
    p
}

fn category_probs(n: usize, category: usize, confidence: f64) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    let mut p = vec![(1.0 - confidence) / (n - 1) as f64; n];
    p[category] = confidence;
    p
}

fn gaussian(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma > 0.0 {
        Normal::new(0.0, sigma).expect("positive sigma").sample(rng)
    } else {
        0.0
    }
}

fn small_rotation(rng: &mut ChaCha8Rng, sigma: f64) -> Mat3 {
    if sigma == 0.0 {
        return Mat3::identity();
    }
    let axis = Vec3::new(gaussian(rng, 1.0), gaussian(rng, 1.0), gaussian(rng, 1.0));
    axis_angle(&axis.try_normalize(1e-9).unwrap_or(Vec3::z()), gaussian(rng, sigma))
}

/// A noisy detection of `part` at joint state `state`.
fn detect(rng: &mut ChaCha8Rng, part: &TruthPart, state: f64, objectness: f64, cfg: &GenConfig) -> PartProposal {
    let noise = &cfg.noise;
    let state = if part.joint.joint_type == JointType::Fixed {
        part.joint.state_current
    } else {
        (state + gaussian(rng, noise.state_sigma)).clamp(0.0, part.joint.state_max)
    };
    let mut pose = pose_at_state(&part.pose, &part.joint, state).expect("clamped state");
    pose.rotation = small_rotation(rng, noise.rotation_sigma) * pose.rotation;
    pose.center += Vec3::new(gaussian(rng, noise.center_sigma), gaussian(rng, noise.center_sigma), gaussian(rng, noise.center_sigma));
    pose.size = pose.size.map(|s| (s * (1.0 + gaussian(rng, noise.size_sigma))).max(1e-3));
    let mut joint = part.joint.clone();
    joint.state_current = state;
    if joint.joint_type != JointType::Fixed && noise.rotation_sigma > 0.0 {
        joint.axis = (small_rotation(rng, noise.rotation_sigma) * joint.axis).normalize();
        if joint.joint_type == JointType::Revolute {
            joint.origin +=
                Vec3::new(gaussian(rng, noise.center_sigma), gaussian(rng, noise.center_sigma), gaussian(rng, noise.center_sigma));
        }
    }
    let exact = *noise == NoiseModel::zero();
    let type_conf = if exact { 1.0 } else { uniform(rng, 0.8, 0.95) };
    let cat_conf = if exact { 1.0 } else { uniform(rng, 0.6, 0.9) };
    let embedding = part.embedding.iter().map(|z| z + gaussian(rng, noise.embedding_sigma * cfg.tau_z_prime)).collect();
    PartProposal {
        pose,
        joint,
        joint_type_probs: probabilities(objectness, part.joint.joint_type, type_conf),
        category_probs: category_probs(cfg.n_categories.max(part.category + 1), part.category, cat_conf),
        embedding,
        shape: Some(part.shape.clone()),
    }
}

/// A spurious box somewhere inside the scene's extent.
fn spurious(rng: &mut ChaCha8Rng, truth: &SceneTruth, cfg: &GenConfig) -> PartProposal {
    let (mut min, mut max) = (Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY));
    for p in &truth.parts {
        min = min.inf(&(p.pose.center - p.pose.size));
        max = max.sup(&(p.pose.center + p.pose.size));
    }
    let center = Vec3::new(uniform(rng, min.x, max.x), uniform(rng, min.y, max.y), uniform(rng, min.z.max(0.05), max.z));
    let size = Vec3::new(uniform(rng, 0.1, 0.8), uniform(rng, 0.02, 0.6), uniform(rng, 0.1, 0.8));
    let rotation = axis_angle(&Vec3::z(), uniform(rng, -PI, PI));
    let objectness = uniform(rng, cfg.tau_obj, 0.6);
    let joint_type = JointType::ALL[rng.random_range(0..3)];
    let joint = match joint_type {
        JointType::Fixed => JointParams::fixed(),
        JointType::Revolute => {
            let max = uniform(rng, 0.5, 2.0);
            let hinge = center + rotation * Vec3::new(-size.x / 2.0, 0.0, 0.0);
            JointParams::revolute(Vec3::z(), hinge, uniform(rng, 0.0, 1.0) * max, max)
        }
        JointType::Prismatic => {
            let max = uniform(rng, 0.1, 0.5);
            JointParams::prismatic(rotation * Vec3::y(), uniform(rng, 0.0, 1.0) * max, max)
        }
    };
    let category = rng.random_range(0..cfg.n_categories);
    let embedding = random_unit(rng, cfg.embedding_dim).into_iter().map(|v| v * uniform(rng, 0.0, 4.0) * cfg.tau_z_prime).collect();
    PartProposal {
        pose: PoseSize::new(rotation, center, size),
        joint,
        joint_type_probs: probabilities(objectness, joint_type, 0.5),
        category_probs: category_probs(cfg.n_categories, category, 0.5),
        embedding,
        shape: Some(AnalyticShape::Solid),
    }
}

/// Simulated detector output: `cfg.n_runs` independent runs over `truth`.
///
/// Every true part is detected per run with probability `1 - fn_rate`, with
/// noise from `cfg.noise` and objectness in [0.6, 0.95]. Each part may also
/// spawn a spurious box (`fp_rate`), and each door a weaker copy offset by
/// 10 degrees along its trajectory (`near_miss_rate`). With zero noise and
/// zero rates every run reproduces the truth with objectness 1.
pub fn perturb_to_runs(truth: &SceneTruth, cfg: &GenConfig) -> Result<Vec<Vec<PartProposal>>, GenError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5e_ed0f_2a45);
    let exact = cfg.noise == NoiseModel::zero();
    let mut runs = Vec::with_capacity(cfg.n_runs);
    for _ in 0..cfg.n_runs {
        let mut run = Vec::new();
        for part in &truth.parts {
            if rng.random::<f64>() >= 1.0 - cfg.fn_rate {
                continue;
            }
            let objectness = if exact { 1.0 } else { uniform(&mut rng, 0.6, 0.95) };
            run.push(detect(&mut rng, part, part.joint.state_current, objectness, cfg));
            if part.joint.joint_type == JointType::Revolute && rng.random::<f64>() < cfg.near_miss_rate {
                let offset = 10f64.to_radians();
                let state = if part.joint.state_current + offset <= part.joint.state_max {
                    part.joint.state_current + offset
                } else {
                    part.joint.state_current - offset
                };
                run.push(detect(&mut rng, part, state, 0.9 * objectness, cfg));
            }
            if rng.random::<f64>() < cfg.fp_rate {
                run.push(spurious(&mut rng, truth, cfg));
            }
        }
        runs.push(run);
    }
    Ok(runs)
}

/// A single thin door seen `n_runs` times at 40 degrees, plus in every other
/// run a near-miss copy at 50 degrees. Box-IoU fusion cannot merge the two
/// poses; kIoU fusion can.
pub fn thin_part_fixture(n_runs: usize) -> (SceneTruth, Vec<Vec<PartProposal>>) {
    let canonical = PoseSize::axis_aligned(Vec3::new(0.3, DOOR_THICKNESS / 2.0, 0.5), Vec3::new(0.6, DOOR_THICKNESS, 0.8));
    let max = 120f64.to_radians();
    let hinge = Vec3::new(0.0, DOOR_THICKNESS / 2.0, 0.5);
    let rest = JointParams::revolute(Vec3::z(), hinge, 0.0, max);
    let at = |deg: f64| {
        let d = deg.to_radians();
        (pose_at_state(&canonical, &rest, d).expect("in range"), JointParams { state_current: d, ..rest.clone() })
    };
    let (pose, joint) = at(40.0);
    let part = TruthPart {
        id: 0,
        pose,
        joint,
        category: 0,
        instance: 0,
        shape: AnalyticShape::Solid,
        embedding: vec![0.0; 4],
    };
    let truth = SceneTruth { parts: vec![part.clone()], instances: vec![InstanceInfo { id: 0, category: 0 }] };
    let proposal = |deg: f64, objectness: f64| {
        let mut p = PartProposal::from_truth(&part, 1);
        (p.pose, p.joint) = at(deg);
        p.set_objectness(objectness);
        p
    };
    let runs = (0..n_runs)
        .map(|r| {
            let mut run = vec![proposal(40.0, 0.9)];
            if r % 2 == 0 {
                run.push(proposal(50.0, 0.8));
            }
            run
        })
        .collect();
    (truth, runs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grouping::group_embeddings;
    use crate::losses::instance_loss;
    use crate::types::validate;

    #[test]
    fn deterministic_in_seed() {
        let cfg = GenConfig::default();
        assert_eq!(generate_scene(&cfg).unwrap(), generate_scene(&cfg).unwrap());
        assert_eq!(perturb_to_runs(&generate_scene(&cfg).unwrap(), &cfg).unwrap(), perturb_to_runs(&generate_scene(&cfg).unwrap(), &cfg).unwrap());
        let other = GenConfig { seed: 1, ..GenConfig::default() };
        assert_ne!(generate_scene(&cfg).unwrap(), generate_scene(&other).unwrap());
    }

    #[test]
    fn generated_scenes_are_valid() {
        for seed in 0..30 {
            let cfg = GenConfig { seed, n_instances: 4, parts_per_instance: 6, ..GenConfig::default() };
            let scene = generate_scene(&cfg).unwrap();
            assert!(scene.violations().is_empty(), "{:?}", scene.violations());
            for run in perturb_to_runs(&scene, &cfg).unwrap() {
                for p in &run {
                    assert!(validate(p).is_empty(), "{:?}", validate(p));
                }
            }
        }
    }

    #[test]
    fn exact_runs_reproduce_truth() {
        let cfg = GenConfig { noise: NoiseModel::zero(), fp_rate: 0.0, fn_rate: 0.0, near_miss_rate: 0.0, ..GenConfig::default() };
        let scene = generate_scene(&cfg).unwrap();
        let runs = perturb_to_runs(&scene, &cfg).unwrap();
        assert_eq!(runs.len(), cfg.n_runs);
        for run in &runs {
            assert_eq!(run.len(), scene.parts.len());
            for (p, t) in run.iter().zip(&scene.parts) {
                assert_eq!(*p, PartProposal::from_truth(t, cfg.n_categories));
            }
        }
        let dropped = GenConfig { fn_rate: 1.0, ..cfg };
        assert!(perturb_to_runs(&scene, &dropped).unwrap().iter().all(Vec::is_empty));
    }

    #[test]
    fn embeddings_separate_instances() {
        for seed in 0..20 {
            let cfg = GenConfig { seed, n_instances: 4, ..GenConfig::default() };
            let scene = generate_scene(&cfg).unwrap();
            let e: Vec<Vec<f64>> = scene.parts.iter().map(|p| p.embedding.clone()).collect();
            let ids: Vec<usize> = scene.parts.iter().map(|p| p.instance).collect();
            let groups = group_embeddings(&e, 2.0 * cfg.tau_z_prime);
            assert_eq!(groups.len(), scene.instances.len());
            if scene.instances.len() > 1 {
                // Only the intra hinge can be active, and it is not.
                assert!(instance_loss(&e, &ids, cfg.tau_z_prime, 0.1).unwrap().abs() < 1e-9);
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(GenConfig::default().validate().is_ok());
        assert!(GenConfig { n_instances: 5, ..GenConfig::default() }.validate().is_err());
        assert!(GenConfig { fp_rate: 1.5, ..GenConfig::default() }.validate().is_err());
        let noise = NoiseModel { center_sigma: -1.0, ..NoiseModel::default() };
        assert!(GenConfig { noise, ..GenConfig::default() }.validate().is_err());
    }

    #[test]
    fn fixture_shape() {
        let (truth, runs) = thin_part_fixture(10);
        assert_eq!(truth.parts.len(), 1);
        assert_eq!(runs.iter().map(Vec::len).sum::<usize>(), 15);
    }
}
