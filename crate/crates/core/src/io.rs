//! JSON Lines records for proposals, ground-truth parts and instances.
//!
//! Rotations are stored row-major. Revolute joint states are written in
//! degrees and prismatic ones in meters; every record names its unit in
//! `state_unit`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::shapespace::AnalyticShape;
use crate::types::{InstanceInfo, JointParams, JointType, Mat3, PartProposal, PoseSize, SceneTruth, TruthPart, Vec3};

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("invalid record: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StateUnit {
    Deg,
    M,
    None,
}

impl StateUnit {
    pub fn for_joint(t: JointType) -> Self {
        match t {
            JointType::Revolute => StateUnit::Deg,
            JointType::Prismatic => StateUnit::M,
            JointType::Fixed => StateUnit::None,
        }
    }

    fn to_external(self, v: f64) -> f64 {
        if self == StateUnit::Deg {
            v.to_degrees()
        } else {
            v
        }
    }

    fn to_internal(self, v: f64) -> f64 {
        if self == StateUnit::Deg {
            v.to_radians()
        } else {
            v
        }
    }
}

/// Pose and joint fields shared by proposal and truth records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartGeometry {
    /// Row-major 3x3 rotation.
    pub rotation: [f64; 9],
    pub center: [f64; 3],
    /// Full side lengths, meters.
    pub size: [f64; 3],
    pub joint_type: JointType,
    pub axis: [f64; 3],
    pub origin: [f64; 3],
    pub state_current: f64,
    pub state_max: f64,
    pub state_unit: StateUnit,
}

impl PartGeometry {
    pub fn new(pose: &PoseSize, joint: &JointParams) -> Self {
        let r = &pose.rotation;
        let unit = StateUnit::for_joint(joint.joint_type);
        Self {
            rotation: std::array::from_fn(|k| r[(k / 3, k % 3)]),
            center: pose.center.into(),
            size: pose.size.into(),
            joint_type: joint.joint_type,
            axis: joint.axis.into(),
            origin: joint.origin.into(),
            state_current: unit.to_external(joint.state_current),
            state_max: unit.to_external(joint.state_max),
            state_unit: unit,
        }
    }

    pub fn pose(&self) -> PoseSize {
        PoseSize::new(Mat3::from_row_slice(&self.rotation), Vec3::from(self.center), Vec3::from(self.size))
    }

    pub fn joint(&self) -> Result<JointParams, IoError> {
        let expected = StateUnit::for_joint(self.joint_type);
        // Fixed joints carry zero states, so any unit label is harmless.
        if self.state_unit != expected && self.joint_type != JointType::Fixed {
            return Err(IoError::Invalid(format!(
                "{} joint with state_unit {:?}, expected {:?}",
                self.joint_type.name(),
                self.state_unit,
                expected
            )));
        }
        Ok(JointParams {
            joint_type: self.joint_type,
            axis: Vec3::from(self.axis),
            origin: Vec3::from(self.origin),
            state_current: self.state_unit.to_internal(self.state_current),
            state_max: self.state_unit.to_internal(self.state_max),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartRecord {
    pub scene: u64,
    /// Inference run; absent for fused output.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run: Option<usize>,
    pub id: usize,
    #[serde(flatten)]
    pub geometry: PartGeometry,
    pub joint_type_probs: [f64; 4],
    pub category_probs: Vec<f64>,
    pub embedding: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<AnalyticShape>,
}

impl PartRecord {
    pub fn new(p: &PartProposal, scene: u64, run: Option<usize>, id: usize) -> Self {
        Self {
            scene,
            run,
            id,
            geometry: PartGeometry::new(&p.pose, &p.joint),
            joint_type_probs: p.joint_type_probs,
            category_probs: p.category_probs.clone(),
            embedding: p.embedding.clone(),
            shape: p.shape.clone(),
        }
    }

    pub fn to_proposal(&self) -> Result<PartProposal, IoError> {
        Ok(PartProposal {
            pose: self.geometry.pose(),
            joint: self.geometry.joint()?,
            joint_type_probs: self.joint_type_probs,
            category_probs: self.category_probs.clone(),
            embedding: self.embedding.clone(),
            shape: self.shape.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub scene: u64,
    pub id: usize,
    #[serde(flatten)]
    pub geometry: PartGeometry,
    pub category: usize,
    pub instance: usize,
    pub instance_category: usize,
    pub shape: AnalyticShape,
    pub embedding: Vec<f64>,
}

/// A recovered instance: part ids and its voted category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub scene: u64,
    pub instance: usize,
    pub members: Vec<usize>,
    pub category: Option<usize>,
    pub confidence: f64,
    pub is_clique: bool,
}

pub fn truth_records(scene: u64, truth: &SceneTruth) -> Vec<TruthRecord> {
    truth
        .parts
        .iter()
        .map(|p| TruthRecord {
            scene,
            id: p.id,
            geometry: PartGeometry::new(&p.pose, &p.joint),
            category: p.category,
            instance: p.instance,
            instance_category: truth.instances.iter().find(|i| i.id == p.instance).map_or(p.category, |i| i.category),
            shape: p.shape.clone(),
            embedding: p.embedding.clone(),
        })
        .collect()
}

/// Scenes keyed by scene id; instances appear in order of first mention.
pub fn scenes_from_records(records: &[TruthRecord]) -> Result<BTreeMap<u64, SceneTruth>, IoError> {
    let mut scenes: BTreeMap<u64, SceneTruth> = BTreeMap::new();
    for r in records {
        let scene = scenes.entry(r.scene).or_default();
        match scene.instances.iter().find(|i| i.id == r.instance) {
            Some(i) if i.category != r.instance_category => {
                return Err(IoError::Invalid(format!(
                    "scene {} instance {} has categories {} and {}",
                    r.scene, r.instance, i.category, r.instance_category
                )))
            }
            Some(_) => {}
            None => scene.instances.push(InstanceInfo { id: r.instance, category: r.instance_category }),
        }
        scene.parts.push(TruthPart {
            id: r.id,
            pose: r.geometry.pose(),
            joint: r.geometry.joint()?,
            category: r.category,
            instance: r.instance,
            shape: r.shape.clone(),
            embedding: r.embedding.clone(),
        });
    }
    Ok(scenes)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), IoError> {
    let io_err = |source| IoError::Io { path: path.display().to_string(), source };
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| IoError::Invalid(e.to_string()))?;
        writeln!(out, "{line}").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// Reads one record per non-blank line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, IoError> {
    let name = path.display().to_string();
    let file = File::open(path).map_err(|source| IoError::Io { path: name.clone(), source })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| IoError::Io { path: name.clone(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| IoError::Parse { path: name.clone(), line: i + 1, message: e.to_string() })?;
        out.push(record);
    }
    Ok(out)
}
