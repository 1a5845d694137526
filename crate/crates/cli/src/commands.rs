use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use kpf_core::evaluation::{evaluate, ApResult, EvalConfig, EvalReport, SceneEval};
use kpf_core::exec::{self, Execution};
use kpf_core::fusion::{run_pipeline, KpfConfig, Pipeline};
use kpf_core::grouping::{group_parts, instance_category};
use kpf_core::io::{read_jsonl, scenes_from_records, truth_records, write_jsonl, InstanceRecord, IoError, PartRecord, TruthRecord};
use kpf_core::losses::{cost_matrix, hungarian_match, match_cost, sampled_part_loss, tau_z, MatchCostWeights};
use kpf_core::scenegen::{generate_scene, perturb_to_runs, GenConfig};
use kpf_core::{PartProposal, SceneTruth};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::Common;

/// Training margin whose grouping threshold is used when none is given.
const DEFAULT_TAU_Z_PRIME: f64 = 0.5;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        match e {
            IoError::Io { .. } => CliError::Io(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

fn invalid(e: impl std::fmt::Display) -> CliError {
    CliError::Validation(e.to_string())
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, CliError> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("toml") => toml::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display()))),
        Some("json") => serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display()))),
        _ => Err(invalid(format!("{}: config must be .toml or .json", path.display()))),
    }
}

fn out_path(common: &Common, name: &str) -> Result<PathBuf, CliError> {
    fs::create_dir_all(&common.out_dir).map_err(|e| CliError::Io(format!("{}: {e}", common.out_dir.display())))?;
    Ok(common.out_dir.join(name))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let io = |e: csv::Error| CliError::Io(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    for r in rows {
        w.serialize(r).map_err(io)?;
    }
    w.flush().map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(invalid)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Proposals per scene, ordered by record id.
fn parts_by_scene(records: &[PartRecord]) -> Result<BTreeMap<u64, Vec<(usize, PartProposal)>>, CliError> {
    let mut out: BTreeMap<u64, Vec<(usize, PartProposal)>> = BTreeMap::new();
    for r in records {
        out.entry(r.scene).or_default().push((r.id, r.to_proposal()?));
    }
    for parts in out.values_mut() {
        parts.sort_by_key(|(id, _)| *id);
    }
    Ok(out)
}

fn load_truth(path: &Path) -> Result<BTreeMap<u64, SceneTruth>, CliError> {
    let records: Vec<TruthRecord> = read_jsonl(path)?;
    let scenes = scenes_from_records(&records)?;
    for (id, s) in &scenes {
        if let Some(v) = s.violations().first() {
            return Err(invalid(format!("scene {id}: {v}")));
        }
    }
    Ok(scenes)
}

pub fn simulate(common: &Common, seed: Option<u64>, scenes: u64) -> Result<(), CliError> {
    let mut cfg: GenConfig = load_config(common.config.as_deref())?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(invalid)?;
    let seeds: Vec<u64> = (0..scenes).map(|i| cfg.seed.wrapping_add(i)).collect();
    let generated = exec::map(Execution::Parallel, &seeds, |&s| {
        let cfg = GenConfig { seed: s, ..cfg.clone() };
        let truth = generate_scene(&cfg)?;
        let runs = perturb_to_runs(&truth, &cfg)?;
        Ok::<_, kpf_core::scenegen::GenError>((s, truth, runs))
    });
    let mut truth_out = Vec::new();
    let mut runs_out = Vec::new();
    for g in generated {
        let (s, truth, runs) = g.map_err(invalid)?;
        truth_out.extend(truth_records(s, &truth));
        for (r, run) in runs.iter().enumerate() {
            runs_out.extend(run.iter().enumerate().map(|(i, p)| PartRecord::new(p, s, Some(r), i)));
        }
    }
    write_jsonl(&out_path(common, "truth.jsonl")?, &truth_out)?;
    write_jsonl(&out_path(common, "runs.jsonl")?, &runs_out)?;
    Ok(())
}

pub fn fuse(common: &Common, runs_path: &Path, pipeline: &str) -> Result<(), CliError> {
    let cfg: KpfConfig = load_config(common.config.as_deref())?;
    cfg.validate().map_err(invalid)?;
    let pipeline: Pipeline = serde_json::from_value(serde_json::Value::String(pipeline.to_string()))
        .map_err(|_| invalid(format!("unknown pipeline {pipeline:?}")))?;
    let records: Vec<PartRecord> = read_jsonl(runs_path)?;
    let mut scenes: BTreeMap<u64, Vec<Vec<PartProposal>>> = BTreeMap::new();
    for r in &records {
        let run = r.run.ok_or_else(|| invalid(format!("scene {} record {} has no run index", r.scene, r.id)))?;
        if run >= cfg.n_q {
            return Err(invalid(format!("scene {} has run {run} but n_q = {}", r.scene, cfg.n_q)));
        }
        let runs = scenes.entry(r.scene).or_insert_with(|| vec![Vec::new(); cfg.n_q]);
        runs[run].push(r.to_proposal()?);
    }
    let scenes: Vec<(u64, Vec<Vec<PartProposal>>)> = scenes.into_iter().collect();
    let fused = exec::map(cfg.execution, &scenes, |(_, runs)| run_pipeline(runs, &cfg, pipeline));
    let mut out = Vec::new();
    for ((scene, _), parts) in scenes.iter().zip(fused) {
        let parts = parts.map_err(invalid)?;
        out.extend(parts.iter().enumerate().map(|(i, p)| PartRecord::new(p, *scene, None, i)));
    }
    write_jsonl(&out_path(common, "fused.jsonl")?, &out)?;
    Ok(())
}

fn instance_records(scene: u64, parts: &[(usize, PartProposal)], tau: f64) -> Vec<InstanceRecord> {
    let proposals: Vec<PartProposal> = parts.iter().map(|(_, p)| p.clone()).collect();
    group_parts(&proposals, tau)
        .into_iter()
        .enumerate()
        .map(|(k, g)| {
            let members: Vec<&PartProposal> = g.members.iter().map(|&m| &proposals[m]).collect();
            let vote = instance_category(&members);
            InstanceRecord {
                scene,
                instance: k,
                members: g.members.iter().map(|&m| parts[m].0).collect(),
                category: vote.map(|v| v.0),
                confidence: vote.map_or(0.0, |v| v.1),
                is_clique: g.is_clique,
            }
        })
        .collect()
}

pub fn group(common: &Common, parts_path: &Path, tau: Option<f64>) -> Result<(), CliError> {
    let tau = tau.unwrap_or_else(|| tau_z(DEFAULT_TAU_Z_PRIME));
    if !(tau > 0.0) {
        return Err(invalid(format!("tau_z = {tau} must be positive")));
    }
    let records: Vec<PartRecord> = read_jsonl(parts_path)?;
    let mut out = Vec::new();
    for (scene, parts) in parts_by_scene(&records)? {
        out.extend(instance_records(scene, &parts, tau));
    }
    write_jsonl(&out_path(common, "instances.jsonl")?, &out)?;
    Ok(())
}

#[derive(Serialize)]
struct MatchRow {
    scene: u64,
    truth_id: usize,
    pred_id: usize,
    cost: f64,
    corner: f64,
    rotation: f64,
    occupancy: f64,
    state_max: f64,
    state_current: f64,
    axis: f64,
    origin: f64,
    joint_type_ce: f64,
    category_ce: f64,
    total: f64,
    unrefined_total: f64,
}

pub fn match_parts(common: &Common, parts_path: &Path, truth_path: &Path, samples: usize, seed: u64) -> Result<(), CliError> {
    let weights: MatchCostWeights = load_config(common.config.as_deref())?;
    let truth = load_truth(truth_path)?;
    let records: Vec<PartRecord> = read_jsonl(parts_path)?;
    let preds = parts_by_scene(&records)?;
    let mut rows = Vec::new();
    for (scene, t) in &truth {
        let empty = Vec::new();
        let p = preds.get(scene).unwrap_or(&empty);
        let proposals: Vec<PartProposal> = p.iter().map(|(_, q)| q.clone()).collect();
        let costs = cost_matrix(&proposals, &t.parts, &weights);
        // With fewer predictions than truths, every prediction gets a truth instead.
        let pairs: Vec<(usize, usize)> = if proposals.len() >= t.parts.len() {
            hungarian_match(&costs).map_err(invalid)?.into_iter().enumerate().collect()
        } else {
            let transposed: Vec<Vec<f64>> = (0..t.parts.len()).map(|g| costs.iter().map(|row| row[g]).collect()).collect();
            let mut v: Vec<(usize, usize)> =
                hungarian_match(&transposed).map_err(invalid)?.into_iter().enumerate().map(|(pi, g)| (g, pi)).collect();
            v.sort_unstable();
            v
        };
        for (g, pi) in pairs {
            let (pred, gt) = (&proposals[pi], &t.parts[g]);
            let l = sampled_part_loss(pred, gt, samples, seed ^ (scene << 20) ^ gt.id as u64);
            rows.push(MatchRow {
                scene: *scene,
                truth_id: gt.id,
                pred_id: p[pi].0,
                cost: match_cost(pred, gt, &weights),
                corner: l.corner,
                rotation: l.rotation,
                occupancy: l.occupancy,
                state_max: l.state_max,
                state_current: l.state_current,
                axis: l.axis,
                origin: l.origin,
                joint_type_ce: l.joint_type_ce,
                category_ce: l.category_ce,
                total: l.total(),
                unrefined_total: l.unrefined_total(),
            });
        }
    }
    write_csv(&out_path(common, "matches.csv")?, &rows)
}

#[derive(Serialize)]
struct MapRow<'a> {
    metric: &'a str,
    threshold: f64,
    ap: f64,
    precision: f64,
    recall: f64,
    tp: usize,
    fp: usize,
    #[serde(rename = "fn")]
    fn_: usize,
}

fn map_rows(report: &EvalReport) -> Vec<MapRow<'static>> {
    let groups: [(&'static str, &Vec<ApResult>); 4] = [
        ("corner_distance", &report.corner),
        ("fscore", &report.fscore),
        ("chamfer", &report.chamfer),
        ("volumetric_iou", &report.iou),
    ];
    groups
        .into_iter()
        .flat_map(|(metric, results)| {
            results.iter().map(move |r| MapRow {
                metric,
                threshold: r.threshold,
                ap: r.ap,
                precision: r.precision,
                recall: r.recall,
                tp: r.tp,
                fp: r.fp,
                fn_: r.fn_,
            })
        })
        .collect()
}

#[derive(Serialize)]
struct KinematicsRow {
    joint_type: &'static str,
    count: usize,
    state: f64,
    state_unit: &'static str,
    orientation_deg: f64,
    min_distance_cm: Option<f64>,
}

pub fn eval(
    common: &Common,
    parts_path: &Path,
    truth_path: &Path,
    instances_path: Option<&Path>,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let mut cfg: EvalConfig = load_config(common.config.as_deref())?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let truth = load_truth(truth_path)?;
    let records: Vec<PartRecord> = read_jsonl(parts_path)?;
    let preds = parts_by_scene(&records)?;
    if let Some(scene) = preds.keys().find(|s| !truth.contains_key(s)) {
        return Err(invalid(format!("predictions for scene {scene} have no ground truth")));
    }
    let instances: Option<Vec<InstanceRecord>> = instances_path.map(read_jsonl).transpose()?;

    let mut scenes = Vec::new();
    for (scene, t) in truth {
        let parts = preds.get(&scene).cloned().unwrap_or_default();
        let groups: Vec<Vec<usize>> = match &instances {
            Some(all) => all
                .iter()
                .filter(|r| r.scene == scene)
                .map(|r| {
                    r.members
                        .iter()
                        .map(|id| {
                            parts.iter().position(|(pid, _)| pid == id).ok_or_else(|| {
                                invalid(format!("scene {scene} instance {} names unknown part {id}", r.instance))
                            })
                        })
                        .collect::<Result<Vec<usize>, CliError>>()
                })
                .collect::<Result<_, _>>()?,
            None => instance_records(scene, &parts, tau_z(DEFAULT_TAU_Z_PRIME))
                .iter()
                .map(|r| r.members.iter().map(|id| parts.iter().position(|(pid, _)| pid == id).expect("own ids")).collect())
                .collect(),
        };
        scenes.push(SceneEval { predictions: parts.into_iter().map(|(_, p)| p).collect(), groups, truth: t });
    }
    let report = evaluate(&scenes, &cfg).map_err(invalid)?;
    write_json(&out_path(common, "report.json")?, &report)?;
    write_csv(&out_path(common, "map.csv")?, &map_rows(&report))?;
    let j = &report.joints;
    let kinematics = [
        KinematicsRow {
            joint_type: "revolute",
            count: j.revolute.count,
            state: j.revolute.state,
            state_unit: "deg",
            orientation_deg: j.revolute.orientation,
            min_distance_cm: j.revolute.min_distance,
        },
        KinematicsRow {
            joint_type: "prismatic",
            count: j.prismatic.count,
            state: j.prismatic.state,
            state_unit: "cm",
            orientation_deg: j.prismatic.orientation,
            min_distance_cm: None,
        },
    ];
    write_csv(&out_path(common, "kinematics.csv")?, &kinematics)
}

#[derive(Serialize)]
struct AggregateRow {
    source: String,
    metric: String,
    threshold: f64,
    ap: f64,
    precision: f64,
}

pub fn report(common: &Common, paths: &[PathBuf]) -> Result<(), CliError> {
    let mut rows = Vec::new();
    let mut sums: BTreeMap<(String, u64), (f64, f64, f64, usize)> = BTreeMap::new();
    for path in paths {
        let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let report: EvalReport = serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        for r in map_rows(&report) {
            let slot = sums.entry((r.metric.to_string(), r.threshold.to_bits())).or_insert((r.threshold, 0.0, 0.0, 0));
            slot.1 += r.ap;
            slot.2 += r.precision;
            slot.3 += 1;
            rows.push(AggregateRow {
                source: path.display().to_string(),
                metric: r.metric.to_string(),
                threshold: r.threshold,
                ap: r.ap,
                precision: r.precision,
            });
        }
    }
    for ((metric, _), (threshold, ap, precision, n)) in sums {
        rows.push(AggregateRow { source: "mean".into(), metric, threshold, ap: ap / n as f64, precision: precision / n as f64 });
    }
    write_csv(&out_path(common, "aggregate.csv")?, &rows)
}
