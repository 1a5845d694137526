//! Association of parts into object instances by embedding distance, and
//! the instance category vote.

use serde::Serialize;

use crate::types::PartProposal;

/// One recovered instance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InstanceGroup {
    /// Part indices in ascending order.
    pub members: Vec<usize>,
    /// Whether every pair of members is closer than the threshold, not just
    /// connected through a chain of close pairs.
    pub is_clique: bool,
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Connected components of the graph linking parts whose embeddings are
/// closer than `tau_z`. Groups are ordered by their smallest member.
pub fn group_embeddings(embeddings: &[Vec<f64>], tau_z: f64) -> Vec<InstanceGroup> {
    let n = embeddings.len();
    let close = |i: usize, j: usize| distance(&embeddings[i], &embeddings[j]) < tau_z;
    let mut label = vec![usize::MAX; n];
    let mut groups = Vec::new();
    for start in 0..n {
        if label[start] != usize::MAX {
            continue;
        }
        let id = groups.len();
        label[start] = id;
        let mut members = vec![start];
        let mut head = 0;
        while head < members.len() {
            let i = members[head];
            head += 1;
            for j in 0..n {
                if label[j] == usize::MAX && close(i, j) {
                    label[j] = id;
                    members.push(j);
                }
            }
        }
        members.sort_unstable();
        let is_clique = members.iter().enumerate().all(|(a, &i)| members[a + 1..].iter().all(|&j| close(i, j)));
        groups.push(InstanceGroup { members, is_clique });
    }
    groups
}

pub fn group_parts(parts: &[PartProposal], tau_z: f64) -> Vec<InstanceGroup> {
    let embeddings: Vec<Vec<f64>> = parts.iter().map(|p| p.embedding.clone()).collect();
    group_embeddings(&embeddings, tau_z)
}

/// Category of an instance: the arg-max category of the member with the
/// most confident category prediction, with that probability. Ties go to
/// the earlier member, then the lower category. `None` for no members.
pub fn instance_category(members: &[&PartProposal]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for part in members {
        let Some((cat, p)) = part
            .category_probs
            .iter()
            .copied()
            .enumerate()
            .fold(None, |acc: Option<(usize, f64)>, (i, p)| match acc {
                Some((_, q)) if q >= p => acc,
                _ => Some((i, p)),
            })
        else {
            continue;
        };
        if best.is_none_or(|(_, q)| p > q) {
            best = Some((cat, p));
        }
    }
    best
}
