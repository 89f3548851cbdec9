use std::collections::BTreeSet;

use super::MatchGraph;
use crate::scene_forge::{DetectionRef, FrameSample};

/// Detections attributed to one person, at most one per camera.
#[derive(Debug, Clone, PartialEq)]
pub struct PersonGroup {
    /// `(camera_id, detection index within that camera's view)`, sorted.
    pub members: Vec<(String, usize)>,
    /// Frame-level references, aligned with `members`.
    pub detections: Vec<DetectionRef>,
    /// Rig camera index of each member.
    pub cameras: Vec<usize>,
    /// Mean score of the edge nodes joining two members; 0 for singletons.
    pub confidence: f64,
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Greedy grouping: edges at or above `threshold` are merged in order of
/// descending score (ties by ascending head pair) unless the merge would put
/// two detections of one camera in the same group.
///
/// Panics if the graph has not been scored.
pub fn group_views(graph: &MatchGraph, threshold: f64) -> Vec<PersonGroup> {
    let scores = graph.scores.as_ref().expect("graph must be scored before grouping");
    let h = graph.heads.len();
    let mut order: Vec<usize> = (0..graph.edges.len()).filter(|&e| scores[e] >= threshold).collect();
    order.sort_by(|&x, &y| scores[y].total_cmp(&scores[x]).then(graph.edges[x].cmp(&graph.edges[y])));

    let mut parent: Vec<usize> = (0..h).collect();
    let mut cams: Vec<BTreeSet<usize>> = graph.head_cameras.iter().map(|&c| BTreeSet::from([c])).collect();
    for e in order {
        let (a, b) = graph.edges[e];
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra == rb || !cams[ra].is_disjoint(&cams[rb]) {
            continue;
        }
        let (keep, gone) = if ra < rb { (ra, rb) } else { (rb, ra) };
        parent[gone] = keep;
        let moved = std::mem::take(&mut cams[gone]);
        cams[keep].extend(moved);
    }

    let roots: Vec<usize> = (0..h).map(|i| find(&mut parent, i)).collect();
    let mut members_of: Vec<Vec<usize>> = vec![Vec::new(); h];
    for (i, &r) in roots.iter().enumerate() {
        members_of[r].push(i);
    }
    let mut score_sum = vec![0.0; h];
    let mut score_count = vec![0usize; h];
    for (e, &(a, b)) in graph.edges.iter().enumerate() {
        if roots[a] == roots[b] {
            score_sum[roots[a]] += scores[e];
            score_count[roots[a]] += 1;
        }
    }
    (0..h)
        .filter(|&r| roots[r] == r)
        .map(|r| {
            let mut heads = members_of[r].clone();
            heads.sort_by_key(|&i| graph.heads[i]);
            PersonGroup {
                members: heads
                    .iter()
                    .map(|&i| (graph.head_camera_ids[i].clone(), graph.heads[i].index))
                    .collect(),
                detections: heads.iter().map(|&i| graph.heads[i]).collect(),
                cameras: heads.iter().map(|&i| graph.head_cameras[i]).collect(),
                confidence: if score_count[r] == 0 {
                    0.0
                } else {
                    score_sum[r] / score_count[r] as f64
                },
            }
        })
        .collect()
}

/// A grouping as a canonical set of `(camera_id, person tag)` sets, for
/// comparing partitions independently of detection order.
pub fn partition_by_person(sample: &FrameSample, groups: &[PersonGroup]) -> BTreeSet<BTreeSet<(String, Option<u32>)>> {
    groups
        .iter()
        .map(|g| {
            g.members
                .iter()
                .zip(&g.detections)
                .map(|((cam, _), r)| (cam.clone(), sample.detection(*r).person_id))
                .collect()
        })
        .collect()
}

/// True when every group holds exactly the detections of one tagged person
/// and each person forms one group.
pub fn recovers_partition(sample: &FrameSample, groups: &[PersonGroup]) -> bool {
    let mut seen = BTreeSet::new();
    for g in groups {
        let ids: BTreeSet<Option<u32>> = g.detections.iter().map(|r| sample.detection(*r).person_id).collect();
        if ids.len() != 1 {
            return false;
        }
        let id = ids.into_iter().next().expect("one id");
        if id.is_none() || !seen.insert(id) {
            return false;
        }
    }
    true
}
