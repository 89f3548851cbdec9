use std::rc::Rc;

use rand::seq::index::sample as sample_indices;
use rand::Rng;

use super::features::{node_feature_len, write_detection, VIEW_SLOTS};
use super::MatcherError;
use crate::diffcore::{Adjacency, Matrix};
use crate::geometry::Rig;
use crate::scene_forge::{CameraView, DetectionRef, FrameSample, PersonTrack};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    Head,
    Edge,
}

/// Head nodes (one per detection) followed by edge nodes (one per
/// cross-camera head pair). Node `heads.len() + e` is edge `e`.
#[derive(Debug, Clone)]
pub struct MatchGraph {
    pub features: Matrix,
    /// Detection behind each head node.
    pub heads: Vec<DetectionRef>,
    /// Rig camera index of each head node.
    pub head_cameras: Vec<usize>,
    /// Camera id of each head node.
    pub head_camera_ids: Vec<String>,
    /// Head-node pairs `(a, b)`, `a < b`, of each edge node.
    pub edges: Vec<(usize, usize)>,
    pub adjacency: Rc<Adjacency>,
    pub labels: Option<Vec<f64>>,
    pub scores: Option<Vec<f64>>,
}

impl MatchGraph {
    pub fn num_nodes(&self) -> usize {
        self.heads.len() + self.edges.len()
    }

    pub fn kind(&self, node: usize) -> NodeKind {
        if node < self.heads.len() {
            NodeKind::Head
        } else {
            NodeKind::Edge
        }
    }

    pub fn edge_node(&self, edge: usize) -> usize {
        self.heads.len() + edge
    }
}

/// Builds the matching graph of one frame. Detections from the same camera
/// never share an edge node.
pub fn build_graph(sample: &FrameSample, rig: &Rig) -> Result<MatchGraph, MatcherError> {
    if sample.num_detections() == 0 {
        return Err(MatcherError::EmptyFrame(sample.frame_id));
    }
    let nk = sample.num_keypoints().expect("non-empty frame");
    let nc = rig.len();
    let mut heads = Vec::new();
    let mut head_cameras = Vec::new();
    let mut head_camera_ids = Vec::new();
    for (r, view, det) in sample.detections() {
        let c = rig
            .index_of(&view.camera_id)
            .ok_or_else(|| MatcherError::UnknownCamera(view.camera_id.clone()))?;
        if det.keypoints.len() != nk {
            return Err(MatcherError::KeypointCount {
                expected: nk,
                found: det.keypoints.len(),
            });
        }
        heads.push(r);
        head_cameras.push(c);
        head_camera_ids.push(view.camera_id.clone());
    }
    let h = heads.len();
    let mut edges = Vec::new();
    for a in 0..h {
        for b in a + 1..h {
            if head_cameras[a] != head_cameras[b] {
                edges.push((a, b));
            }
        }
    }
    let width = node_feature_len(nk, nc);
    let mut features = Matrix::zeros((h + edges.len(), width));
    for (i, r) in heads.iter().enumerate() {
        let mut row = features.row_mut(i);
        let row = row.as_slice_mut().expect("contiguous rows");
        let c = head_cameras[i];
        write_detection(&mut row[..width - 2], VIEW_SLOTS, nc, c, rig.get(c), sample.detection(*r));
        row[width - 2] = 1.0;
    }
    for e in 0..edges.len() {
        features[(h + e, width - 1)] = 1.0;
    }
    let mut neighbors: Vec<Vec<usize>> = (0..h + edges.len()).map(|i| vec![i]).collect();
    for (e, &(a, b)) in edges.iter().enumerate() {
        let node = h + e;
        neighbors[node].extend([a, b]);
        neighbors[a].push(node);
        neighbors[b].push(node);
    }
    let adjacency = Rc::new(Adjacency::new(neighbors).expect("indices in range with self-loops"));
    let labels = label_by_person(sample, &heads, &edges);
    Ok(MatchGraph {
        features,
        heads,
        head_cameras,
        head_camera_ids,
        edges,
        adjacency,
        labels,
        scores: None,
    })
}

/// Edge labels from detection person tags, when every detection has one.
fn label_by_person(sample: &FrameSample, heads: &[DetectionRef], edges: &[(usize, usize)]) -> Option<Vec<f64>> {
    let ids: Option<Vec<u32>> = heads.iter().map(|r| sample.detection(*r).person_id).collect();
    let ids = ids?;
    Some(
        edges
            .iter()
            .map(|&(a, b)| if ids[a] == ids[b] { 1.0 } else { 0.0 })
            .collect(),
    )
}

/// Unions one random frame of each of `P ~ U{1..max_persons}` distinct
/// tracks into a single frame, tagging detections with the track index.
/// Skeletons without visible keypoints are left out.
pub(crate) fn combine_tracks(
    tracks: &[&[FrameSample]],
    rig: &Rig,
    max_persons: usize,
    rng: &mut impl Rng,
) -> Option<FrameSample> {
    let usable: Vec<usize> = (0..tracks.len())
        .filter(|&t| tracks[t].iter().any(|f| f.detections().any(|(_, _, s)| s.any_visible())))
        .collect();
    if usable.is_empty() {
        return None;
    }
    let p = rng.random_range(1..=max_persons.clamp(1, usable.len()));
    let mut views: Vec<CameraView> = rig
        .ids()
        .into_iter()
        .map(|camera_id| CameraView {
            camera_id,
            skeletons: Vec::new(),
        })
        .collect();
    let mut any = false;
    for pick in sample_indices(rng, usable.len(), p) {
        let t = usable[pick];
        let frames = tracks[t];
        let frame = (0..16)
            .map(|_| &frames[rng.random_range(0..frames.len())])
            .find(|f| f.detections().any(|(_, _, s)| s.any_visible()));
        let Some(frame) = frame else { continue };
        for view in &frame.views {
            let Some(c) = rig.index_of(&view.camera_id) else { continue };
            for s in view.skeletons.iter().filter(|s| s.any_visible()) {
                let mut s = s.clone();
                s.person_id = Some(t as u32);
                views[c].skeletons.push(s);
                any = true;
            }
        }
    }
    any.then_some(FrameSample {
        frame_id: 0,
        views,
        ground_truth: None,
    })
}

/// A labelled training graph from randomly combined single-person tracks.
pub fn synthesize_training_graph(
    tracks: &[PersonTrack],
    rig: &Rig,
    max_persons: usize,
    rng: &mut impl Rng,
) -> Result<MatchGraph, MatcherError> {
    let slices: Vec<&[FrameSample]> = tracks.iter().map(|t| t.frames()).collect();
    let sample = combine_tracks(&slices, rig, max_persons, rng).ok_or(MatcherError::InsufficientTracks)?;
    build_graph(&sample, rig)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene_forge::{generate_rig, generate_track, Keypoint2D, SkeletonDetection, SynthConfig};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rig(cameras: usize) -> Rig {
        generate_rig(&SynthConfig {
            cameras,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    fn det(person: u32, nk: usize) -> SkeletonDetection {
        SkeletonDetection {
            person_id: Some(person),
            keypoints: (0..nk).map(|k| Keypoint2D::seen(100.0 + k as f64, 200.0, 0.9)).collect(),
        }
    }

    fn frame(rig: &Rig, per_camera: &[Vec<u32>]) -> FrameSample {
        FrameSample {
            frame_id: 1,
            views: rig
                .ids()
                .into_iter()
                .zip(per_camera)
                .map(|(camera_id, ids)| CameraView {
                    camera_id,
                    skeletons: ids.iter().map(|&p| det(p, 15)).collect(),
                })
                .collect(),
            ground_truth: None,
        }
    }

    fn check_structure(g: &MatchGraph, nk: usize, nc: usize) {
        let h = g.heads.len();
        assert_eq!(g.features.ncols(), nk * nc * 10 + 2);
        for (i, row) in g.features.outer_iter().enumerate() {
            if i < h {
                assert_eq!(row.as_slice().unwrap()[row.len() - 2..], [1.0, 0.0]);
                let c = g.head_cameras[i];
                for (j, &x) in row.iter().take(row.len() - 2).enumerate() {
                    if (j / 10) % nc != c {
                        assert_eq!(x, 0.0);
                    }
                }
            } else {
                assert!(row.iter().take(row.len() - 1).all(|&x| x == 0.0));
                assert_eq!(row[row.len() - 1], 1.0);
            }
        }
        for (e, &(a, b)) in g.edges.iter().enumerate() {
            let node = h + e;
            let nb = g.adjacency.neighbors(node);
            assert_eq!(nb.len(), 3);
            assert!(a < b && nb.contains(&a) && nb.contains(&b));
            assert_ne!(g.head_cameras[a], g.head_cameras[b]);
        }
    }

    #[test]
    fn node_counts() {
        let r2 = rig(2);
        let g = build_graph(&frame(&r2, &[vec![0], vec![0]]), &r2).unwrap();
        assert_eq!((g.heads.len(), g.edges.len()), (2, 1));
        let r3 = rig(3);
        let g = build_graph(&frame(&r3, &[vec![0, 1], vec![0, 1], vec![0, 1]]), &r3).unwrap();
        assert_eq!((g.heads.len(), g.edges.len()), (6, 12));
        let labels = g.labels.as_ref().unwrap();
        assert_eq!(labels.iter().filter(|&&l| l == 1.0).count(), 6);
        check_structure(&g, 15, 3);
        let g = build_graph(&frame(&r3, &[vec![0], vec![], vec![]]), &r3).unwrap();
        assert_eq!((g.heads.len(), g.edges.len()), (1, 0));
        let empty = frame(&r3, &[vec![], vec![], vec![]]);
        assert!(matches!(build_graph(&empty, &r3), Err(MatcherError::EmptyFrame(1))));
    }

    #[test]
    fn single_person_graph_is_all_positive() {
        let cfg = SynthConfig::default();
        let rig = generate_rig(&cfg).unwrap();
        let (track, _) = generate_track(&cfg, &rig, 0, 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = synthesize_training_graph(&[track], &rig, 10, &mut rng).unwrap();
        assert!(g.labels.unwrap().iter().all(|&l| l == 1.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn synthesized_graphs_keep_invariants(seed in 0u64..10_000) {
            let cfg = SynthConfig { seed, ..SynthConfig::default() };
            let rig = generate_rig(&cfg).unwrap();
            let tracks: Vec<_> = (0..6).map(|i| generate_track(&cfg, &rig, i, 5).unwrap().0).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = synthesize_training_graph(&tracks, &rig, 10, &mut rng).unwrap();
            check_structure(&g, 15, 5);
            let labels = g.labels.as_ref().unwrap();
            prop_assert_eq!(labels.len(), g.edges.len());
            for (&(a, b), &l) in g.edges.iter().zip(labels) {
                prop_assert!(l == 0.0 || l == 1.0);
                prop_assert!(a < g.heads.len() && b < g.heads.len());
            }
        }
    }
}
