use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::FrameSample;

/// Which subsets of a sample's views to keep when augmenting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SubsetPolicy {
    /// Every non-empty subset.
    Exhaustive,
    /// `2·V` random non-empty subsets plus the full set.
    Random,
    /// Exhaustive up to five views, random above.
    #[default]
    Auto,
}

const AUTO_EXHAUSTIVE_MAX: usize = 5;

/// Keep-masks over `num_views` views. The full mask always comes first and
/// every mask keeps at least one view.
pub fn view_subsets(num_views: usize, policy: SubsetPolicy, rng: &mut impl Rng) -> Vec<Vec<bool>> {
    if num_views == 0 {
        return vec![Vec::new()];
    }
    let full = vec![true; num_views];
    let exhaustive = match policy {
        SubsetPolicy::Exhaustive => true,
        SubsetPolicy::Random => false,
        SubsetPolicy::Auto => num_views <= AUTO_EXHAUSTIVE_MAX,
    };
    let mut out = vec![full.clone()];
    if exhaustive {
        let all = (1u64 << num_views) - 1;
        for bits in 1..all {
            out.push((0..num_views).map(|i| bits >> i & 1 == 1).collect());
        }
        return out;
    }
    let mut seen = BTreeSet::from([full]);
    for _ in 0..2 * num_views {
        let mask = loop {
            let m: Vec<bool> = (0..num_views).map(|_| rng.random_bool(0.5)).collect();
            if m.iter().any(|&k| k) {
                break m;
            }
        };
        if seen.insert(mask.clone()) {
            out.push(mask);
        }
    }
    out
}

/// Indices into `sample.views` of cameras with at least one visible keypoint.
pub(crate) fn active_views(sample: &FrameSample) -> Vec<usize> {
    sample
        .views
        .iter()
        .enumerate()
        .filter(|(_, v)| v.skeletons.iter().any(|s| s.any_visible()))
        .map(|(i, _)| i)
        .collect()
}

/// Copy of `sample` with every skeleton in `views[i]` hidden where
/// `keep[i]` is false. Removed views stay present, fully invisible.
pub fn apply_view_subset(sample: &FrameSample, views: &[usize], keep: &[bool]) -> FrameSample {
    let mut out = sample.clone();
    for (&v, &k) in views.iter().zip(keep) {
        if !k {
            out.views[v].skeletons.iter_mut().for_each(|s| s.hide_all());
        }
    }
    out
}

/// `(augmented, seed)` pairs for one single-person sample. The first pair is
/// the untouched sample paired with itself.
pub fn augment_views(sample: &FrameSample, policy: SubsetPolicy, rng: &mut impl Rng) -> Vec<(FrameSample, FrameSample)> {
    let views = active_views(sample);
    view_subsets(views.len(), policy, rng)
        .into_iter()
        .map(|keep| (apply_view_subset(sample, &views, &keep), sample.clone()))
        .collect()
}
