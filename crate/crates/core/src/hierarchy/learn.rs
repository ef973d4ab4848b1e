use std::collections::BTreeMap;

use log::{debug, info};
use rayon::prelude::*;

use super::cooccur::{accumulate_cooccurrence, estimate_spring, find_local_maxima};
use super::detect::{detect_layer, sort_canonical};
use super::{ClassScope, CompositionDef, Hierarchy, NeighborSpec};
use crate::error::{Error, Result};
use crate::trajkit::Element;

/// Sharing policy for one layer: layer 1 is shared across classes, higher
/// layers are learned per class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LearnScope {
    Shared,
    PerClass,
}

impl LearnScope {
    pub fn for_layer(layer: usize) -> Self {
        if layer <= 1 {
            LearnScope::Shared
        } else {
            LearnScope::PerClass
        }
    }
}

/// A training video's detections, one list per layer learned so far.
#[derive(Debug, Clone)]
pub struct VideoElements {
    pub label: String,
    pub layers: Vec<Vec<Element>>,
}

/// Learn the inventory of `layer` from the detections at `layer - 1`.
pub fn learn_layer(
    mut hierarchy: Hierarchy,
    videos: &[VideoElements],
    layer: usize,
    scope: LearnScope,
) -> Result<Hierarchy> {
    hierarchy.params.validate()?;
    if layer == 0 || layer != hierarchy.depth() {
        return Err(Error::ConfigInvalid(format!(
            "cannot learn layer {layer} on a hierarchy of depth {}",
            hierarchy.depth()
        )));
    }
    match (layer, scope) {
        (1, LearnScope::PerClass) => {
            return Err(Error::ScopeViolation {
                layer,
                required: "shared",
            })
        }
        (n, LearnScope::Shared) if n >= 2 => {
            return Err(Error::ScopeViolation {
                layer,
                required: "per-class",
            })
        }
        _ => {}
    }
    if let Some(v) = videos.iter().find(|v| v.layers.len() < layer) {
        return Err(Error::MissingLayer(v.layers.len()));
    }

    let params = hierarchy.params.clone();
    let mut groups: BTreeMap<ClassScope, Vec<&VideoElements>> = BTreeMap::new();
    for v in videos {
        let key = match scope {
            LearnScope::Shared => ClassScope::Shared,
            LearnScope::PerClass => ClassScope::Class(v.label.clone()),
        };
        groups.entry(key).or_default().push(v);
    }
    let cap = match scope {
        LearnScope::Shared => params.cap_shared,
        LearnScope::PerClass => params.cap_per_class,
    };
    let (r, l) = params.radius_bins();
    let below = layer - 1;
    let inventory = hierarchy.inventory_size(below);

    let mut any_candidate = false;
    let mut learned: Vec<CompositionDef> = Vec::new();
    for (class_scope, members) in groups {
        let elements: Vec<&[Element]> = members.iter().map(|v| v.layers[below].as_slice()).collect();
        let maps = accumulate_cooccurrence(&elements, params.bins(), r, l, inventory)?;
        let mut candidates = Vec::new();
        for (&(central, neighbor), map) in &maps.maps {
            for peak in find_local_maxima(map, params.n_per_pair, params.min_support) {
                let spring = estimate_spring(map, peak.bin, params.sigma_min);
                candidates.push(CompositionDef {
                    layer,
                    type_id: candidates.len(),
                    central_type: central,
                    neighbors: vec![NeighborSpec {
                        sub_type: neighbor,
                        offset: spring.offset,
                        sigma: spring.sigma,
                    }],
                    support: u64::from(peak.count),
                    class_scope: class_scope.clone(),
                });
            }
        }
        debug!(
            "layer {layer} {:?}: {} candidates from {} pair maps",
            class_scope,
            candidates.len(),
            maps.maps.len()
        );
        if candidates.is_empty() {
            continue;
        }
        any_candidate = true;

        // Frequency after inference: how often each candidate is re-detected.
        let mut links = vec![Vec::new(); inventory];
        for c in &candidates {
            links[c.central_type].push(c.type_id);
        }
        let counts: Vec<Vec<u64>> = elements
            .par_iter()
            .map(|video| {
                let mut sorted = video.to_vec();
                sort_canonical(&mut sorted);
                let mut counts = vec![0u64; candidates.len()];
                for e in detect_layer(&sorted, &candidates, &links, &params, layer) {
                    counts[e.type_id] += 1;
                }
                counts
            })
            .collect();
        let mut frequency = vec![0u64; candidates.len()];
        for c in counts {
            for (f, n) in frequency.iter_mut().zip(c) {
                *f += n;
            }
        }
        let mut ranked: Vec<usize> = (0..candidates.len())
            .filter(|&i| frequency[i] >= u64::from(params.min_support.max(1)))
            .collect();
        ranked.sort_by(|&a, &b| frequency[b].cmp(&frequency[a]).then(a.cmp(&b)));
        ranked.truncate(cap);
        for i in ranked {
            let mut c = candidates[i].clone();
            c.support = frequency[i];
            c.type_id = learned.len();
            learned.push(c);
        }
    }
    if !any_candidate || learned.is_empty() {
        return Err(Error::InsufficientData(layer));
    }
    info!("layer {layer}: learned {} compositions", learned.len());
    hierarchy.compositions.push(learned);
    hierarchy.rebuild_links();
    Ok(hierarchy)
}

/// Learn every layer above 0 from labeled layer-0 elements, detecting each
/// new layer on the training videos before learning the next.
pub fn learn_hierarchy(
    mut hierarchy: Hierarchy,
    videos: &[(String, Vec<Element>)],
) -> Result<Hierarchy> {
    let mut state: Vec<VideoElements> = videos
        .iter()
        .map(|(label, layer0)| {
            let mut base = layer0.clone();
            sort_canonical(&mut base);
            VideoElements {
                label: label.clone(),
                layers: vec![base],
            }
        })
        .collect();
    for layer in hierarchy.depth()..hierarchy.params.layers {
        hierarchy = learn_layer(hierarchy, &state, layer, LearnScope::for_layer(layer))?;
        let h = &hierarchy;
        state.par_iter_mut().for_each(|v| {
            let next = detect_layer(
                &v.layers[layer - 1],
                h.layer(layer),
                &h.links[layer - 1],
                &h.params,
                layer,
            );
            v.layers.push(next);
        });
    }
    Ok(hierarchy)
}

#[cfg(test)]
mod tests {
    use super::super::HierarchyParams;
    use super::*;
    use crate::trajkit::Anchor;

    fn el(type_id: usize, x: f64, y: f64, t: i64) -> Element {
        Element {
            layer: 0,
            type_id,
            anchor: Anchor { x, y, t },
            children: vec![],
            source: None,
        }
    }

    fn video(label: &str, els: Vec<Element>) -> VideoElements {
        VideoElements {
            label: label.into(),
            layers: vec![els],
        }
    }

    #[test]
    fn isolated_elements_are_insufficient() {
        let videos: Vec<_> = (0..10)
            .map(|i| video("a", vec![el(i % 4, 10.0, 10.0, 5)]))
            .collect();
        let h = Hierarchy::new(4, HierarchyParams::default());
        assert!(matches!(
            learn_layer(h, &videos, 1, LearnScope::Shared),
            Err(Error::InsufficientData(1))
        ));
    }

    #[test]
    fn scope_rules() {
        let h = Hierarchy::new(4, HierarchyParams::default());
        assert!(matches!(
            learn_layer(h, &[], 1, LearnScope::PerClass),
            Err(Error::ScopeViolation { layer: 1, .. })
        ));
    }

    #[test]
    fn cap_keeps_most_frequent() {
        // Pair (0, 1) planted 40 times, pair (2, 3) 30 times, far apart in space.
        let mut videos = Vec::new();
        for i in 0..40 {
            let mut v = vec![el(0, 50.0, 50.0, 10), el(1, 58.0, 50.0, 12)];
            if i < 30 {
                v.push(el(2, 200.0, 150.0, 10));
                v.push(el(3, 200.0, 162.0, 14));
            }
            videos.push(video("a", v));
        }
        let params = HierarchyParams {
            cap_shared: 1,
            ..Default::default()
        };
        let h = learn_layer(Hierarchy::new(4, params), &videos, 1, LearnScope::Shared).unwrap();
        let layer = h.layer(1);
        assert_eq!(layer.len(), 1);
        assert_eq!(layer[0].central_type, 0);
        assert_eq!(layer[0].neighbors[0].sub_type, 1);
        assert_eq!(layer[0].neighbors[0].offset, [2, 0, 1]);
        assert_eq!(layer[0].support, 40);
        h.audit().unwrap();
    }
}
