use std::collections::{BTreeMap, BTreeSet};

use super::{BinSize, CompositionDef, Hierarchy, HierarchyParams};
use crate::error::{Error, Result};
use crate::trajkit::{Element, TrajectorySet};

/// Per-frame point sets, keyed by absolute frame index.
pub type FramePoints = BTreeMap<u32, Vec<[f32; 2]>>;

fn canonical_cmp(a: &Element, b: &Element) -> std::cmp::Ordering {
    a.anchor
        .cmp_canonical(&b.anchor)
        .then(a.type_id.cmp(&b.type_id))
        .then(a.source.cmp(&b.source))
        .then(a.children.cmp(&b.children))
}

pub(crate) fn sort_canonical(elements: &mut [Element]) {
    elements.sort_by(canonical_cmp);
}

/// Run the full bottom-up pass over a video's layer-0 elements.
///
/// Returns one element list per layer, each in canonical anchor order;
/// `children` index into the previous layer's list.
pub fn detect_elements(layer0: &[Element], hierarchy: &Hierarchy) -> Result<Vec<Vec<Element>>> {
    if hierarchy.compositions.is_empty() {
        return Err(Error::UnlearnedHierarchy);
    }
    if let Some(e) = layer0.iter().find(|e| e.layer != 0) {
        return Err(Error::LayerMismatch(0, e.layer));
    }
    let mut base = layer0.to_vec();
    sort_canonical(&mut base);
    let mut layers = vec![base];
    for n in 1..hierarchy.depth() {
        let next = detect_layer(
            &layers[n - 1],
            hierarchy.layer(n),
            &hierarchy.links[n - 1],
            &hierarchy.params,
            n,
        );
        layers.push(next);
    }
    Ok(layers)
}

/// Instantiate layer-`layer` compositions over the (canonically sorted)
/// elements of the layer below.
pub(crate) fn detect_layer(
    below: &[Element],
    compositions: &[CompositionDef],
    links: &[Vec<usize>],
    params: &HierarchyParams,
    layer: usize,
) -> Vec<Element> {
    let bins = params.bins();
    let mut by_type: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, e) in below.iter().enumerate() {
        by_type.entry(e.type_id).or_default().push(i);
    }
    let mut out = Vec::new();
    let mut used = Vec::new();
    for (ci, central) in below.iter().enumerate() {
        let Some(candidates) = links.get(central.type_id) else {
            continue;
        };
        for &cid in candidates {
            let comp = &compositions[cid];
            if comp.central_type != central.type_id {
                continue;
            }
            used.clear();
            used.push(ci);
            let mut complete = true;
            for slot in &comp.neighbors {
                let pool = by_type.get(&slot.sub_type).map_or(&[][..], Vec::as_slice);
                match find_in_gate(below, pool, central, slot, bins, params.gate_tau, &used) {
                    Some(j) => used.push(j),
                    None => {
                        complete = false;
                        break;
                    }
                }
            }
            if complete {
                out.push(Element {
                    layer,
                    type_id: comp.type_id,
                    anchor: central.anchor,
                    children: used.clone(),
                    source: None,
                });
            }
        }
    }
    sort_canonical(&mut out);
    out
}

/// Gate half-widths in pixels/frames for a neighbor slot.
pub(crate) fn gate(slot: &super::NeighborSpec, bins: BinSize, tau: f64) -> [f64; 3] {
    [
        tau * slot.sigma[0] * bins.spatial,
        tau * slot.sigma[1] * bins.spatial,
        tau * slot.sigma[2] * bins.temporal as f64,
    ]
}

pub(crate) fn expected_offset(slot: &super::NeighborSpec, bins: BinSize) -> [f64; 3] {
    [
        slot.offset[0] as f64 * bins.spatial,
        slot.offset[1] as f64 * bins.spatial,
        (slot.offset[2] * bins.temporal) as f64,
    ]
}

/// Lowest canonical index in `pool` (sorted ascending) whose anchor lies
/// within the slot's gate around the expected position.
fn find_in_gate(
    below: &[Element],
    pool: &[usize],
    central: &Element,
    slot: &super::NeighborSpec,
    bins: BinSize,
    tau: f64,
    exclude: &[usize],
) -> Option<usize> {
    let g = gate(slot, bins, tau);
    let off = expected_offset(slot, bins);
    let t_lo = central.anchor.t as f64 + off[2] - g[2];
    let t_hi = central.anchor.t as f64 + off[2] + g[2];
    let start = pool.partition_point(|&j| (below[j].anchor.t as f64) < t_lo);
    for &j in &pool[start..] {
        let n = &below[j];
        if n.anchor.t as f64 > t_hi {
            break;
        }
        if exclude.contains(&j) {
            continue;
        }
        let dx = n.anchor.x - central.anchor.x - off[0];
        let dy = n.anchor.y - central.anchor.y - off[1];
        if dx.abs() <= g[0] && dy.abs() <= g[1] {
            return Some(j);
        }
    }
    None
}

/// Layer-0 indices reachable from element `index` of layer `layer`.
pub fn descendants(layers: &[Vec<Element>], layer: usize, index: usize) -> BTreeSet<usize> {
    let mut frontier: BTreeSet<usize> = BTreeSet::from([index]);
    for n in (1..=layer).rev() {
        frontier = frontier
            .iter()
            .flat_map(|&i| layers[n][i].children.iter().copied())
            .collect();
    }
    frontier
}

/// Per-frame points of every trajectory underlying a detection at `layer`.
pub fn localize(layers: &[Vec<Element>], layer: usize, trajectories: &TrajectorySet) -> FramePoints {
    let mut leaves: BTreeSet<usize> = BTreeSet::new();
    if let Some(elements) = layers.get(layer) {
        for i in 0..elements.len() {
            leaves.extend(descendants(layers, layer, i));
        }
    }
    let sources: BTreeSet<usize> = leaves
        .into_iter()
        .filter_map(|i| layers[0][i].source)
        .collect();
    let mut out = FramePoints::new();
    for s in sources {
        let traj = &trajectories.trajectories[s];
        for (k, p) in traj.points.iter().enumerate() {
            out.entry(traj.start_frame + k as u32).or_default().push(*p);
        }
    }
    out
}
