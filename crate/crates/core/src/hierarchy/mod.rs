//! Compositional trajectory hierarchy: learning compositions from
//! co-occurrence statistics and detecting them bottom-up in new videos.

mod cooccur;
mod detect;
mod learn;

use std::collections::BTreeSet;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajkit::Element;

pub use cooccur::{
    accumulate_cooccurrence, estimate_spring, find_local_maxima, CooccurrenceMap,
    CooccurrenceMaps, Peak, Spring,
};
pub use detect::{descendants, detect_elements, localize, FramePoints};
pub use learn::{learn_hierarchy, learn_layer, LearnScope, VideoElements};

const HIERARCHY_FORMAT: &str = "comptraj-hierarchy";
const HIERARCHY_VERSION: u32 = 1;

/// Which videos a composition was learned from.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassScope {
    Shared,
    Class(String),
}

/// One neighbor slot of the spring model; offsets and sigmas are in bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborSpec {
    pub sub_type: usize,
    pub offset: [i64; 3],
    pub sigma: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionDef {
    pub layer: usize,
    pub type_id: usize,
    pub central_type: usize,
    pub neighbors: Vec<NeighborSpec>,
    pub support: u64,
    pub class_scope: ClassScope,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HierarchyParams {
    /// Learning cube half-width in pixels.
    pub r_spatial: f64,
    /// Learning cube half-depth in frames.
    pub r_temporal: i64,
    pub spatial_bin: f64,
    pub temporal_bin: i64,
    pub n_per_pair: usize,
    pub min_support: u32,
    pub sigma_min: f64,
    pub gate_tau: f64,
    pub cap_shared: usize,
    pub cap_per_class: usize,
    /// Total layer count including layer 0.
    pub layers: usize,
}

impl Default for HierarchyParams {
    fn default() -> Self {
        Self {
            r_spatial: 16.0,
            r_temporal: 8,
            spatial_bin: 4.0,
            temporal_bin: 2,
            n_per_pair: 3,
            min_support: 5,
            sigma_min: 1.0,
            gate_tau: 3.0,
            cap_shared: 200,
            cap_per_class: 50,
            layers: 3,
        }
    }
}

impl HierarchyParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::ConfigInvalid(m.to_string()));
        if !(self.spatial_bin > 0.0) || self.temporal_bin < 1 {
            return bad("bin sizes must be positive");
        }
        if self.radius_bins().0 < 1 || self.radius_bins().1 < 1 {
            return bad("learning cube radius must cover at least one bin per axis");
        }
        if self.n_per_pair < 1 {
            return bad("n_per_pair must be >= 1");
        }
        if !(self.sigma_min > 0.0) || !(self.gate_tau > 0.0) {
            return bad("sigma_min and gate_tau must be positive");
        }
        if self.layers < 2 {
            return bad("a hierarchy needs at least two layers");
        }
        Ok(())
    }

    /// `(r, l)`: spatial and temporal cube radii in bins.
    pub fn radius_bins(&self) -> (usize, usize) {
        (
            (self.r_spatial / self.spatial_bin).floor() as usize,
            (self.r_temporal / self.temporal_bin) as usize,
        )
    }

    pub fn bins(&self) -> BinSize {
        BinSize {
            spatial: self.spatial_bin,
            temporal: self.temporal_bin,
        }
    }
}

/// Pixel and frame extent of one co-occurrence bin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinSize {
    pub spatial: f64,
    pub temporal: i64,
}

impl BinSize {
    pub const UNIT: BinSize = BinSize {
        spatial: 1.0,
        temporal: 1,
    };

    /// Bin offset of a pixel/frame displacement.
    pub fn bin_of(&self, dx: f64, dy: f64, dt: i64) -> [i64; 3] {
        [
            (dx / self.spatial).round() as i64,
            (dy / self.spatial).round() as i64,
            (dt as f64 / self.temporal as f64).round() as i64,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hierarchy {
    pub params: HierarchyParams,
    pub codebook_size: usize,
    /// `compositions[n - 1]` is the inventory of layer `n`.
    pub compositions: Vec<Vec<CompositionDef>>,
    /// `links[n][type]`: layer `n + 1` compositions using `type` as a sub-element.
    pub links: Vec<Vec<Vec<usize>>>,
}

impl Hierarchy {
    pub fn new(codebook_size: usize, params: HierarchyParams) -> Self {
        Self {
            params,
            codebook_size,
            compositions: Vec::new(),
            links: Vec::new(),
        }
    }

    /// Number of layers learned so far, layer 0 included.
    pub fn depth(&self) -> usize {
        self.compositions.len() + 1
    }

    pub fn inventory_size(&self, layer: usize) -> usize {
        match layer {
            0 => self.codebook_size,
            n => self.compositions.get(n - 1).map_or(0, Vec::len),
        }
    }

    pub fn layer(&self, layer: usize) -> &[CompositionDef] {
        assert!(layer >= 1, "layer 0 has no compositions");
        &self.compositions[layer - 1]
    }

    /// Recompute every `links` table as the inverse of the child relation.
    pub(crate) fn rebuild_links(&mut self) {
        self.links = (0..self.compositions.len())
            .map(|n| {
                let mut table = vec![Vec::new(); self.inventory_size(n)];
                for c in &self.compositions[n] {
                    let mut used: BTreeSet<usize> = BTreeSet::new();
                    used.insert(c.central_type);
                    used.extend(c.neighbors.iter().map(|nb| nb.sub_type));
                    for t in used {
                        table[t].push(c.type_id);
                    }
                }
                table
            })
            .collect();
    }

    /// Full graph audit: sub-element types exist and links invert the child relation.
    pub fn audit(&self) -> Result<()> {
        let fail = |m: String| Err(Error::format(m));
        if self.links.len() != self.compositions.len() {
            return fail("link table count differs from layer count".into());
        }
        for (i, layer) in self.compositions.iter().enumerate() {
            let n = i + 1;
            let below = self.inventory_size(n - 1);
            for (id, c) in layer.iter().enumerate() {
                if c.layer != n || c.type_id != id {
                    return fail(format!("composition {id} of layer {n} is mislabeled"));
                }
                if c.neighbors.is_empty() {
                    return fail(format!("composition {id} of layer {n} has no neighbors"));
                }
                let subs = std::iter::once(c.central_type)
                    .chain(c.neighbors.iter().map(|nb| nb.sub_type));
                for s in subs {
                    if s >= below {
                        return fail(format!("layer {n} composition {id} uses unknown type {s}"));
                    }
                    if !self.links[i][s].contains(&id) {
                        return fail(format!("missing link {s} -> {id} at layer {}", n - 1));
                    }
                }
                for nb in &c.neighbors {
                    if nb.sigma.iter().any(|&s| !(s >= self.params.sigma_min)) {
                        return fail(format!("layer {n} composition {id} sigma below floor"));
                    }
                }
            }
            if self.links[i].len() != below {
                return fail(format!("link table of layer {} has wrong size", n - 1));
            }
            for (t, targets) in self.links[i].iter().enumerate() {
                for &id in targets {
                    let c = layer
                        .get(id)
                        .ok_or_else(|| Error::format(format!("dangling link {t} -> {id}")))?;
                    if c.central_type != t && c.neighbors.iter().all(|nb| nb.sub_type != t) {
                        return fail(format!("spurious link {t} -> {id} at layer {}", n - 1));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn write_json<W: Write>(&self, w: W, config_hash: &str) -> Result<()> {
        let file = HierarchyFile {
            format: HIERARCHY_FORMAT.into(),
            version: HIERARCHY_VERSION,
            config_hash: config_hash.into(),
            hierarchy: self.clone(),
        };
        serde_json::to_writer_pretty(w, &file)?;
        Ok(())
    }

    /// Returns the hierarchy and the config hash it was learned under.
    pub fn read_json<R: Read>(r: R) -> Result<(Self, String)> {
        let file: HierarchyFile = serde_json::from_reader(r)?;
        if file.format != HIERARCHY_FORMAT || file.version != HIERARCHY_VERSION {
            return Err(Error::format(format!(
                "unsupported hierarchy file {} v{}",
                file.format, file.version
            )));
        }
        file.hierarchy.audit()?;
        Ok((file.hierarchy, file.config_hash))
    }
}

#[derive(Serialize, Deserialize)]
struct HierarchyFile {
    format: String,
    version: u32,
    config_hash: String,
    hierarchy: Hierarchy,
}

/// Per-video detection record, as written to detection files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoDetections {
    pub video_id: String,
    pub layers: Vec<Vec<Element>>,
}
