//! Two-resolution histogram feature maps over detected hierarchy elements,
//! and the spatial pyramid used for multi-scale detection.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::trajkit::{Element, VideoInfo};

const DUMP_MAGIC: &[u8; 4] = b"CTFM";
const DUMP_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Level {
    Grain,
    Fine,
}

/// Cell extent in pixels (x, y) and frames (t).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellSize {
    pub x: f64,
    pub y: f64,
    pub t: u32,
}

impl CellSize {
    pub fn new(x: f64, y: f64, t: u32) -> Self {
        Self { x, y, t }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub grain_cell: CellSize,
    /// Hierarchy layers binned into grain maps (`0..grain_layers`).
    pub grain_layers: usize,
    /// Hierarchy layers binned into fine maps (`0..fine_layers`).
    pub fine_layers: usize,
    pub octaves: usize,
    pub levels_per_octave: usize,
    pub clip: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            grain_cell: CellSize::new(16.0, 16.0, 8),
            grain_layers: 3,
            fine_layers: 2,
            octaves: 3,
            levels_per_octave: 2,
            clip: 0.2,
        }
    }
}

impl FeatureConfig {
    /// Fine cells halve the grain spatial extent and keep its temporal extent.
    pub fn fine_cell(&self) -> CellSize {
        CellSize::new(self.grain_cell.x / 2.0, self.grain_cell.y / 2.0, self.grain_cell.t)
    }

    pub fn scales(&self) -> Vec<f64> {
        let per = self.levels_per_octave.max(1);
        (0..(self.octaves.max(1) * per))
            .map(|i| 2f64.powf(-(i as f64) / per as f64))
            .collect()
    }

    /// Stable fingerprint of the feature geometry; models record it.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Channel layout: per-layer inventories concatenated.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Channels {
    pub layer_sizes: Vec<usize>,
}

impl Channels {
    pub fn total(&self) -> usize {
        self.layer_sizes.iter().sum()
    }

    pub fn offset(&self, layer: usize) -> usize {
        self.layer_sizes[..layer].iter().sum()
    }
}

/// Dense `W x H x T x F` histogram grid; `F` channels vary fastest, then `x`, `y`, `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub level: Level,
    pub dims: [usize; 3],
    pub cell: CellSize,
    pub channels: usize,
    pub scale: f64,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(level: Level, dims: [usize; 3], cell: CellSize, channels: usize, scale: f64) -> Self {
        Self {
            level,
            dims,
            cell,
            channels,
            scale,
            data: vec![0.0; dims.iter().product::<usize>() * channels],
        }
    }

    #[inline]
    pub fn cell_offset(&self, [x, y, t]: [usize; 3]) -> usize {
        ((t * self.dims[1] + y) * self.dims[0] + x) * self.channels
    }

    pub fn cell_vector(&self, p: [usize; 3]) -> &[f64] {
        let o = self.cell_offset(p);
        &self.data[o..o + self.channels]
    }

    pub fn total_mass(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Cell containing a (scaled) anchor, clamped into the grid.
    pub fn cell_of(&self, x: f64, y: f64, t: i64) -> [usize; 3] {
        let clamp = |v: f64, n: usize| (v.max(0.0).floor() as usize).min(n - 1);
        [
            clamp(x * self.scale / self.cell.x, self.dims[0]),
            clamp(y * self.scale / self.cell.y, self.dims[1]),
            clamp(t as f64 / f64::from(self.cell.t), self.dims[2]),
        ]
    }

    /// Apply [`normalize_cell`] to every cell.
    pub fn normalize(&mut self, clip: f64) {
        for cell in self.data.chunks_mut(self.channels.max(1)) {
            normalize_cell(cell, clip);
        }
    }

    pub fn write_dump<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(DUMP_MAGIC)?;
        w.write_u16::<LittleEndian>(DUMP_VERSION)?;
        w.write_u8(match self.level {
            Level::Grain => 0,
            Level::Fine => 1,
        })?;
        for d in self.dims {
            w.write_u32::<LittleEndian>(d as u32)?;
        }
        w.write_u32::<LittleEndian>(self.channels as u32)?;
        w.write_f64::<LittleEndian>(self.cell.x)?;
        w.write_f64::<LittleEndian>(self.cell.y)?;
        w.write_u32::<LittleEndian>(self.cell.t)?;
        w.write_f64::<LittleEndian>(self.scale)?;
        for v in &self.data {
            w.write_f32::<LittleEndian>(*v as f32)?;
        }
        Ok(())
    }

    /// Reads a dump; values come back at `f32` precision.
    pub fn read_dump<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != DUMP_MAGIC {
            return Err(Error::format("not a CTFM feature-map dump"));
        }
        if r.read_u16::<LittleEndian>()? != DUMP_VERSION {
            return Err(Error::format("unsupported feature-map dump version"));
        }
        let level = match r.read_u8()? {
            0 => Level::Grain,
            1 => Level::Fine,
            other => return Err(Error::format(format!("bad level tag {other}"))),
        };
        let mut dims = [0usize; 3];
        for d in &mut dims {
            *d = r.read_u32::<LittleEndian>()? as usize;
        }
        let channels = r.read_u32::<LittleEndian>()? as usize;
        let cell = CellSize {
            x: r.read_f64::<LittleEndian>()?,
            y: r.read_f64::<LittleEndian>()?,
            t: r.read_u32::<LittleEndian>()?,
        };
        let scale = r.read_f64::<LittleEndian>()?;
        let n = dims.iter().product::<usize>() * channels;
        let mut raw = vec![0f32; n];
        r.read_f32_into::<LittleEndian>(&mut raw)?;
        Ok(Self {
            level,
            dims,
            cell,
            channels,
            scale,
            data: raw.into_iter().map(f64::from).collect(),
        })
    }
}

/// L1-normalize, then clip entries at `clip` and renormalize until stable.
///
/// The stable point is `v_i = min(c u_i, clip)` with `sum v = 1` when the
/// support has more than `1 / clip` entries, and the uniform vector over the
/// support otherwise. All-zero cells stay zero.
pub fn normalize_cell(v: &mut [f64], clip: f64) {
    let sum: f64 = v.iter().sum();
    if sum <= 0.0 {
        return;
    }
    v.iter_mut().for_each(|x| *x /= sum);
    let support = v.iter().filter(|&&x| x > 0.0).count();
    if support as f64 * clip <= 1.0 {
        let u = 1.0 / support as f64;
        v.iter_mut().filter(|x| **x > 0.0).for_each(|x| *x = u);
        return;
    }
    let mut sorted: Vec<f64> = v.iter().copied().filter(|&x| x > 0.0).collect();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut rest: f64 = sorted.iter().sum();
    let mut scale = 1.0;
    for (k, &u) in sorted.iter().enumerate() {
        scale = (1.0 - k as f64 * clip) / rest;
        if scale * u <= clip {
            break;
        }
        rest -= u;
    }
    v.iter_mut().for_each(|x| *x = (*x * scale).min(clip));
}

fn channels_for(inventories: &[usize], layers: usize) -> Result<Channels> {
    if inventories.len() < layers {
        return Err(Error::MissingLayer(inventories.len()));
    }
    Ok(Channels {
        layer_sizes: inventories[..layers].to_vec(),
    })
}

/// Histogram counts before normalization.
pub fn count_feature_map(
    detections: &[Vec<Element>],
    inventories: &[usize],
    level: Level,
    config: &FeatureConfig,
    video: VideoInfo,
    scale: f64,
) -> Result<FeatureMap> {
    let (layers, cell) = match level {
        Level::Grain => (config.grain_layers, config.grain_cell),
        Level::Fine => (config.fine_layers, config.fine_cell()),
    };
    if detections.len() < layers {
        return Err(Error::MissingLayer(detections.len()));
    }
    let channels = channels_for(inventories, layers)?;
    let dims = [
        ((f64::from(video.width) * scale / cell.x).ceil() as usize).max(1),
        ((f64::from(video.height) * scale / cell.y).ceil() as usize).max(1),
        (video.frames.div_ceil(cell.t) as usize).max(1),
    ];
    let mut map = FeatureMap::zeros(level, dims, cell, channels.total(), scale);
    for (layer, elements) in detections.iter().take(layers).enumerate() {
        let base = channels.offset(layer);
        for e in elements {
            if e.type_id >= channels.layer_sizes[layer] {
                return Err(Error::ShapeMismatch(format!(
                    "layer {layer} type {} outside inventory {}",
                    e.type_id, channels.layer_sizes[layer]
                )));
            }
            let c = map.cell_of(e.anchor.x, e.anchor.y, e.anchor.t);
            let o = map.cell_offset(c) + base + e.type_id;
            map.data[o] += 1.0;
        }
    }
    Ok(map)
}

/// Normalized feature map at one level and scale.
pub fn build_feature_map(
    detections: &[Vec<Element>],
    inventories: &[usize],
    level: Level,
    config: &FeatureConfig,
    video: VideoInfo,
    scale: f64,
) -> Result<FeatureMap> {
    let mut map = count_feature_map(detections, inventories, level, config, video, scale)?;
    map.normalize(config.clip);
    Ok(map)
}

#[derive(Debug, Clone)]
pub struct PyramidLevel {
    pub scale: f64,
    pub grain: FeatureMap,
    pub fine: FeatureMap,
}

#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub video: VideoInfo,
    pub feature_hash: String,
    pub levels: Vec<PyramidLevel>,
}

/// Grain and fine maps at every spatial scale `2^(-i / levels_per_octave)`.
pub fn build_pyramid(
    detections: &[Vec<Element>],
    inventories: &[usize],
    config: &FeatureConfig,
    video: VideoInfo,
) -> Result<FeaturePyramid> {
    let levels = config
        .scales()
        .into_iter()
        .map(|scale| {
            Ok(PyramidLevel {
                scale,
                grain: build_feature_map(detections, inventories, Level::Grain, config, video, scale)?,
                fine: build_feature_map(detections, inventories, Level::Fine, config, video, scale)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FeaturePyramid {
        video,
        feature_hash: config.hash(),
        levels,
    })
}
