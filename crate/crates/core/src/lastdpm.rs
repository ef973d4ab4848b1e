//! Deformable part models over feature pyramids: a root filter on the grain
//! map, parts on the fine map with 3D springs, and subparts inside each part
//! with per-slice 2D springs.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dt::{gdt2_relaxed, gdt3_relaxed, DeformWeights2, DeformWeights3, ScoreVolume};
use crate::error::{Error, Result};
use crate::evalkit::{volume_iou, Volume};
use crate::featmap::{FeatureConfig, FeatureMap, FeaturePyramid};
use crate::trajkit::VideoInfo;

const MODEL_FORMAT: &str = "comptraj-lastdpm";
const MODEL_VERSION: u32 = 1;

/// Grain-to-fine cell ratio per axis; part anchors are expressed in fine cells.
pub const PART_RATIO: [usize; 3] = [2, 2, 1];

/// Linear template over a `W x H x T` window of `F`-channel cells, laid out
/// like [`FeatureMap::data`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Filter {
    pub dims: [usize; 3],
    pub channels: usize,
    pub weights: Vec<f64>,
}

impl Filter {
    pub fn zeros(dims: [usize; 3], channels: usize) -> Self {
        Self {
            dims,
            channels,
            weights: vec![0.0; dims.iter().product::<usize>() * channels],
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    fn validate(&self, what: &str) -> Result<()> {
        if self.dims.contains(&0) || self.channels == 0 {
            return Err(Error::ShapeMismatch(format!("{what} filter has empty dims {:?}", self.dims)));
        }
        if self.weights.len() != self.dims.iter().product::<usize>() * self.channels {
            return Err(Error::ShapeMismatch(format!("{what} filter weight count")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subpart {
    pub filter: Filter,
    /// Rest offset `(x, y)` inside the part, in fine cells.
    pub anchor: [i64; 2],
    pub deform: DeformWeights2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Part {
    pub filter: Filter,
    /// Rest offset relative to twice the root position, in fine cells.
    pub anchor: [i64; 3],
    pub deform: DeformWeights3,
    pub subparts: Vec<Subpart>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LastdpmModel {
    pub label: String,
    pub root: Filter,
    pub parts: Vec<Part>,
    pub bias: f64,
    pub threshold: f64,
    pub features: FeatureConfig,
}

/// A full hypothesis: pyramid level, root cell (grain), part and subpart cells (fine).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Placement {
    pub level: usize,
    pub root: [usize; 3],
    pub parts: Vec<[usize; 3]>,
    pub subparts: Vec<Vec<[usize; 3]>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InferenceMode {
    /// Place parts with subparts at rest, then relocate subparts.
    #[default]
    TwoStage,
    /// Maximize parts and subparts together.
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub score: f64,
    pub placement: Placement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub label: String,
    pub score: f64,
    pub volume: Volume,
    pub placement: Placement,
}

impl LastdpmModel {
    pub fn validate(&self) -> Result<()> {
        self.root.validate("root")?;
        for (i, p) in self.parts.iter().enumerate() {
            p.filter.validate("part")?;
            for q in p.deform.quadratic {
                if !(q >= 0.0) || !q.is_finite() {
                    return Err(Error::NonConvexWeights(q));
                }
            }
            for s in &p.subparts {
                s.filter.validate("subpart")?;
                if s.filter.channels != p.filter.channels {
                    return Err(Error::ShapeMismatch(format!("part {i} subpart channel count")));
                }
                let fits = (0..2).all(|a| s.anchor[a] >= 0 && s.anchor[a] as usize + s.filter.dims[a] <= p.filter.dims[a]);
                if !fits || s.filter.dims[2] != p.filter.dims[2] {
                    return Err(Error::ShapeMismatch(format!("part {i} subpart outside part")));
                }
                for q in s.deform.quadratic {
                    if !(q >= 0.0) || !q.is_finite() {
                        return Err(Error::NonConvexWeights(q));
                    }
                }
            }
        }
        if self.params().iter().any(|v| !v.is_finite()) {
            return Err(Error::ShapeMismatch("non-finite model weight".into()));
        }
        Ok(())
    }

    /// Number of entries in [`LastdpmModel::params`].
    pub fn param_len(&self) -> usize {
        self.root.len()
            + self
                .parts
                .iter()
                .map(|p| p.filter.len() + 6 + p.subparts.iter().map(|s| s.filter.len() + 4).sum::<usize>())
                .sum::<usize>()
            + 1
    }

    /// Flat parameters: root, then per part its filter, its six deformation
    /// weights and its subparts (filter, four deformation weights), then the bias.
    pub fn params(&self) -> Vec<f64> {
        let mut w = Vec::with_capacity(self.param_len());
        w.extend_from_slice(&self.root.weights);
        for p in &self.parts {
            w.extend_from_slice(&p.filter.weights);
            w.extend_from_slice(&p.deform.to_array());
            for s in &p.subparts {
                w.extend_from_slice(&s.filter.weights);
                w.extend_from_slice(&s.deform.to_array());
            }
        }
        w.push(self.bias);
        w
    }

    pub fn set_params(&mut self, w: &[f64]) -> Result<()> {
        if w.len() != self.param_len() {
            return Err(Error::DimensionMismatch {
                expected: self.param_len(),
                got: w.len(),
            });
        }
        let mut rest = w;
        let mut take = |n: usize| {
            let (head, tail) = rest.split_at(n);
            rest = tail;
            head
        };
        let n = self.root.len();
        self.root.weights.copy_from_slice(take(n));
        for p in &mut self.parts {
            let n = p.filter.len();
            p.filter.weights.copy_from_slice(take(n));
            p.deform = DeformWeights3::from_slice(take(6).try_into().expect("six"));
            for s in &mut p.subparts {
                let n = s.filter.len();
                s.filter.weights.copy_from_slice(take(n));
                s.deform = DeformWeights2::from_slice(take(4).try_into().expect("four"));
            }
        }
        self.bias = take(1)[0];
        Ok(())
    }

    /// Indices of quadratic deformation coefficients within [`LastdpmModel::params`].
    pub fn quadratic_indices(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut i = self.root.len();
        for p in &self.parts {
            i += p.filter.len();
            out.extend([i + 3, i + 4, i + 5]);
            i += 6;
            for s in &p.subparts {
                i += s.filter.len();
                out.extend([i + 2, i + 3]);
                i += 4;
            }
        }
        out
    }

    /// Rest position of every part for a root cell.
    pub fn part_anchors(&self, root: [usize; 3]) -> Vec<[i64; 3]> {
        self.parts
            .iter()
            .map(|p| [0, 1, 2].map(|a| (root[a] * PART_RATIO[a]) as i64 + p.anchor[a]))
            .collect()
    }

    pub fn write_json<W: Write>(&self, w: W, config_hash: &str) -> Result<()> {
        let file = ModelFile {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            config_hash: config_hash.into(),
            model: self.clone(),
        };
        serde_json::to_writer_pretty(w, &file)?;
        Ok(())
    }

    /// Returns the model and the config hash it was trained under.
    pub fn read_json<R: Read>(r: R) -> Result<(Self, String)> {
        let file: ModelFile = serde_json::from_reader(r)?;
        if file.format != MODEL_FORMAT || file.version != MODEL_VERSION {
            return Err(Error::format(format!("unsupported model file {} v{}", file.format, file.version)));
        }
        file.model.validate()?;
        Ok((file.model, file.config_hash))
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    config_hash: String,
    model: LastdpmModel,
}

fn fits(map: &FeatureMap, filter: &Filter, pos: [usize; 3]) -> bool {
    (0..3).all(|a| pos[a] + filter.dims[a] <= map.dims[a])
}

/// Dot product of `filter` with the window of `map` whose origin is `pos`.
/// The caller guarantees the window fits.
fn window_dot(map: &FeatureMap, filter: &Filter, pos: [usize; 3]) -> f64 {
    let [fw, fh, ft] = filter.dims;
    let row = fw * map.channels;
    let mut s = 0.0;
    for t in 0..ft {
        for y in 0..fh {
            let m = map.cell_offset([pos[0], pos[1] + y, pos[2] + t]);
            let f = (t * fh + y) * row;
            s += map.data[m..m + row]
                .iter()
                .zip(&filter.weights[f..f + row])
                .map(|(a, b)| a * b)
                .sum::<f64>();
        }
    }
    s
}

/// Window of `map` at `pos` in filter layout.
pub fn window_features(map: &FeatureMap, dims: [usize; 3], pos: [usize; 3]) -> Vec<f64> {
    let row = dims[0] * map.channels;
    let mut out = Vec::with_capacity(row * dims[1] * dims[2]);
    for t in 0..dims[2] {
        for y in 0..dims[1] {
            let m = map.cell_offset([pos[0], pos[1] + y, pos[2] + t]);
            out.extend_from_slice(&map.data[m..m + row]);
        }
    }
    out
}

/// Filter response at every position where the filter fits inside the map.
pub fn filter_response(map: &FeatureMap, filter: &Filter) -> Result<ScoreVolume> {
    if filter.channels != map.channels {
        return Err(Error::ShapeMismatch(format!(
            "filter has {} channels, map has {}",
            filter.channels, map.channels
        )));
    }
    if (0..3).any(|a| filter.dims[a] > map.dims[a] || filter.dims[a] == 0) {
        return Err(Error::ShapeMismatch(format!(
            "filter {:?} does not fit map {:?}",
            filter.dims, map.dims
        )));
    }
    let dims = [0, 1, 2].map(|a| map.dims[a] - filter.dims[a] + 1);
    let mut values = Vec::with_capacity(dims.iter().product());
    for t in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                values.push(window_dot(map, filter, [x, y, t]));
            }
        }
    }
    ScoreVolume::new(dims, values)
}

fn disp3(q: [usize; 3], anchor: [i64; 3]) -> [i64; 3] {
    [0, 1, 2].map(|a| q[a] as i64 - anchor[a])
}

/// Sum of filter responses minus deformation costs plus bias, always in the
/// same order so that inference and direct evaluation agree to the bit.
fn combine(
    model: &LastdpmModel,
    placement: &Placement,
    root: f64,
    part: impl Fn(usize, [usize; 3]) -> f64,
    sub: impl Fn(usize, usize, [usize; 3]) -> f64,
) -> f64 {
    let anchors = model.part_anchors(placement.root);
    let mut s = root;
    for (i, p) in model.parts.iter().enumerate() {
        let pi = placement.parts[i];
        s += part(i, pi);
        s -= p.deform.cost(disp3(pi, anchors[i]));
        for (j, sp) in p.subparts.iter().enumerate() {
            let q = placement.subparts[i][j];
            s += sub(i, j, q);
            s -= sp.deform.cost([
                q[0] as i64 - (pi[0] as i64 + sp.anchor[0]),
                q[1] as i64 - (pi[1] as i64 + sp.anchor[1]),
            ]);
        }
    }
    s + model.bias
}

fn check_placement_shape(model: &LastdpmModel, placement: &Placement) -> Result<()> {
    if placement.parts.len() != model.parts.len()
        || placement.subparts.len() != model.parts.len()
        || model.parts.iter().zip(&placement.subparts).any(|(p, s)| p.subparts.len() != s.len())
    {
        return Err(Error::ShapeMismatch("placement does not match model structure".into()));
    }
    Ok(())
}

fn check_bounds(model: &LastdpmModel, pyramid: &FeaturePyramid, placement: &Placement) -> Result<()> {
    check_placement_shape(model, placement)?;
    let level = pyramid
        .levels
        .get(placement.level)
        .ok_or_else(|| Error::OutOfBounds(format!("pyramid level {}", placement.level)))?;
    if level.grain.channels != model.root.channels {
        return Err(Error::ShapeMismatch("root channels differ from grain map".into()));
    }
    if !fits(&level.grain, &model.root, placement.root) {
        return Err(Error::OutOfBounds(format!("root at {:?}", placement.root)));
    }
    for (i, p) in model.parts.iter().enumerate() {
        if level.fine.channels != p.filter.channels {
            return Err(Error::ShapeMismatch("part channels differ from fine map".into()));
        }
        if !fits(&level.fine, &p.filter, placement.parts[i]) {
            return Err(Error::OutOfBounds(format!("part {i} at {:?}", placement.parts[i])));
        }
        for (j, s) in p.subparts.iter().enumerate() {
            let q = placement.subparts[i][j];
            if q[2] != placement.parts[i][2] || !fits(&level.fine, &s.filter, q) {
                return Err(Error::OutOfBounds(format!("subpart {i}.{j} at {q:?}")));
            }
        }
    }
    Ok(())
}

/// Score of one explicit placement.
pub fn score_hypothesis(model: &LastdpmModel, pyramid: &FeaturePyramid, placement: &Placement) -> Result<f64> {
    check_bounds(model, pyramid, placement)?;
    let level = &pyramid.levels[placement.level];
    Ok(combine(
        model,
        placement,
        window_dot(&level.grain, &model.root, placement.root),
        |i, q| window_dot(&level.fine, &model.parts[i].filter, q),
        |i, j, q| window_dot(&level.fine, &model.parts[i].subparts[j].filter, q),
    ))
}

/// Joint feature vector of a placement, aligned with [`LastdpmModel::params`]:
/// `params . features == score` up to rounding.
pub fn placement_features(model: &LastdpmModel, pyramid: &FeaturePyramid, placement: &Placement) -> Result<Vec<f64>> {
    check_bounds(model, pyramid, placement)?;
    let level = &pyramid.levels[placement.level];
    let anchors = model.part_anchors(placement.root);
    let mut phi = Vec::with_capacity(model.param_len());
    phi.extend(window_features(&level.grain, model.root.dims, placement.root));
    for (i, p) in model.parts.iter().enumerate() {
        let pi = placement.parts[i];
        phi.extend(window_features(&level.fine, p.filter.dims, pi));
        let d = disp3(pi, anchors[i]).map(|v| v as f64);
        phi.extend([-d[0], -d[1], -d[2], -d[0] * d[0], -d[1] * d[1], -d[2] * d[2]]);
        for (j, s) in p.subparts.iter().enumerate() {
            let q = placement.subparts[i][j];
            phi.extend(window_features(&level.fine, s.filter.dims, q));
            let dx = (q[0] as i64 - (pi[0] as i64 + s.anchor[0])) as f64;
            let dy = (q[1] as i64 - (pi[1] as i64 + s.anchor[1])) as f64;
            phi.extend([-dx, -dy, -dx * dx, -dy * dy]);
        }
    }
    phi.push(1.0);
    Ok(phi)
}

/// Best placement for every feasible root position of every level, in
/// `(level, t, y, x)` order, without thresholding or suppression.
pub fn infer_candidates(model: &LastdpmModel, pyramid: &FeaturePyramid, mode: InferenceMode) -> Result<Vec<Candidate>> {
    model.validate()?;
    if pyramid.feature_hash != model.features.hash() {
        return Err(Error::ConfigMismatch(format!(
            "pyramid features {} differ from model features {}",
            pyramid.feature_hash,
            model.features.hash()
        )));
    }
    let per_level: Vec<Vec<Candidate>> = (0..pyramid.levels.len())
        .into_par_iter()
        .map(|l| level_candidates(model, pyramid, l, mode))
        .collect::<Result<_>>()?;
    Ok(per_level.into_iter().flatten().collect())
}

fn level_candidates(model: &LastdpmModel, pyramid: &FeaturePyramid, l: usize, mode: InferenceMode) -> Result<Vec<Candidate>> {
    let level = &pyramid.levels[l];
    let (grain, fine) = (&level.grain, &level.fine);
    if (0..3).any(|a| model.root.dims[a] > grain.dims[a]) {
        return Ok(Vec::new());
    }
    if model.parts.iter().any(|p| (0..3).any(|a| p.filter.dims[a] > fine.dims[a])) {
        return Ok(Vec::new());
    }
    let root = filter_response(grain, &model.root)?;

    struct PartTables {
        response: ScoreVolume,
        placed: crate::dt::GdtOutput,
        subs: Vec<(ScoreVolume, crate::dt::GdtOutput)>,
    }
    let mut tables = Vec::with_capacity(model.parts.len());
    for p in &model.parts {
        let response = filter_response(fine, &p.filter)?;
        let mut subs = Vec::with_capacity(p.subparts.len());
        for s in &p.subparts {
            let r = filter_response(fine, &s.filter)?;
            let moved = gdt2_relaxed(&r, &s.deform)?;
            subs.push((r, moved));
        }
        let mut combined = response.clone();
        let dims = combined.dims();
        for t in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let mut v = response.get([x, y, t]);
                    for (s, (r, moved)) in p.subparts.iter().zip(&subs) {
                        let q = [x + s.anchor[0] as usize, y + s.anchor[1] as usize, t];
                        v += match mode {
                            InferenceMode::TwoStage => r.get(q),
                            InferenceMode::Joint => moved.values.get(q),
                        };
                    }
                    combined.set([x, y, t], v);
                }
            }
        }
        let placed = gdt3_relaxed(&combined, &p.deform)?;
        tables.push(PartTables { response, placed, subs });
    }

    let rd = root.dims();
    let mut out = Vec::new();
    for t in 0..rd[2] {
        for y in 0..rd[1] {
            'root: for x in 0..rd[0] {
                let r = [x, y, t];
                let anchors = model.part_anchors(r);
                let mut parts = Vec::with_capacity(model.parts.len());
                let mut subparts = Vec::with_capacity(model.parts.len());
                for (i, p) in model.parts.iter().enumerate() {
                    let Some(a) = crate::dt::to_cell(anchors[i], tables[i].placed.values.dims()) else {
                        continue 'root;
                    };
                    let pi = tables[i].placed.argmax_at(a);
                    parts.push(pi);
                    subparts.push(
                        p.subparts
                            .iter()
                            .zip(&tables[i].subs)
                            .map(|(s, (_, moved))| {
                                moved.argmax_at([pi[0] + s.anchor[0] as usize, pi[1] + s.anchor[1] as usize, pi[2]])
                            })
                            .collect::<Vec<_>>(),
                    );
                }
                let placement = Placement {
                    level: l,
                    root: r,
                    parts,
                    subparts,
                };
                let score = combine(
                    model,
                    &placement,
                    root.get(r),
                    |i, q| tables[i].response.get(q),
                    |i, j, q| tables[i].subs[j].0.get(q),
                );
                out.push(Candidate { score, placement });
            }
        }
    }
    Ok(out)
}

/// Pixel/frame volume covered by the root filter of a placement, clipped to the video.
pub fn detection_volume(model: &LastdpmModel, pyramid: &FeaturePyramid, placement: &Placement) -> Result<Volume> {
    let level = pyramid
        .levels
        .get(placement.level)
        .ok_or_else(|| Error::OutOfBounds(format!("pyramid level {}", placement.level)))?;
    Ok(root_volume(
        placement.root,
        model.root.dims,
        &level.grain,
        pyramid.video,
    ))
}

/// Volume of a `dims` window at `root` on `map`, clipped to the video.
pub fn root_volume(root: [usize; 3], dims: [usize; 3], map: &FeatureMap, video: VideoInfo) -> Volume {
    let sx = map.cell.x / map.scale;
    let sy = map.cell.y / map.scale;
    let st = f64::from(map.cell.t);
    let w = f64::from(video.width);
    let h = f64::from(video.height);
    let n = f64::from(video.frames);
    Volume::new(
        (root[0] as f64 * sx).min(w),
        (root[1] as f64 * sy).min(h),
        (root[2] as f64 * st).min(n),
        ((root[0] + dims[0]) as f64 * sx).min(w),
        ((root[1] + dims[1]) as f64 * sy).min(h),
        ((root[2] + dims[2]) as f64 * st).min(n),
    )
}

/// Greedy suppression: keep detections in descending score order (ties by
/// volume), dropping any whose overlap with a kept one exceeds `overlap`.
pub fn non_maximum_suppression(mut detections: Vec<Detection>, overlap: f64) -> Vec<Detection> {
    detections.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.volume.cmp_lex(&b.volume)));
    let mut kept: Vec<Detection> = Vec::new();
    for d in detections {
        if kept.iter().all(|k| volume_iou(&k.volume, &d.volume) <= overlap) {
            kept.push(d);
        }
    }
    kept
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InferOptions {
    pub mode: InferenceMode,
    /// Overrides the model threshold when set.
    pub threshold: Option<f64>,
    pub nms_overlap: f64,
}

impl Default for InferOptions {
    fn default() -> Self {
        Self {
            mode: InferenceMode::TwoStage,
            threshold: None,
            nms_overlap: 0.5,
        }
    }
}

/// Detections scoring above the threshold, after non-maximum suppression.
pub fn infer(model: &LastdpmModel, pyramid: &FeaturePyramid, options: &InferOptions) -> Result<Vec<Detection>> {
    let threshold = options.threshold.unwrap_or(model.threshold);
    let mut dets = Vec::new();
    for c in infer_candidates(model, pyramid, options.mode)? {
        if c.score > threshold {
            dets.push(Detection {
                label: model.label.clone(),
                score: c.score,
                volume: detection_volume(model, pyramid, &c.placement)?,
                placement: c.placement,
            });
        }
    }
    Ok(non_maximum_suppression(dets, options.nms_overlap))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featmap::{CellSize, Level, PyramidLevel};

    fn map(level: Level, dims: [usize; 3], channels: usize, f: impl Fn(usize) -> f64) -> FeatureMap {
        let cell = match level {
            Level::Grain => CellSize::new(16.0, 16.0, 8),
            Level::Fine => CellSize::new(8.0, 8.0, 8),
        };
        let mut m = FeatureMap::zeros(level, dims, cell, channels, 1.0);
        for (i, v) in m.data.iter_mut().enumerate() {
            *v = f(i);
        }
        m
    }

    fn pyramid(grain: FeatureMap, fine: FeatureMap) -> FeaturePyramid {
        FeaturePyramid {
            video: VideoInfo {
                width: 16 * grain.dims[0] as u32,
                height: 16 * grain.dims[1] as u32,
                frames: 8 * grain.dims[2] as u32,
            },
            feature_hash: FeatureConfig::default().hash(),
            levels: vec![PyramidLevel { scale: 1.0, grain, fine }],
        }
    }

    fn root_only(dims: [usize; 3], channels: usize) -> LastdpmModel {
        let mut root = Filter::zeros(dims, channels);
        root.weights.iter_mut().enumerate().for_each(|(i, w)| *w = ((i * 7) % 5) as f64 - 2.0);
        LastdpmModel {
            label: "a".into(),
            root,
            parts: vec![],
            bias: 0.25,
            threshold: 0.0,
            features: FeatureConfig::default(),
        }
    }

    #[test]
    fn response_of_one_cell_filter_is_the_map() {
        let m = map(Level::Grain, [3, 2, 2], 1, |i| i as f64);
        let mut f = Filter::zeros([1, 1, 1], 1);
        f.weights[0] = 1.0;
        let r = filter_response(&m, &f).unwrap();
        assert_eq!(r.values(), m.data.as_slice());
    }

    #[test]
    fn response_shape_and_errors() {
        let m = map(Level::Grain, [5, 4, 3], 2, |i| (i % 3) as f64);
        let f = Filter::zeros([2, 2, 2], 2);
        assert_eq!(filter_response(&m, &f).unwrap().dims(), [4, 3, 2]);
        assert!(matches!(filter_response(&m, &Filter::zeros([6, 1, 1], 2)), Err(Error::ShapeMismatch(_))));
        assert!(matches!(filter_response(&m, &Filter::zeros([1, 1, 1], 3)), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn root_only_score_is_response_plus_bias() {
        let g = map(Level::Grain, [4, 4, 3], 2, |i| ((i * 13) % 7) as f64 / 7.0);
        let f = map(Level::Fine, [8, 8, 3], 1, |_| 0.0);
        let p = pyramid(g, f);
        let model = root_only([2, 2, 2], 2);
        let r = filter_response(&p.levels[0].grain, &model.root).unwrap();
        let cands = infer_candidates(&model, &p, InferenceMode::TwoStage).unwrap();
        assert_eq!(cands.len(), r.len());
        for c in &cands {
            assert_eq!(c.score, r.get(c.placement.root) + 0.25);
            assert_eq!(score_hypothesis(&model, &p, &c.placement).unwrap(), c.score);
        }
    }

    #[test]
    fn detection_volume_example() {
        let g = map(Level::Grain, [4, 4, 3], 1, |_| 0.0);
        let f = map(Level::Fine, [8, 8, 3], 1, |_| 0.0);
        let mut p = pyramid(g, f);
        p.video = VideoInfo {
            width: 64,
            height: 64,
            frames: 24,
        };
        let model = root_only([4, 4, 3], 1);
        let placement = Placement {
            level: 0,
            root: [0, 0, 0],
            parts: vec![],
            subparts: vec![],
        };
        assert_eq!(
            detection_volume(&model, &p, &placement).unwrap(),
            Volume::new(0.0, 0.0, 0.0, 64.0, 64.0, 24.0)
        );
        p.levels[0].grain.scale = 0.5;
        p.video.width = 200;
        p.video.height = 200;
        let v = detection_volume(&model, &p, &placement).unwrap();
        assert_eq!((v.x2, v.y2, v.t2), (128.0, 128.0, 24.0));
    }

    #[test]
    fn out_of_bounds_placement() {
        let g = map(Level::Grain, [4, 4, 3], 1, |_| 0.0);
        let f = map(Level::Fine, [8, 8, 3], 1, |_| 0.0);
        let p = pyramid(g, f);
        let model = root_only([2, 2, 2], 1);
        let placement = Placement {
            level: 0,
            root: [3, 0, 0],
            parts: vec![],
            subparts: vec![],
        };
        assert!(matches!(score_hypothesis(&model, &p, &placement), Err(Error::OutOfBounds(_))));
    }

    #[test]
    fn nms_keeps_highest_and_disjoint() {
        let d = |score: f64, x: f64| Detection {
            label: "a".into(),
            score,
            volume: Volume::new(x, 0.0, 0.0, x + 10.0, 10.0, 10.0),
            placement: Placement {
                level: 0,
                root: [0, 0, 0],
                parts: vec![],
                subparts: vec![],
            },
        };
        let kept = non_maximum_suppression(vec![d(1.0, 0.0), d(2.0, 1.0), d(0.5, 30.0)], 0.5);
        let scores: Vec<f64> = kept.iter().map(|k| k.score).collect();
        assert_eq!(scores, vec![2.0, 0.5]);
    }

    #[test]
    fn params_round_trip() {
        let mut model = root_only([2, 1, 1], 1);
        model.parts.push(Part {
            filter: Filter::zeros([2, 2, 1], 1),
            anchor: [0, 0, 0],
            deform: DeformWeights3::from_slice(&[0.0, 0.0, 0.0, 0.1, 0.1, 0.1]),
            subparts: vec![Subpart {
                filter: Filter::zeros([1, 1, 1], 1),
                anchor: [1, 1],
                deform: DeformWeights2::from_slice(&[0.0, 0.0, 0.1, 0.1]),
            }],
        });
        let w: Vec<f64> = (0..model.param_len()).map(|i| i as f64 + 0.5).collect();
        model.set_params(&w).unwrap();
        assert_eq!(model.params(), w);
        let q = model.quadratic_indices();
        assert_eq!(q, vec![2 + 4 + 3, 2 + 4 + 4, 2 + 4 + 5, 2 + 4 + 6 + 1 + 2, 2 + 4 + 6 + 1 + 3]);
    }
}
