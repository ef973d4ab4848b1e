//! Latent SVM training for part models and a bag-of-elements classifier.
//!
//! Training alternates between fixing latent placements (best placement on
//! each positive, hard negatives from a cache) and subgradient descent on the
//! resulting convex objective.

use std::collections::BTreeSet;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dt::{DeformWeights2, DeformWeights3, DEFORM_EPS};
use crate::error::{Error, Result};
use crate::evalkit::{volume_iou, Volume};
use crate::featmap::{FeatureConfig, FeaturePyramid};
use crate::lastdpm::{
    detection_volume, infer_candidates, non_maximum_suppression, Detection, InferOptions, placement_features, root_volume, window_features, Filter, InferenceMode,
    LastdpmModel, Part, Placement, Subpart,
};
use crate::trajkit::Element;

/// A training video: its pyramid and, for positives, the annotated volume.
#[derive(Debug, Clone, Copy)]
pub struct TrainingExample<'a> {
    pub video_id: &'a str,
    pub pyramid: &'a FeaturePyramid,
    pub truth: Option<Volume>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentScore {
    pub score: f64,
    pub placement: Placement,
    pub volume: Volume,
}

/// Overlap a positive's placement must reach with its annotation.
pub const POSITIVE_OVERLAP: f64 = 0.5;

/// `f_w(x)`: the best placement, restricted on positives to placements
/// overlapping the annotation by at least [`POSITIVE_OVERLAP`].
pub fn latent_score(model: &LastdpmModel, example: &TrainingExample, mode: InferenceMode) -> Result<LatentScore> {
    let mut best: Option<LatentScore> = None;
    for c in infer_candidates(model, example.pyramid, mode)? {
        if best.as_ref().is_some_and(|b| b.score >= c.score) {
            continue;
        }
        let volume = detection_volume(model, example.pyramid, &c.placement)?;
        if let Some(truth) = &example.truth {
            if volume_iou(&volume, truth) < POSITIVE_OVERLAP {
                continue;
            }
        }
        best = Some(LatentScore {
            score: c.score,
            placement: c.placement,
            volume,
        });
    }
    best.ok_or_else(|| Error::NoFeasiblePlacement(example.video_id.to_string()))
}

/// Labeled feature vector with its latent placement fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedExample {
    pub y: f64,
    pub features: Vec<f64>,
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn hinge(margin: f64) -> f64 {
    (1.0 - margin).max(0.0)
}

/// `1/2 |w|^2 + C sum_i max(0, 1 - y_i w . phi_i)`.
pub fn fixed_objective(w: &[f64], examples: &[FixedExample], c: f64) -> f64 {
    let reg = 0.5 * dot(w, w);
    let loss: f64 = examples.iter().map(|e| hinge(e.y * dot(w, &e.features))).sum();
    reg + c * loss
}

/// A subgradient of [`fixed_objective`]; at a hinge kink the loss term is taken as zero.
pub fn fixed_subgradient(w: &[f64], examples: &[FixedExample], c: f64) -> Vec<f64> {
    let mut g = w.to_vec();
    for e in examples {
        if e.y * dot(w, &e.features) < 1.0 {
            for (gi, f) in g.iter_mut().zip(&e.features) {
                *gi -= c * e.y * f;
            }
        }
    }
    g
}

/// Latent objective: positives scored by their best feasible placement,
/// negatives by their best placement anywhere.
pub fn objective(
    model: &LastdpmModel,
    positives: &[TrainingExample],
    negatives: &[TrainingExample],
    c: f64,
    mode: InferenceMode,
) -> Result<f64> {
    let w = model.params();
    let pos: Vec<f64> = positives
        .par_iter()
        .map(|e| Ok(hinge(latent_score(model, e, mode)?.score)))
        .collect::<Result<_>>()?;
    let neg: Vec<f64> = negatives
        .par_iter()
        .map(|e| Ok(hinge(-latent_score(model, e, mode)?.score)))
        .collect::<Result<_>>()?;
    Ok(0.5 * dot(&w, &w) + c * (pos.iter().sum::<f64>() + neg.iter().sum::<f64>()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgdConfig {
    pub c: f64,
    pub eta0: f64,
    /// Step size decay: `eta_t = eta0 / (1 + lambda t)`.
    pub lambda: f64,
    pub epochs: usize,
    /// Training fails once `|w|` exceeds this.
    pub divergence_bound: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            c: 0.002,
            eta0: 0.01,
            lambda: 1e-4,
            epochs: 5,
            divergence_bound: 1e6,
        }
    }
}

/// Weights plus the global step counter that drives the step size schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    pub w: Vec<f64>,
    pub step: u64,
}

/// One pass over `examples` in a seeded random order. Each step descends
/// `|w|^2 / (2N) + C hinge(y w . phi)`; every `(index, floor)` in `floors` is
/// then projected back to at least `floor` (quadratic deformation
/// coefficients, normally [`DEFORM_EPS`]).
pub fn sgd_epoch(
    state: &mut SgdState,
    examples: &[FixedExample],
    config: &SgdConfig,
    floors: &[(usize, f64)],
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    if examples.is_empty() {
        return Ok(());
    }
    let n = examples.len() as f64;
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(rng);
    for i in order {
        let e = &examples[i];
        if e.features.len() != state.w.len() {
            return Err(Error::DimensionMismatch {
                expected: state.w.len(),
                got: e.features.len(),
            });
        }
        let eta = config.eta0 / (1.0 + config.lambda * state.step as f64);
        let violated = e.y * dot(&state.w, &e.features) < 1.0;
        let shrink = 1.0 - eta / n;
        for (wi, f) in state.w.iter_mut().zip(&e.features) {
            *wi *= shrink;
            if violated {
                *wi += eta * config.c * e.y * f;
            }
        }
        for &(q, floor) in floors {
            state.w[q] = state.w[q].max(floor);
        }
        state.step += 1;
    }
    let norm = dot(&state.w, &state.w).sqrt();
    if !(norm <= config.divergence_bound) {
        return Err(Error::DivergenceDetected {
            norm,
            bound: config.divergence_bound,
        });
    }
    Ok(())
}

/// Best feasible placement on every positive. Positives without any
/// feasible placement are reported as `None`.
pub fn relabel_positives(
    model: &LastdpmModel,
    positives: &[TrainingExample],
    mode: InferenceMode,
) -> Result<Vec<Option<LatentScore>>> {
    positives
        .par_iter()
        .map(|e| match latent_score(model, e, mode) {
            Ok(s) => Ok(Some(s)),
            Err(Error::NoFeasiblePlacement(_)) => Ok(None),
            Err(e) => Err(e),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    pub video: usize,
    pub placement: Placement,
    pub features: Vec<f64>,
    pub score: f64,
}

/// Bounded store of hard negatives, ordered by descending score.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativeCache {
    pub limit: usize,
    entries: Vec<CacheEntry>,
}

/// Negatives scoring below this margin leave (or never enter) the cache.
pub const HARD_NEGATIVE_MARGIN: f64 = -1.0;

impl NegativeCache {
    pub fn new(limit: usize) -> Self {
        Self {
            limit,
            entries: Vec::new(),
        }
    }

    pub fn entries(&self) -> &[CacheEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Rescore under `w` and drop entries that are no longer hard.
    pub fn prune(&mut self, w: &[f64]) {
        for e in &mut self.entries {
            e.score = dot(w, &e.features);
        }
        self.entries.retain(|e| e.score >= HARD_NEGATIVE_MARGIN);
        self.sort();
    }

    /// Add entries not already cached, then evict the lowest scores beyond the limit.
    pub fn insert(&mut self, new: Vec<CacheEntry>) {
        let present: BTreeSet<(usize, Placement)> =
            self.entries.iter().map(|e| (e.video, e.placement.clone())).collect();
        self.entries
            .extend(new.into_iter().filter(|e| !present.contains(&(e.video, e.placement.clone()))));
        self.sort();
        self.entries.truncate(self.limit);
    }

    fn sort(&mut self) {
        self.entries.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then(a.video.cmp(&b.video))
                .then(a.placement.cmp(&b.placement))
        });
    }

    pub fn as_examples(&self) -> Vec<FixedExample> {
        self.entries
            .iter()
            .map(|e| FixedExample {
                y: -1.0,
                features: e.features.clone(),
            })
            .collect()
    }
}

/// Prune the cache under the current model, then add the placements on the
/// negative videos scoring at least [`HARD_NEGATIVE_MARGIN`] that survive
/// per-video suppression. Near-duplicate windows would otherwise fill a small
/// cache from a handful of videos. Returns the number of entries added.
pub fn mine_hard_negatives(
    model: &LastdpmModel,
    negatives: &[TrainingExample],
    cache: &mut NegativeCache,
    mode: InferenceMode,
) -> Result<usize> {
    let w = model.params();
    cache.prune(&w);
    let found: Vec<Vec<(f64, usize, Placement)>> = negatives
        .par_iter()
        .enumerate()
        .map(|(v, e)| {
            let mut hard = Vec::new();
            for c in infer_candidates(model, e.pyramid, mode)? {
                if c.score >= HARD_NEGATIVE_MARGIN {
                    hard.push(Detection {
                        label: String::new(),
                        score: c.score,
                        volume: detection_volume(model, e.pyramid, &c.placement)?,
                        placement: c.placement,
                    });
                }
            }
            Ok(non_maximum_suppression(hard, InferOptions::default().nms_overlap)
                .into_iter()
                .map(|d| (d.score, v, d.placement))
                .collect())
        })
        .collect::<Result<_>>()?;
    let mut found: Vec<(f64, usize, Placement)> = found.into_iter().flatten().collect();
    let present: BTreeSet<(usize, Placement)> = cache.entries.iter().map(|e| (e.video, e.placement.clone())).collect();
    found.retain(|(_, v, p)| !present.contains(&(*v, p.clone())));
    found.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    // Anything past the limit would be evicted right away.
    found.truncate(cache.limit);
    let new: Vec<CacheEntry> = found
        .into_par_iter()
        .map(|(_, video, placement)| {
            let features = placement_features(model, negatives[video].pyramid, &placement)?;
            let score = dot(&w, &features);
            Ok(CacheEntry {
                video,
                placement,
                features,
                score,
            })
        })
        .collect::<Result<_>>()?;
    let before = cache.len();
    cache.insert(new);
    let added = cache.entries.len().saturating_sub(before);
    debug!("hard negatives: cache {} (+{added})", cache.len());
    Ok(added)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub parts: usize,
    /// Part extent `(x, y)` in fine cells; both even so subparts tile it 2 x 2.
    pub part_size: [usize; 2],
    /// Random windows drawn per negative video for the root initialization.
    pub init_negatives_per_video: usize,
    pub init_sgd: SgdConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            parts: 4,
            part_size: [4, 4],
            init_negatives_per_video: 10,
            init_sgd: SgdConfig {
                c: 1.0,
                eta0: 0.05,
                lambda: 1e-3,
                epochs: 30,
                divergence_bound: 1e6,
            },
        }
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Window (level, position) whose volume overlaps `truth` best; first wins ties.
fn best_window(pyramid: &FeaturePyramid, dims: [usize; 3], truth: &Volume) -> Option<(usize, [usize; 3], f64)> {
    let mut best: Option<(usize, [usize; 3], f64)> = None;
    for (l, level) in pyramid.levels.iter().enumerate() {
        let g = &level.grain;
        if (0..3).any(|a| dims[a] > g.dims[a]) {
            continue;
        }
        for t in 0..=g.dims[2] - dims[2] {
            for y in 0..=g.dims[1] - dims[1] {
                for x in 0..=g.dims[0] - dims[0] {
                    let iou = volume_iou(&root_volume([x, y, t], dims, g, pyramid.video), truth);
                    if best.as_ref().is_none_or(|b| iou > b.2) {
                        best = Some((l, [x, y, t], iou));
                    }
                }
            }
        }
    }
    best
}

/// Bilinear 2x spatial upsampling of a `W x H x T x F` block to `2W x 2H x T x F`.
fn upsample2(weights: &[f64], dims: [usize; 3], channels: usize) -> Vec<f64> {
    let [w, h, t] = dims;
    let (fw, fh) = (2 * w, 2 * h);
    let at = |x: usize, y: usize, tt: usize, c: usize| weights[((tt * h + y) * w + x) * channels + c];
    let mut out = vec![0.0; fw * fh * t * channels];
    let src = |f: usize, n: usize| {
        let s = ((f as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (n - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        (lo, hi, s - lo as f64)
    };
    for tt in 0..t {
        for fy in 0..fh {
            let (y0, y1, ay) = src(fy, h);
            for fx in 0..fw {
                let (x0, x1, ax) = src(fx, w);
                let o = ((tt * fh + fy) * fw + fx) * channels;
                for c in 0..channels {
                    out[o + c] = (1.0 - ay) * ((1.0 - ax) * at(x0, y0, tt, c) + ax * at(x1, y0, tt, c))
                        + ay * ((1.0 - ax) * at(x0, y1, tt, c) + ax * at(x1, y1, tt, c));
                }
            }
        }
    }
    out
}

/// Copy the `dims` block at `pos` out of a `W x H x T x F` array, keeping the first `keep` channels.
fn crop(weights: &[f64], src_dims: [usize; 3], channels: usize, pos: [usize; 3], dims: [usize; 3], keep: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(dims.iter().product::<usize>() * keep);
    for t in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let o = (((pos[2] + t) * src_dims[1] + pos[1] + y) * src_dims[0] + pos[0] + x) * channels;
                out.extend_from_slice(&weights[o..o + keep]);
            }
        }
    }
    out
}

/// Initial model: a root sized to the median annotation, trained on the
/// best-overlapping window of each positive against random negative windows,
/// then parts placed greedily where the upsampled root carries most energy.
pub fn init_model(
    label: &str,
    positives: &[TrainingExample],
    negatives: &[TrainingExample],
    features: &FeatureConfig,
    config: &ModelConfig,
    seed: u64,
) -> Result<LastdpmModel> {
    let truths: Vec<Volume> = positives.iter().filter_map(|e| e.truth).collect();
    if truths.is_empty() {
        return Err(Error::EmptyPositives);
    }
    if config.part_size.iter().any(|&s| s < 2 || s % 2 != 0) {
        return Err(Error::ConfigInvalid("part size must be even and at least 2".into()));
    }
    let first = &positives[0].pyramid.levels[0];
    let cell = features.grain_cell;
    let root_dims = [
        (median(truths.iter().map(|v| v.x2 - v.x1).collect()) / cell.x).round().max(1.0) as usize,
        (median(truths.iter().map(|v| v.y2 - v.y1).collect()) / cell.y).round().max(1.0) as usize,
        (median(truths.iter().map(|v| v.t2 - v.t1).collect()) / f64::from(cell.t)).round().max(1.0) as usize,
    ];
    let root_dims = [0, 1, 2].map(|a| root_dims[a].min(first.grain.dims[a]));
    let grain_channels = first.grain.channels;
    let fine_channels = first.fine.channels;

    let mut examples = Vec::new();
    for e in positives {
        let Some(truth) = &e.truth else { continue };
        match best_window(e.pyramid, root_dims, truth) {
            Some((l, pos, iou)) => {
                if iou < POSITIVE_OVERLAP {
                    debug!("{}: best initial window overlaps only {iou:.2}", e.video_id);
                }
                let mut f = window_features(&e.pyramid.levels[l].grain, root_dims, pos);
                f.push(1.0);
                examples.push(FixedExample { y: 1.0, features: f });
            }
            None => warn!("{}: root does not fit any pyramid level", e.video_id),
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for e in negatives {
        let fitting: Vec<usize> = (0..e.pyramid.levels.len())
            .filter(|&l| (0..3).all(|a| root_dims[a] <= e.pyramid.levels[l].grain.dims[a]))
            .collect();
        if fitting.is_empty() {
            continue;
        }
        for _ in 0..config.init_negatives_per_video {
            let l = fitting[rng.gen_range(0..fitting.len())];
            let g = &e.pyramid.levels[l].grain;
            let pos = [0, 1, 2].map(|a| rng.gen_range(0..=g.dims[a] - root_dims[a]));
            let mut f = window_features(g, root_dims, pos);
            f.push(1.0);
            examples.push(FixedExample { y: -1.0, features: f });
        }
    }
    let n_root = root_dims.iter().product::<usize>() * grain_channels;
    let mut state = SgdState {
        w: vec![0.0; n_root + 1],
        step: 0,
    };
    for _ in 0..config.init_sgd.epochs {
        sgd_epoch(&mut state, &examples, &config.init_sgd, &[], &mut rng)?;
    }
    let root = Filter {
        dims: root_dims,
        channels: grain_channels,
        weights: state.w[..n_root].to_vec(),
    };

    // Part placement on the upsampled positive-weight energy.
    let fine_dims = [2 * root_dims[0], 2 * root_dims[1], root_dims[2]];
    let up = upsample2(&root.weights, root_dims, grain_channels);
    let mut energy: Vec<f64> = up
        .chunks(grain_channels)
        .map(|c| c.iter().map(|v| v.max(0.0).powi(2)).sum())
        .collect();
    let [pw, ph] = config.part_size;
    let pw = pw.min(fine_dims[0] - fine_dims[0] % 2).max(2);
    let ph = ph.min(fine_dims[1] - fine_dims[1] % 2).max(2);
    let mut parts = Vec::new();
    if fine_dims[0] >= pw && fine_dims[1] >= ph {
        for _ in 0..config.parts {
            let mut best: Option<([usize; 2], f64)> = None;
            for y in 0..=fine_dims[1] - ph {
                for x in 0..=fine_dims[0] - pw {
                    let mut e = 0.0;
                    for t in 0..fine_dims[2] {
                        for dy in 0..ph {
                            for dx in 0..pw {
                                e += energy[(t * fine_dims[1] + y + dy) * fine_dims[0] + x + dx];
                            }
                        }
                    }
                    if best.is_none_or(|b| e > b.1) {
                        best = Some(([x, y], e));
                    }
                }
            }
            let ([x, y], _) = best.expect("at least one position");
            for t in 0..fine_dims[2] {
                for dy in 0..ph {
                    for dx in 0..pw {
                        energy[(t * fine_dims[1] + y + dy) * fine_dims[0] + x + dx] = 0.0;
                    }
                }
            }
            let dims = [pw, ph, fine_dims[2]];
            let block = crop(&up, fine_dims, grain_channels, [x, y, 0], dims, fine_channels);
            let half: Vec<f64> = block.iter().map(|v| 0.5 * v).collect();
            let sub_dims = [pw / 2, ph / 2, fine_dims[2]];
            let subparts = [[0, 0], [pw / 2, 0], [0, ph / 2], [pw / 2, ph / 2]]
                .into_iter()
                .map(|[sx, sy]| Subpart {
                    filter: Filter {
                        dims: sub_dims,
                        channels: fine_channels,
                        weights: crop(&half, dims, fine_channels, [sx, sy, 0], sub_dims, fine_channels),
                    },
                    anchor: [sx as i64, sy as i64],
                    deform: DeformWeights2::from_slice(&[0.0, 0.0, 0.1, 0.1]),
                })
                .collect();
            parts.push(Part {
                filter: Filter {
                    dims,
                    channels: fine_channels,
                    weights: half,
                },
                anchor: [x as i64, y as i64, 0],
                deform: DeformWeights3::from_slice(&[0.0, 0.0, 0.0, 0.1, 0.1, 0.1]),
                subparts,
            });
        }
    }
    let model = LastdpmModel {
        label: label.into(),
        root,
        parts,
        bias: 0.0,
        threshold: 0.0,
        features: features.clone(),
    };
    model.validate()?;
    info!(
        "{label}: initial root {:?}, {} parts of {:?} fine cells",
        root_dims,
        model.parts.len(),
        [pw, ph]
    );
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub sgd: SgdConfig,
    pub rounds: usize,
    pub cache_limit: usize,
    /// Mine negatives only in the first round.
    pub freeze_negatives: bool,
    /// Halvings of the step size tried when an SGD round would raise the objective.
    pub max_backoff: usize,
    /// Fraction of training positives the calibrated threshold keeps.
    pub target_recall: f64,
    pub mode: InferenceMode,
    /// Displacement unit (fine cells) the solver measures deformations in.
    /// Displacements run to tens of cells while filter features stay below
    /// one, so in cell units the deformation coordinates take steps orders of
    /// magnitude larger than the filters. Above 1 the solver works on linear
    /// coefficients times `s` and quadratic ones times `s^2`; the model keeps
    /// cell units. 1 descends the objective exactly as stated.
    pub deform_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            sgd: SgdConfig::default(),
            rounds: 4,
            cache_limit: 500,
            freeze_negatives: false,
            max_backoff: 6,
            target_recall: 0.9,
            mode: InferenceMode::TwoStage,
            deform_scale: 1.0,
        }
    }
}

/// Per-round training log record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub positives: usize,
    pub dropped_positives: usize,
    pub cache: usize,
    pub mined: usize,
    /// Fixed-latent objective after relabeling and mining, before descent,
    /// in solver units (see [`TrainConfig::deform_scale`]).
    pub objective_before: f64,
    pub objective_after: f64,
    pub eta0: f64,
    pub backoffs: usize,
}

/// Run the alternation for `config.rounds` rounds and calibrate the threshold.
/// `on_round` sees the model after every round (for checkpoints and logs).
pub fn train_lastdpm(
    mut model: LastdpmModel,
    positives: &[TrainingExample],
    negatives: &[TrainingExample],
    config: &TrainConfig,
    seed: u64,
    mut on_round: impl FnMut(&RoundRecord, &LastdpmModel) -> Result<()>,
) -> Result<(LastdpmModel, Vec<RoundRecord>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cache = NegativeCache::new(config.cache_limit);
    let unit = solver_units(&model, config.deform_scale)?;
    let to_solver = |v: Vec<f64>| -> Vec<f64> { v.iter().zip(&unit).map(|(x, u)| x / u).collect() };
    let mut state = SgdState {
        w: model.params().iter().zip(&unit).map(|(x, u)| x * u).collect(),
        step: 0,
    };
    let floors: Vec<(usize, f64)> = model
        .quadratic_indices()
        .into_iter()
        .map(|q| (q, DEFORM_EPS * unit[q]))
        .collect();
    let mut log = Vec::new();
    let mut eta0 = config.sgd.eta0;
    for round in 0..config.rounds {
        let labels = relabel_positives(&model, positives, config.mode)?;
        let mut examples = Vec::new();
        for (e, l) in positives.iter().zip(&labels) {
            if let Some(l) = l {
                examples.push(FixedExample {
                    y: 1.0,
                    features: to_solver(placement_features(&model, e.pyramid, &l.placement)?),
                });
            }
        }
        let dropped = labels.iter().filter(|l| l.is_none()).count();
        if dropped > 0 {
            warn!("round {round}: {dropped} positives have no feasible placement");
        }
        if examples.is_empty() {
            return Err(Error::EmptyPositives);
        }
        let n_pos = examples.len();
        let mined = if round == 0 || !config.freeze_negatives {
            mine_hard_negatives(&model, negatives, &mut cache, config.mode)?
        } else {
            0
        };
        examples.extend(cache.as_examples().into_iter().map(|e| FixedExample {
            y: e.y,
            features: to_solver(e.features),
        }));

        let before = fixed_objective(&state.w, &examples, config.sgd.c);
        let mut backoffs = 0;
        let after = loop {
            let mut trial = state.clone();
            let sgd = SgdConfig { eta0, ..config.sgd.clone() };
            for _ in 0..config.sgd.epochs {
                sgd_epoch(&mut trial, &examples, &sgd, &floors, &mut rng)?;
            }
            let obj = fixed_objective(&trial.w, &examples, config.sgd.c);
            if obj <= before {
                state = trial;
                break obj;
            }
            if backoffs == config.max_backoff {
                debug!("round {round}: no descent after {backoffs} step halvings; keeping weights");
                break before;
            }
            backoffs += 1;
            eta0 /= 2.0;
        };
        let w: Vec<f64> = state.w.iter().zip(&unit).map(|(x, u)| x / u).collect();
        model.set_params(&w)?;
        let record = RoundRecord {
            round,
            positives: n_pos,
            dropped_positives: dropped,
            cache: cache.len(),
            mined,
            objective_before: before,
            objective_after: after,
            eta0,
            backoffs,
        };
        info!(
            "{}: round {round} objective {before:.4} -> {after:.4} ({} positives, cache {})",
            model.label,
            n_pos,
            cache.len()
        );
        on_round(&record, &model)?;
        log.push(record);
    }
    model.threshold = calibrate_threshold(&model, positives, config.target_recall, config.mode)?;
    Ok((model, log))
}

/// Per-coordinate factor from model parameters to solver parameters:
/// `scale` on linear deformation coefficients, `scale^2` on quadratic ones,
/// 1 elsewhere.
fn solver_units(model: &LastdpmModel, scale: f64) -> Result<Vec<f64>> {
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::ConfigInvalid(format!("deform_scale must be positive, got {scale}")));
    }
    let mut unit = vec![1.0; model.param_len()];
    for q in model.quadratic_indices() {
        unit[q] = scale * scale;
    }
    let mut i = model.root.len();
    for p in &model.parts {
        i += p.filter.len();
        unit[i..i + 3].fill(scale);
        i += 6;
        for sp in &p.subparts {
            i += sp.filter.len();
            unit[i..i + 2].fill(scale);
            i += 4;
        }
    }
    Ok(unit)
}

/// Threshold just below the score that keeps `recall` of the positives' best
/// feasible placements.
pub fn calibrate_threshold(
    model: &LastdpmModel,
    positives: &[TrainingExample],
    recall: f64,
    mode: InferenceMode,
) -> Result<f64> {
    let mut scores: Vec<f64> = relabel_positives(model, positives, mode)?
        .into_iter()
        .flatten()
        .map(|l| l.score)
        .collect();
    if scores.is_empty() {
        return Err(Error::EmptyPositives);
    }
    scores.sort_by(|a, b| b.total_cmp(a));
    let k = ((recall.clamp(0.0, 1.0) * scores.len() as f64).ceil() as usize).clamp(1, scores.len()) - 1;
    Ok(scores[k] - 1e-9 * (1.0 + scores[k].abs()))
}

/// L1-normalized histogram of element types over every layer.
pub fn bow_histogram(layers: &[Vec<Element>], inventories: &[usize]) -> Result<Vec<f64>> {
    if layers.len() > inventories.len() {
        return Err(Error::LayerMismatch(inventories.len(), layers.len()));
    }
    let mut h = vec![0.0; inventories.iter().sum()];
    let mut base = 0;
    for (l, elements) in layers.iter().enumerate() {
        for e in elements {
            if e.type_id >= inventories[l] {
                return Err(Error::ShapeMismatch(format!("layer {l} type {} outside inventory", e.type_id)));
            }
            h[base + e.type_id] += 1.0;
        }
        base += inventories[l];
    }
    let total: f64 = h.iter().sum();
    if total > 0.0 {
        h.iter_mut().for_each(|v| *v /= total);
    }
    Ok(h)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BowConfig {
    pub sgd: SgdConfig,
}

impl Default for BowConfig {
    fn default() -> Self {
        Self {
            sgd: SgdConfig {
                c: 10.0,
                eta0: 0.5,
                lambda: 1e-4,
                epochs: 200,
                divergence_bound: 1e6,
            },
        }
    }
}

/// One-vs-rest linear classifier over element histograms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BowClassifier {
    pub classes: Vec<String>,
    /// Per-dimension standardization fitted on the training histograms;
    /// raw L1 frequencies are tiny next to the bias feature.
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// Per class: weights on standardized histograms followed by a bias.
    pub weights: Vec<Vec<f64>>,
    pub class_counts: Vec<usize>,
    /// All training histograms were identical; predictions fall back to the majority class.
    pub degenerate: bool,
}

pub fn train_bow_classifier(videos: &[(String, Vec<f64>)], config: &BowConfig, seed: u64) -> Result<BowClassifier> {
    if videos.is_empty() {
        return Err(Error::EmptyInput("training videos"));
    }
    let dim = videos[0].1.len();
    if let Some((_, h)) = videos.iter().find(|(_, h)| h.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: h.len(),
        });
    }
    let classes: Vec<String> = videos
        .iter()
        .map(|(l, _)| l.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if classes.len() < 2 {
        return Err(Error::SingleClass(videos.len()));
    }
    let class_counts = classes
        .iter()
        .map(|c| videos.iter().filter(|(l, _)| l == c).count())
        .collect();
    let degenerate = videos.iter().all(|(_, h)| h == &videos[0].1);
    let n = videos.len() as f64;
    let mean: Vec<f64> = (0..dim).map(|j| videos.iter().map(|(_, h)| h[j]).sum::<f64>() / n).collect();
    let scale: Vec<f64> = (0..dim)
        .map(|j| {
            let var = videos.iter().map(|(_, h)| (h[j] - mean[j]).powi(2)).sum::<f64>() / n;
            if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 }
        })
        .collect();
    let standardize = |h: &[f64]| -> Vec<f64> { h.iter().zip(&mean).zip(&scale).map(|((v, m), s)| (v - m) * s).collect() };
    let mut weights = Vec::with_capacity(classes.len());
    for (ci, class) in classes.iter().enumerate() {
        let examples: Vec<FixedExample> = videos
            .iter()
            .map(|(l, h)| {
                let mut f = standardize(h);
                f.push(1.0);
                FixedExample {
                    y: if l == class { 1.0 } else { -1.0 },
                    features: f,
                }
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(ci as u64));
        let mut state = SgdState {
            w: vec![0.0; dim + 1],
            step: 0,
        };
        for _ in 0..config.sgd.epochs {
            sgd_epoch(&mut state, &examples, &config.sgd, &[], &mut rng)?;
        }
        weights.push(state.w);
    }
    Ok(BowClassifier {
        classes,
        mean,
        scale,
        weights,
        class_counts,
        degenerate,
    })
}

impl BowClassifier {
    pub fn scores(&self, histogram: &[f64]) -> Result<Vec<f64>> {
        let dim = self.weights[0].len() - 1;
        if histogram.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: histogram.len(),
            });
        }
        let z: Vec<f64> = histogram
            .iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) * s)
            .collect();
        Ok(self.weights.iter().map(|w| dot(&w[..dim], &z) + w[dim]).collect())
    }

    /// Highest-scoring class, lowest index on ties.
    pub fn classify(&self, histogram: &[f64]) -> Result<&str> {
        let scores = if self.degenerate {
            self.class_counts.iter().map(|&c| c as f64).collect()
        } else {
            self.scores(histogram)?
        };
        let mut best = 0;
        for (i, &s) in scores.iter().enumerate() {
            if s > scores[best] {
                best = i;
            }
        }
        Ok(&self.classes[best])
    }
}
