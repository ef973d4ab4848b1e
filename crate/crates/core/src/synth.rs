//! Synthetic videos: per-class motifs of trajectories with fixed relative
//! placements, embedded in clutter that follows a global camera translation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalkit::{FrameAnnotation, VideoAnnotation};
use crate::trajkit::{Trajectory, TrajectorySet, VideoInfo};

/// One trajectory of a motif, relative to the motif origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotifTemplate {
    /// Anchor (end point) offset in pixels.
    pub anchor: [f64; 2],
    /// Anchor frame offset.
    pub frame: u32,
    /// Motion in pixels per frame.
    pub velocity: [f64; 2],
    /// Index into the motif prototype pool.
    pub prototype: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMotif {
    pub name: String,
    pub templates: Vec<MotifTemplate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub width: u32,
    pub height: u32,
    pub frames: u32,
    pub track_len: usize,
    pub dim: usize,
    pub classes: Vec<ClassMotif>,
    /// Clutter trajectories per frame of video.
    pub clutter_density: f64,
    pub clutter_prototypes: usize,
    /// Camera translation speed in pixels per frame; direction is drawn per video.
    pub camera_speed: f64,
    /// Standard deviation of point jitter in pixels.
    pub position_noise: f64,
    /// Standard deviation of descriptor noise before normalization.
    pub descriptor_noise: f64,
    /// Seed of the prototype pools, shared by every video of a corpus.
    pub prototype_seed: u64,
}

fn template(anchor: [f64; 2], frame: u32, velocity: [f64; 2], prototype: usize) -> MotifTemplate {
    MotifTemplate {
        anchor,
        frame,
        velocity,
        prototype,
    }
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 320,
            height: 240,
            frames: 48,
            track_len: 15,
            dim: 30,
            classes: vec![
                ClassMotif {
                    name: "wave".into(),
                    templates: vec![
                        template([0.0, 0.0], 0, [3.0, 0.0], 0),
                        template([12.0, 4.0], 2, [0.0, 3.0], 1),
                        template([4.0, 12.0], 4, [-3.0, 1.0], 2),
                        template([16.0, 16.0], 6, [-2.0, -3.0], 3),
                    ],
                },
                ClassMotif {
                    name: "clap".into(),
                    templates: vec![
                        template([0.0, 0.0], 0, [0.0, -3.0], 4),
                        template([16.0, 0.0], 4, [3.0, 3.0], 5),
                        template([8.0, 16.0], 2, [-3.0, 0.0], 6),
                        template([0.0, 8.0], 6, [2.0, -2.0], 7),
                    ],
                },
            ],
            clutter_density: 5.0,
            clutter_prototypes: 24,
            camera_speed: 2.0,
            position_noise: 0.5,
            descriptor_noise: 0.02,
            prototype_seed: 7,
        }
    }
}

impl SceneConfig {
    pub fn motif_prototypes(&self) -> usize {
        self.classes
            .iter()
            .flat_map(|c| c.templates.iter().map(|t| t.prototype + 1))
            .max()
            .unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        if self.track_len < 2 || self.dim == 0 {
            return bad("trajectories need at least two points and a descriptor".into());
        }
        if (self.frames as usize) < self.track_len {
            return bad(format!("{} frames cannot hold a trajectory of {}", self.frames, self.track_len));
        }
        for c in &self.classes {
            if c.templates.is_empty() {
                return bad(format!("class {} has no templates", c.name));
            }
            let (lo, hi) = self.motif_extent(c);
            if hi[0] - lo[0] >= f64::from(self.width) || hi[1] - lo[1] >= f64::from(self.height) {
                return bad(format!("class {} does not fit the frame", c.name));
            }
            let span = c.templates.iter().map(|t| t.frame).max().unwrap_or(0) as usize + self.track_len;
            if span > self.frames as usize {
                return bad(format!("class {} does not fit the video length", c.name));
            }
        }
        Ok(())
    }

    /// Pixel bounds of a motif's noise-free points relative to its origin.
    fn motif_extent(&self, class: &ClassMotif) -> ([f64; 2], [f64; 2]) {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for t in &class.templates {
            for k in 0..self.track_len {
                let back = (self.track_len - 1 - k) as f64;
                for a in 0..2 {
                    let p = t.anchor[a] - back * t.velocity[a];
                    lo[a] = lo[a].min(p);
                    hi[a] = hi[a].max(p);
                }
            }
        }
        (lo, hi)
    }

    fn class(&self, name: &str) -> Result<&ClassMotif> {
        self.classes
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| Error::ConfigInvalid(format!("unknown class {name}")))
    }
}

/// Prototype descriptor pools: motif prototypes first, then clutter.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototypes {
    pub motif: Vec<Vec<f32>>,
    pub clutter: Vec<Vec<f32>>,
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    loop {
        let v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

impl Prototypes {
    pub fn generate(config: &SceneConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.prototype_seed);
        let mut draw = |n: usize| -> Vec<Vec<f32>> {
            (0..n)
                .map(|_| unit_vector(&mut rng, config.dim).into_iter().map(|x| x as f32).collect())
                .collect()
        };
        let motif = draw(config.motif_prototypes());
        let clutter = draw(config.clutter_prototypes);
        Self { motif, clutter }
    }

    pub fn all(&self) -> impl Iterator<Item = &Vec<f32>> {
        self.motif.iter().chain(&self.clutter)
    }
}

/// Where a motif was planted and which trajectories carry it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotifInstance {
    pub class: String,
    pub origin: [f64; 2],
    pub start_frame: u32,
    /// Index into the scene's trajectory list, per template.
    pub trajectories: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub trajectories: TrajectorySet,
    pub annotation: VideoAnnotation,
    pub motif: Option<MotifInstance>,
    /// Camera translation in pixels per frame.
    pub camera: [f64; 2],
}

fn noisy_descriptor(rng: &mut ChaCha8Rng, proto: &[f32], sigma: f64) -> Vec<f32> {
    let mut v: Vec<f64> = proto.iter().map(|&x| f64::from(x)).collect();
    if sigma > 0.0 {
        let noise = Normal::new(0.0, sigma).expect("valid sigma");
        v.iter_mut().for_each(|x| *x += noise.sample(rng));
    }
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v.into_iter().map(|x| x as f32).collect()
}

fn jitter(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma > 0.0 {
        Normal::new(0.0, sigma).expect("valid sigma").sample(rng)
    } else {
        0.0
    }
}

/// One video. `class` names the planted motif; `None` makes a clutter-only video.
pub fn generate_scene(
    config: &SceneConfig,
    prototypes: &Prototypes,
    class: Option<&str>,
    video_id: &str,
    seed: u64,
) -> Result<Scene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let video = VideoInfo {
        width: config.width,
        height: config.height,
        frames: config.frames,
    };
    let (w, h) = (f64::from(config.width), f64::from(config.height));
    let max_x = w - 1.0;
    let max_y = h - 1.0;
    let len = config.track_len;
    let clamp = |p: [f64; 2]| [p[0].clamp(0.0, max_x) as f32, p[1].clamp(0.0, max_y) as f32];

    // (trajectory, template index or None for clutter)
    let mut items: Vec<(Trajectory, Option<usize>)> = Vec::new();
    let mut motif = None;
    if let Some(name) = class {
        let c = config.class(name)?;
        let (lo, hi) = config.motif_extent(c);
        let span = c.templates.iter().map(|t| t.frame).max().unwrap_or(0) + len as u32;
        let origin = [
            rng.gen_range(-lo[0]..(max_x - hi[0]).max(-lo[0] + 1e-9)),
            rng.gen_range(-lo[1]..(max_y - hi[1]).max(-lo[1] + 1e-9)),
        ];
        let start = rng.gen_range(0..=config.frames - span);
        for (ti, t) in c.templates.iter().enumerate() {
            let points = (0..len)
                .map(|k| {
                    let back = (len - 1 - k) as f64;
                    clamp([
                        origin[0] + t.anchor[0] - back * t.velocity[0] + jitter(&mut rng, config.position_noise),
                        origin[1] + t.anchor[1] - back * t.velocity[1] + jitter(&mut rng, config.position_noise),
                    ])
                })
                .collect();
            let descriptor = noisy_descriptor(&mut rng, &prototypes.motif[t.prototype], config.descriptor_noise);
            items.push((
                Trajectory {
                    id: 0,
                    start_frame: start + t.frame,
                    points,
                    descriptor,
                },
                Some(ti),
            ));
        }
        motif = Some((c.name.clone(), origin, start));
    }

    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let camera = [config.camera_speed * angle.cos(), config.camera_speed * angle.sin()];
    let n_clutter = (config.clutter_density * f64::from(config.frames)).round() as usize;
    if n_clutter > 0 && prototypes.clutter.is_empty() {
        return Err(Error::ConfigInvalid("clutter requested without clutter prototypes".into()));
    }
    let travel = [camera[0] * (len - 1) as f64, camera[1] * (len - 1) as f64];
    for _ in 0..n_clutter {
        let start = rng.gen_range(0..=config.frames - len as u32);
        let lo = [(-travel[0]).max(0.0), (-travel[1]).max(0.0)];
        let hi = [max_x - travel[0].max(0.0), max_y - travel[1].max(0.0)];
        let base = [rng.gen_range(lo[0]..hi[0].max(lo[0] + 1e-9)), rng.gen_range(lo[1]..hi[1].max(lo[1] + 1e-9))];
        let points = (0..len)
            .map(|k| {
                clamp([
                    base[0] + k as f64 * camera[0] + jitter(&mut rng, config.position_noise),
                    base[1] + k as f64 * camera[1] + jitter(&mut rng, config.position_noise),
                ])
            })
            .collect();
        let proto = rng.gen_range(0..prototypes.clutter.len());
        let descriptor = noisy_descriptor(&mut rng, &prototypes.clutter[proto], config.descriptor_noise);
        items.push((
            Trajectory {
                id: 0,
                start_frame: start,
                points,
                descriptor,
            },
            None,
        ));
    }

    // Shuffle so file order carries no information about motif membership.
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
    let mut set = TrajectorySet::new(len, config.dim, video);
    let n_templates = items.iter().filter(|(_, t)| t.is_some()).count();
    let mut members = vec![0usize; n_templates];
    for (i, (mut t, template)) in items.into_iter().enumerate() {
        t.id = i as u64;
        if let Some(ti) = template {
            members[ti] = i;
        }
        set.trajectories.push(t);
    }
    set.validate()?;

    let motif = motif.map(|(class, origin, start_frame)| MotifInstance {
        class,
        origin,
        start_frame,
        trajectories: members,
    });
    let annotation = annotate(video_id, &set, motif.as_ref());
    Ok(Scene {
        trajectories: set,
        annotation,
        motif,
        camera,
    })
}

/// Per-frame boxes around the motif's points: floor/ceil of the extremes,
/// widened to at least one pixel.
fn annotate(video_id: &str, set: &TrajectorySet, motif: Option<&MotifInstance>) -> VideoAnnotation {
    let mut frames = Vec::new();
    if let Some(m) = motif {
        let first = m.trajectories.iter().map(|&i| set.trajectories[i].start_frame).min().unwrap_or(0);
        let last = m.trajectories.iter().map(|&i| set.trajectories[i].end_frame()).max().unwrap_or(0);
        for f in first..=last {
            let pts: Vec<[f32; 2]> = m.trajectories.iter().filter_map(|&i| set.trajectories[i].point_at(f)).collect();
            if pts.is_empty() {
                continue;
            }
            let x1 = pts.iter().map(|p| f64::from(p[0])).fold(f64::INFINITY, f64::min).floor();
            let y1 = pts.iter().map(|p| f64::from(p[1])).fold(f64::INFINITY, f64::min).floor();
            let x2 = pts.iter().map(|p| f64::from(p[0])).fold(f64::NEG_INFINITY, f64::max).ceil();
            let y2 = pts.iter().map(|p| f64::from(p[1])).fold(f64::NEG_INFINITY, f64::max).ceil();
            frames.push(FrameAnnotation {
                frame: f,
                bbox: Some([x1, y1, x2.max(x1 + 1.0), y2.max(y1 + 1.0)]),
            });
        }
    }
    VideoAnnotation {
        video_id: video_id.into(),
        label: motif.map(|m| m.class.clone()),
        frames,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    /// Videos per class (positives), before the split.
    pub per_class: usize,
    /// Clutter-only videos, before the split.
    pub negatives: usize,
    /// Fraction of each group assigned to the test split.
    pub test_fraction: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            per_class: 60,
            negatives: 60,
            test_fraction: 1.0 / 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusVideo {
    pub id: String,
    pub split: Split,
    pub scene: Scene,
}

/// Per-video seed derived from the corpus seed and the video's position.
pub fn video_seed(seed: u64, index: usize) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ (index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Every class's positives followed by the clutter-only videos; within each
/// group the last `round(n * test_fraction)` videos form the test split.
pub fn generate_corpus(scene: &SceneConfig, corpus: &CorpusConfig, seed: u64) -> Result<Vec<CorpusVideo>> {
    if !(0.0..=1.0).contains(&corpus.test_fraction) {
        return Err(Error::ConfigInvalid("test fraction outside [0, 1]".into()));
    }
    let prototypes = Prototypes::generate(scene);
    let mut groups: Vec<(Option<&str>, String, usize)> = scene
        .classes
        .iter()
        .map(|c| (Some(c.name.as_str()), c.name.clone(), corpus.per_class))
        .collect();
    groups.push((None, "none".into(), corpus.negatives));
    let mut jobs = Vec::new();
    for (class, tag, n) in groups {
        let n_test = (n as f64 * corpus.test_fraction).round() as usize;
        for i in 0..n {
            let split = if i >= n - n_test { Split::Test } else { Split::Train };
            jobs.push((class, format!("{tag}-{i:03}"), split));
        }
    }
    use rayon::prelude::*;
    jobs.into_par_iter()
        .enumerate()
        .map(|(k, (class, id, split))| {
            let scene = generate_scene(scene, &prototypes, class, &id, video_seed(seed, k))?;
            Ok(CorpusVideo { id, split, scene })
        })
        .collect()
}
