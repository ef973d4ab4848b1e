//! Trajectories, the descriptor codebook, and quantization into layer-0
//! hierarchy elements.

mod format;
mod kmeans;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use format::{
    read_codebook, read_trajectories, read_trajectories_text, write_codebook, write_trajectories,
    write_trajectories_text,
};
pub use kmeans::{build_codebook, build_codebook_traced, KMeansConfig, KMeansInit};

/// Default trajectory length (points per track).
pub const DEFAULT_TRACK_LEN: usize = 15;
/// Default descriptor dimension for synthetic data.
pub const DEFAULT_DESCRIPTOR_DIM: usize = 30;

/// A tracked point sequence with its descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: u64,
    pub start_frame: u32,
    pub points: Vec<[f32; 2]>,
    pub descriptor: Vec<f32>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn end_frame(&self) -> u32 {
        self.start_frame + self.points.len() as u32 - 1
    }

    /// The temporally last point, which anchors the layer-0 element.
    pub fn anchor(&self) -> Anchor {
        let [x, y] = self.points[self.points.len() - 1];
        Anchor {
            x: f64::from(x),
            y: f64::from(y),
            t: i64::from(self.end_frame()),
        }
    }

    /// Point at absolute frame `frame`, if the trajectory covers it.
    pub fn point_at(&self, frame: u32) -> Option<[f32; 2]> {
        frame
            .checked_sub(self.start_frame)
            .and_then(|k| self.points.get(k as usize).copied())
    }

    pub(crate) fn validate(&self, track_len: usize, dim: usize) -> Result<()> {
        if track_len < 2 || self.points.len() != track_len {
            return Err(Error::format(format!(
                "trajectory {} has {} points, expected {} (>= 2)",
                self.id,
                self.points.len(),
                track_len
            )));
        }
        if self.descriptor.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: self.descriptor.len(),
            });
        }
        if self
            .points
            .iter()
            .flatten()
            .any(|c| !c.is_finite() || *c < 0.0)
        {
            return Err(Error::format(format!(
                "trajectory {} has a negative or non-finite coordinate",
                self.id
            )));
        }
        if self.descriptor.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(format!(
                "trajectory {} has a non-finite descriptor entry",
                self.id
            )));
        }
        Ok(())
    }
}

/// Video-level header shared by every trajectory in a file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoInfo {
    pub width: u32,
    pub height: u32,
    pub frames: u32,
}

/// The contents of one trajectory file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySet {
    pub track_len: usize,
    pub dim: usize,
    pub video: VideoInfo,
    pub trajectories: Vec<Trajectory>,
}

impl TrajectorySet {
    pub fn new(track_len: usize, dim: usize, video: VideoInfo) -> Self {
        Self {
            track_len,
            dim,
            video,
            trajectories: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.trajectories
            .iter()
            .try_for_each(|t| t.validate(self.track_len, self.dim))
    }
}

/// Spatiotemporal anchor of an element: pixels and frames.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub x: f64,
    pub y: f64,
    pub t: i64,
}

impl Anchor {
    /// Canonical ordering key: time, then row, then column.
    pub(crate) fn cmp_canonical(&self, other: &Self) -> std::cmp::Ordering {
        self.t
            .cmp(&other.t)
            .then(self.y.total_cmp(&other.y))
            .then(self.x.total_cmp(&other.x))
    }
}

/// A hierarchy element instance detected in a video.
///
/// `children` index into the element list of the layer below; `source`
/// indexes the video's trajectory list and is set only at layer 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Element {
    pub layer: usize,
    pub type_id: usize,
    pub anchor: Anchor,
    pub children: Vec<usize>,
    pub source: Option<usize>,
}

/// k-means visual-word codebook over trajectory descriptors.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub centroids: Vec<Vec<f32>>,
    pub seed: u64,
}

impl Codebook {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn dim(&self) -> usize {
        self.centroids.first().map_or(0, Vec::len)
    }

    /// Index of the nearest centroid; ties go to the lowest index.
    pub fn nearest(&self, descriptor: &[f32]) -> Result<usize> {
        if descriptor.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: descriptor.len(),
            });
        }
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, c) in self.centroids.iter().enumerate() {
            let d: f64 = c
                .iter()
                .zip(descriptor)
                .map(|(a, b)| {
                    let diff = f64::from(*a) - f64::from(*b);
                    diff * diff
                })
                .sum();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        Ok(best)
    }
}

/// Quantize a trajectory into its layer-0 element.
pub fn quantize(trajectory: &Trajectory, codebook: &Codebook) -> Result<Element> {
    let type_id = codebook.nearest(&trajectory.descriptor)?;
    Ok(Element {
        layer: 0,
        type_id,
        anchor: trajectory.anchor(),
        children: Vec::new(),
        source: None,
    })
}

/// Quantize every trajectory of a video; `source` records the trajectory index.
pub fn quantize_video(set: &TrajectorySet, codebook: &Codebook) -> Result<Vec<Element>> {
    set.trajectories
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let mut e = quantize(t, codebook)?;
            e.source = Some(i);
            Ok(e)
        })
        .collect()
}

/// Draw `min(n, total)` descriptors uniformly without replacement.
///
/// The sample is returned in dataset order, so it is reproducible per seed.
pub fn sample_descriptors<'a, I>(dataset: I, n: usize, seed: u64) -> Result<Vec<Vec<f32>>>
where
    I: IntoIterator<Item = &'a TrajectorySet>,
{
    let all: Vec<&Vec<f32>> = dataset
        .into_iter()
        .flat_map(|s| s.trajectories.iter().map(|t| &t.descriptor))
        .collect();
    if all.is_empty() {
        return Err(Error::EmptyInput("dataset contains no trajectories"));
    }
    if n >= all.len() {
        return Ok(all.into_iter().cloned().collect());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, all.len(), n).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| all[i].clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj(desc: Vec<f32>) -> Trajectory {
        Trajectory {
            id: 0,
            start_frame: 10,
            points: vec![[1.0, 2.0], [3.0, 4.0], [5.0, 6.5]],
            descriptor: desc,
        }
    }

    fn codebook() -> Codebook {
        Codebook {
            centroids: (0..8).map(|i| vec![i as f32, 0.0]).collect(),
            seed: 0,
        }
    }

    #[test]
    fn exact_centroid_match() {
        let e = quantize(&traj(vec![7.0, 0.0]), &codebook()).unwrap();
        assert_eq!(e.type_id, 7);
        assert_eq!(e.layer, 0);
        assert!(e.children.is_empty());
    }

    #[test]
    fn anchor_is_last_point() {
        let e = quantize(&traj(vec![0.0, 0.0]), &codebook()).unwrap();
        assert_eq!(
            e.anchor,
            Anchor {
                x: 5.0,
                y: 6.5,
                t: 12
            }
        );
    }

    #[test]
    fn tie_goes_to_lowest_index() {
        let cb = Codebook {
            centroids: vec![
                vec![9.0, 9.0],
                vec![9.0, -9.0],
                vec![1.0, 0.0],
                vec![9.0, 0.0],
                vec![-9.0, 0.0],
                vec![-1.0, 0.0],
            ],
            seed: 0,
        };
        assert_eq!(cb.nearest(&[0.0, 0.0]).unwrap(), 2);
    }

    #[test]
    fn dimension_mismatch() {
        assert!(matches!(
            quantize(&traj(vec![0.0; 3]), &codebook()),
            Err(Error::DimensionMismatch {
                expected: 2,
                got: 3
            })
        ));
    }

    fn dataset(n: usize) -> TrajectorySet {
        let mut set = TrajectorySet::new(
            2,
            1,
            VideoInfo {
                width: 10,
                height: 10,
                frames: 10,
            },
        );
        for i in 0..n {
            set.trajectories.push(Trajectory {
                id: i as u64,
                start_frame: 0,
                points: vec![[0.0, 0.0], [1.0, 1.0]],
                descriptor: vec![i as f32],
            });
        }
        set
    }

    #[test]
    fn sample_more_than_population_returns_all() {
        let s = sample_descriptors([&dataset(5)], 10, 1).unwrap();
        assert_eq!(s.len(), 5);
    }

    #[test]
    fn sample_is_deterministic_and_seed_dependent() {
        let d = dataset(1000);
        let a = sample_descriptors([&d], 100, 1).unwrap();
        let b = sample_descriptors([&d], 100, 1).unwrap();
        let c = sample_descriptors([&d], 100, 2).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 100);
        assert_eq!(c.len(), 100);
        assert_ne!(a, c);
        let mut uniq: Vec<u32> = a.iter().map(|v| v[0].to_bits()).collect();
        uniq.sort_unstable();
        uniq.dedup();
        assert_eq!(uniq.len(), 100);
    }

    #[test]
    fn sample_empty_dataset() {
        assert!(matches!(
            sample_descriptors([&dataset(0)], 3, 0),
            Err(Error::EmptyInput(_))
        ));
    }
}
