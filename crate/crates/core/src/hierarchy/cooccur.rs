use std::collections::BTreeMap;

use rayon::prelude::*;

use super::BinSize;
use crate::error::{Error, Result};
use crate::trajkit::Element;

/// Count grid over relative offsets for one ordered (central, neighbor) type pair.
///
/// Bins are indexed by signed offsets in `[-r, r] x [-r, r] x [-l, l]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CooccurrenceMap {
    r: usize,
    l: usize,
    counts: Vec<u32>,
}

impl CooccurrenceMap {
    pub fn new(r: usize, l: usize) -> Self {
        Self {
            r,
            l,
            counts: vec![0; (2 * r + 1) * (2 * r + 1) * (2 * l + 1)],
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        [2 * self.r + 1, 2 * self.r + 1, 2 * self.l + 1]
    }

    pub fn radius(&self) -> (usize, usize) {
        (self.r, self.l)
    }

    pub fn contains(&self, bin: [i64; 3]) -> bool {
        let (r, l) = (self.r as i64, self.l as i64);
        bin[0].abs() <= r && bin[1].abs() <= r && bin[2].abs() <= l
    }

    fn index(&self, bin: [i64; 3]) -> usize {
        let [w, h, _] = self.dims();
        let x = (bin[0] + self.r as i64) as usize;
        let y = (bin[1] + self.r as i64) as usize;
        let t = (bin[2] + self.l as i64) as usize;
        (t * h + y) * w + x
    }

    fn bin(&self, index: usize) -> [i64; 3] {
        let [w, h, _] = self.dims();
        let x = index % w;
        let y = (index / w) % h;
        let t = index / (w * h);
        [
            x as i64 - self.r as i64,
            y as i64 - self.r as i64,
            t as i64 - self.l as i64,
        ]
    }

    /// Count at a signed bin offset; zero outside the cube.
    pub fn get(&self, bin: [i64; 3]) -> u32 {
        if self.contains(bin) {
            self.counts[self.index(bin)]
        } else {
            0
        }
    }

    pub fn add(&mut self, bin: [i64; 3], n: u32) {
        let i = self.index(bin);
        self.counts[i] += n;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| u64::from(c)).sum()
    }

    fn merge(&mut self, other: &CooccurrenceMap) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// Non-zero bins as `(offset, count)` in index order.
    pub fn nonzero(&self) -> impl Iterator<Item = ([i64; 3], u32)> + '_ {
        self.counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(i, &c)| (self.bin(i), c))
    }
}

/// Maps for every ordered type pair; pairs never observed are implicitly all-zero.
#[derive(Debug, Clone, PartialEq)]
pub struct CooccurrenceMaps {
    pub r: usize,
    pub l: usize,
    pub inventory: usize,
    pub maps: BTreeMap<(usize, usize), CooccurrenceMap>,
}

impl CooccurrenceMaps {
    /// `(2r+1)^2 (2l+1) s^2`.
    pub fn total_bins(&self) -> usize {
        (2 * self.r + 1) * (2 * self.r + 1) * (2 * self.l + 1) * self.inventory * self.inventory
    }

    pub fn pair_count(&self) -> usize {
        self.inventory * self.inventory
    }

    pub fn total_count(&self) -> u64 {
        self.maps.values().map(CooccurrenceMap::total).sum()
    }

    pub fn get(&self, central: usize, neighbor: usize) -> Option<&CooccurrenceMap> {
        self.maps.get(&(central, neighbor))
    }
}

/// Accumulate, per ordered type pair, how often a neighbor element falls at
/// each bin offset of the cube centered on a central element's anchor.
pub fn accumulate_cooccurrence(
    videos: &[&[Element]],
    bins: BinSize,
    r: usize,
    l: usize,
    inventory: usize,
) -> Result<CooccurrenceMaps> {
    if r < 1 || l < 1 {
        return Err(Error::ConfigInvalid("cube radii must be >= 1".into()));
    }
    let layer = videos.iter().flat_map(|v| v.iter()).map(|e| e.layer).next();
    if let Some(layer) = layer {
        if let Some(e) = videos
            .iter()
            .flat_map(|v| v.iter())
            .find(|e| e.layer != layer)
        {
            return Err(Error::LayerMismatch(layer, e.layer));
        }
    }
    if let Some(e) = videos
        .iter()
        .flat_map(|v| v.iter())
        .find(|e| e.type_id >= inventory)
    {
        return Err(Error::ShapeMismatch(format!(
            "element type {} outside inventory of {inventory}",
            e.type_id
        )));
    }

    let partial: Vec<BTreeMap<(usize, usize), CooccurrenceMap>> = videos
        .par_iter()
        .map(|video| accumulate_video(video, bins, r, l))
        .collect();
    let mut maps: BTreeMap<(usize, usize), CooccurrenceMap> = BTreeMap::new();
    for part in partial {
        for (key, m) in part {
            match maps.get_mut(&key) {
                Some(acc) => acc.merge(&m),
                None => {
                    maps.insert(key, m);
                }
            }
        }
    }
    Ok(CooccurrenceMaps {
        r,
        l,
        inventory,
        maps,
    })
}

fn accumulate_video(
    video: &[Element],
    bins: BinSize,
    r: usize,
    l: usize,
) -> BTreeMap<(usize, usize), CooccurrenceMap> {
    let mut order: Vec<usize> = (0..video.len()).collect();
    order.sort_by_key(|&i| video[i].anchor.t);
    // Any pair whose temporal offset rounds into the cube is within this many frames.
    let reach = ((l as f64 + 0.5) * bins.temporal as f64).ceil() as i64;
    let mut maps: BTreeMap<(usize, usize), CooccurrenceMap> = BTreeMap::new();
    let mut lo = 0;
    for &ci in &order {
        let c = &video[ci];
        while video[order[lo]].anchor.t < c.anchor.t - reach {
            lo += 1;
        }
        for &ni in order[lo..].iter() {
            let n = &video[ni];
            if n.anchor.t > c.anchor.t + reach {
                break;
            }
            if ni == ci {
                continue;
            }
            let bin = bins.bin_of(
                n.anchor.x - c.anchor.x,
                n.anchor.y - c.anchor.y,
                n.anchor.t - c.anchor.t,
            );
            let map = maps
                .entry((c.type_id, n.type_id))
                .or_insert_with(|| CooccurrenceMap::new(r, l));
            if map.contains(bin) {
                map.add(bin, 1);
            }
        }
    }
    // Drop maps created for pairs that never landed inside the cube.
    maps.retain(|_, m| m.total() > 0);
    maps
}

/// A local maximum of a co-occurrence map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Peak {
    pub bin: [i64; 3],
    pub count: u32,
}

/// Up to `n_per_pair` bins that are maxima (ties allowed) over their
/// 26-neighborhood with `count >= min_support`, ordered by count descending
/// and then by bin offset.
pub fn find_local_maxima(map: &CooccurrenceMap, n_per_pair: usize, min_support: u32) -> Vec<Peak> {
    let floor = min_support.max(1);
    let mut peaks: Vec<Peak> = map
        .nonzero()
        .filter(|&(_, c)| c >= floor)
        .filter(|&(bin, c)| {
            neighborhood(bin).all(|nb| !map.contains(nb) || map.get(nb) <= c)
        })
        .map(|(bin, count)| Peak { bin, count })
        .collect();
    peaks.sort_by(|a, b| b.count.cmp(&a.count).then(a.bin.cmp(&b.bin)));
    peaks.truncate(n_per_pair);
    peaks
}

fn neighborhood(bin: [i64; 3]) -> impl Iterator<Item = [i64; 3]> {
    (-1..=1).flat_map(move |dt| {
        (-1..=1).flat_map(move |dy| {
            (-1..=1)
                .filter(move |&dx| (dx, dy, dt) != (0, 0, 0))
                .map(move |dx| [bin[0] + dx, bin[1] + dy, bin[2] + dt])
        })
    })
}

/// Spring relation read off a peak: offset and per-axis spread, in bins.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spring {
    pub offset: [i64; 3],
    pub sigma: [f64; 3],
}

/// Offset is the peak bin; sigma is the count-weighted standard deviation of
/// the 3x3x3 window around it, floored at `sigma_min`.
pub fn estimate_spring(map: &CooccurrenceMap, peak: [i64; 3], sigma_min: f64) -> Spring {
    let window: Vec<([i64; 3], f64)> = std::iter::once(peak)
        .chain(neighborhood(peak))
        .filter(|b| map.contains(*b))
        .map(|b| (b, f64::from(map.get(b))))
        .collect();
    let mass: f64 = window.iter().map(|(_, c)| c).sum();
    let mut sigma = [sigma_min; 3];
    if mass > 0.0 {
        for (a, s) in sigma.iter_mut().enumerate() {
            let mean = window.iter().map(|(b, c)| b[a] as f64 * c).sum::<f64>() / mass;
            let var = window
                .iter()
                .map(|(b, c)| (b[a] as f64 - mean).powi(2) * c)
                .sum::<f64>()
                / mass;
            *s = var.sqrt().max(sigma_min);
        }
    }
    Spring {
        offset: peak,
        sigma,
    }
}
