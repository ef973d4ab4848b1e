//! Evaluation: localization scores, volume overlap, ROC curves, AUC against
//! overlap, classification accuracy and plot output.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::FramePoints;

/// Axis-aligned space-time box `[x1, x2) x [y1, y2) x [t1, t2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Volume {
    pub x1: f64,
    pub y1: f64,
    pub t1: f64,
    pub x2: f64,
    pub y2: f64,
    pub t2: f64,
}

impl Volume {
    pub fn new(x1: f64, y1: f64, t1: f64, x2: f64, y2: f64, t2: f64) -> Self {
        Self {
            x1,
            y1,
            t1,
            x2,
            y2,
            t2,
        }
    }

    pub fn size(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0) * (self.t2 - self.t1).max(0.0)
    }

    pub fn intersection(&self, other: &Volume) -> f64 {
        let ix = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let iy = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        let it = (self.t2.min(other.t2) - self.t1.max(other.t1)).max(0.0);
        ix * iy * it
    }

    pub fn as_array(&self) -> [f64; 6] {
        [self.x1, self.y1, self.t1, self.x2, self.y2, self.t2]
    }

    /// Lexicographic order on `(x1, y1, t1, x2, y2, t2)`.
    pub fn cmp_lex(&self, other: &Volume) -> std::cmp::Ordering {
        for (a, b) in self.as_array().iter().zip(other.as_array()) {
            match a.total_cmp(&b) {
                std::cmp::Ordering::Equal => continue,
                o => return o,
            }
        }
        std::cmp::Ordering::Equal
    }
}

/// Intersection over union of two volumes; 0 when both are empty.
pub fn volume_iou(a: &Volume, b: &Volume) -> f64 {
    let inter = a.intersection(b);
    let union = a.size() + b.size() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameAnnotation {
    pub frame: u32,
    /// `[x1, y1, x2, y2]`; absent for frames without the action.
    #[serde(rename = "box")]
    pub bbox: Option<[f64; 4]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoAnnotation {
    pub video_id: String,
    /// Action class; `None` for videos without any action.
    pub label: Option<String>,
    pub frames: Vec<FrameAnnotation>,
}

impl VideoAnnotation {
    /// Tightest volume around the annotated boxes; frames span `[first, last + 1)`.
    pub fn bounding_volume(&self) -> Option<Volume> {
        let mut out: Option<Volume> = None;
        for f in &self.frames {
            let Some([x1, y1, x2, y2]) = f.bbox else {
                continue;
            };
            let t = f64::from(f.frame);
            let v = out.get_or_insert(Volume::new(x1, y1, t, x2, y2, t + 1.0));
            v.x1 = v.x1.min(x1);
            v.y1 = v.y1.min(y1);
            v.t1 = v.t1.min(t);
            v.x2 = v.x2.max(x2);
            v.y2 = v.y2.max(y2);
            v.t2 = v.t2.max(t + 1.0);
        }
        out
    }
}

fn inside(p: &[f32; 2], b: &[f64; 4]) -> bool {
    let (x, y) = (f64::from(p[0]), f64::from(p[1]));
    x >= b[0] && x <= b[2] && y >= b[1] && y <= b[3]
}

/// Counts `(hits, pairs)` of one video: a unit hits an annotated frame when at
/// least `theta` of its points on that frame fall in the box. Units with no
/// points on the frame miss it.
fn localization_counts(units: &[FramePoints], frames: &[FrameAnnotation], theta: f64) -> (usize, usize) {
    let mut hits = 0;
    let mut pairs = 0;
    for f in frames {
        let Some(b) = &f.bbox else { continue };
        for unit in units {
            pairs += 1;
            let Some(points) = unit.get(&f.frame).filter(|p| !p.is_empty()) else {
                continue;
            };
            let n_in = points.iter().filter(|p| inside(p, b)).count();
            if n_in as f64 >= theta * points.len() as f64 {
                hits += 1;
            }
        }
    }
    (hits, pairs)
}

/// Fraction of (unit, annotated frame) pairs localized at ratio `theta`.
pub fn localization_score(units: &[FramePoints], frames: &[FrameAnnotation], theta: f64) -> Result<f64> {
    pooled_localization_score(&[(units, frames)], theta)
}

/// [`localization_score`] pooled over several videos.
pub fn pooled_localization_score(videos: &[(&[FramePoints], &[FrameAnnotation])], theta: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::ConfigInvalid(format!("theta {theta} outside [0, 1]")));
    }
    let (mut hits, mut pairs) = (0, 0);
    let mut annotated = false;
    for (units, frames) in videos {
        annotated |= frames.iter().any(|f| f.bbox.is_some());
        let (h, p) = localization_counts(units, frames, theta);
        hits += h;
        pairs += p;
    }
    if !annotated {
        return Err(Error::NoAnnotatedFrames);
    }
    if pairs == 0 {
        return Err(Error::EmptyTestSet);
    }
    Ok(hits as f64 / pairs as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredVolume {
    pub score: f64,
    pub volume: Volume,
}

/// Detections on one test video and its ground truth (`None` on negatives).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalVideo {
    pub video_id: String,
    pub detections: Vec<ScoredVolume>,
    pub truth: Option<Volume>,
}

impl EvalVideo {
    /// Highest-scoring detection; the first one wins ties.
    pub fn top(&self) -> Option<&ScoredVolume> {
        self.detections
            .iter()
            .fold(None, |best: Option<&ScoredVolume>, d| match best {
                Some(b) if b.score >= d.score => Some(b),
                _ => Some(d),
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

/// Video-level ROC from each video's top detection.
///
/// A positive video is a true positive at threshold `s` when its top detection
/// scores at least `s` and overlaps the truth by at least `overlap`; a negative
/// video is a false positive when its top detection scores at least `s`.
/// Points are emitted at every distinct score, starting from `(0, 0)`. If
/// anything fires, the curve is closed at `(1, last tpr)`.
pub fn roc_curve(videos: &[EvalVideo], overlap: f64) -> Result<RocCurve> {
    if videos.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    let n_pos = videos.iter().filter(|v| v.truth.is_some()).count();
    let n_neg = videos.len() - n_pos;
    if n_pos == 0 {
        return Err(Error::EmptyPositives);
    }
    if n_neg == 0 {
        return Err(Error::NoNegatives);
    }
    // (score, is_true_positive)
    let mut events: Vec<(f64, bool)> = Vec::new();
    for v in videos {
        let Some(top) = v.top() else { continue };
        match &v.truth {
            Some(t) if volume_iou(&top.volume, t) >= overlap => events.push((top.score, true)),
            Some(_) => {}
            None => events.push((top.score, false)),
        }
    }
    events.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < events.len() {
        let s = events[i].0;
        while i < events.len() && events[i].0 == s {
            if events[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold: s,
            fpr: fp as f64 / n_neg as f64,
            tpr: tp as f64 / n_pos as f64,
        });
    }
    let last = *points.last().expect("origin present");
    if !events.is_empty() && last.fpr < 1.0 {
        points.push(RocPoint {
            threshold: f64::NEG_INFINITY,
            fpr: 1.0,
            tpr: last.tpr,
        });
    }
    let auc = points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum();
    Ok(RocCurve { points, auc })
}

/// `(overlap, auc)` for each requested overlap threshold.
pub fn auc_vs_overlap(videos: &[EvalVideo], overlaps: &[f64]) -> Result<Vec<(f64, f64)>> {
    overlaps
        .iter()
        .map(|&o| Ok((o, roc_curve(videos, o)?.auc)))
        .collect()
}

pub fn accuracy<T: PartialEq>(predictions: &[T], labels: &[T]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::LengthMismatch(predictions.len(), labels.len()));
    }
    if labels.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    let right = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(right as f64 / labels.len() as f64)
}

/// A named series of `(threshold, x, y)` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub name: String,
    pub x_label: String,
    pub y_label: String,
    pub rows: Vec<[f64; 3]>,
}

impl Curve {
    pub fn from_roc(name: &str, roc: &RocCurve) -> Self {
        Self {
            name: name.into(),
            x_label: "false positive rate".into(),
            y_label: "true positive rate".into(),
            rows: roc.points.iter().map(|p| [p.threshold, p.fpr, p.tpr]).collect(),
        }
    }

    pub fn from_auc(name: &str, aucs: &[(f64, f64)]) -> Self {
        Self {
            name: name.into(),
            x_label: "overlap threshold".into(),
            y_label: "AUC".into(),
            rows: aucs.iter().map(|&(o, a)| [o, o, a]).collect(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("threshold,{},{}\n", self.x_label, self.y_label);
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{}", r[0], r[1], r[2]);
        }
        s
    }

    pub fn from_csv(name: &str, text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::format("empty curve file"))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() != 3 || cols[0] != "threshold" {
            return Err(Error::format("bad curve header"));
        }
        let rows = lines
            .filter(|l| !l.is_empty())
            .map(|l| {
                let v: Vec<f64> = l
                    .split(',')
                    .map(|f| f.parse::<f64>().map_err(|e| Error::format(format!("{f}: {e}"))))
                    .collect::<Result<_>>()?;
                <[f64; 3]>::try_from(v).map_err(|_| Error::format("curve row needs three fields"))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            name: name.into(),
            x_label: cols[1].into(),
            y_label: cols[2].into(),
            rows,
        })
    }

    /// Polyline plot over the unit square of the finite rows.
    pub fn to_svg(&self) -> String {
        const SIZE: f64 = 400.0;
        const PAD: f64 = 50.0;
        let finite: Vec<&[f64; 3]> = self.rows.iter().filter(|r| r[1].is_finite() && r[2].is_finite()).collect();
        let (x_lo, x_hi) = bounds(finite.iter().map(|r| r[1]));
        let (y_lo, y_hi) = bounds(finite.iter().map(|r| r[2]));
        let px = |x: f64| PAD + (x - x_lo) / (x_hi - x_lo) * SIZE;
        let py = |y: f64| PAD + SIZE - (y - y_lo) / (y_hi - y_lo) * SIZE;
        let mut s = String::new();
        let total = SIZE + 2.0 * PAD;
        let _ = writeln!(
            s,
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{total}\" height=\"{total}\" viewBox=\"0 0 {total} {total}\">"
        );
        let _ = writeln!(s, "<rect x=\"{PAD}\" y=\"{PAD}\" width=\"{SIZE}\" height=\"{SIZE}\" fill=\"none\" stroke=\"black\"/>");
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"14\">{}</text>", PAD + SIZE / 2.0, PAD / 2.0, escape(&self.name));
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\">{}</text>", PAD + SIZE / 2.0, total - 12.0, escape(&self.x_label));
        let _ = writeln!(
            s,
            "<text x=\"14\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 14 {})\">{}</text>",
            PAD + SIZE / 2.0,
            PAD + SIZE / 2.0,
            escape(&self.y_label)
        );
        for (v, anchor) in [(x_lo, "start"), (x_hi, "end")] {
            let _ = writeln!(s, "<text x=\"{:.2}\" y=\"{}\" text-anchor=\"{anchor}\" font-size=\"10\">{v:.2}</text>", px(v), PAD + SIZE + 14.0);
        }
        for v in [y_lo, y_hi] {
            let _ = writeln!(s, "<text x=\"{}\" y=\"{:.2}\" text-anchor=\"end\" font-size=\"10\">{v:.2}</text>", PAD - 4.0, py(v) + 4.0);
        }
        let pts: Vec<String> = finite.iter().map(|r| format!("{:.2},{:.2}", px(r[1]), py(r[2]))).collect();
        let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"{}\"/>", pts.join(" "));
        s.push_str("</svg>\n");
        s
    }
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    (lo, hi)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Write `<name>.csv` and `<name>.svg` for every curve; returns the paths written.
pub fn emit_plots(curves: &[Curve], dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for c in curves {
        let csv = dir.join(format!("{}.csv", c.name));
        fs::write(&csv, c.to_csv())?;
        let svg = dir.join(format!("{}.svg", c.name));
        fs::write(&svg, c.to_svg())?;
        written.push(csv);
        written.push(svg);
    }
    Ok(written)
}
