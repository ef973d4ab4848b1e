//! Pipeline stages over a work directory. Every stage reads the artifacts of
//! the stages before it, checks the config fingerprint they carry, and writes
//! its own artifacts with the current fingerprint.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{hash_from_u64, hash_to_u64, Config, Stage};
use crate::error::{Error, Result};
use crate::evalkit::{
    accuracy, auc_vs_overlap, emit_plots, pooled_localization_score, roc_curve, Curve, EvalVideo, 
    RocCurve, ScoredVolume, VideoAnnotation, Volume,
};
use crate::featmap::{build_pyramid, FeaturePyramid, Level};
use crate::hierarchy::{detect_elements, learn_hierarchy, localize, FramePoints, Hierarchy, VideoDetections};
use crate::lastdpm::{infer, InferOptions, LastdpmModel};
use crate::learn::{
    bow_histogram, init_model, train_bow_classifier, train_lastdpm, BowClassifier, RoundRecord, TrainingExample,
};
use crate::synth::{generate_corpus, MotifInstance, Split};
use crate::trajkit::{
    build_codebook, quantize_video, read_codebook, read_trajectories, sample_descriptors, write_codebook,
    write_trajectories, Codebook, TrajectorySet,
};

const MANIFEST_FORMAT: &str = "comptraj-manifest";
const ELEMENTS_FORMAT: &str = "comptraj-elements";
const BOW_FORMAT: &str = "comptraj-bow";
const PREDICTIONS_FORMAT: &str = "comptraj-predictions";
const DETECTIONS_MAGIC: &[u8; 4] = b"CTDT";
const FORMAT_VERSION: u32 = 1;

fn with_path(path: &Path, e: io::Error) -> Error {
    Error::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| with_path(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| with_path(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| with_path(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush().map_err(|e| with_path(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_reader(open(path)?).map_err(|e| match e.is_io() {
        true => with_path(path, e.into()),
        false => Error::format(format!("{}: {e}", path.display())),
    })
}

/// Artifact locations inside a work directory.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
    pub fn codebook(&self) -> PathBuf {
        self.root.join("codebook.ctcb")
    }
    pub fn hierarchy(&self) -> PathBuf {
        self.root.join("hierarchy.json")
    }
    pub fn elements(&self, id: &str) -> PathBuf {
        self.root.join("elements").join(format!("{id}.json"))
    }
    pub fn bow(&self) -> PathBuf {
        self.root.join("bow.json")
    }
    pub fn predictions(&self) -> PathBuf {
        self.root.join("predictions.json")
    }
    pub fn model(&self, label: &str) -> PathBuf {
        self.root.join("models").join(format!("{label}.json"))
    }
    pub fn checkpoint(&self, label: &str, round: usize) -> PathBuf {
        self.root.join("models").join(format!("{label}.round{round}.json"))
    }
    pub fn training_log(&self, label: &str) -> PathBuf {
        self.root.join("models").join(format!("{label}.log.jsonl"))
    }
    pub fn detections(&self, label: &str) -> PathBuf {
        self.root.join("detections").join(format!("{label}.txt"))
    }
    pub fn detections_binary(&self, label: &str) -> PathBuf {
        self.root.join("detections").join(format!("{label}.ctdt"))
    }
    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }
    pub fn featmap(&self, id: &str, level: Level, index: usize) -> PathBuf {
        let level = match level {
            Level::Grain => "grain",
            Level::Fine => "fine",
        };
        self.root.join("featmaps").join(format!("{id}.{level}.{index}.ctfm"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Paths relative to the manifest's directory.
    pub trajectories: String,
    pub annotation: String,
    pub label: Option<String>,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub motif: Option<MotifInstance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let m: Manifest = read_json(path)?;
        if m.format != MANIFEST_FORMAT || m.version != FORMAT_VERSION {
            return Err(Error::format(format!("{}: not a v{FORMAT_VERSION} manifest", path.display())));
        }
        let mut ids = BTreeSet::new();
        let base = path.parent().unwrap_or(Path::new("."));
        for e in &m.entries {
            if !ids.insert(&e.id) {
                return Err(Error::format(format!("duplicate video id {}", e.id)));
            }
            for p in [&e.trajectories, &e.annotation] {
                let full = base.join(p);
                if !full.is_file() {
                    return Err(with_path(&full, io::Error::from(io::ErrorKind::NotFound)));
                }
            }
        }
        Ok(m)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Class labels in sorted order.
    pub fn classes(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter_map(|e| e.label.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
struct ElementsFile {
    format: String,
    version: u32,
    config_hash: String,
    detections: VideoDetections,
}

#[derive(Serialize, Deserialize)]
struct BowFile {
    format: String,
    version: u32,
    config_hash: String,
    classifier: BowClassifier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub video_id: String,
    pub predicted: String,
    pub label: String,
}

#[derive(Serialize, Deserialize)]
struct PredictionsFile {
    format: String,
    version: u32,
    config_hash: String,
    predictions: Vec<Prediction>,
}

/// Element detections of one video and the config hash they were produced under.
pub fn read_elements(path: &Path) -> Result<(VideoDetections, String)> {
    let f: ElementsFile = read_json(path)?;
    if f.format != ELEMENTS_FORMAT || f.version != FORMAT_VERSION {
        return Err(Error::format(format!("{}: not a v{FORMAT_VERSION} element file", path.display())));
    }
    Ok((f.detections, f.config_hash))
}

/// One detection as stored in detection files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub video_id: String,
    pub label: String,
    pub score: f64,
    pub volume: Volume,
}

/// Text detection file: a header line, then `video label score x1 y1 t1 x2 y2 t2` per line.
pub fn write_detections_text<W: Write>(mut w: W, config_hash: &str, records: &[DetectionRecord]) -> Result<()> {
    writeln!(w, "# comptraj-detections {FORMAT_VERSION} {config_hash}")?;
    for r in records {
        let v = r.volume;
        writeln!(
            w,
            "{} {} {} {} {} {} {} {} {}",
            r.video_id, r.label, r.score, v.x1, v.y1, v.t1, v.x2, v.y2, v.t2
        )?;
    }
    Ok(())
}

pub fn read_detections_text<R: BufRead>(r: R) -> Result<(Vec<DetectionRecord>, String)> {
    let mut lines = r.lines();
    let header = lines.next().transpose()?.ok_or_else(|| Error::format("empty detection file"))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 4 || fields[1] != "comptraj-detections" || fields[2] != FORMAT_VERSION.to_string() {
        return Err(Error::format("bad detection file header"));
    }
    let hash = fields[3].to_string();
    let mut out = Vec::new();
    for line in lines {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 9 {
            return Err(Error::format(format!("detection line has {} fields", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| Error::format(format!("{s}: {e}")));
        out.push(DetectionRecord {
            video_id: f[0].into(),
            label: f[1].into(),
            score: num(f[2])?,
            volume: Volume::new(num(f[3])?, num(f[4])?, num(f[5])?, num(f[6])?, num(f[7])?, num(f[8])?),
        });
    }
    Ok((out, hash))
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    let len = u16::try_from(s.len()).map_err(|_| Error::format("string too long"))?;
    w.write_u16::<LittleEndian>(len)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let len = r.read_u16::<LittleEndian>()? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::format("string is not UTF-8"))
}

/// Binary detection file: `CTDT`, version u16, config hash u64, count u64,
/// then per record the id and label (u16 length + UTF-8) and seven f64.
pub fn write_detections_binary<W: Write>(mut w: W, config_hash: &str, records: &[DetectionRecord]) -> Result<()> {
    w.write_all(DETECTIONS_MAGIC)?;
    w.write_u16::<LittleEndian>(FORMAT_VERSION as u16)?;
    w.write_u64::<LittleEndian>(hash_to_u64(config_hash)?)?;
    w.write_u64::<LittleEndian>(records.len() as u64)?;
    for r in records {
        write_str(&mut w, &r.video_id)?;
        write_str(&mut w, &r.label)?;
        w.write_f64::<LittleEndian>(r.score)?;
        for v in r.volume.as_array() {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    Ok(())
}

pub fn read_detections_binary<R: Read>(mut r: R) -> Result<(Vec<DetectionRecord>, String)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != DETECTIONS_MAGIC || r.read_u16::<LittleEndian>()? != FORMAT_VERSION as u16 {
        return Err(Error::format("not a v1 CTDT detection file"));
    }
    let hash = hash_from_u64(r.read_u64::<LittleEndian>()?);
    let n = r.read_u64::<LittleEndian>()?;
    let mut out = Vec::new();
    for _ in 0..n {
        let video_id = read_str(&mut r)?;
        let label = read_str(&mut r)?;
        let score = r.read_f64::<LittleEndian>()?;
        let mut v = [0f64; 6];
        r.read_f64_into::<LittleEndian>(&mut v)?;
        out.push(DetectionRecord {
            video_id,
            label,
            score,
            volume: Volume::new(v[0], v[1], v[2], v[3], v[4], v[5]),
        });
    }
    Ok((out, hash))
}

/// Summary metrics of one evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationReport {
    pub theta: f64,
    pub score: f64,
    pub sweep: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub label: String,
    pub overlap: f64,
    pub roc: RocCurve,
    pub auc_vs_overlap: Vec<(f64, f64)>,
}

pub struct Pipeline<'a> {
    pub config: &'a Config,
    pub workspace: Workspace,
    /// Accept artifacts produced under a different config.
    pub force: bool,
}

impl<'a> Pipeline<'a> {
    pub fn new(config: &'a Config, workspace: Workspace) -> Self {
        Self {
            config,
            workspace,
            force: false,
        }
    }

    fn check(&self, artifact: &Path, stage: Stage, found: &str) -> Result<()> {
        let expected = self.config.stage_hash(stage);
        if found == expected {
            return Ok(());
        }
        if self.force {
            warn!("{}: config hash {found} differs from {expected}; continuing (--force)", artifact.display());
            return Ok(());
        }
        Err(Error::HashMismatch {
            artifact: artifact.display().to_string(),
            expected,
            found: found.to_string(),
        })
    }

    fn path(&self, relative: &str) -> PathBuf {
        self.workspace.root.join(relative)
    }

    // ---- loading ----

    pub fn manifest(&self) -> Result<Manifest> {
        let path = self.workspace.manifest();
        let m = Manifest::load(&path)?;
        self.check(&path, Stage::Corpus, &m.config_hash)?;
        Ok(m)
    }

    pub fn trajectories(&self, entry: &ManifestEntry) -> Result<TrajectorySet> {
        let path = self.path(&entry.trajectories);
        read_trajectories(open(&path)?).map_err(|e| match e {
            Error::Io(io) => with_path(&path, io),
            other => other,
        })
    }

    pub fn annotation(&self, entry: &ManifestEntry) -> Result<VideoAnnotation> {
        read_json(&self.path(&entry.annotation))
    }

    pub fn codebook(&self) -> Result<Codebook> {
        let path = self.workspace.codebook();
        let (cb, hash) = read_codebook(open(&path)?)?;
        self.check(&path, Stage::Codebook, &hash_from_u64(hash))?;
        Ok(cb)
    }

    pub fn hierarchy(&self) -> Result<Hierarchy> {
        let path = self.workspace.hierarchy();
        let (h, hash) = Hierarchy::read_json(open(&path)?)?;
        self.check(&path, Stage::Hierarchy, &hash)?;
        Ok(h)
    }

    pub fn elements(&self, id: &str) -> Result<Vec<Vec<crate::trajkit::Element>>> {
        let path = self.workspace.elements(id);
        let (detections, hash) = read_elements(&path)?;
        self.check(&path, Stage::Hierarchy, &hash)?;
        Ok(detections.layers)
    }

    pub fn model(&self, label: &str) -> Result<LastdpmModel> {
        let path = self.workspace.model(label);
        let (m, hash) = LastdpmModel::read_json(open(&path)?)?;
        self.check(&path, Stage::Lastdpm, &hash)?;
        Ok(m)
    }

    pub fn bow(&self) -> Result<BowClassifier> {
        let path = self.workspace.bow();
        let f: BowFile = read_json(&path)?;
        if f.format != BOW_FORMAT || f.version != FORMAT_VERSION {
            return Err(Error::format(format!("{}: not a v{FORMAT_VERSION} classifier", path.display())));
        }
        self.check(&path, Stage::Bow, &f.config_hash)?;
        Ok(f.classifier)
    }

    pub fn predictions(&self) -> Result<Vec<Prediction>> {
        let path = self.workspace.predictions();
        let f: PredictionsFile = read_json(&path)?;
        if f.format != PREDICTIONS_FORMAT || f.version != FORMAT_VERSION {
            return Err(Error::format(format!("{}: not a v{FORMAT_VERSION} prediction file", path.display())));
        }
        self.check(&path, Stage::Bow, &f.config_hash)?;
        Ok(f.predictions)
    }

    pub fn detections(&self, label: &str) -> Result<Vec<DetectionRecord>> {
        let path = self.workspace.detections(label);
        let (records, hash) = read_detections_text(open(&path)?)?;
        self.check(&path, Stage::Lastdpm, &hash)?;
        Ok(records)
    }

    fn inventories(hierarchy: &Hierarchy) -> Vec<usize> {
        (0..hierarchy.depth()).map(|l| hierarchy.inventory_size(l)).collect()
    }

    pub fn pyramid(&self, hierarchy: &Hierarchy, entry: &ManifestEntry, video: crate::trajkit::VideoInfo) -> Result<FeaturePyramid> {
        let layers = self.elements(&entry.id)?;
        build_pyramid(&layers, &Self::inventories(hierarchy), &self.config.features, video)
    }

    // ---- stages ----

    /// Generate the synthetic corpus and its manifest.
    pub fn synth(&self) -> Result<Manifest> {
        let seed = self.config.derive_seed("synth");
        let videos = generate_corpus(&self.config.synth, &self.config.corpus, seed)?;
        let mut entries = Vec::with_capacity(videos.len());
        for v in &videos {
            let traj = format!("videos/{}.ctrj", v.id);
            let ann = format!("annotations/{}.json", v.id);
            let mut w = create(&self.path(&traj))?;
            write_trajectories(&mut w, &v.scene.trajectories)?;
            w.flush()?;
            write_json(&self.path(&ann), &v.scene.annotation)?;
            entries.push(ManifestEntry {
                id: v.id.clone(),
                trajectories: traj,
                annotation: ann,
                label: v.scene.annotation.label.clone(),
                split: v.split,
                motif: v.scene.motif.clone(),
            });
        }
        let manifest = Manifest {
            format: MANIFEST_FORMAT.into(),
            version: FORMAT_VERSION,
            config_hash: self.config.stage_hash(Stage::Corpus),
            entries,
        };
        write_json(&self.workspace.manifest(), &manifest)?;
        info!("synth: {} videos", manifest.entries.len());
        Ok(manifest)
    }

    /// Cluster descriptors sampled from the training split.
    pub fn build_codebook(&self) -> Result<Codebook> {
        let manifest = self.manifest()?;
        let sets: Vec<TrajectorySet> = manifest
            .split(Split::Train)
            .map(|e| self.trajectories(e))
            .collect::<Result<_>>()?;
        let cfg = &self.config.codebook;
        let sample = sample_descriptors(&sets, cfg.samples, self.config.derive_seed("codebook-sample"))?;
        let cb = build_codebook(&sample, cfg.k, self.config.derive_seed("codebook"), &cfg.kmeans)?;
        let mut w = create(&self.workspace.codebook())?;
        write_codebook(&mut w, &cb, hash_to_u64(&self.config.stage_hash(Stage::Codebook))?)?;
        w.flush()?;
        info!("codebook: k = {} from {} descriptors", cb.k(), sample.len());
        Ok(cb)
    }

    /// Learn every hierarchy layer from the labeled training videos.
    pub fn learn_hierarchy(&self) -> Result<Hierarchy> {
        let manifest = self.manifest()?;
        let cb = self.codebook()?;
        let videos: Vec<(String, Vec<crate::trajkit::Element>)> = manifest
            .split(Split::Train)
            .filter(|e| e.label.is_some())
            .collect::<Vec<_>>()
            .par_iter()
            .map(|e| {
                let set = self.trajectories(e)?;
                Ok((e.label.clone().unwrap_or_default(), quantize_video(&set, &cb)?))
            })
            .collect::<Result<_>>()?;
        let h = learn_hierarchy(Hierarchy::new(cb.k(), self.config.hierarchy.clone()), &videos)?;
        let mut w = create(&self.workspace.hierarchy())?;
        h.write_json(&mut w, &self.config.stage_hash(Stage::Hierarchy))?;
        w.flush()?;
        info!(
            "hierarchy: inventories {:?}",
            (0..h.depth()).map(|l| h.inventory_size(l)).collect::<Vec<_>>()
        );
        Ok(h)
    }

    /// Quantize and detect hierarchy elements in every video.
    pub fn detect_elements(&self) -> Result<()> {
        let manifest = self.manifest()?;
        let cb = self.codebook()?;
        let h = self.hierarchy()?;
        let hash = self.config.stage_hash(Stage::Hierarchy);
        manifest.entries.par_iter().try_for_each(|e| {
            let set = self.trajectories(e)?;
            let layers = detect_elements(&quantize_video(&set, &cb)?, &h)?;
            let file = ElementsFile {
                format: ELEMENTS_FORMAT.into(),
                version: FORMAT_VERSION,
                config_hash: hash.clone(),
                detections: VideoDetections {
                    video_id: e.id.clone(),
                    layers,
                },
            };
            write_json(&self.workspace.elements(&e.id), &file)
        })?;
        info!("detect-elements: {} videos", manifest.entries.len());
        Ok(())
    }

    /// Write grain and fine maps of every pyramid level of one video.
    pub fn dump_featmaps(&self, id: &str) -> Result<Vec<PathBuf>> {
        let manifest = self.manifest()?;
        let entry = manifest
            .entries
            .iter()
            .find(|e| e.id == id)
            .ok_or_else(|| Error::ConfigInvalid(format!("unknown video {id}")))?;
        let h = self.hierarchy()?;
        let set = self.trajectories(entry)?;
        let pyramid = self.pyramid(&h, entry, set.video)?;
        let mut paths = Vec::new();
        for (i, level) in pyramid.levels.iter().enumerate() {
            for map in [&level.grain, &level.fine] {
                let path = self.workspace.featmap(id, map.level, i);
                let mut w = create(&path)?;
                map.write_dump(&mut w)?;
                w.flush()?;
                paths.push(path);
            }
        }
        Ok(paths)
    }

    fn histograms(&self, h: &Hierarchy, entries: &[&ManifestEntry]) -> Result<Vec<Vec<f64>>> {
        let inv = Self::inventories(h);
        entries
            .par_iter()
            .map(|e| bow_histogram(&self.elements(&e.id)?, &inv))
            .collect()
    }

    pub fn train_bow(&self) -> Result<BowClassifier> {
        let manifest = self.manifest()?;
        let h = self.hierarchy()?;
        let train: Vec<&ManifestEntry> = manifest.split(Split::Train).filter(|e| e.label.is_some()).collect();
        let hists = self.histograms(&h, &train)?;
        let videos: Vec<(String, Vec<f64>)> = train
            .iter()
            .zip(hists)
            .map(|(e, hist)| (e.label.clone().unwrap_or_default(), hist))
            .collect();
        let clf = train_bow_classifier(&videos, &self.config.bow, self.config.derive_seed("bow"))?;
        write_json(
            &self.workspace.bow(),
            &BowFile {
                format: BOW_FORMAT.into(),
                version: FORMAT_VERSION,
                config_hash: self.config.stage_hash(Stage::Bow),
                classifier: clf.clone(),
            },
        )?;
        Ok(clf)
    }

    /// Classify the labeled test videos.
    pub fn classify(&self) -> Result<Vec<Prediction>> {
        let manifest = self.manifest()?;
        let h = self.hierarchy()?;
        let clf = self.bow()?;
        let test: Vec<&ManifestEntry> = manifest.split(Split::Test).filter(|e| e.label.is_some()).collect();
        let hists = self.histograms(&h, &test)?;
        let predictions = test
            .iter()
            .zip(&hists)
            .map(|(e, hist)| {
                Ok(Prediction {
                    video_id: e.id.clone(),
                    predicted: clf.classify(hist)?.to_string(),
                    label: e.label.clone().unwrap_or_default(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        write_json(
            &self.workspace.predictions(),
            &PredictionsFile {
                format: PREDICTIONS_FORMAT.into(),
                version: FORMAT_VERSION,
                config_hash: self.config.stage_hash(Stage::Bow),
                predictions: predictions.clone(),
            },
        )?;
        Ok(predictions)
    }

    fn labels(&self, manifest: &Manifest, class: Option<&str>) -> Result<Vec<String>> {
        let classes = manifest.classes();
        match class {
            Some(c) if classes.iter().any(|k| k == c) => Ok(vec![c.to_string()]),
            Some(c) => Err(Error::ConfigInvalid(format!("no class {c} in the manifest"))),
            None => Ok(classes),
        }
    }

    /// Train one detector per class (or only `class`): positives are the
    /// class's training videos, negatives every other training video.
    pub fn train_lastdpm(&self, class: Option<&str>) -> Result<Vec<(LastdpmModel, Vec<RoundRecord>)>> {
        let manifest = self.manifest()?;
        let h = self.hierarchy()?;
        let train: Vec<&ManifestEntry> = manifest.split(Split::Train).collect();
        let data: Vec<(FeaturePyramid, Option<Volume>)> = train
            .par_iter()
            .map(|e| {
                let ann = self.annotation(e)?;
                let set = self.trajectories(e)?;
                Ok((self.pyramid(&h, e, set.video)?, ann.bounding_volume()))
            })
            .collect::<Result<_>>()?;
        let hash = self.config.stage_hash(Stage::Lastdpm);
        let mut out = Vec::new();
        for label in self.labels(&manifest, class)? {
            let mut positives = Vec::new();
            let mut negatives = Vec::new();
            for (e, (pyramid, truth)) in train.iter().zip(&data) {
                if e.label.as_deref() == Some(label.as_str()) {
                    positives.push(TrainingExample {
                        video_id: &e.id,
                        pyramid,
                        truth: *truth,
                    });
                } else {
                    negatives.push(TrainingExample {
                        video_id: &e.id,
                        pyramid,
                        truth: None,
                    });
                }
            }
            let seed = self.config.derive_seed(&format!("lastdpm-{label}"));
            let init = init_model(&label, &positives, &negatives, &self.config.features, &self.config.model, seed)?;
            let log_path = self.workspace.training_log(&label);
            let mut log = create(&log_path)?;
            let (model, records) = train_lastdpm(init, &positives, &negatives, &self.config.train, seed, |record, model| {
                serde_json::to_writer(&mut log, record)?;
                log.write_all(b"\n")?;
                let mut w = create(&self.workspace.checkpoint(&label, record.round))?;
                model.write_json(&mut w, &hash)?;
                w.flush()?;
                Ok(())
            })?;
            log.flush()?;
            let mut w = create(&self.workspace.model(&label))?;
            model.write_json(&mut w, &hash)?;
            w.flush()?;
            out.push((model, records));
        }
        Ok(out)
    }

    /// Run detectors on the test split. `threshold` overrides the calibrated
    /// threshold; evaluation passes `-inf` so every video's top detection is kept.
    pub fn detect(&self, class: Option<&str>, threshold: Option<f64>) -> Result<()> {
        let manifest = self.manifest()?;
        let h = self.hierarchy()?;
        let test: Vec<&ManifestEntry> = manifest.split(Split::Test).collect();
        let pyramids: Vec<FeaturePyramid> = test
            .par_iter()
            .map(|e| {
                let set = self.trajectories(e)?;
                self.pyramid(&h, e, set.video)
            })
            .collect::<Result<_>>()?;
        let hash = self.config.stage_hash(Stage::Lastdpm);
        for label in self.labels(&manifest, class)? {
            let model = self.model(&label)?;
            let options = InferOptions {
                mode: self.config.eval.mode,
                threshold,
                ..Default::default()
            };
            let per_video: Vec<Vec<DetectionRecord>> = test
                .par_iter()
                .zip(&pyramids)
                .map(|(e, p)| {
                    Ok(infer(&model, p, &options)?
                        .into_iter()
                        .take(self.config.eval.max_detections)
                        .map(|d| DetectionRecord {
                            video_id: e.id.clone(),
                            label: label.clone(),
                            score: d.score,
                            volume: d.volume,
                        })
                        .collect())
                })
                .collect::<Result<_>>()?;
            let records: Vec<DetectionRecord> = per_video.into_iter().flatten().collect();
            let mut w = create(&self.workspace.detections(&label))?;
            write_detections_text(&mut w, &hash, &records)?;
            w.flush()?;
            let mut w = create(&self.workspace.detections_binary(&label))?;
            write_detections_binary(&mut w, &hash, &records)?;
            w.flush()?;
            info!("detect {label}: {} detections on {} videos", records.len(), test.len());
        }
        Ok(())
    }

    /// Localization over the labeled test videos, units being each video's
    /// top-layer detections expanded to their trajectories.
    pub fn evaluate_localization(&self, thetas: &[f64]) -> Result<Vec<(f64, f64)>> {
        let manifest = self.manifest()?;
        let top = self.hierarchy()?.depth() - 1;
        let test: Vec<&ManifestEntry> = manifest.split(Split::Test).filter(|e| e.label.is_some()).collect();
        let data: Vec<(Vec<FramePoints>, VideoAnnotation)> = test
            .par_iter()
            .map(|e| {
                let set = self.trajectories(e)?;
                let layers = self.elements(&e.id)?;
                Ok((vec![localize(&layers, top, &set)], self.annotation(e)?))
            })
            .collect::<Result<_>>()?;
        let videos: Vec<(&[FramePoints], &[crate::evalkit::FrameAnnotation])> =
            data.iter().map(|(u, a)| (u.as_slice(), a.frames.as_slice())).collect();
        thetas
            .iter()
            .map(|&t| Ok((t, pooled_localization_score(&videos, t)?)))
            .collect()
    }

    /// Test videos for `label`'s detector: its positives and the clutter-only negatives.
    pub fn eval_videos(&self, label: &str) -> Result<Vec<EvalVideo>> {
        let manifest = self.manifest()?;
        let records = self.detections(label)?;
        manifest
            .split(Split::Test)
            .filter(|e| e.label.is_none() || e.label.as_deref() == Some(label))
            .map(|e| {
                let truth = match e.label {
                    Some(_) => Some(
                        self.annotation(e)?
                            .bounding_volume()
                            .ok_or(Error::NoAnnotatedFrames)?,
                    ),
                    None => None,
                };
                Ok(EvalVideo {
                    video_id: e.id.clone(),
                    detections: records
                        .iter()
                        .filter(|r| r.video_id == e.id)
                        .map(|r| ScoredVolume {
                            score: r.score,
                            volume: r.volume,
                        })
                        .collect(),
                    truth,
                })
            })
            .collect()
    }

    pub fn evaluate_detection(&self, label: &str) -> Result<DetectionReport> {
        let videos = self.eval_videos(label)?;
        let eval = &self.config.eval;
        Ok(DetectionReport {
            label: label.into(),
            overlap: eval.overlap,
            roc: roc_curve(&videos, eval.overlap)?,
            auc_vs_overlap: auc_vs_overlap(&videos, &eval.overlaps)?,
        })
    }

    pub fn evaluate_accuracy(&self) -> Result<f64> {
        let p = self.predictions()?;
        let predicted: Vec<&str> = p.iter().map(|p| p.predicted.as_str()).collect();
        let labels: Vec<&str> = p.iter().map(|p| p.label.as_str()).collect();
        accuracy(&predicted, &labels)
    }

    /// ROC and AUC-vs-overlap curves of every class, as CSV and SVG.
    pub fn plot(&self) -> Result<Vec<PathBuf>> {
        let manifest = self.manifest()?;
        let mut curves = Vec::new();
        for label in manifest.classes() {
            let report = self.evaluate_detection(&label)?;
            curves.push(Curve::from_roc(&format!("roc-{label}"), &report.roc));
            curves.push(Curve::from_auc(&format!("auc-{label}"), &report.auc_vs_overlap));
        }
        emit_plots(&curves, &self.workspace.eval_dir())
    }

    /// Every stage in order.
    pub fn run_all(&self) -> Result<()> {
        self.synth()?;
        self.build_codebook()?;
        self.learn_hierarchy()?;
        self.detect_elements()?;
        self.train_bow()?;
        self.classify()?;
        self.train_lastdpm(None)?;
        self.detect(None, Some(f64::NEG_INFINITY))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detection_files_round_trip() {
        let records = vec![
            DetectionRecord {
                video_id: "a-001".into(),
                label: "wave".into(),
                score: 0.1 + 0.2,
                volume: Volume::new(0.0, 1.5, 2.0, 64.0, 64.0, 24.0),
            },
            DetectionRecord {
                video_id: "none-000".into(),
                label: "wave".into(),
                score: -1.0 / 3.0,
                volume: Volume::new(16.0, 0.0, 0.0, 80.0, 48.0, 20.0),
            },
        ];
        let hash = "0123456789abcdef";
        let mut text = Vec::new();
        write_detections_text(&mut text, hash, &records).unwrap();
        assert_eq!(read_detections_text(text.as_slice()).unwrap(), (records.clone(), hash.to_string()));
        let mut bin = Vec::new();
        write_detections_binary(&mut bin, hash, &records).unwrap();
        assert_eq!(read_detections_binary(bin.as_slice()).unwrap(), (records, hash.to_string()));
    }
}
