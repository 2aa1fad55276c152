//! Skeleton-stream dataset types, canonical on-disk formats, a SHREC2021
//! adapter, segment extraction for training, and a seeded synthetic
//! gesture-stream generator.
//!
//! Canonical layout: a dataset directory holds one `<id>.txt` per sequence
//! (one frame per line, whitespace-separated reals, frame index implicit by
//! line number), an `annotations.txt` with one `sequence_id class start end`
//! line per gesture span, and an optional `classes.txt` naming classes one
//! per line. Loaders never normalize or otherwise modify coordinates.

use crate::error::{Error, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

/// One timestep of skeleton input: flattened joint coordinates (joints × 3).
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub index: u64,
    pub joints: Vec<f64>,
}

/// An annotated gesture occurrence, frames inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GestureSpan {
    pub class: usize,
    pub start: u64,
    pub end: u64,
}

impl GestureSpan {
    pub fn len(&self) -> u64 {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false // start ≤ end is validated at construction; spans are never empty
    }

    pub fn contains(&self, frame: u64) -> bool {
        frame >= self.start && frame <= self.end
    }
}

/// Per-sequence gesture spans: sorted, non-overlapping, within bounds.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceAnnotation {
    pub spans: Vec<GestureSpan>,
}

impl SequenceAnnotation {
    pub fn validate(&self, sequence_len: u64) -> Result<()> {
        for span in &self.spans {
            if span.start > span.end {
                return Err(Error::Annotation(format!(
                    "span [{}, {}] has start after end",
                    span.start, span.end
                )));
            }
            if span.end >= sequence_len {
                return Err(Error::Annotation(format!(
                    "span [{}, {}] exceeds sequence length {}",
                    span.start, span.end, sequence_len
                )));
            }
        }
        for pair in self.spans.windows(2) {
            if pair[1].start <= pair[0].end {
                return Err(Error::Annotation(format!(
                    "spans [{}, {}] and [{}, {}] overlap or are unsorted",
                    pair[0].start, pair[0].end, pair[1].start, pair[1].end
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonSequence {
    pub id: String,
    pub frames: Vec<Frame>,
    pub annotation: SequenceAnnotation,
}

impl SkeletonSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Test => write!(f, "test"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub sequences: Vec<SkeletonSequence>,
    pub class_names: Vec<String>,
    pub split: Split,
}

impl Dataset {
    /// Joint-vector length shared by all frames, `None` for an empty dataset.
    pub fn input_dim(&self) -> Option<usize> {
        self.sequences
            .iter()
            .find(|s| !s.frames.is_empty())
            .map(|s| s.frames[0].joints.len())
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn total_frames(&self) -> u64 {
        self.sequences.iter().map(|s| s.frames.len() as u64).sum()
    }

    pub fn total_gestures(&self) -> usize {
        self.sequences.iter().map(|s| s.annotation.spans.len()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let mut dim: Option<usize> = None;
        for seq in &self.sequences {
            for frame in &seq.frames {
                match dim {
                    None => dim = Some(frame.joints.len()),
                    Some(d) => {
                        if frame.joints.len() != d {
                            return Err(Error::Schema(format!(
                                "sequence {} has joint vectors of length {} but the dataset uses {}",
                                seq.id,
                                frame.joints.len(),
                                d
                            )));
                        }
                    }
                }
                if frame.joints.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Schema(format!(
                        "sequence {} frame {} has a non-finite coordinate",
                        seq.id, frame.index
                    )));
                }
            }
            seq.annotation.validate(seq.frames.len() as u64)?;
            for span in &seq.annotation.spans {
                if span.class >= self.class_names.len() {
                    return Err(Error::Schema(format!(
                        "sequence {} uses class {} but only {} classes are known",
                        seq.id,
                        span.class,
                        self.class_names.len()
                    )));
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Canonical format
// ---------------------------------------------------------------------------

const ANNOTATIONS_FILE: &str = "annotations.txt";
const CLASSES_FILE: &str = "classes.txt";

fn parse_real(token: &str, path: &Path, line: usize) -> Result<f64> {
    let v: f64 = token.parse().map_err(|_| Error::Parse {
        path: path.display().to_string(),
        location: format!("line {line}"),
        message: format!("not a real number: {token:?}"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            path: path.display().to_string(),
            location: format!("line {line}"),
            message: format!("non-finite value: {token:?}"),
        });
    }
    Ok(v)
}

fn read_frame_file(path: &Path) -> Result<Vec<Frame>> {
    let text = std::fs::read_to_string(path)?;
    let mut frames = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut joints = Vec::new();
        for token in line.split_whitespace() {
            joints.push(parse_real(token, path, i + 1)?);
        }
        frames.push(Frame {
            index: frames.len() as u64,
            joints,
        });
    }
    Ok(frames)
}

/// Load a canonical dataset directory. Empty directories load as empty
/// datasets; coordinates are taken verbatim (no normalization or denoising).
pub fn load_canonical(dir: &Path, split: Split) -> Result<Dataset> {
    let mut sequences: BTreeMap<String, Vec<Frame>> = BTreeMap::new();
    if dir.is_dir() {
        for entry in std::fs::read_dir(dir)? {
            let entry = entry?;
            let path = entry.path();
            if !path.is_file() || path.extension().and_then(|e| e.to_str()) != Some("txt") {
                continue;
            }
            let name = path.file_name().unwrap().to_string_lossy().to_string();
            if name == ANNOTATIONS_FILE || name == CLASSES_FILE {
                continue;
            }
            let id = path.file_stem().unwrap().to_string_lossy().to_string();
            sequences.insert(id, read_frame_file(&path)?);
        }
    } else {
        return Err(Error::Schema(format!(
            "dataset directory not found: {}",
            dir.display()
        )));
    }

    let mut annotations: BTreeMap<String, Vec<GestureSpan>> = BTreeMap::new();
    let ann_path = dir.join(ANNOTATIONS_FILE);
    let mut max_class = None::<usize>;
    if ann_path.is_file() {
        let text = std::fs::read_to_string(&ann_path)?;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 4 {
                return Err(Error::Parse {
                    path: ann_path.display().to_string(),
                    location: format!("line {}", i + 1),
                    message: format!("expected `sequence_id class start end`, got {line:?}"),
                });
            }
            let bad = |what: &str| Error::Parse {
                path: ann_path.display().to_string(),
                location: format!("line {}", i + 1),
                message: format!("bad {what}: {line:?}"),
            };
            let id = parts[0].to_string();
            let class: usize = parts[1].parse().map_err(|_| bad("class index"))?;
            let start: u64 = parts[2].parse().map_err(|_| bad("start frame"))?;
            let end: u64 = parts[3].parse().map_err(|_| bad("end frame"))?;
            if !sequences.contains_key(&id) {
                return Err(Error::Schema(format!(
                    "annotation references unknown sequence {id}"
                )));
            }
            max_class = Some(max_class.map_or(class, |m: usize| m.max(class)));
            annotations.entry(id).or_default().push(GestureSpan { class, start, end });
        }
    }

    let class_names: Vec<String> = {
        let classes_path = dir.join(CLASSES_FILE);
        if classes_path.is_file() {
            std::fs::read_to_string(&classes_path)?
                .lines()
                .map(|l| l.trim().to_string())
                .filter(|l| !l.is_empty())
                .collect()
        } else {
            (0..max_class.map_or(0, |m| m + 1))
                .map(|i| format!("class_{i}"))
                .collect()
        }
    };

    let sequences: Vec<SkeletonSequence> = sequences
        .into_iter()
        .map(|(id, frames)| {
            let mut spans = annotations.remove(&id).unwrap_or_default();
            spans.sort_by_key(|s| s.start);
            SkeletonSequence {
                id,
                frames,
                annotation: SequenceAnnotation { spans },
            }
        })
        .collect();

    let dataset = Dataset {
        sequences,
        class_names,
        split,
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Write a dataset in the canonical layout. Floats are written in their
/// shortest round-tripping form so save → load is the identity.
pub fn save_canonical(dataset: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for seq in &dataset.sequences {
        let mut text = String::new();
        for frame in &seq.frames {
            let mut first = true;
            for v in &frame.joints {
                if !first {
                    text.push(' ');
                }
                write!(text, "{v:?}").unwrap();
                first = false;
            }
            text.push('\n');
        }
        std::fs::write(dir.join(format!("{}.txt", seq.id)), text)?;
    }
    let mut ann = String::new();
    for seq in &dataset.sequences {
        for span in &seq.annotation.spans {
            writeln!(ann, "{} {} {} {}", seq.id, span.class, span.start, span.end).unwrap();
        }
    }
    std::fs::write(dir.join(ANNOTATIONS_FILE), ann)?;
    if !dataset.class_names.is_empty() {
        let mut classes = String::new();
        for name in &dataset.class_names {
            writeln!(classes, "{name}").unwrap();
        }
        std::fs::write(dir.join(CLASSES_FILE), classes)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// SHREC2021 adapter
// ---------------------------------------------------------------------------

fn split_flexible(line: &str) -> Vec<&str> {
    line.split(|c: char| c == ';' || c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .collect()
}

fn read_shrec_sequence(path: &Path) -> Result<Vec<Frame>> {
    let text = std::fs::read_to_string(path)?;
    let mut frames = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let tokens = split_flexible(line);
        if tokens.is_empty() {
            continue;
        }
        let mut joints = Vec::with_capacity(tokens.len());
        for token in tokens {
            joints.push(parse_real(token, path, i + 1)?);
        }
        frames.push(Frame {
            index: frames.len() as u64,
            joints,
        });
    }
    Ok(frames)
}

fn find_split_dir(root: &Path, split: Split) -> Option<std::path::PathBuf> {
    let candidates: &[&str] = match split {
        Split::Train => &["train", "training", "train_set", "training_set"],
        Split::Test => &["test", "testing", "test_set", "testing_set"],
    };
    for c in candidates {
        let p = root.join(c);
        if p.is_dir() {
            return Some(p);
        }
    }
    None
}

/// Load one split of a SHREC2021-style release.
///
/// The on-disk specifics (delimiter, joint count, gesture label spelling)
/// vary between mirrors, so the adapter infers them: sequence files are any
/// `*.txt` with numeric rows (`;`/`,`/whitespace separated), and the
/// annotation file is the one whose name contains `annot` or `label`,
/// holding `sequence_id (label start end)+` rows. String labels are mapped
/// to class indices in sorted order.
pub fn load_shrec2021(root: &Path, split: Split) -> Result<Dataset> {
    let dir = find_split_dir(root, split)
        .or_else(|| if root.is_dir() { Some(root.to_path_buf()) } else { None })
        .ok_or_else(|| Error::Schema(format!("no {split} split under {}", root.display())))?;

    let mut annotation_path = None;
    let mut sequence_paths = Vec::new();
    for entry in std::fs::read_dir(&dir)? {
        let path = entry?.path();
        if !path.is_file() {
            continue;
        }
        let name = path
            .file_name()
            .unwrap()
            .to_string_lossy()
            .to_ascii_lowercase();
        if !name.ends_with(".txt") {
            continue;
        }
        if name.contains("annot") || name.contains("label") {
            annotation_path = Some(path);
        } else {
            sequence_paths.push(path);
        }
    }
    sequence_paths.sort();

    let mut sequences: BTreeMap<String, Vec<Frame>> = BTreeMap::new();
    for path in &sequence_paths {
        let id = path.file_stem().unwrap().to_string_lossy().to_string();
        sequences.insert(id, read_shrec_sequence(path)?);
    }

    let mut raw_spans: BTreeMap<String, Vec<(String, u64, u64)>> = BTreeMap::new();
    let mut label_names: Vec<String> = Vec::new();
    if let Some(ann_path) = &annotation_path {
        let text = std::fs::read_to_string(ann_path)?;
        for (i, line) in text.lines().enumerate() {
            let tokens = split_flexible(line);
            if tokens.is_empty() {
                continue;
            }
            let id = tokens[0].to_string();
            if !sequences.contains_key(&id) {
                return Err(Error::Schema(format!(
                    "annotation line {} references unknown sequence {id}",
                    i + 1
                )));
            }
            let rest = &tokens[1..];
            if rest.len() % 3 != 0 {
                return Err(Error::Parse {
                    path: ann_path.display().to_string(),
                    location: format!("line {}", i + 1),
                    message: "expected (label start end) triplets after the sequence id".into(),
                });
            }
            for triple in rest.chunks(3) {
                let bad = |what: &str| Error::Parse {
                    path: ann_path.display().to_string(),
                    location: format!("line {}", i + 1),
                    message: format!("bad {what}: {:?}", triple.join(" ")),
                };
                let label = triple[0].to_string();
                let start: u64 = triple[1].parse().map_err(|_| bad("start frame"))?;
                let end: u64 = triple[2].parse().map_err(|_| bad("end frame"))?;
                if !label_names.contains(&label) {
                    label_names.push(label.clone());
                }
                raw_spans.entry(id.clone()).or_default().push((label, start, end));
            }
        }
    }
    for id in sequences.keys() {
        if annotation_path.is_some() && !raw_spans.contains_key(id) && split == Split::Test {
            // test sequences may legitimately contain no gestures; train
            // sequences without any annotation are suspicious
        }
    }
    if annotation_path.is_none() && !sequences.is_empty() {
        return Err(Error::Schema(format!(
            "no annotation file found in {}",
            dir.display()
        )));
    }

    // numeric labels keep their own value ordering; names sort alphabetically
    let all_numeric = !label_names.is_empty() && label_names.iter().all(|l| l.parse::<usize>().is_ok());
    let class_names: Vec<String> = if all_numeric {
        let max = label_names
            .iter()
            .map(|l| l.parse::<usize>().unwrap())
            .max()
            .unwrap();
        (0..=max).map(|i| format!("class_{i}")).collect()
    } else {
        let mut names = label_names.clone();
        names.sort();
        names
    };
    let class_index = |label: &str| -> usize {
        if all_numeric {
            label.parse::<usize>().unwrap()
        } else {
            class_names.iter().position(|n| n == label).unwrap()
        }
    };

    let sequences: Vec<SkeletonSequence> = sequences
        .into_iter()
        .map(|(id, frames)| {
            let mut spans: Vec<GestureSpan> = raw_spans
                .remove(&id)
                .unwrap_or_default()
                .into_iter()
                .map(|(label, start, end)| GestureSpan {
                    class: class_index(&label),
                    start,
                    end,
                })
                .collect();
            spans.sort_by_key(|s| s.start);
            SkeletonSequence {
                id,
                frames,
                annotation: SequenceAnnotation { spans },
            }
        })
        .collect();

    let dataset = Dataset {
        sequences,
        class_names,
        split,
    };
    dataset.validate()?;
    Ok(dataset)
}

// ---------------------------------------------------------------------------
// Training segments
// ---------------------------------------------------------------------------

/// A contiguous labeled frame run used as one training unit.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub frames: Vec<Vec<f64>>,
    /// Class index per frame for the recognizer; 0/1 per frame for the detector.
    pub labels: Vec<usize>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentKind {
    /// One segment per annotated span, constant class label.
    Recognizer,
    /// Whole sequences sliced into fixed-length chunks with per-frame binary
    /// labels, so the detector sees idle/gesture boundaries.
    Detector { chunk_len: usize },
}

/// Slice a dataset into training segments.
pub fn extract_segments(dataset: &Dataset, kind: SegmentKind) -> Result<Vec<Segment>> {
    let mut out = Vec::new();
    match kind {
        SegmentKind::Recognizer => {
            for seq in &dataset.sequences {
                for span in &seq.annotation.spans {
                    let frames: Vec<Vec<f64>> = (span.start..=span.end)
                        .map(|i| seq.frames[i as usize].joints.clone())
                        .collect();
                    let labels = vec![span.class; frames.len()];
                    out.push(Segment { frames, labels });
                }
            }
        }
        SegmentKind::Detector { chunk_len } => {
            if chunk_len == 0 {
                return Err(Error::Config("detector chunk length must be ≥ 1".into()));
            }
            for seq in &dataset.sequences {
                let labels = crate::training::derive_detector_labels(
                    seq.frames.len() as u64,
                    &seq.annotation,
                )?;
                for chunk_start in (0..seq.frames.len()).step_by(chunk_len) {
                    let chunk_end = (chunk_start + chunk_len).min(seq.frames.len());
                    let frames: Vec<Vec<f64>> = seq.frames[chunk_start..chunk_end]
                        .iter()
                        .map(|f| f.joints.clone())
                        .collect();
                    let chunk_labels: Vec<usize> = labels[chunk_start..chunk_end]
                        .iter()
                        .map(|&b| b as usize)
                        .collect();
                    out.push(Segment {
                        frames,
                        labels: chunk_labels,
                    });
                }
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Synthetic generator
// ---------------------------------------------------------------------------

/// Configuration for the seeded synthetic gesture-stream generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub train_sequences: usize,
    pub test_sequences: usize,
    /// Gestures per sequence, inclusive range.
    pub gestures_per_sequence: (usize, usize),
    /// Gesture length in frames, inclusive range.
    pub gesture_len: (usize, usize),
    /// Idle gap length in frames, inclusive range.
    pub idle_gap: (usize, usize),
    /// Uniform jitter amplitude added to every coordinate.
    pub noise: f64,
    pub num_joints: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_classes: 3,
            train_sequences: 60,
            test_sequences: 20,
            gestures_per_sequence: (2, 4),
            gesture_len: (30, 45),
            idle_gap: (40, 80),
            noise: 0.02,
            num_joints: 8,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("synthetic data needs ≥ 2 classes".into()));
        }
        if self.num_joints == 0 {
            return Err(Error::Config("num_joints must be ≥ 1".into()));
        }
        for (name, (lo, hi)) in [
            ("gestures_per_sequence", self.gestures_per_sequence),
            ("gesture_len", self.gesture_len),
            ("idle_gap", self.idle_gap),
        ] {
            if lo == 0 || hi < lo {
                return Err(Error::Config(format!("empty range for {name}: [{lo}, {hi}]")));
            }
        }
        if self.noise < 0.0 {
            return Err(Error::Config("noise must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Both splits of a generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub train: Dataset,
    pub test: Dataset,
}

/// Rest position of one joint.
fn rest_pose(joint: usize) -> [f64; 3] {
    [
        0.5 * (joint % 3) as f64,
        0.5 * ((joint / 3) % 3) as f64,
        0.25 * (joint % 2) as f64,
    ]
}

/// Class-specific trajectory offset at local gesture frame `i` of `len`.
///
/// All classes trace the same unit circle in the x-y plane so a single frame
/// never identifies the class; classes differ only in rotation direction and
/// angular speed (class 0: +1 revolution, class 1: −1, class 2: +2, ...).
/// `phase` randomizes the entry point per gesture instance.
pub fn gesture_offset(class: usize, i: usize, len: usize, phase: f64) -> [f64; 3] {
    let direction = if class % 2 == 0 { 1.0 } else { -1.0 };
    let revolutions = (1 + class / 2) as f64;
    let theta = phase + direction * revolutions * std::f64::consts::TAU * i as f64 / len as f64;
    [theta.cos(), theta.sin(), 0.0]
}

fn range_sample(rng: &mut ChaCha8Rng, (lo, hi): (usize, usize)) -> usize {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

fn generate_split(config: &SynthConfig, split: Split, count: usize) -> Dataset {
    let split_tag: u64 = match split {
        Split::Train => 0x7261,
        Split::Test => 0x7465,
    };
    let mut sequences = Vec::with_capacity(count);
    for seq_idx in 0..count {
        let mut rng =
            ChaCha8Rng::seed_from_u64(config.seed ^ (split_tag << 32) ^ (seq_idx as u64));
        let gestures = range_sample(&mut rng, config.gestures_per_sequence);
        let mut frames: Vec<Frame> = Vec::new();
        let mut spans = Vec::with_capacity(gestures);
        let jitter = |rng: &mut ChaCha8Rng| {
            if config.noise > 0.0 {
                rng.gen_range(-config.noise..config.noise)
            } else {
                0.0
            }
        };
        let push_idle = |frames: &mut Vec<Frame>, rng: &mut ChaCha8Rng, len: usize| {
            for _ in 0..len {
                let mut joints = Vec::with_capacity(config.num_joints * 3);
                for j in 0..config.num_joints {
                    let base = rest_pose(j);
                    for b in base {
                        joints.push(b + jitter(rng));
                    }
                }
                frames.push(Frame {
                    index: frames.len() as u64,
                    joints,
                });
            }
        };

        let gap = range_sample(&mut rng, config.idle_gap);
        push_idle(&mut frames, &mut rng, gap);
        for _ in 0..gestures {
            let class = rng.gen_range(0..config.num_classes);
            let len = range_sample(&mut rng, config.gesture_len);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let start = frames.len() as u64;
            for i in 0..len {
                let offset = gesture_offset(class, i, len, phase);
                let mut joints = Vec::with_capacity(config.num_joints * 3);
                for j in 0..config.num_joints {
                    let base = rest_pose(j);
                    // slight per-joint amplitude variation for texture
                    let scale = 1.0 + 0.05 * j as f64;
                    joints.push(base[0] + scale * offset[0] + jitter(&mut rng));
                    joints.push(base[1] + scale * offset[1] + jitter(&mut rng));
                    joints.push(base[2] + scale * offset[2] + jitter(&mut rng));
                }
                frames.push(Frame {
                    index: frames.len() as u64,
                    joints,
                });
            }
            spans.push(GestureSpan {
                class,
                start,
                end: frames.len() as u64 - 1,
            });
            let gap = range_sample(&mut rng, config.idle_gap);
            push_idle(&mut frames, &mut rng, gap);
        }

        sequences.push(SkeletonSequence {
            id: format!("{split}_{seq_idx:03}"),
            frames,
            annotation: SequenceAnnotation { spans },
        });
    }
    Dataset {
        sequences,
        class_names: (0..config.num_classes).map(|c| format!("class_{c}")).collect(),
        split,
    }
}

/// Generate a deterministic synthetic dataset: idle jitter around a rest
/// pose alternating with class-specific circular trajectories.
pub fn generate_synthetic(config: &SynthConfig) -> Result<SyntheticDataset> {
    config.validate()?;
    Ok(SyntheticDataset {
        train: generate_split(config, Split::Train, config.train_sequences),
        test: generate_split(config, Split::Test, config.test_sequences),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn small_synth() -> SynthConfig {
        SynthConfig {
            num_classes: 3,
            train_sequences: 4,
            test_sequences: 2,
            gestures_per_sequence: (2, 2),
            gesture_len: (20, 20),
            idle_gap: (50, 50),
            noise: 0.0,
            num_joints: 2,
            seed: 7,
        }
    }

    #[test]
    fn synthetic_is_deterministic() {
        let cfg = small_synth();
        let a = generate_synthetic(&cfg).unwrap();
        let b = generate_synthetic(&cfg).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
    }

    #[test]
    fn synthetic_sequence_lengths_follow_construction() {
        // idle 50 + gesture 20 + idle 50 + gesture 20 + idle 50 = 190
        let cfg = small_synth();
        let data = generate_synthetic(&cfg).unwrap();
        for seq in &data.train.sequences {
            assert_eq!(seq.frames.len(), 190);
            assert_eq!(seq.annotation.spans.len(), 2);
            assert_eq!(seq.annotation.spans[0].start, 50);
            assert_eq!(seq.annotation.spans[0].end, 69);
            assert_eq!(seq.annotation.spans[1].start, 120);
            assert_eq!(seq.annotation.spans[1].end, 139);
        }
    }

    #[test]
    fn synthetic_annotations_are_exact() {
        // with zero noise: annotated frames sit on the circle (distance 1
        // from rest per joint, scaled), idle frames sit exactly on the rest pose
        let cfg = small_synth();
        let data = generate_synthetic(&cfg).unwrap();
        let seq = &data.train.sequences[0];
        for frame in &seq.frames {
            let annotated = seq.annotation.spans.iter().any(|s| s.contains(frame.index));
            for j in 0..cfg.num_joints {
                let base = rest_pose(j);
                let dx = frame.joints[j * 3] - base[0];
                let dy = frame.joints[j * 3 + 1] - base[1];
                let dist = (dx * dx + dy * dy).sqrt();
                if annotated {
                    let scale = 1.0 + 0.05 * j as f64;
                    assert!((dist - scale).abs() < 1e-9, "gesture frame off circle");
                } else {
                    assert!(dist < 1e-12, "idle frame off rest pose");
                }
            }
        }
    }

    #[test]
    fn synthetic_classes_separable_frame_by_frame() {
        // a class-0 and a class-1 gesture of equal length differ at every
        // aligned frame (independent entry phases; opposite directions)
        let cfg = small_synth();
        let data = generate_synthetic(&cfg).unwrap();
        let mut by_class: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
        for seq in &data.train.sequences {
            for span in &seq.annotation.spans {
                if by_class.contains_key(&span.class) {
                    continue;
                }
                let frames: Vec<Vec<f64>> = (span.start..=span.end)
                    .map(|i| seq.frames[i as usize].joints.clone())
                    .collect();
                by_class.insert(span.class, frames);
            }
        }
        let a = by_class.get(&0).expect("no class-0 gesture in fixture");
        let b = by_class.get(&1).expect("no class-1 gesture in fixture");
        for i in 0..a.len().min(b.len()) {
            let dist: f64 = a[i]
                .iter()
                .zip(b[i].iter())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            assert!(dist > 0.05, "classes coincide at frame {i}: {dist}");
        }
    }

    #[test]
    fn canonical_round_trip_is_identity() {
        let cfg = SynthConfig {
            noise: 0.015,
            ..small_synth()
        };
        let data = generate_synthetic(&cfg).unwrap();
        let dir = TempDir::new().unwrap();
        save_canonical(&data.train, dir.path()).unwrap();
        let reloaded = load_canonical(dir.path(), Split::Train).unwrap();
        assert_eq!(reloaded, data.train);
    }

    #[test]
    fn empty_directory_loads_empty_dataset() {
        let dir = TempDir::new().unwrap();
        let data = load_canonical(dir.path(), Split::Train).unwrap();
        assert!(data.sequences.is_empty());
        assert!(data.class_names.is_empty());
    }

    #[test]
    fn tiny_hand_written_dataset() {
        let dir = TempDir::new().unwrap();
        std::fs::write(dir.path().join("seq_a.txt"), "0 0 0 1 1 1\n0.5 0 0 1 1 1\n0 0 0 2 2 2\n")
            .unwrap();
        std::fs::write(dir.path().join(ANNOTATIONS_FILE), "seq_a 0 1 2\n").unwrap();
        let data = load_canonical(dir.path(), Split::Test).unwrap();
        assert_eq!(data.sequences.len(), 1);
        assert_eq!(data.sequences[0].frames.len(), 3);
        assert_eq!(data.sequences[0].frames[0].joints.len(), 6);
        assert_eq!(data.class_names, vec!["class_0"]);
    }

    #[test]
    fn malformed_line_reports_file_and_line() {
        let dir = TempDir::new().unwrap();
        std::fs::write(dir.path().join("seq.txt"), "0 0 0\n0 zebra 0\n").unwrap();
        match load_canonical(dir.path(), Split::Train) {
            Err(Error::Parse { location, .. }) => assert_eq!(location, "line 2"),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn inconsistent_joint_counts_rejected() {
        let dir = TempDir::new().unwrap();
        std::fs::write(dir.path().join("a.txt"), "0 0 0\n").unwrap();
        std::fs::write(dir.path().join("b.txt"), "0 0 0 0 0 0\n").unwrap();
        assert!(matches!(
            load_canonical(dir.path(), Split::Train),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn annotation_overlap_rejected() {
        let dir = TempDir::new().unwrap();
        std::fs::write(dir.path().join("a.txt"), "0 0 0\n0 0 0\n0 0 0\n0 0 0\n").unwrap();
        std::fs::write(dir.path().join(ANNOTATIONS_FILE), "a 0 0 2\na 1 2 3\n").unwrap();
        assert!(matches!(
            load_canonical(dir.path(), Split::Train),
            Err(Error::Annotation(_))
        ));
    }

    #[test]
    fn annotation_unknown_sequence_rejected() {
        let dir = TempDir::new().unwrap();
        std::fs::write(dir.path().join("a.txt"), "0 0 0\n").unwrap();
        std::fs::write(dir.path().join(ANNOTATIONS_FILE), "ghost 0 0 0\n").unwrap();
        assert!(matches!(
            load_canonical(dir.path(), Split::Train),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn recognizer_segments_cover_exactly_annotated_frames() {
        let cfg = small_synth();
        let data = generate_synthetic(&cfg).unwrap();
        let segments = extract_segments(&data.train, SegmentKind::Recognizer).unwrap();
        let expected: usize = data.train.total_gestures();
        assert_eq!(segments.len(), expected);
        for segment in &segments {
            assert_eq!(segment.frames.len(), 20);
            assert!(segment.labels.iter().all(|&l| l == segment.labels[0]));
        }
        // frame-exact: segment contents equal the annotated slices
        let seq = &data.train.sequences[0];
        let span = seq.annotation.spans[0];
        let seg = &segments[0];
        assert_eq!(seg.frames[0], seq.frames[span.start as usize].joints);
        assert_eq!(
            seg.frames[seg.frames.len() - 1],
            seq.frames[span.end as usize].joints
        );
    }

    #[test]
    fn detector_chunking_hand_count() {
        // 300-frame sequence, chunk 128 → chunks of 128, 128, 44
        let mut frames = Vec::new();
        for i in 0..300 {
            frames.push(Frame {
                index: i,
                joints: vec![0.0, 0.0, 0.0],
            });
        }
        let dataset = Dataset {
            sequences: vec![SkeletonSequence {
                id: "s".into(),
                frames,
                annotation: SequenceAnnotation {
                    spans: vec![GestureSpan { class: 0, start: 100, end: 149 }],
                },
            }],
            class_names: vec!["class_0".into()],
            split: Split::Train,
        };
        let segments =
            extract_segments(&dataset, SegmentKind::Detector { chunk_len: 128 }).unwrap();
        assert_eq!(segments.len(), 3);
        assert_eq!(segments[0].len(), 128);
        assert_eq!(segments[1].len(), 128);
        assert_eq!(segments[2].len(), 44);
        // labels line up with the span across the chunk boundary
        assert_eq!(segments[0].labels[99], 0);
        assert_eq!(segments[0].labels[100], 1);
        assert_eq!(segments[1].labels[149 - 128], 1);
        assert_eq!(segments[1].labels[150 - 128], 0);
    }

    #[test]
    fn unannotated_sequence_yields_no_recognizer_segments() {
        let dataset = Dataset {
            sequences: vec![SkeletonSequence {
                id: "s".into(),
                frames: vec![Frame { index: 0, joints: vec![0.0; 3] }],
                annotation: SequenceAnnotation::default(),
            }],
            class_names: vec![],
            split: Split::Train,
        };
        let segments = extract_segments(&dataset, SegmentKind::Recognizer).unwrap();
        assert!(segments.is_empty());
    }

    #[test]
    fn shrec_adapter_semicolon_fixture_round_trips() {
        let dir = TempDir::new().unwrap();
        let train = dir.path().join("train_set");
        std::fs::create_dir(&train).unwrap();
        std::fs::write(
            train.join("1.txt"),
            "0.0;0.0;0.0;1.0;1.0;1.0\n0.1;0.0;0.0;1.0;1.0;1.0\n0.2;0.0;0.0;1.1;1.0;1.0\n0.3;0.0;0.0;1.1;1.0;1.0\n",
        )
        .unwrap();
        std::fs::write(
            train.join("2.txt"),
            "5.0;5.0;5.0;6.0;6.0;6.0\n5.0;5.1;5.0;6.0;6.0;6.0\n",
        )
        .unwrap();
        std::fs::write(train.join("annotations.txt"), "1;swipe;1;2;grab;3;3\n2;grab;0;1\n").unwrap();
        let data = load_shrec2021(dir.path(), Split::Train).unwrap();
        assert_eq!(data.sequences.len(), 2);
        assert_eq!(data.class_names, vec!["grab", "swipe"]);
        assert_eq!(data.sequences[0].annotation.spans.len(), 2);
        assert_eq!(data.sequences[0].annotation.spans[0].class, 1); // swipe
        assert_eq!(data.input_dim(), Some(6));

        // re-serialize to canonical and reload: identical dataset
        let out = TempDir::new().unwrap();
        save_canonical(&data, out.path()).unwrap();
        let reloaded = load_canonical(out.path(), Split::Train).unwrap();
        assert_eq!(reloaded, data);
    }

    #[test]
    fn shrec_adapter_missing_annotations_is_schema_error() {
        let dir = TempDir::new().unwrap();
        let train = dir.path().join("training");
        std::fs::create_dir(&train).unwrap();
        std::fs::write(train.join("1.txt"), "0;0;0\n").unwrap();
        assert!(matches!(
            load_shrec2021(dir.path(), Split::Train),
            Err(Error::Schema(_))
        ));
    }
}
