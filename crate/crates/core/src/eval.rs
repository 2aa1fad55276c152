//! Online evaluation protocol and metrics: detection rate, false-positive
//! rate, Jaccard index, real-time factor, and early detection latency.
//!
//! The protocol runner processes every test sequence strictly sequentially
//! on one thread, frames in order, and times only the pipeline compute so
//! the real-time factor excludes I/O.

use crate::data::{Dataset, GestureSpan};
use crate::error::{Error, Result};
use crate::model::{DetectorModel, RecognizerModel};
use crate::pipeline::{FrameTrace, GestureEvent, PipelineConfig, StreamSession};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::time::Instant;

/// Standard frame rate used to convert frame counts into stream duration.
pub const FRAME_RATE: f64 = 50.0;

/// A temporal extent, frames inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: u64,
    pub end: u64,
}

impl Span {
    pub fn new(start: u64, end: u64) -> Result<Self> {
        if start > end {
            return Err(Error::Span(format!("span start {start} after end {end}")));
        }
        Ok(Span { start, end })
    }

    pub fn frames(&self) -> u64 {
        self.end - self.start + 1
    }
}

impl From<&GestureSpan> for Span {
    fn from(s: &GestureSpan) -> Self {
        Span { start: s.start, end: s.end }
    }
}

impl From<&GestureEvent> for Span {
    fn from(e: &GestureEvent) -> Self {
        Span { start: e.start_frame, end: e.end_frame }
    }
}

/// Intersection over union on the time axis; 0 when disjoint.
pub fn temporal_iou(a: Span, b: Span) -> Result<f64> {
    if a.start > a.end || b.start > b.end {
        return Err(Error::Span("malformed span passed to temporal_iou".into()));
    }
    let inter_start = a.start.max(b.start);
    let inter_end = a.end.min(b.end);
    if inter_start > inter_end {
        return Ok(0.0);
    }
    let intersection = inter_end - inter_start + 1;
    let union = a.frames() + b.frames() - intersection;
    Ok(intersection as f64 / union as f64)
}

/// Outcome of matching predictions to ground truths within one sequence.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// (prediction index, ground-truth index, IoU); each side appears at most once.
    pub pairs: Vec<(usize, usize, f64)>,
    pub unmatched_predictions: Vec<usize>,
    pub unmatched_ground_truths: Vec<usize>,
}

/// Greedy matcher: ground truths in ascending start order each take the
/// same-class, not-yet-matched prediction with maximal IoU ≥ 0.5; ties go to
/// the earlier prediction start, then the lower index.
pub fn match_predictions(preds: &[GestureSpan], gts: &[GestureSpan]) -> MatchResult {
    let mut gt_order: Vec<usize> = (0..gts.len()).collect();
    gt_order.sort_by_key(|&i| (gts[i].start, i));

    let mut taken = vec![false; preds.len()];
    let mut pairs = Vec::new();
    let mut unmatched_gts = Vec::new();
    for &gi in &gt_order {
        let gt = &gts[gi];
        let mut best: Option<(usize, f64)> = None;
        for (pi, pred) in preds.iter().enumerate() {
            if taken[pi] || pred.class != gt.class {
                continue;
            }
            let iou = temporal_iou(pred.into(), gt.into()).unwrap_or(0.0);
            if iou < 0.5 {
                continue;
            }
            let better = match best {
                None => true,
                Some((bi, biou)) => {
                    iou > biou
                        || (iou == biou
                            && (pred.start, pi) < (preds[bi].start, bi))
                }
            };
            if better {
                best = Some((pi, iou));
            }
        }
        match best {
            Some((pi, iou)) => {
                taken[pi] = true;
                pairs.push((pi, gi, iou));
            }
            None => unmatched_gts.push(gi),
        }
    }
    let unmatched_preds: Vec<usize> = (0..preds.len()).filter(|&i| !taken[i]).collect();
    MatchResult {
        pairs,
        unmatched_predictions: unmatched_preds,
        unmatched_ground_truths: unmatched_gts,
    }
}

/// Matched ground truths over all ground truths. Absent when there are none.
pub fn detection_rate(matched: usize, total_gts: usize) -> Option<f64> {
    if total_gts == 0 {
        None
    } else {
        Some(matched as f64 / total_gts as f64)
    }
}

/// Unmatched predictions over all ground truths (may exceed 1).
pub fn false_positive_rate(unmatched_preds: usize, total_gts: usize) -> Option<f64> {
    if total_gts == 0 {
        None
    } else {
        Some(unmatched_preds as f64 / total_gts as f64)
    }
}

/// Merge spans into disjoint sorted intervals.
fn merge_intervals(mut spans: Vec<Span>) -> Vec<Span> {
    spans.sort_by_key(|s| s.start);
    let mut out: Vec<Span> = Vec::new();
    for s in spans {
        match out.last_mut() {
            Some(last) if s.start <= last.end + 1 && s.start >= last.start => {
                if s.end > last.end {
                    last.end = s.end;
                }
            }
            _ => out.push(s),
        }
    }
    out
}

fn interval_total(spans: &[Span]) -> u64 {
    spans.iter().map(Span::frames).sum()
}

fn interval_intersection(a: &[Span], b: &[Span]) -> u64 {
    let mut total = 0;
    let mut j = 0;
    for s in a {
        while j < b.len() && b[j].end < s.start {
            j += 1;
        }
        let mut k = j;
        while k < b.len() && b[k].start <= s.end {
            let lo = s.start.max(b[k].start);
            let hi = s.end.min(b[k].end);
            if lo <= hi {
                total += hi - lo + 1;
            }
            k += 1;
        }
    }
    total
}

/// Per-sequence Jaccard: for each class present in the ground truth or the
/// predictions, the IoU between the unions of predicted and true frames of
/// that class; averaged over present classes. `None` when no class appears.
pub fn jaccard_index(preds: &[GestureSpan], gts: &[GestureSpan], num_classes: usize) -> Option<f64> {
    let mut sum = 0.0;
    let mut present = 0usize;
    for class in 0..num_classes {
        let p: Vec<Span> = preds.iter().filter(|s| s.class == class).map(Span::from).collect();
        let g: Vec<Span> = gts.iter().filter(|s| s.class == class).map(Span::from).collect();
        if p.is_empty() && g.is_empty() {
            continue;
        }
        let p = merge_intervals(p);
        let g = merge_intervals(g);
        let inter = interval_intersection(&p, &g);
        let union = interval_total(&p) + interval_total(&g) - inter;
        sum += inter as f64 / union as f64;
        present += 1;
    }
    if present == 0 {
        None
    } else {
        Some(sum / present as f64)
    }
}

/// Processing time over stream duration at the standard frame rate.
pub fn real_time_factor(elapsed_seconds: f64, total_frames: u64) -> f64 {
    elapsed_seconds / (total_frames as f64 / FRAME_RATE)
}

/// Frames from each matched gesture's onset to the first provisionally
/// correct prediction, one entry per matched pair. A gesture never
/// provisionally correct before its end contributes its full length.
pub fn early_detection_latencies(
    traces: &[FrameTrace],
    matches: &MatchResult,
    gts: &[GestureSpan],
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(matches.pairs.len());
    for &(_, gi, _) in &matches.pairs {
        let gt = &gts[gi];
        if gt.end as usize >= traces.len() {
            return Err(Error::Protocol(format!(
                "traces end at frame {} but ground truth extends to {}",
                traces.len(),
                gt.end
            )));
        }
        let mut latency = (gt.end - gt.start) as f64;
        for t in gt.start..=gt.end {
            let trace = &traces[t as usize];
            if let Some(p) = &trace.provisional {
                if p.class == gt.class {
                    latency = (t - gt.start) as f64;
                    break;
                }
            }
        }
        out.push(latency);
    }
    Ok(out)
}

/// Execution environment recorded alongside the metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentNotes {
    pub threads: usize,
    pub precision: String,
    pub input_dim: usize,
}

/// One test sequence's events and ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceReport {
    pub id: String,
    pub frames: u64,
    pub events: Vec<GestureEvent>,
    pub ground_truth: Vec<GestureSpan>,
    pub matched: usize,
    pub jaccard: Option<f64>,
}

/// Full evaluation outcome. Accuracy metrics are deterministic; only the
/// real-time factor depends on the machine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub detection_rate: Option<f64>,
    pub false_positive_rate: Option<f64>,
    pub jaccard_index: Option<f64>,
    pub real_time_factor: f64,
    pub early_detection_latency_frames: Option<f64>,
    pub total_frames: u64,
    pub total_gestures: usize,
    pub total_predictions: usize,
    pub elapsed_seconds: f64,
    pub environment: EnvironmentNotes,
    pub per_sequence: Vec<SequenceReport>,
}

impl EvalReport {
    /// Line-delimited form: one summary record then one record per sequence.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        #[derive(Serialize)]
        struct Summary<'a> {
            r#type: &'static str,
            detection_rate: &'a Option<f64>,
            false_positive_rate: &'a Option<f64>,
            jaccard_index: &'a Option<f64>,
            real_time_factor: f64,
            early_detection_latency_frames: &'a Option<f64>,
            total_frames: u64,
            total_gestures: usize,
            total_predictions: usize,
            elapsed_seconds: f64,
            environment: &'a EnvironmentNotes,
        }
        let summary = Summary {
            r#type: "summary",
            detection_rate: &self.detection_rate,
            false_positive_rate: &self.false_positive_rate,
            jaccard_index: &self.jaccard_index,
            real_time_factor: self.real_time_factor,
            early_detection_latency_frames: &self.early_detection_latency_frames,
            total_frames: self.total_frames,
            total_gestures: self.total_gestures,
            total_predictions: self.total_predictions,
            elapsed_seconds: self.elapsed_seconds,
            environment: &self.environment,
        };
        writeln!(w, "{}", serde_json::to_string(&summary).map_err(json_err)?)?;
        for seq in &self.per_sequence {
            #[derive(Serialize)]
            struct SeqLine<'a> {
                r#type: &'static str,
                #[serde(flatten)]
                seq: &'a SequenceReport,
            }
            writeln!(
                w,
                "{}",
                serde_json::to_string(&SeqLine { r#type: "sequence", seq }).map_err(json_err)?
            )?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<EvalReport> {
        #[derive(Deserialize)]
        struct Tagged {
            r#type: String,
        }
        let mut summary: Option<serde_json::Value> = None;
        let mut sequences = Vec::new();
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let tag: Tagged = serde_json::from_str(&line).map_err(json_err)?;
            match tag.r#type.as_str() {
                "summary" => summary = Some(serde_json::from_str(&line).map_err(json_err)?),
                "sequence" => {
                    let seq: SequenceReport = serde_json::from_str(&line).map_err(json_err)?;
                    sequences.push(seq);
                }
                other => {
                    return Err(Error::Parse {
                        path: "report".into(),
                        location: "record".into(),
                        message: format!("unknown record type {other:?}"),
                    })
                }
            }
        }
        let s = summary.ok_or_else(|| Error::Protocol("report has no summary record".into()))?;
        let get_f = |k: &str| s.get(k).and_then(|v| v.as_f64());
        Ok(EvalReport {
            detection_rate: get_f("detection_rate"),
            false_positive_rate: get_f("false_positive_rate"),
            jaccard_index: get_f("jaccard_index"),
            real_time_factor: get_f("real_time_factor").unwrap_or(0.0),
            early_detection_latency_frames: get_f("early_detection_latency_frames"),
            total_frames: s.get("total_frames").and_then(|v| v.as_u64()).unwrap_or(0),
            total_gestures: s.get("total_gestures").and_then(|v| v.as_u64()).unwrap_or(0) as usize,
            total_predictions: s.get("total_predictions").and_then(|v| v.as_u64()).unwrap_or(0)
                as usize,
            elapsed_seconds: get_f("elapsed_seconds").unwrap_or(0.0),
            environment: serde_json::from_value(
                s.get("environment").cloned().unwrap_or(serde_json::Value::Null),
            )
            .map_err(json_err)?,
            per_sequence: sequences,
        })
    }
}

fn json_err(e: serde_json::Error) -> Error {
    Error::Parse {
        path: "json".into(),
        location: "record".into(),
        message: e.to_string(),
    }
}

pub(crate) fn events_to_spans(events: &[GestureEvent]) -> Vec<GestureSpan> {
    events
        .iter()
        .map(|e| GestureSpan {
            class: e.class,
            start: e.start_frame,
            end: e.end_frame,
        })
        .collect()
}

/// Per-sequence streaming outputs plus compute time, before metrics.
pub struct SequenceRun {
    pub id: String,
    pub events: Vec<GestureEvent>,
    pub traces: Vec<FrameTrace>,
    pub compute_seconds: f64,
    pub frames: u64,
}

/// Run the pipeline over one sequence, timing only the per-frame compute.
pub fn run_sequence(
    detector: &DetectorModel,
    recognizer: &RecognizerModel,
    config: &PipelineConfig,
    id: &str,
    frames: &[crate::data::Frame],
) -> Result<SequenceRun> {
    let mut session = StreamSession::new(detector, recognizer, config.clone())?;
    let mut events = Vec::new();
    let mut traces = Vec::with_capacity(frames.len());
    let started = Instant::now();
    for frame in frames {
        let (event, trace) = session
            .process_frame(&frame.joints)
            .map_err(|e| annotate_sequence(e, id))?;
        events.extend(event);
        traces.push(trace);
    }
    let tail = session.finalize().map_err(|e| annotate_sequence(e, id))?;
    let compute_seconds = started.elapsed().as_secs_f64();
    events.extend(tail);
    Ok(SequenceRun {
        id: id.to_string(),
        events,
        traces,
        compute_seconds,
        frames: frames.len() as u64,
    })
}

fn annotate_sequence(e: Error, id: &str) -> Error {
    match e {
        Error::Numeric(msg) => Error::Numeric(format!("sequence {id}: {msg}")),
        other => other,
    }
}

/// The sequential single-thread evaluation protocol: every test sequence in
/// order, all five metrics, per-sequence event lists.
pub fn evaluate_online(
    detector: &DetectorModel,
    recognizer: &RecognizerModel,
    dataset: &Dataset,
    config: &PipelineConfig,
) -> Result<EvalReport> {
    evaluate_online_with_traces(detector, recognizer, dataset, config).map(|(report, _)| report)
}

/// Same as [`evaluate_online`] but also returns per-sequence traces for
/// plotting or latency inspection.
pub fn evaluate_online_with_traces(
    detector: &DetectorModel,
    recognizer: &RecognizerModel,
    dataset: &Dataset,
    config: &PipelineConfig,
) -> Result<(EvalReport, Vec<SequenceRun>)> {
    if dataset.sequences.is_empty() {
        return Err(Error::Protocol("evaluation dataset is empty".into()));
    }
    dataset.validate()?;
    let num_classes = recognizer.num_classes();

    let mut runs = Vec::with_capacity(dataset.sequences.len());
    let mut per_sequence = Vec::with_capacity(dataset.sequences.len());
    let mut elapsed = 0.0;
    let mut total_frames = 0u64;
    let mut total_gestures = 0usize;
    let mut total_predictions = 0usize;
    let mut matched = 0usize;
    let mut unmatched_preds = 0usize;
    let mut jaccard_sum = 0.0;
    let mut jaccard_count = 0usize;
    let mut latencies: Vec<f64> = Vec::new();

    for seq in &dataset.sequences {
        let run = run_sequence(detector, recognizer, config, &seq.id, &seq.frames)?;
        elapsed += run.compute_seconds;
        total_frames += run.frames;
        let pred_spans = events_to_spans(&run.events);
        let gts = &seq.annotation.spans;
        let matches = match_predictions(&pred_spans, gts);
        matched += matches.pairs.len();
        unmatched_preds += matches.unmatched_predictions.len();
        total_gestures += gts.len();
        total_predictions += pred_spans.len();
        let seq_jaccard = jaccard_index(&pred_spans, gts, num_classes);
        if let Some(j) = seq_jaccard {
            jaccard_sum += j;
            jaccard_count += 1;
        }
        latencies.extend(early_detection_latencies(&run.traces, &matches, gts)?);
        per_sequence.push(SequenceReport {
            id: seq.id.clone(),
            frames: run.frames,
            events: run.events.clone(),
            ground_truth: gts.clone(),
            matched: matches.pairs.len(),
            jaccard: seq_jaccard,
        });
        runs.push(run);
    }

    let report = EvalReport {
        detection_rate: detection_rate(matched, total_gestures),
        false_positive_rate: false_positive_rate(unmatched_preds, total_gestures),
        jaccard_index: if jaccard_count == 0 {
            None
        } else {
            Some(jaccard_sum / jaccard_count as f64)
        },
        real_time_factor: real_time_factor(elapsed, total_frames),
        early_detection_latency_frames: if latencies.is_empty() {
            None
        } else {
            Some(latencies.iter().sum::<f64>() / latencies.len() as f64)
        },
        total_frames,
        total_gestures,
        total_predictions,
        elapsed_seconds: elapsed,
        environment: EnvironmentNotes {
            threads: 1,
            precision: "f64".into(),
            input_dim: dataset.input_dim().unwrap_or(0),
        },
        per_sequence,
    };
    Ok((report, runs))
}
