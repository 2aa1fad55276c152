//! The three-stage sparse recognition state machine.
//!
//! Per frame, in order: (1) the analyzer checks the incoming joints against
//! its history and zeroes the detector's hidden state on a discontinuity;
//! (2) the detector scores the frame; (3) hysteresis thresholds move the
//! session between Idle and Active, resetting the recognizer's hidden state
//! on activation and emitting one gesture event on deactivation; (4) while
//! Active the recognizer runs and its per-frame probabilities join a running
//! mean. While Idle the recognizer performs no computation at all.

use crate::analyzer::{AnalyzerConfig, AnalyzerState};
use crate::error::{Error, Result};
use crate::model::{DetectorModel, ExternalHiddenState, RecognizerModel};
use serde::{Deserialize, Serialize};

/// Behavior switches used by the component-removal studies.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    /// Zero both hidden states before every step (memoryless models).
    pub disable_hidden_state: bool,
    /// Suppress all mid-stream resets: no analyzer gating of the detector,
    /// no recognizer reset at activation.
    pub disable_gating: bool,
    /// Remove the detector: the recognizer runs every frame and events are
    /// segmented by argmax runs over a confidence floor.
    pub disable_detector: bool,
}

impl AblationFlags {
    pub fn any(&self) -> bool {
        self.disable_hidden_state || self.disable_gating || self.disable_detector
    }

    /// Parse a comma-separated flag list: `no-hidden-state`, `no-gating`,
    /// `no-detector`.
    pub fn parse(spec: &str) -> Result<Self> {
        let mut flags = AblationFlags::default();
        for token in spec.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            match token {
                "no-hidden-state" => flags.disable_hidden_state = true,
                "no-gating" => flags.disable_gating = true,
                "no-detector" => flags.disable_detector = true,
                other => {
                    return Err(Error::Config(format!(
                        "unknown ablation flag {other:?} (expected no-hidden-state, no-gating, no-detector)"
                    )))
                }
            }
        }
        Ok(flags)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Detector confidence above which the recognizer wakes.
    pub activation_threshold: f64,
    /// Detector confidence below which an active span may close.
    pub deactivation_threshold: f64,
    /// Floor on frames since activation before deactivation is allowed.
    pub min_wait_frames: u32,
    /// Zero the recognizer's hidden state when a span opens.
    pub reset_on_activation: bool,
    /// Per-frame confidence floor for event segmentation in no-detector mode.
    pub no_detector_floor: f64,
    pub analyzer: AnalyzerConfig,
    pub ablation: AblationFlags,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            activation_threshold: 0.45,
            deactivation_threshold: 0.2,
            min_wait_frames: 10,
            reset_on_activation: true,
            no_detector_floor: 0.1,
            analyzer: AnalyzerConfig::default(),
            ablation: AblationFlags::default(),
        }
    }
}

impl PipelineConfig {
    /// The stricter preset: fewer false positives at some detection cost.
    pub fn strict() -> Self {
        PipelineConfig {
            activation_threshold: 0.8,
            deactivation_threshold: 0.5,
            ..PipelineConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("activation_threshold", self.activation_threshold),
            ("deactivation_threshold", self.deactivation_threshold),
        ] {
            if !(0.0 < v && v < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        if self.deactivation_threshold >= self.activation_threshold {
            return Err(Error::Config(format!(
                "hysteresis requires deactivation ({}) < activation ({})",
                self.deactivation_threshold, self.activation_threshold
            )));
        }
        if !(0.0..1.0).contains(&self.no_detector_floor) {
            return Err(Error::Config("no_detector_floor must lie in [0, 1)".into()));
        }
        self.analyzer.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Idle,
    Active,
}

/// An emitted prediction with its temporal extent (frames inclusive).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GestureEvent {
    pub class: usize,
    pub confidence: f64,
    pub start_frame: u64,
    pub end_frame: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Provisional {
    pub class: usize,
    pub confidence: f64,
}

/// Per-frame record of what the pipeline saw and decided.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameTrace {
    pub frame: u64,
    /// Detector confidence; absent when the detector is ablated away.
    pub detector_confidence: Option<f64>,
    /// Whether an analyzer reset was applied on this frame.
    pub reset: bool,
    pub phase: Phase,
    /// Recognizer output, present only on frames where it ran.
    pub probabilities: Option<Vec<f64>>,
    pub provisional: Option<Provisional>,
}

/// Step-invocation counters backing the sparsity-of-compute checks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StepCounters {
    pub detector_steps: u64,
    pub recognizer_steps: u64,
    pub analyzer_resets: u64,
}

struct ProbAccumulator {
    sum: Vec<f64>,
    count: u64,
}

impl ProbAccumulator {
    fn new(classes: usize) -> Self {
        ProbAccumulator {
            sum: vec![0.0; classes],
            count: 0,
        }
    }

    fn clear(&mut self) {
        for v in self.sum.iter_mut() {
            *v = 0.0;
        }
        self.count = 0;
    }

    fn add(&mut self, probs: &[f64]) {
        for (s, p) in self.sum.iter_mut().zip(probs.iter()) {
            *s += p;
        }
        self.count += 1;
    }

    /// Argmax and max of the running mean.
    fn best(&self) -> Option<Provisional> {
        if self.count == 0 {
            return None;
        }
        let mut class = 0;
        let mut best = f64::NEG_INFINITY;
        for (i, s) in self.sum.iter().enumerate() {
            if *s > best {
                best = *s;
                class = i;
            }
        }
        Some(Provisional {
            class,
            confidence: best / self.count as f64,
        })
    }
}

/// One stream session: owns both hidden states, the analyzer history, and
/// the phase machine. Models are borrowed and never mutated.
pub struct StreamSession<'m> {
    detector: &'m DetectorModel,
    recognizer: &'m RecognizerModel,
    config: PipelineConfig,
    analyzer: AnalyzerState,
    detector_hidden: ExternalHiddenState,
    recognizer_hidden: ExternalHiddenState,
    phase: Phase,
    activation_frame: u64,
    accumulator: ProbAccumulator,
    /// Open argmax run in no-detector mode: (class, start frame).
    run_state: Option<(usize, u64)>,
    next_frame: u64,
    finalized: bool,
    pub counters: StepCounters,
}

impl<'m> StreamSession<'m> {
    pub fn new(
        detector: &'m DetectorModel,
        recognizer: &'m RecognizerModel,
        config: PipelineConfig,
    ) -> Result<Self> {
        config.validate()?;
        if detector.input_dim() != recognizer.input_dim() {
            return Err(Error::Shape {
                context: "detector vs recognizer input",
                expected: detector.input_dim(),
                got: recognizer.input_dim(),
            });
        }
        Ok(StreamSession {
            analyzer: AnalyzerState::new(&config.analyzer),
            detector_hidden: detector.fresh_hidden(),
            recognizer_hidden: recognizer.fresh_hidden(),
            phase: Phase::Idle,
            activation_frame: 0,
            accumulator: ProbAccumulator::new(recognizer.num_classes()),
            run_state: None,
            next_frame: 0,
            finalized: false,
            counters: StepCounters::default(),
            detector,
            recognizer,
            config,
        })
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn frames_processed(&self) -> u64 {
        self.next_frame
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    /// Running-mean class estimate for the current active span.
    pub fn provisional_prediction(&self) -> Option<Provisional> {
        match self.phase {
            Phase::Idle => None,
            Phase::Active => self.accumulator.best(),
        }
    }

    fn make_event(&self, end_frame: u64) -> Result<GestureEvent> {
        let best = self.accumulator.best().ok_or_else(|| {
            Error::Protocol("active span closed without any recognizer output".into())
        })?;
        Ok(GestureEvent {
            class: best.class,
            confidence: best.confidence,
            start_frame: self.activation_frame,
            end_frame,
        })
    }

    fn check_finite(&self, value: f64, what: &str, frame: u64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite {what} at frame {frame}; aborting session"
            )));
        }
        Ok(())
    }

    /// Feed one frame. Returns the event closed on this frame, if any, plus
    /// the per-frame trace.
    pub fn process_frame(&mut self, frame: &[f64]) -> Result<(Option<GestureEvent>, FrameTrace)> {
        if self.finalized {
            return Err(Error::Protocol("session already finalized".into()));
        }
        let expected = self.detector.input_dim();
        if frame.len() != expected {
            return Err(Error::Shape {
                context: "stream frame",
                expected,
                got: frame.len(),
            });
        }
        let frame_index = self.next_frame;
        self.next_frame += 1;
        let flags = self.config.ablation;

        if flags.disable_detector {
            return self.process_frame_without_detector(frame, frame_index);
        }

        // stage 1: analyzer gates the detector's hidden state
        let mut reset_applied = false;
        if !flags.disable_gating {
            if self.analyzer.should_reset(frame, &self.config.analyzer)? {
                self.detector_hidden.reset();
                reset_applied = true;
                self.counters.analyzer_resets += 1;
            }
            self.analyzer.push_frame(frame, &self.config.analyzer)?;
        }

        // stage 2: the detector is always listening
        if flags.disable_hidden_state {
            self.detector_hidden.reset();
        }
        let (confidence, new_hidden) = self.detector.step(&self.detector_hidden, frame)?;
        self.detector_hidden = new_hidden;
        self.counters.detector_steps += 1;
        self.check_finite(confidence, "detector confidence", frame_index)?;

        // stage 3: hysteresis phase transitions
        let mut event = None;
        match self.phase {
            Phase::Idle => {
                if confidence > self.config.activation_threshold {
                    self.phase = Phase::Active;
                    self.activation_frame = frame_index;
                    if self.config.reset_on_activation && !flags.disable_gating {
                        self.recognizer_hidden.reset();
                    }
                    self.accumulator.clear();
                }
            }
            Phase::Active => {
                let waited = frame_index - self.activation_frame;
                if confidence < self.config.deactivation_threshold
                    && waited >= self.config.min_wait_frames as u64
                {
                    // the closing frame is included in the emitted span
                    event = Some(self.make_event(frame_index)?);
                    self.phase = Phase::Idle;
                }
            }
        }

        // stage 4: the recognizer runs only while active
        let mut probabilities = None;
        if self.phase == Phase::Active {
            if flags.disable_hidden_state {
                self.recognizer_hidden.reset();
            }
            let (probs, new_hidden) = self.recognizer.step(&self.recognizer_hidden, frame)?;
            self.recognizer_hidden = new_hidden;
            self.counters.recognizer_steps += 1;
            for p in &probs {
                self.check_finite(*p, "recognizer probability", frame_index)?;
            }
            self.accumulator.add(&probs);
            probabilities = Some(probs);
        }

        let trace = FrameTrace {
            frame: frame_index,
            detector_confidence: Some(confidence),
            reset: reset_applied,
            phase: self.phase,
            probabilities,
            provisional: self.provisional_prediction(),
        };
        Ok((event, trace))
    }

    /// No-detector ablation: the recognizer runs every frame; maximal-length
    /// runs of one argmax class above the confidence floor become events.
    fn process_frame_without_detector(
        &mut self,
        frame: &[f64],
        frame_index: u64,
    ) -> Result<(Option<GestureEvent>, FrameTrace)> {
        let flags = self.config.ablation;
        if flags.disable_hidden_state {
            self.recognizer_hidden.reset();
        }
        let (probs, new_hidden) = self.recognizer.step(&self.recognizer_hidden, frame)?;
        self.recognizer_hidden = new_hidden;
        self.counters.recognizer_steps += 1;
        let (argmax, top) = probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, p)| (i, *p))
            .unwrap();
        self.check_finite(top, "recognizer probability", frame_index)?;
        let claimed = top >= self.config.no_detector_floor;

        let mut event = None;
        match self.run_state {
            Some((class, _)) if claimed && class == argmax => {
                self.accumulator.add(&probs);
            }
            Some((_, _)) => {
                // close the previous run before the current frame
                event = Some(self.make_event(frame_index.saturating_sub(1))?);
                self.run_state = None;
                self.phase = Phase::Idle;
                if claimed {
                    self.run_state = Some((argmax, frame_index));
                    self.activation_frame = frame_index;
                    self.accumulator.clear();
                    self.accumulator.add(&probs);
                    self.phase = Phase::Active;
                }
            }
            None if claimed => {
                self.run_state = Some((argmax, frame_index));
                self.activation_frame = frame_index;
                self.accumulator.clear();
                self.accumulator.add(&probs);
                self.phase = Phase::Active;
            }
            None => {}
        }

        let trace = FrameTrace {
            frame: frame_index,
            detector_confidence: None,
            reset: false,
            phase: self.phase,
            probabilities: Some(probs),
            provisional: self.provisional_prediction(),
        };
        Ok((event, trace))
    }

    /// Close the stream. Emits the pending event when the session ends while
    /// Active. The session is unusable afterwards.
    pub fn finalize(&mut self) -> Result<Option<GestureEvent>> {
        if self.finalized {
            return Err(Error::Protocol("session already finalized".into()));
        }
        self.finalized = true;
        if self.next_frame == 0 {
            return Ok(None);
        }
        let last = self.next_frame - 1;
        match self.phase {
            Phase::Active => {
                self.phase = Phase::Idle;
                self.run_state = None;
                Ok(Some(self.make_event(last)?))
            }
            Phase::Idle => Ok(None),
        }
    }
}
