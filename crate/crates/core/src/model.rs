//! Recurrent cells with externally owned hidden state, and the two models
//! built from them: a single-layer binary Detector and a three-layer
//! multi-class Recognizer.
//!
//! Models never own their recurrent state. Each stream session holds one
//! [`ExternalHiddenState`] per model and replaces it explicitly after every
//! step, which is what makes mid-stream gating (zeroing) possible.

use crate::error::{Error, Result};
use crate::nn::{sigmoid, softmax, DenseLayer, Mat, TensorSet};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

/// Recurrent state owned by the caller, one vector per recurrent layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalHiddenState {
    layers: Vec<Vec<f64>>,
}

impl ExternalHiddenState {
    pub fn zeros(widths: &[usize]) -> Self {
        ExternalHiddenState {
            layers: widths.iter().map(|&w| vec![0.0; w]).collect(),
        }
    }

    /// Zero every entry. Idempotent.
    pub fn reset(&mut self) {
        for layer in self.layers.iter_mut() {
            for v in layer.iter_mut() {
                *v = 0.0;
            }
        }
    }

    pub fn layers(&self) -> &[Vec<f64>] {
        &self.layers
    }

    pub fn layer(&self, i: usize) -> &[f64] {
        &self.layers[i]
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn is_zero(&self) -> bool {
        self.layers.iter().all(|l| l.iter().all(|&v| v == 0.0))
    }

    pub fn from_layers(layers: Vec<Vec<f64>>) -> Self {
        ExternalHiddenState { layers }
    }
}

/// One recurrent layer: `h' = tanh(w_in·x + w_rec·h + bias)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RnnLiteCell {
    pub w_in: Mat,
    pub w_rec: Mat,
    pub bias: Vec<f64>,
}

impl RnnLiteCell {
    pub fn zeros(hidden: usize, input: usize) -> Self {
        RnnLiteCell {
            w_in: Mat::zeros(hidden, input),
            w_rec: Mat::zeros(hidden, hidden),
            bias: vec![0.0; hidden],
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_in.rows
    }

    pub fn input_dim(&self) -> usize {
        self.w_in.cols
    }

    /// One state update. `h_prev` is read-only; the caller owns replacement.
    pub fn step(&self, x: &[f64], h_prev: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.w_in.cols {
            return Err(Error::Shape {
                context: "cell_step input",
                expected: self.w_in.cols,
                got: x.len(),
            });
        }
        if h_prev.len() != self.w_rec.cols {
            return Err(Error::Shape {
                context: "cell_step hidden",
                expected: self.w_rec.cols,
                got: h_prev.len(),
            });
        }
        let mut pre = self.bias.clone();
        self.w_in.matvec_add(x, &mut pre);
        self.w_rec.matvec_add(h_prev, &mut pre);
        for v in pre.iter_mut() {
            *v = v.tanh();
        }
        Ok(pre)
    }
}

/// A stack of recurrent cells with a linear readout on top.
///
/// The Detector is a 1-cell stack with a scalar sigmoid readout; the
/// Recognizer is a 3-cell stack with a softmax readout and inter-layer
/// dropout. Tensor order (for optimizer state): per cell `w_in, w_rec, bias`,
/// then readout weights and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedRnn {
    pub cells: Vec<RnnLiteCell>,
    pub readout: DenseLayer,
    pub dropout: f64,
}

impl StackedRnn {
    pub fn zeros(input_dim: usize, hidden: &[usize], out_dim: usize, dropout: f64) -> Self {
        let mut cells = Vec::with_capacity(hidden.len());
        let mut in_dim = input_dim;
        for &h in hidden {
            cells.push(RnnLiteCell::zeros(h, in_dim));
            in_dim = h;
        }
        StackedRnn {
            cells,
            readout: DenseLayer::zeros(out_dim, in_dim),
            dropout,
        }
    }

    /// Same shapes, all parameters zero. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let hidden: Vec<usize> = self.cells.iter().map(|c| c.hidden_dim()).collect();
        StackedRnn::zeros(self.input_dim(), &hidden, self.readout.out_dim(), 0.0)
    }

    pub fn input_dim(&self) -> usize {
        self.cells[0].input_dim()
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.cells.iter().map(|c| c.hidden_dim()).collect()
    }

    pub fn fresh_hidden(&self) -> ExternalHiddenState {
        ExternalHiddenState::zeros(&self.hidden_widths())
    }

    fn check_hidden(&self, hidden: &ExternalHiddenState) -> Result<()> {
        if hidden.num_layers() != self.cells.len() {
            return Err(Error::Shape {
                context: "hidden layer count",
                expected: self.cells.len(),
                got: hidden.num_layers(),
            });
        }
        for (i, cell) in self.cells.iter().enumerate() {
            if hidden.layer(i).len() != cell.hidden_dim() {
                return Err(Error::Shape {
                    context: "hidden layer width",
                    expected: cell.hidden_dim(),
                    got: hidden.layer(i).len(),
                });
            }
        }
        Ok(())
    }

    /// Run all cells for one frame and return the readout logits plus the
    /// replacement hidden state. Inverted dropout is applied between layers
    /// (and before the readout) only when `dropout_rng` is provided.
    pub fn forward_frame(
        &self,
        hidden: &ExternalHiddenState,
        x: &[f64],
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Vec<f64>, ExternalHiddenState)> {
        self.check_hidden(hidden)?;
        let mut new_layers = Vec::with_capacity(self.cells.len());
        let mut layer_input: Vec<f64> = Vec::new();
        for (i, cell) in self.cells.iter().enumerate() {
            let input: &[f64] = if i == 0 { x } else { &layer_input };
            let h = cell.step(input, hidden.layer(i))?;
            let mut passed = h.clone();
            if let Some(rng) = dropout_rng.as_deref_mut() {
                apply_inverted_dropout(&mut passed, self.dropout, rng);
            }
            new_layers.push(h);
            layer_input = passed;
        }
        let logits = self.readout.forward(&layer_input)?;
        Ok((logits, ExternalHiddenState::from_layers(new_layers)))
    }
}

/// In-place inverted dropout: zero with probability `rate`, otherwise scale
/// by 1/(1-rate) so the expected activation is unchanged.
pub fn apply_inverted_dropout(v: &mut [f64], rate: f64, rng: &mut ChaCha8Rng) {
    if rate <= 0.0 {
        return;
    }
    let keep = 1.0 - rate;
    for x in v.iter_mut() {
        if rng.gen::<f64>() < rate {
            *x = 0.0;
        } else {
            *x /= keep;
        }
    }
}

impl TensorSet for StackedRnn {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(self.cells.len() * 3 + 2);
        for c in &self.cells {
            out.push(c.w_in.data.as_slice());
            out.push(c.w_rec.data.as_slice());
            out.push(c.bias.as_slice());
        }
        out.push(self.readout.weights.data.as_slice());
        out.push(self.readout.bias.as_slice());
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(self.cells.len() * 3 + 2);
        for c in self.cells.iter_mut() {
            out.push(c.w_in.data.as_mut_slice());
            out.push(c.w_rec.data.as_mut_slice());
            out.push(c.bias.as_mut_slice());
        }
        out.push(self.readout.weights.data.as_mut_slice());
        out.push(self.readout.bias.as_mut_slice());
        out
    }
}

/// Gradients mirror the parameter layout exactly, so they reuse the same type.
pub type GradientSet = StackedRnn;

/// Shape source for both models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Flattened joint coordinates per frame (joints × 3).
    pub input_dim: usize,
    pub detector_hidden: usize,
    pub recognizer_hidden: Vec<usize>,
    pub num_classes: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: 26 * 3,
            detector_hidden: 256,
            recognizer_hidden: vec![256, 256, 256],
            num_classes: 17,
            dropout: 0.2,
            seed: 7,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be positive".into()));
        }
        if self.input_dim % 3 != 0 {
            return Err(Error::Config(format!(
                "input_dim {} is not a multiple of 3 (joints × 3)",
                self.input_dim
            )));
        }
        if self.detector_hidden == 0 || self.recognizer_hidden.iter().any(|&h| h == 0) {
            return Err(Error::Config("hidden widths must be ≥ 1".into()));
        }
        if self.recognizer_hidden.len() != 3 {
            return Err(Error::Config(format!(
                "recognizer takes exactly 3 recurrent layers, got {}",
                self.recognizer_hidden.len()
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be ≥ 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Trainable parameter totals for one configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub detector: usize,
    pub recognizer: usize,
    /// Parameters active while only monitoring (the analyzer has none).
    pub idle: usize,
    /// Parameters active while recognizing (detector + recognizer).
    pub busy: usize,
}

/// Closed-form parameter counts per model.
pub fn count_parameters(config: &ModelConfig) -> ParamCounts {
    let h1 = config.detector_hidden;
    let detector = h1 * (config.input_dim + h1 + 1) + (h1 + 1);
    let mut recognizer = 0;
    let mut in_dim = config.input_dim;
    for &h in &config.recognizer_hidden {
        recognizer += h * (in_dim + h + 1);
        in_dim = h;
    }
    recognizer += config.num_classes * (in_dim + 1);
    ParamCounts {
        detector,
        recognizer,
        idle: detector,
        busy: detector + recognizer,
    }
}

fn init_stack(
    input_dim: usize,
    hidden: &[usize],
    out_dim: usize,
    dropout: f64,
    rng: &mut ChaCha8Rng,
) -> StackedRnn {
    let mut model = StackedRnn::zeros(input_dim, hidden, out_dim, dropout);
    // uniform(-1/√fan_in, +1/√fan_in) per tensor, drawn in the fixed tensor order
    for cell in model.cells.iter_mut() {
        let bound_in = 1.0 / (cell.input_dim() as f64).sqrt();
        for w in cell.w_in.data.iter_mut() {
            *w = rng.gen_range(-bound_in..bound_in);
        }
        let bound_rec = 1.0 / (cell.hidden_dim() as f64).sqrt();
        for w in cell.w_rec.data.iter_mut() {
            *w = rng.gen_range(-bound_rec..bound_rec);
        }
        for b in cell.bias.iter_mut() {
            *b = rng.gen_range(-bound_in..bound_in);
        }
    }
    let bound = 1.0 / (model.readout.in_dim() as f64).sqrt();
    for w in model.readout.weights.data.iter_mut() {
        *w = rng.gen_range(-bound..bound);
    }
    for b in model.readout.bias.iter_mut() {
        *b = rng.gen_range(-bound..bound);
    }
    model
}

/// Single recurrent layer plus a scalar sigmoid readout: per-frame
/// valid-gesture confidence in (0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModel {
    pub stack: StackedRnn,
}

impl DetectorModel {
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        // distinct stream from the recognizer so the two inits are independent
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xD373C703);
        Ok(DetectorModel {
            stack: init_stack(config.input_dim, &[config.detector_hidden], 1, 0.0, &mut rng),
        })
    }

    pub fn from_stack(stack: StackedRnn) -> Result<Self> {
        if stack.cells.len() != 1 {
            return Err(Error::Config(format!(
                "detector takes exactly 1 recurrent layer, got {}",
                stack.cells.len()
            )));
        }
        if stack.readout.out_dim() != 1 {
            return Err(Error::Config("detector readout must be scalar".into()));
        }
        Ok(DetectorModel { stack })
    }

    pub fn input_dim(&self) -> usize {
        self.stack.input_dim()
    }

    pub fn fresh_hidden(&self) -> ExternalHiddenState {
        self.stack.fresh_hidden()
    }

    /// Confidence for one frame plus the replacement hidden state.
    pub fn step(
        &self,
        hidden: &ExternalHiddenState,
        x: &[f64],
    ) -> Result<(f64, ExternalHiddenState)> {
        let (logits, new_hidden) = self.stack.forward_frame(hidden, x, None)?;
        Ok((sigmoid(logits[0]), new_hidden))
    }
}

/// Three recurrent layers with inter-layer dropout and a softmax readout.
#[derive(Debug, Clone, PartialEq)]
pub struct RecognizerModel {
    pub stack: StackedRnn,
}

impl RecognizerModel {
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x4EC09217);
        Ok(RecognizerModel {
            stack: init_stack(
                config.input_dim,
                &config.recognizer_hidden,
                config.num_classes,
                config.dropout,
                &mut rng,
            ),
        })
    }

    pub fn from_stack(stack: StackedRnn) -> Result<Self> {
        if stack.cells.len() != 3 {
            return Err(Error::Config(format!(
                "recognizer takes exactly 3 recurrent layers, got {}",
                stack.cells.len()
            )));
        }
        if stack.readout.out_dim() < 2 {
            return Err(Error::Config("recognizer needs ≥ 2 classes".into()));
        }
        Ok(RecognizerModel { stack })
    }

    pub fn input_dim(&self) -> usize {
        self.stack.input_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.stack.readout.out_dim()
    }

    pub fn fresh_hidden(&self) -> ExternalHiddenState {
        self.stack.fresh_hidden()
    }

    /// Inference step: deterministic, no dropout.
    pub fn step(
        &self,
        hidden: &ExternalHiddenState,
        x: &[f64],
    ) -> Result<(Vec<f64>, ExternalHiddenState)> {
        let (logits, new_hidden) = self.stack.forward_frame(hidden, x, None)?;
        Ok((softmax(&logits)?, new_hidden))
    }

    /// Training-mode step with dropout masks drawn from `rng`.
    pub fn step_training(
        &self,
        hidden: &ExternalHiddenState,
        x: &[f64],
        rng: &mut ChaCha8Rng,
    ) -> Result<(Vec<f64>, ExternalHiddenState)> {
        let (logits, new_hidden) = self.stack.forward_frame(hidden, x, Some(rng))?;
        Ok((softmax(&logits)?, new_hidden))
    }
}

// ---------------------------------------------------------------------------
// Model file format (see docs/model-format.md)
// ---------------------------------------------------------------------------

const MAGIC: [u8; 4] = *b"SGRM";
const FORMAT_VERSION: u16 = 1;

/// Tag stored in the file header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Detector,
    Recognizer,
}

impl ModelKind {
    fn to_byte(self) -> u8 {
        match self {
            ModelKind::Detector => 0,
            ModelKind::Recognizer => 1,
        }
    }
}

/// Either model, as read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub enum LoadedModel {
    Detector(DetectorModel),
    Recognizer(RecognizerModel),
}

impl LoadedModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            LoadedModel::Detector(_) => ModelKind::Detector,
            LoadedModel::Recognizer(_) => ModelKind::Recognizer,
        }
    }

    pub fn into_detector(self) -> Result<DetectorModel> {
        match self {
            LoadedModel::Detector(m) => Ok(m),
            LoadedModel::Recognizer(_) => Err(Error::Config(
                "model file holds a recognizer, expected a detector".into(),
            )),
        }
    }

    pub fn into_recognizer(self) -> Result<RecognizerModel> {
        match self {
            LoadedModel::Recognizer(m) => Ok(m),
            LoadedModel::Detector(_) => Err(Error::Config(
                "model file holds a detector, expected a recognizer".into(),
            )),
        }
    }
}

struct CountingWriter<W: Write> {
    inner: W,
}

impl<W: Write> CountingWriter<W> {
    fn u16(&mut self, v: u16) -> Result<()> {
        self.inner.write_all(&v.to_le_bytes())?;
        Ok(())
    }
    fn u32(&mut self, v: u32) -> Result<()> {
        self.inner.write_all(&v.to_le_bytes())?;
        Ok(())
    }
    fn f64(&mut self, v: f64) -> Result<()> {
        self.inner.write_all(&v.to_le_bytes())?;
        Ok(())
    }
    fn f64_slice(&mut self, v: &[f64]) -> Result<()> {
        for x in v {
            self.f64(*x)?;
        }
        Ok(())
    }
}

/// Serialize a model. Little-endian, header + config block + parameters in
/// tensor order; byte layout documented in docs/model-format.md.
pub fn write_model<W: Write>(kind: ModelKind, stack: &StackedRnn, writer: W) -> Result<()> {
    let mut w = CountingWriter { inner: writer };
    w.inner.write_all(&MAGIC)?;
    w.u16(FORMAT_VERSION)?;
    w.inner.write_all(&[kind.to_byte(), 0])?;
    w.u32(stack.input_dim() as u32)?;
    w.u32(stack.cells.len() as u32)?;
    for c in &stack.cells {
        w.u32(c.hidden_dim() as u32)?;
    }
    w.u32(stack.readout.out_dim() as u32)?;
    w.f64(stack.dropout)?;
    for c in &stack.cells {
        w.f64_slice(&c.w_in.data)?;
        w.f64_slice(&c.w_rec.data)?;
        w.f64_slice(&c.bias)?;
    }
    w.f64_slice(&stack.readout.weights.data)?;
    w.f64_slice(&stack.readout.bias)?;
    Ok(())
}

pub fn save_model(kind: ModelKind, stack: &StackedRnn, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut buf = std::io::BufWriter::new(file);
    write_model(kind, stack, &mut buf)?;
    use std::io::Write as _;
    buf.flush()?;
    Ok(())
}

pub fn save_detector(model: &DetectorModel, path: &Path) -> Result<()> {
    save_model(ModelKind::Detector, &model.stack, path)
}

pub fn save_recognizer(model: &RecognizerModel, path: &Path) -> Result<()> {
    save_model(ModelKind::Recognizer, &model.stack, path)
}

struct OffsetReader<R: Read> {
    inner: R,
    offset: usize,
    path: String,
}

impl<R: Read> OffsetReader<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        let mut read = 0;
        while read < n {
            let got = self.inner.read(&mut buf[read..])?;
            if got == 0 {
                return Err(Error::Parse {
                    path: self.path.clone(),
                    location: format!("byte {}", self.offset + read),
                    message: format!("truncated: needed {} more bytes", n - read),
                });
            }
            read += got;
        }
        self.offset += n;
        Ok(buf)
    }
    fn u16(&mut self) -> Result<u16> {
        let b = self.bytes(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }
    fn u32(&mut self) -> Result<u32> {
        let b = self.bytes(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
    fn f64(&mut self) -> Result<f64> {
        let b = self.bytes(8)?;
        Ok(f64::from_le_bytes(b.try_into().unwrap()))
    }
    fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(self.f64()?);
        }
        Ok(out)
    }
}

/// Deserialize a model. Fails closed: any truncation, trailing data, bad
/// magic, or unsupported version leaves no partial model behind.
pub fn read_model<R: Read>(reader: R, path_label: &str) -> Result<LoadedModel> {
    let mut r = OffsetReader {
        inner: reader,
        offset: 0,
        path: path_label.to_string(),
    };
    let magic = r.bytes(4)?;
    if magic != MAGIC {
        return Err(Error::Version(format!(
            "{path_label}: bad magic {magic:02x?}, not a model file"
        )));
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(Error::Version(format!(
            "{path_label}: unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let kind_and_reserved = r.bytes(2)?;
    let input_dim = r.u32()? as usize;
    let num_layers = r.u32()? as usize;
    if num_layers == 0 || num_layers > 64 {
        return Err(Error::Parse {
            path: r.path.clone(),
            location: format!("byte {}", r.offset),
            message: format!("implausible layer count {num_layers}"),
        });
    }
    let mut hidden = Vec::with_capacity(num_layers);
    for _ in 0..num_layers {
        hidden.push(r.u32()? as usize);
    }
    let out_dim = r.u32()? as usize;
    let dropout = r.f64()?;
    let mut cells = Vec::with_capacity(num_layers);
    let mut in_dim = input_dim;
    for &h in &hidden {
        let w_in = Mat {
            rows: h,
            cols: in_dim,
            data: r.f64_vec(h * in_dim)?,
        };
        let w_rec = Mat {
            rows: h,
            cols: h,
            data: r.f64_vec(h * h)?,
        };
        let bias = r.f64_vec(h)?;
        cells.push(RnnLiteCell { w_in, w_rec, bias });
        in_dim = h;
    }
    let readout = DenseLayer {
        weights: Mat {
            rows: out_dim,
            cols: in_dim,
            data: r.f64_vec(out_dim * in_dim)?,
        },
        bias: r.f64_vec(out_dim)?,
    };
    // exactly at EOF now
    let mut probe = [0u8; 1];
    if r.inner.read(&mut probe)? != 0 {
        return Err(Error::Parse {
            path: r.path.clone(),
            location: format!("byte {}", r.offset),
            message: "trailing bytes after model data".into(),
        });
    }
    let stack = StackedRnn {
        cells,
        readout,
        dropout,
    };
    match kind_and_reserved[0] {
        0 => Ok(LoadedModel::Detector(DetectorModel::from_stack(stack)?)),
        1 => Ok(LoadedModel::Recognizer(RecognizerModel::from_stack(stack)?)),
        other => Err(Error::Parse {
            path: r.path,
            location: "byte 6".into(),
            message: format!("unknown model kind {other}"),
        }),
    }
}

pub fn load_model(path: &Path) -> Result<LoadedModel> {
    let file = std::fs::File::open(path)?;
    read_model(std::io::BufReader::new(file), &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_config() -> ModelConfig {
        ModelConfig {
            input_dim: 6,
            detector_hidden: 4,
            recognizer_hidden: vec![4, 4, 4],
            num_classes: 3,
            dropout: 0.2,
            seed: 11,
        }
    }

    #[test]
    fn cell_step_zero_weights_gives_zero() {
        let cell = RnnLiteCell::zeros(3, 2);
        let h = cell.step(&[5.0, -2.0], &[0.9, -0.9, 0.1]).unwrap();
        assert_eq!(h, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn cell_step_zero_recurrence_ignores_state() {
        let mut cell = RnnLiteCell::zeros(2, 2);
        cell.w_in = Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        cell.bias = vec![0.1, -0.2];
        let a = cell.step(&[0.5, 0.25], &[0.0, 0.0]).unwrap();
        let b = cell.step(&[0.5, 0.25], &[0.7, -0.7]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cell_step_matches_hand_computation() {
        // h = tanh(W x + U h + b) evaluated by hand per coordinate
        let cell = RnnLiteCell {
            w_in: Mat::from_rows(&[vec![0.5, -1.0], vec![2.0, 0.0]]),
            w_rec: Mat::from_rows(&[vec![0.3, 0.1], vec![-0.2, 0.4]]),
            bias: vec![0.05, -0.1],
        };
        let x = [1.0, 0.0];
        let h_prev = [0.5, -0.5];
        let got = cell.step(&x, &h_prev).unwrap();
        let pre0: f64 = 0.5 * 1.0 + (-1.0) * 0.0 + 0.3 * 0.5 + 0.1 * (-0.5) + 0.05;
        let pre1: f64 = 2.0 * 1.0 + 0.0 * 0.0 + (-0.2) * 0.5 + 0.4 * (-0.5) + (-0.1);
        assert!((got[0] - pre0.tanh()).abs() < 1e-15);
        assert!((got[1] - pre1.tanh()).abs() < 1e-15);
        // bounded in (-1, 1)
        assert!(got.iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn cell_step_shape_errors() {
        let cell = RnnLiteCell::zeros(2, 3);
        assert!(cell.step(&[1.0], &[0.0, 0.0]).is_err());
        assert!(cell.step(&[1.0, 2.0, 3.0], &[0.0]).is_err());
    }

    #[test]
    fn recognizer_zero_model_uniform_probs() {
        let model = RecognizerModel::from_stack(StackedRnn::zeros(6, &[4, 4, 4], 3, 0.0)).unwrap();
        let hidden = model.fresh_hidden();
        let (probs, _) = model.step(&hidden, &[1.0; 6]).unwrap();
        for p in probs {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn recognizer_inference_is_deterministic() {
        let model = RecognizerModel::init(&toy_config()).unwrap();
        let hidden = model.fresh_hidden();
        let x = [0.3, -0.1, 0.8, 0.0, 0.5, -0.5];
        let (p1, h1) = model.step(&hidden, &x).unwrap();
        let (p2, h2) = model.step(&hidden, &x).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(h1, h2);
        // the input hidden is untouched
        assert!(hidden.is_zero());
    }

    #[test]
    fn recognizer_matches_straight_line_reimplementation() {
        // independent re-derivation of the 3-layer recurrence over 5 frames
        let cfg = toy_config();
        let model = RecognizerModel::init(&cfg).unwrap();
        let frames: Vec<Vec<f64>> = (0..5)
            .map(|t| (0..6).map(|j| ((t * 7 + j * 3) as f64 * 0.37).sin()).collect())
            .collect();

        let mut hidden = model.fresh_hidden();
        let mut got = Vec::new();
        for f in &frames {
            let (p, h) = model.step(&hidden, f).unwrap();
            hidden = h;
            got.push(p);
        }

        // brute-force: explicit loops over weights, no shared helper code
        let s = &model.stack;
        let mut hs: Vec<Vec<f64>> = s.cells.iter().map(|c| vec![0.0; c.hidden_dim()]).collect();
        for (t, f) in frames.iter().enumerate() {
            let mut input = f.clone();
            for (l, cell) in s.cells.iter().enumerate() {
                let mut new_h = vec![0.0; cell.hidden_dim()];
                for i in 0..cell.hidden_dim() {
                    let mut acc = cell.bias[i];
                    for (j, xv) in input.iter().enumerate() {
                        acc += cell.w_in.get(i, j) * xv;
                    }
                    for (j, hv) in hs[l].iter().enumerate() {
                        acc += cell.w_rec.get(i, j) * hv;
                    }
                    new_h[i] = acc.tanh();
                }
                hs[l] = new_h.clone();
                input = new_h;
            }
            let mut logits = vec![0.0; s.readout.out_dim()];
            for i in 0..s.readout.out_dim() {
                let mut acc = s.readout.bias[i];
                for (j, hv) in input.iter().enumerate() {
                    acc += s.readout.weights.get(i, j) * hv;
                }
                logits[i] = acc;
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for (k, e) in exps.iter().enumerate() {
                assert!(
                    (got[t][k] - e / sum).abs() < 1e-12,
                    "frame {t} class {k} diverges"
                );
            }
        }
    }

    #[test]
    fn detector_zero_model_gives_half() {
        let model = DetectorModel::from_stack(StackedRnn::zeros(6, &[4], 1, 0.0)).unwrap();
        let hidden = model.fresh_hidden();
        let (conf, _) = model.step(&hidden, &[1.0; 6]).unwrap();
        assert_eq!(conf, 0.5);
    }

    #[test]
    fn detector_saturated_bias() {
        let mut stack = StackedRnn::zeros(6, &[4], 1, 0.0);
        stack.readout.bias[0] = 10.0;
        let model = DetectorModel::from_stack(stack).unwrap();
        let (conf, _) = model.step(&model.fresh_hidden(), &[0.0; 6]).unwrap();
        assert!(conf > 0.9999);
    }

    #[test]
    fn detector_matches_brute_force_recurrence() {
        let cfg = toy_config();
        let model = DetectorModel::init(&cfg).unwrap();
        let frames: Vec<Vec<f64>> = (0..3)
            .map(|t| (0..6).map(|j| ((t + j) as f64 * 0.61).cos()).collect())
            .collect();
        let mut hidden = model.fresh_hidden();
        let mut got = Vec::new();
        for f in &frames {
            let (c, h) = model.step(&hidden, f).unwrap();
            hidden = h;
            got.push(c);
        }
        let cell = &model.stack.cells[0];
        let mut h = vec![0.0; cell.hidden_dim()];
        for (t, f) in frames.iter().enumerate() {
            let mut new_h = vec![0.0; cell.hidden_dim()];
            for i in 0..cell.hidden_dim() {
                let mut acc = cell.bias[i];
                for (j, xv) in f.iter().enumerate() {
                    acc += cell.w_in.get(i, j) * xv;
                }
                for (j, hv) in h.iter().enumerate() {
                    acc += cell.w_rec.get(i, j) * hv;
                }
                new_h[i] = acc.tanh();
            }
            h = new_h;
            let mut logit = model.stack.readout.bias[0];
            for (j, hv) in h.iter().enumerate() {
                logit += model.stack.readout.weights.get(0, j) * hv;
            }
            assert!((got[t] - 1.0 / (1.0 + (-logit).exp())).abs() < 1e-12);
        }
    }

    #[test]
    fn reset_hidden_zeroes_and_is_idempotent() {
        let mut h = ExternalHiddenState::from_layers(vec![vec![0.5, -0.5], vec![0.1]]);
        h.reset();
        assert!(h.is_zero());
        let snapshot = h.clone();
        h.reset();
        assert_eq!(h, snapshot);
    }

    #[test]
    fn reset_equals_fresh_stream() {
        let model = RecognizerModel::init(&toy_config()).unwrap();
        let x = [0.2, 0.4, -0.6, 0.1, 0.0, -0.3];
        // run a few frames, reset, then one more frame
        let mut hidden = model.fresh_hidden();
        for _ in 0..4 {
            let (_, h) = model.step(&hidden, &x).unwrap();
            hidden = h;
        }
        hidden.reset();
        let (after_reset, _) = model.step(&hidden, &x).unwrap();
        let (fresh, _) = model.step(&model.fresh_hidden(), &x).unwrap();
        assert_eq!(after_reset, fresh);
    }

    #[test]
    fn count_parameters_hand_counts() {
        let cfg = ModelConfig {
            input_dim: 2,
            detector_hidden: 1,
            recognizer_hidden: vec![1, 1, 1],
            num_classes: 2,
            dropout: 0.0,
            seed: 0,
        };
        let counts = count_parameters(&cfg);
        assert_eq!(counts.detector, 6);
        assert_eq!(counts.recognizer, 14);
        assert_eq!(counts.idle, 6);
        assert_eq!(counts.busy, 20);
    }

    #[test]
    fn count_parameters_additive_identity() {
        for (i, dh, rh, c) in [
            (6, 4, [4, 4, 4], 3),
            (78, 256, [256, 256, 256], 17),
            (12, 8, [8, 8, 8], 4),
            (9, 1, [2, 3, 5], 2),
        ] {
            let cfg = ModelConfig {
                input_dim: i,
                detector_hidden: dh,
                recognizer_hidden: rh.to_vec(),
                num_classes: c,
                dropout: 0.0,
                seed: 0,
            };
            let counts = count_parameters(&cfg);
            assert_eq!(counts.busy - counts.idle, counts.recognizer);
        }
    }

    #[test]
    fn count_matches_actual_tensor_sizes() {
        let cfg = toy_config();
        let counts = count_parameters(&cfg);
        let det = DetectorModel::init(&cfg).unwrap();
        let rec = RecognizerModel::init(&cfg).unwrap();
        assert_eq!(det.stack.parameter_count(), counts.detector);
        assert_eq!(rec.stack.parameter_count(), counts.recognizer);
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let cfg = toy_config();
        let det = DetectorModel::init(&cfg).unwrap();
        let mut bytes = Vec::new();
        write_model(ModelKind::Detector, &det.stack, &mut bytes).unwrap();
        let loaded = read_model(bytes.as_slice(), "mem").unwrap().into_detector().unwrap();
        assert_eq!(loaded, det);
        let mut bytes2 = Vec::new();
        write_model(ModelKind::Detector, &loaded.stack, &mut bytes2).unwrap();
        assert_eq!(bytes, bytes2);
    }

    #[test]
    fn load_truncated_file_fails_closed() {
        let cfg = toy_config();
        let rec = RecognizerModel::init(&cfg).unwrap();
        let mut bytes = Vec::new();
        write_model(ModelKind::Recognizer, &rec.stack, &mut bytes).unwrap();
        bytes.truncate(bytes.len() - 5);
        match read_model(bytes.as_slice(), "mem") {
            Err(Error::Parse { message, .. }) => assert!(message.contains("truncated")),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn load_flipped_magic_is_version_error() {
        let cfg = toy_config();
        let det = DetectorModel::init(&cfg).unwrap();
        let mut bytes = Vec::new();
        write_model(ModelKind::Detector, &det.stack, &mut bytes).unwrap();
        bytes[0] ^= 0xFF;
        assert!(matches!(read_model(bytes.as_slice(), "mem"), Err(Error::Version(_))));
    }

    #[test]
    fn load_trailing_bytes_rejected() {
        let cfg = toy_config();
        let det = DetectorModel::init(&cfg).unwrap();
        let mut bytes = Vec::new();
        write_model(ModelKind::Detector, &det.stack, &mut bytes).unwrap();
        bytes.push(0);
        assert!(matches!(read_model(bytes.as_slice(), "mem"), Err(Error::Parse { .. })));
    }

    #[test]
    fn stepping_never_mutates_parameters() {
        let cfg = toy_config();
        let model = RecognizerModel::init(&cfg).unwrap();
        let snapshot = model.clone();
        let mut hidden = model.fresh_hidden();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for t in 0..10 {
            let x: Vec<f64> = (0..6).map(|j| ((t * j) as f64).sin()).collect();
            let (_, h) = model.step_training(&hidden, &x, &mut rng).unwrap();
            hidden = h;
        }
        assert_eq!(model, snapshot);
    }
}
