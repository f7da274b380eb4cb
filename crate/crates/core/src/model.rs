//! Trainable encoder, projection head, and linear-probe classifier.
//!
//! The encoder is an MLP: every hidden layer is `dense -> layer_norm -> relu`
//! and the projection head is `dense -> logistic`, so embeddings always lie
//! in the unit hypercube `[0, 1]^embed_dim`.
//!
//! Checkpoints are a single little-endian binary file:
//!
//! ```text
//! "SIMO" | version: u32 | dense layer count L: u32 | L+1 widths: u32
//! | f64 parameter arrays, row-major, in declaration order
//! ```
//!
//! Declaration order is `weight, bias, gamma, beta` for each hidden layer,
//! then `weight, bias` for the projection head.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diff::{DiffError, Tape, Tensor, Var};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SIMO";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const DEFAULT_EMBED_DIM: usize = 16;
pub const DEFAULT_PROBE_HIDDEN: usize = 128;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input width {found} does not match the architecture's {expected}")]
    WidthMismatch { expected: usize, found: usize },
    #[error("input row {0} contains a non-finite value")]
    NonFiniteInput(usize),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Layer widths of the encoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
}

impl Architecture {
    pub fn new(input_dim: usize, hidden: Vec<usize>, embed_dim: usize) -> Self {
        Self {
            input_dim,
            hidden,
            embed_dim,
        }
    }

    /// `input, hidden..., embed`.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden.len() + 2);
        w.push(self.input_dim);
        w.extend_from_slice(&self.hidden);
        w.push(self.embed_dim);
        w
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `fan_in x fan_out`.
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    fn he_uniform(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / fan_in.max(1) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)).collect();
        Self {
            weight: Tensor::matrix(fan_in, fan_out, data).expect("sized above"),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[fan_in, fan_out]),
            bias: Tensor::zeros(&[fan_out]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNormParams {
    fn identity(width: usize) -> Self {
        Self {
            gamma: Tensor::ones(&[width]),
            beta: Tensor::zeros(&[width]),
        }
    }
}

/// Encoder weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    arch: Architecture,
    dense: Vec<Dense>,
    norms: Vec<LayerNormParams>,
}

impl ModelParams {
    /// He-style uniform initialization (`U(-sqrt(6/fan_in), sqrt(6/fan_in))`),
    /// zero biases, identity layer norms.
    pub fn init(arch: Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = arch.widths();
        let dense = widths.windows(2).map(|w| Dense::he_uniform(w[0], w[1], &mut rng)).collect();
        let norms = arch.hidden.iter().map(|&h| LayerNormParams::identity(h)).collect();
        Self { arch, dense, norms }
    }

    /// All dense weights and biases zero.
    pub fn zeros(arch: Architecture) -> Self {
        let widths = arch.widths();
        let dense = widths.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect();
        let norms = arch.hidden.iter().map(|&h| LayerNormParams::identity(h)).collect();
        Self { arch, dense, norms }
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn dense(&self) -> &[Dense] {
        &self.dense
    }

    pub fn norms(&self) -> &[LayerNormParams] {
        &self.norms
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::with_capacity(self.dense.len() * 4);
        for (i, layer) in self.dense.iter().enumerate() {
            out.push(&layer.weight);
            out.push(&layer.bias);
            if let Some(norm) = self.norms.get(i) {
                out.push(&norm.gamma);
                out.push(&norm.beta);
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::with_capacity(self.dense.len() * 4);
        let mut norms = self.norms.iter_mut();
        for layer in self.dense.iter_mut() {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
            if let Some(norm) = norms.next() {
                out.push(&mut norm.gamma);
                out.push(&mut norm.beta);
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    /// Puts every parameter on `tape` in declaration order.
    pub fn record(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.tensors()
            .into_iter()
            .map(|t| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }

    /// Records the encoder forward pass for `inputs` using parameter nodes
    /// from [`ModelParams::record`].
    pub fn forward(&self, tape: &mut Tape, params: &[Var], inputs: Var) -> Result<Var, ModelError> {
        let width = tape.value(inputs).cols();
        if tape.value(inputs).rank() != 2 || width != self.arch.input_dim {
            return Err(ModelError::WidthMismatch {
                expected: self.arch.input_dim,
                found: width,
            });
        }
        let mut h = inputs;
        let mut p = params.iter().copied();
        let mut next = || p.next().expect("parameter count matches architecture");
        let hidden = self.arch.hidden.len();
        for layer in 0..=hidden {
            let (w, b) = (next(), next());
            let z = tape.matmul(h, w)?;
            let z = tape.add_row(z, b)?;
            h = if layer < hidden {
                let (g, beta) = (next(), next());
                let n = tape.layer_norm(z, g, beta)?;
                tape.relu(n)?
            } else {
                tape.sigmoid(z)?
            };
        }
        Ok(h)
    }

    fn check_inputs(&self, inputs: &Tensor) -> Result<(), ModelError> {
        if inputs.rank() != 2 || inputs.cols() != self.arch.input_dim {
            return Err(ModelError::WidthMismatch {
                expected: self.arch.input_dim,
                found: inputs.cols(),
            });
        }
        if let Some(row) = inputs.row_iter().position(|r| !r.iter().all(|v| v.is_finite())) {
            return Err(ModelError::NonFiniteInput(row));
        }
        Ok(())
    }
}

/// Embeds a `batch x input_dim` matrix into `[0, 1]^embed_dim`.
pub fn encode(params: &ModelParams, inputs: &Tensor) -> Result<Tensor, ModelError> {
    params.check_inputs(inputs)?;
    let mut tape = Tape::new();
    let vars = params.record(&mut tape, false);
    let x = tape.constant(inputs.clone());
    let out = params.forward(&mut tape, &vars, x)?;
    Ok(tape.value(out).clone())
}

/// Classifier head: `dense(hidden) -> relu -> dense(classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeParams {
    pub hidden: Dense,
    pub output: Dense,
}

impl ProbeParams {
    pub fn init(input_dim: usize, hidden: usize, classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            hidden: Dense::he_uniform(input_dim, hidden, &mut rng),
            output: Dense::he_uniform(hidden, classes, &mut rng),
        }
    }

    pub fn zeros(input_dim: usize, hidden: usize, classes: usize) -> Self {
        Self {
            hidden: Dense::zeros(input_dim, hidden),
            output: Dense::zeros(hidden, classes),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.hidden.weight.shape()[0]
    }

    pub fn classes(&self) -> usize {
        self.output.weight.shape()[1]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.hidden.weight,
            &mut self.hidden.bias,
            &mut self.output.weight,
            &mut self.output.bias,
        ]
    }

    pub fn record(&self, tape: &mut Tape) -> Vec<Var> {
        [&self.hidden.weight, &self.hidden.bias, &self.output.weight, &self.output.bias]
            .into_iter()
            .map(|t| tape.leaf(t.clone()))
            .collect()
    }

    pub fn forward(&self, tape: &mut Tape, params: &[Var], embeddings: Var) -> Result<Var, ModelError> {
        let width = tape.value(embeddings).cols();
        if width != self.input_dim() {
            return Err(ModelError::WidthMismatch {
                expected: self.input_dim(),
                found: width,
            });
        }
        let h = tape.matmul(embeddings, params[0])?;
        let h = tape.add_row(h, params[1])?;
        let h = tape.relu(h)?;
        let z = tape.matmul(h, params[2])?;
        Ok(tape.add_row(z, params[3])?)
    }
}

/// Class logits, one row per embedding.
pub fn probe_forward(probe: &ProbeParams, embeddings: &Tensor) -> Result<Tensor, ModelError> {
    if embeddings.rank() != 2 || embeddings.cols() != probe.input_dim() {
        return Err(ModelError::WidthMismatch {
            expected: probe.input_dim(),
            found: embeddings.cols(),
        });
    }
    let mut tape = Tape::new();
    let vars = probe.record(&mut tape);
    let x = tape.constant(embeddings.clone());
    let out = probe.forward(&mut tape, &vars, x)?;
    Ok(tape.value(out).clone())
}

pub fn checkpoint_bytes(params: &ModelParams) -> Vec<u8> {
    let widths = params.arch.widths();
    let mut out = Vec::with_capacity(16 + 4 * widths.len() + 8 * params.parameter_count());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&((widths.len() - 1) as u32).to_le_bytes());
    for w in &widths {
        out.extend_from_slice(&(*w as u32).to_le_bytes());
    }
    for t in params.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn params_from_checkpoint(bytes: &[u8]) -> Result<ModelParams, ModelError> {
    let bad = |msg: &str| ModelError::Checkpoint(msg.to_string());
    let mut cursor = bytes;
    let mut take = |n: usize| -> Result<&[u8], ModelError> {
        if cursor.len() < n {
            return Err(bad("truncated"));
        }
        let (head, rest) = cursor.split_at(n);
        cursor = rest;
        Ok(head)
    };
    if take(4)? != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    let read_u32 = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes"));
    let version = read_u32(take(4)?);
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
    }
    let layers = read_u32(take(4)?) as usize;
    if layers == 0 || layers > 64 {
        return Err(ModelError::Checkpoint(format!("implausible layer count {layers}")));
    }
    let mut widths = Vec::with_capacity(layers + 1);
    for _ in 0..=layers {
        widths.push(read_u32(take(4)?) as usize);
    }
    let arch = Architecture::new(widths[0], widths[1..layers].to_vec(), widths[layers]);
    let mut params = ModelParams::zeros(arch);
    for t in params.tensors_mut() {
        let raw = take(8 * t.len())?;
        for (dst, chunk) in t.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
    }
    if !cursor.is_empty() {
        return Err(bad("trailing bytes"));
    }
    Ok(params)
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<(), ModelError> {
    fs::write(path, checkpoint_bytes(params)).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams, ModelError> {
    let bytes = fs::read(path).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    params_from_checkpoint(&bytes)
}
