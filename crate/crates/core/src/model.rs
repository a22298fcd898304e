//! Bidirectional LSTM encoder with additive attention pooling and a
//! two-class softmax head.
//!
//! Sequences are post-padded to `max_len`; all per-token tensors are laid
//! out as `[batch · max_len, width]` with row `b · max_len + t`. Padding is
//! masked everywhere: recurrent state does not advance on PAD positions,
//! encoder outputs there are exactly zero, and attention gives them zero
//! weight. Appending padding therefore never changes a prediction.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{ParamId, ParamSet, Tape, Tensor, TensorError, Var};
use crate::vocab::EncodedExample;
use crate::NUM_CLASSES;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("sequence {row} has length {length}, expected 1..={max_len}")]
    BadLength {
        row: usize,
        length: usize,
        max_len: usize,
    },
    #[error("batch is malformed: {0}")]
    BadBatch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Rows of the embedding matrix (vocabulary size including specials).
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// Hidden width of each direction.
    pub hidden_dim: usize,
    pub max_len: usize,
    pub dropout_rate: f64,
    /// Stacked bidirectional layers. One unless explicitly raised.
    pub num_layers: usize,
    pub num_classes: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 20_000,
            embed_dim: 128,
            hidden_dim: 256,
            max_len: 100,
            dropout_rate: 0.3,
            num_layers: 1,
            num_classes: NUM_CLASSES,
            seed: crate::DEFAULT_SEED,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("max_len", self.max_len),
            ("num_layers", self.num_layers),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::InvalidConfig(format!("{name} must be at least 1")));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(ModelError::InvalidConfig(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        if self.num_classes != NUM_CLASSES {
            return Err(ModelError::InvalidConfig(format!(
                "num_classes must be {NUM_CLASSES}, got {}",
                self.num_classes
            )));
        }
        Ok(())
    }

    /// Encoder output width, `2 · hidden_dim`.
    pub fn encoder_width(&self) -> usize {
        2 * self.hidden_dim
    }

    /// Closed-form parameter count for this configuration.
    pub fn parameter_count(&self) -> usize {
        let h = self.hidden_dim;
        let embedding = self.vocab_size * self.embed_dim;
        let lstm: usize = (0..self.num_layers)
            .map(|layer| {
                let input = if layer == 0 { self.embed_dim } else { 2 * h };
                2 * (4 * h * (input + h + 1))
            })
            .sum();
        let attention = 2 * h + 1;
        let head = 2 * h * self.num_classes + self.num_classes;
        embedding + lstm + attention + head
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LstmParams {
    /// `[4h, input]`, gate blocks ordered input, forget, candidate, output.
    pub w_input: ParamId,
    /// `[4h, h]`
    pub w_recurrent: ParamId,
    /// `[4h]`
    pub bias: ParamId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub embedding: ParamId,
    /// Per layer: `[forward, backward]`.
    pub layers: Vec<[LstmParams; 2]>,
    /// `[1, 2h]`
    pub attn_w: ParamId,
    /// `[1]`
    pub attn_b: ParamId,
    /// `[2, 2h]`
    pub head_w: ParamId,
    /// `[2]`
    pub head_b: ParamId,
}

/// Parameter names and shapes in storage order.
pub fn parameter_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let h = config.hidden_dim;
    let mut out = vec![("embedding".to_string(), vec![config.vocab_size, config.embed_dim])];
    for layer in 0..config.num_layers {
        let input = if layer == 0 { config.embed_dim } else { 2 * h };
        for dir in ["fwd", "bwd"] {
            out.push((format!("lstm{layer}.{dir}.w_input"), vec![4 * h, input]));
            out.push((format!("lstm{layer}.{dir}.w_recurrent"), vec![4 * h, h]));
            out.push((format!("lstm{layer}.{dir}.bias"), vec![4 * h]));
        }
    }
    out.push(("attention.w".into(), vec![1, 2 * h]));
    out.push(("attention.b".into(), vec![1]));
    out.push(("head.w".into(), vec![config.num_classes, 2 * h]));
    out.push(("head.b".into(), vec![config.num_classes]));
    out
}

fn layout_for(config: &ModelConfig) -> ParamLayout {
    let mut next = 0..;
    let mut id = || ParamId(next.next().unwrap());
    let embedding = id();
    let layers = (0..config.num_layers)
        .map(|_| {
            let mut dir = || LstmParams {
                w_input: id(),
                w_recurrent: id(),
                bias: id(),
            };
            [dir(), dir()]
        })
        .collect();
    ParamLayout {
        embedding,
        layers,
        attn_w: id(),
        attn_b: id(),
        head_w: id(),
        head_b: id(),
    }
}

/// A padded batch: `indices` is `[batch · max_len]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub lengths: Vec<usize>,
    pub labels: Vec<usize>,
    pub max_len: usize,
}

impl Batch {
    pub fn from_examples<'a, I>(examples: I) -> Self
    where
        I: IntoIterator<Item = &'a EncodedExample>,
    {
        let mut batch = Batch {
            indices: Vec::new(),
            lengths: Vec::new(),
            labels: Vec::new(),
            max_len: 0,
        };
        for e in examples {
            if batch.lengths.is_empty() {
                batch.max_len = e.indices.len();
            }
            assert_eq!(e.indices.len(), batch.max_len, "examples must share max_len");
            batch.indices.extend_from_slice(&e.indices);
            batch.lengths.push(e.length);
            batch.labels.push(e.label);
        }
        batch
    }

    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    /// Validity of each position, `[batch · max_len]`.
    pub fn position_mask(&self) -> Vec<bool> {
        self.lengths
            .iter()
            .flat_map(|&len| (0..self.max_len).map(move |t| t < len))
            .collect()
    }
}

/// Whether dropout is applied, and from which random stream.
pub enum Mode<'r> {
    Eval,
    Train(&'r mut ChaCha8Rng),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// Tape handles of a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    /// `[batch, 2]`
    pub probs: Var,
    /// `[batch, max_len]`
    pub attention: Var,
    /// `[batch, 2h]`
    pub context: Var,
    /// `[batch · max_len, 2h]`
    pub encoded: Var,
}

/// Plain-array forward results.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub class_probabilities: Vec<[f64; 2]>,
    pub attention_weights: Vec<Vec<f64>>,
    pub context_vectors: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiLstmAttention {
    config: ModelConfig,
    params: ParamSet,
    layout: ParamLayout,
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
}

impl BiLstmAttention {
    /// Seeded initialization: weight matrices `U[-k, k]` with
    /// `k = 1/√fan_in`, embedding rows `U[-0.1, 0.1]` with a zero PAD row,
    /// zero biases except a forget-gate bias of 1.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let h = config.hidden_dim;
        let mut params = ParamSet::new();
        for (name, shape) in parameter_shapes(&config) {
            let n: usize = shape.iter().product();
            let values = if name == "embedding" {
                let mut v = uniform(&mut rng, n, 0.1);
                v[..config.embed_dim].iter_mut().for_each(|x| *x = 0.0);
                v
            } else if name.ends_with(".bias") {
                let mut v = vec![0.0; n];
                v[h..2 * h].iter_mut().for_each(|x| *x = 1.0);
                v
            } else if name.ends_with(".b") {
                vec![0.0; n]
            } else {
                let fan_in = shape[1];
                uniform(&mut rng, n, 1.0 / (fan_in as f64).sqrt())
            };
            params.push(name, Tensor::new(shape, values)?.with_grad());
        }
        Self::from_params(config, params)
    }

    /// Wraps an existing parameter set after checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let expected = parameter_shapes(&config);
        if expected.len() != params.len() {
            return Err(ModelError::InvalidConfig(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, shape), (_, pname, t)) in expected.iter().zip(params.iter()) {
            if name != pname || shape.as_slice() != t.shape() {
                return Err(ModelError::InvalidConfig(format!(
                    "parameter `{pname}` {:?} does not match expected `{name}` {shape:?}",
                    t.shape()
                )));
            }
        }
        let layout = layout_for(&config);
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn into_params(self) -> ParamSet {
        self.params
    }

    /// Exact element count over all parameter tensors.
    pub fn count_parameters(&self) -> usize {
        self.params.num_elements()
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        let l = self.config.max_len;
        if batch.max_len != l {
            return Err(ModelError::BadBatch(format!(
                "batch max_len {} but model expects {l}",
                batch.max_len
            )));
        }
        if batch.is_empty() || batch.indices.len() != batch.len() * l {
            return Err(ModelError::BadBatch(format!(
                "{} indices for {} sequences of length {l}",
                batch.indices.len(),
                batch.len()
            )));
        }
        if let Some((row, &length)) = batch.lengths.iter().enumerate().find(|(_, &n)| n == 0 || n > l) {
            return Err(ModelError::BadLength {
                row,
                length,
                max_len: l,
            });
        }
        Ok(())
    }

    fn dropout(&self, tape: &mut Tape<'_>, x: Var, mode: &mut Mode<'_>) -> Result<Var> {
        match mode {
            Mode::Train(rng) if self.config.dropout_rate > 0.0 => {
                Ok(tape.dropout(x, 1.0 - self.config.dropout_rate, &mut **rng)?)
            }
            _ => Ok(x),
        }
    }

    /// Row gather from the embedding matrix, `[B·L, d_e]`, with dropout in
    /// training mode.
    pub fn embed(&self, tape: &mut Tape<'_>, indices: &[usize], mode: &mut Mode<'_>) -> Result<Var> {
        let e = tape.param(self.layout.embedding);
        let x = tape.gather_rows(e, indices.to_vec())?;
        self.dropout(tape, x, mode)
    }

    /// Runs one LSTM direction over `[B·L, in]`, returning `[B·L, h]`.
    fn lstm_direction(
        &self,
        tape: &mut Tape<'_>,
        input: Var,
        p: &LstmParams,
        lengths: &[usize],
        reverse: bool,
    ) -> Result<Var> {
        let b = lengths.len();
        let l = self.config.max_len;
        let h = self.config.hidden_dim;
        let w_in = tape.param(p.w_input);
        let w_rec = tape.param(p.w_recurrent);
        let bias = tape.param(p.bias);
        let projected = tape.matmul_nt(input, w_in)?; // [B·L, 4h]

        let zeros = tape.constant(&Tensor::zeros(vec![b, h]));
        let (mut h_prev, mut c_prev) = (zeros, zeros);
        let mut outputs = vec![zeros; l];
        let steps: Box<dyn Iterator<Item = usize>> = if reverse {
            Box::new((0..l).rev())
        } else {
            Box::new(0..l)
        };
        for t in steps {
            let valid: Vec<bool> = lengths.iter().map(|&n| t < n).collect();
            if !valid.iter().any(|&v| v) {
                // state holds, output stays zero
                continue;
            }
            let valid = Arc::new(valid);
            let rows: Vec<usize> = (0..b).map(|row| row * l + t).collect();
            let x_t = tape.gather_rows(projected, rows)?;
            let rec = tape.matmul_nt(h_prev, w_rec)?;
            let pre = tape.add(x_t, rec)?;
            let pre = tape.add_row(pre, bias)?;
            let i_gate = tape.slice_cols(pre, 0, h)?;
            let i_gate = tape.sigmoid(i_gate);
            let f_gate = tape.slice_cols(pre, h, 2 * h)?;
            let f_gate = tape.sigmoid(f_gate);
            let g_cand = tape.slice_cols(pre, 2 * h, 3 * h)?;
            let g_cand = tape.tanh(g_cand);
            let o_gate = tape.slice_cols(pre, 3 * h, 4 * h)?;
            let o_gate = tape.sigmoid(o_gate);
            let kept = tape.mul(f_gate, c_prev)?;
            let written = tape.mul(i_gate, g_cand)?;
            let c_new = tape.add(kept, written)?;
            let squashed = tape.tanh(c_new);
            let h_new = tape.mul(o_gate, squashed)?;
            c_prev = tape.select_rows(valid.clone(), c_new, c_prev)?;
            h_prev = tape.select_rows(valid.clone(), h_new, h_prev)?;
            outputs[t] = tape.mask_rows(h_prev, valid)?;
        }
        Ok(tape.interleave_steps(&outputs)?)
    }

    /// Bidirectional encoder over embedded tokens `[B·L, d_e]`. Output row
    /// `b·L + t` is `[forward_t ; backward_t]`, zero for `t ≥ length_b`.
    pub fn bilstm_forward(&self, tape: &mut Tape<'_>, embedded: Var, lengths: &[usize]) -> Result<Var> {
        let l = self.config.max_len;
        if let Some((row, &length)) = lengths.iter().enumerate().find(|(_, &n)| n == 0 || n > l) {
            return Err(ModelError::BadLength {
                row,
                length,
                max_len: l,
            });
        }
        let mut x = embedded;
        for layer in &self.layout.layers {
            let fwd = self.lstm_direction(tape, x, &layer[0], lengths, false)?;
            let bwd = self.lstm_direction(tape, x, &layer[1], lengths, true)?;
            x = tape.concat_cols(&[fwd, bwd])?;
        }
        Ok(x)
    }

    /// Scalar-score attention: `u_t = tanh(w·h_t + b)`, softmax over valid
    /// positions, context `s = Σ_t α_t h_t`. Returns `(s [B, 2h], α [B, L])`.
    pub fn attention(&self, tape: &mut Tape<'_>, encoded: Var, mask: Vec<bool>) -> Result<(Var, Var)> {
        let l = self.config.max_len;
        let rows = tape.shape(encoded)[0];
        if !rows.is_multiple_of(l) || mask.len() != rows {
            return Err(ModelError::BadBatch(format!(
                "encoded rows {rows} / mask {} incompatible with max_len {l}",
                mask.len()
            )));
        }
        let b = rows / l;
        let w = tape.param(self.layout.attn_w);
        let bias = tape.param(self.layout.attn_b);
        let u = tape.matmul_nt(encoded, w)?;
        let u = tape.add_row(u, bias)?;
        let u = tape.tanh(u);
        let u = tape.reshape(u, vec![b, l])?;
        let alpha = tape.masked_softmax(u, mask)?;
        let s = tape.seq_weighted_sum(alpha, encoded)?;
        Ok((s, alpha))
    }

    /// Dropout (training only), affine map to two logits, softmax.
    pub fn classify(&self, tape: &mut Tape<'_>, context: Var, mode: &mut Mode<'_>) -> Result<Var> {
        let s = self.dropout(tape, context, mode)?;
        let w = tape.param(self.layout.head_w);
        let b = tape.param(self.layout.head_b);
        let logits = tape.matmul_nt(s, w)?;
        let logits = tape.add_row(logits, b)?;
        Ok(tape.softmax(logits)?)
    }

    pub fn forward(&self, tape: &mut Tape<'_>, batch: &Batch, mode: &mut Mode<'_>) -> Result<ForwardVars> {
        self.check_batch(batch)?;
        let embedded = self.embed(tape, &batch.indices, mode)?;
        let encoded = self.bilstm_forward(tape, embedded, &batch.lengths)?;
        let (context, attention) = self.attention(tape, encoded, batch.position_mask())?;
        let probs = self.classify(tape, context, mode)?;
        Ok(ForwardVars {
            probs,
            attention,
            context,
            encoded,
        })
    }

    /// Evaluation-mode forward returning plain arrays.
    pub fn predict(&self, batch: &Batch) -> Result<ForwardOutput> {
        let mut tape = Tape::new(&self.params);
        let vars = self.forward(&mut tape, batch, &mut Mode::Eval)?;
        let l = self.config.max_len;
        let d = self.config.encoder_width();
        Ok(ForwardOutput {
            class_probabilities: tape.value(vars.probs).chunks(2).map(|r| [r[0], r[1]]).collect(),
            attention_weights: tape.value(vars.attention).chunks(l).map(<[f64]>::to_vec).collect(),
            context_vectors: tape.value(vars.context).chunks(d).map(<[f64]>::to_vec).collect(),
        })
    }
}
