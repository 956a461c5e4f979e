//! CNN encoders, opinion-gated self-attention, and document attention.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, shape_err, Result};
use crate::params::{glorot_uniform, ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Same-length 1D convolution: a window of `kernel` rows around each position
/// (zero-padded at sequence ends) projected to `out_dim` features.
#[derive(Clone, Debug)]
pub struct Conv1d {
    weight: ParamId,
    bias: ParamId,
    kernel: usize,
    in_dim: usize,
    out_dim: usize,
}

impl Conv1d {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        kernel: usize,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(invalid!("kernel size {kernel} must be odd"));
        }
        let w = glorot_uniform(rng, &[kernel * in_dim, out_dim], kernel * in_dim, kernel * out_dim);
        let weight = store.add(format!("{name}.weight"), group, w);
        let bias = store.add(format!("{name}.bias"), group, Tensor::zeros(&[out_dim]));
        Ok(Conv1d {
            weight,
            bias,
            kernel,
            in_dim,
            out_dim,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> ParamId {
        self.bias
    }

    /// Pre-activation output, `[rows, out_dim]`.
    pub fn forward(&self, tape: &mut Tape, x: Var, segments: &[(usize, usize)]) -> Result<Var> {
        let d = tape.value(x).cols();
        if d != self.in_dim {
            return Err(shape_err!(
                "convolution expects {}-dim inputs, got {d}",
                self.in_dim
            ));
        }
        let windows = tape.unfold(x, segments, self.kernel)?;
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let y = tape.matmul(windows, w)?;
        tape.add_row_broadcast(y, b)
    }
}

/// One CNN layer: parallel filter groups concatenated, then ReLU and dropout.
#[derive(Clone, Debug)]
pub struct CnnLayer {
    groups: Vec<Conv1d>,
}

impl CnnLayer {
    pub fn new(groups: Vec<Conv1d>) -> Self {
        CnnLayer { groups }
    }

    pub fn out_dim(&self) -> usize {
        self.groups.iter().map(Conv1d::out_dim).sum()
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        x: Var,
        segments: &[(usize, usize)],
        dropout: f64,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let parts = self
            .groups
            .iter()
            .map(|g| g.forward(tape, x, segments))
            .collect::<Result<Vec<_>>>()?;
        let y = if parts.len() == 1 {
            parts[0]
        } else {
            tape.concat_cols(&parts)?
        };
        let y = tape.relu(y);
        tape.dropout(y, dropout, train, rng)
    }
}

/// A stack of CNN layers; an empty stack is the identity.
#[derive(Clone, Debug, Default)]
pub struct CnnStack {
    layers: Vec<CnnLayer>,
}

impl CnnStack {
    pub fn new(layers: Vec<CnnLayer>) -> Self {
        CnnStack { layers }
    }

    /// `count` layers of `filters` filters with one kernel size, `dim -> filters`
    /// for the first and `filters -> filters` after that.
    #[allow(clippy::too_many_arguments)]
    pub fn uniform<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        count: usize,
        in_dim: usize,
        filters: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(count);
        let mut d = in_dim;
        for l in 0..count {
            let conv = Conv1d::new(store, &format!("{name}.conv{l}"), group, kernel, d, filters, rng)?;
            layers.push(CnnLayer::new(vec![conv]));
            d = filters;
        }
        Ok(CnnStack { layers })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        x: Var,
        segments: &[(usize, usize)],
        dropout: f64,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(tape, h, segments, dropout, train, rng)?;
        }
        Ok(h)
    }
}

/// Shape of the shared CNN feature extractor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharedEncoderConfig {
    pub layers: usize,
    /// Kernel sizes of the parallel filter groups in the first layer.
    pub first_kernels: Vec<usize>,
    /// Filters per group in the first layer.
    pub first_filters: usize,
    /// Kernel size of every later layer (and of the task-specific CNNs).
    pub kernel: usize,
    /// Filters of every later layer; also the hidden width of the network.
    pub filters: usize,
    pub dropout: f64,
}

impl Default for SharedEncoderConfig {
    fn default() -> Self {
        SharedEncoderConfig {
            layers: 2,
            first_kernels: vec![3, 5],
            first_filters: 128,
            kernel: 5,
            filters: 256,
            dropout: 0.5,
        }
    }
}

impl SharedEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(invalid!("shared encoder needs at least one CNN layer"));
        }
        if self.first_kernels.is_empty() {
            return Err(invalid!("first layer needs at least one filter group"));
        }
        if self.first_kernels.len() * self.first_filters != self.filters {
            return Err(invalid!(
                "first layer width {} x {} must equal hidden width {}",
                self.first_kernels.len(),
                self.first_filters,
                self.filters
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(invalid!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn out_dim(&self) -> usize {
        self.filters
    }
}

#[derive(Clone, Debug)]
pub struct SharedEncoder {
    stack: CnnStack,
    dropout: f64,
}

/// Output of [`SharedEncoder::encode`].
#[derive(Clone, Copy, Debug)]
pub struct SharedOutput {
    /// Embeddings after input dropout; the extraction decoder reads these.
    pub embedded: Var,
    /// Initial shared representation.
    pub hidden: Var,
}

impl SharedEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: &SharedEncoderConfig,
        in_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let mut layers = Vec::with_capacity(config.layers);
        let first = config
            .first_kernels
            .iter()
            .map(|&k| {
                Conv1d::new(
                    store,
                    &format!("shared.conv0.k{k}"),
                    ParamGroup::Shared,
                    k,
                    in_dim,
                    config.first_filters,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        layers.push(CnnLayer::new(first));
        for l in 1..config.layers {
            let conv = Conv1d::new(
                store,
                &format!("shared.conv{l}"),
                ParamGroup::Shared,
                config.kernel,
                config.filters,
                config.filters,
                rng,
            )?;
            layers.push(CnnLayer::new(vec![conv]));
        }
        Ok(SharedEncoder {
            stack: CnnStack::new(layers),
            dropout: config.dropout,
        })
    }

    /// Dropout on the embeddings, then the CNN layers (each followed by ReLU and dropout).
    pub fn encode<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        embedded: Var,
        segments: &[(usize, usize)],
        train: bool,
        rng: &mut R,
    ) -> Result<SharedOutput> {
        if tape.value(embedded).rows() == 0 || segments.iter().any(|&(_, n)| n == 0) {
            return Err(invalid!("cannot encode an empty sequence"));
        }
        let embedded = tape.dropout(embedded, self.dropout, train, rng)?;
        let hidden = self
            .stack
            .forward(tape, embedded, segments, self.dropout, train, rng)?;
        Ok(SharedOutput { embedded, hidden })
    }
}

/// Rounding slack allowed when checking that opinion probabilities lie in `[0, 1]`.
const P_OP_SLACK: f64 = 1e-9;

/// `1/|i-j|` off the diagonal, zero on it.
pub fn distance_factors(n: usize) -> Tensor {
    let mut t = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                t.data_mut()[i * n + j] = 1.0 / (i as f64 - j as f64).abs();
            }
        }
    }
    t
}

fn diagonal_mask(n: usize) -> Vec<bool> {
    (0..n * n).map(|k| k / n == k % n).collect()
}

/// Result of [`self_attention`] on a packed batch.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    /// One `[n, n]` attention matrix per sentence.
    pub matrices: Vec<Var>,
    /// Context vectors, `[tokens, hidden]`.
    pub context: Var,
}

/// Opinion-gated, distance-weighted self-attention.
///
/// For each sentence: `score_ij = (h_i W h_jᵀ) · (1/|i-j|) · p_j` for `i != j`,
/// rows are softmax-normalized over `j != i` (the diagonal is exactly zero),
/// and `h'_i = Σ_j A_ij h_j`. A one-token sentence has no context, so its
/// attention is `[[0]]` and `h'` is the zero vector.
///
/// `p_op` is `[tokens, 1]` with entries in `[0, 1]`.
pub fn self_attention(
    tape: &mut Tape,
    h: Var,
    p_op: Var,
    w: Var,
    segments: &[(usize, usize)],
) -> Result<SelfAttention> {
    let (rows, dim) = (tape.value(h).rows(), tape.value(h).cols());
    if tape.value(p_op).numel() != rows {
        return Err(shape_err!(
            "{} opinion probabilities for {rows} tokens",
            tape.value(p_op).numel()
        ));
    }
    if let Some(bad) = tape
        .value(p_op)
        .data()
        .iter()
        .find(|&&p| !(-P_OP_SLACK..=1.0 + P_OP_SLACK).contains(&p))
    {
        return Err(invalid!("opinion probability {bad} outside [0, 1]"));
    }
    let mut matrices = Vec::with_capacity(segments.len());
    let mut contexts = Vec::with_capacity(segments.len());
    for &(start, n) in segments {
        if n == 1 {
            matrices.push(tape.constant(Tensor::zeros(&[1, 1])));
            contexts.push(tape.constant(Tensor::zeros(&[1, dim])));
            continue;
        }
        let hs = tape.slice_rows(h, start, n)?;
        let hw = tape.matmul(hs, w)?;
        let ht = tape.transpose(hs);
        let bilinear = tape.matmul(hw, ht)?;
        let scaled = tape.mul_const(bilinear, distance_factors(n))?;
        let p = tape.slice_rows(p_op, start, n)?;
        let p = tape.reshape(p, vec![1, n])?;
        let scores = tape.mul_row_broadcast(scaled, p)?;
        let a = tape.softmax_rows(scores, Some(diagonal_mask(n)))?;
        contexts.push(tape.matmul(a, hs)?);
        matrices.push(a);
    }
    let context = tape.concat_rows(&contexts)?;
    Ok(SelfAttention { matrices, context })
}

/// Result of [`doc_attention`] on a packed batch.
#[derive(Clone, Copy, Debug)]
pub struct DocAttention {
    /// Per-token weights `[tokens, 1]`; each sentence's weights sum to 1.
    pub weights: Var,
    /// Document vectors `[sentences, hidden]`.
    pub pooled: Var,
}

/// `a = softmax(h_i · w)` within each sentence and `h_doc = Σ a_i h_i`.
pub fn doc_attention(
    tape: &mut Tape,
    h: Var,
    w: Var,
    segments: &[(usize, usize)],
) -> Result<DocAttention> {
    if segments.is_empty() || segments.iter().any(|&(_, n)| n == 0) {
        return Err(invalid!("document attention over an empty sequence"));
    }
    let logits = tape.matmul(h, w)?;
    let mut weights = Vec::with_capacity(segments.len());
    let mut pooled = Vec::with_capacity(segments.len());
    for &(start, n) in segments {
        let l = tape.slice_rows(logits, start, n)?;
        let l = tape.reshape(l, vec![1, n])?;
        let a = tape.softmax_rows(l, None)?;
        let hs = tape.slice_rows(h, start, n)?;
        pooled.push(tape.matmul(a, hs)?);
        weights.push(tape.reshape(a, vec![n, 1])?);
    }
    Ok(DocAttention {
        weights: tape.concat_rows(&weights)?,
        pooled: tape.concat_rows(&pooled)?,
    })
}
