//! Task decoders and the opinion-probability bridge from extraction to sentiment.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::encoders::{doc_attention, CnnStack, DocAttention};
use crate::error::{invalid, shape_err, Result};
use crate::labels::AeLabel;
use crate::params::{glorot_uniform, ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Fully-connected layer followed by a row softmax.
#[derive(Clone, Debug)]
pub struct Decoder {
    weight: ParamId,
    bias: ParamId,
    in_dim: usize,
    classes: usize,
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        in_dim: usize,
        classes: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            group,
            glorot_uniform(rng, &[in_dim, classes], in_dim, classes),
        );
        let bias = store.add(format!("{name}.bias"), group, Tensor::zeros(&[classes]));
        Decoder {
            weight,
            bias,
            in_dim,
            classes,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> ParamId {
        self.bias
    }

    /// Class distributions for each row of `features`.
    pub fn forward(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        let d = tape.value(features).cols();
        if d != self.in_dim {
            return Err(shape_err!(
                "decoder expects {}-dim features, got {d}",
                self.in_dim
            ));
        }
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let logits = tape.matmul(features, w)?;
        let logits = tape.add_row_broadcast(logits, b)?;
        tape.softmax_rows(logits, None)
    }
}

/// Extraction decoder over `[word embedding : h^s(0) : h^ae]`.
pub fn ae_decode(
    tape: &mut Tape,
    decoder: &Decoder,
    embedded: Var,
    shared0: Var,
    h_ae: Var,
) -> Result<Var> {
    let features = tape.concat_cols(&[embedded, shared0, h_ae])?;
    decoder.forward(tape, features)
}

/// Sentiment decoder over `[h^s(0) : h'^as]`.
pub fn as_decode(tape: &mut Tape, decoder: &Decoder, shared0: Var, context: Var) -> Result<Var> {
    let features = tape.concat_cols(&[shared0, context])?;
    decoder.forward(tape, features)
}

/// `p(BP) + p(IP)` of one extraction distribution.
pub fn opinion_prob(dist: &[f64]) -> Result<f64> {
    if dist.len() != AeLabel::COUNT {
        return Err(invalid!(
            "extraction distribution has {} classes, expected {}",
            dist.len(),
            AeLabel::COUNT
        ));
    }
    Ok(dist[AeLabel::BP.index()] + dist[AeLabel::IP.index()])
}

/// Opinion probabilities `[tokens, 1]` from extraction distributions `[tokens, 5]`.
pub fn opinion_probs(tape: &mut Tape, y_ae: Var) -> Result<Var> {
    let mut sel = Tensor::zeros(&[AeLabel::COUNT, 1]);
    sel.data_mut()[AeLabel::BP.index()] = 1.0;
    sel.data_mut()[AeLabel::IP.index()] = 1.0;
    let sel = tape.constant(sel);
    let p = tape.matmul(y_ae, sel)?;
    // sums of two probabilities can round a hair above 1
    if tape.value(p).data().iter().any(|&v| !(0.0..=1.0 + 1e-9).contains(&v)) {
        return Err(invalid!("extraction outputs are not distributions"));
    }
    Ok(p)
}

/// Document-level head: optional CNN layers, attention pooling, decoder.
#[derive(Clone, Debug)]
pub struct DocHead {
    encoder: CnnStack,
    attention: ParamId,
    decoder: Decoder,
}

/// Outputs of a [`DocHead`] on a packed batch.
#[derive(Clone, Copy, Debug)]
pub struct DocOutputs {
    /// `[sentences, classes]`.
    pub probs: Var,
    /// `[tokens, 1]`.
    pub attention: Var,
}

impl DocHead {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        layers: usize,
        hidden: usize,
        kernel: usize,
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let encoder = CnnStack::uniform(store, name, group, layers, hidden, hidden, kernel, rng)?;
        let attention = store.add(
            format!("{name}.attention"),
            group,
            glorot_uniform(rng, &[hidden, 1], hidden, 1),
        );
        let decoder = Decoder::new(store, &format!("{name}.decoder"), group, hidden, classes, rng);
        Ok(DocHead {
            encoder,
            attention,
            decoder,
        })
    }

    pub fn classes(&self) -> usize {
        self.decoder.classes()
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        h: Var,
        segments: &[(usize, usize)],
        dropout: f64,
        train: bool,
        rng: &mut R,
    ) -> Result<DocOutputs> {
        let h = self.encoder.forward(tape, h, segments, dropout, train, rng)?;
        let w = tape.param(self.attention);
        let DocAttention { weights, pooled } = doc_attention(tape, h, w, segments)?;
        let probs = self.decoder.forward(tape, pooled)?;
        Ok(DocOutputs {
            probs,
            attention: weights,
        })
    }
}
