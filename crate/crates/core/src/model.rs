//! The interactive multi-task network: shared encoder, task heads, and the
//! iterative message-passing forward pass.
//!
//! One forward pass over an aspect-level batch runs the shared encoder once,
//! then for `t = 0..=T` computes every task's outputs from the current shared
//! sequence `h^s(t)`. Between iterations the shared sequence is re-encoded
//! token by token from
//!
//! ```text
//! [h^s(t-1) : ŷ^ae(t-1) : ŷ^as(t-1) : ŷ^ds(t-1) : a^ds(t-1) : a^dd(t-1)]
//! ```
//!
//! through one fully-connected ReLU layer whose weights are shared across
//! iterations. Predictions are read from iteration `T`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{DocKind, PackedBatch};
use crate::encoders::{self_attention, CnnStack, SharedEncoder, SharedEncoderConfig};
use crate::error::{invalid, shape_err, Result};
use crate::heads::{ae_decode, as_decode, opinion_probs, Decoder, DocHead, DocOutputs};
use crate::labels::{AeLabel, Sentiment};
use crate::params::{glorot_uniform, ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::vocab::EmbeddingTable;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub general_dim: usize,
    pub domain_dim: usize,
    pub shared: SharedEncoderConfig,
    pub ae_layers: usize,
    pub as_layers: usize,
    pub ds_layers: usize,
    pub dd_layers: usize,
    pub num_domains: usize,
    /// Domain classification reads a separate shared-encoder pass over
    /// embeddings whose domain half is zeroed. When false it reads the
    /// regular shared sequence like document sentiment does.
    pub dd_masked_path: bool,
    pub train_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            general_dim: 300,
            domain_dim: 100,
            shared: SharedEncoderConfig::default(),
            ae_layers: 2,
            as_layers: 0,
            ds_layers: 0,
            dd_layers: 0,
            num_domains: 2,
            dd_masked_path: true,
            train_embeddings: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.shared.validate()?;
        if self.general_dim == 0 {
            return Err(invalid!("general embedding dimension must be positive"));
        }
        if self.num_domains < 2 {
            return Err(invalid!(
                "domain classification needs at least 2 domains, got {}",
                self.num_domains
            ));
        }
        Ok(())
    }

    pub fn embedding_dim(&self) -> usize {
        self.general_dim + self.domain_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.shared.out_dim()
    }

    /// Width of the re-encoder input: hidden + |AE| + |AS| + |DS| + a^ds + a^dd.
    pub fn message_dim(&self) -> usize {
        self.hidden_dim() + AeLabel::COUNT + Sentiment::COUNT + Sentiment::COUNT + 2
    }

    /// Width of the extraction decoder input.
    pub fn ae_feature_dim(&self) -> usize {
        self.embedding_dim() + 2 * self.hidden_dim()
    }
}

/// Parameters of the message-passing re-encoder.
#[derive(Clone, Debug)]
pub struct ReEncoder {
    weight: ParamId,
    bias: ParamId,
    in_dim: usize,
}

impl ReEncoder {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let weight = store.add(
            "reencoder.weight",
            ParamGroup::ReEncoder,
            glorot_uniform(rng, &[in_dim, out_dim], in_dim, out_dim),
        );
        let bias = store.add("reencoder.bias", ParamGroup::ReEncoder, Tensor::zeros(&[out_dim]));
        ReEncoder { weight, bias, in_dim }
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> ParamId {
        self.bias
    }

    /// New shared vectors `ReLU(W · [h : ŷ^ae : ŷ^as : ŷ^ds : a^ds : a^dd] + b)`.
    ///
    /// Every input is per token (`[tokens, width]`); document-level ŷ^ds must
    /// already be repeated onto the tokens of its sentence.
    #[allow(clippy::too_many_arguments)]
    pub fn update(
        &self,
        tape: &mut Tape,
        h_prev: Var,
        y_ae: Var,
        y_as: Var,
        y_ds: Var,
        a_ds: Var,
        a_dd: Var,
    ) -> Result<Var> {
        let widths = [h_prev, y_ae, y_as, y_ds, a_ds, a_dd].map(|v| tape.value(v).cols());
        let expect = [
            self.in_dim - AeLabel::COUNT - 2 * Sentiment::COUNT - 2,
            AeLabel::COUNT,
            Sentiment::COUNT,
            Sentiment::COUNT,
            1,
            1,
        ];
        if widths != expect {
            return Err(shape_err!(
                "message widths {widths:?}, expected {expect:?}"
            ));
        }
        let x = tape.concat_cols(&[h_prev, y_ae, y_as, y_ds, a_ds, a_dd])?;
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let y = tape.matmul(x, w)?;
        let y = tape.add_row_broadcast(y, b)?;
        Ok(tape.relu(y))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Trainability {
    embeddings: bool,
}

impl Trainability {
    pub fn allows(&self, name: &str) -> bool {
        self.embeddings || !name.starts_with("embedding.")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl Mode {
    pub fn is_train(self) -> bool {
        self == Mode::Train
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOptions<'a> {
    /// Number of message-passing iterations `T`.
    pub iterations: usize,
    pub mode: Mode,
    /// Per packed token opinion indicators that replace the predicted `P^op`
    /// (scheduled sampling).
    pub opinion_override: Option<&'a [f64]>,
}

impl ForwardOptions<'_> {
    pub fn eval(iterations: usize) -> Self {
        ForwardOptions {
            iterations,
            mode: Mode::Eval,
            opinion_override: None,
        }
    }
}

/// Every task output of one iteration, as tape handles.
#[derive(Clone, Debug)]
pub struct IterationOutputs {
    /// Shared sequence this iteration read, `[tokens, hidden]`.
    pub shared: Var,
    /// `[tokens, 5]`.
    pub y_ae: Var,
    /// `[tokens, 1]`, the values fed to the attention gate.
    pub p_op: Var,
    /// One `[n, n]` matrix per sentence.
    pub attention: Vec<Var>,
    /// `[tokens, 3]`.
    pub y_as: Var,
    /// `[sentences, 3]`.
    pub y_ds: Var,
    /// `[tokens, 1]`.
    pub a_ds: Var,
    /// `[sentences, K]`.
    pub y_dd: Var,
    /// `[tokens, 1]`.
    pub a_dd: Var,
}

#[derive(Clone, Debug)]
pub struct ForwardState {
    pub segments: Vec<(usize, usize)>,
    pub embedded: Var,
    /// `h^s(0)`.
    pub shared0: Var,
    /// `T + 1` snapshots, oldest first.
    pub iterations: Vec<IterationOutputs>,
}

impl ForwardState {
    pub fn last(&self) -> &IterationOutputs {
        self.iterations.last().expect("at least one iteration")
    }

    pub fn num_iterations(&self) -> usize {
        self.iterations.len() - 1
    }
}

/// Materialized per-sentence outputs of the final iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct SentenceOutputs {
    pub y_ae: Vec<[f64; AeLabel::COUNT]>,
    pub y_as: Vec<[f64; Sentiment::COUNT]>,
    pub p_op: Vec<f64>,
    pub attention: Tensor,
    pub y_ds: Vec<f64>,
    pub y_dd: Vec<f64>,
    pub a_ds: Vec<f64>,
    pub a_dd: Vec<f64>,
}

impl IterationOutputs {
    /// Copies this iteration's values out of the tape, split by sentence.
    pub fn sentences(&self, tape: &Tape, segments: &[(usize, usize)]) -> Vec<SentenceOutputs> {
        let y_ae = tape.value(self.y_ae);
        let y_as = tape.value(self.y_as);
        let p = tape.value(self.p_op);
        let y_ds = tape.value(self.y_ds);
        let y_dd = tape.value(self.y_dd);
        let a_ds = tape.value(self.a_ds);
        let a_dd = tape.value(self.a_dd);
        segments
            .iter()
            .enumerate()
            .map(|(k, &(start, n))| SentenceOutputs {
                y_ae: (start..start + n)
                    .map(|r| y_ae.row(r).try_into().expect("5 classes"))
                    .collect(),
                y_as: (start..start + n)
                    .map(|r| y_as.row(r).try_into().expect("3 classes"))
                    .collect(),
                p_op: p.data()[start..start + n].to_vec(),
                attention: tape.value(self.attention[k]).clone(),
                y_ds: y_ds.row(k).to_vec(),
                y_dd: y_dd.row(k).to_vec(),
                a_ds: a_ds.data()[start..start + n].to_vec(),
                a_dd: a_dd.data()[start..start + n].to_vec(),
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Imn {
    config: ModelConfig,
    params: ParamStore,
    embedding: EmbeddingTable,
    shared: SharedEncoder,
    ae_encoder: CnnStack,
    ae_decoder: Decoder,
    as_encoder: CnnStack,
    as_attention: ParamId,
    as_decoder: Decoder,
    ds_head: DocHead,
    dd_head: DocHead,
    reencoder: ReEncoder,
}

impl Imn {
    /// Builds a network around the given `[vocab, general_dim]` and
    /// `[vocab, domain_dim]` embedding matrices; everything else is
    /// Glorot-initialized from `rng` with zero biases.
    pub fn new<R: Rng + ?Sized>(
        config: ModelConfig,
        general: Tensor,
        domain: Tensor,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if general.cols() != config.general_dim || domain.cols() != config.domain_dim {
            return Err(shape_err!(
                "embedding widths {}+{} do not match configured {}+{}",
                general.cols(),
                domain.cols(),
                config.general_dim,
                config.domain_dim
            ));
        }
        let mut store = ParamStore::new();
        let embedding = EmbeddingTable::new(&mut store, general, domain)?;
        let h = config.hidden_dim();
        let k = config.shared.kernel;
        let shared = SharedEncoder::new(&mut store, &config.shared, config.embedding_dim(), rng)?;
        let ae_encoder = CnnStack::uniform(
            &mut store,
            "ae",
            ParamGroup::AspectExtraction,
            config.ae_layers,
            h,
            h,
            k,
            rng,
        )?;
        let ae_decoder = Decoder::new(
            &mut store,
            "ae.decoder",
            ParamGroup::AspectExtraction,
            config.ae_feature_dim(),
            AeLabel::COUNT,
            rng,
        );
        let as_encoder = CnnStack::uniform(
            &mut store,
            "as",
            ParamGroup::AspectSentiment,
            config.as_layers,
            h,
            h,
            k,
            rng,
        )?;
        let as_attention = store.add(
            "as.attention",
            ParamGroup::AspectSentiment,
            glorot_uniform(rng, &[h, h], h, h),
        );
        let as_decoder = Decoder::new(
            &mut store,
            "as.decoder",
            ParamGroup::AspectSentiment,
            2 * h,
            Sentiment::COUNT,
            rng,
        );
        let ds_head = DocHead::new(
            &mut store,
            "ds",
            ParamGroup::DocSentiment,
            config.ds_layers,
            h,
            k,
            Sentiment::COUNT,
            rng,
        )?;
        let dd_head = DocHead::new(
            &mut store,
            "dd",
            ParamGroup::DocDomain,
            config.dd_layers,
            h,
            k,
            config.num_domains,
            rng,
        )?;
        let reencoder = ReEncoder::new(&mut store, config.message_dim(), h, rng);
        Ok(Imn {
            config,
            params: store,
            embedding,
            shared,
            ae_encoder,
            ae_decoder,
            as_encoder,
            as_attention,
            as_decoder,
            ds_head,
            dd_head,
            reencoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn vocab_size(&self) -> usize {
        self.params.value(self.embedding.param_ids()[0]).rows()
    }

    pub fn embedding(&self) -> &EmbeddingTable {
        &self.embedding
    }

    pub fn reencoder(&self) -> &ReEncoder {
        &self.reencoder
    }

    /// Names of parameters the optimizer may touch (embeddings can be frozen).
    pub fn is_trainable(&self, name: &str) -> bool {
        self.clone_trainability().allows(name)
    }

    /// A detached copy of the trainability rule, usable while the parameters are borrowed mutably.
    pub fn clone_trainability(&self) -> Trainability {
        Trainability {
            embeddings: self.config.train_embeddings,
        }
    }

    fn dropout(&self) -> f64 {
        self.config.shared.dropout
    }

    /// Embedding lookup followed by the shared encoder.
    pub fn shared_encode<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        batch: &PackedBatch,
        mask_domain: bool,
        mode: Mode,
        rng: &mut R,
    ) -> Result<crate::encoders::SharedOutput> {
        let e = self.embedding.embed(tape, &batch.ids, mask_domain)?;
        self.shared
            .encode(tape, e, &batch.segments, mode.is_train(), rng)
    }

    /// Full aspect-level forward pass with `options.iterations` rounds of message passing.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        batch: &PackedBatch,
        options: &ForwardOptions,
        rng: &mut R,
    ) -> Result<ForwardState> {
        if batch.num_tokens() == 0 {
            return Err(invalid!("forward over an empty batch"));
        }
        let segs = &batch.segments;
        let train = options.mode.is_train();
        let dropout = self.dropout();

        let base = self.shared_encode(tape, batch, false, options.mode, rng)?;

        // The masked domain path does not depend on h^s(t), so one pass serves every iteration.
        let masked_dd = if self.config.dd_masked_path {
            let masked = self.shared_encode(tape, batch, true, options.mode, rng)?;
            Some(self.dd_head.forward(tape, masked.hidden, segs, dropout, train, rng)?)
        } else {
            None
        };

        let override_p = match options.opinion_override {
            Some(p) => {
                if p.len() != batch.num_tokens() {
                    return Err(shape_err!(
                        "{} opinion indicators for {} tokens",
                        p.len(),
                        batch.num_tokens()
                    ));
                }
                Some(tape.constant(Tensor::new(vec![p.len(), 1], p.to_vec())?))
            }
            None => None,
        };

        let w_as = tape.param(self.as_attention);
        let mut h = base.hidden;
        let mut iterations = Vec::with_capacity(options.iterations + 1);
        for t in 0..=options.iterations {
            let h_ae = self.ae_encoder.forward(tape, h, segs, dropout, train, rng)?;
            let y_ae = ae_decode(tape, &self.ae_decoder, base.embedded, base.hidden, h_ae)?;
            let p_op = match override_p {
                Some(p) => p,
                None => opinion_probs(tape, y_ae)?,
            };
            let h_as = self.as_encoder.forward(tape, h, segs, dropout, train, rng)?;
            let att = self_attention(tape, h_as, p_op, w_as, segs)?;
            let y_as = as_decode(tape, &self.as_decoder, base.hidden, att.context)?;
            let ds = self.ds_head.forward(tape, h, segs, dropout, train, rng)?;
            let dd = match masked_dd {
                Some(dd) => dd,
                None => self.dd_head.forward(tape, h, segs, dropout, train, rng)?,
            };
            let outputs = IterationOutputs {
                shared: h,
                y_ae,
                p_op,
                attention: att.matrices,
                y_as,
                y_ds: ds.probs,
                a_ds: ds.attention,
                y_dd: dd.probs,
                a_dd: dd.attention,
            };
            if t < options.iterations {
                let y_ds_tok = tape.gather_rows(ds.probs, &batch.token_sentence)?;
                h = self
                    .reencoder
                    .update(tape, h, y_ae, y_as, y_ds_tok, ds.attention, dd.attention)?;
            }
            iterations.push(outputs);
        }
        Ok(ForwardState {
            segments: segs.clone(),
            embedded: base.embedded,
            shared0: base.hidden,
            iterations,
        })
    }

    /// Document-level forward pass without message passing. Domain
    /// instances go through the masked embedding path when it is enabled.
    pub fn forward_documents<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        batch: &PackedBatch,
        kind: DocKind,
        mode: Mode,
        rng: &mut R,
    ) -> Result<DocOutputs> {
        let (head, masked) = match kind {
            DocKind::Sentiment => (&self.ds_head, false),
            DocKind::Domain => (&self.dd_head, self.config.dd_masked_path),
        };
        let shared = self.shared_encode(tape, batch, masked, mode, rng)?;
        head.forward(
            tape,
            shared.hidden,
            &batch.segments,
            self.dropout(),
            mode.is_train(),
            rng,
        )
    }
}
