//! Vocabulary and the concatenated general + domain embedding layer.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, ImnError, Result};
use crate::params::{uniform, ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
const PAD_TOKEN: &str = "<pad>";
const UNK_TOKEN: &str = "<unk>";

/// Bound of the uniform init for rows without a pretrained vector.
pub const OOV_INIT_BOUND: f64 = 0.05;

pub fn normalize(token: &str) -> String {
    token.to_lowercase()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, usize>,
}

impl Vocabulary {
    /// Counts normalized tokens across all streams and keeps those seen at least
    /// `min_count` times, in first-seen order.
    pub fn build<'a, I, S>(corpora: I, min_count: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [S]>,
        S: AsRef<str> + 'a,
    {
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut order = Vec::new();
        let mut any = false;
        for stream in corpora {
            any = true;
            for tok in stream {
                let t = normalize(tok.as_ref());
                let c = counts.entry(t.clone()).or_insert(0);
                if *c == 0 {
                    order.push(t);
                }
                *c += 1;
            }
        }
        if !any {
            return Err(invalid!("cannot build a vocabulary from no corpora"));
        }
        let kept = order
            .into_iter()
            .filter(|t| counts[t] >= min_count.max(1));
        Ok(Self::from_tokens(kept))
    }

    /// Ids are assigned in iteration order after PAD and UNK.
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Self {
        let mut id_to_token = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        let mut token_to_id = HashMap::new();
        for t in tokens {
            if !token_to_id.contains_key(&t) {
                token_to_id.insert(t.clone(), id_to_token.len());
                id_to_token.push(t);
            }
        }
        Vocabulary {
            id_to_token,
            token_to_id,
        }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() <= 2
    }

    /// Id of a surface token; unknown tokens map to [`UNK`].
    pub fn id(&self, token: &str) -> usize {
        self.lookup(token).unwrap_or(UNK)
    }

    pub fn lookup(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(&normalize(token)).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }
}

/// Reads a whitespace-separated `token v1 .. v_dim` text file into a
/// `[vocab.len(), dim]` matrix. Tokens missing from the file get uniform
/// `(-0.05, 0.05)` rows; the PAD row is zero. A leading `count dim` header
/// line is skipped.
pub fn load_embeddings<R: Rng + ?Sized>(
    path: impl AsRef<Path>,
    vocab: &Vocabulary,
    dim: usize,
    rng: &mut R,
) -> Result<Tensor> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| ImnError::io(path, e))?;
    let mut table = random_embeddings(vocab, dim, rng);
    let mut filled = vec![false; vocab.len()];
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if lineno == 1 && fields.len() == 2 && fields.iter().all(|f| f.parse::<usize>().is_ok()) {
            continue;
        }
        if fields.len() != dim + 1 {
            return Err(ImnError::Parse {
                path: path.to_path_buf(),
                line: lineno,
                message: format!(
                    "expected a token and {dim} values, found {} values",
                    fields.len() - 1
                ),
            });
        }
        let mut values = Vec::with_capacity(dim);
        for f in &fields[1..] {
            let v: f64 = f.parse().map_err(|_| ImnError::Parse {
                path: path.to_path_buf(),
                line: lineno,
                message: format!("not a number: {f:?}"),
            })?;
            values.push(v);
        }
        if let Some(id) = vocab.lookup(fields[0]) {
            if !filled[id] {
                table.row_mut(id).copy_from_slice(&values);
                filled[id] = true;
            }
        }
    }
    table.row_mut(PAD).fill(0.0);
    Ok(table)
}

/// Uniform `(-0.05, 0.05)` rows with a zero PAD row.
pub fn random_embeddings<R: Rng + ?Sized>(vocab: &Vocabulary, dim: usize, rng: &mut R) -> Tensor {
    let mut table = uniform(rng, &[vocab.len(), dim], OOV_INIT_BOUND);
    table.row_mut(PAD).fill(0.0);
    table
}

/// General-purpose and domain-specific embedding matrices, looked up side by side.
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    general: ParamId,
    domain: ParamId,
    general_dim: usize,
    domain_dim: usize,
    vocab_size: usize,
}

impl EmbeddingTable {
    pub fn new(store: &mut ParamStore, general: Tensor, domain: Tensor) -> Result<Self> {
        if general.rows() != domain.rows() || general.shape().len() != 2 || domain.shape().len() != 2 {
            return Err(invalid!(
                "embedding matrices {:?} and {:?} must be 2-D with equal row counts",
                general.shape(),
                domain.shape()
            ));
        }
        let vocab_size = general.rows();
        let general_dim = general.cols();
        let domain_dim = domain.cols();
        let general = store.add("embedding.general", ParamGroup::Shared, general);
        let domain = store.add("embedding.domain", ParamGroup::Shared, domain);
        Ok(EmbeddingTable {
            general,
            domain,
            general_dim,
            domain_dim,
            vocab_size,
        })
    }

    pub fn dim(&self) -> usize {
        self.general_dim + self.domain_dim
    }

    pub fn general_dim(&self) -> usize {
        self.general_dim
    }

    pub fn domain_dim(&self) -> usize {
        self.domain_dim
    }

    pub fn param_ids(&self) -> [ParamId; 2] {
        [self.general, self.domain]
    }

    /// `[ids.len(), general_dim + domain_dim]` rows of `concat(general, domain)`.
    /// With `mask_domain` the domain half is zero.
    pub fn embed(&self, tape: &mut Tape, ids: &[usize], mask_domain: bool) -> Result<Var> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.vocab_size) {
            return Err(invalid!(
                "token id {bad} out of range for vocabulary of {}",
                self.vocab_size
            ));
        }
        let g = tape.param(self.general);
        let general = tape.gather_rows(g, ids)?;
        let domain = if mask_domain {
            tape.constant(Tensor::zeros(&[ids.len(), self.domain_dim]))
        } else {
            let d = tape.param(self.domain);
            tape.gather_rows(d, ids)?
        };
        tape.concat_cols(&[general, domain])
    }
}
