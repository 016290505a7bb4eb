//! Reference instance encoder: hashed-token embeddings, mean pooled into a
//! hidden state `h`, then a linear projection `v = W h` into prototype space.
//!
//! Hidden states exported from an external language model can be ingested
//! instead; they bypass the token table and feed only the projection.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::linalg::{axpy, Matrix};

pub const DEFAULT_BUCKETS: usize = 1 << 15;

#[derive(Debug, Error, PartialEq)]
pub enum EncoderError {
    #[error("cannot encode an empty token list")]
    EmptyInput,
    #[error("expected a vector of length {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },
    #[error("token id {id} outside the {buckets}-row table")]
    TokenOutOfRange { id: u32, buckets: usize },
    #[error("line {line}: {message}")]
    Record { line: usize, message: String },
    #[error("line {line}: duplicate instance id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("{0}")]
    Format(String),
}

pub type TokenId = u32;

/// Lowercases, splits on anything that is not alphanumeric, and hashes each
/// token into `buckets` slots with 64-bit FNV-1a.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tokenizer {
    buckets: usize,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self::new(DEFAULT_BUCKETS)
    }
}

impl Tokenizer {
    pub fn new(buckets: usize) -> Self {
        assert!(buckets > 0 && buckets <= u32::MAX as usize);
        Self { buckets }
    }

    pub fn buckets(&self) -> usize {
        self.buckets
    }

    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(|t| self.bucket(&t.to_lowercase()))
            .collect()
    }

    fn bucket(&self, token: &str) -> TokenId {
        const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let hash = token
            .bytes()
            .fold(OFFSET, |acc, b| (acc ^ u64::from(b)).wrapping_mul(PRIME));
        (hash % self.buckets as u64) as TokenId
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HiddenState(pub Vec<f64>);

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceVec(pub Vec<f64>);

impl InstanceVec {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Trainable encoder weights: the token table (`|V| × d_h`) and the
/// projection `W` (`d_p × d_h`).
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub token_table: Matrix,
    pub projection: Matrix,
}

/// Gradients for [`EncoderParams`]. Token rows are kept sparse, keyed by id.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads {
    pub projection: Matrix,
    pub rows: BTreeMap<TokenId, Vec<f64>>,
}

impl EncoderGrads {
    pub fn zeros(params: &EncoderParams) -> Self {
        Self {
            projection: Matrix::zeros(params.projection.rows(), params.projection.cols()),
            rows: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, other: &EncoderGrads) {
        axpy(
            1.0,
            other.projection.as_slice(),
            self.projection.as_mut_slice(),
        );
        for (id, g) in &other.rows {
            let slot = self.rows.entry(*id).or_insert_with(|| vec![0.0; g.len()]);
            axpy(1.0, g, slot);
        }
    }
}

impl EncoderParams {
    /// I.i.d. normal(0, 1/√d_h) initialization for both blocks.
    pub fn init(buckets: usize, d_h: usize, d_p: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 1.0 / (d_h as f64).sqrt();
        let token_table = Matrix::random_normal(buckets, d_h, std, &mut rng);
        let projection = Matrix::random_normal(d_p, d_h, std, &mut rng);
        Self {
            token_table,
            projection,
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.projection.cols()
    }

    pub fn proto_dim(&self) -> usize {
        self.projection.rows()
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<(), EncoderError> {
        if tokens.is_empty() {
            return Err(EncoderError::EmptyInput);
        }
        let buckets = self.token_table.rows();
        if let Some(&id) = tokens.iter().find(|&&t| t as usize >= buckets) {
            return Err(EncoderError::TokenOutOfRange { id, buckets });
        }
        Ok(())
    }

    /// Mean-pooled hidden state of `tokens`.
    pub fn pool(&self, tokens: &[TokenId]) -> Result<HiddenState, EncoderError> {
        self.check_tokens(tokens)?;
        let mut h = vec![0.0; self.hidden_dim()];
        for &t in tokens {
            axpy(1.0, self.token_table.row(t as usize), &mut h);
        }
        let inv = 1.0 / tokens.len() as f64;
        h.iter_mut().for_each(|x| *x *= inv);
        Ok(HiddenState(h))
    }

    /// `v = W h`
    pub fn project(&self, h: &HiddenState) -> Result<InstanceVec, EncoderError> {
        if h.0.len() != self.hidden_dim() {
            return Err(EncoderError::Dimension {
                expected: self.hidden_dim(),
                actual: h.0.len(),
            });
        }
        Ok(InstanceVec(self.projection.matvec(&h.0)))
    }

    pub fn encode(&self, tokens: &[TokenId]) -> Result<(HiddenState, InstanceVec), EncoderError> {
        let h = self.pool(tokens)?;
        let v = self.project(&h)?;
        Ok((h, v))
    }

    /// Gradient of the projection only, for externally supplied hidden states.
    pub fn project_backward(
        &self,
        h: &HiddenState,
        grad_v: &[f64],
    ) -> Result<EncoderGrads, EncoderError> {
        if grad_v.len() != self.proto_dim() {
            return Err(EncoderError::Dimension {
                expected: self.proto_dim(),
                actual: grad_v.len(),
            });
        }
        if h.0.len() != self.hidden_dim() {
            return Err(EncoderError::Dimension {
                expected: self.hidden_dim(),
                actual: h.0.len(),
            });
        }
        let mut grads = EncoderGrads::zeros(self);
        for (r, &g) in grad_v.iter().enumerate() {
            axpy(g, &h.0, grads.projection.row_mut(r));
        }
        Ok(grads)
    }

    /// Back-propagates `∂L/∂v` through the projection and mean pooling.
    pub fn encode_backward(
        &self,
        tokens: &[TokenId],
        grad_v: &[f64],
    ) -> Result<EncoderGrads, EncoderError> {
        let h = self.pool(tokens)?;
        let mut grads = self.project_backward(&h, grad_v)?;
        let grad_h = self.projection.matvec_transposed(grad_v);
        let inv = 1.0 / tokens.len() as f64;
        for &t in tokens {
            let slot = grads
                .rows
                .entry(t)
                .or_insert_with(|| vec![0.0; grad_h.len()]);
            axpy(inv, &grad_h, slot);
        }
        Ok(grads)
    }
}

/// Reads `instance_id<TAB>v1 v2 … v_{d_h}` lines exported by an external model.
pub fn ingest_external(
    source: &str,
    d_h: usize,
) -> Result<BTreeMap<String, HiddenState>, EncoderError> {
    let mut out = BTreeMap::new();
    for (idx, text) in source.lines().enumerate() {
        let line = idx + 1;
        if text.trim().is_empty() {
            continue;
        }
        let Some((id, values)) = text.split_once('\t') else {
            return Err(EncoderError::Record {
                line,
                message: "expected `instance_id<TAB>values`".into(),
            });
        };
        let vals = values
            .split_whitespace()
            .map(|v| {
                v.parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| EncoderError::Record {
                        line,
                        message: format!("bad value {v:?}"),
                    })
            })
            .collect::<Result<Vec<f64>, _>>()?;
        if vals.len() != d_h {
            return Err(EncoderError::Record {
                line,
                message: format!("expected {d_h} values, got {}", vals.len()),
            });
        }
        if out.insert(id.to_string(), HiddenState(vals)).is_some() {
            return Err(EncoderError::DuplicateId {
                line,
                id: id.to_string(),
            });
        }
    }
    Ok(out)
}

/// Inverse of [`ingest_external`]; values use shortest round-trip formatting.
pub fn export_external(table: &BTreeMap<String, HiddenState>) -> String {
    let mut out = String::new();
    for (id, h) in table {
        out.push_str(id);
        out.push('\t');
        let vals: Vec<String> = h.0.iter().map(|x| format!("{x:?}")).collect();
        out.push_str(&vals.join(" "));
        out.push('\n');
    }
    out
}

const ENCODER_MAGIC: &[u8; 8] = b"PVENC001";

/// Binary little-endian dump of the parameters; exact round trip.
pub fn write_params(p: &EncoderParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(
        32 + 8 * (p.token_table.as_slice().len() + p.projection.as_slice().len()),
    );
    out.extend_from_slice(ENCODER_MAGIC);
    for dim in [p.token_table.rows(), p.hidden_dim(), p.proto_dim()] {
        out.extend_from_slice(&(dim as u64).to_le_bytes());
    }
    for x in p
        .token_table
        .as_slice()
        .iter()
        .chain(p.projection.as_slice())
    {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn read_params(bytes: &[u8]) -> Result<EncoderParams, EncoderError> {
    let bad = |m: &str| EncoderError::Format(m.to_string());
    if bytes.len() < 32 || &bytes[..8] != ENCODER_MAGIC {
        return Err(bad("not an encoder parameter file"));
    }
    let word =
        |i: usize| u64::from_le_bytes(bytes[8 + 8 * i..16 + 8 * i].try_into().unwrap()) as usize;
    let (buckets, d_h, d_p) = (word(0), word(1), word(2));
    let n_table = buckets * d_h;
    let n_proj = d_p * d_h;
    if bytes.len() != 32 + 8 * (n_table + n_proj) {
        return Err(bad("encoder parameter file has the wrong length"));
    }
    let floats: Vec<f64> = bytes[32..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let (table, proj) = floats.split_at(n_table);
    Ok(EncoderParams {
        token_table: Matrix::from_vec(buckets, d_h, table.to_vec()),
        projection: Matrix::from_vec(d_p, d_h, proj.to_vec()),
    })
}
