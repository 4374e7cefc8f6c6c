//! Learnable tokens, their hypernetwork MLPs and the auxiliary depth head.
//!
//! All parameters live in one flat `f64` vector. The order is fixed and is
//! also the checkpoint payload order:
//!
//! 1. prompt tokens, `num_prompts x token_dim`
//! 2. semantic tokens (conservative, neutral, aggressive), `3 x token_dim`
//! 3. geometric tokens (slope, elevation), `2 x token_dim`
//! 4. five MLPs in head order (three semantic, slope, elevation), each
//!    `w1 (hidden x token_dim)`, `b1 (hidden)`, `w2 (feature_dim x hidden)`, `b2 (feature_dim)`
//! 5. depth head weights (`feature_dim`) followed by its bias
//!
//! Matrices are row-major.
//!
//! Checkpoint layout (little-endian): magic `TMKB`, `u32` format version,
//! five `u32` dimensions (`num_prompts`, `token_dim`, `feature_dim`, `hidden`,
//! `num_heads`), `u64` parameter count, then the parameters as `f64`.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::features::FEATURE_DIM;
use crate::error::{Error, Result};
use crate::pdt_losses::NUM_HYPOTHESES;

pub const NUM_GEOMETRIC: usize = 2;
pub const NUM_HEADS: usize = NUM_HYPOTHESES + NUM_GEOMETRIC;
pub const HEAD_SLOPE: usize = NUM_HYPOTHESES;
pub const HEAD_ELEVATION: usize = NUM_HYPOTHESES + 1;

const MAGIC: &[u8; 4] = b"TMKB";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelDims {
    pub num_prompts: usize,
    pub token_dim: usize,
    pub hidden: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            num_prompts: 4,
            token_dim: 32,
            hidden: 32,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.num_prompts == 0 || self.token_dim == 0 || self.hidden == 0 {
            return Err(Error::InvalidParameter(format!(
                "model dimensions must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Offsets of every parameter block inside the flat vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Layout {
    pub dims: ModelDims,
    pub prompts: usize,
    pub tokens: usize,
    pub mlps: usize,
    pub mlp_len: usize,
    pub depth: usize,
    pub total: usize,
}

/// Offsets inside one MLP block.
#[derive(Clone, Copy, Debug)]
pub(crate) struct MlpLayout {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
    pub end: usize,
}

impl Layout {
    pub fn new(dims: ModelDims) -> Self {
        let d = dims.token_dim;
        let hdn = dims.hidden;
        let prompts = 0;
        let tokens = prompts + dims.num_prompts * d;
        let mlps = tokens + NUM_HEADS * d;
        let mlp_len = hdn * d + hdn + FEATURE_DIM * hdn + FEATURE_DIM;
        let depth = mlps + NUM_HEADS * mlp_len;
        let total = depth + FEATURE_DIM + 1;
        Self {
            dims,
            prompts,
            tokens,
            mlps,
            mlp_len,
            depth,
            total,
        }
    }

    pub fn token(&self, head: usize) -> std::ops::Range<usize> {
        let start = self.tokens + head * self.dims.token_dim;
        start..start + self.dims.token_dim
    }

    pub fn prompt(&self, i: usize) -> std::ops::Range<usize> {
        let start = self.prompts + i * self.dims.token_dim;
        start..start + self.dims.token_dim
    }

    pub fn mlp(&self, head: usize) -> MlpLayout {
        let base = self.mlps + head * self.mlp_len;
        let d = self.dims.token_dim;
        let hdn = self.dims.hidden;
        let w1 = base;
        let b1 = w1 + hdn * d;
        let w2 = b1 + hdn;
        let b2 = w2 + FEATURE_DIM * hdn;
        MlpLayout {
            w1,
            b1,
            w2,
            b2,
            end: b2 + FEATURE_DIM,
        }
    }

    /// Whether parameter `i` belongs to the depth head group.
    pub fn is_depth_param(&self, i: usize) -> bool {
        i >= self.depth
    }
}

/// The complete trainable state of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBank {
    pub(crate) layout: Layout,
    pub(crate) params: Vec<f64>,
}

impl TokenBank {
    /// Seeded initialisation: tokens uniform in `[-1, 1]`, weight matrices
    /// uniform in `[-1, 1] / sqrt(fan_in)`, biases zero.
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let layout = Layout::new(dims);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; layout.total];
        for v in &mut params[layout.prompts..layout.mlps] {
            *v = rng.random_range(-1.0..=1.0);
        }
        let w1_scale = 1.0 / (dims.token_dim as f64).sqrt();
        let w2_scale = 1.0 / (dims.hidden as f64).sqrt();
        for head in 0..NUM_HEADS {
            let m = layout.mlp(head);
            for v in &mut params[m.w1..m.b1] {
                *v = w1_scale * rng.random_range(-1.0..=1.0);
            }
            for v in &mut params[m.w2..m.b2] {
                *v = w2_scale * rng.random_range(-1.0..=1.0);
            }
        }
        let depth_scale = 1.0 / (FEATURE_DIM as f64).sqrt();
        for v in &mut params[layout.depth..layout.depth + FEATURE_DIM] {
            *v = depth_scale * rng.random_range(-1.0..=1.0);
        }
        Ok(Self { layout, params })
    }

    pub fn dims(&self) -> ModelDims {
        self.layout.dims
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn token(&self, head: usize) -> &[f64] {
        &self.params[self.layout.token(head)]
    }

    pub fn prompt(&self, i: usize) -> &[f64] {
        &self.params[self.layout.prompt(i)]
    }

    /// Output layer (`w2` and `b2`) of a head's MLP.
    pub fn mlp_output_mut(&mut self, head: usize) -> &mut [f64] {
        let m = self.layout.mlp(head);
        &mut self.params[m.w2..m.end]
    }

    pub fn depth_head(&self) -> &[f64] {
        &self.params[self.layout.depth..]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let d = self.layout.dims;
        let mut out = Vec::with_capacity(8 + 5 * 4 + 8 + 8 * self.params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for v in [d.num_prompts, d.token_dim, FEATURE_DIM, d.hidden, NUM_HEADS] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < 36 || &bytes[..4] != MAGIC {
            return Err(bad("missing TMKB magic"));
        }
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}"
            )));
        }
        let [num_prompts, token_dim, feature_dim, hidden, heads] =
            [8, 12, 16, 20, 24].map(|i| u32_at(i) as usize);
        if feature_dim != FEATURE_DIM || heads != NUM_HEADS {
            return Err(Error::Checkpoint(format!(
                "feature_dim {feature_dim} / heads {heads} do not match this build ({FEATURE_DIM} / {NUM_HEADS})"
            )));
        }
        let dims = ModelDims {
            num_prompts,
            token_dim,
            hidden,
        };
        dims.validate()?;
        let layout = Layout::new(dims);
        let count = u64::from_le_bytes(bytes[28..36].try_into().unwrap());
        if count != layout.total as u64 {
            return Err(Error::Checkpoint(format!(
                "parameter count {count} does not match dimensions (expected {})",
                layout.total
            )));
        }
        let payload = &bytes[36..];
        if payload.len() != 8 * layout.total {
            return Err(Error::Checkpoint(format!(
                "payload is {} bytes, expected {}",
                payload.len(),
                8 * layout.total
            )));
        }
        let params: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if params.iter().any(|p| !p.is_finite()) {
            return Err(bad("non-finite parameter"));
        }
        Ok(Self { layout, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}
