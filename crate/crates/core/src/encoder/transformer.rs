//! Small pre-LN transformer encoder built on the autodiff tape.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Matrix, ParamId, ParamStore, Var};
use crate::error::{IrcError, Result};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub max_positions: usize,
}

impl EncoderConfig {
    pub fn desk_default(vocab_size: usize) -> Self {
        Self { vocab_size, dim: 64, layers: 2, heads: 4, ff_dim: 256, max_positions: 512 }
    }

    pub fn validate(&self, max_sequence_length: usize) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(IrcError::Config(format!(
                "dim ({}) must be positive and divisible by heads ({})",
                self.dim, self.heads
            )));
        }
        if self.max_positions < max_sequence_length {
            return Err(IrcError::Config(format!(
                "max_positions ({}) is below max_sequence_length ({max_sequence_length})",
                self.max_positions
            )));
        }
        if self.vocab_size == 0 || self.ff_dim == 0 {
            return Err(IrcError::Config("vocab_size and ff_dim must be positive".into()));
        }
        Ok(())
    }
}

pub(crate) fn xavier(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

fn normal(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let dist = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

/// Affine map `x W + b`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: store.add(format!("{name}.weight"), xavier(rng, inputs, outputs)),
            bias: store.add(format!("{name}.bias"), Array2::zeros((1, outputs))),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

#[derive(Clone, Copy, Debug)]
struct LayerNorm {
    gain: ParamId,
    bias: ParamId,
}

impl LayerNorm {
    fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Array2::ones((1, dim))),
            bias: store.add(format!("{name}.bias"), Array2::zeros((1, dim))),
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let n = g.layer_norm_rows(x, LN_EPS);
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        let y = g.mul_row(n, gain);
        g.add_row(y, bias)
    }
}

#[derive(Clone, Copy, Debug)]
struct Block {
    attn_norm: LayerNorm,
    query: Linear,
    key: Linear,
    value: Linear,
    output: Linear,
    ff_norm: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
}

/// Knobs for a single forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions {
    /// Drop the positional table (diagnostic mode for permutation checks).
    pub use_positions: bool,
    /// Per-token multiplicative gate on the token embeddings, shape `(n, 1)`.
    pub token_gate: Option<Var>,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self { use_positions: true, token_gate: None }
    }
}

impl ForwardOptions {
    pub fn gated(gate: Var) -> Self {
        Self { token_gate: Some(gate), ..Self::default() }
    }

    pub fn without_positions() -> Self {
        Self { use_positions: false, ..Self::default() }
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    tokens: ParamId,
    positions: ParamId,
    blocks: Vec<Block>,
    final_norm: LayerNorm,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, prefix: &str, config: EncoderConfig, rng: &mut impl Rng) -> Self {
        let d = config.dim;
        let tokens = store.add(format!("{prefix}.tokens"), normal(rng, config.vocab_size, d, 0.1));
        let positions = store.add(format!("{prefix}.positions"), normal(rng, config.max_positions, d, 0.1));
        let blocks = (0..config.layers)
            .map(|l| {
                let n = format!("{prefix}.layer{l}");
                Block {
                    attn_norm: LayerNorm::new(store, &format!("{n}.attn_norm"), d),
                    query: Linear::new(store, &format!("{n}.query"), d, d, rng),
                    key: Linear::new(store, &format!("{n}.key"), d, d, rng),
                    value: Linear::new(store, &format!("{n}.value"), d, d, rng),
                    output: Linear::new(store, &format!("{n}.output"), d, d, rng),
                    ff_norm: LayerNorm::new(store, &format!("{n}.ff_norm"), d),
                    ff_in: Linear::new(store, &format!("{n}.ff_in"), d, config.ff_dim, rng),
                    ff_out: Linear::new(store, &format!("{n}.ff_out"), config.ff_dim, d, rng),
                }
            })
            .collect();
        let final_norm = LayerNorm::new(store, &format!("{prefix}.final_norm"), d);
        Self { config, tokens, positions, blocks, final_norm }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Per-token output vectors, shape `(token_ids.len(), dim)`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        token_ids: &[u32],
        options: ForwardOptions,
    ) -> Result<Var> {
        let n = token_ids.len();
        if n == 0 {
            return Err(IrcError::InvalidInput("cannot encode an empty sequence".into()));
        }
        if n > self.config.max_positions {
            return Err(IrcError::InvalidInput(format!(
                "sequence of {n} tokens exceeds max_positions {}",
                self.config.max_positions
            )));
        }
        let rows = token_ids
            .iter()
            .map(|&id| {
                if (id as usize) < self.config.vocab_size {
                    Ok(id as usize)
                } else {
                    Err(IrcError::TokenOutOfVocabulary { id, vocab_size: self.config.vocab_size })
                }
            })
            .collect::<Result<Vec<_>>>()?;

        let table = g.param(store, self.tokens);
        let mut x = g.gather_rows(table, &rows);
        if let Some(gate) = options.token_gate {
            x = g.mul_col(x, gate);
        }
        if options.use_positions {
            let pos_table = g.param(store, self.positions);
            let pos = g.gather_rows(pos_table, &(0..n).collect::<Vec<_>>());
            x = g.add(x, pos);
        }

        let heads = self.config.heads;
        let head_dim = self.config.dim / heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        for block in &self.blocks {
            let h = block.attn_norm.forward(g, store, x);
            let q = block.query.forward(g, store, h);
            let k = block.key.forward(g, store, h);
            let v = block.value.forward(g, store, h);
            let mut outs = Vec::with_capacity(heads);
            for head in 0..heads {
                let qh = g.slice_cols(q, head * head_dim, head_dim);
                let kh = g.slice_cols(k, head * head_dim, head_dim);
                let vh = g.slice_cols(v, head * head_dim, head_dim);
                let scores = g.matmul_t(qh, kh);
                let scores = g.scale(scores, scale);
                let attn = g.softmax_rows(scores);
                outs.push(g.matmul(attn, vh));
            }
            let joined = g.concat_cols(&outs);
            let attended = block.output.forward(g, store, joined);
            x = g.add(x, attended);

            let h = block.ff_norm.forward(g, store, x);
            let inner = block.ff_in.forward(g, store, h);
            let inner = g.gelu(inner);
            let ff = block.ff_out.forward(g, store, inner);
            x = g.add(x, ff);
        }
        Ok(self.final_norm.forward(g, store, x))
    }

    /// Inference-only convenience: runs a fresh graph and returns the output matrix.
    pub fn encode(&self, store: &ParamStore, token_ids: &[u32]) -> Result<Matrix> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, store, token_ids, ForwardOptions::default())?;
        Ok(g.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(vocab: usize, dim: usize) -> (ParamStore, Encoder) {
        let mut store = ParamStore::new();
        let cfg = EncoderConfig { vocab_size: vocab, dim, layers: 2, heads: 4, ff_dim: 2 * dim, max_positions: 32 };
        let enc = Encoder::new(&mut store, "enc", cfg, &mut ChaCha8Rng::seed_from_u64(3));
        (store, enc)
    }

    #[test]
    fn output_shape_and_determinism() {
        let (store, enc) = small(20, 16);
        let ids = [2, 5, 9, 3, 7];
        let a = enc.encode(&store, &ids).unwrap();
        let b = enc.encode(&store, &ids).unwrap();
        assert_eq!(a.dim(), (5, 16));
        assert_eq!(a, b);
    }

    #[test]
    fn out_of_vocabulary_id_is_rejected() {
        let (store, enc) = small(20, 16);
        assert!(matches!(
            enc.encode(&store, &[2, 20]),
            Err(IrcError::TokenOutOfVocabulary { id: 20, vocab_size: 20 })
        ));
    }

    #[test]
    fn without_positions_the_encoder_is_permutation_equivariant() {
        let (store, enc) = small(20, 16);
        let ids = [4, 11, 6, 12, 13, 7, 6, 14, 15, 7];
        // Swap the two sentence blocks [6 12 13 7] and [6 14 15 7].
        let swapped = [4, 11, 6, 14, 15, 7, 6, 12, 13, 7];
        let run = |ids: &[u32]| {
            let mut g = Graph::new();
            let v = enc.forward(&mut g, &store, ids, ForwardOptions::without_positions()).unwrap();
            g.value(v).clone()
        };
        let a = run(&ids);
        let b = run(&swapped);
        for (i, j) in [(2, 6), (6, 2)] {
            for c in 0..16 {
                assert!((a[[i, c]] - b[[j, c]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig::desk_default(100).validate(512).is_ok());
        let bad = EncoderConfig { dim: 30, heads: 4, ..EncoderConfig::desk_default(100) };
        assert!(bad.validate(512).is_err());
        let short = EncoderConfig { max_positions: 128, ..EncoderConfig::desk_default(100) };
        assert!(short.validate(512).is_err());
    }
}
