//! Multi-head attention and the encoder/decoder blocks built on it.
//!
//! Every sub-layer is post-norm: `NormRelu(x + sublayer(x))`, where NormRelu
//! is a per-token layer normalization followed by ReLU. The decoder's
//! cross-attention takes queries from the moving stream and keys/values from
//! the encoder memory.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embed::TokenSequence;
use crate::error::{shape_err, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Matrix, Scalar};

pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    /// Feedforward hidden width.
    pub hidden: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            heads: 4,
            blocks: 1,
            hidden: 64,
        }
    }
}

impl TransformerConfig {
    pub fn new(dim: usize, heads: usize, blocks: usize) -> Result<Self> {
        let cfg = Self {
            dim,
            heads,
            blocks,
            hidden: 4 * dim,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(shape_err(format!(
                "{} heads do not split width {}",
                self.heads, self.dim
            )));
        }
        if self.blocks == 0 {
            return Err(shape_err("at least one block is required"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

fn uniform<T: Scalar, R: Rng + ?Sized>(rows: usize, cols: usize, fan_in: usize, rng: &mut R) -> Matrix<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| T::from_f64(rng.gen_range(-bound..bound)))
}

/// Projections of one attention sub-layer. `query`, `key` and `value` are
/// `d×d`; column block `h·k..(h+1)·k` is head `h`'s `d×k` projection.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<T = f32> {
    pub query: Matrix<T>,
    pub key: Matrix<T>,
    pub value: Matrix<T>,
    /// Output projection applied to the concatenated heads.
    pub output: Matrix<T>,
    pub norm_gain: Matrix<T>,
    pub norm_bias: Matrix<T>,
}

impl<T: Scalar> AttentionParams<T> {
    pub fn init<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        Self {
            query: uniform(dim, dim, dim, rng),
            key: uniform(dim, dim, dim, rng),
            value: uniform(dim, dim, dim, rng),
            output: uniform(dim, dim, dim, rng),
            norm_gain: Matrix::filled(1, dim, T::one()),
            norm_bias: Matrix::zeros(1, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.query.rows()
    }

    pub(crate) fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix<T>)) {
        f(format!("{prefix}.query"), &self.query);
        f(format!("{prefix}.key"), &self.key);
        f(format!("{prefix}.value"), &self.value);
        f(format!("{prefix}.output"), &self.output);
        f(format!("{prefix}.norm_gain"), &self.norm_gain);
        f(format!("{prefix}.norm_bias"), &self.norm_bias);
    }

    pub(crate) fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix<T>)) {
        f(format!("{prefix}.query"), &mut self.query);
        f(format!("{prefix}.key"), &mut self.key);
        f(format!("{prefix}.value"), &mut self.value);
        f(format!("{prefix}.output"), &mut self.output);
        f(format!("{prefix}.norm_gain"), &mut self.norm_gain);
        f(format!("{prefix}.norm_bias"), &mut self.norm_bias);
    }
}

/// Two affine maps `d → h → d` with a ReLU between.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForwardParams<T = f32> {
    pub w1: Matrix<T>,
    pub b1: Matrix<T>,
    pub w2: Matrix<T>,
    pub b2: Matrix<T>,
    pub norm_gain: Matrix<T>,
    pub norm_bias: Matrix<T>,
}

impl<T: Scalar> FeedForwardParams<T> {
    pub fn init<R: Rng + ?Sized>(dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            w1: uniform(dim, hidden, dim, rng),
            b1: Matrix::zeros(1, hidden),
            w2: uniform(hidden, dim, hidden, rng),
            b2: Matrix::zeros(1, dim),
            norm_gain: Matrix::filled(1, dim, T::one()),
            norm_bias: Matrix::zeros(1, dim),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix<T>)) {
        f(format!("{prefix}.w1"), &self.w1);
        f(format!("{prefix}.b1"), &self.b1);
        f(format!("{prefix}.w2"), &self.w2);
        f(format!("{prefix}.b2"), &self.b2);
        f(format!("{prefix}.norm_gain"), &self.norm_gain);
        f(format!("{prefix}.norm_bias"), &self.norm_bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix<T>)) {
        f(format!("{prefix}.w1"), &mut self.w1);
        f(format!("{prefix}.b1"), &mut self.b1);
        f(format!("{prefix}.w2"), &mut self.w2);
        f(format!("{prefix}.b2"), &mut self.b2);
        f(format!("{prefix}.norm_gain"), &mut self.norm_gain);
        f(format!("{prefix}.norm_bias"), &mut self.norm_bias);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBlock<T = f32> {
    pub self_attention: AttentionParams<T>,
    pub feedforward: FeedForwardParams<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderBlock<T = f32> {
    pub self_attention: AttentionParams<T>,
    pub cross_attention: AttentionParams<T>,
    pub feedforward: FeedForwardParams<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerParams<T = f32> {
    pub config: TransformerConfig,
    pub encoder: Vec<EncoderBlock<T>>,
    pub decoder: Vec<DecoderBlock<T>>,
}

impl<T: Scalar> TransformerParams<T> {
    pub fn init<R: Rng + ?Sized>(config: TransformerConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (d, h) = (config.dim, config.hidden);
        let encoder = (0..config.blocks)
            .map(|_| EncoderBlock {
                self_attention: AttentionParams::init(d, rng),
                feedforward: FeedForwardParams::init(d, h, rng),
            })
            .collect();
        let decoder = (0..config.blocks)
            .map(|_| DecoderBlock {
                self_attention: AttentionParams::init(d, rng),
                cross_attention: AttentionParams::init(d, rng),
                feedforward: FeedForwardParams::init(d, h, rng),
            })
            .collect();
        Ok(Self {
            config,
            encoder,
            decoder,
        })
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix<T>)) {
        for (i, b) in self.encoder.iter().enumerate() {
            b.self_attention
                .visit(&format!("{prefix}.encoder.{i}.self_attention"), f);
            b.feedforward.visit(&format!("{prefix}.encoder.{i}.feedforward"), f);
        }
        for (i, b) in self.decoder.iter().enumerate() {
            b.self_attention
                .visit(&format!("{prefix}.decoder.{i}.self_attention"), f);
            b.cross_attention
                .visit(&format!("{prefix}.decoder.{i}.cross_attention"), f);
            b.feedforward.visit(&format!("{prefix}.decoder.{i}.feedforward"), f);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix<T>)) {
        for (i, b) in self.encoder.iter_mut().enumerate() {
            b.self_attention
                .visit_mut(&format!("{prefix}.encoder.{i}.self_attention"), f);
            b.feedforward.visit_mut(&format!("{prefix}.encoder.{i}.feedforward"), f);
        }
        for (i, b) in self.decoder.iter_mut().enumerate() {
            b.self_attention
                .visit_mut(&format!("{prefix}.decoder.{i}.self_attention"), f);
            b.cross_attention
                .visit_mut(&format!("{prefix}.decoder.{i}.cross_attention"), f);
            b.feedforward.visit_mut(&format!("{prefix}.decoder.{i}.feedforward"), f);
        }
    }

    /// The first `blocks` encoder and decoder blocks as a shallower model.
    pub fn truncated(&self, blocks: usize) -> Self {
        Self {
            config: TransformerConfig { blocks, ..self.config },
            encoder: self.encoder[..blocks].to_vec(),
            decoder: self.decoder[..blocks].to_vec(),
        }
    }
}

/// Dropout context for one forward pass. `rng == None` means inference.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a> Dropout<'a> {
    pub fn inference() -> Self {
        Self { rate: 0.0, rng: None }
    }

    pub fn training(rate: f64, rng: &'a mut ChaCha8Rng) -> Self {
        Self { rate, rng: Some(rng) }
    }

    fn apply<T: Scalar>(&mut self, g: &mut Graph<T>, x: Var) -> Var {
        match self.rng.as_deref_mut() {
            Some(rng) if self.rate > 0.0 => g.dropout(x, self.rate, rng),
            _ => x,
        }
    }
}

/// Attention sub-layer without the residual/NormRelu wrap. Returns the
/// projected output and the node holding the per-head attention weights.
pub(crate) fn attention_graph<T: Scalar>(
    g: &mut Graph<T>,
    queries_from: Var,
    keys_values_from: Var,
    params: &AttentionParams<T>,
    heads: usize,
    dropout: &mut Dropout<'_>,
) -> Result<(Var, Var)> {
    let d = params.dim();
    let (qv, kv) = (g.value(queries_from), g.value(keys_values_from));
    if qv.cols() != d || kv.cols() != d {
        return Err(shape_err(format!(
            "attention of width {d} over {:?} queries and {:?} keys",
            qv.shape(),
            kv.shape()
        )));
    }
    let wq = g.param(&params.query);
    let wk = g.param(&params.key);
    let wv = g.param(&params.value);
    let wc = g.param(&params.output);
    let q = g.matmul(queries_from, wq)?;
    let key = g.matmul(keys_values_from, wk)?;
    let value = g.matmul(keys_values_from, wv)?;
    let rate = dropout.rate;
    let noise = dropout.rng.as_deref_mut().filter(|_| rate > 0.0).map(|r| (rate, r));
    let heads_out = g.multi_head_attention(q, key, value, heads, noise)?;
    Ok((g.matmul(heads_out, wc)?, heads_out))
}

fn norm_relu_graph<T: Scalar>(g: &mut Graph<T>, x: Var, gain: &Matrix<T>, bias: &Matrix<T>) -> Result<Var> {
    let gv = g.param(gain);
    let bv = g.param(bias);
    let y = g.layer_norm(x, gv, bv, T::from_f64(NORM_EPS))?;
    Ok(g.relu(y))
}

fn attention_sublayer<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    memory: Var,
    params: &AttentionParams<T>,
    heads: usize,
    dropout: &mut Dropout<'_>,
) -> Result<Var> {
    let (a, _) = attention_graph(g, x, memory, params, heads, dropout)?;
    let y = g.add(x, a)?;
    norm_relu_graph(g, y, &params.norm_gain, &params.norm_bias)
}

fn feedforward_sublayer<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    params: &FeedForwardParams<T>,
    dropout: &mut Dropout<'_>,
) -> Result<Var> {
    let w1 = g.param(&params.w1);
    let b1 = g.param(&params.b1);
    let w2 = g.param(&params.w2);
    let b2 = g.param(&params.b2);
    let h = g.matmul(x, w1)?;
    let h = g.add_row(h, b1)?;
    let h = g.relu(h);
    let h = dropout.apply(g, h);
    let y = g.matmul(h, w2)?;
    let y = g.add_row(y, b2)?;
    let y = g.add(x, y)?;
    norm_relu_graph(g, y, &params.norm_gain, &params.norm_bias)
}

pub(crate) fn encode_graph<T: Scalar>(
    g: &mut Graph<T>,
    tokens: Var,
    params: &TransformerParams<T>,
    dropout: &mut Dropout<'_>,
) -> Result<Var> {
    let heads = params.config.heads;
    let mut x = tokens;
    for block in &params.encoder {
        x = attention_sublayer(g, x, x, &block.self_attention, heads, dropout)?;
        x = feedforward_sublayer(g, x, &block.feedforward, dropout)?;
    }
    Ok(x)
}

pub(crate) fn decode_graph<T: Scalar>(
    g: &mut Graph<T>,
    tokens: Var,
    memory: Var,
    params: &TransformerParams<T>,
    dropout: &mut Dropout<'_>,
) -> Result<Var> {
    let heads = params.config.heads;
    let mut x = tokens;
    for block in &params.decoder {
        x = attention_sublayer(g, x, x, &block.self_attention, heads, dropout)?;
        x = attention_sublayer(g, x, memory, &block.cross_attention, heads, dropout)?;
        x = feedforward_sublayer(g, x, &block.feedforward, dropout)?;
    }
    Ok(x)
}

fn run<T: Scalar>(
    inputs: &[&TokenSequence<T>],
    build: impl FnOnce(&mut Graph<T>, &[Var]) -> Result<Var>,
) -> Result<TokenSequence<T>> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.matrix().clone())).collect();
    let out = build(&mut g, &vars)?;
    TokenSequence::new(g.value(out).clone())
}

/// Multi-head attention with per-head weights `α_h`, each `n_q×n_kv`.
pub fn multi_head_attention_with_weights<T: Scalar>(
    queries_from: &TokenSequence<T>,
    keys_values_from: &TokenSequence<T>,
    params: &AttentionParams<T>,
    heads: usize,
    mut dropout: Dropout<'_>,
) -> Result<(TokenSequence<T>, Vec<Matrix<T>>)> {
    let mut g = Graph::new();
    let q = g.constant(queries_from.matrix().clone());
    let kv = g.constant(keys_values_from.matrix().clone());
    let (out, node) = attention_graph(&mut g, q, kv, params, heads, &mut dropout)?;
    let weights = g.attention_weights(node).map(<[_]>::to_vec).unwrap_or_default();
    Ok((TokenSequence::new(g.value(out).clone())?, weights))
}

pub fn multi_head_attention<T: Scalar>(
    queries_from: &TokenSequence<T>,
    keys_values_from: &TokenSequence<T>,
    params: &AttentionParams<T>,
    heads: usize,
    dropout: Dropout<'_>,
) -> Result<TokenSequence<T>> {
    Ok(multi_head_attention_with_weights(queries_from, keys_values_from, params, heads, dropout)?.0)
}

/// Per-token layer normalization followed by ReLU.
pub fn norm_relu<T: Scalar>(x: &TokenSequence<T>, gain: &Matrix<T>, bias: &Matrix<T>) -> Result<TokenSequence<T>> {
    run(&[x], |g, v| norm_relu_graph(g, v[0], gain, bias))
}

/// Encoder stack over the fixed-image tokens; the result is the decoder's memory.
pub fn encode<T: Scalar>(
    fixed_tokens: &TokenSequence<T>,
    params: &TransformerParams<T>,
    mut dropout: Dropout<'_>,
) -> Result<TokenSequence<T>> {
    run(&[fixed_tokens], |g, v| encode_graph(g, v[0], params, &mut dropout))
}

pub fn decode<T: Scalar>(
    moving_tokens: &TokenSequence<T>,
    memory: &TokenSequence<T>,
    params: &TransformerParams<T>,
    mut dropout: Dropout<'_>,
) -> Result<TokenSequence<T>> {
    run(&[moving_tokens, memory], |g, v| {
        decode_graph(g, v[0], v[1], params, &mut dropout)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tokens(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> TokenSequence<f64> {
        TokenSequence::new(Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))).unwrap()
    }

    #[test]
    fn identical_tokens_give_uniform_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = AttentionParams::<f64>::init(16, &mut rng);
        let row: Vec<f64> = (0..16).map(|_| rng.gen()).collect();
        let x = TokenSequence::new(Matrix::from_fn(5, 16, |_, c| row[c])).unwrap();
        let (_, alphas) = multi_head_attention_with_weights(&x, &x, &params, 4, Dropout::inference()).unwrap();
        for a in alphas {
            assert!(a.data().iter().all(|&v| (v - 0.2).abs() < 1e-12));
        }
    }

    #[test]
    fn single_key_copies_projected_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = AttentionParams::<f64>::init(8, &mut rng);
        let q = tokens(3, 8, &mut rng);
        let kv = tokens(1, 8, &mut rng);
        let out = multi_head_attention(&q, &kv, &params, 2, Dropout::inference()).unwrap();
        let expected = kv
            .matrix()
            .matmul(&params.value)
            .unwrap()
            .matmul(&params.output)
            .unwrap();
        for r in 0..3 {
            for c in 0..8 {
                assert!((out.matrix().get(r, c) - expected.get(0, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn hand_evaluated_two_token_case() {
        // d = 2, H = 1, k = 2. Identity Q/K/V/W_c, tokens [1,0] and [0,1]:
        // logits = x xᵀ / √2 = [[1/√2, 0], [0, 1/√2]]
        // α row 0 = [e^{1/√2}, 1] / (e^{1/√2} + 1) = [0.669762, 0.330238]
        let eye = Matrix::<f64>::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let params = AttentionParams {
            query: eye.clone(),
            key: eye.clone(),
            value: eye.clone(),
            output: Matrix::from_vec(2, 2, vec![2.0, 0.0, 0.0, -1.0]).unwrap(),
            norm_gain: Matrix::filled(1, 2, 1.0),
            norm_bias: Matrix::zeros(1, 2),
        };
        let x = TokenSequence::new(eye).unwrap();
        let (out, alphas) = multi_head_attention_with_weights(&x, &x, &params, 1, Dropout::inference()).unwrap();
        let a: f64 = 0.669_761_55;
        let b = 1.0 - a;
        assert!((alphas[0].get(0, 0) - a).abs() < 1e-6);
        assert!((alphas[0].get(1, 1) - a).abs() < 1e-6);
        let expected = [2.0 * a, -b, 2.0 * b, -a];
        for (o, e) in out.matrix().data().iter().zip(expected) {
            assert!((o - e).abs() < 1e-6, "{o} vs {e}");
        }
    }

    #[test]
    fn norm_relu_examples() {
        let gain = Matrix::filled(1, 4, 1.0);
        let bias = Matrix::zeros(1, 4);
        let x = TokenSequence::new(Matrix::filled(1, 4, 3.0)).unwrap();
        assert!(norm_relu(&x, &gain, &bias)
            .unwrap()
            .matrix()
            .data()
            .iter()
            .all(|&v| v == 0.0));

        let gain = Matrix::filled(1, 2, 1.0);
        let bias = Matrix::zeros(1, 2);
        let x = TokenSequence::new(Matrix::from_vec(1, 2, vec![-1.0, 1.0]).unwrap()).unwrap();
        let y = norm_relu(&x, &gain, &bias).unwrap();
        let expected = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert_eq!(y.matrix().get(0, 0), 0.0);
        assert!((y.matrix().get(0, 1) - expected).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = tokens(10, 16, &mut rng);
        let mut g = Graph::new();
        let xv = g.constant(x.matrix().clone());
        let gain = g.constant(Matrix::filled(1, 16, 1.0));
        let bias = g.constant(Matrix::zeros(1, 16));
        let y = g.layer_norm(xv, gain, bias, 1e-5).unwrap();
        for r in 0..10 {
            let row = g.value(y).row(r);
            let mean: f64 = row.iter().sum::<f64>() / 16.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            let raw = x.matrix().row(r);
            let raw_mean: f64 = raw.iter().sum::<f64>() / 16.0;
            let raw_var: f64 = raw.iter().map(|v| (v - raw_mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-5);
            // ε shifts the variance to raw_var / (raw_var + ε)
            assert!((var - raw_var / (raw_var + 1e-5)).abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
    }

    #[test]
    fn encode_composes_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = TransformerConfig::new(8, 2, 2).unwrap();
        let params = TransformerParams::<f64>::init(cfg, &mut rng).unwrap();
        let x = tokens(6, 8, &mut rng);
        let full = encode(&x, &params, Dropout::inference()).unwrap();
        let first = encode(&x, &params.truncated(1), Dropout::inference()).unwrap();
        let second_only = TransformerParams {
            config: TransformerConfig { blocks: 1, ..cfg },
            encoder: params.encoder[1..].to_vec(),
            decoder: params.decoder[1..].to_vec(),
        };
        let composed = encode(&first, &second_only, Dropout::inference()).unwrap();
        assert_eq!(full, composed);
        assert_eq!(full.matrix().shape(), (6, 8));
    }

    #[test]
    fn zero_cross_projection_ignores_memory() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = TransformerConfig::new(8, 2, 1).unwrap();
        let mut params = TransformerParams::<f64>::init(cfg, &mut rng).unwrap();
        let x = tokens(4, 8, &mut rng);
        let m1 = tokens(4, 8, &mut rng);
        let m2 = tokens(4, 8, &mut rng);
        let a = decode(&x, &m1, &params, Dropout::inference()).unwrap();
        let b = decode(&x, &m2, &params, Dropout::inference()).unwrap();
        assert_ne!(a, b);
        params.decoder[0].cross_attention.output = Matrix::zeros(8, 8);
        let a = decode(&x, &m1, &params, Dropout::inference()).unwrap();
        let b = decode(&x, &m2, &params, Dropout::inference()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shape_errors_and_empty_keys() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = AttentionParams::<f64>::init(8, &mut rng);
        let q = tokens(3, 8, &mut rng);
        let bad = tokens(3, 6, &mut rng);
        assert!(multi_head_attention(&q, &bad, &params, 2, Dropout::inference()).is_err());
        let empty = TokenSequence::new(Matrix::zeros(0, 8)).unwrap();
        assert!(multi_head_attention(&q, &empty, &params, 2, Dropout::inference()).is_err());
    }

    #[test]
    fn training_dropout_changes_output_but_inference_is_pure() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = TransformerConfig::new(8, 2, 1).unwrap();
        let params = TransformerParams::<f64>::init(cfg, &mut rng).unwrap();
        let x = tokens(4, 8, &mut rng);
        let a = encode(&x, &params, Dropout::inference()).unwrap();
        let b = encode(&x, &params, Dropout::inference()).unwrap();
        assert_eq!(a, b);
        let mut drng = ChaCha8Rng::seed_from_u64(7);
        let c = encode(&x, &params, Dropout::training(0.5, &mut drng)).unwrap();
        assert_ne!(a, c);
    }
}
