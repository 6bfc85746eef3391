//! The shared transformer feature encoder.
//!
//! Post-layer-norm BERT layout: embeddings (token + learned absolute
//! position + segment) are summed and normalized, then each layer applies
//! masked multi-head self-attention and a GELU feed-forward block, each
//! wrapped as `layer_norm(x + dropout(sublayer(x)))`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Param, Parameters, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::tokenizer::Encoding;

pub const LAYER_NORM_EPS: f64 = 1e-12;
/// Added to attention logits of padding keys.
pub const MASK_NEG: f64 = -1e9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub num_segments: usize,
    pub dropout_rate: f64,
    pub init_std: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            num_layers: 2,
            hidden_dim: 64,
            num_heads: 4,
            ffn_dim: 256,
            vocab_size: 1024,
            max_seq_len: 128,
            num_segments: 2,
            dropout_rate: 0.1,
            init_std: 0.02,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.hidden_dim == 0 || self.num_heads == 0 || self.hidden_dim % self.num_heads != 0 {
            return fail(format!(
                "hidden_dim {} must be a positive multiple of num_heads {}",
                self.hidden_dim, self.num_heads
            ));
        }
        if self.max_seq_len < 3 {
            return fail(format!("max_seq_len {} < 3", self.max_seq_len));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if self.vocab_size == 0 || self.ffn_dim == 0 || self.num_segments == 0 {
            return fail("vocab_size, ffn_dim and num_segments must be positive".into());
        }
        if !(self.init_std >= 0.0) {
            return fail(format!("init_std {} must be >= 0", self.init_std));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    /// Closed-form parameter count.
    pub fn parameter_count(&self) -> usize {
        let (h, f) = (self.hidden_dim, self.ffn_dim);
        let embeddings = (self.vocab_size + self.max_seq_len + self.num_segments) * h + 2 * h;
        // the key projection has no bias: it would shift every logit of a
        // query by the same amount and always receive zero gradient
        let attention = 4 * h * h + 3 * h + 2 * h;
        let ffn = (h * f + f) + (f * h + h) + 2 * h;
        embeddings + self.num_layers * (attention + ffn)
    }
}

/// Forward-pass mode. Dropout is active only in `Train`, with masks drawn
/// from a stream keyed by `(seed, step, layer)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Eval,
    Train { seed: u64, step: u64 },
}

/// Padded model inputs for `batch` sequences of `seq_len` positions.
#[derive(Clone, Debug, PartialEq)]
pub struct InputBatch {
    pub batch: usize,
    pub seq_len: usize,
    pub token_ids: Vec<usize>,
    pub segment_ids: Vec<usize>,
    pub attention_mask: Vec<u8>,
}

impl InputBatch {
    /// Stacks encodings, dropping trailing columns that are padding in
    /// every row.
    pub fn from_encodings(encodings: &[&Encoding]) -> Result<Self> {
        let Some(first) = encodings.first() else {
            return Err(Error::Data("empty batch".into()));
        };
        let full = first.len();
        if encodings.iter().any(|e| e.len() != full) {
            return Err(Error::shape("encodings in one batch must share a length"));
        }
        let seq_len = encodings
            .iter()
            .map(|e| e.attention_mask.iter().rposition(|&m| m == 1).map_or(0, |p| p + 1))
            .max()
            .unwrap_or(0)
            .max(1);
        let mut out = InputBatch {
            batch: encodings.len(),
            seq_len,
            token_ids: Vec::with_capacity(encodings.len() * seq_len),
            segment_ids: Vec::with_capacity(encodings.len() * seq_len),
            attention_mask: Vec::with_capacity(encodings.len() * seq_len),
        };
        for e in encodings {
            out.token_ids.extend_from_slice(&e.token_ids[..seq_len]);
            out.segment_ids.extend_from_slice(&e.segment_ids[..seq_len]);
            out.attention_mask.extend_from_slice(&e.attention_mask[..seq_len]);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub query_w: Param,
    pub query_b: Param,
    pub key_w: Param,
    pub value_w: Param,
    pub value_b: Param,
    pub output_w: Param,
    pub output_b: Param,
    pub attn_ln_gamma: Param,
    pub attn_ln_beta: Param,
    pub ffn_in_w: Param,
    pub ffn_in_b: Param,
    pub ffn_out_w: Param,
    pub ffn_out_b: Param,
    pub ffn_ln_gamma: Param,
    pub ffn_ln_beta: Param,
}

impl LayerParams {
    fn all(&self) -> [&Param; 15] {
        [
            &self.query_w,
            &self.query_b,
            &self.key_w,
            &self.value_w,
            &self.value_b,
            &self.output_w,
            &self.output_b,
            &self.attn_ln_gamma,
            &self.attn_ln_beta,
            &self.ffn_in_w,
            &self.ffn_in_b,
            &self.ffn_out_w,
            &self.ffn_out_b,
            &self.ffn_ln_gamma,
            &self.ffn_ln_beta,
        ]
    }

    fn all_mut(&mut self) -> [&mut Param; 15] {
        [
            &mut self.query_w,
            &mut self.query_b,
            &mut self.key_w,
            &mut self.value_w,
            &mut self.value_b,
            &mut self.output_w,
            &mut self.output_b,
            &mut self.attn_ln_gamma,
            &mut self.attn_ln_beta,
            &mut self.ffn_in_w,
            &mut self.ffn_in_b,
            &mut self.ffn_out_w,
            &mut self.ffn_out_b,
            &mut self.ffn_ln_gamma,
            &mut self.ffn_ln_beta,
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub token_emb: Param,
    pub position_emb: Param,
    pub segment_emb: Param,
    pub emb_ln_gamma: Param,
    pub emb_ln_beta: Param,
    pub layers: Vec<LayerParams>,
}

/// Truncated normal (mean 0, std `std`, cut at two standard deviations).
pub(crate) fn truncated_normal(shape: &[usize], std: f64, seed: u64, name: &str) -> Tensor {
    let mut r = rng::stream(seed, name, &[]);
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(&mut r);
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

impl EncoderParams {
    /// Random initialization. Each tensor draws from its own stream keyed by
    /// its name, so the result does not depend on construction order.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (h, f) = (config.hidden_dim, config.ffn_dim);
        let weight = |name: String, shape: &[usize]| {
            let t = truncated_normal(shape, config.init_std, seed, &name);
            Param::new(name, t)
        };
        let fill = |name: String, n: usize, v: f64| Param::new(name, Tensor::full(&[n], v));
        let layers = (0..config.num_layers)
            .map(|i| {
                let p = |s: &str| format!("encoder.layer.{i}.{s}");
                LayerParams {
                    query_w: weight(p("attention.query.weight"), &[h, h]),
                    query_b: fill(p("attention.query.bias"), h, 0.0),
                    key_w: weight(p("attention.key.weight"), &[h, h]),
                    value_w: weight(p("attention.value.weight"), &[h, h]),
                    value_b: fill(p("attention.value.bias"), h, 0.0),
                    output_w: weight(p("attention.output.weight"), &[h, h]),
                    output_b: fill(p("attention.output.bias"), h, 0.0),
                    attn_ln_gamma: fill(p("attention.ln.gamma"), h, 1.0),
                    attn_ln_beta: fill(p("attention.ln.beta"), h, 0.0),
                    ffn_in_w: weight(p("ffn.in.weight"), &[h, f]),
                    ffn_in_b: fill(p("ffn.in.bias"), f, 0.0),
                    ffn_out_w: weight(p("ffn.out.weight"), &[f, h]),
                    ffn_out_b: fill(p("ffn.out.bias"), h, 0.0),
                    ffn_ln_gamma: fill(p("ffn.ln.gamma"), h, 1.0),
                    ffn_ln_beta: fill(p("ffn.ln.beta"), h, 0.0),
                }
            })
            .collect();
        Ok(EncoderParams {
            token_emb: weight("encoder.embeddings.token".into(), &[config.vocab_size, h]),
            position_emb: weight("encoder.embeddings.position".into(), &[config.max_seq_len, h]),
            segment_emb: weight("encoder.embeddings.segment".into(), &[config.num_segments, h]),
            emb_ln_gamma: fill("encoder.embeddings.ln.gamma".into(), h, 1.0),
            emb_ln_beta: fill("encoder.embeddings.ln.beta".into(), h, 0.0),
            layers,
            config: config.clone(),
        })
    }

    /// Hidden states `[B, T, H]`; position 0 holds the `[CLS]` representation.
    pub fn forward(&self, tape: &mut Tape, input: &InputBatch, mode: Mode) -> Result<Var> {
        let cfg = &self.config;
        let (b, t, h) = (input.batch, input.seq_len, cfg.hidden_dim);
        if t > cfg.max_seq_len {
            return Err(Error::shape(format!(
                "sequence length {t} exceeds max_seq_len {}",
                cfg.max_seq_len
            )));
        }
        let n = b * t;
        if input.token_ids.len() != n || input.segment_ids.len() != n || input.attention_mask.len() != n {
            return Err(Error::shape("input batch fields do not match batch x seq_len"));
        }
        let dropout = match mode {
            Mode::Train { seed, step } if cfg.dropout_rate > 0.0 => Some((seed, step)),
            _ => None,
        };

        let tok_table = tape.param(&self.token_emb);
        let pos_table = tape.param(&self.position_emb);
        let seg_table = tape.param(&self.segment_emb);
        let tok = tape.gather(tok_table, &input.token_ids)?;
        let positions: Vec<usize> = (0..n).map(|i| i % t).collect();
        let pos = tape.gather(pos_table, &positions)?;
        let seg = tape.gather(seg_table, &input.segment_ids)?;
        let x = tape.add(tok, pos)?;
        let x = tape.add(x, seg)?;
        let x = self.layer_norm(tape, x, &self.emb_ln_gamma, &self.emb_ln_beta)?;
        let mut x = apply_dropout(tape, x, cfg.dropout_rate, dropout, 0, 0)?;

        let mask = if self.layers.is_empty() {
            None
        } else {
            Some(attention_bias(input, cfg.num_heads))
        };
        for (i, layer) in self.layers.iter().enumerate() {
            let slot = i as u64 + 1;
            let mask = tape.constant(mask.clone().expect("layers present"));
            let attn = self.attention(tape, layer, x, mask, b, t)?;
            let attn = apply_dropout(tape, attn, cfg.dropout_rate, dropout, slot, 0)?;
            let res = tape.add(x, attn)?;
            x = self.layer_norm(tape, res, &layer.attn_ln_gamma, &layer.attn_ln_beta)?;

            let hdn = linear(tape, x, &layer.ffn_in_w, &layer.ffn_in_b)?;
            let hdn = tape.gelu(hdn);
            let out = linear(tape, hdn, &layer.ffn_out_w, &layer.ffn_out_b)?;
            let out = apply_dropout(tape, out, cfg.dropout_rate, dropout, slot, 1)?;
            let res = tape.add(x, out)?;
            x = self.layer_norm(tape, res, &layer.ffn_ln_gamma, &layer.ffn_ln_beta)?;
        }
        tape.reshape(x, &[b, t, h])
    }

    fn layer_norm(&self, tape: &mut Tape, x: Var, gamma: &Param, beta: &Param) -> Result<Var> {
        let g = tape.param(gamma);
        let bt = tape.param(beta);
        tape.layer_norm(x, g, bt, LAYER_NORM_EPS)
    }

    fn attention(&self, tape: &mut Tape, layer: &LayerParams, x: Var, bias: Var, b: usize, t: usize) -> Result<Var> {
        let cfg = &self.config;
        let (nh, d) = (cfg.num_heads, cfg.head_dim());
        let q = linear(tape, x, &layer.query_w, &layer.query_b)?;
        let kw = tape.param(&layer.key_w);
        let k = tape.matmul(x, kw)?;
        let v = linear(tape, x, &layer.value_w, &layer.value_b)?;
        let split = [b, t, nh, d];
        let q = tape.reshape(q, &split)?;
        let q = tape.permute(q, &[0, 2, 1, 3])?; // [B, nh, T, d]
        let k = tape.reshape(k, &split)?;
        let k = tape.permute(k, &[0, 2, 3, 1])?; // [B, nh, d, T]
        let v = tape.reshape(v, &split)?;
        let v = tape.permute(v, &[0, 2, 1, 3])?;
        let scores = tape.matmul(q, k)?;
        let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
        let scores = tape.add(scores, bias)?;
        let probs = tape.softmax(scores, 3)?;
        let ctx = tape.matmul(probs, v)?; // [B, nh, T, d]
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[b * t, nh * d])?;
        linear(tape, ctx, &layer.output_w, &layer.output_b)
    }
}

/// `x @ w + b` for `x: [N, in]`.
pub(crate) fn linear(tape: &mut Tape, x: Var, w: &Param, b: &Param) -> Result<Var> {
    let wv = tape.param(w);
    let bv = tape.param(b);
    let y = tape.matmul(x, wv)?;
    tape.add(y, bv)
}

/// Additive attention bias `[B, heads, T, T]`: `MASK_NEG` on padding keys.
fn attention_bias(input: &InputBatch, heads: usize) -> Tensor {
    let (b, t) = (input.batch, input.seq_len);
    let mut data = Vec::with_capacity(b * heads * t * t);
    for bi in 0..b {
        let row: Vec<f64> = input.attention_mask[bi * t..(bi + 1) * t]
            .iter()
            .map(|&m| if m == 1 { 0.0 } else { MASK_NEG })
            .collect();
        for _ in 0..heads * t {
            data.extend_from_slice(&row);
        }
    }
    Tensor::new(vec![b, heads, t, t], data).expect("shape")
}

fn apply_dropout(tape: &mut Tape, x: Var, rate: f64, train: Option<(u64, u64)>, layer: u64, site: u64) -> Result<Var> {
    let Some((seed, step)) = train else {
        return Ok(x);
    };
    let mut r = rng::stream(seed, "dropout", &[step, layer, site]);
    let keep = 1.0 / (1.0 - rate);
    let n = tape.value(x).len();
    let mask: Vec<f64> = (0..n)
        .map(|_| if r.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    let m = tape.constant(Tensor::new(tape.shape(x).to_vec(), mask)?);
    tape.mul(x, m)
}

impl Parameters for EncoderParams {
    fn params(&self) -> Vec<&Param> {
        let mut out = vec![
            &self.token_emb,
            &self.position_emb,
            &self.segment_emb,
            &self.emb_ln_gamma,
            &self.emb_ln_beta,
        ];
        for l in &self.layers {
            out.extend(l.all());
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = vec![
            &mut self.token_emb,
            &mut self.position_emb,
            &mut self.segment_emb,
            &mut self.emb_ln_gamma,
            &mut self.emb_ln_beta,
        ];
        for l in &mut self.layers {
            out.extend(l.all_mut());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::GradCheck;

    fn small_config() -> EncoderConfig {
        EncoderConfig {
            num_layers: 1,
            hidden_dim: 8,
            num_heads: 2,
            ffn_dim: 16,
            vocab_size: 12,
            max_seq_len: 16,
            num_segments: 2,
            dropout_rate: 0.0,
            init_std: 0.5,
        }
    }

    fn batch(rows: &[&[usize]], t: usize) -> InputBatch {
        let mut ib = InputBatch {
            batch: rows.len(),
            seq_len: t,
            token_ids: Vec::new(),
            segment_ids: Vec::new(),
            attention_mask: Vec::new(),
        };
        for r in rows {
            for i in 0..t {
                ib.token_ids.push(r.get(i).copied().unwrap_or(0));
                ib.segment_ids.push(usize::from(i >= 3 && i < r.len()));
                ib.attention_mask.push(u8::from(i < r.len()));
            }
        }
        ib
    }

    fn eval(params: &EncoderParams, input: &InputBatch) -> Tensor {
        let mut tape = Tape::new();
        let out = params.forward(&mut tape, input, Mode::Eval).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn desk_config_parameter_count() {
        // embeddings: (1024 + 128 + 2) * 64 + 128 = 73_984
        // per layer: 4 * 64*64 + 3 * 64 + 128 + (64*256 + 256) + (256*64 + 64) + 128 = 49_920
        let cfg = EncoderConfig::default();
        assert_eq!(cfg.parameter_count(), 73_984 + 2 * 49_920);
        let params = EncoderParams::init(&cfg, 0).unwrap();
        assert_eq!(params.num_parameters(), cfg.parameter_count());
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let cfg = small_config();
        let a = EncoderParams::init(&cfg, 9).unwrap();
        let b = EncoderParams::init(&cfg, 9).unwrap();
        assert_eq!(a, b);
        let c = EncoderParams::init(&cfg, 10).unwrap();
        assert_ne!(a, c);
        for p in a.params() {
            assert!(p.value.data().iter().all(|v| v.abs() <= 2.0 * cfg.init_std));
        }
    }

    #[test]
    fn zero_init_std() {
        let cfg = EncoderConfig {
            init_std: 0.0,
            ..small_config()
        };
        let p = EncoderParams::init(&cfg, 1).unwrap();
        assert!(p.layers[0].query_w.value.data().iter().all(|&v| v == 0.0));
        assert!(p.layers[0].ffn_out_w.value.data().iter().all(|&v| v == 0.0));
        assert!(p.emb_ln_gamma.value.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn zero_layers_is_normalized_embedding_sum() {
        let cfg = EncoderConfig {
            num_layers: 0,
            ..small_config()
        };
        let p = EncoderParams::init(&cfg, 3).unwrap();
        let input = batch(&[&[2, 5, 7, 3]], 4);
        let out = eval(&p, &input);
        let h = cfg.hidden_dim;
        for pos in 0..4 {
            let row: Vec<f64> = (0..h)
                .map(|j| {
                    p.token_emb.value.data()[input.token_ids[pos] * h + j]
                        + p.position_emb.value.data()[pos * h + j]
                        + p.segment_emb.value.data()[input.segment_ids[pos] * h + j]
                })
                .collect();
            let mean = row.iter().sum::<f64>() / h as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / h as f64;
            for j in 0..h {
                let expected = (row[j] - mean) / (var + LAYER_NORM_EPS).sqrt();
                assert!((out.data()[pos * h + j] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn output_shape() {
        let cfg = EncoderConfig {
            vocab_size: 50,
            ..EncoderConfig::default()
        };
        let p = EncoderParams::init(&cfg, 0).unwrap();
        let rows: Vec<Vec<usize>> = (0..2).map(|r| (0..16).map(|i| (i * 3 + r) % 50).collect()).collect();
        let input = batch(&[&rows[0], &rows[1]], 16);
        assert_eq!(eval(&p, &input).shape(), &[2, 16, 64]);
    }

    #[test]
    fn padding_does_not_change_real_positions() {
        for (seed, len, extra) in [(1u64, 3usize, 5usize), (2, 7, 1), (3, 1, 9), (4, 10, 6)] {
            let cfg = EncoderConfig {
                num_layers: 2,
                ..small_config()
            };
            let p = EncoderParams::init(&cfg, seed).unwrap();
            let ids: Vec<usize> = (0..len).map(|i| (i * 7 + seed as usize) % 12).collect();
            let short = eval(&p, &batch(&[&ids], len));
            let long = eval(&p, &batch(&[&ids], len + extra));
            let h = cfg.hidden_dim;
            for i in 0..len * h {
                assert!((short.data()[i] - long.data()[i]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn errors() {
        let p = EncoderParams::init(&small_config(), 0).unwrap();
        let mut tape = Tape::new();
        let bad = batch(&[&[2, 40, 3]], 3);
        assert!(matches!(p.forward(&mut tape, &bad, Mode::Eval), Err(Error::Label(_))));
        let long = batch(&[&[2; 17]], 17);
        assert!(matches!(p.forward(&mut tape, &long, Mode::Eval), Err(Error::Shape(_))));
        let cfg = EncoderConfig {
            hidden_dim: 10,
            num_heads: 4,
            ..small_config()
        };
        assert!(matches!(EncoderParams::init(&cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn dropout_only_in_train_mode() {
        let cfg = EncoderConfig {
            dropout_rate: 0.3,
            ..small_config()
        };
        let p = EncoderParams::init(&cfg, 0).unwrap();
        let input = batch(&[&[2, 4, 5, 3]], 4);
        assert_eq!(eval(&p, &input), eval(&p, &input));
        let run = |step| {
            let mut tape = Tape::new();
            let out = p.forward(&mut tape, &input, Mode::Train { seed: 1, step }).unwrap();
            tape.value(out).clone()
        };
        assert_eq!(run(0), run(0));
        assert_ne!(run(0), run(1));
        assert_ne!(run(0), eval(&p, &input));
    }

    #[test]
    fn every_parameter_group_passes_gradcheck() {
        let cfg = small_config();
        let p = EncoderParams::init(&cfg, 4).unwrap();
        let input = batch(&[&[2, 4, 5, 3, 6, 7, 3], &[2, 9, 3]], 7);
        let n = 2 * 7 * cfg.hidden_dim;
        let probe = truncated_normal(&[n], 1.0, 77, "probe");
        for param in p.params() {
            let err = GradCheck::default()
                .check_params(
                    |tape| {
                        let out = p.forward(tape, &input, Mode::Eval)?;
                        let flat = tape.reshape(out, &[n])?;
                        let w = tape.constant(probe.clone());
                        let y = tape.mul(flat, w)?;
                        Ok(tape.sum(y))
                    },
                    &[param],
                )
                .unwrap();
            assert!(err < 1e-4, "{}: {err}", param.name);
        }
    }
}
