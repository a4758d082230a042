//! Convolutional encoder-decoder with gated linear units, residual
//! connections, learned positions and attention in every decoder layer.
//!
//! Activations are kept channels-last (`[batch, len, channels]`). Source
//! sequences in a batch are right-padded; padded positions are zeroed before
//! every convolution and excluded from attention, so padding never changes
//! the result for real positions.

mod attention;
mod checkpoint;
mod config;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::fusion::{CombinedSequence, VisualFeatures};
use crate::tensor::{
    add, add_const, batched_matmul, concat_rows, conv1d_channels_last, dropout, embedding,
    gather_rows, glu, linear, mul_const, no_grad, reshape, scale, softmax, Scalar, Tensor,
};
use crate::vocab::{EOS, PAD, SEP, SOS, UNK};

pub use attention::{AttentionMap, LabeledAttention};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CS2S_MAGIC,
    CS2S_VERSION,
};
pub use config::ModelConfig;

const SQRT_HALF: f64 = std::f64::consts::FRAC_1_SQRT_2;
const MASKED_SCORE: f64 = -1e9;

/// Whether dropout is active, and the generator that drives it.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut dyn RngCore),
}

impl Mode<'_> {
    fn dropout<T: Scalar>(&mut self, x: &Tensor<T>, keep: f64) -> Result<Tensor<T>> {
        match self {
            Mode::Eval => Ok(x.clone()),
            Mode::Train(rng) => dropout(x, keep, true, &mut **rng),
        }
    }
}

struct Affine<T> {
    weight: Tensor<T>,
    bias: Tensor<T>,
}

impl<T: Scalar> Affine<T> {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        linear(x, &self.weight, Some(&self.bias))
    }
}

struct Conv<T> {
    kernel: Tensor<T>,
    bias: Tensor<T>,
}

struct DecoderLayer<T> {
    conv: Conv<T>,
    attn_in: Affine<T>,
    attn_out: Affine<T>,
}

/// Per-position encoder outputs `z` and attention values `z + e`.
#[derive(Debug, Clone)]
pub struct EncoderState<T> {
    /// `[batch, src_len, embed]`
    pub z: Tensor<T>,
    /// `[batch, src_len, embed]`
    pub kv: Tensor<T>,
    /// Unpadded source length (text + patches) per sample.
    pub source_lengths: Vec<usize>,
}

impl<T> EncoderState<T> {
    pub fn batch_size(&self) -> usize {
        self.source_lengths.len()
    }
}

/// Vocabulary logits and per-layer attention weights of a teacher-forced
/// decoder pass.
#[derive(Debug, Clone)]
pub struct DecoderOutput<T> {
    /// `[batch * tgt_len, target_vocab]`
    pub logits: Tensor<T>,
    /// One `[batch, tgt_len, src_len]` tensor per decoder layer.
    pub attention: Vec<Tensor<T>>,
    pub target_len: usize,
}

/// Result of greedy generation for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedAnswer {
    /// Generated ids without `<sos>`/`<eos>`.
    pub ids: Vec<usize>,
    /// Log-probability of each chosen token.
    pub log_probs: Vec<f64>,
    /// One `answer_len × source_len` map per decoder layer.
    pub attention: Vec<AttentionMap>,
}

impl DecodedAnswer {
    pub fn attention_map(&self, layer: usize) -> Result<&AttentionMap> {
        self.attention.get(layer).ok_or(Error::Index {
            index: layer,
            bound: self.attention.len(),
        })
    }
}

pub struct ConvS2S<T = f32> {
    config: ModelConfig,
    enc_tokens: Tensor<T>,
    enc_positions: Tensor<T>,
    enc_fc1: Affine<T>,
    enc_convs: Vec<Conv<T>>,
    enc_fc2: Affine<T>,
    dec_tokens: Tensor<T>,
    dec_positions: Tensor<T>,
    dec_fc1: Affine<T>,
    dec_layers: Vec<DecoderLayer<T>>,
    dec_fc2: Affine<T>,
    out_proj: Affine<T>,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn normal<T: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let dist = Normal::new(0.0, std).expect("positive std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::lit(dist.sample(&mut self.rng))).collect();
        Tensor::param(data, shape).expect("non-empty shape")
    }

    fn zeros<T: Scalar>(&mut self, n: usize) -> Tensor<T> {
        Tensor::param(vec![T::zero(); n], &[n]).expect("non-empty shape")
    }

    fn affine<T: Scalar>(&mut self, inp: usize, out: usize) -> Affine<T> {
        Affine {
            weight: self.normal(&[out, inp], 0.1 / (inp as f64).sqrt()),
            bias: self.zeros(out),
        }
    }

    fn conv<T: Scalar>(&mut self, cin: usize, cout: usize, k: usize) -> Conv<T> {
        Conv {
            kernel: self.normal(&[cout, cin, k], 0.1 / ((cin * k) as f64).sqrt()),
            bias: self.zeros(cout),
        }
    }
}

impl<T: Scalar> ConvS2S<T> {
    /// Initializes weights from `N(0, 0.1/√fan_in)` and embeddings from
    /// `N(0, 0.1)`; biases start at zero.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let (e, h, k) = (config.embed_dim, config.hidden_units, config.kernel_width);
        // Position 0 is reserved for padding.
        let positions = config.max_positions + 1;
        Ok(ConvS2S {
            enc_tokens: init.normal(&[config.source_vocab, e], 0.1),
            enc_positions: init.normal(&[positions, e], 0.1),
            enc_fc1: init.affine(e, h),
            enc_convs: (0..config.encoder_layers)
                .map(|_| init.conv(h, 2 * h, k))
                .collect(),
            enc_fc2: init.affine(h, e),
            dec_tokens: init.normal(&[config.target_vocab, e], 0.1),
            dec_positions: init.normal(&[positions, e], 0.1),
            dec_fc1: init.affine(e, h),
            dec_layers: (0..config.decoder_layers)
                .map(|_| DecoderLayer {
                    conv: init.conv(h, 2 * h, k),
                    attn_in: init.affine(h, e),
                    attn_out: init.affine(e, h),
                })
                .collect(),
            dec_fc2: init.affine(h, e),
            out_proj: init.affine(e, config.target_vocab),
            config,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// All trainable tensors in a fixed order with stable names.
    pub fn named_parameters(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        let mut push = |name: String, t: &Tensor<T>| out.push((name, t.clone()));
        push("encoder.embed_tokens".into(), &self.enc_tokens);
        push("encoder.embed_positions".into(), &self.enc_positions);
        push("encoder.fc1.weight".into(), &self.enc_fc1.weight);
        push("encoder.fc1.bias".into(), &self.enc_fc1.bias);
        for (i, c) in self.enc_convs.iter().enumerate() {
            push(format!("encoder.convs.{i}.weight"), &c.kernel);
            push(format!("encoder.convs.{i}.bias"), &c.bias);
        }
        push("encoder.fc2.weight".into(), &self.enc_fc2.weight);
        push("encoder.fc2.bias".into(), &self.enc_fc2.bias);
        push("decoder.embed_tokens".into(), &self.dec_tokens);
        push("decoder.embed_positions".into(), &self.dec_positions);
        push("decoder.fc1.weight".into(), &self.dec_fc1.weight);
        push("decoder.fc1.bias".into(), &self.dec_fc1.bias);
        for (i, l) in self.dec_layers.iter().enumerate() {
            push(format!("decoder.layers.{i}.conv.weight"), &l.conv.kernel);
            push(format!("decoder.layers.{i}.conv.bias"), &l.conv.bias);
            push(
                format!("decoder.layers.{i}.attn_in.weight"),
                &l.attn_in.weight,
            );
            push(format!("decoder.layers.{i}.attn_in.bias"), &l.attn_in.bias);
            push(
                format!("decoder.layers.{i}.attn_out.weight"),
                &l.attn_out.weight,
            );
            push(
                format!("decoder.layers.{i}.attn_out.bias"),
                &l.attn_out.bias,
            );
        }
        push("decoder.fc2.weight".into(), &self.dec_fc2.weight);
        push("decoder.fc2.bias".into(), &self.dec_fc2.bias);
        push("decoder.out_proj.weight".into(), &self.out_proj.weight);
        push("decoder.out_proj.bias".into(), &self.out_proj.bias);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_parameters().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Copies parameter values from another model with the same layout,
    /// converting precision.
    pub fn load_from<U: Scalar>(&self, other: &ConvS2S<U>) -> Result<()> {
        if other.config != self.config {
            return Err(Error::ConfigMismatch("model layouts differ".into()));
        }
        for ((_, dst), (_, src)) in self.named_parameters().iter().zip(other.named_parameters()) {
            let mut d = dst.data_mut();
            for (a, b) in d.iter_mut().zip(src.data().iter()) {
                *a = T::lit(b.to_f64().unwrap_or(f64::NAN));
            }
        }
        Ok(())
    }

    pub fn zero_grad(&self) {
        for (_, p) in self.named_parameters() {
            p.zero_grad();
        }
    }

    /// Encodes a batch. `ids[b]` are the token ids of sample `b`'s combined
    /// sequence; `visual[b]` its patch features, appended after the text.
    pub fn encode(
        &self,
        ids: &[&[usize]],
        visual: &[Option<&VisualFeatures>],
        mode: &mut Mode<'_>,
    ) -> Result<EncoderState<T>> {
        let cfg = &self.config;
        let bsz = ids.len();
        if bsz == 0 || visual.len() != bsz {
            return Err(Error::Validation(format!(
                "encode needs one visual entry per sample ({} ids, {} visual)",
                bsz,
                visual.len()
            )));
        }
        let e_dim = cfg.embed_dim;
        let text_lens: Vec<usize> = ids.iter().map(|s| s.len()).collect();
        if text_lens.contains(&0) {
            return Err(Error::Validation("empty source sequence".into()));
        }
        let patch_lens: Vec<usize> = visual
            .iter()
            .map(|v| v.map_or(0, VisualFeatures::rows))
            .collect();
        for v in visual.iter().flatten() {
            if v.cols() != e_dim {
                return Err(Error::Shape {
                    op: "encode",
                    lhs: vec![v.rows(), v.cols()],
                    rhs: vec![e_dim],
                });
            }
        }
        let src_lens: Vec<usize> = text_lens
            .iter()
            .zip(&patch_lens)
            .map(|(a, b)| a + b)
            .collect();
        let src_len = *src_lens.iter().max().unwrap();
        if src_len > cfg.max_positions {
            return Err(Error::TooLong {
                len: src_len,
                max: cfg.max_positions,
            });
        }

        let text_max = *text_lens.iter().max().unwrap();
        let mut padded = vec![PAD; bsz * text_max];
        for (b, s) in ids.iter().enumerate() {
            padded[b * text_max..b * text_max + s.len()].copy_from_slice(s);
        }
        let tokens = embedding(&self.enc_tokens, &padded, &[bsz * text_max])?;

        let total_patches: usize = patch_lens.iter().sum();
        let pool = if total_patches > 0 {
            let mut vis = Vec::with_capacity(total_patches * e_dim);
            for v in visual.iter().flatten() {
                vis.extend(v.data().iter().map(|&x| T::lit(x as f64)));
            }
            concat_rows(&tokens, &Tensor::new(vis, &[total_patches, e_dim])?)?
        } else {
            tokens
        };

        let mut rows = Vec::with_capacity(bsz * src_len);
        let mut positions = Vec::with_capacity(bsz * src_len);
        let mut patch_offset = bsz * text_max;
        for b in 0..bsz {
            for s in 0..src_len {
                if s < text_lens[b] {
                    rows.push(Some(b * text_max + s));
                } else if s < src_lens[b] {
                    rows.push(Some(patch_offset + s - text_lens[b]));
                } else {
                    rows.push(None);
                }
                positions.push(if s < src_lens[b] { s + 1 } else { 0 });
            }
            patch_offset += patch_lens[b];
        }
        let fused = gather_rows(&pool, &rows)?;
        let pos = embedding(&self.enc_positions, &positions, &[bsz * src_len])?;
        let embedded = add(&fused, &pos)?;

        let mask_h = row_mask::<T>(&src_lens, src_len, cfg.hidden_units);
        let mut x = mode.dropout(&embedded, cfg.dropout_keep)?;
        x = mul_const(&self.enc_fc1.forward(&x)?, &mask_h)?;
        x = reshape(&x, &[bsz, src_len, cfg.hidden_units])?;
        let pad = (cfg.kernel_width - 1) / 2;
        for conv in &self.enc_convs {
            let residual = x.clone();
            let h = mode.dropout(&x, cfg.dropout_keep)?;
            let h = conv1d_channels_last(&h, &conv.kernel, &conv.bias, pad, pad)?;
            let h = glu(&h, 2)?;
            x = scale(&add(&h, &residual)?, T::lit(SQRT_HALF));
            x = mul_const(&x, &mask_h)?;
        }
        let z = self.enc_fc2.forward(&x)?;
        let kv = add(&z, &reshape(&embedded, &[bsz, src_len, e_dim])?)?;
        Ok(EncoderState {
            z,
            kv,
            source_lengths: src_lens,
        })
    }

    /// Encodes one combined sequence with optional patch features.
    pub fn encode_one(
        &self,
        seq: &CombinedSequence,
        visual: Option<&VisualFeatures>,
        mode: &mut Mode<'_>,
    ) -> Result<EncoderState<T>> {
        self.encode(&[&seq.ids], &[visual], mode)
    }

    /// Teacher-forced decoder pass. `targets[b]` is the decoder input of
    /// sample `b` (starting with `<sos>`); shorter inputs are right-padded.
    pub fn decode_train(
        &self,
        enc: &EncoderState<T>,
        targets: &[&[usize]],
        mode: &mut Mode<'_>,
    ) -> Result<DecoderOutput<T>> {
        let cfg = &self.config;
        let bsz = enc.batch_size();
        if targets.len() != bsz {
            return Err(Error::Validation(format!(
                "{} targets for a batch of {bsz}",
                targets.len()
            )));
        }
        if targets.iter().any(|t| t.is_empty()) {
            return Err(Error::Validation("empty target sequence".into()));
        }
        let tgt_len = targets.iter().map(|t| t.len()).max().unwrap();
        if tgt_len > cfg.max_positions {
            return Err(Error::TooLong {
                len: tgt_len,
                max: cfg.max_positions,
            });
        }
        let src_len = enc.z.shape()[1];
        let (e_dim, h_dim) = (cfg.embed_dim, cfg.hidden_units);

        let mut padded = vec![PAD; bsz * tgt_len];
        for (b, t) in targets.iter().enumerate() {
            padded[b * tgt_len..b * tgt_len + t.len()].copy_from_slice(t);
        }
        let positions: Vec<usize> = (0..bsz).flat_map(|_| 1..=tgt_len).collect();
        let tok = embedding(&self.dec_tokens, &padded, &[bsz, tgt_len])?;
        let pos = embedding(&self.dec_positions, &positions, &[bsz, tgt_len])?;
        let target_emb = mode.dropout(&add(&tok, &pos)?, cfg.dropout_keep)?;

        let mut score_mask = vec![T::zero(); bsz * tgt_len * src_len];
        let mut ctx_scale = vec![T::zero(); bsz * tgt_len * e_dim];
        for (b, &len) in enc.source_lengths.iter().enumerate() {
            let s = T::lit((len as f64).sqrt());
            for t in 0..tgt_len {
                let row = (b * tgt_len + t) * src_len;
                score_mask[row + len..row + src_len].fill(T::lit(MASKED_SCORE));
                let row = (b * tgt_len + t) * e_dim;
                ctx_scale[row..row + e_dim].fill(s);
            }
        }

        let mut x = self.dec_fc1.forward(&target_emb)?;
        let mut attention = Vec::with_capacity(self.dec_layers.len());
        let k = cfg.kernel_width;
        for layer in &self.dec_layers {
            let residual = x.clone();
            let h = mode.dropout(&x, cfg.dropout_keep)?;
            let h = conv1d_channels_last(&h, &layer.conv.kernel, &layer.conv.bias, k - 1, 0)?;
            let h = glu(&h, 2)?;

            let query = add(&layer.attn_in.forward(&h)?, &target_emb)?;
            let scores = batched_matmul(&query, &enc.z, true)?;
            let weights = softmax(&add_const(&scores, &score_mask)?, 2)?;
            let ctx = batched_matmul(&weights, &enc.kv, false)?;
            let ctx = layer.attn_out.forward(&mul_const(&ctx, &ctx_scale)?)?;
            let h = scale(&add(&h, &ctx)?, T::lit(SQRT_HALF));
            attention.push(weights);

            x = scale(&add(&h, &residual)?, T::lit(SQRT_HALF));
        }
        debug_assert_eq!(x.shape(), &[bsz, tgt_len, h_dim]);
        let x = self.dec_fc2.forward(&x)?;
        let x = mode.dropout(&x, cfg.dropout_keep)?;
        let logits = self.out_proj.forward(&x)?;
        let logits = reshape(&logits, &[bsz * tgt_len, cfg.target_vocab])?;
        Ok(DecoderOutput {
            logits,
            attention,
            target_len: tgt_len,
        })
    }

    /// Greedy left-to-right generation in evaluation mode. Each step takes
    /// the highest-scoring token (lowest id on ties) among all ids except
    /// `<pad>`, `<sos>`, `<sep>` and `<unk>`, until `<eos>` or
    /// `max_decode_len` tokens.
    pub fn greedy_decode(&self, enc: &EncoderState<T>) -> Result<Vec<DecodedAnswer>> {
        let _guard = no_grad();
        let bsz = enc.batch_size();
        let vocab = self.config.target_vocab;
        let mut prefixes: Vec<Vec<usize>> = vec![vec![SOS]; bsz];
        let mut answers: Vec<DecodedAnswer> = vec![
            DecodedAnswer {
                ids: Vec::new(),
                log_probs: Vec::new(),
                attention: Vec::new(),
            };
            bsz
        ];
        let mut done = vec![false; bsz];
        let mut last_attention = Vec::new();

        for _ in 0..self.config.max_decode_len {
            let refs: Vec<&[usize]> = prefixes.iter().map(Vec::as_slice).collect();
            let out = self.decode_train(enc, &refs, &mut Mode::Eval)?;
            let t = out.target_len;
            let logits = out.logits.data();
            for b in 0..bsz {
                let row = &logits[(b * t + t - 1) * vocab..(b * t + t) * vocab];
                let (best, lp) = argmax_log_prob(row);
                if !done[b] {
                    if best == EOS {
                        done[b] = true;
                    } else {
                        answers[b].ids.push(best);
                        answers[b].log_probs.push(lp);
                    }
                }
                prefixes[b].push(if done[b] { EOS } else { best });
            }
            drop(logits);
            last_attention = out.attention;
            if done.iter().all(|&d| d) {
                break;
            }
        }

        for (b, ans) in answers.iter_mut().enumerate() {
            let src = enc.source_lengths[b];
            ans.attention = last_attention
                .iter()
                .map(|w| AttentionMap::from_batch(w, b, ans.ids.len(), src))
                .collect();
        }
        Ok(answers)
    }
}

fn argmax_log_prob<T: Scalar>(row: &[T]) -> (usize, f64) {
    let mut best = usize::MAX;
    let mut best_val = f64::NEG_INFINITY;
    for (i, v) in row.iter().enumerate() {
        if matches!(i, PAD | SOS | SEP | UNK) {
            continue;
        }
        let v = v.to_f64().unwrap_or(f64::NAN);
        if v > best_val || best == usize::MAX {
            best = i;
            best_val = v;
        }
    }
    let max = row
        .iter()
        .map(|v| v.to_f64().unwrap_or(f64::NAN))
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = max
        + row
            .iter()
            .map(|v| (v.to_f64().unwrap_or(f64::NAN) - max).exp())
            .sum::<f64>()
            .ln();
    (best, best_val - lse)
}

/// 1 for real positions, 0 for padding, repeated across `width` channels.
fn row_mask<T: Scalar>(lens: &[usize], max_len: usize, width: usize) -> Vec<T> {
    let mut m = vec![T::zero(); lens.len() * max_len * width];
    for (b, &len) in lens.iter().enumerate() {
        m[b * max_len * width..(b * max_len + len) * width].fill(T::one());
    }
    m
}
