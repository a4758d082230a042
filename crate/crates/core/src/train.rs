//! Batching, teacher-forced optimization, loss evaluation and batched
//! prediction.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::write_jsonl;
use crate::error::{Error, Result};
use crate::fusion::VisualFeatures;
use crate::model::{save_checkpoint, ConvS2S, DecodedAnswer, Mode};
use crate::pipeline::EncodedSample;
use crate::tensor::{cross_entropy, no_grad, Adam, Scalar, Tensor};
use crate::vocab::PAD;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Also write `epoch_<n>.cs2s` every this many epochs.
    pub checkpoint_every: Option<usize>,
}

impl TrainConfig {
    pub fn reference(seed: u64) -> Self {
        TrainConfig {
            epochs: 30,
            learning_rate: 2.5e-4,
            batch_size: 128,
            seed,
            checkpoint_every: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "epochs and batch_size must be positive".into(),
            ));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::Config("checkpoint cadence must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "bad learning rate {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// A padded mini-batch. Matrices are row-major `[len, width]` and padded
/// with `<pad>`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub sample_ids: Vec<String>,
    pub source: Vec<usize>,
    pub source_width: usize,
    /// Token count per sample, excluding patches.
    pub source_lengths: Vec<usize>,
    pub visual: Vec<Option<VisualFeatures>>,
    /// `<sos> answer <eos>` per sample.
    pub target: Vec<usize>,
    pub target_width: usize,
    pub target_lengths: Vec<usize>,
}

impl Batch {
    pub fn from_samples(samples: &[&EncodedSample]) -> Self {
        let source_width = samples.iter().map(|s| s.sequence.len()).max().unwrap_or(0);
        let target_width = samples.iter().map(|s| s.target.len()).max().unwrap_or(0);
        let mut source = vec![PAD; samples.len() * source_width];
        let mut target = vec![PAD; samples.len() * target_width];
        for (b, s) in samples.iter().enumerate() {
            source[b * source_width..][..s.sequence.len()].copy_from_slice(&s.sequence.ids);
            target[b * target_width..][..s.target.len()].copy_from_slice(&s.target);
        }
        Batch {
            sample_ids: samples.iter().map(|s| s.sample_id.clone()).collect(),
            source,
            source_width,
            source_lengths: samples.iter().map(|s| s.sequence.len()).collect(),
            visual: samples.iter().map(|s| s.visual.clone()).collect(),
            target,
            target_width,
            target_lengths: samples.iter().map(|s| s.target.len()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }

    /// Unpadded source ids.
    pub fn source_rows(&self) -> Vec<&[usize]> {
        self.source_lengths
            .iter()
            .enumerate()
            .map(|(b, &l)| &self.source[b * self.source_width..][..l])
            .collect()
    }

    /// Decoder inputs: each padded target row without its last column.
    pub fn decoder_inputs(&self) -> Vec<&[usize]> {
        let w = self.target_width.saturating_sub(1);
        (0..self.len())
            .map(|b| &self.target[b * self.target_width..][..w])
            .collect()
    }

    /// Labels aligned with the decoder output rows: each padded target row
    /// shifted left by one.
    pub fn labels(&self) -> Vec<usize> {
        (0..self.len())
            .flat_map(|b| {
                self.target[b * self.target_width + 1..(b + 1) * self.target_width]
                    .iter()
                    .copied()
            })
            .collect()
    }

    /// Number of non-pad labels.
    pub fn label_tokens(&self) -> usize {
        self.labels().iter().filter(|&&l| l != PAD).count()
    }

    /// Adds `extra` all-pad columns to the target matrix.
    pub fn pad_targets(&mut self, extra: usize) {
        let w = self.target_width + extra;
        let mut t = vec![PAD; self.len() * w];
        for b in 0..self.len() {
            t[b * w..][..self.target_width]
                .copy_from_slice(&self.target[b * self.target_width..][..self.target_width]);
        }
        self.target = t;
        self.target_width = w;
    }
}

/// Groups samples into batches of `batch_size` (the last may be smaller).
/// With a seed the order is shuffled first; without one it is kept.
pub fn make_batches(
    samples: &[EncodedSample],
    batch_size: usize,
    seed: Option<u64>,
) -> Result<Vec<Batch>> {
    if samples.is_empty() {
        return Err(Error::Validation("cannot batch an empty dataset".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut order: Vec<&EncodedSample> = samples.iter().collect();
    if let Some(seed) = seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(order.chunks(batch_size).map(Batch::from_samples).collect())
}

/// Token-mean cross-entropy of one batch under teacher forcing.
pub fn batch_loss<T: Scalar>(
    model: &ConvS2S<T>,
    batch: &Batch,
    mode: &mut Mode<'_>,
) -> Result<Tensor<T>> {
    let visual: Vec<Option<&VisualFeatures>> = batch.visual.iter().map(Option::as_ref).collect();
    let enc = model.encode(&batch.source_rows(), &visual, mode)?;
    let out = model.decode_train(&enc, &batch.decoder_inputs(), mode)?;
    cross_entropy(&out.logits, &batch.labels(), PAD)
}

/// Token-mean loss over a dataset in evaluation mode.
pub fn evaluate_loss<T: Scalar>(
    model: &ConvS2S<T>,
    samples: &[EncodedSample],
    batch_size: usize,
) -> Result<f64> {
    let _guard = no_grad();
    let mut total = 0.0;
    let mut tokens = 0;
    for batch in make_batches(samples, batch_size, None)? {
        let n = batch.label_tokens();
        let loss = batch_loss(model, &batch, &mut Mode::Eval)?.item();
        total += loss.to_f64().unwrap_or(f64::NAN) * n as f64;
        tokens += n;
    }
    Ok(if tokens == 0 {
        0.0
    } else {
        total / tokens as f64
    })
}

/// Greedy answers in input order.
pub fn predict<T: Scalar>(
    model: &ConvS2S<T>,
    samples: &[EncodedSample],
    batch_size: usize,
) -> Result<Vec<DecodedAnswer>> {
    let mut out = Vec::with_capacity(samples.len());
    if samples.is_empty() {
        return Ok(out);
    }
    for batch in make_batches(samples, batch_size, None)? {
        let visual: Vec<Option<&VisualFeatures>> =
            batch.visual.iter().map(Option::as_ref).collect();
        let enc = {
            let _guard = no_grad();
            model.encode(&batch.source_rows(), &visual, &mut Mode::Eval)?
        };
        out.extend(model.greedy_decode(&enc)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
    pub best_epoch: usize,
    pub best_loss: f64,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainLog {
    pub fn losses(&self, split: Split) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.split == split)
            .map(|r| r.loss)
            .collect()
    }
}

/// Where [`train`] writes its log and checkpoints, and the input-assembly
/// settings stored with each checkpoint.
#[derive(Debug, Clone)]
pub struct TrainOutput<'a> {
    pub dir: &'a Path,
    pub pipeline: serde_json::Value,
}

pub const LOG_FILE: &str = "train_log.jsonl";
pub const BEST_CHECKPOINT: &str = "best.cs2s";
pub const LAST_CHECKPOINT: &str = "last.cs2s";

/// Optimizes `model` in place. Each epoch shuffles the training set with a
/// seed derived from `config.seed`, takes one Adam step per batch, then
/// measures the dev loss in evaluation mode. The checkpoint with the lowest
/// dev loss (train loss when there is no dev set) is kept as `best.cs2s`.
pub fn train<T: Scalar>(
    model: &ConvS2S<T>,
    train_set: &[EncodedSample],
    dev_set: &[EncodedSample],
    config: &TrainConfig,
    output: Option<&TrainOutput<'_>>,
    mut on_epoch: impl FnMut(&[LogRecord]),
) -> Result<TrainLog> {
    config.validate()?;
    let params = model.named_parameters();
    let mut adam = Adam::<T>::new(config.learning_rate)?;
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let start = Instant::now();
    let mut log = TrainLog {
        best_loss: f64::INFINITY,
        ..TrainLog::default()
    };

    for epoch in 1..=config.epochs {
        let shuffle_seed = config
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(epoch as u64);
        let mut total = 0.0;
        let mut tokens = 0;
        for (i, batch) in make_batches(train_set, config.batch_size, Some(shuffle_seed))?
            .iter()
            .enumerate()
        {
            model.zero_grad();
            let loss = batch_loss(model, batch, &mut Mode::Train(&mut dropout_rng))?;
            let value = loss.item().to_f64().unwrap_or(f64::NAN);
            if !value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: i + 1,
                });
            }
            loss.backward()?;
            adam.step(&params)?;
            let n = batch.label_tokens();
            total += value * n as f64;
            tokens += n;
        }
        let train_loss = if tokens == 0 {
            0.0
        } else {
            total / tokens as f64
        };
        let elapsed = start.elapsed().as_secs_f64();
        let mut epoch_records = vec![LogRecord {
            epoch,
            split: Split::Train,
            loss: train_loss,
            wall_time_s: elapsed,
        }];
        let mut selection = train_loss;
        if !dev_set.is_empty() {
            let dev_loss = evaluate_loss(model, dev_set, config.batch_size)?;
            if !dev_loss.is_finite() {
                return Err(Error::Diverged { epoch, batch: 0 });
            }
            epoch_records.push(LogRecord {
                epoch,
                split: Split::Dev,
                loss: dev_loss,
                wall_time_s: start.elapsed().as_secs_f64(),
            });
            selection = dev_loss;
        }
        log.records.extend(epoch_records.iter().cloned());
        let improved = selection < log.best_loss;
        if improved {
            log.best_loss = selection;
            log.best_epoch = epoch;
        }

        if let Some(out) = output {
            write_jsonl(&out.dir.join(LOG_FILE), &log.records)?;
            if improved {
                let p = out.dir.join(BEST_CHECKPOINT);
                save_checkpoint(&p, model, &out.pipeline)?;
                push_unique(&mut log.checkpoints, p);
            }
            if config.checkpoint_every.is_some_and(|k| epoch % k == 0) {
                let p = out.dir.join(format!("epoch_{epoch}.cs2s"));
                save_checkpoint(&p, model, &out.pipeline)?;
                push_unique(&mut log.checkpoints, p);
            }
            if epoch == config.epochs {
                let p = out.dir.join(LAST_CHECKPOINT);
                save_checkpoint(&p, model, &out.pipeline)?;
                push_unique(&mut log.checkpoints, p);
            }
        }
        on_epoch(&epoch_records);
    }
    model.zero_grad();
    Ok(log)
}

fn push_unique(v: &mut Vec<PathBuf>, p: PathBuf) {
    if !v.contains(&p) {
        v.push(p);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::build_combined_sequence;
    use crate::model::{load_checkpoint, ModelConfig};
    use crate::vocab::{preprocess, Language, Vocabulary, EOS, SOS};

    fn corpus(n: usize) -> (Vocabulary, Vec<EncodedSample>) {
        let pairs: Vec<(String, String)> = (0..n)
            .map(|i| {
                (
                    format!("what is item {}", i % 4),
                    format!("thing {}", ["a", "b", "c", "d"][i % 4]),
                )
            })
            .collect();
        let tokens: Vec<Vec<String>> = pairs
            .iter()
            .flat_map(|(q, a)| {
                [
                    preprocess(q, Language::En).tokens,
                    preprocess(a, Language::En).tokens,
                ]
            })
            .collect();
        let vocab = Vocabulary::build(tokens.iter().map(Vec::as_slice), 1);
        let samples = pairs
            .iter()
            .enumerate()
            .map(|(i, (q, a))| {
                let answer = preprocess(a, Language::En);
                let mut target = vec![SOS];
                target.extend(vocab.encode(&answer.tokens));
                target.push(EOS);
                EncodedSample {
                    sample_id: format!("{i:03}"),
                    language: Language::En,
                    sequence: build_combined_sequence(
                        &preprocess(q, Language::En),
                        None,
                        &vocab,
                        10,
                        32,
                    )
                    .unwrap(),
                    visual: None,
                    target,
                    answer,
                }
            })
            .collect();
        (vocab, samples)
    }

    fn tiny(vocab: usize) -> ModelConfig {
        ModelConfig {
            embed_dim: 8,
            hidden_units: 8,
            kernel_width: 3,
            encoder_layers: 1,
            decoder_layers: 1,
            dropout_keep: 1.0,
            max_positions: 32,
            source_vocab: vocab,
            target_vocab: vocab,
            max_decode_len: 4,
        }
    }

    #[test]
    fn batch_sizes_and_order() {
        let (_, s) = corpus(10);
        let b = make_batches(&s, 4, Some(1)).unwrap();
        assert_eq!(b.iter().map(Batch::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        assert_eq!(b, make_batches(&s, 4, Some(1)).unwrap());
        let ids = |b: &[Batch]| {
            b.iter()
                .flat_map(|x| x.sample_ids.clone())
                .collect::<Vec<_>>()
        };
        assert_ne!(ids(&b), ids(&make_batches(&s, 4, Some(2)).unwrap()));
        assert!(make_batches(&[], 4, None).is_err());
    }

    #[test]
    fn teacher_forcing_alignment() {
        let (_, mut s) = corpus(2);
        s[1].target = vec![SOS, 7, 8, 9, EOS];
        let b = Batch::from_samples(&[&s[0], &s[1]]);
        let inputs = b.decoder_inputs();
        let labels = b.labels();
        let w = b.target_width - 1;
        assert_eq!(inputs[1], &[SOS, 7, 8, 9]);
        assert_eq!(&labels[w..], &[7, 8, 9, EOS]);
        for (bi, row) in inputs.iter().enumerate() {
            for t in 0..w - 1 {
                if labels[bi * w + t] != PAD {
                    assert_eq!(labels[bi * w + t], row[t + 1]);
                }
            }
        }
        // sample 0 has target <sos> thing x <eos>; its last column is padding
        assert_eq!(labels[w - 1], PAD);
        assert_eq!(b.label_tokens(), 3 + 4);
    }

    #[test]
    fn pad_columns_do_not_change_loss() {
        let (vocab, s) = corpus(3);
        let m = ConvS2S::<f64>::new(tiny(vocab.len()), 5).unwrap();
        let mut b = Batch::from_samples(&s.iter().collect::<Vec<_>>());
        let l0 = batch_loss(&m, &b, &mut Mode::Eval).unwrap().item();
        b.pad_targets(3);
        let l1 = batch_loss(&m, &b, &mut Mode::Eval).unwrap().item();
        assert!((l0 - l1).abs() <= 1e-6, "{l0} vs {l1}");
    }

    #[test]
    fn first_epoch_loss_near_uniform() {
        let (vocab, s) = corpus(8);
        let m = ConvS2S::<f32>::new(tiny(vocab.len()), 0).unwrap();
        let l = evaluate_loss(&m, &s, 4).unwrap();
        let uniform = (vocab.len() as f64).ln();
        assert!((l - uniform).abs() < 0.1 * uniform, "{l} vs {uniform}");
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let (vocab, s) = corpus(8);
        let cfg = TrainConfig {
            epochs: 10,
            learning_rate: 1e-2,
            batch_size: 4,
            seed: 3,
            checkpoint_every: Some(5),
        };
        let run = || {
            let m = ConvS2S::<f32>::new(tiny(vocab.len()), 3).unwrap();
            let log = train(&m, &s, &s[..2], &cfg, None, |_| {}).unwrap();
            (m, log)
        };
        let (m1, a) = run();
        let (m2, b) = run();
        assert_eq!(a.losses(Split::Train), b.losses(Split::Train));
        assert_eq!(a.losses(Split::Dev), b.losses(Split::Dev));
        let tl = a.losses(Split::Train);
        assert!(tl[9] < tl[0]);
        let pipe = serde_json::Value::Null;
        assert_eq!(
            crate::model::encode_checkpoint(&m1, &pipe),
            crate::model::encode_checkpoint(&m2, &pipe)
        );
    }

    #[test]
    fn checkpoints_and_log_written() {
        let (vocab, s) = corpus(8);
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            epochs: 4,
            learning_rate: 1e-2,
            batch_size: 4,
            seed: 1,
            checkpoint_every: Some(2),
        };
        let m = ConvS2S::<f32>::new(tiny(vocab.len()), 1).unwrap();
        let out = TrainOutput {
            dir: dir.path(),
            pipeline: serde_json::json!({"k": 1}),
        };
        let log = train(&m, &s, &s[..4], &cfg, Some(&out), |_| {}).unwrap();
        for name in [
            LOG_FILE,
            BEST_CHECKPOINT,
            LAST_CHECKPOINT,
            "epoch_2.cs2s",
            "epoch_4.cs2s",
        ] {
            assert!(dir.path().join(name).exists(), "{name}");
        }
        let text = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
        assert_eq!(text.lines().count(), 8);

        let ck = load_checkpoint(&dir.path().join(LAST_CHECKPOINT)).unwrap();
        assert_eq!(ck.pipeline, serde_json::json!({"k": 1}));
        let back: ConvS2S<f32> = ck.to_model(None).unwrap();
        let dev_a = evaluate_loss(&m, &s[..4], 4).unwrap();
        let dev_b = evaluate_loss(&back, &s[..4], 4).unwrap();
        assert!((dev_a - dev_b).abs() <= 1e-6);
        assert_eq!(dev_a, *log.losses(Split::Dev).last().unwrap());
    }

    #[test]
    fn divergence_is_reported() {
        let (vocab, s) = corpus(4);
        let m = ConvS2S::<f32>::new(tiny(vocab.len()), 1).unwrap();
        let params = m.named_parameters();
        let (_, bias) = params
            .iter()
            .find(|(n, _)| n == "decoder.out_proj.bias")
            .unwrap();
        bias.data_mut()[0] = f32::NAN;
        let cfg = TrainConfig {
            epochs: 1,
            learning_rate: 1e-3,
            batch_size: 2,
            seed: 0,
            checkpoint_every: None,
        };
        let err = train(&m, &s, &[], &cfg, None, |_| {}).unwrap_err();
        assert!(
            matches!(err, Error::Diverged { epoch: 1, batch: 1 }),
            "{err}"
        );
    }

    #[test]
    fn predict_keeps_order_and_cap() {
        let (vocab, s) = corpus(5);
        let m = ConvS2S::<f32>::new(tiny(vocab.len()), 2).unwrap();
        let p = predict(&m, &s, 2).unwrap();
        assert_eq!(p.len(), 5);
        assert!(p.iter().all(|d| d.ids.len() <= 4));
        let single = predict(&m, &s[3..4], 1).unwrap();
        assert_eq!(single[0].ids, p[3].ids);
    }
}
