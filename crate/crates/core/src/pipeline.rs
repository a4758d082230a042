//! Turns dataset records, hint files and feature files into model-ready
//! samples, and writes attention artifacts for decoded answers.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{write_atomic, FeatureStore, QASample};
use crate::error::{Error, Result};
use crate::fusion::{
    build_combined_sequence, CombinedSequence, HintMode, HintSet, VisualFeatures, GENERATIVE_REPEAT,
};
use crate::model::{DecodedAnswer, LabeledAttention};
use crate::vocab::{preprocess, Language, TokenizedText, Vocabulary, EOS, SOS};

/// Input-assembly settings. Stored in checkpoints so that prediction uses
/// the same assembly as training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub hints: HintMode,
    pub visual: bool,
    pub max_len: usize,
    pub generative_repeat: usize,
}

impl PipelineConfig {
    pub fn desk() -> Self {
        PipelineConfig {
            hints: HintMode::Both,
            visual: true,
            max_len: 64,
            generative_repeat: GENERATIVE_REPEAT,
        }
    }

    pub fn reference() -> Self {
        PipelineConfig {
            max_len: 256,
            ..Self::desk()
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("pipeline config serializes")
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        serde_json::from_value(v.clone())
            .map_err(|e| Error::Config(format!("pipeline config: {e}")))
    }
}

/// Maps a question into the language the hint models were trained on.
pub trait Translator {
    fn translate(&self, text: &str, from: Language) -> String;
}

/// Pass-through translator.
#[derive(Debug, Default, Clone, Copy)]
pub struct IdentityTranslator;

impl Translator for IdentityTranslator {
    fn translate(&self, text: &str, _from: Language) -> String {
        text.to_owned()
    }
}

/// Supplies hints for a sample given its (translated) question.
pub trait HintProvider {
    fn hints(&self, sample: &QASample, translated_question: &str) -> Option<HintSet>;
}

/// Hints read from a hint file, keyed by sample id.
impl HintProvider for BTreeMap<String, HintSet> {
    fn hints(&self, sample: &QASample, _translated_question: &str) -> Option<HintSet> {
        self.get(&sample.sample_id).cloned()
    }
}

/// A sample ready for batching.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSample {
    pub sample_id: String,
    pub language: Language,
    pub sequence: CombinedSequence,
    pub visual: Option<VisualFeatures>,
    /// `<sos> answer <eos>`
    pub target: Vec<usize>,
    pub answer: TokenizedText,
}

impl EncodedSample {
    pub fn source_len(&self) -> usize {
        self.sequence.len() + self.visual.as_ref().map_or(0, VisualFeatures::rows)
    }
}

/// Builds a vocabulary over questions, answers and all hint texts.
pub fn build_vocabulary(
    samples: &[QASample],
    hints: Option<&BTreeMap<String, HintSet>>,
    min_freq: usize,
) -> Vocabulary {
    let mut corpus: Vec<Vec<String>> = Vec::new();
    for s in samples {
        corpus.push(preprocess(&s.question, s.language).tokens);
        corpus.push(preprocess(&s.answer, s.language).tokens);
        if let Some(h) = hints.and_then(|m| m.get(&s.sample_id)) {
            for c in h.classifier() {
                corpus.push(preprocess(&c.text, s.language).tokens);
            }
            if let Some(g) = h.generative() {
                corpus.push(preprocess(g, s.language).tokens);
            }
        }
    }
    Vocabulary::build(corpus.iter().map(Vec::as_slice), min_freq)
}

/// Assembles combined sequences, targets and visual features. Samples with
/// no hint record get no hints; with `config.visual` set, every sample must
/// have a feature file.
pub fn prepare_samples(
    samples: &[QASample],
    hints: Option<&dyn HintProvider>,
    features: Option<&FeatureStore>,
    vocab: &Vocabulary,
    config: &PipelineConfig,
) -> Result<Vec<EncodedSample>> {
    prepare_with_translator(samples, hints, features, vocab, config, &IdentityTranslator)
}

pub fn prepare_with_translator(
    samples: &[QASample],
    hints: Option<&dyn HintProvider>,
    features: Option<&FeatureStore>,
    vocab: &Vocabulary,
    config: &PipelineConfig,
    translator: &dyn Translator,
) -> Result<Vec<EncodedSample>> {
    if config.visual && features.is_none() {
        return Err(Error::Config(
            "visual features enabled but no feature directory given".into(),
        ));
    }
    samples
        .iter()
        .map(|s| {
            let question = preprocess(&s.question, s.language);
            let hint_set = hints
                .and_then(|p| p.hints(s, &translator.translate(&s.question, s.language)))
                .and_then(|h| config.hints.select(&h));
            let sequence = build_combined_sequence(
                &question,
                hint_set.as_ref(),
                vocab,
                config.generative_repeat,
                config.max_len,
            )
            .map_err(|e| Error::Validation(format!("sample {}: {e}", s.sample_id)))?;
            let visual = match (config.visual, features) {
                (true, Some(store)) => Some(store.load(&s.image_id)?),
                _ => None,
            };
            let answer = preprocess(&s.answer, s.language);
            let mut target = Vec::with_capacity(answer.len() + 2);
            target.push(SOS);
            target.extend(vocab.encode(&answer.tokens));
            target.push(EOS);
            Ok(EncodedSample {
                sample_id: s.sample_id.clone(),
                language: s.language,
                sequence,
                visual,
                target,
                answer,
            })
        })
        .collect()
}

/// Writes, per sample and decoder layer, `<id>_layer<k>.csv`,
/// `<id>_layer<k>.pgm` and `<id>_layer<k>.json` (axis labels). Returns the
/// written paths.
pub fn export_attention_artifacts(
    samples: &[EncodedSample],
    decoded: &[DecodedAnswer],
    vocab: &Vocabulary,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    if samples.len() != decoded.len() {
        return Err(Error::Validation(format!(
            "{} samples but {} decoded answers",
            samples.len(),
            decoded.len()
        )));
    }
    let mut written = Vec::new();
    for (s, d) in samples.iter().zip(decoded) {
        let answer = vocab.decode(&d.ids, false)?;
        let patches = s.visual.as_ref().map_or(0, VisualFeatures::rows);
        for layer in 0..d.attention.len() {
            let map = d.attention_map(layer)?.clone();
            let labeled = LabeledAttention::new(layer, map, &s.sequence, patches, &answer);
            let stem = out_dir.join(format!("{}_layer{}", s.sample_id, layer));
            let csv = stem.with_extension("csv");
            write_atomic(&csv, labeled.map.to_csv().as_bytes())?;
            let pgm = stem.with_extension("pgm");
            write_atomic(&pgm, &labeled.map.to_pgm())?;
            let json = stem.with_extension("json");
            let labels = serde_json::to_vec_pretty(&labeled).expect("labels serialize");
            write_atomic(&json, &labels)?;
            written.extend([csv, pgm, json]);
        }
    }
    Ok(written)
}
