//! Encoder input assembly: question tokens followed by probability-weighted
//! repetitions of classifier hints and a fixed number of repetitions of the
//! generative hint, and the concatenation of text embeddings with visual
//! patch features along the sequence axis.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{concat_rows, Scalar, Tensor};
use crate::vocab::{preprocess, TokenizedText, Vocabulary, EOS, RESERVED, SEP, SOS};

pub const MAX_CLASSIFIER_HINTS: usize = 5;
pub const GENERATIVE_REPEAT: usize = 10;

/// One candidate answer from a classifier-style hint provider.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHint {
    pub text: String,
    pub prob: f64,
}

/// Hints for one sample: up to five classifier candidates in descending
/// probability order plus an optional free-form generated answer.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "RawHintSet", into = "RawHintSet")]
pub struct HintSet {
    classifier: Vec<ClassifierHint>,
    generative: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct RawHintSet {
    #[serde(default)]
    classifier: Vec<ClassifierHint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    generative: Option<String>,
}

impl TryFrom<RawHintSet> for HintSet {
    type Error = Error;

    fn try_from(raw: RawHintSet) -> Result<Self> {
        HintSet::new(raw.classifier, raw.generative)
    }
}

impl From<HintSet> for RawHintSet {
    fn from(h: HintSet) -> Self {
        RawHintSet {
            classifier: h.classifier,
            generative: h.generative,
        }
    }
}

impl HintSet {
    /// Validates probabilities and count, then orders candidates by
    /// descending probability (stable for ties).
    pub fn new(mut classifier: Vec<ClassifierHint>, generative: Option<String>) -> Result<Self> {
        if classifier.len() > MAX_CLASSIFIER_HINTS {
            return Err(Error::Validation(format!(
                "at most {MAX_CLASSIFIER_HINTS} classifier hints allowed, got {}",
                classifier.len()
            )));
        }
        for h in &classifier {
            check_prob(h.prob)?;
        }
        classifier.sort_by(|a, b| b.prob.total_cmp(&a.prob));
        Ok(HintSet {
            classifier,
            generative,
        })
    }

    pub fn classifier(&self) -> &[ClassifierHint] {
        &self.classifier
    }

    pub fn generative(&self) -> Option<&str> {
        self.generative.as_deref()
    }

    pub fn is_empty(&self) -> bool {
        self.classifier.is_empty() && self.generative.is_none()
    }
}

/// Which hint sources feed the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HintMode {
    None,
    Classifier,
    Generative,
    #[default]
    Both,
}

impl HintMode {
    pub fn select(self, hints: &HintSet) -> Option<HintSet> {
        let (classifier, generative) = match self {
            HintMode::None => return None,
            HintMode::Classifier => (hints.classifier.clone(), None),
            HintMode::Generative => (Vec::new(), hints.generative.clone()),
            HintMode::Both => (hints.classifier.clone(), hints.generative.clone()),
        };
        Some(HintSet {
            classifier,
            generative,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            HintMode::None => "none",
            HintMode::Classifier => "classifier",
            HintMode::Generative => "generative",
            HintMode::Both => "both",
        }
    }
}

impl fmt::Display for HintMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HintMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(HintMode::None),
            "classifier" => Ok(HintMode::Classifier),
            "generative" => Ok(HintMode::Generative),
            "both" => Ok(HintMode::Both),
            _ => Err(Error::Validation(format!("unknown hint mode `{s}`"))),
        }
    }
}

fn check_prob(p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Validation(format!(
            "hint probability {p} outside [0, 1]"
        )));
    }
    Ok(())
}

/// Number of times a classifier hint is repeated: the integer part of half
/// its probability expressed in percent, i.e. ⌊100·p / 2⌋.
pub fn repeat_count(prob: f64) -> Result<usize> {
    check_prob(prob)?;
    // The tolerance absorbs binary rounding such as 0.58 * 100 = 57.999…
    Ok((prob * 100.0 / 2.0 + 1e-9).floor() as usize)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segment {
    Sos,
    Question,
    Sep,
    ClassifierHint,
    GenerativeHint,
    Eos,
}

/// Encoder token sequence with a segment label per position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CombinedSequence {
    pub tokens: Vec<String>,
    pub ids: Vec<usize>,
    pub segments: Vec<Segment>,
}

impl CombinedSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Space-joined surface form, e.g. `<sos> what ... <eos>`.
    pub fn render(&self) -> String {
        self.tokens.join(" ")
    }

    fn push(&mut self, token: &str, id: usize, seg: Segment) {
        self.tokens.push(token.to_owned());
        self.ids.push(id);
        self.segments.push(seg);
    }
}

/// Assembles `<sos> question [<sep> classifier hints] [<sep> generative hint
/// × generative_repeat] <eos>`.
///
/// Classifier hints appear in descending probability order, each repeated
/// [`repeat_count`] times; a segment with no tokens is omitted together with
/// its separator. When the result exceeds `max_len`, tokens are dropped from
/// the tail of the hint region; the question is never truncated.
pub fn build_combined_sequence(
    question: &TokenizedText,
    hints: Option<&HintSet>,
    vocab: &Vocabulary,
    generative_repeat: usize,
    max_len: usize,
) -> Result<CombinedSequence> {
    if question.is_empty() {
        return Err(Error::Validation("question has no tokens".into()));
    }
    if question.len() + 2 > max_len {
        return Err(Error::TooLong {
            len: question.len() + 2,
            max: max_len,
        });
    }

    let mut seq = CombinedSequence {
        tokens: Vec::new(),
        ids: Vec::new(),
        segments: Vec::new(),
    };
    seq.push(RESERVED[SOS], SOS, Segment::Sos);
    for tok in &question.tokens {
        seq.push(tok, vocab.id(tok), Segment::Question);
    }

    // (token, segment) pairs of the hint region, separators included.
    let mut region: Vec<(String, Segment)> = Vec::new();
    if let Some(h) = hints {
        let mut classifier = Vec::new();
        for hint in &h.classifier {
            let toks = preprocess(&hint.text, question.language).tokens;
            for _ in 0..repeat_count(hint.prob)? {
                classifier.extend(toks.iter().cloned());
            }
        }
        if !classifier.is_empty() {
            region.push((RESERVED[SEP].to_owned(), Segment::Sep));
            region.extend(classifier.into_iter().map(|t| (t, Segment::ClassifierHint)));
        }
        if let Some(text) = &h.generative {
            let toks = preprocess(text, question.language).tokens;
            if !toks.is_empty() && generative_repeat > 0 {
                region.push((RESERVED[SEP].to_owned(), Segment::Sep));
                for _ in 0..generative_repeat {
                    region.extend(toks.iter().map(|t| (t.clone(), Segment::GenerativeHint)));
                }
            }
        }
    }

    let budget = max_len - seq.len() - 1;
    region.truncate(budget);
    while region.last().is_some_and(|(_, s)| *s == Segment::Sep) {
        region.pop();
    }
    for (tok, segment) in region {
        let id = if segment == Segment::Sep {
            SEP
        } else {
            vocab.id(&tok)
        };
        seq.push(&tok, id, segment);
    }
    seq.push(RESERVED[EOS], EOS, Segment::Eos);
    Ok(seq)
}

/// Patch features of one image: `rows` patches × `cols` dimensions,
/// row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualFeatures {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl VisualFeatures {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(Error::Shape {
                op: "visual_features",
                lhs: vec![rows, cols],
                rhs: vec![data.len()],
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite visual feature at row {}, column {}",
                i / cols,
                i % cols
            )));
        }
        Ok(VisualFeatures { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self.data.iter().map(|&v| T::lit(v as f64)).collect();
        Tensor::new(data, &[self.rows, self.cols]).expect("validated shape")
    }
}

/// Drops the leading class-token row of a vision encoder output.
pub fn strip_cls(raw: &VisualFeatures) -> Result<VisualFeatures> {
    if raw.rows < 2 {
        return Err(Error::Validation(format!(
            "need at least 2 feature rows to drop the class token, got {}",
            raw.rows
        )));
    }
    VisualFeatures::new(raw.rows - 1, raw.cols, raw.data[raw.cols..].to_vec())
}

/// Concatenates text embeddings `[L, D]` with patch features `[P, D]` along
/// the sequence axis. Also returns position ids `1..=L+P`.
pub fn fuse<T: Scalar>(
    text: &Tensor<T>,
    visual: Option<&VisualFeatures>,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let s = text.shape();
    if s.len() != 2 {
        return Err(Error::Shape {
            op: "fuse",
            lhs: s.to_vec(),
            rhs: Vec::new(),
        });
    }
    let fused = match visual {
        None => text.clone(),
        Some(v) => {
            if v.cols != s[1] {
                return Err(Error::Shape {
                    op: "fuse",
                    lhs: vec![s[0], s[1]],
                    rhs: vec![v.rows, v.cols],
                });
            }
            concat_rows(text, &v.to_tensor())?
        }
    };
    let positions = (1..=fused.shape()[0]).collect();
    Ok((fused, positions))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::Language;
    use proptest::prelude::*;

    fn hint(text: &str, prob: f64) -> ClassifierHint {
        ClassifierHint {
            text: text.into(),
            prob,
        }
    }

    fn question(s: &str) -> TokenizedText {
        preprocess(s, Language::En)
    }

    #[test]
    fn repeat_counts_for_five_hint_fixture() {
        let got: Vec<usize> = [0.1568, 0.1338, 0.0899, 0.0786, 0.0655]
            .iter()
            .map(|&p| repeat_count(p).unwrap())
            .collect();
        assert_eq!(got, vec![7, 6, 4, 3, 3]);
        assert_eq!(repeat_count(0.0).unwrap(), 0);
        assert_eq!(repeat_count(1.0).unwrap(), 50);
        assert_eq!(repeat_count(0.58).unwrap(), 29);
        assert!(repeat_count(1.01).is_err());
        assert!(repeat_count(-0.1).is_err());
        assert!(repeat_count(f64::NAN).is_err());
    }

    #[test]
    fn no_hints_gives_question_only() {
        let v = Vocabulary::default();
        let seq = build_combined_sequence(&question("what is it"), None, &v, 10, 64).unwrap();
        assert_eq!(seq.render(), "<sos> what is it <eos>");
    }

    #[test]
    fn zero_repeat_hint_leaves_no_separator() {
        let v = Vocabulary::default();
        let h = HintSet::new(vec![hint("cat", 0.01)], None).unwrap();
        let seq = build_combined_sequence(&question("what"), Some(&h), &v, 10, 64).unwrap();
        assert_eq!(seq.render(), "<sos> what <eos>");
    }

    #[test]
    fn generative_only_segment() {
        let v = Vocabulary::default();
        let h = HintSet::new(vec![], Some("two dogs".into())).unwrap();
        let seq = build_combined_sequence(&question("what"), Some(&h), &v, 2, 64).unwrap();
        assert_eq!(seq.render(), "<sos> what <sep> two dogs two dogs <eos>");
    }

    #[test]
    fn truncates_hint_tail_without_dangling_sep() {
        let v = Vocabulary::default();
        let h = HintSet::new(vec![hint("cat", 0.1)], Some("dog".into())).unwrap();
        // <sos> q <sep> cat×5 <sep> dog×10 <eos> = 20 tokens
        let seq = build_combined_sequence(&question("q"), Some(&h), &v, 10, 9).unwrap();
        assert_eq!(seq.render(), "<sos> q <sep> cat cat cat cat cat <eos>");
        let seq = build_combined_sequence(&question("q"), Some(&h), &v, 10, 10).unwrap();
        assert_eq!(seq.render(), "<sos> q <sep> cat cat cat cat cat <eos>");
    }

    #[test]
    fn question_too_long_is_error() {
        let v = Vocabulary::default();
        let err = build_combined_sequence(&question("a b c d"), None, &v, 10, 5).unwrap_err();
        assert!(matches!(err, Error::TooLong { len: 6, max: 5 }));
        assert!(build_combined_sequence(&question("..."), None, &v, 10, 5).is_err());
    }

    #[test]
    fn hintset_validation() {
        assert!(HintSet::new(vec![hint("a", 1.5)], None).is_err());
        assert!(HintSet::new(vec![hint("a", 0.1); 6], None).is_err());
        let h = HintSet::new(vec![hint("a", 0.1), hint("b", 0.3)], None).unwrap();
        assert_eq!(h.classifier()[0].text, "b");
        let parsed: std::result::Result<HintSet, _> =
            serde_json::from_str(r#"{"classifier":[{"text":"x","prob":2.0}]}"#);
        assert!(parsed.is_err());
    }

    #[test]
    fn hint_mode_selection() {
        let h = HintSet::new(vec![hint("a", 0.2)], Some("b".into())).unwrap();
        assert!(HintMode::None.select(&h).is_none());
        assert!(HintMode::Classifier
            .select(&h)
            .unwrap()
            .generative()
            .is_none());
        assert!(HintMode::Generative
            .select(&h)
            .unwrap()
            .classifier()
            .is_empty());
        assert_eq!(HintMode::Both.select(&h).unwrap(), h);
        assert_eq!(
            "generative".parse::<HintMode>().unwrap(),
            HintMode::Generative
        );
    }

    #[test]
    fn strip_cls_shifts_rows() {
        let raw = VisualFeatures::new(3, 2, vec![9.0, 9.0, 1.0, 2.0, 3.0, 4.0]).unwrap();
        let v = strip_cls(&raw).unwrap();
        assert_eq!((v.rows(), v.cols()), (2, 2));
        assert_eq!(v.row(0), &[1.0, 2.0]);
        let one = VisualFeatures::new(1, 2, vec![0.0, 0.0]).unwrap();
        assert!(strip_cls(&one).is_err());
        let big = VisualFeatures::new(197, 768, vec![0.5; 197 * 768]).unwrap();
        let s = strip_cls(&big).unwrap();
        assert_eq!((s.rows(), s.cols()), (196, 768));
    }

    #[test]
    fn visual_features_reject_nan() {
        assert!(VisualFeatures::new(1, 2, vec![0.0, f32::NAN]).is_err());
        assert!(VisualFeatures::new(1, 2, vec![0.0]).is_err());
    }

    #[test]
    fn fuse_concatenates_text_then_patches() {
        let text = Tensor::<f64>::new((0..12).map(f64::from).collect(), &[3, 4]).unwrap();
        let vis = VisualFeatures::new(2, 4, vec![-1.0; 8]).unwrap();
        let (f, pos) = fuse(&text, Some(&vis)).unwrap();
        assert_eq!(f.shape(), &[5, 4]);
        assert_eq!(&f.to_vec()[..12], &text.to_vec()[..]);
        assert_eq!(&f.to_vec()[12..], &[-1.0; 8]);
        assert_eq!(pos, vec![1, 2, 3, 4, 5]);

        let (same, pos) = fuse(&text, None).unwrap();
        assert_eq!(same.to_vec(), text.to_vec());
        assert_eq!(pos, vec![1, 2, 3]);

        let wrong = VisualFeatures::new(2, 3, vec![0.0; 6]).unwrap();
        let msg = fuse(&text, Some(&wrong)).unwrap_err().to_string();
        assert!(msg.contains("[3, 4]") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn fuse_reference_scale() {
        let text = Tensor::<f32>::zeros(&[60, 768]);
        let vis = VisualFeatures::new(196, 768, vec![0.0; 196 * 768]).unwrap();
        let (f, _) = fuse(&text, Some(&vis)).unwrap();
        assert_eq!(f.shape(), &[256, 768]);
    }

    proptest! {
        #[test]
        fn segments_partition_and_question_kept(
            probs in proptest::collection::vec(0.0f64..=1.0, 0..=5),
            gen in proptest::option::of("[a-z]{1,5}( [a-z]{1,5})?"),
            qlen in 1usize..8,
            max_len in 10usize..120,
        ) {
            let hints: Vec<_> = probs.iter().enumerate().map(|(i, &p)| hint(&format!("h{i}"), p)).collect();
            let total: usize = probs.iter().map(|&p| repeat_count(p).unwrap()).sum();
            prop_assert!(total <= 250);
            let h = HintSet::new(hints, gen).unwrap();
            let q = question(&vec!["w"; qlen].join(" "));
            let v = Vocabulary::default();
            let seq = build_combined_sequence(&q, Some(&h), &v, 10, max_len).unwrap();
            prop_assert!(seq.len() <= max_len);
            prop_assert_eq!(seq.segments.len(), seq.ids.len());
            prop_assert_eq!(seq.segments[0], Segment::Sos);
            prop_assert_eq!(*seq.segments.last().unwrap(), Segment::Eos);
            prop_assert_eq!(seq.segments.iter().filter(|s| **s == Segment::Question).count(), qlen);
            for w in seq.segments.windows(2) {
                prop_assert!(!(w[0] == Segment::Sep && (w[1] == Segment::Sep || w[1] == Segment::Eos)));
            }
            let again = build_combined_sequence(&q, Some(&h), &v, 10, max_len).unwrap();
            prop_assert_eq!(again, seq);
        }
    }
}
