//! Answer-quality metrics: multiset token F1, corpus BLEU-1..4 and their
//! average, smoothed sentence BLEU for per-sample distributions, and simple
//! descriptive statistics of answer sets.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::Language;

pub const MAX_ORDER: usize = 4;

fn counts<S: AsRef<str>>(tokens: &[S]) -> HashMap<&str, usize> {
    let mut m = HashMap::new();
    for t in tokens {
        *m.entry(t.as_ref()).or_insert(0) += 1;
    }
    m
}

/// Harmonic mean of multiset precision and recall. Two empty answers score
/// 1; exactly one empty answer scores 0.
pub fn token_f1<S: AsRef<str>>(pred: &[S], gold: &[S]) -> f64 {
    match (pred.is_empty(), gold.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let gc = counts(gold);
    let overlap: usize = counts(pred)
        .iter()
        .map(|(t, &c)| c.min(gc.get(t).copied().unwrap_or(0)))
        .sum();
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / pred.len() as f64;
    let r = overlap as f64 / gold.len() as f64;
    2.0 * p * r / (p + r)
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped matches and candidate n-gram total for one sentence pair.
fn clipped<S: AsRef<str>>(cand: &[S], reference: &[S], n: usize) -> (usize, usize) {
    let rc = ngram_counts(reference, n);
    let cc = ngram_counts(cand, n);
    let matched = cc
        .iter()
        .map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, cand.len().saturating_sub(n - 1))
}

/// BLEU-1..n and their arithmetic mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuScores {
    /// Modified n-gram precisions p_1..p_n.
    pub precisions: Vec<f64>,
    pub bleu: Vec<f64>,
    pub average: f64,
}

impl BleuScores {
    fn from_precisions(precisions: &[f64], bp: f64) -> Self {
        let mut bleu = Vec::with_capacity(precisions.len());
        let mut log_sum = 0.0;
        for (k, &p) in precisions.iter().enumerate() {
            log_sum += if p > 0.0 { p.ln() } else { f64::NEG_INFINITY };
            let n = (k + 1) as f64;
            bleu.push(if log_sum.is_finite() {
                bp * (log_sum / n).exp()
            } else {
                0.0
            });
        }
        let average = bleu.iter().sum::<f64>() / bleu.len() as f64;
        BleuScores {
            precisions: precisions.to_vec(),
            bleu,
            average,
        }
    }
}

fn brevity_penalty(cand_len: usize, ref_len: usize) -> f64 {
    if cand_len == 0 {
        return if ref_len == 0 { 1.0 } else { 0.0 };
    }
    if cand_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    }
}

/// Corpus BLEU with one reference per candidate: clipped n-gram counts are
/// pooled over the corpus, the brevity penalty uses total lengths, and no
/// smoothing is applied. An order for which neither candidates nor
/// references contain any n-gram has precision 1; one where only the
/// references do has precision 0.
pub fn corpus_bleu<S: AsRef<str>>(
    candidates: &[Vec<S>],
    references: &[Vec<S>],
    max_n: usize,
) -> Result<BleuScores> {
    if candidates.len() != references.len() {
        return Err(Error::Validation(format!(
            "{} candidates but {} references",
            candidates.len(),
            references.len()
        )));
    }
    if max_n == 0 {
        return Err(Error::Config("BLEU order must be at least 1".into()));
    }
    let mut precisions = Vec::with_capacity(max_n);
    for n in 1..=max_n {
        let (mut matched, mut total, mut ref_total) = (0, 0, 0);
        for (c, r) in candidates.iter().zip(references) {
            let (m, t) = clipped(c, r, n);
            matched += m;
            total += t;
            ref_total += r.len().saturating_sub(n - 1);
        }
        precisions.push(match (total, ref_total) {
            (0, 0) => 1.0,
            (0, _) => 0.0,
            _ => matched as f64 / total as f64,
        });
    }
    let c: usize = candidates.iter().map(Vec::len).sum();
    let r: usize = references.iter().map(Vec::len).sum();
    Ok(BleuScores::from_precisions(
        &precisions,
        brevity_penalty(c, r),
    ))
}

/// Sentence BLEU for per-sample score distributions. Orders above one use
/// add-one smoothing, `(m + 1) / (t + 1)`.
pub fn sentence_bleu<S: AsRef<str>>(cand: &[S], reference: &[S], max_n: usize) -> BleuScores {
    let precisions: Vec<f64> = (1..=max_n.max(1))
        .map(|n| {
            let (m, t) = clipped(cand, reference, n);
            if n == 1 {
                if t == 0 {
                    if reference.is_empty() {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    m as f64 / t as f64
                }
            } else {
                (m as f64 + 1.0) / (t as f64 + 1.0)
            }
        })
        .collect();
    BleuScores::from_precisions(&precisions, brevity_penalty(cand.len(), reference.len()))
}

/// One scored prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPair {
    pub sample_id: String,
    pub language: Language,
    pub prediction: Vec<String>,
    pub gold: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub sample_id: String,
    pub language: Language,
    pub f1: f64,
    /// Mean of smoothed sentence BLEU-1..4.
    pub bleu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubReport {
    pub samples: usize,
    pub f1: f64,
    pub bleu: Vec<f64>,
    pub bleu_average: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub f1: f64,
    /// Corpus BLEU-1..4.
    pub bleu: Vec<f64>,
    pub bleu_average: f64,
    pub per_language: BTreeMap<Language, SubReport>,
    pub per_sample: Vec<SampleScore>,
}

fn sub_report(pairs: &[&ScoredPair]) -> Result<SubReport> {
    let f1 = if pairs.is_empty() {
        0.0
    } else {
        pairs
            .iter()
            .map(|p| token_f1(&p.prediction, &p.gold))
            .sum::<f64>()
            / pairs.len() as f64
    };
    let cands: Vec<Vec<&str>> = pairs
        .iter()
        .map(|p| p.prediction.iter().map(String::as_str).collect())
        .collect();
    let refs: Vec<Vec<&str>> = pairs
        .iter()
        .map(|p| p.gold.iter().map(String::as_str).collect())
        .collect();
    let bleu = corpus_bleu(&cands, &refs, MAX_ORDER)?;
    Ok(SubReport {
        samples: pairs.len(),
        f1,
        bleu: bleu.bleu,
        bleu_average: bleu.average,
    })
}

/// Corpus F1 (mean of per-sample F1), corpus BLEU, per-language breakdown
/// and the per-sample table. Per-sample rows keep input order.
pub fn evaluate(pairs: &[ScoredPair]) -> Result<EvalReport> {
    let all: Vec<&ScoredPair> = pairs.iter().collect();
    let overall = sub_report(&all)?;
    let mut by_lang: BTreeMap<Language, Vec<&ScoredPair>> = BTreeMap::new();
    for p in pairs {
        by_lang.entry(p.language).or_default().push(p);
    }
    let per_language = by_lang
        .into_iter()
        .map(|(l, ps)| Ok((l, sub_report(&ps)?)))
        .collect::<Result<_>>()?;
    let per_sample = pairs
        .iter()
        .map(|p| SampleScore {
            sample_id: p.sample_id.clone(),
            language: p.language,
            f1: token_f1(&p.prediction, &p.gold),
            bleu: sentence_bleu(&p.prediction, &p.gold, MAX_ORDER).average,
        })
        .collect();
    Ok(EvalReport {
        samples: pairs.len(),
        f1: overall.f1,
        bleu: overall.bleu,
        bleu_average: overall.bleu_average,
        per_language,
        per_sample,
    })
}

/// Average answer length and distinct-token count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnswerStats {
    pub answers: usize,
    pub avg_length: f64,
    pub vocab_size: usize,
}

fn answer_stats<'a>(answers: impl Iterator<Item = &'a Vec<String>>) -> AnswerStats {
    let mut n = 0;
    let mut total = 0;
    let mut vocab = BTreeSet::new();
    for a in answers {
        n += 1;
        total += a.len();
        vocab.extend(a.iter().map(String::as_str));
    }
    AnswerStats {
        answers: n,
        avg_length: if n == 0 { 0.0 } else { total as f64 / n as f64 },
        vocab_size: vocab.len(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantRow {
    pub gold: AnswerStats,
    pub predicted: AnswerStats,
}

/// Word-level statistics of gold and predicted answers, overall and per
/// language.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantStats {
    pub overall: QuantRow,
    pub per_language: BTreeMap<Language, QuantRow>,
}

pub fn quantitative_stats(pairs: &[ScoredPair]) -> QuantStats {
    let row = |ps: &[&ScoredPair]| QuantRow {
        gold: answer_stats(ps.iter().map(|p| &p.gold)),
        predicted: answer_stats(ps.iter().map(|p| &p.prediction)),
    };
    let all: Vec<&ScoredPair> = pairs.iter().collect();
    let mut by_lang: BTreeMap<Language, Vec<&ScoredPair>> = BTreeMap::new();
    for p in pairs {
        by_lang.entry(p.language).or_default().push(p);
    }
    QuantStats {
        overall: row(&all),
        per_language: by_lang.iter().map(|(l, ps)| (*l, row(ps))).collect(),
    }
}

/// Per-language counts over equal-width bins covering [0, 1]; the last bin
/// is closed on the right.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_width: f64,
    pub edges: Vec<f64>,
    pub counts: BTreeMap<String, Vec<usize>>,
}

pub fn score_histogram(scores: &[(Language, f64)], bin_width: f64) -> Result<Histogram> {
    if !(bin_width > 0.0 && bin_width <= 1.0) {
        return Err(Error::Config(format!("bad bin width {bin_width}")));
    }
    let bins = (1.0 / bin_width).round().max(1.0) as usize;
    let mut counts: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    counts.insert("all".into(), vec![0; bins]);
    for &(lang, s) in scores {
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::Validation(format!("score {s} outside [0, 1]")));
        }
        // Multiplying (rather than dividing by the width) keeps 0.6 in [0.6, 0.8).
        let bin = ((s * bins as f64 + 1e-9).floor() as usize).min(bins - 1);
        counts.get_mut("all").unwrap()[bin] += 1;
        counts
            .entry(lang.to_string())
            .or_insert_with(|| vec![0; bins])[bin] += 1;
    }
    let edges = (0..=bins).map(|i| i as f64 / bins as f64).collect();
    Ok(Histogram {
        bin_width,
        edges,
        counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn w(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn f1_examples() {
        assert_eq!(token_f1(&w("two people"), &w("two people")), 1.0);
        assert_abs_diff_eq!(
            token_f1(&w("two people standing"), &w("two people")),
            0.8,
            epsilon = 1e-12
        );
        assert_eq!(token_f1(&w("a b"), &w("c d")), 0.0);
        assert_eq!(token_f1::<String>(&[], &[]), 1.0);
        assert_eq!(token_f1(&w(""), &w("x")), 0.0);
        // multiset, not set
        assert_abs_diff_eq!(token_f1(&w("a a"), &w("a")), 2.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn bleu_examples() {
        let s = corpus_bleu(&[w("a b c d e")], &[w("a b c d e")], 4).unwrap();
        assert_eq!(s.bleu, vec![1.0; 4]);
        assert_eq!(s.average, 1.0);

        let s = corpus_bleu(&[w("a b")], &[w("a b c")], 4).unwrap();
        assert_abs_diff_eq!(s.bleu[0], (-0.5f64).exp(), epsilon = 1e-12);
        assert_abs_diff_eq!(s.bleu[0], 0.6065, epsilon = 1e-4);

        let s = corpus_bleu(&[w("x y z")], &[w("a b c")], 4).unwrap();
        assert_eq!(s.bleu, vec![0.0; 4]);
    }

    #[test]
    fn identical_short_answers_score_one() {
        let c = vec![w("red"), w("two"), w("on the left")];
        let s = corpus_bleu(&c, &c, 4).unwrap();
        assert_eq!(s.average, 1.0);
    }

    #[test]
    fn bleu_length_mismatch() {
        assert!(corpus_bleu(&[w("a")], &[], 4).is_err());
    }

    #[test]
    fn sentence_bleu_smoothing() {
        let s = sentence_bleu(&w("red"), &w("red"), 4);
        assert_eq!(s.average, 1.0);
        let s = sentence_bleu(&w("red apple"), &w("green apple"), 4);
        assert!(s.average > 0.0 && s.average < 1.0);
    }

    #[test]
    fn report_per_language() {
        let pairs = vec![
            ScoredPair {
                sample_id: "1".into(),
                language: Language::En,
                prediction: w("red"),
                gold: w("red"),
            },
            ScoredPair {
                sample_id: "2".into(),
                language: Language::Vi,
                prediction: w("xanh"),
                gold: w("đỏ"),
            },
        ];
        let r = evaluate(&pairs).unwrap();
        assert_eq!(r.f1, 0.5);
        assert_eq!(r.per_language[&Language::En].f1, 1.0);
        assert_eq!(r.per_language[&Language::Vi].f1, 0.0);
        assert_eq!(r.per_sample.len(), 2);
        let json = serde_json::to_string(&r).unwrap();
        assert_eq!(
            json,
            serde_json::to_string(&evaluate(&pairs).unwrap()).unwrap()
        );
    }

    #[test]
    fn quant_stats_counts() {
        let pairs = vec![
            ScoredPair {
                sample_id: "1".into(),
                language: Language::En,
                prediction: w("a b"),
                gold: w("a b c"),
            },
            ScoredPair {
                sample_id: "2".into(),
                language: Language::En,
                prediction: w("a b"),
                gold: w("a b c"),
            },
            ScoredPair {
                sample_id: "3".into(),
                language: Language::Ja,
                prediction: w("x"),
                gold: w("y z"),
            },
        ];
        let q = quantitative_stats(&pairs);
        let en = &q.per_language[&Language::En];
        assert_eq!(en.gold.avg_length, 3.0);
        assert_eq!(en.gold.vocab_size, 3);
        assert_eq!(en.predicted.vocab_size, 2);
        let ja = &q.per_language[&Language::Ja];
        assert_eq!((ja.gold.avg_length, ja.gold.vocab_size), (2.0, 2));
        assert_eq!(q.overall.gold.answers, 3);
        assert_abs_diff_eq!(q.overall.gold.avg_length, 8.0 / 3.0, epsilon = 1e-12);
        assert_eq!(q.overall.gold.vocab_size, 5);
        assert_eq!(q.overall.predicted.vocab_size, 3);
    }

    #[test]
    fn histogram_binning() {
        let h = score_histogram(&[(Language::En, 0.0); 4], 0.2).unwrap();
        assert_eq!(h.counts["all"], vec![4, 0, 0, 0, 0]);
        let h = score_histogram(&[(Language::En, 1.0)], 0.2).unwrap();
        assert_eq!(h.counts["en"], vec![0, 0, 0, 0, 1]);

        let scores = [0.0, 0.1, 0.2, 0.35, 0.4, 0.6, 0.61, 0.79, 0.8, 1.0];
        let tagged: Vec<_> = scores.iter().map(|&s| (Language::Vi, s)).collect();
        let h = score_histogram(&tagged, 0.2).unwrap();
        assert_eq!(h.counts["vi"], vec![2, 2, 1, 3, 2]);
        assert_eq!(h.edges.len(), 6);

        assert!(score_histogram(&[(Language::En, 1.2)], 0.2).is_err());
    }

    #[test]
    fn pooled_bleu_need_not_be_monotone() {
        let s = corpus_bleu(&[w("a b"), w("x")], &[w("a b"), w("y")], 2).unwrap();
        assert_abs_diff_eq!(s.bleu[0], 2.0 / 3.0, epsilon = 1e-12);
        assert!(s.bleu[1] > s.bleu[0]);
        // a single pair can do the same: clipping costs a unigram, not a bigram
        let s = corpus_bleu(&[w("a b a")], &[w("b a b")], 2).unwrap();
        assert_eq!(s.precisions, vec![2.0 / 3.0, 1.0]);
        assert!(s.bleu[1] > s.bleu[0]);
    }

    proptest! {
        #[test]
        fn bleu_monotone_when_precisions_are(
            pairs in proptest::collection::vec(
                (proptest::collection::vec(0u8..4, 1..9), proptest::collection::vec(0u8..4, 1..9)),
                1..4,
            ),
        ) {
            let c: Vec<Vec<String>> = pairs.iter().map(|p| p.0.iter().map(|x| x.to_string()).collect()).collect();
            let r: Vec<Vec<String>> = pairs.iter().map(|p| p.1.iter().map(|x| x.to_string()).collect()).collect();
            let s = corpus_bleu(&c, &r, 4).unwrap();
            let p = &s.precisions;
            for k in 1..4 {
                if p[..=k].windows(2).all(|w| w[1] <= w[0]) {
                    prop_assert!(s.bleu[k] <= s.bleu[k - 1] + 1e-12, "{:?} {:?}", p, s.bleu);
                }
            }
        }

        #[test]
        fn f1_bounds_and_exactness(
            a in proptest::collection::vec(0u8..5, 0..8),
            b in proptest::collection::vec(0u8..5, 0..8),
        ) {
            let a: Vec<String> = a.iter().map(|x| x.to_string()).collect();
            let b: Vec<String> = b.iter().map(|x| x.to_string()).collect();
            let f = token_f1(&a, &b);
            prop_assert!((0.0..=1.0).contains(&f));
            let mut sa = a.clone();
            sa.sort();
            let mut sb = b.clone();
            sb.sort();
            prop_assert_eq!(f == 1.0, sa == sb);
            if a.len() == b.len() {
                prop_assert_eq!(f, token_f1(&b, &a));
            }
        }

        #[test]
        fn bleu_is_order_independent(
            pairs in proptest::collection::vec(
                (proptest::collection::vec(0u8..4, 1..6), proptest::collection::vec(0u8..4, 1..6)),
                1..6,
            ),
        ) {
            let c: Vec<Vec<String>> = pairs.iter().map(|p| p.0.iter().map(|x| x.to_string()).collect()).collect();
            let r: Vec<Vec<String>> = pairs.iter().map(|p| p.1.iter().map(|x| x.to_string()).collect()).collect();
            let s = corpus_bleu(&c, &r, 4).unwrap();
            let mut cr: Vec<_> = c.iter().cloned().zip(r.iter().cloned()).collect();
            cr.reverse();
            let (c2, r2): (Vec<_>, Vec<_>) = cr.into_iter().unzip();
            let s2 = corpus_bleu(&c2, &r2, 4).unwrap();
            prop_assert_eq!(s.bleu, s2.bleu);
            prop_assert!(s.average >= 0.0 && s.average <= 1.0);
        }
    }
}
