use serde::Serialize;

use crate::fusion::{CombinedSequence, Segment};
use crate::tensor::{Scalar, Tensor};

/// Decoder-to-source attention weights: one row per generated token, one
/// column per source position. Rows sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
}

impl AttentionMap {
    /// Cuts sample `b`'s first `rows` rows and `cols` columns out of a
    /// `[batch, tgt_len, src_len]` weight tensor.
    pub(crate) fn from_batch<T: Scalar>(w: &Tensor<T>, b: usize, rows: usize, cols: usize) -> Self {
        let s = w.shape();
        let (t_len, s_len) = (s[1], s[2]);
        let d = w.data();
        let mut weights = Vec::with_capacity(rows * cols);
        for t in 0..rows.min(t_len) {
            let base = (b * t_len + t) * s_len;
            weights.extend(
                d[base..base + cols]
                    .iter()
                    .map(|v| v.to_f64().unwrap_or(f64::NAN)),
            );
        }
        AttentionMap {
            rows: rows.min(t_len),
            cols,
            weights,
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.weights[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|r| self.row(r).iter().sum()).collect()
    }

    /// Comma-separated matrix, one line per row, full `f64` precision.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for r in 0..self.rows {
            let line: Vec<String> = self.row(r).iter().map(|v| format!("{v}")).collect();
            s.push_str(&line.join(","));
            s.push('\n');
        }
        s
    }

    /// Binary 8-bit PGM, one pixel per weight, intensity `round(255·w)`.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.cols, self.rows).into_bytes();
        out.extend(
            self.weights
                .iter()
                .map(|w| (w.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
        out
    }
}

/// An attention map with axis labels: source tokens (question, hints and
/// patch placeholders) and generated tokens.
#[derive(Debug, Clone, Serialize)]
pub struct LabeledAttention {
    pub layer: usize,
    pub source_labels: Vec<String>,
    pub source_segments: Vec<String>,
    pub target_labels: Vec<String>,
    #[serde(skip)]
    pub map: AttentionMap,
}

impl LabeledAttention {
    pub fn new(
        layer: usize,
        map: AttentionMap,
        seq: &CombinedSequence,
        patches: usize,
        answer: &[String],
    ) -> Self {
        let mut source_labels = seq.tokens.clone();
        let mut source_segments: Vec<String> = seq.segments.iter().map(segment_name).collect();
        for p in 0..patches {
            source_labels.push(format!("<patch_{}>", p + 1));
            source_segments.push("patch".into());
        }
        LabeledAttention {
            layer,
            source_labels,
            source_segments,
            target_labels: answer.to_vec(),
            map,
        }
    }
}

fn segment_name(s: &Segment) -> String {
    serde_json::to_value(s)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_weights_render_uniform_gray() {
        let map = AttentionMap {
            rows: 2,
            cols: 4,
            weights: vec![0.25; 8],
        };
        let pgm = map.to_pgm();
        let header = b"P5\n4 2\n255\n";
        assert_eq!(&pgm[..header.len()], header);
        assert!(pgm[header.len()..].iter().all(|&p| p == 64));
        assert_eq!(pgm.len() - header.len(), 8);
    }

    #[test]
    fn csv_has_one_line_per_row() {
        let map = AttentionMap {
            rows: 2,
            cols: 2,
            weights: vec![0.5, 0.5, 1.0, 0.0],
        };
        assert_eq!(map.to_csv(), "0.5,0.5\n1,0\n");
        assert_eq!(map.row_sums(), vec![1.0, 1.0]);
    }
}
