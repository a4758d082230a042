use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{read_jsonl, write_jsonl};
use crate::error::{Error, Result};
use crate::vocab::Language;

/// One annotated question-answer pair about an image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QASample {
    pub sample_id: String,
    pub image_id: String,
    pub language: Language,
    pub question: String,
    pub answer: String,
}

/// Reads a line-delimited JSON dataset, rejecting blank questions or
/// answers and duplicate ids. The result is sorted by `sample_id`.
pub fn load_dataset(path: &Path) -> Result<Vec<QASample>> {
    let mut seen = HashSet::new();
    let mut samples = Vec::new();
    for (line, s) in read_jsonl::<QASample>(path)? {
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        if s.question.trim().is_empty() {
            return Err(err("empty question".into()));
        }
        if s.answer.trim().is_empty() {
            return Err(err("empty answer".into()));
        }
        if !seen.insert(s.sample_id.clone()) {
            return Err(err(format!("duplicate sample_id `{}`", s.sample_id)));
        }
        samples.push(s);
    }
    samples.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    Ok(samples)
}

pub fn save_dataset(path: &Path, samples: &[QASample]) -> Result<()> {
    write_jsonl(path, samples)
}
