use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{read_jsonl, write_jsonl};
use crate::error::{Error, Result};
use crate::fusion::{ClassifierHint, HintSet};

/// Hint file line: `{"sample_id", "classifier": [{"text", "prob"}], "generative"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HintRecord {
    pub sample_id: String,
    #[serde(default)]
    pub classifier: Vec<ClassifierHint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generative: Option<String>,
}

pub fn load_hints(path: &Path) -> Result<BTreeMap<String, HintSet>> {
    let mut out = BTreeMap::new();
    for (line, rec) in read_jsonl::<HintRecord>(path)? {
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let hints = HintSet::new(rec.classifier, rec.generative).map_err(|e| err(e.to_string()))?;
        if out.insert(rec.sample_id.clone(), hints).is_some() {
            return Err(err(format!("duplicate sample_id `{}`", rec.sample_id)));
        }
    }
    Ok(out)
}

pub fn save_hints(path: &Path, hints: &BTreeMap<String, HintSet>) -> Result<()> {
    write_jsonl(
        path,
        hints.iter().map(|(id, h)| HintRecord {
            sample_id: id.clone(),
            classifier: h.classifier().to_vec(),
            generative: h.generative().map(str::to_owned),
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    #[test]
    fn parses_and_sorts_candidates() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.jsonl");
        fs::write(
            &p,
            r#"{"sample_id":"s1","classifier":[{"text":"food","prob":0.0899},{"text":"fruit","prob":0.1568}],"generative":"pineapples"}
{"sample_id":"s2"}
"#,
        )
        .unwrap();
        let h = load_hints(&p).unwrap();
        assert_eq!(h["s1"].classifier()[0].text, "fruit");
        assert_eq!(h["s1"].generative(), Some("pineapples"));
        assert!(h["s2"].is_empty());

        let q = dir.path().join("h2.jsonl");
        save_hints(&q, &h).unwrap();
        assert_eq!(load_hints(&q).unwrap(), h);
    }

    #[test]
    fn bad_probability_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.jsonl");
        fs::write(
            &p,
            "{\"sample_id\":\"s1\"}\n{\"sample_id\":\"s2\",\"classifier\":[{\"text\":\"x\",\"prob\":1.2}]}\n",
        )
        .unwrap();
        assert!(matches!(load_hints(&p), Err(Error::Parse { line: 2, .. })));
    }
}
