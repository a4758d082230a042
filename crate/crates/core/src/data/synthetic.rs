//! Templated question/answer data over small synthetic scenes, with oracle
//! hints and visual features projected from scene attributes.
//!
//! A scene holds one object with a category, color, count and spatial slot.
//! Each patch row of the feature matrix is background noise, plus the sum of
//! the category, color and count codes on the patches covered by the slot.
//! Row 0 is a `[CLS]`-style summary (the mean of the patch rows) so that
//! files look like raw extractor output.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{save_dataset, save_hints, FeatureStore, QASample};
use crate::error::{Error, Result};
use crate::fusion::{ClassifierHint, HintSet, VisualFeatures};
use crate::vocab::Language;

pub const CATEGORIES: usize = 8;
pub const COLORS: usize = 6;
pub const COUNTS: usize = 4;
pub const SLOTS: usize = 4;

const CODE_STD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_samples: usize,
    pub languages: Vec<Language>,
    /// Standard deviation of per-element feature noise.
    pub noise: f64,
    /// Probability that the generative hint is replaced by a wrong word.
    pub corruption: f64,
    pub seed: u64,
    /// Patches per image (excluding the summary row).
    pub patches: usize,
    /// Feature width; must equal the model embedding width.
    pub dim: usize,
    pub dev_fraction: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_samples: 2000,
            languages: vec![Language::En, Language::Vi, Language::Ja],
            noise: 0.1,
            corruption: 0.1,
            seed: 0,
            patches: 8,
            dim: 32,
            dev_fraction: 0.1,
        }
    }
}

impl SyntheticConfig {
    fn validate(&self) -> Result<()> {
        if self.n_samples == 0 || self.languages.is_empty() {
            return Err(Error::Config(
                "synthetic data needs samples and languages".into(),
            ));
        }
        if self.patches < SLOTS || self.dim == 0 {
            return Err(Error::Config(format!(
                "synthetic scenes need at least {SLOTS} patches and a positive width"
            )));
        }
        for (name, v) in [
            ("noise", self.noise),
            ("corruption", self.corruption),
            ("dev_fraction", self.dev_fraction),
        ] {
            if !(v.is_finite() && v >= 0.0) || (name != "noise" && v > 1.0) {
                return Err(Error::Config(format!("bad {name} {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub category: usize,
    pub color: usize,
    /// Zero-based; object count is `count + 1`.
    pub count: usize,
    pub slot: usize,
}

/// Random attribute codes shared by every scene of a dataset.
#[derive(Debug, Clone)]
pub struct Codebook {
    dim: usize,
    category: Vec<Vec<f32>>,
    color: Vec<Vec<f32>>,
    count: Vec<Vec<f32>>,
}

impl Codebook {
    pub fn new(dim: usize, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, CODE_STD).expect("valid std");
        let mut table = |n: usize| -> Vec<Vec<f32>> {
            (0..n)
                .map(|_| (0..dim).map(|_| normal.sample(rng) as f32).collect())
                .collect()
        };
        Codebook {
            dim,
            category: table(CATEGORIES),
            color: table(COLORS),
            count: table(COUNTS),
        }
    }
}

impl SyntheticScene {
    /// Patch `p` shows the object when `p % SLOTS == slot`.
    pub fn covers(&self, patch: usize) -> bool {
        patch % SLOTS == self.slot
    }

    /// `(patches + 1) × dim` features, summary row first.
    pub fn features(
        &self,
        book: &Codebook,
        patches: usize,
        noise: f64,
        rng: &mut impl Rng,
    ) -> VisualFeatures {
        let d = book.dim;
        let normal = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).expect("valid std");
        let mut rows = vec![0f32; (patches + 1) * d];
        for p in 0..patches {
            let row = &mut rows[(p + 1) * d..(p + 2) * d];
            for (j, v) in row.iter_mut().enumerate() {
                if self.covers(p) {
                    *v = book.category[self.category][j]
                        + book.color[self.color][j]
                        + book.count[self.count][j];
                }
                if noise > 0.0 {
                    *v += normal.sample(rng) as f32;
                }
            }
        }
        for j in 0..d {
            let mean = (1..=patches).map(|p| rows[p * d + j]).sum::<f32>() / patches as f32;
            rows[j] = mean;
        }
        VisualFeatures::new(patches + 1, d, rows).expect("finite features")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum QuestionKind {
    Color,
    Count,
    Where,
    What,
}

const KINDS: [QuestionKind; 4] = [
    QuestionKind::Color,
    QuestionKind::Count,
    QuestionKind::Where,
    QuestionKind::What,
];

struct Lexicon {
    categories: [&'static str; CATEGORIES],
    colors: [&'static str; COLORS],
    counts: [&'static str; COUNTS],
    slots: [&'static str; SLOTS],
}

const EN: Lexicon = Lexicon {
    categories: ["apple", "ball", "cup", "dog", "cat", "car", "book", "chair"],
    colors: ["red", "green", "blue", "yellow", "black", "white"],
    counts: ["one", "two", "three", "four"],
    slots: ["left", "right", "top", "bottom"],
};

const VI: Lexicon = Lexicon {
    categories: [
        "quả_táo",
        "quả_bóng",
        "cái_cốc",
        "con_chó",
        "con_mèo",
        "xe_hơi",
        "quyển_sách",
        "cái_ghế",
    ],
    colors: ["đỏ", "xanh_lá", "xanh_dương", "vàng", "đen", "trắng"],
    counts: ["một", "hai", "ba", "bốn"],
    slots: ["bên_trái", "bên_phải", "phía_trên", "phía_dưới"],
};

const JA: Lexicon = Lexicon {
    categories: ["りんご", "ボール", "コップ", "犬", "猫", "車", "本", "椅子"],
    colors: ["赤", "緑", "青", "黄色", "黒", "白"],
    counts: ["一つ", "二つ", "三つ", "四つ"],
    slots: ["左", "右", "上", "下"],
};

/// Language-neutral symbols, for tests that want ASCII-only text.
const SYN: Lexicon = Lexicon {
    categories: ["o0", "o1", "o2", "o3", "o4", "o5", "o6", "o7"],
    colors: ["c0", "c1", "c2", "c3", "c4", "c5"],
    counts: ["n1", "n2", "n3", "n4"],
    slots: ["s0", "s1", "s2", "s3"],
};

fn lexicon(lang: Language) -> &'static Lexicon {
    match lang {
        Language::En => &EN,
        Language::Vi => &VI,
        Language::Ja => &JA,
        Language::Synthetic => &SYN,
    }
}

/// Question, answer, the keyword a hint model would predict, and the
/// alternatives of the same attribute.
fn render(
    lang: Language,
    kind: QuestionKind,
    s: &SyntheticScene,
) -> (String, String, &'static str, &'static [&'static str]) {
    let lx = lexicon(lang);
    let (cat, col, cnt, slot) = (
        lx.categories[s.category],
        lx.colors[s.color],
        lx.counts[s.count],
        lx.slots[s.slot],
    );
    use QuestionKind::*;
    let (q, a) = match (lang, kind) {
        (Language::En, Color) => (
            format!("What color is the {cat} in the picture?"),
            col.to_string(),
        ),
        (Language::En, Count) => (
            format!("How many {cat} are there in this image?"),
            cnt.to_string(),
        ),
        (Language::En, Where) => (
            format!("Where is the {col} {cat} located?"),
            format!("on the {slot}"),
        ),
        (Language::En, What) => (
            format!("What object can be seen on the {slot} of the photo?"),
            format!("{col} {cat}"),
        ),
        (Language::Vi, Color) => (format!("{cat} trong bức ảnh có màu gì?"), col.to_string()),
        (Language::Vi, Count) => (
            format!("Có bao_nhiêu {cat} trong bức ảnh này?"),
            cnt.to_string(),
        ),
        (Language::Vi, Where) => (format!("{cat} màu {col} nằm ở đâu?"), format!("ở {slot}")),
        (Language::Vi, What) => (
            format!("Vật gì xuất_hiện ở {slot} của bức ảnh?"),
            format!("{cat} màu {col}"),
        ),
        (Language::Ja, Color) => (format!("写真 の {cat} は 何 色 です か?"), col.to_string()),
        (Language::Ja, Count) => (
            format!("この 画像 に {cat} は いくつ あり ます か?"),
            cnt.to_string(),
        ),
        (Language::Ja, Where) => (
            format!("{col} {cat} は どこ に あり ます か?"),
            format!("{slot} に あり ます"),
        ),
        (Language::Ja, What) => (
            format!("写真 の {slot} に 何 が あり ます か?"),
            format!("{col} の {cat}"),
        ),
        (Language::Synthetic, Color) => (format!("q color {cat}"), col.to_string()),
        (Language::Synthetic, Count) => (format!("q count {cat}"), cnt.to_string()),
        (Language::Synthetic, Where) => (format!("q where {col} {cat}"), format!("at {slot}")),
        (Language::Synthetic, What) => (format!("q what {slot}"), format!("{col} {cat}")),
    };
    let (keyword, pool): (&str, &[&str]) = match kind {
        Color => (col, &lx.colors),
        Count => (cnt, &lx.counts),
        Where => (slot, &lx.slots),
        What => (cat, &lx.categories),
    };
    (q, a, keyword, pool)
}

/// Generated dataset plus everything the oracle providers produce.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub train: Vec<QASample>,
    pub dev: Vec<QASample>,
    pub hints: BTreeMap<String, HintSet>,
    /// Raw features (summary row included) keyed by image id.
    pub features: BTreeMap<String, VisualFeatures>,
    pub scenes: BTreeMap<String, SyntheticScene>,
    /// Gold keyword per sample id.
    pub keywords: BTreeMap<String, String>,
}

/// Where [`SyntheticData::write`] put its files.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPaths {
    pub train: PathBuf,
    pub dev: PathBuf,
    pub hints: PathBuf,
    pub features: PathBuf,
}

impl SyntheticPaths {
    pub fn in_dir(dir: &Path) -> Self {
        SyntheticPaths {
            train: dir.join("train.jsonl"),
            dev: dir.join("dev.jsonl"),
            hints: dir.join("hints.jsonl"),
            features: dir.join("features"),
        }
    }
}

impl SyntheticData {
    pub fn all_samples(&self) -> impl Iterator<Item = &QASample> {
        self.train.iter().chain(&self.dev)
    }

    pub fn write(&self, dir: &Path) -> Result<SyntheticPaths> {
        let paths = SyntheticPaths::in_dir(dir);
        save_dataset(&paths.train, &self.train)?;
        save_dataset(&paths.dev, &self.dev)?;
        save_hints(&paths.hints, &self.hints)?;
        let store = FeatureStore::new(&paths.features);
        for (id, f) in &self.features {
            store.save_raw(id, f)?;
        }
        Ok(paths)
    }
}

fn classifier_hints(keyword: &str, pool: &[&str], rng: &mut ChaCha8Rng) -> Vec<ClassifierHint> {
    let mut prob = rng.gen_range(0.1..=0.5);
    let mut hints = vec![ClassifierHint {
        text: keyword.to_owned(),
        prob,
    }];
    let mut others: Vec<&str> = pool.iter().copied().filter(|w| *w != keyword).collect();
    others.shuffle(rng);
    let n = rng.gen_range(1..=4).min(others.len());
    for w in &others[..n] {
        prob *= rng.gen_range(0.3..0.9);
        hints.push(ClassifierHint {
            text: (*w).to_owned(),
            prob,
        });
    }
    hints
}

pub fn generate(config: &SyntheticConfig) -> Result<SyntheticData> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let book = Codebook::new(config.dim, &mut rng);
    let width = config.n_samples.to_string().len().max(5);
    let n_dev = (config.n_samples as f64 * config.dev_fraction).round() as usize;
    let n_train = config.n_samples - n_dev.min(config.n_samples);

    let mut data = SyntheticData {
        train: Vec::new(),
        dev: Vec::new(),
        hints: BTreeMap::new(),
        features: BTreeMap::new(),
        scenes: BTreeMap::new(),
        keywords: BTreeMap::new(),
    };
    for i in 0..config.n_samples {
        let sample_id = format!("s{i:0width$}");
        let image_id = format!("img{i:0width$}");
        let language = *config.languages.choose(&mut rng).expect("non-empty");
        let kind = *KINDS.choose(&mut rng).expect("non-empty");
        let scene = SyntheticScene {
            category: rng.gen_range(0..CATEGORIES),
            color: rng.gen_range(0..COLORS),
            count: rng.gen_range(0..COUNTS),
            slot: rng.gen_range(0..SLOTS),
        };
        let (question, answer, keyword, pool) = render(language, kind, &scene);
        let classifier = classifier_hints(keyword, pool, &mut rng);
        let generative = if rng.gen_bool(config.corruption) {
            let wrong: Vec<&str> = pool.iter().copied().filter(|w| *w != keyword).collect();
            (*wrong.choose(&mut rng).expect("pools have alternatives")).to_owned()
        } else {
            keyword.to_owned()
        };
        let features = scene.features(&book, config.patches, config.noise, &mut rng);

        data.hints.insert(
            sample_id.clone(),
            HintSet::new(classifier, Some(generative))?,
        );
        data.features.insert(image_id.clone(), features);
        data.scenes.insert(image_id.clone(), scene);
        data.keywords.insert(sample_id.clone(), keyword.to_owned());
        let sample = QASample {
            sample_id,
            image_id,
            language,
            question,
            answer,
        };
        if i < n_train {
            data.train.push(sample);
        } else {
            data.dev.push(sample);
        }
    }
    Ok(data)
}
