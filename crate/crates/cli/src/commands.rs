use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use hintvqa::data::synthetic::{generate, SyntheticConfig};
use hintvqa::data::{
    load_dataset, load_hints, load_predictions, write_atomic, write_jsonl, FeatureStore,
    Prediction, QASample,
};
use hintvqa::metrics::{evaluate as score, quantitative_stats, score_histogram, ScoredPair};
use hintvqa::model::load_checkpoint;
use hintvqa::pipeline::{
    build_vocabulary, export_attention_artifacts, prepare_samples, EncodedSample, HintProvider,
    PipelineConfig,
};
use hintvqa::train::{self as trainer, TrainConfig, TrainOutput};
use hintvqa::vocab::preprocess;
use hintvqa::{ConvS2S, HintSet, ModelConfig, Vocabulary};
use serde::Serialize;

use crate::config::{self, FileConfig, ModelFlags, PipelineFlags, TrainFlags};
use crate::{
    AssemblyFlags, BuildVocabArgs, EvaluateArgs, ExportAttentionArgs, GenDataArgs, InputArgs,
    PredictArgs, PrepareArgs, Scale, StatsArgs, Switch, TrainArgs,
};

fn require(path: &Path, what: &str) -> Result<()> {
    ensure!(path.exists(), "{what} not found: {}", path.display());
    Ok(())
}

fn to_json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("serializable");
    v.push(b'\n');
    v
}

pub fn gen_data(a: &GenDataArgs) -> Result<()> {
    let cfg = SyntheticConfig {
        n_samples: a.samples,
        languages: a.languages.clone(),
        noise: a.noise,
        corruption: a.corruption,
        seed: a.seed,
        patches: a.patches,
        dim: a.dim,
        dev_fraction: a.dev_fraction,
    };
    let data = generate(&cfg)?;
    let paths = data.write(&a.out)?;
    println!(
        "wrote {} train and {} dev samples to {}",
        data.train.len(),
        data.dev.len(),
        a.out.display()
    );
    println!("hints: {}", paths.hints.display());
    println!("features: {}", paths.features.display());
    Ok(())
}

pub fn build_vocab(a: &BuildVocabArgs) -> Result<()> {
    let mut samples = Vec::new();
    for p in &a.data {
        require(p, "dataset")?;
        samples.extend(load_dataset(p)?);
    }
    let hints = load_hint_file(a.hint_file.as_deref())?;
    let vocab = build_vocabulary(&samples, hints.as_ref(), a.min_freq);
    vocab.save(&a.out)?;
    println!("{} tokens -> {}", vocab.len(), a.out.display());
    Ok(())
}

fn load_hint_file(path: Option<&Path>) -> Result<Option<BTreeMap<String, HintSet>>> {
    path.map(|p| {
        require(p, "hint file")?;
        Ok(load_hints(p)?)
    })
    .transpose()
}

struct Inputs {
    samples: Vec<QASample>,
    vocab: Vocabulary,
    hints: Option<BTreeMap<String, HintSet>>,
    features: Option<FeatureStore>,
}

impl Inputs {
    fn load(a: &InputArgs) -> Result<Self> {
        require(&a.data, "dataset")?;
        require(&a.vocab, "vocabulary")?;
        if let Some(f) = &a.features {
            require(f, "feature directory")?;
        }
        Ok(Inputs {
            samples: load_dataset(&a.data)?,
            vocab: Vocabulary::load(&a.vocab)?,
            hints: load_hint_file(a.hint_file.as_deref())?,
            features: a.features.as_ref().map(FeatureStore::new),
        })
    }

    fn prepare(
        &self,
        samples: &[QASample],
        pipeline: &PipelineConfig,
    ) -> Result<Vec<EncodedSample>> {
        let hints = self.hints.as_ref().map(|h| h as &dyn HintProvider);
        Ok(prepare_samples(
            samples,
            hints,
            self.features.as_ref(),
            &self.vocab,
            pipeline,
        )?)
    }
}

fn pipeline_from_flags(a: &AssemblyFlags, file: &FileConfig) -> PipelineConfig {
    let base = match a.scale {
        Scale::Desk => PipelineConfig::desk(),
        Scale::Reference => PipelineConfig::reference(),
    };
    let flags = PipelineFlags {
        hints: a.hints.map(Into::into),
        visual: a.visual.map(|v| v == Switch::On),
        max_len: a.max_len,
    };
    config::pipeline_config(base, &flags, &file.pipeline)
}

#[derive(Serialize)]
struct PreparedRecord<'a> {
    sample_id: &'a str,
    language: hintvqa::Language,
    sequence: String,
    ids: &'a [usize],
    segments: &'a [hintvqa::fusion::Segment],
    patches: usize,
}

pub fn prepare(a: &PrepareArgs) -> Result<()> {
    let file = FileConfig::load(a.assembly.config.as_deref())?;
    let pipeline = pipeline_from_flags(&a.assembly, &file);
    let inputs = Inputs::load(&a.input)?;
    let encoded = inputs.prepare(&inputs.samples, &pipeline)?;
    let records: Vec<PreparedRecord> = encoded
        .iter()
        .map(|s| PreparedRecord {
            sample_id: &s.sample_id,
            language: s.language,
            sequence: s.sequence.render(),
            ids: &s.sequence.ids,
            segments: &s.sequence.segments,
            patches: s.visual.as_ref().map_or(0, |v| v.rows()),
        })
        .collect();
    write_jsonl(&a.out, &records)?;
    println!("{} sequences -> {}", records.len(), a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct RunConfig<'a> {
    model: &'a ModelConfig,
    train: &'a TrainConfig,
    pipeline: &'a PipelineConfig,
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let file = FileConfig::load(a.assembly.config.as_deref())?;
    let pipeline = pipeline_from_flags(&a.assembly, &file);
    let inputs = Inputs::load(&a.input)?;
    let vocab_len = inputs.vocab.len();

    let (model_base, train_base) = match a.assembly.scale {
        Scale::Desk => (
            ModelConfig::desk(vocab_len),
            TrainConfig {
                batch_size: 32,
                ..TrainConfig::reference(a.seed)
            },
        ),
        Scale::Reference => (
            ModelConfig::reference(vocab_len),
            TrainConfig::reference(a.seed),
        ),
    };
    let model_cfg = config::model_config(
        model_base,
        &ModelFlags {
            embed_dim: a.embed_dim,
            hidden_units: a.hidden_units,
            encoder_layers: a.encoder_layers,
            decoder_layers: a.decoder_layers,
            dropout_keep: a.dropout_keep,
            max_decode_len: a.max_decode_len,
        },
        &file.model,
    );
    let train_cfg = config::train_config(
        train_base,
        &TrainFlags {
            epochs: a.epochs,
            learning_rate: a.lr,
            batch_size: a.batch_size,
            checkpoint_every: a.checkpoint_every,
        },
        &file.train,
    );
    model_cfg.validate()?;
    train_cfg.validate()?;

    let train_set = inputs
        .prepare(&inputs.samples, &pipeline)
        .context("preparing training set")?;
    let dev_set = match &a.dev {
        Some(p) => {
            require(p, "dev set")?;
            inputs
                .prepare(&load_dataset(p)?, &pipeline)
                .context("preparing dev set")?
        }
        None => Vec::new(),
    };
    if let Some(v) = train_set.iter().find_map(|s| s.visual.as_ref()) {
        ensure!(
            v.cols() == model_cfg.embed_dim,
            "feature width {} does not match embed_dim {}",
            v.cols(),
            model_cfg.embed_dim
        );
    }

    let model = ConvS2S::<f32>::new(model_cfg.clone(), a.seed)?;
    let run = RunConfig {
        model: &model_cfg,
        train: &train_cfg,
        pipeline: &pipeline,
    };
    write_atomic(&a.out.join("config.json"), &to_json_bytes(&run))?;
    eprintln!(
        "training {} parameters on {} samples ({} dev), hints={} visual={}",
        model.parameter_count(),
        train_set.len(),
        dev_set.len(),
        pipeline.hints,
        if pipeline.visual { "on" } else { "off" }
    );
    let output = TrainOutput {
        dir: &a.out,
        pipeline: pipeline.to_json(),
    };
    let log = trainer::train(
        &model,
        &train_set,
        &dev_set,
        &train_cfg,
        Some(&output),
        |records| {
            let parts: Vec<String> = records
                .iter()
                .map(|r| format!("{:?} {:.4}", r.split, r.loss).to_lowercase())
                .collect();
            eprintln!("epoch {:>3}  {}", records[0].epoch, parts.join("  "));
        },
    )?;
    println!("best epoch {} loss {:.6}", log.best_epoch, log.best_loss);
    for p in &log.checkpoints {
        println!("checkpoint {}", p.display());
    }
    Ok(())
}

fn load_model(path: &Path, vocab: &Vocabulary) -> Result<(ConvS2S<f32>, PipelineConfig)> {
    require(path, "checkpoint")?;
    let ck = load_checkpoint(path)?;
    let pipeline = PipelineConfig::from_json(&ck.pipeline)?;
    if ck.model.source_vocab != vocab.len() {
        bail!(
            "vocabulary has {} tokens but the checkpoint expects {}",
            vocab.len(),
            ck.model.source_vocab
        );
    }
    Ok((ck.to_model(None)?, pipeline))
}

pub fn predict(a: &PredictArgs) -> Result<()> {
    let inputs = Inputs::load(&a.input)?;
    let (model, pipeline) = load_model(&a.checkpoint, &inputs.vocab)?;
    let encoded = inputs.prepare(&inputs.samples, &pipeline)?;
    let decoded = trainer::predict(&model, &encoded, a.batch_size)?;
    let preds = encoded
        .iter()
        .zip(&decoded)
        .map(|(s, d)| {
            Ok(Prediction {
                sample_id: s.sample_id.clone(),
                answer: inputs.vocab.decode(&d.ids, true)?.join(" "),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_jsonl(&a.out, &preds)?;
    println!("{} predictions -> {}", preds.len(), a.out.display());
    Ok(())
}

/// Pairs every gold sample with its prediction, both normalized.
fn scored_pairs(predictions: &Path, gold: &Path) -> Result<Vec<ScoredPair>> {
    require(predictions, "predictions file")?;
    require(gold, "gold dataset")?;
    let gold = load_dataset(gold)?;
    let mut by_id: HashMap<String, String> = HashMap::new();
    for p in load_predictions(predictions)? {
        if by_id.insert(p.sample_id.clone(), p.answer).is_some() {
            bail!("duplicate prediction for sample {}", p.sample_id);
        }
    }
    gold.iter()
        .map(|s| {
            let answer = by_id
                .get(&s.sample_id)
                .with_context(|| format!("no prediction for sample {}", s.sample_id))?;
            Ok(ScoredPair {
                sample_id: s.sample_id.clone(),
                language: s.language,
                prediction: preprocess(answer, s.language).tokens,
                gold: preprocess(&s.answer, s.language).tokens,
            })
        })
        .collect()
}

pub fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let pairs = scored_pairs(&a.predictions, &a.gold)?;
    let report = score(&pairs)?;
    println!("samples  {}", report.samples);
    println!("f1       {:.4}", report.f1);
    for (n, b) in report.bleu.iter().enumerate() {
        println!("bleu-{}   {:.4}", n + 1, b);
    }
    println!("bleu-avg {:.4}", report.bleu_average);
    for (lang, sub) in &report.per_language {
        println!(
            "  {lang}: n={} f1={:.4} bleu-avg={:.4}",
            sub.samples, sub.f1, sub.bleu_average
        );
    }
    if let Some(out) = &a.out {
        write_atomic(out, &to_json_bytes(&report))?;
    }
    if let Some(path) = &a.histogram {
        let f1: Vec<_> = report
            .per_sample
            .iter()
            .map(|s| (s.language, s.f1))
            .collect();
        let bleu: Vec<_> = report
            .per_sample
            .iter()
            .map(|s| (s.language, s.bleu))
            .collect();
        let hist = BTreeMap::from([
            ("f1", score_histogram(&f1, a.bin_width)?),
            ("bleu", score_histogram(&bleu, a.bin_width)?),
        ]);
        write_atomic(path, &to_json_bytes(&hist))?;
    }
    Ok(())
}

pub fn stats(a: &StatsArgs) -> Result<()> {
    let mut pairs = scored_pairs(&a.predictions, &a.gold)?;
    if let Some(n) = a.limit {
        pairs.truncate(n);
    }
    let stats = quantitative_stats(&pairs);
    let bytes = to_json_bytes(&stats);
    match &a.out {
        Some(out) => write_atomic(out, &bytes)?,
        None => print!("{}", String::from_utf8_lossy(&bytes)),
    }
    Ok(())
}

pub fn export_attention(a: &ExportAttentionArgs) -> Result<()> {
    let inputs = Inputs::load(&a.input)?;
    let (model, pipeline) = load_model(&a.checkpoint, &inputs.vocab)?;
    let n = a.limit.min(inputs.samples.len());
    let encoded = inputs.prepare(&inputs.samples[..n], &pipeline)?;
    let decoded = trainer::predict(&model, &encoded, 16)?;
    let written = export_attention_artifacts(&encoded, &decoded, &inputs.vocab, &a.out)?;
    println!(
        "{} files for {} samples -> {}",
        written.len(),
        n,
        a.out.display()
    );
    Ok(())
}
