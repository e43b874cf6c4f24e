//! Training loop, evaluation, and checkpoint persistence.

mod adam;
mod checkpoint;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use checkpoint::{ArrayData, ArrayEntry, Checkpoint};

use std::fs;
use std::io::Write;
use std::path::PathBuf;

use crate::data::Example;
use crate::encoders::{tokenize, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{batch_forward, predict_pair, BatchItem, ModelConfig, ModelParams};
use crate::rng::Rng;
use crate::tensor::{Graph, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub adam: AdamHyper,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub shuffle: bool,
    /// Minimum token frequency for the vocabulary.
    pub min_freq: usize,
    /// Where per-epoch checkpoints and the epoch log go; nothing is
    /// written when unset.
    pub out_dir: Option<PathBuf>,
}

impl TrainConfig {
    pub fn desk() -> Self {
        TrainConfig {
            model: ModelConfig::desk(),
            adam: AdamHyper::default(),
            epochs: 50,
            batch_size: 16,
            seed: 42,
            shuffle: true,
            min_freq: 1,
            out_dir: None,
        }
    }

    pub fn paper() -> Self {
        TrainConfig {
            model: ModelConfig::paper(),
            adam: AdamHyper::default(),
            epochs: 20,
            batch_size: 32,
            seed: 42,
            shuffle: true,
            min_freq: 2,
            out_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.adam.validate()?;
        if self.min_freq == 0 {
            return Err(Error::Config("min_freq must be at least 1".into()));
        }
        let needs_pairs = self.model.weights.contrastive != 0.0;
        if needs_pairs && self.batch_size < 2 {
            return Err(Error::Config(
                "batch_size must be at least 2 when the contrastive loss is active".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }

    /// Reproducible `key = value` snapshot of every setting except the
    /// output directory (artifacts stay path-free).
    pub fn config_lines(&self) -> String {
        let m = &self.model;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        kv("seed", self.seed.to_string());
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("shuffle", self.shuffle.to_string());
        kv("min_freq", self.min_freq.to_string());
        kv("learning_rate", self.adam.learning_rate.to_string());
        kv("beta1", self.adam.beta1.to_string());
        kv("beta2", self.adam.beta2.to_string());
        kv("adam_eps", self.adam.eps.to_string());
        kv("temperature", m.contrastive.temperature.to_string());
        kv("learnable_scale", m.contrastive.learnable_scale.to_string());
        kv("contrastive_weight", m.weights.contrastive.to_string());
        kv("classification_weight", m.weights.classification.to_string());
        kv("image_size", m.visual.image_size.to_string());
        kv("channels", m.visual.channels.to_string());
        kv("patch_size", m.visual.patch_size.to_string());
        kv("visual_dim", m.visual.model_dim.to_string());
        kv("visual_heads", m.visual.heads.to_string());
        kv("visual_layers", m.visual.layers.to_string());
        kv("visual_mlp_ratio", m.visual.mlp_ratio.to_string());
        kv("max_len", m.text.max_len.to_string());
        kv("text_dim", m.text.model_dim.to_string());
        kv("text_heads", m.text.heads.to_string());
        kv("text_layers", m.text.layers.to_string());
        kv("text_mlp_ratio", m.text.mlp_ratio.to_string());
        kv("max_relative_distance", m.text.max_relative_distance.to_string());
        kv("proj_dim", m.visual.proj_dim.to_string());
        kv("classifier_hidden", m.classifier_hidden.to_string());
        kv("dropout_rate", m.visual.dropout_rate.to_string());
        s
    }

    /// Full checkpoint text: config lines plus the vocabulary, one
    /// `vocab = token` line per id in id order.
    pub fn to_config_text(&self, vocab: &Vocabulary) -> String {
        let mut s = self.config_lines();
        for token in vocab.tokens() {
            s.push_str("vocab = ");
            s.push_str(token);
            s.push('\n');
        }
        s
    }

    /// Parses the text written by [`Self::to_config_text`]. Every
    /// config key must be present exactly once.
    pub fn from_config_text(text: &str) -> Result<(TrainConfig, Vocabulary)> {
        let mut cfg = TrainConfig::desk();
        cfg.out_dir = None;
        let mut tokens = Vec::new();
        let mut seen = std::collections::BTreeSet::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key = value, got \"{line}\"")))?;
            let (key, value) = (key.trim(), value.trim());
            if key == "vocab" {
                tokens.push(value.to_string());
                continue;
            }
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("duplicate config key \"{key}\"")));
            }
            apply_key(&mut cfg, key, value)?;
        }
        let required = 29;
        if seen.len() != required {
            return Err(Error::Config(format!(
                "config snapshot has {} keys, expected {required}",
                seen.len()
            )));
        }
        Ok((cfg, Vocabulary::from_tokens(tokens)))
    }
}

/// Applies one `key = value` setting onto a [`TrainConfig`]. Shared by
/// the checkpoint snapshot parser and the CLI override mechanism.
pub fn apply_key(cfg: &mut TrainConfig, key: &str, value: &str) -> Result<()> {
    fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
        value
            .parse()
            .map_err(|_| Error::Config(format!("cannot parse {key} value \"{value}\"")))
    }
    let m = &mut cfg.model;
    match key {
        "seed" => cfg.seed = parse(key, value)?,
        "epochs" => cfg.epochs = parse(key, value)?,
        "batch_size" => cfg.batch_size = parse(key, value)?,
        "shuffle" => cfg.shuffle = parse(key, value)?,
        "min_freq" => cfg.min_freq = parse(key, value)?,
        "learning_rate" => cfg.adam.learning_rate = parse(key, value)?,
        "beta1" => cfg.adam.beta1 = parse(key, value)?,
        "beta2" => cfg.adam.beta2 = parse(key, value)?,
        "adam_eps" => cfg.adam.eps = parse(key, value)?,
        "temperature" => m.contrastive.temperature = parse(key, value)?,
        "learnable_scale" => m.contrastive.learnable_scale = parse(key, value)?,
        "contrastive_weight" => m.weights.contrastive = parse(key, value)?,
        "classification_weight" => m.weights.classification = parse(key, value)?,
        "image_size" => m.visual.image_size = parse(key, value)?,
        "channels" => m.visual.channels = parse(key, value)?,
        "patch_size" => m.visual.patch_size = parse(key, value)?,
        "visual_dim" => m.visual.model_dim = parse(key, value)?,
        "visual_heads" => m.visual.heads = parse(key, value)?,
        "visual_layers" => m.visual.layers = parse(key, value)?,
        "visual_mlp_ratio" => m.visual.mlp_ratio = parse(key, value)?,
        "max_len" => m.text.max_len = parse(key, value)?,
        "text_dim" => m.text.model_dim = parse(key, value)?,
        "text_heads" => m.text.heads = parse(key, value)?,
        "text_layers" => m.text.layers = parse(key, value)?,
        "text_mlp_ratio" => m.text.mlp_ratio = parse(key, value)?,
        "max_relative_distance" => m.text.max_relative_distance = parse(key, value)?,
        "proj_dim" => {
            let p: usize = parse(key, value)?;
            m.visual.proj_dim = p;
            m.text.proj_dim = p;
        }
        "classifier_hidden" => m.classifier_hidden = parse(key, value)?,
        "dropout_rate" => {
            let d: f64 = parse(key, value)?;
            m.visual.dropout_rate = d;
            m.text.dropout_rate = d;
        }
        other => return Err(Error::UnknownKey(other.to_string())),
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    /// 1-based epoch index.
    pub epoch: usize,
    /// Mean batch loss over the epoch.
    pub mean_loss: f64,
    /// Accuracy of the classifier argmax on the training forward
    /// passes of this epoch (dropout active).
    pub train_accuracy: f64,
}

#[derive(Debug)]
pub struct TrainOutput {
    pub params: ModelParams,
    pub vocab: Vocabulary,
    pub history: Vec<EpochStats>,
}

/// Lowers one example to model inputs.
pub fn to_batch_item(example: &Example, vocab: &Vocabulary, cfg: &ModelConfig) -> BatchItem {
    let (tokens, valid) = tokenize(&example.text, vocab, cfg.text.max_len);
    BatchItem {
        image: example.image.clone(),
        tokens,
        valid,
        label: example.label,
    }
}

/// Packs the complete training state into a checkpoint.
pub fn build_checkpoint(
    cfg: &TrainConfig,
    vocab: &Vocabulary,
    params: &ModelParams,
    state: &AdamState,
    epoch: u64,
    rng: &Rng,
) -> Checkpoint {
    let mut ckpt = Checkpoint::new(cfg.to_config_text(vocab));
    for (name, tensor) in params.named() {
        ckpt.push_f64(&name, tensor.shape().to_vec(), tensor.data().to_vec());
    }
    for (name, m) in &state.m {
        ckpt.push_f64(&format!("adam.m.{name}"), vec![m.len()], m.clone());
    }
    for (name, v) in &state.v {
        ckpt.push_f64(&format!("adam.v.{name}"), vec![v.len()], v.clone());
    }
    ckpt.push_u64("adam.t", vec![1], vec![state.t]);
    ckpt.push_u64("epoch", vec![1], vec![epoch]);
    ckpt.push_u64("rng.state", vec![4], rng.state().to_vec());
    ckpt
}

/// Unpacked training state from a checkpoint.
pub struct RestoredTraining {
    pub cfg: TrainConfig,
    pub vocab: Vocabulary,
    pub params: ModelParams,
    pub state: AdamState,
    pub epoch: u64,
    pub rng: Rng,
}

pub fn restore_training(ckpt: &Checkpoint) -> Result<RestoredTraining> {
    let (cfg, vocab) = TrainConfig::from_config_text(&ckpt.config_text)?;
    cfg.validate()?;
    let mut params = ModelParams::init(&cfg.model, vocab.size(), &mut Rng::new(0));
    for (name, tensor) in params.named_mut() {
        let entry = ckpt.get(&name)?;
        let values = entry
            .data
            .as_f64()
            .ok_or_else(|| Error::Data(format!("array \"{name}\" has the wrong dtype")))?;
        if entry.dims != tensor.shape() {
            return Err(Error::Data(format!(
                "array \"{name}\" has dims {:?}, expected {:?}",
                entry.dims,
                tensor.shape()
            )));
        }
        tensor.data_mut().copy_from_slice(values);
    }
    let mut state = AdamState::new(&params);
    for (name, m) in state.m.iter_mut() {
        let entry = ckpt.get(&format!("adam.m.{name}"))?;
        m.copy_from_slice(entry.data.as_f64().ok_or_else(|| {
            Error::Data(format!("adam.m.{name} has the wrong dtype"))
        })?);
    }
    for (name, v) in state.v.iter_mut() {
        let entry = ckpt.get(&format!("adam.v.{name}"))?;
        v.copy_from_slice(entry.data.as_f64().ok_or_else(|| {
            Error::Data(format!("adam.v.{name} has the wrong dtype"))
        })?);
    }
    state.t = ckpt.get("adam.t")?.data.as_u64().and_then(|v| v.first().copied())
        .ok_or_else(|| Error::Data("adam.t has the wrong dtype".into()))?;
    let epoch = ckpt.get("epoch")?.data.as_u64().and_then(|v| v.first().copied())
        .ok_or_else(|| Error::Data("epoch has the wrong dtype".into()))?;
    let rng_words = ckpt
        .get("rng.state")?
        .data
        .as_u64()
        .filter(|v| v.len() == 4)
        .ok_or_else(|| Error::Data("rng.state must be 4 u64 words".into()))?;
    let rng = Rng::from_state([rng_words[0], rng_words[1], rng_words[2], rng_words[3]]);
    Ok(RestoredTraining {
        cfg,
        vocab,
        params,
        state,
        epoch,
        rng,
    })
}

/// Runs the epoch loop: seeded shuffle, batching with the short-batch
/// guard, forward, backward, Adam update, and per-epoch checkpointing.
/// `resume` continues from a checkpoint written by a previous run with
/// the same settings and data.
pub fn train(
    examples: &[Example],
    cfg: &TrainConfig,
    resume: Option<&Checkpoint>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::Data("training dataset is empty".into()));
    }
    for e in examples {
        let shape = e.image.shape();
        let expect = [
            cfg.model.visual.image_size,
            cfg.model.visual.image_size,
            cfg.model.visual.channels,
        ];
        if shape != expect {
            return Err(Error::Data(format!(
                "example \"{}\" has image shape {shape:?}, expected {expect:?}",
                e.id
            )));
        }
    }

    let (vocab, mut params, mut state, mut rng, start_epoch) = match resume {
        Some(ckpt) => {
            let restored = restore_training(ckpt)?;
            // the epoch budget may grow across resumes; everything else
            // must match for the runs to be equivalent
            let strip_epochs = |cfg: &TrainConfig| -> String {
                cfg.config_lines()
                    .lines()
                    .filter(|l| !l.starts_with("epochs ="))
                    .collect::<Vec<_>>()
                    .join("\n")
            };
            if strip_epochs(&restored.cfg) != strip_epochs(cfg) {
                return Err(Error::Config(
                    "resume checkpoint was written with different settings".into(),
                ));
            }
            (
                restored.vocab,
                restored.params,
                restored.state,
                restored.rng,
                restored.epoch as usize,
            )
        }
        None => {
            let texts: Vec<&str> = examples.iter().map(|e| e.text.as_str()).collect();
            let vocab = Vocabulary::build(&texts, cfg.min_freq)?;
            let mut rng = Rng::new(cfg.seed);
            let params = ModelParams::init(&cfg.model, vocab.size(), &mut rng);
            let state = AdamState::new(&params);
            (vocab, params, state, rng, 0)
        }
    };

    let items: Vec<BatchItem> = examples
        .iter()
        .map(|e| to_batch_item(e, &vocab, &cfg.model))
        .collect();

    if let Some(dir) = &cfg.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        if start_epoch == 0 {
            // fresh run: truncate any previous epoch log
            let log = dir.join("train_log.tsv");
            fs::write(&log, "").map_err(|e| Error::io(&log, e))?;
        }
    }

    let mut history = Vec::new();
    for epoch in start_epoch..cfg.epochs {
        let mut order: Vec<usize> = (0..items.len()).collect();
        if cfg.shuffle {
            rng.shuffle(&mut order);
        }
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        let mut correct = 0usize;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<&BatchItem> = chunk.iter().map(|&i| &items[i]).collect();
            let mut g = Graph::new();
            let out = batch_forward(&mut g, &params, &cfg.model, &batch, true, &mut rng)?;
            let grads = g.backward(out.loss)?;
            adam_step(&mut params, &grads, &mut state, &cfg.adam)?;
            loss_sum += out.loss_value;
            batches += 1;
            for (pred, &i) in out.predictions.iter().zip(chunk) {
                correct += usize::from(*pred == items[i].label);
            }
            seen += chunk.len();
        }
        let stats = EpochStats {
            epoch: epoch + 1,
            mean_loss: loss_sum / batches.max(1) as f64,
            train_accuracy: correct as f64 / seen.max(1) as f64,
        };
        if let Some(dir) = &cfg.out_dir {
            let log = dir.join("train_log.tsv");
            let mut f = fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&log)
                .map_err(|e| Error::io(&log, e))?;
            writeln!(
                f,
                "{}\t{}\t{}",
                stats.epoch, stats.mean_loss, stats.train_accuracy
            )
            .map_err(|e| Error::io(&log, e))?;
            let ckpt = build_checkpoint(cfg, &vocab, &params, &state, (epoch + 1) as u64, &rng);
            ckpt.write_to(&dir.join(format!("epoch_{:04}.ckpt", epoch + 1)))?;
        }
        history.push(stats);
    }

    if let Some(dir) = &cfg.out_dir {
        let ckpt = build_checkpoint(cfg, &vocab, &params, &state, cfg.epochs as u64, &rng);
        ckpt.write_to(&dir.join("model.ckpt"))?;
    }

    Ok(TrainOutput {
        params,
        vocab,
        history,
    })
}

/// Aligned evaluation outputs for the metrics pipeline.
#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub ids: Vec<String>,
    pub gold: Vec<usize>,
    pub predictions: Vec<usize>,
    pub probabilities: Vec<Vec<f64>>,
}

/// Dropout-free inference over a dataset, in order.
pub fn evaluate(
    params: &ModelParams,
    vocab: &Vocabulary,
    cfg: &ModelConfig,
    examples: &[Example],
) -> Result<EvalOutput> {
    let mut out = EvalOutput {
        ids: Vec::with_capacity(examples.len()),
        gold: Vec::with_capacity(examples.len()),
        predictions: Vec::with_capacity(examples.len()),
        probabilities: Vec::with_capacity(examples.len()),
    };
    for e in examples {
        let (tokens, valid) = tokenize(&e.text, vocab, cfg.text.max_len);
        let pred = predict_pair(params, cfg, &e.image, &tokens, valid)?;
        out.ids.push(e.id.clone());
        out.gold.push(e.label);
        out.predictions.push(pred.label);
        out.probabilities.push(pred.probs);
    }
    Ok(out)
}
