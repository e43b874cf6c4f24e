//! Full dual-encoder model: configuration, the parameter bundle, the
//! combined training objective, and single-pair inference.

use crate::contrastive::{
    classifier_logits_graph, classify, contrastive_loss_graph, cosine_similarity, predict_label,
    similarity_logits_graph, ClassifierNodes, ClassifierParams, ContrastiveConfig,
};
use crate::encoders::{
    encode_image, encode_text, TextConfig, TextNodes, TextParams, VisualConfig, VisualNodes,
    VisualParams,
};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Graph, NodeId, Tensor};

/// Relative weights of the two loss terms.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub contrastive: f64,
    pub classification: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            contrastive: 1.0,
            classification: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub visual: VisualConfig,
    pub text: TextConfig,
    pub contrastive: ContrastiveConfig,
    pub classifier_hidden: usize,
    pub weights: LossWeights,
}

impl ModelConfig {
    /// Small configuration that trains on one CPU core in minutes.
    pub fn desk() -> Self {
        ModelConfig {
            visual: VisualConfig {
                image_size: 32,
                channels: 3,
                patch_size: 8,
                model_dim: 64,
                heads: 4,
                layers: 2,
                mlp_ratio: 4,
                proj_dim: 32,
                dropout_rate: 0.2,
            },
            text: TextConfig {
                max_len: 16,
                model_dim: 64,
                heads: 4,
                layers: 2,
                mlp_ratio: 4,
                proj_dim: 32,
                max_relative_distance: 16,
                dropout_rate: 0.2,
            },
            contrastive: ContrastiveConfig {
                temperature: 0.1,
                learnable_scale: false,
            },
            classifier_hidden: 128,
            weights: LossWeights::default(),
        }
    }

    /// The published configuration: 224x224 images in 32x32 patches,
    /// 768-wide encoders with 12 heads, 256-wide shared space.
    pub fn paper() -> Self {
        ModelConfig {
            visual: VisualConfig {
                image_size: 224,
                channels: 3,
                patch_size: 32,
                model_dim: 768,
                heads: 12,
                layers: 12,
                mlp_ratio: 4,
                proj_dim: 256,
                dropout_rate: 0.2,
            },
            text: TextConfig {
                max_len: 64,
                model_dim: 768,
                heads: 12,
                layers: 12,
                mlp_ratio: 4,
                proj_dim: 256,
                max_relative_distance: 16,
                dropout_rate: 0.2,
            },
            contrastive: ContrastiveConfig {
                temperature: 0.1,
                learnable_scale: false,
            },
            classifier_hidden: 128,
            weights: LossWeights::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.visual.validate()?;
        self.text.validate()?;
        self.contrastive.validate()?;
        if self.visual.proj_dim != self.text.proj_dim {
            return Err(Error::Config(format!(
                "projection dims differ: visual {} vs text {}",
                self.visual.proj_dim, self.text.proj_dim
            )));
        }
        if self.classifier_hidden == 0 {
            return Err(Error::Config("classifier hidden width must be positive".into()));
        }
        if self.weights.contrastive < 0.0 || self.weights.classification < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Every learnable tensor of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub visual: VisualParams,
    pub text: TextParams,
    pub classifier: ClassifierParams,
    /// Log of the similarity scale when it is trainable.
    pub log_scale: Option<Tensor>,
}

impl ModelParams {
    pub fn init(cfg: &ModelConfig, vocab_size: usize, rng: &mut Rng) -> Self {
        ModelParams {
            visual: VisualParams::init(&cfg.visual, rng),
            text: TextParams::init(&cfg.text, vocab_size, rng),
            classifier: ClassifierParams::init(cfg.visual.proj_dim, cfg.classifier_hidden, rng),
            log_scale: cfg.contrastive.learnable_scale.then(|| {
                Tensor::from_vec(vec![1], vec![(1.0 / cfg.contrastive.temperature).ln()]).unwrap()
            }),
        }
    }

    /// All parameters in a fixed, deterministic order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visual.visit(&mut out);
        self.text.visit(&mut out);
        self.classifier.visit(&mut out);
        if let Some(s) = &self.log_scale {
            out.push(("contrastive.log_scale".into(), s));
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        self.visual.visit_mut(&mut out);
        self.text.visit_mut(&mut out);
        self.classifier.visit_mut(&mut out);
        if let Some(s) = &mut self.log_scale {
            out.push(("contrastive.log_scale".into(), s));
        }
        out
    }

    /// Clones all parameters into a named set, for the gradient checker.
    pub fn to_param_set(&self) -> Vec<(String, Tensor)> {
        self.named()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect()
    }

    /// Copies values back from a set produced by [`Self::to_param_set`].
    pub fn assign(&mut self, set: &[(String, Tensor)]) -> Result<()> {
        let mut named = self.named_mut();
        if named.len() != set.len() {
            return Err(Error::Contract(format!(
                "parameter set size {} does not match model ({})",
                set.len(),
                named.len()
            )));
        }
        for ((name, tensor), (set_name, set_tensor)) in named.iter_mut().zip(set) {
            if name != set_name || tensor.shape() != set_tensor.shape() {
                return Err(Error::Contract(format!(
                    "parameter mismatch: {name} {:?} vs {set_name} {:?}",
                    tensor.shape(),
                    set_tensor.shape()
                )));
            }
            tensor.data_mut().copy_from_slice(set_tensor.data());
        }
        Ok(())
    }

    pub fn register(&self, g: &mut Graph) -> ModelNodes {
        ModelNodes {
            visual: self.visual.register(g),
            text: self.text.register(g),
            classifier: self.classifier.register(g),
            log_scale: self
                .log_scale
                .as_ref()
                .map(|s| g.param("contrastive.log_scale", s)),
        }
    }
}

pub struct ModelNodes {
    pub visual: VisualNodes,
    pub text: TextNodes,
    pub classifier: ClassifierNodes,
    pub log_scale: Option<NodeId>,
}

/// One training example already lowered to model inputs.
#[derive(Debug, Clone)]
pub struct BatchItem {
    pub image: Tensor,
    pub tokens: Vec<usize>,
    pub valid: usize,
    pub label: usize,
}

/// Result of one batched forward pass.
#[derive(Debug)]
pub struct BatchOutput {
    /// Combined scalar objective, ready for `backward`.
    pub loss: NodeId,
    pub loss_value: f64,
    pub contrastive_value: f64,
    pub classification_value: f64,
    /// Argmax of the classifier logits, per example.
    pub predictions: Vec<usize>,
}

/// Builds the full forward graph for a batch: both encoders per
/// example, the scaled similarity matrix with the symmetric contrastive
/// loss, the classifier cross-entropy against gold labels, and their
/// weighted sum. A contrastive weight of zero skips the similarity
/// branch entirely (the no-contrastive ablation).
pub fn batch_forward(
    g: &mut Graph,
    params: &ModelParams,
    cfg: &ModelConfig,
    items: &[&BatchItem],
    training: bool,
    rng: &mut Rng,
) -> Result<BatchOutput> {
    if items.is_empty() {
        return Err(Error::Batch("empty batch".into()));
    }
    let use_contrastive = cfg.weights.contrastive != 0.0;
    if use_contrastive && items.len() < 2 {
        return Err(Error::Batch(
            "contrastive loss needs at least 2 examples per batch".into(),
        ));
    }
    let nodes = params.register(g);

    let mut y_rows = Vec::with_capacity(items.len());
    let mut z_rows = Vec::with_capacity(items.len());
    let mut label_rows = Vec::with_capacity(items.len());
    let mut labels = Vec::with_capacity(items.len());
    for item in items.iter() {
        let y = encode_image(g, &item.image, &cfg.visual, &nodes.visual, training, rng)?;
        let z = encode_text(
            g,
            &item.tokens,
            item.valid,
            &cfg.text,
            &nodes.text,
            training,
            rng,
        )?;
        label_rows.push(classifier_logits_graph(g, y, z, &nodes.classifier)?);
        y_rows.push(y);
        z_rows.push(z);
        labels.push(item.label);
    }

    let mut contrastive_value = 0.0;
    let mut terms: Vec<NodeId> = Vec::new();
    if use_contrastive {
        let y_mat = g.concat_rows(&y_rows)?;
        let z_mat = g.concat_rows(&z_rows)?;
        let logits =
            similarity_logits_graph(g, y_mat, z_mat, &cfg.contrastive, nodes.log_scale)?;
        let l_con = contrastive_loss_graph(g, logits)?;
        contrastive_value = g.value(l_con).data()[0];
        terms.push(g.scale(l_con, cfg.weights.contrastive));
    }

    let label_logits = g.concat_rows(&label_rows)?;
    let l_cls = g.cross_entropy_rows(label_logits, &labels)?;
    let classification_value = g.value(l_cls).data()[0];
    let predictions = g
        .value(label_logits)
        .data()
        .chunks(crate::contrastive::NUM_CLASSES)
        .map(predict_label)
        .collect();
    if cfg.weights.classification != 0.0 {
        terms.push(g.scale(l_cls, cfg.weights.classification));
    }

    let mut loss = match terms.first() {
        Some(&t) => t,
        None => g.scale(l_cls, 0.0),
    };
    for &t in terms.iter().skip(1) {
        loss = g.add(loss, t)?;
    }

    Ok(BatchOutput {
        loss,
        loss_value: g.value(loss).data()[0],
        contrastive_value,
        classification_value,
        predictions,
    })
}

/// Inference result for one image-text pair.
#[derive(Debug, Clone)]
pub struct PairPrediction {
    pub label: usize,
    pub probs: Vec<f64>,
    pub image_embedding: Vec<f64>,
    pub text_embedding: Vec<f64>,
    pub cosine: f64,
}

/// Dropout-free forward of a single pair: embeddings, their cosine,
/// label probabilities, and the predicted label.
pub fn predict_pair(
    params: &ModelParams,
    cfg: &ModelConfig,
    image: &Tensor,
    tokens: &[usize],
    valid: usize,
) -> Result<PairPrediction> {
    let mut rng = Rng::new(0);
    let mut g = Graph::new();
    let nodes = params.register(&mut g);
    let y = encode_image(&mut g, image, &cfg.visual, &nodes.visual, false, &mut rng)?;
    let z = encode_text(&mut g, tokens, valid, &cfg.text, &nodes.text, false, &mut rng)?;
    let y_t = g.value(y).clone();
    let z_t = g.value(z).clone();
    let probs = classify(&y_t, &z_t, &params.classifier)?;
    Ok(PairPrediction {
        label: predict_label(&probs),
        probs,
        cosine: cosine_similarity(y_t.data(), z_t.data())?,
        image_embedding: y_t.data().to_vec(),
        text_embedding: z_t.data().to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Desk-shaped but much smaller, for fast unit tests.
    pub fn tiny_config() -> ModelConfig {
        let mut cfg = ModelConfig::desk();
        cfg.visual.image_size = 8;
        cfg.visual.patch_size = 4;
        cfg.visual.model_dim = 16;
        cfg.visual.heads = 2;
        cfg.visual.layers = 1;
        cfg.visual.proj_dim = 8;
        cfg.text.max_len = 6;
        cfg.text.model_dim = 16;
        cfg.text.heads = 2;
        cfg.text.layers = 1;
        cfg.text.proj_dim = 8;
        cfg.text.max_relative_distance = 4;
        cfg.classifier_hidden = 12;
        cfg
    }

    pub fn tiny_batch(cfg: &ModelConfig, n: usize, rng: &mut Rng) -> Vec<BatchItem> {
        (0..n)
            .map(|i| {
                let image = Tensor::randn(
                    vec![cfg.visual.image_size, cfg.visual.image_size, cfg.visual.channels],
                    0.5,
                    rng,
                );
                let valid = 2 + rng.next_range(cfg.text.max_len - 2);
                let mut tokens: Vec<usize> =
                    (0..valid).map(|_| 2 + rng.next_range(8)).collect();
                tokens.resize(cfg.text.max_len, 0);
                BatchItem {
                    image,
                    tokens,
                    valid,
                    label: i % crate::contrastive::NUM_CLASSES,
                }
            })
            .collect()
    }

    #[test]
    fn batch_forward_runs_and_counts_predictions() {
        let cfg = tiny_config();
        let mut rng = Rng::new(1);
        let params = ModelParams::init(&cfg, 10, &mut rng);
        let items = tiny_batch(&cfg, 4, &mut rng);
        let refs: Vec<&BatchItem> = items.iter().collect();
        let mut g = Graph::new();
        let out = batch_forward(&mut g, &params, &cfg, &refs, true, &mut rng).unwrap();
        assert_eq!(out.predictions.len(), 4);
        assert!(out.loss_value.is_finite());
        assert!(out.contrastive_value > 0.0);
        assert!(out.classification_value > 0.0);
        let grads = g.backward(out.loss).unwrap();
        assert_eq!(grads.len(), params.named().len());
    }

    #[test]
    fn contrastive_needs_two_examples() {
        let cfg = tiny_config();
        let mut rng = Rng::new(2);
        let params = ModelParams::init(&cfg, 10, &mut rng);
        let items = tiny_batch(&cfg, 1, &mut rng);
        let refs: Vec<&BatchItem> = items.iter().collect();
        let mut g = Graph::new();
        let err = batch_forward(&mut g, &params, &cfg, &refs, true, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Batch(_)));

        // with the contrastive term ablated a singleton batch is fine
        let mut ablated = cfg.clone();
        ablated.weights.contrastive = 0.0;
        let mut g = Graph::new();
        assert!(batch_forward(&mut g, &params, &ablated, &refs, true, &mut rng).is_ok());
    }

    #[test]
    fn ablated_loss_is_classification_only() {
        let cfg = tiny_config();
        let mut rng = Rng::new(3);
        let params = ModelParams::init(&cfg, 10, &mut rng);
        let items = tiny_batch(&cfg, 3, &mut rng);
        let refs: Vec<&BatchItem> = items.iter().collect();
        let mut ablated = cfg.clone();
        ablated.weights.contrastive = 0.0;
        let mut g = Graph::new();
        let mut eval_rng = Rng::new(7);
        let out = batch_forward(&mut g, &params, &ablated, &refs, false, &mut eval_rng).unwrap();
        assert_eq!(out.contrastive_value, 0.0);
        assert!((out.loss_value - out.classification_value).abs() < 1e-15);
    }

    #[test]
    fn same_seed_same_loss() {
        let cfg = tiny_config();
        let mut rng = Rng::new(4);
        let params = ModelParams::init(&cfg, 10, &mut rng);
        let items = tiny_batch(&cfg, 3, &mut rng);
        let refs: Vec<&BatchItem> = items.iter().collect();
        let run = |seed: u64| {
            let mut g = Graph::new();
            let mut rng = Rng::new(seed);
            batch_forward(&mut g, &params, &cfg, &refs, true, &mut rng)
                .unwrap()
                .loss_value
        };
        assert_eq!(run(11).to_bits(), run(11).to_bits());
        assert_ne!(run(11).to_bits(), run(12).to_bits());
    }

    #[test]
    fn learnable_scale_registers_a_parameter() {
        let mut cfg = tiny_config();
        cfg.contrastive.learnable_scale = true;
        let mut rng = Rng::new(5);
        let params = ModelParams::init(&cfg, 10, &mut rng);
        let s = params.log_scale.as_ref().unwrap();
        assert!((s.data()[0] - 10.0f64.ln()).abs() < 1e-12);
        let items = tiny_batch(&cfg, 2, &mut rng);
        let refs: Vec<&BatchItem> = items.iter().collect();
        let mut g = Graph::new();
        let out = batch_forward(&mut g, &params, &cfg, &refs, true, &mut rng).unwrap();
        let grads = g.backward(out.loss).unwrap();
        assert!(grads.contains_key("contrastive.log_scale"));
    }

    #[test]
    fn predict_pair_reports_consistent_fields() {
        let cfg = tiny_config();
        let mut rng = Rng::new(6);
        let params = ModelParams::init(&cfg, 10, &mut rng);
        let item = &tiny_batch(&cfg, 1, &mut rng)[0];
        let pred = predict_pair(&params, &cfg, &item.image, &item.tokens, item.valid).unwrap();
        assert_eq!(pred.probs.len(), crate::contrastive::NUM_CLASSES);
        assert!((pred.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(pred.label, crate::contrastive::predict_label(&pred.probs));
        assert!((-1.0..=1.0).contains(&pred.cosine));
        let norm: f64 = pred.image_embedding.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
    }

    #[test]
    fn assign_round_trips_parameters() {
        let cfg = tiny_config();
        let mut rng = Rng::new(7);
        let params = ModelParams::init(&cfg, 10, &mut rng);
        let mut other = ModelParams::init(&cfg, 10, &mut Rng::new(8));
        assert_ne!(params, other);
        other.assign(&params.to_param_set()).unwrap();
        assert_eq!(params, other);
    }
}
