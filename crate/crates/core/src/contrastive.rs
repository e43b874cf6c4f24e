//! Shared-space objective: temperature-scaled similarity, symmetric
//! contrastive loss, cosine similarity, and the label classifier head.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Graph, NodeId, Tensor};

/// Number of emoticon labels.
pub const NUM_CLASSES: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveConfig {
    /// Temperature dividing similarities before the softmax.
    pub temperature: f64,
    /// When set, the similarity scale is exp(s) with s a trainable
    /// parameter initialized to ln(1/temperature).
    pub learnable_scale: bool,
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// The m-by-m scaled similarity matrix of a batch; entry (i, j) is the
/// scaled dot product of the i-th image and j-th text embedding.
#[derive(Debug, Clone)]
pub struct SimilarityLogits {
    pub matrix: Tensor,
    pub batch: usize,
}

/// `v / ||v||`, rejecting norms below 1e-12.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return Err(Error::DegenerateVector { norm });
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

/// Graph form of the scaled pairwise similarity: `(Y . Z^T) * scale`,
/// where `scale` is either the fixed 1/temperature or an exp-scale node.
pub fn similarity_logits_graph(
    g: &mut Graph,
    y: NodeId,
    z: NodeId,
    cfg: &ContrastiveConfig,
    log_scale: Option<NodeId>,
) -> Result<NodeId> {
    let (ry, rz) = (g.value(y).rows(), g.value(z).rows());
    if ry != rz {
        return Err(Error::Batch(format!(
            "similarity needs matching batches, got {ry} image rows and {rz} text rows"
        )));
    }
    let zt = g.transpose(z)?;
    let raw = g.matmul(y, zt)?;
    match log_scale {
        Some(s) => {
            let scale = g.exp(s);
            g.mul_scalar(raw, scale)
        }
        None => Ok(g.scale(raw, 1.0 / cfg.temperature)),
    }
}

/// Scaled similarity matrix for already-normalized embedding rows.
pub fn similarity_logits(y: &Tensor, z: &Tensor, cfg: &ContrastiveConfig) -> Result<SimilarityLogits> {
    cfg.validate()?;
    let mut g = Graph::new();
    let yn = g.constant(y.clone());
    let zn = g.constant(z.clone());
    let logits = similarity_logits_graph(&mut g, yn, zn, cfg, None)?;
    Ok(SimilarityLogits {
        matrix: g.value(logits).clone(),
        batch: y.rows(),
    })
}

/// Symmetric cross-entropy over the similarity matrix: the mean of the
/// row-wise loss (images against texts) and the column-wise loss (texts
/// against images), each with the diagonal as the target.
pub fn contrastive_loss_graph(g: &mut Graph, logits: NodeId) -> Result<NodeId> {
    let m = g.value(logits).rows();
    if g.value(logits).cols() != m {
        return Err(Error::Batch(format!(
            "contrastive loss needs a square matrix, got {:?}",
            g.value(logits).shape()
        )));
    }
    let targets: Vec<usize> = (0..m).collect();
    let loss_rows = g.cross_entropy_rows(logits, &targets)?;
    let transposed = g.transpose(logits)?;
    let loss_cols = g.cross_entropy_rows(transposed, &targets)?;
    let total = g.add(loss_rows, loss_cols)?;
    Ok(g.scale(total, 0.5))
}

/// Scalar value of the symmetric contrastive loss.
pub fn contrastive_loss(logits: &SimilarityLogits) -> Result<f64> {
    let mut g = Graph::new();
    let node = g.constant(logits.matrix.clone());
    let loss = contrastive_loss_graph(&mut g, node)?;
    Ok(g.value(loss).data()[0])
}

/// Plain cosine similarity of two vectors.
pub fn cosine_similarity(y: &[f64], z: &[f64]) -> Result<f64> {
    if y.len() != z.len() {
        return Err(Error::ShapeMismatch {
            op: "cosine_similarity",
            left: vec![y.len()],
            right: vec![z.len()],
        });
    }
    let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nz = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    if ny < 1e-12 || nz < 1e-12 {
        return Err(Error::DegenerateVector { norm: ny.min(nz) });
    }
    let dot: f64 = y.iter().zip(z).map(|(a, b)| a * b).sum();
    Ok(dot / (ny * nz))
}

/// Classifier over the concatenated pair embedding: affine, GELU,
/// affine, softmax over the ten labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl ClassifierParams {
    pub fn init(proj_dim: usize, hidden: usize, rng: &mut Rng) -> Self {
        ClassifierParams {
            w1: Tensor::randn(vec![2 * proj_dim, hidden], super::encoders::INIT_STD, rng),
            b1: Tensor::zeros(vec![hidden]),
            w2: Tensor::randn(vec![hidden, NUM_CLASSES], super::encoders::INIT_STD, rng),
            b2: Tensor::zeros(vec![NUM_CLASSES]),
        }
    }

    pub fn register(&self, g: &mut Graph) -> ClassifierNodes {
        ClassifierNodes {
            w1: g.param("classifier.w1", &self.w1),
            b1: g.param("classifier.b1", &self.b1),
            w2: g.param("classifier.w2", &self.w2),
            b2: g.param("classifier.b2", &self.b2),
        }
    }

    pub fn visit<'a>(&'a self, out: &mut Vec<(String, &'a Tensor)>) {
        out.push(("classifier.w1".into(), &self.w1));
        out.push(("classifier.b1".into(), &self.b1));
        out.push(("classifier.w2".into(), &self.w2));
        out.push(("classifier.b2".into(), &self.b2));
    }

    pub fn visit_mut<'a>(&'a mut self, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push(("classifier.w1".into(), &mut self.w1));
        out.push(("classifier.b1".into(), &mut self.b1));
        out.push(("classifier.w2".into(), &mut self.w2));
        out.push(("classifier.b2".into(), &mut self.b2));
    }
}

pub struct ClassifierNodes {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

/// Pre-softmax label logits for one aligned pair, as a 1-by-10 row.
pub fn classifier_logits_graph(
    g: &mut Graph,
    y: NodeId,
    z: NodeId,
    nodes: &ClassifierNodes,
) -> Result<NodeId> {
    let pair = g.concat_cols(&[y, z])?;
    let hidden = g.matmul(pair, nodes.w1)?;
    let hidden = g.add_row(hidden, nodes.b1)?;
    let hidden = g.gelu(hidden);
    let logits = g.matmul(hidden, nodes.w2)?;
    g.add_row(logits, nodes.b2)
}

/// Probability vector over the ten labels for one normalized pair.
pub fn classify(y: &Tensor, z: &Tensor, params: &ClassifierParams) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let yn = g.constant(y.clone());
    let zn = g.constant(z.clone());
    let nodes = params.register(&mut g);
    let logits = classifier_logits_graph(&mut g, yn, zn, &nodes)?;
    let probs = g.softmax_rows(logits)?;
    Ok(g.value(probs).data().to_vec())
}

/// Argmax label with ties broken toward the lowest index.
pub fn predict_label(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}
