//! The two transformer branches and their parameter sets.
//!
//! Both branches share the same pre-norm residual block; the visual
//! branch consumes flattened image patches with a class token and
//! absolute position embeddings, the text branch consumes token
//! embeddings with a clipped relative-distance attention bias and mean
//! pooling. Each branch ends in an affine projection head onto the
//! shared space followed by L2 normalization.

mod block;
mod text;
mod visual;
mod vocab;

pub use block::{encoder_block, BlockNodes, BlockParams};
pub use text::encode_text;
pub use visual::{embed_sequence, encode_image, patchify, unpatchify};
pub use vocab::{normalize_tokens, tokenize, Vocabulary, PAD_ID, UNK_ID};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Graph, NodeId, Tensor};

/// Layer-norm epsilon used throughout both encoders.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Standard deviation for weight-matrix initialization.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct VisualConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_ratio: usize,
    pub proj_dim: usize,
    pub dropout_rate: f64,
}

impl VisualConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.model_dim == 0 || self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model dim {} not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        if self.channels == 0 || self.proj_dim == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("zero-sized visual dimension".into()));
        }
        Ok(())
    }

    /// Patches per image side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Total patch count N.
    pub fn patch_count(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Width of one flattened patch row.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextConfig {
    pub max_len: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_ratio: usize,
    pub proj_dim: usize,
    pub max_relative_distance: usize,
    pub dropout_rate: f64,
}

impl TextConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be at least 1".into()));
        }
        if self.model_dim == 0 || self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model dim {} not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        if self.max_relative_distance == 0 {
            return Err(Error::Config("max_relative_distance must be at least 1".into()));
        }
        Ok(())
    }
}

/// Parameters of the visual branch.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualParams {
    pub patch_proj: Tensor,
    pub class_token: Tensor,
    pub pos_embedding: Tensor,
    pub blocks: Vec<BlockParams>,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

impl VisualParams {
    pub fn init(cfg: &VisualConfig, rng: &mut Rng) -> Self {
        let d = cfg.model_dim;
        VisualParams {
            patch_proj: Tensor::randn(vec![cfg.patch_dim(), d], INIT_STD, rng),
            class_token: Tensor::zeros(vec![1, d]),
            pos_embedding: Tensor::zeros(vec![cfg.patch_count() + 1, d]),
            blocks: (0..cfg.layers)
                .map(|_| BlockParams::init(d, cfg.mlp_ratio, rng))
                .collect(),
            head_w: Tensor::randn(vec![d, cfg.proj_dim], INIT_STD, rng),
            head_b: Tensor::zeros(vec![cfg.proj_dim]),
        }
    }

    pub fn register(&self, g: &mut Graph) -> VisualNodes {
        VisualNodes {
            patch_proj: g.param("visual.patch_proj", &self.patch_proj),
            class_token: g.param("visual.class_token", &self.class_token),
            pos_embedding: g.param("visual.pos_embedding", &self.pos_embedding),
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.register(g, &format!("visual.block{i}")))
                .collect(),
            head_w: g.param("visual.head_w", &self.head_w),
            head_b: g.param("visual.head_b", &self.head_b),
        }
    }

    pub fn visit<'a>(&'a self, out: &mut Vec<(String, &'a Tensor)>) {
        out.push(("visual.patch_proj".into(), &self.patch_proj));
        out.push(("visual.class_token".into(), &self.class_token));
        out.push(("visual.pos_embedding".into(), &self.pos_embedding));
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("visual.block{i}"), out);
        }
        out.push(("visual.head_w".into(), &self.head_w));
        out.push(("visual.head_b".into(), &self.head_b));
    }

    pub fn visit_mut<'a>(&'a mut self, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push(("visual.patch_proj".into(), &mut self.patch_proj));
        out.push(("visual.class_token".into(), &mut self.class_token));
        out.push(("visual.pos_embedding".into(), &mut self.pos_embedding));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("visual.block{i}"), out);
        }
        out.push(("visual.head_w".into(), &mut self.head_w));
        out.push(("visual.head_b".into(), &mut self.head_b));
    }
}

/// Graph node ids for one registration of [`VisualParams`].
pub struct VisualNodes {
    pub patch_proj: NodeId,
    pub class_token: NodeId,
    pub pos_embedding: NodeId,
    pub blocks: Vec<BlockNodes>,
    pub head_w: NodeId,
    pub head_b: NodeId,
}

/// Parameters of the text branch.
#[derive(Debug, Clone, PartialEq)]
pub struct TextParams {
    pub token_embedding: Tensor,
    pub rel_bias_table: Tensor,
    pub blocks: Vec<BlockParams>,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

impl TextParams {
    pub fn init(cfg: &TextConfig, vocab_size: usize, rng: &mut Rng) -> Self {
        let d = cfg.model_dim;
        TextParams {
            token_embedding: Tensor::randn(vec![vocab_size, d], INIT_STD, rng),
            rel_bias_table: Tensor::randn(
                vec![cfg.heads, 2 * cfg.max_relative_distance + 1],
                INIT_STD,
                rng,
            ),
            blocks: (0..cfg.layers)
                .map(|_| BlockParams::init(d, cfg.mlp_ratio, rng))
                .collect(),
            head_w: Tensor::randn(vec![d, cfg.proj_dim], INIT_STD, rng),
            head_b: Tensor::zeros(vec![cfg.proj_dim]),
        }
    }

    pub fn register(&self, g: &mut Graph) -> TextNodes {
        TextNodes {
            token_embedding: g.param("text.token_embedding", &self.token_embedding),
            rel_bias_table: g.param("text.rel_bias_table", &self.rel_bias_table),
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.register(g, &format!("text.block{i}")))
                .collect(),
            head_w: g.param("text.head_w", &self.head_w),
            head_b: g.param("text.head_b", &self.head_b),
        }
    }

    pub fn visit<'a>(&'a self, out: &mut Vec<(String, &'a Tensor)>) {
        out.push(("text.token_embedding".into(), &self.token_embedding));
        out.push(("text.rel_bias_table".into(), &self.rel_bias_table));
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("text.block{i}"), out);
        }
        out.push(("text.head_w".into(), &self.head_w));
        out.push(("text.head_b".into(), &self.head_b));
    }

    pub fn visit_mut<'a>(&'a mut self, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push(("text.token_embedding".into(), &mut self.token_embedding));
        out.push(("text.rel_bias_table".into(), &mut self.rel_bias_table));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("text.block{i}"), out);
        }
        out.push(("text.head_w".into(), &mut self.head_w));
        out.push(("text.head_b".into(), &mut self.head_b));
    }
}

/// Graph node ids for one registration of [`TextParams`].
pub struct TextNodes {
    pub token_embedding: NodeId,
    pub rel_bias_table: NodeId,
    pub blocks: Vec<BlockNodes>,
    pub head_w: NodeId,
    pub head_b: NodeId,
}
