//! Relative-position text branch.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Graph, NodeId, Tensor};

use super::{encoder_block, TextConfig, TextNodes};

/// Full text forward: embed the valid tokens, run the encoder stack
/// with the relative-distance bias on every attention-logit matrix,
/// mean-pool over valid positions, project to the shared space,
/// L2-normalize. Returns a 1-by-proj_dim unit row.
///
/// Padding cannot influence the result: the sequence is truncated to
/// its valid length before entering the stack, which is equivalent to
/// masking PAD keys out of every softmax and excluding PAD positions
/// from the pool. An all-PAD input (valid = 0) skips the stack; the
/// pooled state is the zero vector, so the head bias alone reaches the
/// normalizer and a zero bias surfaces as a degenerate-vector error.
pub fn encode_text(
    g: &mut Graph,
    ids: &[usize],
    valid: usize,
    cfg: &TextConfig,
    nodes: &TextNodes,
    training: bool,
    rng: &mut Rng,
) -> Result<NodeId> {
    if valid > ids.len() {
        return Err(Error::Contract(format!(
            "valid length {valid} exceeds sequence length {}",
            ids.len()
        )));
    }
    let pooled = if valid == 0 {
        g.constant(Tensor::zeros(vec![1, cfg.model_dim]))
    } else {
        let mut e = g.embed_rows(nodes.token_embedding, &ids[..valid])?;
        for block in &nodes.blocks {
            e = encoder_block(
                g,
                e,
                block,
                cfg.heads,
                Some((nodes.rel_bias_table, cfg.max_relative_distance)),
                cfg.dropout_rate,
                training,
                rng,
            )?;
        }
        g.mean_pool_rows(e, valid)?
    };
    let projected = g.matmul(pooled, nodes.head_w)?;
    let projected = g.add_row(projected, nodes.head_b)?;
    g.l2_normalize_rows(projected)
}
